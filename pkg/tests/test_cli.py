import hashlib
from pathlib import Path

import pytest

from bxv.cli import main


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


SMALL = "num_speakers = 4\nutts_per_speaker = 4\nmin_frames = 120\nmax_frames = 160\n"


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """One small end-to-end pipeline shared by the tests below."""
    root = tmp_path_factory.mktemp("pipeline")
    (root / "synth.conf").write_text(SMALL)
    rc = [
        main(["synth", "--spec", str(root / "synth.conf"), "--out", str(root / "train"), "--domain", "A", "--tag", "tr"]),
        main(["synth", "--spec", str(root / "synth.conf"), "--out", str(root / "eval"), "--domain", "A", "--tag", "ev",
              "--seed", "99"]),
        main(["train", "--corpus", str(root / "train"), "--out", str(root / "base"), "--epochs", "3"]),
        main(["train", "--corpus", str(root / "train"), "--out", str(root / "bayes"), "--epochs", "3", "--bayesian",
              "--baseline-ckpt", str(root / "base" / "checkpoint")]),
    ]
    for sys_name in ("base", "bayes"):
        ck = str(root / sys_name / "checkpoint")
        rc.append(main(["extract", "--ckpt", ck, "--corpus", str(root / "train"), "--out", str(root / f"{sys_name}_emb_tr")]))
        rc.append(main(["extract", "--ckpt", ck, "--corpus", str(root / "eval"), "--out", str(root / f"{sys_name}_emb_ev")]))
        rc.append(main(["backend", "--embeddings", str(root / f"{sys_name}_emb_tr"), "--kind", "plda",
                        "--out", str(root / f"{sys_name}_plda")]))
        rc.append(main(["score", "--backend", str(root / f"{sys_name}_plda"), "--embeddings",
                        str(root / f"{sys_name}_emb_ev"), "--trials", str(root / "eval" / "trials"),
                        "--out", str(root / f"{sys_name}.scores")]))
    rc.append(main(["fuse", str(root / "base.scores"), str(root / "bayes.scores"), "--out", str(root / "fused.scores")]))
    return root, rc


def test_pipeline_exit_codes(run):
    _, rc = run
    assert rc == [0] * len(rc)


def test_synth_layout(run):
    root, _ = run
    d = root / "train"
    assert (d / "manifest").is_file() and (d / "utt2spk").is_file() and (d / "run.manifest").is_file()
    assert len(list((d / "feats").glob("*.bxm"))) == 16
    assert len((d / "trials").read_text().splitlines()) == 16 * 15 // 2


def test_synth_rerun_identical(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "a")]) == 0
    assert main(["synth", "--out", str(tmp_path / "b")]) == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")


def test_env_seed_override(tmp_path, monkeypatch):
    (tmp_path / "s.conf").write_text(SMALL + "seed = 1\n")
    monkeypatch.setenv("BXV_SEED", "5")
    assert main(["synth", "--spec", str(tmp_path / "s.conf"), "--out", str(tmp_path / "a")]) == 0
    assert "seed = 5" in (tmp_path / "a" / "synth.conf").read_text()
    assert main(["synth", "--spec", str(tmp_path / "s.conf"), "--out", str(tmp_path / "b"), "--seed", "2"]) == 0
    assert "seed = 2" in (tmp_path / "b" / "synth.conf").read_text()


def test_invalid_spec_key(tmp_path, capsys):
    (tmp_path / "bad.conf").write_text("num_speakers = 4\nspeakres = 3\n")
    assert main(["synth", "--spec", str(tmp_path / "bad.conf"), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "speakres" in err and "bad.conf:2" in err


def test_train_outputs(run):
    root, _ = run
    rows = (root / "base" / "loss.csv").read_text().splitlines()
    assert rows[0] == "epoch,kl_term,nll_term,total,accuracy"
    assert len(rows) - 1 == 3
    assert (root / "bayes" / "checkpoint" / "frame1.prior_mu.bxm").is_file()
    assert "meta prior=baseline" in (root / "bayes" / "checkpoint" / "manifest").read_text()


def test_bayesian_needs_sigma_p(run, capsys):
    root, _ = run
    rc = main(["train", "--corpus", str(root / "train"), "--out", str(root / "x"), "--bayesian"])
    assert rc == 1
    assert "--sigma-p" in capsys.readouterr().err


def test_bayesian_default_prior(run):
    root, _ = run
    rc = main(["train", "--corpus", str(root / "train"), "--out", str(root / "bx"), "--bayesian",
               "--sigma-p", "0.2", "--epochs", "1"])
    assert rc == 0
    assert "meta prior=init" in (root / "bx" / "checkpoint" / "manifest").read_text()


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["eval", "--scores", "x"]) == 1


def test_missing_input_is_data_error(tmp_path):
    assert main(["train", "--corpus", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2


def test_extract(run, tmp_path):
    root, _ = run
    ck = str(root / "bayes" / "checkpoint")
    ev = str(root / "eval")
    for name, extra in (("m1", []), ("m2", []), ("s1", ["--mode", "sample", "--seed", "1"]),
                        ("s2", ["--mode", "sample", "--seed", "2"])):
        assert main(["extract", "--ckpt", ck, "--corpus", ev, "--out", str(tmp_path / name)] + extra) == 0
    assert len(list((tmp_path / "m1" / "vectors").glob("*.bxm"))) == 16
    assert tree_hash(tmp_path / "m1") == tree_hash(tmp_path / "m2")
    assert tree_hash(tmp_path / "s1") != tree_hash(tmp_path / "s2")


def test_eval_report_and_p_targets(run, tmp_path, capsys):
    root, _ = run
    rc = main(["eval", "--scores", str(root / "base.scores"), "--trials", str(root / "eval" / "trials"),
               "--p-target", "0.01", "--p-target", "0.001", "--out", str(tmp_path / "r.txt")])
    assert rc == 0
    lines = (tmp_path / "r.txt").read_text().splitlines()
    assert lines[0].startswith("eer=") and lines[0].endswith("p_target=0.01")
    assert lines[1].endswith("p_target=0.001")


def test_fuse_with_itself_same_metrics(run, tmp_path, capsys):
    root, _ = run
    trials = str(root / "eval" / "trials")
    assert main(["fuse", str(root / "base.scores"), str(root / "base.scores"), "--out", str(tmp_path / "ff")]) == 0
    main(["eval", "--scores", str(root / "base.scores"), "--trials", trials, "--out", str(tmp_path / "a")])
    main(["eval", "--scores", str(tmp_path / "ff"), "--trials", trials, "--out", str(tmp_path / "b")])
    assert (tmp_path / "a").read_text() == (tmp_path / "b").read_text()


def test_fuse_mismatch(run, tmp_path, capsys):
    root, _ = run
    lines = (root / "base.scores").read_text().splitlines()
    (tmp_path / "short").write_text("\n".join(lines[:-1]) + "\n")
    assert main(["fuse", str(root / "base.scores"), str(tmp_path / "short"), "--out", str(tmp_path / "o")]) == 2
    assert lines[-1].rsplit(" ", 1)[0] in capsys.readouterr().err


def test_det(run, tmp_path):
    root, _ = run
    rc = main(["det", "--scores", str(root / "fused.scores"), "--trials", str(root / "eval" / "trials"),
               "--csv", str(tmp_path / "det.csv"), "--svg", str(tmp_path / "det.svg")])
    assert rc == 0
    assert (tmp_path / "det.csv").read_text().startswith("threshold,p_fa,p_miss,probit_fa,probit_miss\n")
    assert (tmp_path / "det.svg").read_text().startswith("<svg")


def test_unresolved_trials(run, tmp_path, capsys):
    root, _ = run
    (tmp_path / "t").write_text("ghost-1 ghost-2 target\n")
    rc = main(["score", "--backend", str(root / "base_plda"), "--embeddings", str(root / "base_emb_ev"),
               "--trials", str(tmp_path / "t"), "--out", str(tmp_path / "s")])
    assert rc == 2
    assert "ghost-1" in capsys.readouterr().err


def test_rerun_byte_identical(run, tmp_path):
    root, _ = run
    rc = main(["train", "--corpus", str(root / "train"), "--out", str(tmp_path / "base"), "--epochs", "3"])
    assert rc == 0
    assert tree_hash(tmp_path / "base") == tree_hash(root / "base")
