"""``bxv`` multitool: synth, train, extract, backend, score, eval, fuse, det.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from bxv import __version__
from bxv.backend import fit_backend, fuse_scores, score_trials
from bxv.errors import ConfigError, DataError, NumericalError
from bxv.experiment import all_pairs_trials, embed_corpus
from bxv.formats import (
    dump_config,
    labels_for,
    load_config,
    read_backend,
    read_checkpoint,
    read_corpus,
    read_embeddings,
    read_scores,
    read_trials,
    write_backend,
    write_checkpoint,
    write_corpus,
    write_embeddings,
    write_loss_csv,
    write_run_manifest,
    write_scores,
    write_trials,
)
from bxv.metrics import det_csv, det_curve, det_svg, evaluate, format_report
from bxv.numkernel import RngStream
from bxv.synthdata import SynthSpec, generate_corpus, make_domain_pair
from bxv.trainer import TrainConfig, train_baseline, train_bayesian
from bxv.xvector import NetworkConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _out_dir(path):
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------- subcommands

def cmd_synth(args):
    spec = load_config(SynthSpec, args.spec, {"seed": args.seed})
    out = _out_dir(args.out)
    if args.domain == "all":
        corpus = generate_corpus(spec)
    else:
        a, b = make_domain_pair(spec, tag=args.tag)
        corpus = a if args.domain == "A" else b
    write_corpus(out, corpus, spec)
    write_trials(out / "trials", all_pairs_trials(corpus))
    write_run_manifest(out, f"synth domain={args.domain} tag={args.tag}", spec.seed,
                       configs={"synth": dump_config(spec)})
    print(f"wrote {len(corpus)} utterances from {corpus.num_speakers} speakers to {out}")


TRAIN_FLAGS = ("lr", "momentum", "epochs", "minibatch_size", "chunk_min", "chunk_max",
               "mc_samples", "kl_weight", "seed")


def cmd_train(args):
    if args.bayesian and args.baseline_ckpt is None and args.sigma_p is None:
        raise UsageError("train: --bayesian without --baseline-ckpt requires --sigma-p")
    if not args.bayesian and (args.baseline_ckpt or args.sigma_p is not None):
        raise UsageError("train: --baseline-ckpt and --sigma-p only apply with --bayesian")
    corpus = read_corpus(args.corpus)
    train_over = {k: getattr(args, k) for k in TRAIN_FLAGS}
    train_over["sigma_p"] = args.sigma_p
    train_cfg = load_config(TrainConfig, args.train_config, train_over)
    net_cfg = load_config(NetworkConfig, args.net_config,
                          {"feature_dim": corpus.feature_dim, "num_speakers": corpus.num_speakers})
    out = _out_dir(args.out)
    if args.bayesian:
        baseline = read_checkpoint(args.baseline_ckpt) if args.baseline_ckpt else None
        if baseline is not None and baseline.config.deterministic() != net_cfg.deterministic():
            raise DataError("baseline checkpoint does not match the network config")
        result = train_bayesian(corpus, net_cfg, train_cfg, baseline=baseline)
        kind = "bayesian"
    else:
        net_cfg = net_cfg.deterministic()
        result = train_baseline(corpus, net_cfg, train_cfg)
        kind = "baseline"
    meta = {"kind": kind, "sigma_p": repr(train_cfg.sigma_p), "seed": train_cfg.seed,
            "prior": "baseline" if args.baseline_ckpt else ("init" if args.bayesian else "none")}
    write_checkpoint(out / "checkpoint", result.state, meta)
    write_loss_csv(out / "loss.csv", result.trace)
    (out / "train.conf").write_text(dump_config(train_cfg))
    write_run_manifest(out, f"train {kind}", train_cfg.seed,
                       {"corpus": args.corpus, "baseline_ckpt": args.baseline_ckpt or "none"},
                       {"train": dump_config(train_cfg), "network": dump_config(net_cfg)})
    last = result.trace[-1]
    print(f"{kind} epochs={last.epoch} total={last.total:.4f} kl={last.kl_term:.4f} "
          f"nll={last.nll_term:.4f} accuracy={last.accuracy:.4f}")


def cmd_extract(args):
    state = read_checkpoint(args.ckpt)
    corpus = read_corpus(args.corpus)
    if corpus.feature_dim != state.config.feature_dim:
        raise DataError(f"corpus feature dim {corpus.feature_dim} != checkpoint {state.config.feature_dim}")
    if args.j < 1:
        raise UsageError("extract: --j must be >= 1")
    rng = RngStream(args.seed) if args.mode == "sample" else None
    emb = embed_corpus(state, corpus, args.mode, rng, args.j)
    utt2spk = {u.utt_id: corpus.speakers[u.speaker] for u in corpus.utterances}
    info = {"mode": args.mode, "j": args.j, "seed": args.seed if args.mode == "sample" else "none"}
    write_embeddings(args.out, emb, utt2spk, info)
    print(f"wrote {len(emb)} embeddings of dim {state.config.embed_dim} to {args.out}")


def cmd_backend(args):
    emb, utt2spk = read_embeddings(args.embeddings)
    if utt2spk is None:
        raise DataError(f"{args.embeddings} has no utt2spk; speaker labels are needed to fit a back-end")
    dims = {v.size for v in emb.values()}
    if len(dims) > 1:
        raise DataError(f"mixed embedding dimensions {sorted(dims)}")
    x = np.array(list(emb.values()))
    labels = [utt2spk[u] for u in emb]
    be = fit_backend(args.kind, x, labels, args.lda_dim, args.plda_iters, args.length_norm)
    write_backend(args.out, be)
    print(f"{args.kind} back-end with LDA dim {be.lda.out_dim} written to {args.out}")


def cmd_score(args):
    be = read_backend(args.backend)
    emb, _ = read_embeddings(args.embeddings)
    scores = score_trials(be, read_trials(args.trials), emb)
    write_scores(args.out, scores)
    print(f"scored {len(scores.keys)} trials into {args.out}")


def _labelled(args):
    scores = read_scores(args.scores)
    return scores, labels_for(scores, read_trials(args.trials))


def cmd_eval(args):
    scores, labels = _labelled(args)
    p_targets = args.p_target or [0.01]
    text = format_report(evaluate(scores.scores, labels, p_targets, args.c_miss, args.c_fa))
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_fuse(args):
    fused = fuse_scores(read_scores(args.a), read_scores(args.b))
    write_scores(args.out, fused)
    print(f"fused {len(fused.keys)} trials into {args.out}")


def cmd_det(args):
    scores, labels = _labelled(args)
    pts = det_curve(scores.scores, labels)
    Path(args.csv).write_text(det_csv(pts))
    if args.svg:
        Path(args.svg).write_text(det_svg(pts, title=Path(args.scores).name))
    print(f"{len(pts)} DET points written to {args.csv}")


# ---------------------------------------------------------------- parser

def build_parser():
    p = Parser(prog="bxv", description="Bayesian x-vector speaker verification toolkit")
    p.add_argument("--version", action="version", version=f"bxv {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--spec", help="synth config (key = value)")
    s.add_argument("--out", required=True)
    s.add_argument("--domain", choices=("all", "A", "B"), default="all")
    s.add_argument("--tag", default="")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a baseline or Bayesian extractor")
    t.add_argument("--corpus", required=True)
    t.add_argument("--net-config")
    t.add_argument("--train-config")
    t.add_argument("--out", required=True)
    t.add_argument("--bayesian", action="store_true")
    t.add_argument("--baseline-ckpt")
    t.add_argument("--sigma-p", type=float)
    for name in TRAIN_FLAGS:
        kind = int if name in ("epochs", "minibatch_size", "chunk_min", "chunk_max", "mc_samples", "seed") else float
        t.add_argument("--" + name.replace("_", "-"), dest=name, type=kind)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="extract segment6 embeddings")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--mode", choices=("mean", "sample"), default="mean")
    e.add_argument("--j", type=int, default=1)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_extract)

    b = sub.add_parser("backend", help="fit LDA + cosine or LDA + PLDA")
    b.add_argument("--embeddings", required=True)
    b.add_argument("--kind", choices=("cosine", "plda"), required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--lda-dim", type=int)
    b.add_argument("--plda-iters", type=int, default=20)
    b.add_argument("--length-norm", action="store_true")
    b.set_defaults(func=cmd_backend)

    c = sub.add_parser("score", help="score a trial list")
    c.add_argument("--backend", required=True)
    c.add_argument("--embeddings", required=True)
    c.add_argument("--trials", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_score)

    v = sub.add_parser("eval", help="EER and min-DCF report")
    v.add_argument("--scores", required=True)
    v.add_argument("--trials", required=True)
    v.add_argument("--p-target", type=float, action="append")
    v.add_argument("--c-miss", type=float, default=1.0)
    v.add_argument("--c-fa", type=float, default=1.0)
    v.add_argument("--out")
    v.set_defaults(func=cmd_eval)

    f = sub.add_parser("fuse", help="average two score files")
    f.add_argument("a")
    f.add_argument("b")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fuse)

    d = sub.add_parser("det", help="DET curve as CSV (and optional SVG)")
    d.add_argument("--scores", required=True)
    d.add_argument("--trials", required=True)
    d.add_argument("--csv", required=True)
    d.add_argument("--svg")
    d.set_defaults(func=cmd_det)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
        return EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
