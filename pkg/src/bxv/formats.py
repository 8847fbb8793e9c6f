"""On-disk formats: config files, corpora, checkpoints, embedding archives,
trial lists, score files, loss traces and run manifests.

Every text format is line oriented and written deterministically (sorted or
insertion-ordered keys, fixed float formatting, no timestamps), so identical
inputs give byte-identical files.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from pathlib import Path

import numpy as np

from bxv import __version__
from bxv.backend import Backend, LdaModel, PldaModel, ScoreSet, TrialList
from bxv.errors import ConfigError, DataError
from bxv.features import FeatureMatrix, read_features, write_features
from bxv.numkernel import read_bxm, write_bxm
from bxv.synthdata import SynthSpec
from bxv.trainer import Corpus, Utterance
from bxv.varbayes import GaussianPosterior, GaussianPrior
from bxv.xvector import NetworkConfig, NetworkState

SEED_ENV = "BXV_SEED"


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_text(text):
    return hashlib.sha256(text.encode()).hexdigest()


# ---------------------------------------------------------------- key = value configs

def parse_kv(text, source="<config>"):
    """Ordered ``{key: (value, line_number)}`` from ``key = value`` lines."""
    out = {}
    for num, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{num}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{num}: missing key")
        if key in out:
            raise ConfigError(f"{source}:{num}: duplicate key {key!r}")
        out[key] = (value, num)
    return out


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "auto"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return "; ".join(",".join(str(x) for x in g) for g in v)
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(text, default, where):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {text!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if default is None or isinstance(default, float):
            return None if text.lower() in ("auto", "none") else float(text)
        if isinstance(default, tuple):
            if default and isinstance(default[0], tuple):
                return tuple(tuple(int(x) for x in g.split(",")) for g in text.split(";") if g.strip())
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(p) for p in parts)
            return tuple(parts)
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _profiles_from_keys(values, spec_default):
    """Collect ``profileK_offset`` / ``profileK_scale`` keys into channel profiles."""
    keys = {}
    for key, (value, num) in list(values.items()):
        if key.startswith("profile") and key.endswith(("_offset", "_scale")):
            idx, kind = key[len("profile"):].split("_", 1)
            if not idx.isdigit():
                raise ConfigError(f"line {num}: unknown key {key!r}")
            keys.setdefault(int(idx), {})[kind] = ([float(x) for x in value.split()], num)
            del values[key]
    if not keys:
        return None
    profiles = []
    for k in range(max(keys) + 1):
        if k not in keys or set(keys[k]) != {"offset", "scale"}:
            raise ConfigError(f"profile{k} needs both _offset and _scale keys")
        profiles.append((np.array(keys[k]["offset"][0]), np.array(keys[k]["scale"][0])))
    return tuple(profiles)


def build_config(cls, text="", source="<config>", overrides=None, env=None):
    """Dataclass instance with precedence overrides > env seed > file > defaults.

    ``overrides`` maps field names to already-typed values (``None`` entries are
    ignored so unset CLI flags fall through).
    """
    fields = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    values = parse_kv(text, source)
    kwargs = {}
    if cls is SynthSpec:
        profiles = _profiles_from_keys(values, defaults)
        if profiles is not None:
            kwargs["channel_profiles"] = profiles
    for key, (value, num) in values.items():
        if key not in fields or key == "channel_profiles":
            raise ConfigError(f"{source}:{num}: unknown key {key!r}")
        kwargs[key] = _coerce(value, getattr(defaults, key), f"{source}:{num}: key {key!r}")
    env = os.environ if env is None else env
    if "seed" in fields and env.get(SEED_ENV, "").strip():
        kwargs["seed"] = _coerce(env[SEED_ENV].strip(), 0, f"environment {SEED_ENV}")
    for key, value in (overrides or {}).items():
        if value is not None:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(cls, path=None, overrides=None, env=None):
    if path is None:
        return build_config(cls, "", "<defaults>", overrides, env)
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {p}")
    return build_config(cls, p.read_text(), str(p), overrides, env)


def dump_config(obj):
    """``key = value`` text that :func:`build_config` reads back to an equal object."""
    if isinstance(obj, SynthSpec):
        return "".join(f"{line.replace('=', ' = ', 1)}\n" for line in obj.describe().splitlines())
    return "".join(f"{f.name} = {_format_value(getattr(obj, f.name))}\n" for f in dataclasses.fields(obj))


# ---------------------------------------------------------------- corpora

def write_corpus(directory, corpus: Corpus, spec: SynthSpec | None = None):
    """Manifest, ``utt2spk`` and one BXM1 feature file per utterance."""
    d = Path(directory)
    (d / "feats").mkdir(parents=True, exist_ok=True)
    manifest = ["# utt_id feature_file frames dim"]
    utt2spk = []
    for u in corpus.utterances:
        rel = f"feats/{u.utt_id}.bxm"
        write_features(d / rel, FeatureMatrix(u.features))
        manifest.append(f"{u.utt_id} {rel} {u.frames} {u.features.shape[1]}")
        utt2spk.append(f"{u.utt_id} {corpus.speakers[u.speaker]}")
    (d / "manifest").write_text("\n".join(manifest) + "\n")
    (d / "utt2spk").write_text("\n".join(utt2spk) + "\n")
    (d / "spk_list").write_text("".join(s + "\n" for s in corpus.speakers))
    if spec is not None:
        (d / "synth.conf").write_text(dump_config(spec))


def _table(path, min_fields, what):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"missing {what}: {p}")
    rows = []
    for num, line in enumerate(p.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < min_fields:
            raise DataError(f"{p}:{num}: expected at least {min_fields} fields")
        rows.append((num, parts))
    return rows


def read_utt2spk(path):
    return {parts[0]: parts[1] for _, parts in _table(path, 2, "utt2spk")}


def read_corpus(directory) -> Corpus:
    d = Path(directory)
    utt2spk = read_utt2spk(d / "utt2spk")
    spk_file = d / "spk_list"
    if spk_file.is_file():
        speakers = spk_file.read_text().split()
    else:
        speakers = list(dict.fromkeys(utt2spk.values()))
    index = {s: i for i, s in enumerate(speakers)}
    utts = []
    for num, parts in _table(d / "manifest", 2, "corpus manifest"):
        utt_id, rel = parts[0], parts[1]
        if utt_id not in utt2spk:
            raise DataError(f"{d / 'manifest'}:{num}: {utt_id} has no utt2spk entry")
        if utt2spk[utt_id] not in index:
            raise DataError(f"speaker {utt2spk[utt_id]} missing from {spk_file}")
        feats = read_features(d / rel)
        utts.append(Utterance(utt_id, feats.values, index[utt2spk[utt_id]]))
    if not utts:
        raise DataError(f"corpus {d} is empty")
    dims = {u.features.shape[1] for u in utts}
    if len(dims) != 1:
        raise DataError(f"corpus {d} mixes feature dimensions {sorted(dims)}")
    return Corpus(utts, speakers)


# ---------------------------------------------------------------- checkpoints

def _layer_tensors(state: NetworkState, name):
    out = {}
    if name in state.posteriors:
        out["mu"] = state.posteriors[name].mu
        out["rho"] = state.posteriors[name].rho
        if name in state.params:
            out["bias"] = state.params[name]
        if name in state.priors:
            out["prior_mu"] = state.priors[name].mu
            out["prior_sigma"] = state.priors[name].sigma
    else:
        out["weight"] = state.params[name]
    return out


def write_checkpoint(directory, state: NetworkState, extra=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "network.conf").write_text(dump_config(state.config))
    lines = [f"bxv-checkpoint version={__version__}",
             f"config network.conf sha256={sha256_file(d / 'network.conf')}"]
    for key, value in (extra or {}).items():
        lines.append(f"meta {key}={value}")
    for spec in state.config.layers():
        kind = "tdnn" if spec.name.startswith("frame") else "affine"
        ctx = ",".join(str(c) for c in spec.context)
        lines.append(f"layer {spec.name} type={kind} in={spec.in_dim} out={spec.out_dim} "
                     f"context={ctx} variational={int(spec.variational)}")
        for tname, arr in _layer_tensors(state, spec.name).items():
            rel = f"{spec.name}.{tname}.bxm"
            write_bxm(d / rel, arr)
            lines.append(f"tensor {spec.name}.{tname} {rel} {arr.shape[0]}x{arr.shape[1]} "
                         f"sha256={sha256_file(d / rel)}")
    (d / "manifest").write_text("\n".join(lines) + "\n")


def read_checkpoint(directory) -> NetworkState:
    d = Path(directory)
    man = d / "manifest"
    if not man.is_file():
        raise DataError(f"not a checkpoint directory (no manifest): {d}")
    conf_path = d / "network.conf"
    config = load_config(NetworkConfig, conf_path, env={})
    tensors = {}
    for num, line in enumerate(man.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "config":
            if parts[2] != f"sha256={sha256_file(conf_path)}":
                raise DataError(f"{man}:{num}: network.conf hash mismatch")
        elif parts[0] == "tensor":
            name, rel, shape, digest = parts[1:5]
            path = d / rel
            if not path.is_file():
                raise DataError(f"{man}:{num}: missing tensor file {rel}")
            if digest != f"sha256={sha256_file(path)}":
                raise DataError(f"{man}:{num}: content hash mismatch for {rel}")
            arr = read_bxm(path)
            if "x".join(map(str, arr.shape)) != shape:
                raise DataError(f"{man}:{num}: {rel} has shape {arr.shape}, manifest says {shape}")
            tensors[name] = arr
    state = NetworkState(config)
    for spec in config.layers():
        n = spec.name
        try:
            if spec.variational:
                state.posteriors[n] = GaussianPosterior(tensors[f"{n}.mu"], tensors[f"{n}.rho"])
                if f"{n}.bias" in tensors:
                    state.params[n] = tensors[f"{n}.bias"]
                if f"{n}.prior_mu" in tensors:
                    state.priors[n] = GaussianPrior(tensors[f"{n}.prior_mu"], tensors[f"{n}.prior_sigma"])
            else:
                state.params[n] = tensors[f"{n}.weight"]
        except KeyError as exc:
            raise DataError(f"checkpoint {d} lacks tensor {exc.args[0]}") from None
    return state


def checkpoint_meta(directory):
    """The ``meta key=value`` entries of a checkpoint manifest."""
    man = Path(directory) / "manifest"
    return dict(line.split()[1].split("=", 1) for line in man.read_text().splitlines()
                if line.startswith("meta "))


# ---------------------------------------------------------------- embedding archives

def write_embeddings(directory, embeddings: dict, utt2spk: dict | None = None, info=None):
    d = Path(directory)
    (d / "vectors").mkdir(parents=True, exist_ok=True)
    lines = [f"# {k}={v}" for k, v in (info or {}).items()]
    for utt, vec in embeddings.items():
        rel = f"vectors/{utt}.bxm"
        write_bxm(d / rel, np.asarray(vec).ravel())
        lines.append(f"{utt} {rel}")
    (d / "manifest").write_text("\n".join(lines) + "\n")
    if utt2spk is not None:
        (d / "utt2spk").write_text("".join(f"{u} {utt2spk[u]}\n" for u in embeddings))


def read_embeddings(directory):
    """(``{utt: vector}``, ``{utt: speaker}`` or None)."""
    d = Path(directory)
    out = {}
    for num, parts in _table(d / "manifest", 2, "embedding archive manifest"):
        m = read_bxm(d / parts[1])
        if m.shape[0] != 1:
            raise DataError(f"{d / parts[1]}: expected a single-row vector")
        out[parts[0]] = m[0]
    if not out:
        raise DataError(f"embedding archive {d} is empty")
    spk = d / "utt2spk"
    return out, (read_utt2spk(spk) if spk.is_file() else None)


# ---------------------------------------------------------------- trials and scores

def write_trials(path, trials: TrialList):
    rows = []
    for i, (e, t) in enumerate(trials.keys):
        if trials.labels is None:
            rows.append(f"{e} {t}")
        else:
            rows.append(f"{e} {t} {'target' if trials.labels[i] else 'nontarget'}")
    Path(path).write_text("\n".join(rows) + "\n")


def read_trials(path) -> TrialList:
    keys, labels = [], []
    for num, parts in _table(path, 2, "trial list"):
        keys.append((parts[0], parts[1]))
        if len(parts) >= 3:
            if parts[2] not in ("target", "nontarget"):
                raise DataError(f"{path}:{num}: label must be target or nontarget, got {parts[2]!r}")
            labels.append(parts[2] == "target")
    if labels and len(labels) != len(keys):
        raise DataError(f"{path}: some trials are labelled and some are not")
    if not keys:
        raise DataError(f"{path}: no trials")
    return TrialList(keys, labels or None)


def write_scores(path, scores: ScoreSet):
    Path(path).write_text("".join(f"{e} {t} {s:.6f}\n" for (e, t), s in zip(scores.keys, scores.scores)))


def read_scores(path) -> ScoreSet:
    keys, vals = [], []
    for num, parts in _table(path, 3, "score file"):
        keys.append((parts[0], parts[1]))
        try:
            vals.append(float(parts[2]))
        except ValueError:
            raise DataError(f"{path}:{num}: bad score {parts[2]!r}") from None
    return ScoreSet(keys, vals)


def labels_for(scores: ScoreSet, trials: TrialList):
    if trials.labels is None:
        raise DataError("trial list has no target/nontarget labels")
    lab = dict(zip(trials.keys, trials.labels))
    missing = [k for k in scores.keys if k not in lab]
    if missing:
        raise DataError(f"{len(missing)} scored trials are not in the trial list, e.g. {' '.join(missing[0])}")
    return np.array([lab[k] for k in scores.keys])


# ---------------------------------------------------------------- back-end models

def write_backend(directory, be: Backend):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {"lda_mean": be.lda.mean, "lda_projection": be.lda.projection}
    if be.plda is not None:
        arrays.update(plda_mean=be.plda.mean, plda_between=be.plda.between_cov, plda_within=be.plda.within_cov)
    lines = [f"kind={be.kind}", f"lda_dim={be.lda.out_dim}",
             f"length_norm={int(be.plda.length_norm) if be.plda else 0}"]
    for name, arr in arrays.items():
        write_bxm(d / f"{name}.bxm", arr)
        lines.append(f"tensor {name}.bxm sha256={sha256_file(d / f'{name}.bxm')}")
    (d / "manifest").write_text("\n".join(lines) + "\n")


def read_backend(directory) -> Backend:
    d = Path(directory)
    man = d / "manifest"
    if not man.is_file():
        raise DataError(f"not a back-end directory: {d}")
    head = {}
    for line in man.read_text().splitlines():
        if line.startswith("tensor "):
            _, rel, digest = line.split()
            if digest != f"sha256={sha256_file(d / rel)}":
                raise DataError(f"{man}: content hash mismatch for {rel}")
        elif "=" in line:
            k, v = line.split("=", 1)
            head[k] = v

    def arr(name, row=False):
        m = read_bxm(d / f"{name}.bxm")
        return m[0] if row else m

    lda = LdaModel(arr("lda_mean", True), arr("lda_projection"))
    plda = None
    if head.get("kind") == "plda":
        plda = PldaModel(arr("plda_mean", True), arr("plda_between"), arr("plda_within"),
                         head.get("length_norm") == "1")
    return Backend(head.get("kind", "cosine"), lda, plda)


# ---------------------------------------------------------------- traces and manifests

def write_loss_csv(path, trace):
    rows = ["epoch,kl_term,nll_term,total,accuracy"]
    rows += [f"{r.epoch},{r.kl_term:.6f},{r.nll_term:.6f},{r.total:.6f},{r.accuracy:.6f}" for r in trace]
    Path(path).write_text("\n".join(rows) + "\n")


def write_run_manifest(directory, command, seed, inputs=None, configs=None):
    """``run.manifest``: version, command, seed and content hashes (no timestamps)."""
    lines = [f"version = {__version__}", f"command = {command}", f"seed = {seed}"]
    for key, path in (inputs or {}).items():
        lines.append(f"input.{key} = {path}")
    for key, text in (configs or {}).items():
        lines.append(f"config.{key}.sha256 = {sha256_text(text)}")
    Path(directory, "run.manifest").write_text("\n".join(lines) + "\n")
