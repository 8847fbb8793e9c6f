"""Desk-scale experiment grid over two synthetic domains.

For each training domain the grid trains a baseline extractor and a Bayesian
extractor (prior centred on the baseline), fits cosine and PLDA back-ends on
training-domain embeddings, and scores all-pairs trials on held-out speakers
from each domain. Fusion averages the baseline and Bayesian scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from bxv.backend import TrialList, fit_backend, fuse_scores, score_trials
from bxv.metrics import compute_eer, compute_min_dcf
from bxv.synthdata import SynthSpec, make_domain_pair
from bxv.trainer import Corpus, TrainConfig, train_baseline, train_bayesian
from bxv.xvector import NetworkConfig, extract_embedding

SYSTEMS = ("baseline", "bayesian", "fusion")
BACKENDS = ("cosine", "plda")
DOMAINS = ("A", "B")
P_TARGETS = (0.01, 0.001)


def all_pairs_trials(corpus: Corpus) -> TrialList:
    utts = corpus.utterances
    keys, labels = [], []
    for i in range(len(utts)):
        for j in range(i + 1, len(utts)):
            keys.append((utts[i].utt_id, utts[j].utt_id))
            labels.append(utts[i].speaker == utts[j].speaker)
    return TrialList(keys, labels)


def embed_corpus(state, corpus: Corpus, mode="mean", rng=None, j_samples=1):
    return {u.utt_id: extract_embedding(state, u.features, mode, rng, j_samples) for u in corpus.utterances}


@dataclass
class GridRow:
    grid: str  # "in_domain" or "out_of_domain"
    train: str
    eval: str
    system: str
    backend: str
    eer: float
    min_dcf: dict

    def line(self):
        dcf = " ".join(f"min_dcf={self.min_dcf[p]:.4f} p_target={p:g}" for p in sorted(self.min_dcf, reverse=True))
        return (f"train={self.train} eval={self.eval} system={self.system} backend={self.backend} "
                f"eer={100 * self.eer:.4f}% {dcf}")


@dataclass
class GridResult:
    rows: list = field(default_factory=list)
    scores: dict = field(default_factory=dict)  # (train, eval, system, backend) -> ScoreSet
    accuracy: dict = field(default_factory=dict)  # (domain, extractor) -> final chunk accuracy

    def grid(self, name):
        return [r for r in self.rows if r.grid == name]

    def report(self, name):
        return "".join(r.line() + "\n" for r in self.grid(name))


@dataclass(frozen=True)
class GridConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    eval_speakers: int = 8
    eval_utts: int = 6
    net: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    lda_dim_cosine: int = 150
    lda_dim_plda: int = 200
    plda_iters: int = 20
    p_targets: tuple = P_TARGETS


def make_splits(cfg: GridConfig):
    """{domain: (train corpus, eval corpus)} with disjoint speakers everywhere."""
    a_tr, b_tr = make_domain_pair(cfg.synth, tag="train")
    eval_spec = replace(cfg.synth, num_speakers=cfg.eval_speakers, utts_per_speaker=cfg.eval_utts,
                        seed=cfg.synth.seed + 7919)
    a_ev, b_ev = make_domain_pair(eval_spec, tag="eval")
    return {"A": (a_tr, a_ev), "B": (b_tr, b_ev)}


def run_grid(cfg: GridConfig = GridConfig(), out_dir=None, log=None) -> GridResult:
    splits = make_splits(cfg)
    net = replace(cfg.net, feature_dim=cfg.synth.feature_dim, num_speakers=cfg.synth.num_speakers)
    trials = {d: all_pairs_trials(splits[d][1]) for d in DOMAINS}
    result = GridResult()
    for train_dom in DOMAINS:
        train_corpus = splits[train_dom][0]
        base = train_baseline(train_corpus, net, cfg.train)
        bayes = train_bayesian(train_corpus, net, cfg.train, baseline=base.state)
        result.accuracy[(train_dom, "baseline")] = base.trace[-1].accuracy
        result.accuracy[(train_dom, "bayesian")] = bayes.trace[-1].accuracy
        if log:
            log(f"train={train_dom} baseline acc={base.trace[-1].accuracy:.3f} "
                f"bayesian acc={bayes.trace[-1].accuracy:.3f}")
        labels = [u.speaker for u in train_corpus.utterances]
        for system, state in (("baseline", base.state), ("bayesian", bayes.state)):
            emb_train = embed_corpus(state, train_corpus)
            x = np.array(list(emb_train.values()))
            for backend in BACKENDS:
                dim = cfg.lda_dim_cosine if backend == "cosine" else cfg.lda_dim_plda
                be = fit_backend(backend, x, labels, dim, cfg.plda_iters)
                for eval_dom in DOMAINS:
                    emb_eval = embed_corpus(state, splits[eval_dom][1])
                    result.scores[(train_dom, eval_dom, system, backend)] = score_trials(be, trials[eval_dom], emb_eval)
        for backend in BACKENDS:
            for eval_dom in DOMAINS:
                s = result.scores
                s[(train_dom, eval_dom, "fusion", backend)] = fuse_scores(
                    s[(train_dom, eval_dom, "baseline", backend)], s[(train_dom, eval_dom, "bayesian", backend)])
    for grid in ("in_domain", "out_of_domain"):
        for train_dom in DOMAINS:
            eval_dom = train_dom if grid == "in_domain" else next(d for d in DOMAINS if d != train_dom)
            labels = np.array(trials[eval_dom].labels)
            for system in SYSTEMS:
                for backend in BACKENDS:
                    sc = result.scores[(train_dom, eval_dom, system, backend)].scores
                    result.rows.append(GridRow(
                        grid, train_dom, eval_dom, system, backend, compute_eer(sc, labels),
                        {p: compute_min_dcf(sc, labels, p) for p in cfg.p_targets}))
    if out_dir is not None:
        write_grid(out_dir, result)
    return result


def write_grid(out_dir, result: GridResult):
    from bxv.formats import write_scores

    d = Path(out_dir)
    (d / "scores").mkdir(parents=True, exist_ok=True)
    for (tr, ev, system, backend), s in sorted(result.scores.items()):
        write_scores(d / "scores" / f"train{tr}_eval{ev}_{system}_{backend}.txt", s)
    for name in ("in_domain", "out_of_domain"):
        (d / f"grid_{name}.txt").write_text(result.report(name))


def median_eers(results):
    """Median EER per (grid, system) over a list of GridResults, pooled over back-ends and directions."""
    out = {}
    for grid in ("in_domain", "out_of_domain"):
        for system in SYSTEMS:
            vals = [r.eer for res in results for r in res.grid(grid) if r.system == system]
            out[(grid, system)] = float(np.median(vals))
    return out
