"""Scoring back-ends: LDA, cosine, two-covariance PLDA and score fusion."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from bxv.errors import DataError, NumericalError, ShapeError
from bxv.numkernel import cholesky, floor_eigenvalues, logdet_spd, solve_spd, sym_eig

log = logging.getLogger(__name__)

EIG_FLOOR = 1e-8
SW_REG = 1e-6
NORM_EPS = 1e-12
LDA_DIM_COSINE = 150
LDA_DIM_PLDA = 200


def _sym(a):
    return 0.5 * (a + a.T)


def _group(embeddings, labels):
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"embeddings must be 2-D, got shape {x.shape}")
    labels = np.asarray(labels)
    if labels.shape != (x.shape[0],):
        raise ShapeError(f"{labels.size} labels for {x.shape[0]} embeddings")
    classes, inv = np.unique(labels, return_inverse=True)
    return x, classes, inv


# ---------------------------------------------------------------- LDA

@dataclass(frozen=True)
class LdaModel:
    mean: np.ndarray
    projection: np.ndarray  # (out_dim, in_dim)

    @property
    def out_dim(self):
        return self.projection.shape[0]

    @property
    def in_dim(self):
        return self.projection.shape[1]


def scatter_matrices(x, inv, num_classes):
    mean = x.mean(axis=0)
    sw = np.zeros((x.shape[1], x.shape[1]))
    sb = np.zeros_like(sw)
    for c in range(num_classes):
        xc = x[inv == c]
        mc = xc.mean(axis=0)
        d = xc - mc
        sw += d.T @ d
        sb += len(xc) * np.outer(mc - mean, mc - mean)
    return mean, sw / len(x), sb / len(x)


def lda_fit(embeddings, labels, out_dim) -> LdaModel:
    x, classes, inv = _group(embeddings, labels)
    counts = np.bincount(inv)
    if len(classes) < 2:
        raise DataError("LDA needs at least 2 classes")
    if counts.max() < 2:
        raise DataError("LDA needs at least 2 samples in some class")
    if out_dim < 1:
        raise DataError(f"out_dim must be >= 1, got {out_dim}")
    limit = min(x.shape[1], len(classes) - 1)
    if out_dim > limit:
        log.warning("LDA out_dim %d clamped to %d", out_dim, limit)
        out_dim = limit
    mean, sw, sb = scatter_matrices(x, inv, len(classes))
    sw = sw + SW_REG * np.trace(sw) / sw.shape[0] * np.eye(sw.shape[0])
    low = cholesky(sw)  # raises if still singular
    # whiten S_w, then an ordinary symmetric problem: L^-1 S_b L^-T u = lam u
    li = np.linalg.solve(low, np.eye(len(low)))
    _, u = sym_eig(_sym(li @ sb @ li.T))
    proj = (li.T @ u[:, :out_dim]).T
    return LdaModel(mean, np.ascontiguousarray(proj))


def lda_project(model: LdaModel, embedding):
    e = np.asarray(embedding, dtype=np.float64)
    if e.shape[-1] != model.in_dim:
        raise ShapeError(f"embedding dim {e.shape[-1]} != LDA input dim {model.in_dim}")
    return (e - model.mean) @ model.projection.T


def fisher_ratio(values, labels):
    """Between/within variance ratio of a 1-D projection."""
    v = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    _, classes, inv = _group(v, labels)
    _, sw, sb = scatter_matrices(v, inv, len(classes))
    return float(sb[0, 0] / sw[0, 0])


# ---------------------------------------------------------------- cosine

def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare vectors of dim {a.size} and {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise DataError("cosine score of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def length_normalize(x):
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n <= NORM_EPS):
        raise DataError("cannot length-normalize a zero-norm vector")
    return x * np.sqrt(x.shape[-1]) / n


# ---------------------------------------------------------------- PLDA

@dataclass(frozen=True)
class PldaModel:
    mean: np.ndarray
    between_cov: np.ndarray
    within_cov: np.ndarray
    length_norm: bool = False

    @property
    def dim(self):
        return self.mean.shape[0]


def _speaker_stats(x, inv, num):
    n = np.bincount(inv, minlength=num).astype(np.float64)
    sums = np.zeros((num, x.shape[1]))
    np.add.at(sums, inv, x)
    return n, sums


def plda_loglik(x, inv, mean, b, w):
    """Total log-likelihood of grouped data under the two-covariance model."""
    num = inv.max() + 1
    d = x.shape[1]
    n, sums = _speaker_stats(x, inv, num)
    xbar = sums / n[:, None]
    dev = x - xbar[inv]
    ld_w = logdet_spd(w)
    total = -0.5 * len(x) * d * np.log(2 * np.pi)
    total -= 0.5 * float(np.sum(dev * solve_spd(w, dev.T).T))
    for i in range(num):
        c = w + n[i] * b
        r = xbar[i] - mean
        total -= 0.5 * (n[i] - 1) * ld_w + 0.5 * logdet_spd(c)
        total -= 0.5 * n[i] * float(r @ solve_spd(c, r))
    return float(total)


def plda_fit(embeddings, labels, iters=20, length_norm=False):
    """EM for e = mean + y + eps, y ~ N(0, between), eps ~ N(0, within).

    The mean stays at the global sample mean. Returns (model, loglik trace)
    where the trace holds the log-likelihood after each iteration.
    """
    x, classes, inv = _group(embeddings, labels)
    if length_norm:
        x = length_normalize(x)
    counts = np.bincount(inv)
    if np.sum(counts >= 2) < 2:
        raise DataError("PLDA needs at least 2 speakers with at least 2 utterances each")
    num, d = len(classes), x.shape[1]
    mean = x.mean(axis=0)
    xc = x - mean
    n, sums = _speaker_stats(xc, inv, num)
    xbar = sums / n[:, None]
    dev = xc - xbar[inv]
    w = floor_eigenvalues(_sym(dev.T @ dev / len(x)), EIG_FLOOR)
    b = floor_eigenvalues(_sym(xbar.T @ xbar / num), EIG_FLOOR)
    trace = []
    for it in range(iters):
        b_new = np.zeros((d, d))
        w_new = dev.T @ dev
        b_inv = solve_spd(b, np.eye(d))
        w_inv = solve_spd(w, np.eye(d))
        for i in range(num):
            cov = solve_spd(_sym(b_inv + n[i] * w_inv), np.eye(d))
            m = cov @ (w_inv @ sums[i])
            b_new += cov + np.outer(m, m)
            # sum_j (x_j - m)(x_j - m)^T = dev part + n (xbar - m)(xbar - m)^T
            r = xbar[i] - m
            w_new += n[i] * (np.outer(r, r) + cov)
        b = floor_eigenvalues(_sym(b_new / num), EIG_FLOOR)
        w = floor_eigenvalues(_sym(w_new / len(x)), EIG_FLOOR)
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(w))):
            raise NumericalError(f"PLDA EM diverged at iteration {it + 1}")
        trace.append(plda_loglik(xc, inv, np.zeros(d), b, w))
    return PldaModel(mean, _sym(b), _sym(w), length_norm), trace


def _gauss_logpdf(z, cov):
    return -0.5 * (len(z) * np.log(2 * np.pi) + logdet_spd(cov) + float(z @ solve_spd(cov, z)))


def plda_score(model: PldaModel, enroll, test) -> float:
    e = np.asarray(enroll, dtype=np.float64).ravel()
    t = np.asarray(test, dtype=np.float64).ravel()
    if e.size != model.dim or t.size != model.dim:
        raise ShapeError(f"PLDA model dim {model.dim}, got {e.size} and {t.size}")
    if model.length_norm:
        e, t = length_normalize(e), length_normalize(t)
    b, w = model.between_cov, model.within_cov
    tot = b + w
    z = np.concatenate([e - model.mean, t - model.mean])
    same = np.block([[tot, b], [b, tot]])
    zero = np.zeros_like(b)
    diff = np.block([[tot, zero], [zero, tot]])
    return _gauss_logpdf(z, same) - _gauss_logpdf(z, diff)


# ---------------------------------------------------------------- trials and scores

@dataclass
class TrialList:
    keys: list  # (enroll, test) pairs
    labels: list | None = None  # True for target, absent for unlabeled lists

    def __len__(self):
        return len(self.keys)


@dataclass
class ScoreSet:
    keys: list
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.keys) != len(self.scores):
            raise DataError(f"{len(self.keys)} keys but {len(self.scores)} scores")
        if len(set(self.keys)) != len(self.keys):
            raise DataError("duplicate trial keys in score set")
        if not np.all(np.isfinite(self.scores)):
            raise DataError("non-finite score")

    def as_dict(self):
        return dict(zip(self.keys, self.scores.tolist()))


def fuse_scores(a: ScoreSet, b: ScoreSet) -> ScoreSet:
    da, db = a.as_dict(), b.as_dict()
    if da.keys() != db.keys():
        missing = sorted(set(da) ^ set(db))
        shown = ", ".join(f"{e} {t}" for e, t in missing[:10])
        more = f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""
        raise DataError(f"score sets disagree on {len(missing)} trials: {shown}{more}")
    return ScoreSet(list(a.keys), [(da[k] + db[k]) / 2 for k in a.keys])


# ---------------------------------------------------------------- full back-end

@dataclass(frozen=True)
class Backend:
    kind: str  # "cosine" or "plda"
    lda: LdaModel
    plda: PldaModel | None = None

    def score(self, enroll, test):
        e, t = lda_project(self.lda, enroll), lda_project(self.lda, test)
        if self.kind == "cosine":
            return cosine_score(e, t)
        return plda_score(self.plda, e, t)


def fit_backend(kind, embeddings, labels, lda_dim=None, plda_iters=20, length_norm=False) -> Backend:
    if kind not in ("cosine", "plda"):
        raise DataError(f"unknown back-end {kind!r}; expected cosine or plda")
    if lda_dim is None:
        lda_dim = LDA_DIM_COSINE if kind == "cosine" else LDA_DIM_PLDA
    lda = lda_fit(embeddings, labels, lda_dim)
    if kind == "cosine":
        return Backend(kind, lda)
    plda, _ = plda_fit(lda_project(lda, embeddings), labels, plda_iters, length_norm)
    return Backend(kind, lda, plda)


def score_trials(backend: Backend, trials: TrialList, embeddings: dict) -> ScoreSet:
    ids = {u for pair in trials.keys for u in pair}
    missing = sorted(ids - embeddings.keys())
    if missing:
        raise DataError(f"unresolved trial ids: {' '.join(missing)}")
    dims = {np.asarray(embeddings[u]).size for u in ids}
    if len(dims) > 1:
        raise DataError(f"mixed embedding dimensions {sorted(dims)}")
    return ScoreSet(list(trials.keys), [backend.score(embeddings[e], embeddings[t]) for e, t in trials.keys])
