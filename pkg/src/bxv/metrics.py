"""Verification metrics: EER, normalized min-DCF and DET curves.

Convention: a trial is accepted when ``score >= threshold``. The threshold
sweep runs over every distinct score plus the two trivial policies (accept
all at ``-inf``, reject all at ``+inf``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from bxv.errors import DataError

PROBIT_CLIP = 1e-6


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise DataError(f"{scores.size} scores but {labels.size} labels")
    if not np.all(np.isfinite(scores)):
        raise DataError("scores must be finite")
    tar, non = np.sort(scores[labels]), np.sort(scores[~labels])
    if tar.size == 0 or non.size == 0:
        raise DataError("need at least one target and one nontarget trial")
    return scores, tar, non


def error_rates(scores, labels):
    """(thresholds, p_miss, p_fa) with thresholds ascending, endpoints included."""
    scores, tar, non = _split(scores, labels)
    thr = np.concatenate([[-np.inf], np.unique(scores), [np.inf]])
    # counts strictly below each threshold are rejected
    p_miss = np.searchsorted(tar, thr, side="left") / tar.size
    p_fa = (non.size - np.searchsorted(non, thr, side="left")) / non.size
    return thr, p_miss, p_fa


def _crossing(p_miss, p_fa):
    d = p_miss - p_fa
    k = int(np.argmax(d >= 0))  # d runs from -1 to +1 and never decreases
    if d[k] == 0:
        return float(p_miss[k])
    t = d[k - 1] / (d[k - 1] - d[k])
    return float(p_miss[k - 1] + t * (p_miss[k] - p_miss[k - 1]))


def compute_eer(scores, labels) -> float:
    _, p_miss, p_fa = error_rates(scores, labels)
    return _crossing(p_miss, p_fa)


def compute_min_dcf(scores, labels, p_target=0.01, c_miss=1.0, c_fa=1.0) -> float:
    if not 0.0 < p_target < 1.0:
        raise DataError(f"p_target must be in (0, 1), got {p_target}")
    if c_miss <= 0 or c_fa <= 0:
        raise DataError("costs must be positive")
    _, p_miss, p_fa = error_rates(scores, labels)
    dcf = c_miss * p_miss * p_target + c_fa * p_fa * (1.0 - p_target)
    return float(dcf.min() / min(c_miss * p_target, c_fa * (1.0 - p_target)))


def det_curve(scores, labels):
    """DET points ordered by descending threshold: list of (threshold, p_fa, p_miss)."""
    thr, p_miss, p_fa = error_rates(scores, labels)
    return [(float(t), float(f), float(m)) for t, f, m in zip(thr[::-1], p_fa[::-1], p_miss[::-1])]


def eer_from_det(points) -> float:
    p_fa = np.array([p[1] for p in points])[::-1]
    p_miss = np.array([p[2] for p in points])[::-1]
    return _crossing(p_miss, p_fa)


def probit(p):
    return norm.ppf(np.clip(p, PROBIT_CLIP, 1.0 - PROBIT_CLIP))


@dataclass
class MetricsReport:
    eer: float
    min_dcf: float
    p_target: float
    c_miss: float = 1.0
    c_fa: float = 1.0
    det_points: list = field(default_factory=list, repr=False)

    def line(self):
        return f"eer={100 * self.eer:.4f}% min_dcf={self.min_dcf:.4f} p_target={self.p_target:g}"


def evaluate(scores, labels, p_targets=(0.01,), c_miss=1.0, c_fa=1.0):
    eer = compute_eer(scores, labels)
    det = det_curve(scores, labels)
    return [MetricsReport(eer, compute_min_dcf(scores, labels, p, c_miss, c_fa), p, c_miss, c_fa, det)
            for p in p_targets]


def format_report(reports):
    return "".join(r.line() + "\n" for r in reports)


def det_csv(points):
    rows = ["threshold,p_fa,p_miss,probit_fa,probit_miss"]
    for t, f, m in points:
        pf, pm = probit([f, m])
        rows.append(f"{t:.6f},{f:.6f},{m:.6f},{pf:.6f},{pm:.6f}")
    return "\n".join(rows) + "\n"


def det_svg(points, size=400, title="DET"):
    """Standalone SVG of the curve on probit axes."""
    lim = float(norm.ppf(1.0 - PROBIT_CLIP))
    pad = 40

    def xy(f, m):
        pf, pm = probit([f, m])
        x = pad + (pf + lim) / (2 * lim) * (size - 2 * pad)
        y = size - pad - (pm + lim) / (2 * lim) * (size - 2 * pad)
        return f"{x:.2f},{y:.2f}"

    path = " ".join(xy(f, m) for _, f, m in points)
    inner = size - 2 * pad
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">\n'
        f'<rect x="{pad}" y="{pad}" width="{inner}" height="{inner}" fill="none" stroke="black"/>\n'
        f'<polyline points="{path}" fill="none" stroke="blue"/>\n'
        f'<text x="{size // 2}" y="{size - 8}" text-anchor="middle">false alarm (probit)</text>\n'
        f'<text x="12" y="{size // 2}" transform="rotate(-90 12 {size // 2})" text-anchor="middle">miss (probit)</text>\n'
        f'<text x="{size // 2}" y="24" text-anchor="middle">{title}</text>\n'
        "</svg>\n"
    )
