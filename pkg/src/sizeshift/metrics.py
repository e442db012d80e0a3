"""Distribution and evaluation metrics.

cmd() is differentiable and participates in the autodiff tape; the
others (linear CKA, MCC) are evaluation-only numpy routines.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NORM_EPS = 1e-12


@dataclass(frozen=True)
class CmdConfig:
    """Truncation order and support width for the moment discrepancy."""

    max_moment: int = 5
    support_width: float = 2.0  # tanh embeddings live in [-1, 1]

    def __post_init__(self):
        if self.max_moment < 2:
            raise ValueError("max_moment must be >= 2")
        if self.support_width <= 0:
            raise ValueError("support_width must be positive")


def _l2norm(x: Tensor) -> Tensor:
    return ad.sqrt_eps(ad.sum_all(ad.elementwise_pow(x, 2)), NORM_EPS)


def cmd(xp, xq, cfg: CmdConfig = CmdConfig()) -> Tensor:
    """Discrepancy between two empirical distributions of bounded rows.

    Sums the gap in means plus the gaps in central moments of order
    2..max_moment, each L2 norm scaled by 1/support_width**k. Norms are
    eps-smoothed so the result stays differentiable at zero; the value
    for identical inputs is below 1e-6 rather than exactly 0.
    """
    xp, xq = ad._as_tensor(xp), ad._as_tensor(xq)
    if xp.values.size == 0 or xq.values.size == 0:
        raise ValueError("cmd inputs must be nonempty")
    if xp.values.ndim != 2 or xq.values.ndim != 2 or xp.values.shape[1] != xq.values.shape[1]:
        raise ValueError(
            f"cmd inputs must be matrices with equal column count, "
            f"got {xp.values.shape} and {xq.values.shape}"
        )
    width = cfg.support_width
    mean_p, mean_q = ad.row_mean(xp), ad.row_mean(xq)
    total = _l2norm(mean_p - mean_q) * (1.0 / width)
    centered_p = xp - mean_p
    centered_q = xq - mean_q
    power_p, power_q = centered_p, centered_q
    for k in range(2, cfg.max_moment + 1):
        power_p = ad.mul(power_p, centered_p)
        power_q = ad.mul(power_q, centered_q)
        total = total + _l2norm(ad.row_mean(power_p) - ad.row_mean(power_q)) * (1.0 / width**k)
    return total


def central_moments(x, max_moment: int = 5) -> list:
    """Column-wise central moments of order 2..max_moment.

    Each entry k has moment[j] = mean_i (x[i, j] - mean_j)**k. A single
    row yields all-zero moments.
    """
    x = ad._as_tensor(x)
    if x.values.size == 0:
        raise ValueError("central_moments input must be nonempty")
    centered = x - ad.row_mean(x)
    return [ad.row_mean(ad.elementwise_pow(centered, k)) for k in range(2, max_moment + 1)]


class _SegmentMoments:
    """Per-segment mean and central-moment state for one side.

    Keeps the centered row powers needed by the analytic backward:
    d c_k / d x_m = (k/n) (P_{k-1}[m] - mean(P_{k-1})), with P_j the
    j-th elementwise power of the centered rows.
    """

    def __init__(self, x: np.ndarray, offsets: np.ndarray, max_moment: int):
        self.offsets = offsets
        self.counts = np.diff(offsets)
        if np.any(self.counts <= 0) or offsets[-1] != x.shape[0]:
            raise ValueError("segment offsets must cover all rows with nonempty segments")
        starts = offsets[:-1]
        mean = np.add.reduceat(x, starts, axis=0) / self.counts[:, None]
        centered = x - np.repeat(mean, self.counts, axis=0)
        self.powers = [centered]  # P_1 .. P_{max_moment-1}
        self.moments = [mean]  # c_1 (raw mean), c_2 .. c_K (central)
        p = centered
        for k in range(2, max_moment + 1):
            p = p * centered
            self.moments.append(np.add.reduceat(p, starts, axis=0) / self.counts[:, None])
            if k < max_moment:
                self.powers.append(p)

    def grad(self, coeffs: list) -> np.ndarray:
        """Rows gradient given per-segment coefficients for c_1..c_K."""
        per_seg = coeffs[0] / self.counts[:, None]
        out = np.repeat(per_seg, self.counts, axis=0)
        for k in range(2, len(coeffs) + 1):
            gk = np.repeat(coeffs[k - 1] * (k / self.counts[:, None]), self.counts, axis=0)
            pk1 = self.powers[k - 2]
            # mean of P_1 is zero by centering; higher means equal c_{k-1}
            if k == 2:
                out += gk * pk1
            else:
                mk1 = np.repeat(self.moments[k - 2], self.counts, axis=0)
                out += gk * (pk1 - mk1)
        return out


def batched_cmd(
    hp: Tensor,
    offsets_p: np.ndarray,
    hq: Tensor,
    offsets_q: np.ndarray,
    cfg: CmdConfig = CmdConfig(),
) -> Tensor:
    """Sum of cmd() over aligned row segments of two stacked matrices.

    Segment i of hp is compared with segment i of hq; equivalent to
    summing cmd over the pairs but fused into a single tape operation
    with an analytic backward rule.
    """
    return multi_batched_cmd(hp, offsets_p, [hq], [offsets_q], cfg)


def multi_batched_cmd(hp, offsets_p, hq_list, offsets_q_list, cfg: CmdConfig = CmdConfig()) -> Tensor:
    """Segmentwise discrepancies of one reference side against several
    comparison sides, sharing the reference moment computation.

    Returns the sum over all sides and segments; gradients flow to the
    reference rows and to every comparison side.
    """
    offsets_p = np.asarray(offsets_p, dtype=np.int64)
    offsets_q_list = [np.asarray(o, dtype=np.int64) for o in offsets_q_list]
    if len(hq_list) != len(offsets_q_list) or not hq_list:
        raise ValueError("need one offsets array per comparison side")
    for o in offsets_q_list:
        if len(o) != len(offsets_p):
            raise ValueError("segment counts differ between the two sides")
    k_max = cfg.max_moment
    inv_w = [cfg.support_width ** -k for k in range(1, k_max + 1)]
    side_p = _SegmentMoments(hp.values, offsets_p, k_max)
    sides_q = [
        _SegmentMoments(hq.values, o, k_max) for hq, o in zip(hq_list, offsets_q_list)
    ]
    total = 0.0
    pairs = []  # per side: list over k of (diff, smoothed norm)
    for side_q in sides_q:
        terms = []
        for k in range(k_max):
            diff = side_p.moments[k] - side_q.moments[k]
            norm = np.sqrt((diff * diff).sum(axis=1) + NORM_EPS)
            total += inv_w[k] * norm.sum()
            terms.append((diff, norm))
        pairs.append(terms)
    out_values = np.asarray(total)

    def backward(g):
        grads = []
        coeffs_p = None
        for side_q, terms in zip(sides_q, pairs):
            coeffs_q = []
            for k, (diff, norm) in enumerate(terms):
                c = (g * inv_w[k]) * diff / norm[:, None]
                coeffs_q.append(c)
            if coeffs_p is None:
                coeffs_p = coeffs_q
            else:
                coeffs_p = [a + b for a, b in zip(coeffs_p, coeffs_q)]
            grads.append(side_q.grad([-c for c in coeffs_q]))
        result = [(hp, side_p.grad(coeffs_p))]
        result.extend(zip(hq_list, grads))
        return result

    return ad._record(out_values, [hp] + list(hq_list), backward)


def linear_cka(a: np.ndarray, b: np.ndarray) -> float:
    """Linear centered kernel alignment between two representation matrices.

    Rows are paired samples; columns may differ. Returns a value in
    [0, 1]; degenerate (constant) representations give 0 with a warning
    so sweeps over seeds can proceed.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"linear_cka needs matrices with equal row count, got {a.shape}, {b.shape}")
    if a.shape[0] < 2:
        raise ValueError("linear_cka needs at least 2 rows")
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    cross = np.linalg.norm(bc.T @ ac) ** 2
    na = np.linalg.norm(ac.T @ ac)
    nb = np.linalg.norm(bc.T @ bc)
    if na == 0.0 or nb == 0.0:
        warnings.warn("degenerate (constant) representation in linear_cka; returning 0")
        return 0.0
    return float(cross / (na * nb))


def mcc(predictions, labels) -> float:
    """Matthews correlation coefficient of binary predictions.

    Returns 0 when any confusion-matrix margin is empty (the random-guess
    convention); raises on non-binary input.
    """
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise ValueError("predictions and labels must have the same length")
    if not (np.isin(p, (0, 1)).all() and np.isin(y, (0, 1)).all()):
        raise ValueError("mcc requires binary {0, 1} inputs")
    tp = int(np.sum((p == 1) & (y == 1)))
    tn = int(np.sum((p == 0) & (y == 0)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return float((tp * tn - fp * fn) / np.sqrt(denom))
