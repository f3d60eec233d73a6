"""Trajectory comparison metrics: MSE, entropic OT (Sinkhorn), MMD.

MSE is particle-wise and averaged over time, particle, and spatial axes.
The distributional metrics compare per-frame position sets irrespective of
particle identity: optimal transport with squared-Euclidean ground cost,
approximated by log-domain Sinkhorn iterations (the reported value is the
transport cost <P, C>, without the entropy term), and the biased Gaussian-
kernel MMD V-statistic, which is non-negative by construction.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from gns.errors import DimensionError

DEFAULT_MMD_BANDWIDTH = 0.1
DEFAULT_SINKHORN_ITERS = 500
DEFAULT_SINKHORN_TOL = 1e-9
MAX_METRIC_PARTICLES = 1000


def mse(pred, truth) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"mse shapes differ: {pred.shape} vs {truth.shape}")
    diff = pred - truth
    return float(np.mean(diff * diff))


def _sq_dists(a, b) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _logsumexp(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


@dataclass
class SinkhornResult:
    cost: float
    converged: bool
    iterations: int
    marginal_error: float


def sinkhorn_ot(a, b, reg: float | None = None,
                iters: int = DEFAULT_SINKHORN_ITERS,
                tol: float = DEFAULT_SINKHORN_TOL,
                full: bool = False, anneal: bool = True):
    """Entropic-OT transport cost between two uniform point clouds.

    reg defaults to 1e-3 times the mean ground cost. Plain iterations at
    such a small regularizer converge very slowly, so the potentials are
    warm-started by annealing reg down geometrically from the mean cost
    (disable with anneal=False). Non-convergence is not an error; with
    full=True the result carries a converged flag and the final marginal
    violation.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    n, m = a.shape[0], b.shape[0]
    if n == 0 or m == 0:
        raise DimensionError("sinkhorn_ot needs non-empty point sets")
    cost = _sq_dists(a, b)
    if reg is None:
        reg = max(1e-3 * float(cost.mean()), 1e-12)
    log_wa = np.full(n, -np.log(n))
    log_wb = np.full(m, -np.log(m))

    f = np.zeros(n)
    g = np.zeros(m)

    def sweep(eps):
        nonlocal f, g
        f = -eps * _logsumexp((g[None, :] - cost) / eps + log_wb[None, :], axis=1)
        g = -eps * _logsumexp((f[:, None] - cost) / eps + log_wa[:, None], axis=0)

    def marginal_error(eps):
        plan = np.exp((f[:, None] + g[None, :] - cost) / eps
                      + log_wa[:, None] + log_wb[None, :])
        return float(np.abs(plan.sum(axis=1) - np.exp(log_wa)).sum())

    used = 0
    start = float(cost.mean()) or 1.0
    if anneal and start > reg:
        schedule = []
        eps = start
        while eps > reg * 2.0:
            schedule.append(eps)
            eps /= 2.0
        budget = max(iters // 2, 1)
        per_stage = max(budget // max(len(schedule), 1), 1)
        for eps in schedule:
            for _ in range(per_stage):
                sweep(eps)
                used += 1

    converged = False
    err = np.inf
    while used < iters:
        sweep(reg)
        used += 1
        if used % 10 == 0 or used == iters:
            err = marginal_error(reg)
            if err <= tol:
                converged = True
                break
    plan = np.exp((f[:, None] + g[None, :] - cost) / reg
                  + log_wa[:, None] + log_wb[None, :])
    value = float((plan * cost).sum())
    if full:
        return SinkhornResult(value, converged, used, err)
    return value


def mmd(a, b, sigma: float = DEFAULT_MMD_BANDWIDTH) -> float:
    """Biased Gaussian-kernel MMD^2 between two point sets (always >= 0)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DimensionError("mmd needs non-empty point sets")
    scale = -0.5 / (sigma * sigma)
    k_aa = np.exp(scale * _sq_dists(a, a)).mean()
    k_bb = np.exp(scale * _sq_dists(b, b)).mean()
    k_ab = np.exp(scale * _sq_dists(a, b)).mean()
    return max(float(k_aa + k_bb - 2.0 * k_ab), 0.0)


@dataclass
class MetricReport:
    """Aggregate values plus per-timestep curves for one prediction/truth pair."""

    kind: str = "rollout"
    values: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    ot_converged: bool | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["curves"] = {k: [float(v) for v in curve] for k, curve in self.curves.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def curves_csv(self) -> str:
        names = sorted(self.curves)
        length = max((len(c) for c in self.curves.values()), default=0)
        lines = ["timestep," + ",".join(names)]
        for t in range(length):
            row = [str(t)]
            for name in names:
                curve = self.curves[name]
                row.append(repr(float(curve[t])) if t < len(curve) else "")
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def _subsample(points, limit, rng):
    if points.shape[0] <= limit:
        return points
    idx = rng.choice(points.shape[0], size=limit, replace=False)
    return points[idx]


def evaluate(pred, truth, which=("mse", "ot", "mmd"), materials=None,
             exclude_boundary: bool = True, mmd_sigma: float = DEFAULT_MMD_BANDWIDTH,
             sinkhorn_reg: float | None = None, subsample_seed: int = 0,
             kind: str = "rollout") -> MetricReport:
    """Compares aligned (K, N, D) position arrays frame by frame.

    Distributional metrics are computed per frame on the position sets and
    averaged; frames with more than MAX_METRIC_PARTICLES particles are
    subsampled with a seeded generator (disclosed in meta).
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"misaligned trajectories: {pred.shape} vs {truth.shape}")

    keep = slice(None)
    if exclude_boundary and materials is not None:
        from gns.features import BOUNDARY
        keep = np.asarray(materials) != BOUNDARY
    pred = pred[:, keep]
    truth = truth[:, keep]

    report = MetricReport(kind=kind)
    report.meta["n_particles"] = int(pred.shape[1])
    report.meta["num_steps"] = int(pred.shape[0])
    subsampled = pred.shape[1] > MAX_METRIC_PARTICLES
    report.meta["subsampled_to"] = MAX_METRIC_PARTICLES if subsampled else None

    if "mse" in which:
        diff = pred - truth
        curve = np.mean(diff * diff, axis=(1, 2))
        report.curves["mse"] = curve
        report.values["mse"] = float(curve.mean())

    rng = np.random.default_rng(subsample_seed)
    if "ot" in which:
        curve = np.empty(pred.shape[0])
        all_converged = True
        for t in range(pred.shape[0]):
            res = sinkhorn_ot(_subsample(pred[t], MAX_METRIC_PARTICLES, rng),
                              _subsample(truth[t], MAX_METRIC_PARTICLES, rng),
                              reg=sinkhorn_reg, full=True)
            curve[t] = res.cost
            all_converged &= res.converged
        report.curves["ot"] = curve
        report.values["ot"] = float(curve.mean())
        report.ot_converged = all_converged
    if "mmd" in which:
        curve = np.empty(pred.shape[0])
        for t in range(pred.shape[0]):
            curve[t] = mmd(_subsample(pred[t], MAX_METRIC_PARTICLES, rng),
                           _subsample(truth[t], MAX_METRIC_PARTICLES, rng),
                           sigma=mmd_sigma)
        report.curves["mmd"] = curve
        report.values["mmd"] = float(curve.mean())
    return report


def aggregate_reports(reports) -> MetricReport:
    """Averages scalar values across per-trajectory reports."""
    reports = list(reports)
    if not reports:
        return MetricReport(kind="aggregate")
    out = MetricReport(kind=f"aggregate/{reports[0].kind}")
    names = sorted({k for r in reports for k in r.values})
    for name in names:
        out.values[name] = float(np.mean([r.values[name] for r in reports
                                          if name in r.values]))
    out.meta["n_trajectories"] = len(reports)
    flags = [r.ot_converged for r in reports if r.ot_converged is not None]
    if flags:
        out.ot_converged = all(flags)
    return out
