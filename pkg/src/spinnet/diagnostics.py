"""Losses, error estimators, kernels, fluctuation checks, slices, reports.

Conventions:

* empirical loss on a batch is (1/2P) sum_p (f - f^(n))^2;
* the RBF pair loss is the batch-free surrogate
  -(1/n) sum_i c_i f(z_i) + (1/2n^2) sum_ij c_i c_j phihat(z_i, z_j),
  which the exact flow descends monotonically (the target-only constant
  is not included; a Monte Carlo estimate is available separately);
* signed errors split the residual mean by the sign of the target, with
  f(x) = 0 points contributing to neither side.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import InvalidDimensionError
from .rng import generator_for, stream
from .targets import evaluate_target
from .units import ParticleEnsemble, RbfUnit, network_eval_rows


class EmptyBatchError(ValueError):
    pass


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class Batch:
    """Evaluation points on S^{d-1}(sqrt(d)) with precomputed target values."""

    points: np.ndarray
    target_values: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        vals = np.asarray(self.target_values, dtype=np.float64)
        if pts.shape[0] < 1:
            raise EmptyBatchError("batch must contain at least one point")
        if vals.shape != (pts.shape[0],):
            raise InvalidDimensionError(
                f"target_values shape {vals.shape} does not match {pts.shape[0]} points"
            )
        radius = np.sqrt(pts.shape[1])
        dev = np.max(np.abs(np.linalg.norm(pts, axis=1) - radius))
        if dev > 1e-10 * radius:
            raise InvalidDimensionError(
                f"batch points off the sphere by {dev:.3e} (relative tol 1e-10)"
            )
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "target_values", vals)

    @property
    def P(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


def draw_batch(target, d: int, P: int, rng) -> Batch:
    """Fresh uniform batch on the sphere with target values attached."""
    from .geometry import sample_sphere_rows

    if P < 1:
        raise EmptyBatchError(f"batch size must be >= 1, got {P}")
    X = sample_sphere_rows(d, P, rng)
    return Batch(points=X, target_values=evaluate_target(target, X))


def batch_residual(e: ParticleEnsemble, batch: Batch) -> np.ndarray:
    """f(x_p) - f^(n)(x_p) over the batch."""
    return batch.target_values - network_eval_rows(e, batch.points)


def empirical_loss(e: ParticleEnsemble, batch: Batch) -> float:
    """(1/2P) sum_p (f - f^(n))^2."""
    r = batch_residual(e, batch)
    return float(0.5 * np.mean(r * r))


def signed_error(e: ParticleEnsemble, batch: Batch, sign: int = 1) -> float:
    """Residual mean restricted to points with sign(f) = sign; f = 0 points
    are excluded from both variants."""
    if sign not in (1, -1):
        raise ValueError(f"sign must be +1 or -1, got {sign}")
    r = batch_residual(e, batch)
    mask = batch.target_values > 0 if sign == 1 else batch.target_values < 0
    return float(np.sum(np.where(mask, r, 0.0)) / batch.P)


def signed_error_summary(e: ParticleEnsemble, batch: Batch) -> tuple[float, float, float]:
    """(plus, minus, residual mean over f != 0) in one pass over the batch.

    The restricted mean is assembled as plus + minus, so the sign split is
    an exact identity, not an up-to-roundoff one.
    """
    r = batch_residual(e, batch)
    f = batch.target_values
    plus = float(np.sum(np.where(f > 0, r, 0.0)) / batch.P)
    minus = float(np.sum(np.where(f < 0, r, 0.0)) / batch.P)
    return plus, minus, plus + minus


_PAIR_CHUNK_ENTRIES = 1 << 21


def rbf_pair_terms(e: ParticleEnsemble, target) -> tuple[np.ndarray, float]:
    """Interaction sums of the RBF pair loss, streamed in row blocks.

    Returns (g, quad) with g_i = sum_j c_j phihat(z_i, z_j) and
    quad = sum_ij c_i c_j phihat(z_i, z_j).
    """
    if not isinstance(e.unit, RbfUnit):
        raise InvalidDimensionError("pair loss is defined for RBF ensembles only")
    n = e.n
    g = np.empty(n)
    rows = max(1, _PAIR_CHUNK_ENTRIES // max(1, n))
    for lo in range(0, n, rows):
        F = e.unit.features(e.z[lo : lo + rows], e.z)
        g[lo : lo + rows] = F @ e.c
    quad = float(np.dot(e.c, g))
    return g, quad


def rbf_exact_loss(e: ParticleEnsemble, target) -> float:
    """Batch-free RBF surrogate loss (target constant excluded)."""
    # pair terms first: they reject non-RBF ensembles before the target is
    # asked to evaluate at parameter vectors that are not sphere points
    _, quad = rbf_pair_terms(e, target)
    fz = evaluate_target(target, e.z)
    n = e.n
    return float(-np.dot(e.c, fz) / n + 0.5 * quad / (n * n))


def target_constant_mc(target, batch: Batch) -> float:
    """Monte Carlo estimate of the target-only loss constant (1/2) E[f^2]."""
    v = batch.target_values
    return float(0.5 * np.mean(v * v))


def tangent_kernel_gram(e: ParticleEnsemble, probes: np.ndarray) -> np.ndarray:
    """(m, m) kernel governing the network response at probe points:

    M_kl = (1/n) sum_i [ c_i^2 grad_z phihat(x_k, z_i) . grad_z phihat(x_l, z_i)
                         + phihat(x_k, z_i) phihat(x_l, z_i) ].

    Assembled from feature and gradient Gram factors, so it is symmetric and
    positive semidefinite up to roundoff.
    """
    X = np.atleast_2d(np.asarray(getattr(probes, "points", probes), dtype=np.float64))
    m = X.shape[0]
    F = e.unit.features(X, e.z)
    G = e.unit.grad_param_all(X, e.z) * e.c[None, :, None]
    W = G.reshape(m, -1)
    M = (W @ W.T + F @ F.T) / e.n
    return 0.5 * (M + M.T)


def init_fluctuation_variance(
    init,
    unit,
    n: int,
    probe: np.ndarray,
    seeds: int,
    seed: int,
    param_draws: int = 10**6,
) -> tuple[float, float]:
    """Initialization fluctuation check at one probe point.

    measured:  n * Var over fresh initializations of f^(n)(probe);
    predicted: Var_{mu_in}[c phihat(probe, z)] by Monte Carlo with
               param_draws parameter samples.
    """
    probe = np.asarray(probe, dtype=np.float64)
    vals = np.empty(seeds)
    for s in range(seeds):
        ens = init.sample(unit, n, stream(seed, "fluct-measure", s))
        vals[s] = network_eval_rows(ens, probe[None, :])[0]
    measured = float(n * np.var(vals, ddof=1))

    big = init.sample(unit, param_draws, stream(seed, "fluct-predict"))
    phi = big.c * big.unit.features(probe[None, :], big.z)[0]
    predicted = float(np.var(phi))
    return measured, predicted


def fit_scaling_slope(points) -> tuple[float, float]:
    """Weighted least-squares slope of log(mean) against log(n).

    points: iterable of (n, mean, sem).  SEMs are propagated to log scale
    (sigma_log = sem/mean) and used as inverse-variance weights; if any SEM
    is missing or nonpositive the fit falls back to an unweighted one with
    a residual-based standard error.
    """
    pts = [(float(n), float(m), None if s is None else float(s)) for n, m, s in points]
    if len({p[0] for p in pts}) < 3:
        raise ReportError("slope fit needs at least 3 distinct n values")
    if any(p[0] <= 0 or p[1] <= 0 for p in pts):
        raise ReportError("slope fit needs positive n and positive means")
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    weighted = all(p[2] is not None and p[2] > 0 for p in pts)
    if weighted:
        sig = np.array([p[2] / p[1] for p in pts])
        w = 1.0 / (sig * sig)
    else:
        w = np.ones_like(x)
    W = np.sum(w)
    xb = np.sum(w * x) / W
    yb = np.sum(w * y) / W
    sxx = np.sum(w * (x - xb) ** 2)
    if sxx == 0.0:
        raise ReportError("slope fit needs spread in n")
    slope = float(np.sum(w * (x - xb) * (y - yb)) / sxx)
    if weighted:
        stderr = float(np.sqrt(1.0 / sxx))
    else:
        resid = y - (yb + slope * (x - xb))
        dof = max(1, len(pts) - 2)
        stderr = float(np.sqrt(np.sum(resid * resid) / dof / sxx))
    return slope, stderr


def great_circle_slice(
    e: ParticleEnsemble, target, i: int, j: int, resolution: int
) -> dict:
    """Target and network along the great circle in the (i, j) coordinate
    plane: x_i = sqrt(d) cos(theta), x_j = sqrt(d) sin(theta), rest 0."""
    d = e.unit.d
    if i == j:
        raise InvalidDimensionError("great circle needs two distinct axes")
    if not (0 <= i < d and 0 <= j < d):
        raise InvalidDimensionError(f"axes ({i}, {j}) out of range for d = {d}")
    if resolution < 2:
        raise InvalidDimensionError("resolution must be >= 2")
    theta = np.linspace(0.0, 2.0 * np.pi, resolution)
    X = np.zeros((resolution, d))
    X[:, i] = np.sqrt(d) * np.cos(theta)
    X[:, j] = np.sqrt(d) * np.sin(theta)
    return {
        "theta": theta,
        "target": evaluate_target(target, X),
        "network": network_eval_rows(e, X),
    }


def two_angle_slice(e: ParticleEnsemble, target, resolution: int) -> dict:
    """Target and network on the 2-sphere slice
    x = sqrt(d) (sin t cos p, sin t sin p, cos t, 0, ..., 0)."""
    d = e.unit.d
    if d < 3:
        raise InvalidDimensionError(f"two-angle slice needs d >= 3, got d = {d}")
    if resolution < 2:
        raise InvalidDimensionError("resolution must be >= 2")
    t = np.linspace(0.0, np.pi, resolution)
    p = np.linspace(0.0, 2.0 * np.pi, resolution)
    T, Ph = np.meshgrid(t, p, indexing="ij")
    T, Ph = T.ravel(), Ph.ravel()
    X = np.zeros((T.size, d))
    X[:, 0] = np.sqrt(d) * np.sin(T) * np.cos(Ph)
    X[:, 1] = np.sqrt(d) * np.sin(T) * np.sin(Ph)
    X[:, 2] = np.sqrt(d) * np.cos(T)
    return {
        "theta": T,
        "phi": Ph,
        "target": evaluate_target(target, X),
        "network": network_eval_rows(e, X),
    }


REPORT_SCHEMA = 1

REPORT_COLUMNS = (
    "step",
    "time",
    "P",
    "sigma",
    "noise",
    "loss",
    "batch_loss",
    "exact_loss",
    "signed_plus",
    "signed_minus",
    "resid_nonzero",
    "sphere_dev",
    "c_absmax",
)

_INT_COLUMNS = {"step", "P"}


@dataclass
class ExperimentReport:
    """Probe series of one run plus identifying metadata and summaries.

    meta must identify the run (config hash, master seed, tensor key);
    series holds one equal-length array per REPORT_COLUMNS entry with
    strictly increasing steps; summaries carries derived scalars.
    """

    meta: dict
    series: dict
    summaries: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict, repr=False)  # in-memory only

    def __post_init__(self):
        missing = [c for c in REPORT_COLUMNS if c not in self.series]
        if missing:
            raise ReportError(f"series missing columns: {missing}")
        lengths = {c: len(self.series[c]) for c in REPORT_COLUMNS}
        if len(set(lengths.values())) > 1:
            raise ReportError(f"ragged series columns: {lengths}")
        steps = np.asarray(self.series["step"])
        if steps.size and np.any(np.diff(steps) <= 0):
            raise ReportError("series steps must be strictly increasing")
        for key in ("config_hash", "master_seed"):
            if key not in self.meta:
                raise ReportError(f"report meta missing {key!r}")

    @property
    def rows(self) -> int:
        return len(self.series["step"])

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"# spinnet-report v{REPORT_SCHEMA}\n")
            fh.write("# meta " + json.dumps(self.meta, sort_keys=True) + "\n")
            fh.write("# summaries " + json.dumps(self.summaries, sort_keys=True) + "\n")
            fh.write(",".join(REPORT_COLUMNS) + "\n")
            cols = [np.asarray(self.series[c]) for c in REPORT_COLUMNS]
            for row in range(self.rows):
                cells = []
                for name, col in zip(REPORT_COLUMNS, cols):
                    v = col[row]
                    cells.append(str(int(v)) if name in _INT_COLUMNS else repr(float(v)))
                fh.write(",".join(cells) + "\n")


def read_report(path) -> ExperimentReport:
    """Parse a report CSV written by ExperimentReport.to_csv."""
    meta, summaries = None, {}
    rows = []
    with open(path) as fh:
        first = fh.readline().strip()
        if first != f"# spinnet-report v{REPORT_SCHEMA}":
            raise ReportError(f"{path}: unrecognized report header {first!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("# meta "):
                meta = json.loads(line[len("# meta ") :])
            elif line.startswith("# summaries "):
                summaries = json.loads(line[len("# summaries ") :])
            elif line.startswith("#"):
                continue
            elif line.startswith("step,"):
                header = tuple(line.split(","))
                if header != REPORT_COLUMNS:
                    raise ReportError(f"{path}: unexpected columns {header}")
            else:
                rows.append(line.split(","))
    if meta is None:
        raise ReportError(f"{path}: missing meta line")
    series = {}
    for k, name in enumerate(REPORT_COLUMNS):
        if name in _INT_COLUMNS:
            series[name] = np.array([int(r[k]) for r in rows], dtype=np.int64)
        else:
            series[name] = np.array([float(r[k]) for r in rows])
    return ExperimentReport(meta=meta, series=series, summaries=summaries)
