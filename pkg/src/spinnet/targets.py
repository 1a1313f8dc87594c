"""Target functions: spherical 3-spin polynomials and planted unit mixtures.

A 3-spin target is f(x) = (1/d) sum_{pqr} a_pqr x_p x_q x_r with a dense,
unsymmetrized coefficient tensor of i.i.d. standard normals.  The tensor is
keyed by (d, realization seed) and is reconstructed from that key on load,
so realizations can be pinned across runs without shipping d^3 floats.

A planted target is a finite signed mixture of units, f(x) = sum_k w_k
phihat(x, z_k); it gives initializations and fixed points with known
structure.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import generator_for, stream


class DimensionMismatchError(ValueError):
    pass


class DegenerateMeasureError(ValueError):
    """Raised when an operation needs a nonzero total-variation mixture."""


@dataclass(eq=False)
class SpinTensor:
    """Dense order-3 coefficient tensor; immutable after construction."""

    d: int
    seed: int
    a: np.ndarray
    _sym: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.d < 1:
            raise DimensionMismatchError(f"d must be >= 1, got {self.d}")
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.a.shape != (self.d, self.d, self.d):
            raise DimensionMismatchError(
                f"tensor shape {self.a.shape} does not match d = {self.d}"
            )

    @classmethod
    def sample(cls, d: int, seed: int) -> "SpinTensor":
        """The realization owned by (d, seed): d^3 i.i.d. N(0,1) entries."""
        if d < 1:
            raise DimensionMismatchError(f"d must be >= 1, got {d}")
        gen = stream(seed, "spin-tensor").generator()
        return cls(d=d, seed=seed, a=gen.standard_normal((d, d, d)))

    def symmetrized(self) -> np.ndarray:
        """a_pqr + a_rpq + a_qrp, cached; used only by the gradient."""
        if self._sym is None:
            a = self.a
            self._sym = a + a.transpose((1, 2, 0)) + a.transpose((2, 0, 1))
        return self._sym

    def to_dict(self) -> dict:
        return {"kind": "spin3", "d": self.d, "seed": self.seed}

    @classmethod
    def from_dict(cls, blob: dict) -> "SpinTensor":
        if blob.get("kind") != "spin3":
            raise DimensionMismatchError(f"not a spin3 tensor blob: {blob!r}")
        return cls.sample(int(blob["d"]), int(blob["seed"]))


def spin3_eval_rows(t: SpinTensor, X: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """f(x) = (1/d) sum_{pqr} a_pqr x_p x_q x_r for each row of X."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != t.d:
        raise DimensionMismatchError(f"points have d = {X.shape[1]}, tensor d = {t.d}")
    d = t.d
    flat = t.a.reshape(d, d * d)
    out = np.empty(X.shape[0])
    for lo in range(0, X.shape[0], chunk):
        Xc = X[lo : lo + chunk]
        m1 = (Xc @ flat).reshape(Xc.shape[0], d, d)        # sum over p
        m2 = np.matmul(Xc[:, None, :], m1)[:, 0, :]        # sum over q
        out[lo : lo + chunk] = np.sum(m2 * Xc, axis=1)     # sum over r
    out /= d
    return out


def spin3_eval(t: SpinTensor, x: np.ndarray) -> float:
    """Scalar 3-spin value at one ambient point."""
    return float(spin3_eval_rows(t, np.asarray(x, dtype=np.float64)[None, :])[0])


def spin3_grad_rows(t: SpinTensor, Z: np.ndarray) -> np.ndarray:
    """Ambient gradient rows: (1/d) sum_{qr} (a_pqr + a_rpq + a_qrp) z_q z_r."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if Z.shape[1] != t.d:
        raise DimensionMismatchError(f"points have d = {Z.shape[1]}, tensor d = {t.d}")
    d = t.d
    s_qpr = t.symmetrized().transpose((1, 0, 2)).reshape(d, d * d)
    t1 = (Z @ s_qpr).reshape(Z.shape[0], d, d)             # sum over q -> [n, p, r]
    grad = np.matmul(t1, Z[:, :, None])[:, :, 0]           # sum over r
    grad /= d
    return grad


def spin3_grad(t: SpinTensor, z: np.ndarray) -> np.ndarray:
    """Ambient gradient at one point."""
    return spin3_grad_rows(t, np.asarray(z, dtype=np.float64)[None, :])[0]


@dataclass(frozen=True)
class PlantedTarget:
    """Finite signed mixture of units: f(x) = sum_k w_k phihat(x, z_k)."""

    unit: object
    weights: np.ndarray
    locations: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        loc = np.asarray(self.locations, dtype=np.float64)
        if w.size == 0:
            # an empty mixture is the zero target
            w = w.reshape(0)
            loc = loc.reshape(0, self.unit.param_dim)
        else:
            loc = np.atleast_2d(loc)
        if w.ndim != 1:
            raise DimensionMismatchError("weights must be a 1-d array")
        if np.any(w == 0.0):
            raise DimensionMismatchError("atom weights must be nonzero")
        if loc.shape != (w.size, self.unit.param_dim):
            raise DimensionMismatchError(
                f"locations shape {loc.shape} does not match "
                f"{w.size} atoms of param_dim {self.unit.param_dim}"
            )
        self.unit.validate_params(loc)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "locations", loc)

    @property
    def total_variation(self) -> float:
        return float(np.sum(np.abs(self.weights)))

    def eval_rows(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return self.unit.features(X, self.locations) @ self.weights

    def grad_rows(self, X: np.ndarray) -> np.ndarray:
        """Input-space gradient rows of the mixture."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.zeros_like(X)
        for w, z in zip(self.weights, self.locations):
            out += w * self.unit.grad_input(X, z)
        return out


def planted_eval(p: PlantedTarget, x: np.ndarray) -> float:
    """Scalar mixture value at one point."""
    return float(p.eval_rows(np.asarray(x, dtype=np.float64)[None, :])[0])


def jordan_sample(p: PlantedTarget, n: int, rng):
    """Unbiased n-particle representation of the mixture.

    Locations are drawn i.i.d. from the |w|-weighted atom distribution and
    every particle weight is +/- total_variation with the sign of its atom,
    so the expected network equals the mixture pointwise.
    """
    from .units import ParticleEnsemble

    if n < 1:
        raise DimensionMismatchError(f"n must be >= 1, got {n}")
    gen = generator_for(rng)
    tv = p.total_variation
    if tv == 0.0:
        raise DegenerateMeasureError("cannot sample from a zero-mass mixture")
    probs = np.abs(p.weights) / tv
    idx = gen.choice(p.weights.size, size=n, p=probs)
    c = tv * np.sign(p.weights[idx])
    return ParticleEnsemble(unit=p.unit, c=c, z=p.locations[idx].copy())


def evaluate_target(target, X: np.ndarray) -> np.ndarray:
    """Uniform dispatch: SpinTensor, PlantedTarget, or plain callable."""
    if isinstance(target, SpinTensor):
        return spin3_eval_rows(target, X)
    if isinstance(target, PlantedTarget):
        return target.eval_rows(X)
    if callable(target):
        return np.asarray(target(np.atleast_2d(X)), dtype=np.float64)
    raise TypeError(f"cannot evaluate target of type {type(target).__name__}")


def target_grad_rows(target, Z: np.ndarray) -> np.ndarray:
    """Ambient input-space gradient rows for targets that define one."""
    if isinstance(target, SpinTensor):
        return spin3_grad_rows(target, Z)
    if isinstance(target, PlantedTarget):
        return target.grad_rows(Z)
    raise TypeError(f"no gradient available for target of type {type(target).__name__}")
