"""Weighted homogeneous algebra with two-sided scaling limits.

States scale through a weighted dilation, each coordinate carrying its own
exponent.  A function may behave like one homogeneous function near the
origin and like a different one far away; such functions carry a two-sided
scaling signature (weights and degree for each limit) together with optional
approximating functions.  This module provides the signed-power calculus,
dilations, homogeneous norms, the polar decomposition, an interpolation
blend for positive definite pairs, combinators that propagate signatures
through products and sums, and a sampling-based checker for both limits.

Evaluation convention: every function object takes a numpy array whose last
axis indexes coordinates, shape (..., n), and returns an array of shape
(...).  All containers are immutable after construction and safe for
concurrent read-only evaluation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

LADDER_DECADES = 6
SPHERE_SAMPLES_PER_DIM = 64
CHECK_TOL = 1e-3
WEIGHT_MATCH_TOL = 1e-9


def signed_pow(w, r: float):
    """Odd power sign(w)*|w|**r, defined to be 0 at w = 0 even when r = 0.

    Args:
        w: scalar or array.
        r: exponent, must be nonnegative.

    Returns:
        Array of the same shape as w (scalar in, scalar out).
    """
    if r < 0:
        raise ValueError(f"signed power needs a nonnegative exponent, got {r}")
    w = np.asarray(w, dtype=float)
    out = np.sign(w) * np.abs(w) ** r
    return out if out.ndim else float(out)


def signed_pow_prime(w, r: float):
    """Derivative r*|w|**(r-1) of the odd power."""
    if r < 0:
        raise ValueError(f"signed power needs a nonnegative exponent, got {r}")
    w = np.asarray(w, dtype=float)
    a = np.abs(w)
    with np.errstate(divide="ignore"):
        out = r * a ** (r - 1.0)
    if r > 1.0:
        out = np.where(a == 0.0, 0.0, out)
    return out if out.ndim else float(out)


def _as_weight_array(r) -> np.ndarray:
    if isinstance(r, WeightVector):
        return r.as_array()
    arr = np.asarray(r, dtype=float)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError("weights must form a one-dimensional sequence")
    if np.any(arr <= 0):
        raise ValueError(f"weights must be strictly positive, got {arr.tolist()}")
    return arr


@dataclass(frozen=True)
class WeightVector:
    """Strictly positive dilation exponents, one per state coordinate."""

    entries: tuple

    def __post_init__(self):
        entries = tuple(float(v) for v in self.entries)
        if len(entries) < 1:
            raise ValueError("weight vector needs at least one entry")
        if any(v <= 0 for v in entries):
            raise ValueError(f"weights must be strictly positive, got {entries}")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.entries, dtype=float)


WeightsLike = Union[WeightVector, Sequence[float], np.ndarray]


@dataclass(frozen=True)
class BiLimitSignature:
    """Scaling data for both limits: (r0, d0) near the origin, (r_inf, d_inf) at infinity."""

    r0: WeightVector
    d0: float
    r_inf: WeightVector
    d_inf: float

    def __post_init__(self):
        r0 = self.r0 if isinstance(self.r0, WeightVector) else WeightVector(tuple(self.r0))
        r_inf = self.r_inf if isinstance(self.r_inf, WeightVector) else WeightVector(tuple(self.r_inf))
        object.__setattr__(self, "r0", r0)
        object.__setattr__(self, "r_inf", r_inf)
        object.__setattr__(self, "d0", float(self.d0))
        object.__setattr__(self, "d_inf", float(self.d_inf))
        if len(r0) != len(r_inf):
            raise ValueError("both weight vectors must have the same length")

    @property
    def n(self) -> int:
        return len(self.r0)

    def side(self, which: str):
        """Return (weights, degree) for side 'zero' or 'infinity'."""
        if which == "zero":
            return self.r0, self.d0
        if which == "infinity":
            return self.r_inf, self.d_inf
        raise ValueError(f"unknown side {which!r}")

    def to_dict(self) -> dict:
        return {
            "r0": list(self.r0.entries),
            "d0": self.d0,
            "r_inf": list(self.r_inf.entries),
            "d_inf": self.d_inf,
        }


@dataclass(frozen=True)
class HomFunction:
    """A scalar function with a two-sided scaling signature.

    Fields:
        eval: callable on (..., n) arrays.
        sig: the scaling signature.
        approx0, approx_inf: optional approximating functions, each exactly
            homogeneous with the corresponding (weights, degree).
    """

    eval: Callable
    sig: BiLimitSignature
    approx0: Optional[Callable] = None
    approx_inf: Optional[Callable] = None

    def __call__(self, x):
        return self.eval(x)

    def approx(self, which: str):
        if which == "zero":
            return self.approx0
        if which == "infinity":
            return self.approx_inf
        raise ValueError(f"unknown side {which!r}")


@dataclass(frozen=True)
class HomVectorField:
    """A vector field whose component i scales with degree d + r[i] on each side."""

    evals: tuple
    sig: BiLimitSignature
    approx0: Optional[tuple] = None
    approx_inf: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "evals", tuple(self.evals))
        if len(self.evals) != self.sig.n:
            raise ValueError(
                f"field has {len(self.evals)} components for dimension {self.sig.n}"
            )
        for i in range(self.sig.n):
            if self.sig.d0 + self.sig.r0[i] < 0 or self.sig.d_inf + self.sig.r_inf[i] < 0:
                raise ValueError(
                    f"component {i + 1}: degree plus weight must be nonnegative"
                )
        if self.approx0 is not None:
            object.__setattr__(self, "approx0", tuple(self.approx0))
        if self.approx_inf is not None:
            object.__setattr__(self, "approx_inf", tuple(self.approx_inf))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.stack([f(x) for f in self.evals], axis=-1)

    def approx_field(self, which: str) -> Callable:
        fns = self.approx0 if which == "zero" else self.approx_inf
        if fns is None:
            raise ValueError(f"no approximating field stored for side {which!r}")

        def _eval(x):
            x = np.asarray(x, dtype=float)
            return np.stack([f(x) for f in fns], axis=-1)

        return _eval


@dataclass(frozen=True)
class PolarDecomposition:
    """Radial part lam (the homogeneous norm) and unit-sphere direction theta."""

    lam: float
    theta: tuple


def dilate(lam, r: WeightsLike, x):
    """Apply the weighted dilation: coordinate i is scaled by lam**r[i].

    lam may be a scalar or an array broadcastable against x's batch shape.
    """
    rv = _as_weight_array(r)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != rv.shape[0]:
        raise ValueError(f"point has dimension {x.shape[-1]}, weights have {rv.shape[0]}")
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("dilation scale must be positive")
    return lam[..., None] ** rv * x


def hom_norm(x, r: WeightsLike):
    """Homogeneous norm sum_i |x_i|**(1/r_i); scales linearly under the r-dilation."""
    rv = _as_weight_array(r)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != rv.shape[0]:
        raise ValueError(f"point has dimension {x.shape[-1]}, weights have {rv.shape[0]}")
    out = np.sum(np.abs(x) ** (1.0 / rv), axis=-1)
    return out if out.ndim else float(out)


def polar_decompose(x, r: WeightsLike) -> PolarDecomposition:
    """Split a nonzero point into its homogeneous norm and a unit-sphere direction."""
    x = np.asarray(x, dtype=float)
    lam = hom_norm(x, r)
    if lam == 0.0:
        raise ValueError("polar decomposition undefined at origin")
    theta = dilate(1.0 / lam, r, x)
    return PolarDecomposition(lam=float(lam), theta=tuple(float(v) for v in theta))


def interp_H(a, b):
    """Interpolation a*(1+b)/(1+a): behaves like a for small inputs, like b for large."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("interpolation arguments must be nonnegative")
    out = a * (1.0 + b) / (1.0 + a)
    return out if out.ndim else float(out)


def norm_power(r: WeightsLike, d: float) -> HomFunction:
    """The function |x|_r**d as an exactly homogeneous object (same data on both sides)."""
    rv = WeightVector(tuple(_as_weight_array(r)))
    if d <= 0:
        raise ValueError("norm power needs a positive degree")

    def _eval(x):
        return hom_norm(x, rv) ** d

    sig = BiLimitSignature(rv, d, rv, d)
    return HomFunction(eval=_eval, sig=sig, approx0=_eval, approx_inf=_eval)


def sphere_samples(r: WeightsLike, m: int, seed: int = 0) -> np.ndarray:
    """Deterministic quasi-uniform samples on the unit homogeneous sphere.

    Low-discrepancy points are pushed through the inverse normal CDF, scaled
    to the Euclidean sphere, and mapped radially onto the r-sphere.
    """
    rv = _as_weight_array(r)
    n = rv.shape[0]
    eng = qmc.Sobol(d=n, scramble=True, seed=seed)
    with warnings.catch_warnings():
        # balance of the low-discrepancy set is irrelevant here, any
        # sample count is acceptable
        warnings.filterwarnings("ignore", message=".*balance properties.*")
        u = eng.random(m)
    z = ndtri(np.clip(u, 1e-12, 1.0 - 1e-12))
    norms = np.linalg.norm(z, axis=-1)
    norms = np.where(norms == 0.0, 1.0, norms)
    z = z / norms[..., None]
    lam = hom_norm(z, rv)
    return dilate(1.0 / lam, rv, z)


def _eval_fn(f) -> Callable:
    return f.eval if isinstance(f, HomFunction) else f


def check_homogeneity_limit(
    f,
    r: WeightsLike,
    d: float,
    approx,
    side: str,
    n_samples: Optional[int] = None,
    seed: int = 0,
    decades: int = LADDER_DECADES,
    tol: float = CHECK_TOL,
) -> dict:
    """Numerically test a scaling limit of f against its claimed approximation.

    Samples the unit sphere of the weight r, walks a geometric ladder of
    scales toward the requested side, and records the sup deviation
    |f(dilated point)/lam**d - approx(point)| per rung.  PASS requires the
    deviation at the extreme rung to fall below tol and the last three rungs
    to be nonincreasing (within roundoff slack).

    Returns a JSON-ready report dict.
    """
    if side not in ("zero", "infinity"):
        raise ValueError(f"side must be 'zero' or 'infinity', got {side!r}")
    rv = _as_weight_array(r)
    n = rv.shape[0]
    m = n_samples if n_samples is not None else SPHERE_SAMPLES_PER_DIM * n
    theta = sphere_samples(rv, m, seed=seed)
    fe = _eval_fn(f)
    ae = _eval_fn(approx)

    ref = np.asarray(ae(theta), dtype=float)
    if not np.all(np.isfinite(ref)):
        bad = theta[np.argmax(~np.isfinite(ref))]
        return {
            "side": side,
            "lambda": [],
            "deviation": [],
            "verdict": "FAIL",
            "tolerance": tol,
            "samples": int(m),
            "seed": int(seed),
            "offending_sample": [float(v) for v in bad],
            "note": "approximation evaluated to a non-finite value",
        }
    if np.max(np.abs(ref)) < 1e-300:
        raise ValueError("approximation vanishes identically on the sample sphere")

    exponents = -np.arange(decades + 1.0) if side == "zero" else np.arange(decades + 1.0)
    ladder = 10.0 ** exponents
    deviations = []
    offending = None
    for lam in ladder:
        vals = np.asarray(fe(dilate(lam, rv, theta)), dtype=float) / lam**d
        diff = np.abs(vals - ref)
        if not np.all(np.isfinite(diff)):
            offending = theta[np.argmax(~np.isfinite(diff))]
            deviations.append(float("inf"))
            continue
        deviations.append(float(np.max(diff)))

    if offending is not None or not np.all(np.isfinite(deviations)):
        verdict = "FAIL"
    else:
        tail = deviations[-3:]
        # absolute slack sits at the roundoff floor: rungs that have already
        # converged to machine noise jitter by ~1e-15 without meaning anything
        shrinking = all(
            tail[k + 1] <= tail[k] * (1.0 + 1e-9) + 1e-12 for k in range(len(tail) - 1)
        )
        small = deviations[-1] <= tol * (1.0 + 1e-9)
        verdict = "PASS" if (small and shrinking) else "FAIL"

    report = {
        "side": side,
        "lambda": [float(v) for v in ladder],
        "deviation": deviations,
        "verdict": verdict,
        "tolerance": tol,
        "samples": int(m),
        "seed": int(seed),
    }
    if offending is not None:
        report["offending_sample"] = [float(v) for v in offending]
    return report


def check_hom_function(fn: HomFunction, side: str, **kwargs) -> dict:
    """Run the limit checker on a HomFunction using its own stored signature."""
    rv, d = fn.sig.side(side)
    approx = fn.approx(side)
    if approx is None:
        raise ValueError(f"function carries no approximation for side {side!r}")
    return check_homogeneity_limit(fn.eval, rv, d, approx, side, **kwargs)


def check_hom_field(field: HomVectorField, side: str, **kwargs) -> dict:
    """Componentwise limit check of a vector field with shifted degrees."""
    rv, d = field.sig.side(side)
    fns = field.approx0 if side == "zero" else field.approx_inf
    if fns is None:
        raise ValueError(f"field carries no approximation for side {side!r}")
    components = []
    for i in range(field.sig.n):
        rep = check_homogeneity_limit(
            field.evals[i], rv, d + rv[i], fns[i], side, **kwargs
        )
        components.append(rep)
    verdict = "PASS" if all(c["verdict"] == "PASS" for c in components) else "FAIL"
    return {"side": side, "verdict": verdict, "components": components}


def blend_positive_definite(phi0: HomFunction, phi_inf: HomFunction) -> HomFunction:
    """Blend two positive definite homogeneous functions into one function that
    matches phi0 near the origin and phi_inf at infinity.

    phi0 is read on its zero side and phi_inf on its infinity side; both must
    be positive on their unit spheres with positive degrees.
    """
    r0, d0 = phi0.sig.side("zero")
    r_inf, d_inf = phi_inf.sig.side("infinity")
    if d0 <= 0 or d_inf <= 0:
        raise ValueError("blend inputs must have positive degrees")
    for fn, rv, name in ((phi0, r0, "origin-side"), (phi_inf, r_inf, "infinity-side")):
        pts = sphere_samples(rv, SPHERE_SAMPLES_PER_DIM * len(rv), seed=7)
        vals = np.asarray(fn.eval(pts), dtype=float)
        if np.min(vals) <= 0:
            raise ValueError(f"{name} input is not positive on its unit sphere")

    f0 = phi0.eval
    fi = phi_inf.eval

    def _eval(x):
        return interp_H(f0(x), fi(x))

    sig = BiLimitSignature(r0, d0, r_inf, d_inf)
    return HomFunction(eval=_eval, sig=sig, approx0=f0, approx_inf=fi)


def _proportionality(rf: WeightVector, rg: WeightVector) -> float:
    """The constant k with k*rf = rg, or raise if the weights are not proportional."""
    a = rf.as_array()
    b = rg.as_array()
    k = b[0] / a[0]
    if np.max(np.abs(k * a - b)) > WEIGHT_MATCH_TOL * max(1.0, float(np.max(np.abs(b)))):
        raise ValueError(
            f"weights {a.tolist()} and {b.tolist()} are not proportional"
        )
    return float(k)


def hom_product(f: HomFunction, g: HomFunction) -> HomFunction:
    """Pointwise product; per side the weights must be proportional.

    The result carries g's weights and degree k*d_f + d_g, where k is the
    per-side proportionality constant.
    """
    k0 = _proportionality(f.sig.r0, g.sig.r0)
    ki = _proportionality(f.sig.r_inf, g.sig.r_inf)
    sig = BiLimitSignature(
        g.sig.r0, k0 * f.sig.d0 + g.sig.d0, g.sig.r_inf, ki * f.sig.d_inf + g.sig.d_inf
    )

    fe, ge = f.eval, g.eval

    def _eval(x):
        return fe(x) * ge(x)

    def _pair(a, b):
        if a is None or b is None:
            return None
        return lambda x: a(x) * b(x)

    return HomFunction(
        eval=_eval,
        sig=sig,
        approx0=_pair(f.approx0, g.approx0),
        approx_inf=_pair(f.approx_inf, g.approx_inf),
    )


def _sum_side(rf, df, f_ap, rg, dg, g_ap, side: str):
    """Resolve the signature of f+g on one side.

    Returns (weights, degree, approx callable or None).  The dominant term is
    the one whose degree-to-weight ratios are strictly smaller on the zero
    side (strictly larger on the infinity side) in every coordinate; equal
    ratios everywhere mean the approximations add.
    """
    ra = np.asarray(rf.as_array())
    rb = np.asarray(rg.as_array())
    qa = df / ra
    qb = dg / rb
    scale = np.maximum(1.0, np.maximum(np.abs(qa), np.abs(qb)))
    if np.all(np.abs(qa - qb) <= WEIGHT_MATCH_TOL * scale):
        if f_ap is None or g_ap is None:
            ap = None
        else:
            ap = lambda x, a=f_ap, b=g_ap: a(x) + b(x)
        return rf, df, ap
    first_dominates = np.all(qa < qb) if side == "zero" else np.all(qa > qb)
    second_dominates = np.all(qb < qa) if side == "zero" else np.all(qb > qa)
    if first_dominates:
        return rf, df, f_ap
    if second_dominates:
        return rg, dg, g_ap
    raise ValueError(
        f"sum is not homogeneous on the {side} side: degree ratios {qa.tolist()} "
        f"and {qb.tolist()} neither dominate nor match"
    )


def hom_sum(f: HomFunction, g: HomFunction) -> HomFunction:
    """Pointwise sum; per side either one term dominates or the ratios match."""
    r0, d0, ap0 = _sum_side(f.sig.r0, f.sig.d0, f.approx0, g.sig.r0, g.sig.d0, g.approx0, "zero")
    ri, di, api = _sum_side(
        f.sig.r_inf, f.sig.d_inf, f.approx_inf, g.sig.r_inf, g.sig.d_inf, g.approx_inf, "infinity"
    )
    if ap0 is not None:
        pts = sphere_samples(r0, SPHERE_SAMPLES_PER_DIM * len(r0), seed=11)
        if np.max(np.abs(np.asarray(ap0(pts), dtype=float))) < 1e-12:
            raise ValueError("summed approximation vanishes identically on the zero side")
    if api is not None:
        pts = sphere_samples(ri, SPHERE_SAMPLES_PER_DIM * len(ri), seed=11)
        if np.max(np.abs(np.asarray(api(pts), dtype=float))) < 1e-12:
            raise ValueError("summed approximation vanishes identically on the infinity side")

    fe, ge = f.eval, g.eval

    def _eval(x):
        return fe(x) + ge(x)

    sig = BiLimitSignature(r0, d0, ri, di)
    return HomFunction(eval=_eval, sig=sig, approx0=ap0, approx_inf=api)
