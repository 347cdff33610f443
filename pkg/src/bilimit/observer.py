"""Recursive output-injection synthesis for integrator chains.

The injection vector K1 is assembled from a chain of odd, strictly
increasing saturation-like functions q_i, one per level, each a two-branch
power law whose inner exponent sets the behaviour near the origin and whose
outer exponent sets the growth at infinity.  Gains are tuned level by level:
each level extends the previous level's Lyapunov function by a closed-form
integral, splits the resulting derivative into a gain-free part and a
nonnegative part multiplied by the gain, and hands that pair to the
domination-constant search.  Every synthesized object carries its two
homogeneous approximations alongside the nominal one, so the approximating
observers can be simulated and checked with the same code paths.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .gain_lemma import DominationProblem, SearchGrid, find_domination_constant
from .hom_core import (
    BiLimitSignature,
    HomFunction,
    HomVectorField,
    WeightVector,
    signed_pow,
)

DEGREE_MARGIN = 0.1
VARIANTS = ("full", "zero", "inf")


def degree_interval(n: int) -> tuple:
    """Open interval of admissible scaling degrees for an n-chain."""
    if n < 1:
        raise ValueError("chain dimension must be at least 1")
    hi = float("inf") if n == 1 else 1.0 / (n - 1)
    return (-1.0, hi)


@dataclass(frozen=True)
class DegreePair:
    """Scaling degrees of the designed vector field near the origin and at infinity."""

    d0: float
    d_inf: float

    def __post_init__(self):
        object.__setattr__(self, "d0", float(self.d0))
        object.__setattr__(self, "d_inf", float(self.d_inf))

    def validate(self, n: int):
        lo, hi = degree_interval(n)
        for name, val in (("d0", self.d0), ("d_inf", self.d_inf)):
            if not (lo < val < hi):
                raise ValueError(
                    f"{name}={val} outside the open interval ({lo}, {hi}) for n={n}"
                )


@dataclass(frozen=True)
class ChainWeights:
    """Per-coordinate dilation weights for both limits; last entry is 1."""

    n: int
    r0: WeightVector
    r_inf: WeightVector

    def __post_init__(self):
        if len(self.r0) != self.n or len(self.r_inf) != self.n:
            raise ValueError("weight vectors must have length n")
        if abs(self.r0[-1] - 1.0) > 1e-12 or abs(self.r_inf[-1] - 1.0) > 1e-12:
            raise ValueError("last weight must be 1 on both sides")

    def side(self, which: str) -> WeightVector:
        return self.r0 if which == "zero" else self.r_inf


def weights_from_degrees(n: int, d: DegreePair) -> ChainWeights:
    """Weights decreasing arithmetically to 1 with common difference d per side."""
    d.validate(n)
    r0 = tuple(1.0 - d.d0 * (n - i) for i in range(1, n + 1))
    r_inf = tuple(1.0 - d.d_inf * (n - i) for i in range(1, n + 1))
    return ChainWeights(n=n, r0=WeightVector(r0), r_inf=WeightVector(r_inf))


@dataclass(frozen=True)
class SaturationFn:
    """Odd, strictly increasing, onto two-branch power function for one level.

    Paper mode uses the branch-matched form (1/a0) s^a0 inside the unit
    interval and (1/ai) s^ai plus a matching constant outside; simplified
    mode (valid when 0 <= d0 <= d_inf) uses the plain sum s^a0 + s^ai.
    a0 = (r0_i + d0)/r0_i and ai = (ri_i + d_inf)/ri_i are both positive.
    """

    index: int
    r0_i: float
    d0: float
    r_inf_i: float
    d_inf: float
    mode: str = "paper"

    def __post_init__(self):
        if self.mode not in ("paper", "simplified"):
            raise ValueError(f"unknown saturation mode {self.mode!r}")
        if self.mode == "simplified" and not (0.0 <= self.d0 <= self.d_inf):
            raise ValueError("simplified saturation requires 0 <= d0 <= d_inf")
        if self.r0_i + self.d0 <= 0 or self.r_inf_i + self.d_inf <= 0:
            raise ValueError("branch exponents must be positive")

    @property
    def a0(self) -> float:
        return (self.r0_i + self.d0) / self.r0_i

    @property
    def a_inf(self) -> float:
        return (self.r_inf_i + self.d_inf) / self.r_inf_i

    def val(self, s, variant: str = "full"):
        s = np.asarray(s, dtype=float)
        a0, ai = self.a0, self.a_inf
        if self.mode == "paper":
            c0, ci = 1.0 / a0, 1.0 / ai
            if variant == "zero":
                return c0 * signed_pow(s, a0)
            if variant == "inf":
                return ci * signed_pow(s, ai)
            inner = c0 * signed_pow(s, a0)
            outer = ci * signed_pow(s, ai) + np.sign(s) * (c0 - ci)
            return np.where(np.abs(s) <= 1.0, inner, outer)
        if variant == "zero":
            return signed_pow(s, a0)
        if variant == "inf":
            return signed_pow(s, ai)
        return signed_pow(s, a0) + signed_pow(s, ai)

    def inv(self, y, variant: str = "full"):
        y = np.asarray(y, dtype=float)
        a0, ai = self.a0, self.a_inf
        if self.mode == "paper":
            c0, ci = 1.0 / a0, 1.0 / ai
            if variant == "zero":
                return signed_pow(y / c0, 1.0 / a0)
            if variant == "inf":
                return signed_pow(y / ci, 1.0 / ai)
            ay = np.abs(y)
            inner = signed_pow(y / c0, 1.0 / a0)
            shifted = np.maximum(ay - c0 + ci, 0.0)
            outer = np.sign(y) * np.power(shifted / ci, 1.0 / ai)
            return np.where(ay <= c0, inner, outer)
        if variant == "zero":
            return signed_pow(y, 1.0 / a0)
        if variant == "inf":
            return signed_pow(y, 1.0 / ai)
        return self._inv_bisect(y)

    def _inv_bisect(self, y):
        # monotone sum of two powers has no closed-form inverse
        ay = np.abs(y)
        hi = np.maximum(np.power(ay, 1.0 / self.a0), np.power(ay, 1.0 / self.a_inf))
        hi = np.maximum(hi, 1e-300)
        lo = np.zeros_like(ay)
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            too_small = np.power(mid, self.a0) + np.power(mid, self.a_inf) < ay
            lo = np.where(too_small, mid, lo)
            hi = np.where(too_small, hi, mid)
        return np.sign(y) * 0.5 * (lo + hi)

    def deriv(self, s, variant: str = "full"):
        s = np.asarray(s, dtype=float)
        a0, ai = self.a0, self.a_inf
        with np.errstate(divide="ignore"):
            p0 = np.abs(s) ** (a0 - 1.0)
            pi = np.abs(s) ** (ai - 1.0)
        if self.mode == "paper":
            if variant == "zero":
                return p0
            if variant == "inf":
                return pi
            return np.where(np.abs(s) <= 1.0, p0, pi)
        if variant == "zero":
            return a0 * p0
        if variant == "inf":
            return ai * pi
        return a0 * p0 + ai * pi

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "r0_i": self.r0_i,
            "d0": self.d0,
            "r_inf_i": self.r_inf_i,
            "d_inf": self.d_inf,
            "mode": self.mode,
        }


def make_saturation(i: int, w: ChainWeights, d: DegreePair, mode: str = "paper") -> SaturationFn:
    """The level-i saturation for the given chain weights and degrees (1-indexed)."""
    if not (1 <= i <= w.n):
        raise ValueError(f"level {i} out of range for n={w.n}")
    return SaturationFn(
        index=i,
        r0_i=w.r0[i - 1],
        d0=d.d0,
        r_inf_i=w.r_inf[i - 1],
        d_inf=d.d_inf,
        mode=mode,
    )


def terminal_injection(ell_n: float, d: DegreePair) -> HomFunction:
    """The last-level injection e -> -q(ell*e) on weight-1 coordinates."""
    if ell_n <= 0:
        raise ValueError("terminal gain must be positive")
    sat = SaturationFn(index=0, r0_i=1.0, d0=d.d0, r_inf_i=1.0, d_inf=d.d_inf)

    def _make(variant):
        return lambda e: -sat.val(ell_n * np.asarray(e, dtype=float)[..., 0], variant)

    sig = BiLimitSignature(
        r0=WeightVector((1.0,)),
        d0=1.0 + d.d0,
        r_inf=WeightVector((1.0,)),
        d_inf=1.0 + d.d_inf,
    )
    return HomFunction(eval=_make("full"), sig=sig, approx0=_make("zero"), approx_inf=_make("inf"))


@dataclass(frozen=True)
class _PowerPair:
    """Signed-power pair h^a + h^b used by the Lyapunov extension at one level."""

    a: float
    b: float

    def val(self, h, variant: str):
        if variant == "zero":
            return signed_pow(h, self.a)
        if variant == "inf":
            return signed_pow(h, self.b)
        return signed_pow(h, self.a) + signed_pow(h, self.b)

    def anti(self, h, variant: str):
        h = np.asarray(h, dtype=float)
        ta = np.abs(h) ** (self.a + 1.0) / (self.a + 1.0)
        tb = np.abs(h) ** (self.b + 1.0) / (self.b + 1.0)
        if variant == "zero":
            return ta
        if variant == "inf":
            return tb
        return ta + tb


def _cross_deriv(sat: SaturationFn, pp: _PowerPair, e, variant: str):
    """Derivative of e -> q^{-1}(e)^a + q^{-1}(e)^b, branch-resolved to avoid inf*0."""
    e = np.asarray(e, dtype=float)
    a, b = pp.a, pp.b
    a0, ai = sat.a0, sat.a_inf
    v = sat.inv(e, variant)
    av = np.abs(v)
    if sat.mode == "paper":
        # the branch coefficients of q make q'(v) = |v|^(a0-1) exactly
        if variant == "zero":
            return a * av ** (a - a0)
        if variant == "inf":
            return b * av ** (b - ai)
        inner = a * av ** (a - a0) + b * av ** (b - a0)
        avo = np.maximum(av, 1.0)
        outer = a * avo ** (a - ai) + b * avo ** (b - ai)
        return np.where(av <= 1.0, inner, outer)
    num_a = a * av ** (a - 1.0) if variant in ("full", "zero") else 0.0
    num_b = b * av ** (b - 1.0) if variant in ("full", "inf") else 0.0
    den = sat.deriv(v, variant)
    out = np.zeros_like(av)
    ok = av > 0
    num = np.asarray(num_a + num_b, dtype=float)
    np.divide(num, den, out=out, where=ok)
    return out


@dataclass(frozen=True)
class _Level:
    """Closures for one recursion level: Lyapunov value, gradient, and injection tail."""

    m: int
    W: object
    gradW: object
    K: object


def _terminal_level(sat: SaturationFn, dw: tuple, variant: str) -> _Level:
    dw0, dwi = dw

    def W(E):
        e = np.asarray(E, dtype=float)[..., 0]
        t0 = np.abs(e) ** dw0 / dw0
        ti = np.abs(e) ** dwi / dwi
        if variant == "zero":
            return t0
        if variant == "inf":
            return ti
        return t0 + ti

    def gradW(E):
        e = np.asarray(E, dtype=float)[..., 0]
        g0 = signed_pow(e, dw0 - 1.0)
        gi = signed_pow(e, dwi - 1.0)
        g = g0 if variant == "zero" else gi if variant == "inf" else g0 + gi
        return g[..., None]

    def K(w):
        return -sat.val(np.asarray(w, dtype=float), variant)[..., None]

    return _Level(m=1, W=W, gradW=gradW, K=K)


def _extend_level(child: _Level, sat: SaturationFn, pp: _PowerPair, ell: float, variant: str) -> _Level:
    def W(E):
        E = np.asarray(E, dtype=float)
        s = ell * E[..., 0]
        e_next = E[..., 1]
        v = sat.inv(e_next, variant)
        cross = pp.anti(s, variant) - pp.anti(v, variant) - pp.val(v, variant) * (s - v)
        return child.W(E[..., 1:]) + cross

    def gradW(E):
        E = np.asarray(E, dtype=float)
        s = ell * E[..., 0]
        e_next = E[..., 1]
        v = sat.inv(e_next, variant)
        g_child = child.gradW(E[..., 1:])
        g_first = ell * (pp.val(s, variant) - pp.val(v, variant))
        g_next = g_child[..., 0] - (s - v) * _cross_deriv(sat, pp, e_next, variant)
        return np.concatenate(
            [g_first[..., None], g_next[..., None], g_child[..., 1:]], axis=-1
        )

    def K(w):
        w = np.asarray(w, dtype=float)
        head = sat.val(ell * w, variant)
        return np.concatenate([-head[..., None], child.K(head)], axis=-1)

    return _Level(m=child.m + 1, W=W, gradW=gradW, K=K)


def _tuning_pair(child_levels: dict, sat: SaturationFn, pp: _PowerPair):
    """T1 (gain-free) and T2 (nonnegative) as functions of (E_next, free injection input)."""

    def T1(variant):
        child = child_levels[variant]

        def f(z):
            z = np.asarray(z, dtype=float)
            E_next = z[..., :-1]
            th = z[..., -1]
            e_next = E_next[..., 0]
            v = sat.inv(e_next, variant)
            g_child = child.gradW(E_next)
            g0 = g_child[..., 0] - (th - v) * _cross_deriv(sat, pp, e_next, variant)
            grads = np.concatenate([g0[..., None], g_child[..., 1:]], axis=-1)
            shift = np.concatenate(
                [E_next[..., 1:], np.zeros_like(e_next)[..., None]], axis=-1
            )
            flow = shift + child.K(sat.val(th, variant))
            return np.sum(grads * flow, axis=-1)

        return f

    def T2(variant):
        child = child_levels[variant]  # noqa: F841  (kept symmetric with T1)

        def f(z):
            z = np.asarray(z, dtype=float)
            E_next = z[..., :-1]
            th = z[..., -1]
            e_next = E_next[..., 0]
            v = sat.inv(e_next, variant)
            return (pp.val(th, variant) - pp.val(v, variant)) * (
                sat.val(th, variant) - e_next
            )

        return f

    return T1, T2


def lyapunov_degrees(w: ChainWeights, d: DegreePair) -> tuple:
    """Smallest Lyapunov degrees meeting the recursion's exponent constraints, plus margin."""
    r0 = w.r0.as_array()
    ri = w.r_inf.as_array()
    dw0 = 2.0 * float(np.max(r0)) + d.d0 + DEGREE_MARGIN
    dwi = max(
        2.0 * float(np.max(ri)) + d.d_inf + DEGREE_MARGIN,
        float(np.max(dw0 * ri / r0)) + DEGREE_MARGIN,
    )
    return (dw0, dwi)


@dataclass
class ObserverDesign:
    """A tuned injection chain with its saturations, gains, and audit records."""

    n: int
    degrees: DegreePair
    weights: ChainWeights
    gains: tuple
    mode: str
    d_w: tuple
    saturations: tuple
    tuning: tuple = ()
    levels: Optional[dict] = None

    def injection(self, e1, variant: str = "full") -> np.ndarray:
        """The n injection components as a function of the first error coordinate."""
        w = np.asarray(e1, dtype=float)
        comps = []
        for gain, sat in zip(self.gains, self.saturations):
            w = sat.val(gain * w, variant)
            comps.append(-w)
        return np.stack(comps, axis=-1)

    def w_value(self, E, variant: str = "full"):
        return self.levels[variant].W(E)

    def w_gradient(self, E, variant: str = "full"):
        return self.levels[variant].gradW(E)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "d0": self.degrees.d0,
            "d_inf": self.degrees.d_inf,
            "mode": self.mode,
            "gains": list(self.gains),
            "d_w": list(self.d_w),
            "tuning": [dict(t) for t in self.tuning],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ObserverDesign":
        d = DegreePair(data["d0"], data["d_inf"])
        return _assemble(
            n=int(data["n"]),
            d=d,
            mode=data.get("mode", "paper"),
            gains=tuple(float(g) for g in data["gains"]),
            d_w=tuple(data["d_w"]) if "d_w" in data else None,
            tuning=tuple(data.get("tuning", ())),
        )


def _assemble(n, d, mode, gains, d_w=None, tuning=()) -> ObserverDesign:
    w = weights_from_degrees(n, d)
    dw = tuple(d_w) if d_w is not None else lyapunov_degrees(w, d)
    sats = tuple(make_saturation(i, w, d, mode) for i in range(1, n + 1))
    levels = {v: _terminal_level(sats[-1], dw, v) for v in VARIANTS}
    for i in range(n - 1, 0, -1):
        pp = _level_powers(w, dw, i)
        levels = {
            v: _extend_level(levels[v], sats[i - 1], pp, gains[i - 1], v)
            for v in VARIANTS
        }
    return ObserverDesign(
        n=n,
        degrees=d,
        weights=w,
        gains=tuple(gains),
        mode=mode,
        d_w=dw,
        saturations=sats,
        tuning=tuple(tuning),
        levels=levels,
    )


def _level_powers(w: ChainWeights, dw: tuple, i: int) -> _PowerPair:
    return _PowerPair(
        a=(dw[0] - w.r0[i - 1]) / w.r0[i - 1],
        b=(dw[1] - w.r_inf[i - 1]) / w.r_inf[i - 1],
    )


def build_observer(n: int, d: DegreePair, tuning: Optional[SearchGrid] = None,
                   mode: str = "paper", d_w: Optional[tuple] = None) -> ObserverDesign:
    """Synthesize and tune the n-level injection chain.

    Levels are tuned from the last toward the first; the terminal gain is 1
    (any positive value keeps the scalar terminal level contracting).  Each
    tuned gain is the domination constant for that level's (T1, T2) pair,
    so the sampled decrease of the extended Lyapunov function is certified
    for the nominal design and both approximations at every level.
    """
    d.validate(n)
    w = weights_from_degrees(n, d)
    dw = tuple(d_w) if d_w is not None else lyapunov_degrees(w, d)
    sats = tuple(make_saturation(i, w, d, mode) for i in range(1, n + 1))

    levels = {v: _terminal_level(sats[-1], dw, v) for v in VARIANTS}
    gains = [1.0]
    reports = []
    for i in range(n - 1, 0, -1):
        pp = _level_powers(w, dw, i)
        T1, T2 = _tuning_pair(levels, sats[i - 1], pp)
        zw0 = tuple(w.r0[i:]) + (w.r0[i - 1],)
        zwi = tuple(w.r_inf[i:]) + (w.r_inf[i - 1],)
        sig = BiLimitSignature(
            r0=WeightVector(zw0),
            d0=dw[0] + d.d0,
            r_inf=WeightVector(zwi),
            d_inf=dw[1] + d.d_inf,
        )
        eta = HomFunction(eval=T1("full"), sig=sig, approx0=T1("zero"), approx_inf=T1("inf"))
        gam = HomFunction(eval=T2("full"), sig=sig, approx0=T2("zero"), approx_inf=T2("inf"))
        grid = tuning if tuning is not None else SearchGrid(seed=23 + 7 * i)
        try:
            result = find_domination_constant(DominationProblem(eta, gam), grid)
        except (RuntimeError, ValueError) as err:
            raise RuntimeError(f"gain search failed at level {i}: {err}") from err
        ell = result.c
        levels = {v: _extend_level(levels[v], sats[i - 1], pp, ell, v) for v in VARIANTS}
        gains.insert(0, ell)
        rec = result.to_dict()
        rec["level"] = i
        reports.insert(0, rec)

    return ObserverDesign(
        n=n,
        degrees=d,
        weights=w,
        gains=tuple(gains),
        mode=mode,
        d_w=dw,
        saturations=sats,
        tuning=tuple(reports),
        levels=levels,
    )


def observer_error_field(design: ObserverDesign, variant: str = "full") -> HomVectorField:
    """The autonomous error dynamics: a shift plus the injection driven by e1."""
    n = design.n

    def comp(i, var):
        def f(E):
            E = np.asarray(E, dtype=float)
            inj = design.injection(E[..., 0], var)[..., i]
            if i + 1 < n:
                return E[..., i + 1] + inj
            return inj

        return f

    sig = BiLimitSignature(
        r0=design.weights.r0,
        d0=design.degrees.d0,
        r_inf=design.weights.r_inf,
        d_inf=design.degrees.d_inf,
    )
    return HomVectorField(
        evals=tuple(comp(i, variant) for i in range(n)),
        sig=sig,
        approx0=tuple(comp(i, "zero") for i in range(n)),
        approx_inf=tuple(comp(i, "inf") for i in range(n)),
    )


def error_rhs(design: ObserverDesign, variant: str = "full"):
    """Fast stacked evaluation of the error dynamics for the integrator."""
    n = design.n

    def rhs(t, E):
        E = np.asarray(E, dtype=float)
        inj = design.injection(E[..., 0], variant)
        shift = np.concatenate(
            [E[..., 1:], np.zeros_like(E[..., :1])], axis=-1
        )
        return shift + inj

    return rhs


def coupled_plant_observer_rhs(design: ObserverDesign, u, variant: str = "full"):
    """Plant and copy with output injection, stacked as (x, xhat); u is u(t)."""
    n = design.n

    def rhs(t, y):
        y = np.asarray(y, dtype=float)
        x, xh = y[..., :n], y[..., n:]
        uin = u(t)
        dx = np.concatenate([x[..., 1:], np.full_like(x[..., :1], uin)], axis=-1)
        inj = design.injection(xh[..., 0] - x[..., 0], variant)
        dxh = np.concatenate([xh[..., 1:], np.full_like(x[..., :1], uin)], axis=-1) + inj
        return np.concatenate([dx, dxh], axis=-1)

    return rhs
