"""Numerical search for domination constants.

Given two functions eta and gamma with identical two-sided scaling
signatures and gamma nonnegative, find a constant c such that eta - c*gamma
is negative away from the origin, simultaneously for the functions
themselves on a compact annulus and for their approximations on the unit
spheres of both limits.  The three regions mirror the structure of the
underlying existence argument: behaviour near the origin is controlled by
the zero-side approximation on its sphere, behaviour far out by the
infinity-side approximation on its sphere, and the transition by the full
functions on dilations of both spheres.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .hom_core import HomFunction, dilate, sphere_samples

C_MAX = 1e9
EPS_ZERO = 1e-8
SAFETY = 1.25
BISECTION_STEPS = 20
ANNULUS_LO = 1e-3
ANNULUS_HI = 1e3
ANNULUS_RUNGS = 40


@dataclass(frozen=True)
class SearchGrid:
    """Sampling specification for the constant search; deterministic given seed."""

    seed: int = 0
    sphere_samples: Optional[int] = None
    annulus_lo: float = ANNULUS_LO
    annulus_hi: float = ANNULUS_HI
    annulus_rungs: int = ANNULUS_RUNGS
    c_max: float = C_MAX
    bisection_steps: int = BISECTION_STEPS
    safety: float = SAFETY
    eps_zero: float = EPS_ZERO


@dataclass(frozen=True)
class DominationProblem:
    """A pair (eta, gamma) sharing one scaling signature, gamma nonnegative-valued."""

    eta: HomFunction
    gamma: HomFunction

    def __post_init__(self):
        se, sg = self.eta.sig, self.gamma.sig
        same = (
            se.n == sg.n
            and abs(se.d0 - sg.d0) <= 1e-9
            and abs(se.d_inf - sg.d_inf) <= 1e-9
            and np.max(np.abs(se.r0.as_array() - sg.r0.as_array())) <= 1e-9
            and np.max(np.abs(se.r_inf.as_array() - sg.r_inf.as_array())) <= 1e-9
        )
        if not same:
            raise ValueError("eta and gamma must carry identical signatures")
        for fn, name in ((self.eta, "eta"), (self.gamma, "gamma")):
            if fn.approx0 is None or fn.approx_inf is None:
                raise ValueError(f"{name} must carry both approximating functions")


@dataclass(frozen=True)
class DominationResult:
    """A verified constant and the per-region certificate margins at that constant."""

    c: float
    c_raw: float
    margins: dict
    seed: int
    sample_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(v <= 0 for v in self.margins.values()):
            raise ValueError(f"certificate margins must be strictly positive: {self.margins}")

    def to_dict(self) -> dict:
        return {
            "c": self.c,
            "c_raw": self.c_raw,
            "margins": {k: float(v) for k, v in self.margins.items()},
            "seed": self.seed,
            "sample_counts": dict(self.sample_counts),
        }


def _region_values(p: DominationProblem, grid: SearchGrid):
    """Evaluate eta and gamma once per region; the search is arithmetic on the results."""
    sig = p.eta.sig
    n = sig.n
    m = grid.sphere_samples if grid.sphere_samples is not None else 64 * n

    theta0 = sphere_samples(sig.r0, m, seed=grid.seed)
    theta_inf = sphere_samples(sig.r_inf, m, seed=grid.seed + 1)

    lams = np.geomspace(grid.annulus_lo, grid.annulus_hi, grid.annulus_rungs)
    ring0 = dilate(lams[:, None], sig.r0, theta0[None, :, :]).reshape(-1, n)
    ring_inf = dilate(lams[:, None], sig.r_inf, theta_inf[None, :, :]).reshape(-1, n)
    annulus = np.concatenate([ring0, ring_inf], axis=0)

    # gamma at dilation lam shrinks like lam**degree, so "vanishing" must be
    # judged against that magnitude or deep annulus rungs misfire the check
    lam_flat = np.tile(np.repeat(lams, m), 2)
    gsig = p.gamma.sig
    gscale = np.maximum(lam_flat ** gsig.d0, lam_flat ** gsig.d_inf)

    regions = {
        "sphere_zero": (
            theta0,
            np.asarray(p.eta.approx0(theta0), dtype=float),
            np.asarray(p.gamma.approx0(theta0), dtype=float),
        ),
        "sphere_inf": (
            theta_inf,
            np.asarray(p.eta.approx_inf(theta_inf), dtype=float),
            np.asarray(p.gamma.approx_inf(theta_inf), dtype=float),
        ),
        "annulus": (
            annulus,
            np.asarray(p.eta.eval(annulus), dtype=float),
            np.asarray(p.gamma.eval(annulus), dtype=float),
        ),
    }
    for name, (pts, ev, gv) in regions.items():
        if not (np.all(np.isfinite(ev)) and np.all(np.isfinite(gv))):
            k = int(np.argmax(~(np.isfinite(ev) & np.isfinite(gv))))
            raise ValueError(
                f"non-finite evaluation on region {name} at sample {pts[k].tolist()}"
            )
        if np.min(gv) < -1e-12:
            k = int(np.argmin(gv))
            raise ValueError(
                f"gamma must be nonnegative; found {gv[k]:.3e} at sample {pts[k].tolist()}"
            )
        ref = gscale if name == "annulus" else 1.0
        bad = (gv < grid.eps_zero * ref) & (ev >= 0.0)
        if np.any(bad):
            k = int(np.argmax(bad))
            raise ValueError(
                "hypothesis failure: gamma vanishes where eta is nonnegative "
                f"(region {name}, sample {pts[k].tolist()}, eta={ev[k]:.3e}, gamma={gv[k]:.3e})"
            )
    return regions


def _margins_at(regions: dict, c: float) -> dict:
    return {name: float(np.min(c * gv - ev)) for name, (_, ev, gv) in regions.items()}


def evaluate_margins(p: DominationProblem, c: float, grid: Optional[SearchGrid] = None) -> dict:
    """Recompute the per-region minima of c*gamma - eta for a given constant."""
    grid = grid or SearchGrid()
    return _margins_at(_region_values(p, grid), c)


def find_domination_constant(
    p: DominationProblem, search: Optional[SearchGrid] = None
) -> DominationResult:
    """Find a constant making eta - c*gamma negative on all sampled regions.

    The schedule doubles c from 1 until the first pass, then bisects twenty
    times between the last failure and the first pass; the returned constant
    carries a 1.25 safety factor on top of the raw verified value.  If c = 1
    already verifies, it is accepted at the schedule start.

    Raises:
        ValueError: the zero-set hypothesis fails on a sample, or gamma goes
            negative, or an evaluation is non-finite.
        RuntimeError: no constant up to c_max verifies.
    """
    search = search or SearchGrid()
    regions = _region_values(p, search)

    def ok(c: float) -> bool:
        return all(v > 0.0 for v in _margins_at(regions, c).values())

    if ok(1.0):
        c_raw = 1.0
    else:
        lo, hi = 1.0, 2.0
        while not ok(hi):
            lo, hi = hi, hi * 2.0
            if hi > search.c_max:
                raise RuntimeError(
                    f"no finite constant found at this resolution (exceeded {search.c_max:g})"
                )
        for _ in range(search.bisection_steps):
            mid = 0.5 * (lo + hi)
            if ok(mid):
                hi = mid
            else:
                lo = mid
        c_raw = hi

    c = c_raw * search.safety
    counts = {name: int(vals[0].shape[0]) for name, vals in regions.items()}
    return DominationResult(
        c=c, c_raw=c_raw, margins=_margins_at(regions, c), seed=search.seed, sample_counts=counts
    )


def domination_bound(
    phi: HomFunction, zeta: HomFunction, search: Optional[SearchGrid] = None
) -> float:
    """A constant c with phi(x) <= c*zeta(x) on all samples, for positive definite zeta.

    Requires equal weights, zero-side degree of phi at least zeta's and
    infinity-side degree at most zeta's, so that the ratio phi/zeta stays
    bounded both near the origin and far out.  Implemented by searching for
    a constant dominating phi + zeta against zeta and subtracting one.
    """
    search = search or SearchGrid()
    sp, sz = phi.sig, zeta.sig
    if np.max(np.abs(sp.r0.as_array() - sz.r0.as_array())) > 1e-9 or np.max(
        np.abs(sp.r_inf.as_array() - sz.r_inf.as_array())
    ) > 1e-9:
        raise ValueError("domination bound needs equal weights on both sides")
    if sp.d0 < sz.d0 - 1e-12 or sp.d_inf > sz.d_inf + 1e-12:
        raise ValueError(
            "degree ordering violated: need phi's zero-side degree >= zeta's "
            "and infinity-side degree <= zeta's"
        )

    from .hom_core import hom_sum

    eta = hom_sum(phi, zeta)
    result = find_domination_constant(DominationProblem(eta=eta, gamma=zeta), search)
    bound = max(result.c_raw - 1.0, 1e-12)

    sig = zeta.sig
    m = search.sphere_samples if search.sphere_samples is not None else 64 * sig.n
    lams = np.geomspace(search.annulus_lo, search.annulus_hi, search.annulus_rungs)
    pts = dilate(
        lams[:, None], sig.r0, sphere_samples(sig.r0, m, seed=search.seed)[None, :, :]
    ).reshape(-1, sig.n)
    pv = np.asarray(phi.eval(pts), dtype=float)
    zv = np.asarray(zeta.eval(pts), dtype=float)
    if np.any(pv > bound * zv + 1e-12 * np.maximum(1.0, np.abs(zv))):
        k = int(np.argmax(pv - bound * zv))
        raise RuntimeError(
            f"bound re-verification failed at sample {pts[k].tolist()}: "
            f"phi={pv[k]:.6e}, bound*zeta={bound * zv[k]:.6e}"
        )
    return bound
