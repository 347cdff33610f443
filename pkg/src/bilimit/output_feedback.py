"""Dynamic output feedback: a tuned injection chain driving a tuned feedback chain.

The feedback law is evaluated on observer estimates instead of plant states,
a single positive scaling L multiplies the observer dynamics, and L**n scales
the control.  In estimate and error coordinates, with time run at rate L, the
closed loop becomes one autonomous system that does not involve L, so one
certificate covers every scaling at once: a composite Lyapunov function, the
feedback chain's function of the estimates plus a tuned multiple of the
injection chain's function of the errors, decreases along that system.  The
scaling itself is selected by sweeping a geometric grid and simulating a
declared set of initial conditions against a disturbance scenario: raising L
strengthens the loop against disturbances growing with low-index
coordinates, lowering it against disturbances driven by high-index ones.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .gain_lemma import DominationProblem, SearchGrid, find_domination_constant
from .hom_core import (
    BiLimitSignature,
    HomFunction,
    HomVectorField,
    WeightVector,
    dilate,
    hom_norm,
    signed_pow,
    sphere_samples,
)
from .observer import (
    DEGREE_MARGIN,
    VARIANTS,
    DegreePair,
    ObserverDesign,
    build_observer,
    weights_from_degrees,
)
from .observer import lyapunov_degrees as injection_degrees
from .sim import IntegratorConfig, integrate, integrate_batch
from .state_feedback import (
    ControllerDesign,
    alpha_schedule,
    build_controller,
)
from .state_feedback import lyapunov_degrees as feedback_degrees

FORMS = ("feedback", "feedforward")


def composite_degrees(n: int, d: DegreePair) -> tuple:
    """One Lyapunov degree pair meeting both chains' exponent constraints.

    Each chain has its own least admissible pair; the shared pair takes the
    larger zero-side degree and then re-imposes the cross-side ratio bound,
    so both functions can be built at the same degrees and summed.
    """
    w = weights_from_degrees(n, d)
    dv = feedback_degrees(w, d, alpha_schedule(n, d, w))
    dw = injection_degrees(w, d)
    du0 = max(dv[0], dw[0])
    ratio = float(np.max(w.r_inf.as_array() / w.r0.as_array()))
    du_inf = max(dv[1], dw[1], du0 * ratio + DEGREE_MARGIN)
    return (du0, du_inf)


def _shift_concat(block, last):
    return np.concatenate([block[..., 1:], np.asarray(last)[..., None]], axis=-1)


def _coupling_pair(obs: ObserverDesign, ctrl: ControllerDesign):
    """Factories for the two scalar fields the composite weight must balance.

    The first is the derivative of the estimate function along the injected
    estimate dynamics; the second is minus the derivative of the error
    function along the error dynamics, nonnegative by the injection chain's
    own certificate.  Both take the stacked (estimates, errors) state.
    """
    n = ctrl.n

    def eta_fn(variant):
        def ev(y):
            y = np.asarray(y, dtype=float)
            xh, E = y[..., :n], y[..., n:]
            inj = obs.injection(E[..., 0], variant)
            f = _shift_concat(xh, ctrl.phi(xh, variant)) + inj
            return np.sum(ctrl.lyapunov_gradient(xh, variant) * f, axis=-1)

        return ev

    def gamma_fn(variant):
        def ev(y):
            y = np.asarray(y, dtype=float)
            E = y[..., n:]
            inj = obs.injection(E[..., 0], variant)
            f = _shift_concat(E, np.zeros(E.shape[:-1])) + inj
            return -np.sum(obs.w_gradient(E, variant) * f, axis=-1)

        return ev

    return eta_fn, gamma_fn


def _stacked_signature(ctrl: ControllerDesign, d_extra: tuple) -> BiLimitSignature:
    w = ctrl.weights
    return BiLimitSignature(
        r0=WeightVector(tuple(w.r0.entries) * 2),
        d0=d_extra[0],
        r_inf=WeightVector(tuple(w.r_inf.entries) * 2),
        d_inf=d_extra[1],
    )


def _coupling_probe(eta_fn, gamma_fn, ctrl: ControllerDesign, grid: SearchGrid) -> float:
    """Worst sampled ratio on structured slices the sphere sampling can miss.

    Pairs estimate-sphere points with error-block points pulled through a
    ladder of relative sizes, so regions where the error part is tiny against
    the estimate part (and the nonnegative field nearly vanishes) are probed
    directly.  Returns the largest positive-part ratio found.
    """
    n = ctrl.n
    w = ctrl.weights
    fams = {"full": (w.r0, w.r_inf), "zero": (w.r0,), "inf": (w.r_inf,)}
    lams = np.geomspace(grid.annulus_lo, grid.annulus_hi, 41)
    need = 0.0
    for variant in VARIANTS:
        e_fn, g_fn = eta_fn(variant), gamma_fn(variant)
        for off, rw in enumerate(fams[variant]):
            m = 64 * n
            thx = sphere_samples(rw, m, seed=grid.seed + 500 + off)
            the = sphere_samples(rw, m, seed=grid.seed + 600 + off)
            rw2 = tuple(rw.entries) * 2
            for eps in (1e-4, 1e-3, 1e-2, 0.1, 0.3, 1.0, 3.0):
                for y in (
                    np.concatenate([thx, dilate(eps, rw, the)], axis=-1),
                    np.concatenate([dilate(eps, rw, thx), the], axis=-1),
                ):
                    if variant == "full":
                        y = dilate(lams[:, None], rw2, y[None, :, :]).reshape(-1, 2 * n)
                    e = np.asarray(e_fn(y), dtype=float)
                    g = np.asarray(g_fn(y), dtype=float)
                    pos = e > 0.0
                    if np.any(pos):
                        ratio = e[pos] / np.maximum(g[pos], 1e-300)
                        need = max(need, float(np.max(ratio)))
    if need > 1e12:
        raise RuntimeError(
            f"composite weight probe found an unbounded ratio ({need:.3e})"
        )
    return need


def composite_lyapunov(obs: ObserverDesign, ctrl: ControllerDesign,
                       tuning: Optional[SearchGrid] = None) -> tuple:
    """Weight making estimates-plus-errors a common Lyapunov function.

    The estimate function decreases except for the injection cross term; the
    error function decreases on its own.  The domination-constant search plus
    a structured sliver probe give the multiple of the error function that
    absorbs the cross term, for the nominal pair and both approximations.

    Returns:
        (c_weight, record) where record holds the search report.
    """
    if tuple(np.round(obs.d_w, 12)) != tuple(np.round(ctrl.d_v, 12)):
        raise ValueError(
            "estimate and error Lyapunov degrees differ; build both designs "
            "with the shared pair from composite_degrees"
        )
    du = tuple(ctrl.d_v)
    d = ctrl.degrees
    eta_fn, gamma_fn = _coupling_pair(obs, ctrl)
    sig = _stacked_signature(ctrl, (du[0] + d.d0, du[1] + d.d_inf))
    eta = HomFunction(
        eval=eta_fn("full"), sig=sig, approx0=eta_fn("zero"), approx_inf=eta_fn("inf")
    )
    gam = HomFunction(
        eval=gamma_fn("full"), sig=sig, approx0=gamma_fn("zero"), approx_inf=gamma_fn("inf")
    )
    grid = tuning if tuning is not None else SearchGrid(seed=61)
    result = find_domination_constant(DominationProblem(eta, gam), grid)
    need = _coupling_probe(eta_fn, gamma_fn, ctrl, grid)
    c_weight = max(result.c, grid.safety * need)
    record = result.to_dict()
    record["c_probe"] = need
    record["c_weight"] = c_weight
    return c_weight, record


@dataclass
class DisturbanceScenario:
    """A named disturbance acting on a chain, with optional auxiliary dynamics.

    delta(t, x, z) returns the full additive disturbance vector on the chain;
    z_rhs(t, x, z) advances the auxiliary block when one is present.  The
    growth parameters describe the power-sum envelope the disturbance is
    expected to respect, used for post-hoc audits along simulated traces.
    """

    n: int
    name: str = "none"
    delta: Optional[Callable] = None
    z_dim: int = 0
    z_rhs: Optional[Callable] = None
    c0: float = 0.0
    c_inf: float = 0.0
    q: float = 1.0
    p: float = 1.5
    active: tuple = ()
    settle_threshold: Optional[float] = None
    z_scale: float = 0.5

    def __post_init__(self):
        if self.z_dim > 0 and self.z_rhs is None:
            raise ValueError("auxiliary block declared without its dynamics")
        if self.delta is None and self.z_dim > 0:
            raise ValueError("auxiliary block declared without a disturbance")

    def envelope(self, x, i: int, d: DegreePair, form: str):
        """Power-sum growth bound for the disturbance on coordinate i.

        Feedback form sums over coordinates up to i, feedforward form over
        coordinates from i+2 on; each term carries one exponent per side.
        """
        x = np.asarray(x, dtype=float)
        n = self.n
        js = range(1, i + 1) if form == "feedback" else range(i + 2, n + 1)
        out = np.zeros(x.shape[:-1])
        for j in js:
            a = np.abs(x[..., j - 1])
            e0 = (1.0 - d.d0 * (n - i - 1)) / (1.0 - d.d0 * (n - j))
            ei = (1.0 - d.d_inf * (n - i - 1)) / (1.0 - d.d_inf * (n - j))
            out = out + self.c0 * a**e0 + self.c_inf * a**ei
        return out

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n": self.n,
            "z_dim": self.z_dim,
            "c0": self.c0,
            "c_inf": self.c_inf,
            "q": self.q,
            "p": self.p,
            "active": list(self.active),
            "settle_threshold": self.settle_threshold,
        }


def no_disturbance(n: int) -> DisturbanceScenario:
    return DisturbanceScenario(n=n, name="none")


def input_growth_scenario(c0: float = 0.5, c_inf: float = 0.5,
                          q: float = 1.0, p: float = 1.5) -> DisturbanceScenario:
    """Two-integrator chain disturbed at the input by two powers of velocity.

    The low power shapes the small-signal growth, the high power the
    large-signal growth; both must lie strictly between 0 and 2 with the low
    one smaller, the range where a large enough scaling restores stability.
    """
    if not (0.0 < q < p < 2.0):
        raise ValueError("growth powers must satisfy 0 < q < p < 2")

    def delta(t, x, z):
        x = np.asarray(x, dtype=float)
        d2 = c0 * signed_pow(x[..., 1], q) + c_inf * signed_pow(x[..., 1], p)
        return np.stack([np.zeros_like(d2), d2], axis=-1)

    return DisturbanceScenario(
        n=2, name="input-growth", delta=delta, c0=c0, c_inf=c_inf, q=q, p=p,
        active=(2,),
    )


def feedforward_cascade_scenario() -> DisturbanceScenario:
    """Three-integrator chain whose first equation is hit from downstream.

    The disturbance is a signed three-halves power of the third coordinate
    plus the cube of an auxiliary state driven by that coordinate through a
    signed quartic contraction.  All powers are odd-symmetric.  The auxiliary
    tail decays only algebraically once the chain has settled, so the
    scenario carries its own settling threshold for sweep passes.
    """

    def delta(t, x, z):
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        d1 = signed_pow(x[..., 2], 1.5) + z[..., 0] ** 3
        zero = np.zeros_like(d1)
        return np.stack([d1, zero, zero], axis=-1)

    def z_rhs(t, x, z):
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        return (-signed_pow(z[..., 0], 4.0) + x[..., 2])[..., None]

    return DisturbanceScenario(
        n=3, name="feedforward-cascade", delta=delta, z_dim=1, z_rhs=z_rhs,
        c0=1.0, c_inf=1.0, q=0.75, p=1.5, active=(1,), settle_threshold=0.1,
    )


def power_sum_scenario(n: int, d: DegreePair, form: str, active: int,
                       c0: float = 0.5, c_inf: float = 0.5) -> DisturbanceScenario:
    """Worst-sign disturbance saturating its own power-sum growth envelope.

    Coordinate `active` receives exactly the envelope value, the largest
    perturbation the stated form tolerates at those coefficients, pushed in
    the outward direction.
    """
    if form not in FORMS:
        raise ValueError(f"unknown form {form!r}")
    if not 1 <= active <= n:
        raise ValueError(f"active coordinate {active} outside 1..{n}")
    if form == "feedback" and active == 1:
        raise ValueError("feedback-form envelope on coordinate 1 is empty")
    if form == "feedforward" and active >= n - 1:
        raise ValueError("feedforward-form envelope needs two coordinates above")

    scen = DisturbanceScenario(
        n=n, name="power-sum", c0=c0, c_inf=c_inf, active=(active,),
    )

    def delta(t, x, z):
        x = np.asarray(x, dtype=float)
        val = scen.envelope(x, active, d, form)
        out = np.zeros(x.shape[:-1] + (n,))
        out[..., active - 1] = val
        return out

    scen.delta = delta
    return scen


def scenario_from_config(cfg: dict) -> DisturbanceScenario:
    """Build a scenario from a plain configuration mapping."""
    kind = cfg.get("kind", "none")
    if kind in ("none", "chain"):
        return no_disturbance(int(cfg["n"]))
    if kind == "input-growth":
        return input_growth_scenario(
            c0=float(cfg.get("c0", 0.5)),
            c_inf=float(cfg.get("c_inf", 0.5)),
            q=float(cfg.get("q", 1.0)),
            p=float(cfg.get("p", 1.5)),
        )
    if kind == "feedforward-cascade":
        return feedforward_cascade_scenario()
    if kind == "power-sum":
        return power_sum_scenario(
            n=int(cfg["n"]),
            d=DegreePair(float(cfg["d0"]), float(cfg["d_inf"])),
            form=str(cfg["form"]),
            active=int(cfg["active"]),
            c0=float(cfg.get("c0", 0.5)),
            c_inf=float(cfg.get("c_inf", 0.5)),
        )
    raise ValueError(f"unknown scenario kind {kind!r}")


@dataclass
class OutputFeedbackDesign:
    """An observer-driven feedback with its scaling and composite certificate."""

    observer: ObserverDesign
    controller: ControllerDesign
    L: float
    c_weight: Optional[float]
    form: str
    d_u: tuple
    ordering_note: str = ""
    tuning: dict = field(default_factory=dict)
    decrease: Optional[dict] = None
    selection: Optional[dict] = None

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValueError(f"unknown form {self.form!r}")
        if not self.L > 0.0:
            raise ValueError("scaling must be positive")

    @property
    def n(self) -> int:
        return self.controller.n

    @property
    def degrees(self) -> DegreePair:
        return self.controller.degrees

    @property
    def weights(self):
        return self.controller.weights

    def with_scaling(self, L: float) -> "OutputFeedbackDesign":
        return dataclasses.replace(self, L=float(L))

    def _level_factors(self) -> np.ndarray:
        return self.L ** np.arange(self.n)

    def tau_state(self, x, xhat) -> np.ndarray:
        """Stack estimates and scaled errors from physical plant and observer states."""
        x = np.asarray(x, dtype=float)
        xhat = np.asarray(xhat, dtype=float)
        return np.concatenate([xhat, xhat - x / self._level_factors()], axis=-1)

    def physical_state(self, y_tau) -> tuple:
        """Recover (plant, observer) physical states from the stacked form."""
        y = np.asarray(y_tau, dtype=float)
        n = self.n
        xhat = y[..., :n]
        x = self._level_factors() * (xhat - y[..., n:])
        return x, xhat

    def control(self, xhat, variant: str = "full"):
        return self.L**self.n * self.controller.phi(xhat, variant)

    def rescaled_rhs(self, variant: str = "full") -> Callable:
        """Scaling-free stacked dynamics of estimates and errors, signature (t, y)."""
        n = self.n
        obs, ctrl = self.observer, self.controller

        def rhs(t, y):
            y = np.asarray(y, dtype=float)
            xh, E = y[..., :n], y[..., n:]
            inj = obs.injection(E[..., 0], variant)
            dxh = _shift_concat(xh, ctrl.phi(xh, variant)) + inj
            dE = _shift_concat(E, np.zeros(E.shape[:-1])) + inj
            return np.concatenate([dxh, dE], axis=-1)

        return rhs

    def rescaled_field(self) -> HomVectorField:
        """The stacked dynamics with both approximating fields attached."""
        n = self.n
        d = self.degrees

        def comp(j, variant):
            def ev(y):
                full = self.rescaled_rhs(variant)(0.0, y)
                return full[..., j]

            return ev

        sig = _stacked_signature(self.controller, (d.d0, d.d_inf))
        return HomVectorField(
            evals=tuple(comp(j, "full") for j in range(2 * n)),
            sig=sig,
            approx0=tuple(comp(j, "zero") for j in range(2 * n)),
            approx_inf=tuple(comp(j, "inf") for j in range(2 * n)),
        )

    def coupled_rhs(self, scenario: Optional[DisturbanceScenario] = None,
                    variant: str = "full") -> Callable:
        """Physical plant-and-observer dynamics, optionally disturbed.

        The state stacks plant coordinates, observer coordinates, and the
        scenario's auxiliary block when present.
        """
        n = self.n
        L = self.L
        obs, ctrl = self.observer, self.controller
        z_dim = scenario.z_dim if scenario is not None else 0

        def rhs(t, y):
            y = np.asarray(y, dtype=float)
            x, xh = y[..., :n], y[..., n : 2 * n]
            ph = ctrl.phi(xh, variant)
            dx = _shift_concat(x, L**n * ph)
            if scenario is not None and scenario.delta is not None:
                dx = dx + scenario.delta(t, x, y[..., 2 * n :])
            inj = obs.injection(xh[..., 0] - x[..., 0], variant)
            dxh = L * (_shift_concat(xh, ph) + inj)
            parts = [dx, dxh]
            if z_dim:
                parts.append(scenario.z_rhs(t, x, y[..., 2 * n :]))
            return np.concatenate(parts, axis=-1)

        return rhs

    def composite_value(self, y_tau, variant: str = "full"):
        n = self.n
        y = np.asarray(y_tau, dtype=float)
        return self.controller.lyapunov(y[..., :n], variant) + self.c_weight * (
            self.observer.w_value(y[..., n:], variant)
        )

    def composite_gradient(self, y_tau, variant: str = "full") -> np.ndarray:
        n = self.n
        y = np.asarray(y_tau, dtype=float)
        return np.concatenate(
            [
                self.controller.lyapunov_gradient(y[..., :n], variant),
                self.c_weight * self.observer.w_gradient(y[..., n:], variant),
            ],
            axis=-1,
        )

    def decrease_report(self, m_samples: Optional[int] = None, seed: int = 7) -> dict:
        """Worst sampled composite derivative per variant (negative = pass)."""
        if self.c_weight is None:
            raise ValueError("no composite weight on this design")
        n = self.n
        w = self.weights
        eta_fn, gamma_fn = _coupling_pair(self.observer, self.controller)
        m = m_samples if m_samples is not None else 96 * n
        lams = np.geomspace(1e-3, 1e3, m)
        fams = {"full": (w.r0, w.r_inf), "zero": (w.r0,), "inf": (w.r_inf,)}
        out = {}
        for variant in VARIANTS:
            e_fn, g_fn = eta_fn(variant), gamma_fn(variant)
            worst = -np.inf
            for off, rw in enumerate(fams[variant]):
                rw2 = tuple(rw.entries) * 2
                th = sphere_samples(WeightVector(rw2), m, seed=seed + off)
                pts = dilate(lams[:, None], rw2, th)
                vals = np.asarray(e_fn(pts)) - self.c_weight * np.asarray(g_fn(pts))
                worst = max(worst, float(np.max(vals)))
            out[variant] = worst
        return out

    @property
    def plant_weights(self) -> tuple:
        return tuple(self.weights.r0.entries) * 2

    @property
    def plant_block(self) -> slice:
        return slice(0, self.n)

    def iss_initial_state(self) -> np.ndarray:
        return np.zeros(2 * self.n)

    def disturbed_field(self, amplitude: float) -> Callable:
        base = self.coupled_rhs()
        n = self.n

        def rhs(t, y):
            f = base(t, y)
            f[..., n - 1] += amplitude
            return f

        return rhs

    def to_dict(self) -> dict:
        out = {
            "observer": self.observer.to_dict(),
            "controller": self.controller.to_dict(),
            "L": self.L,
            "c_weight": self.c_weight,
            "form": self.form,
            "d_u": list(self.d_u),
            "ordering_note": self.ordering_note,
            "tuning": dict(self.tuning),
        }
        if self.selection is not None:
            out["selection"] = self.selection
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "OutputFeedbackDesign":
        obs = ObserverDesign.from_dict(data["observer"])
        ctrl = ControllerDesign.from_dict(data["controller"])
        return cls(
            observer=obs,
            controller=ctrl,
            L=float(data["L"]),
            c_weight=data.get("c_weight"),
            form=data["form"],
            d_u=tuple(data["d_u"]),
            ordering_note=data.get("ordering_note", ""),
            tuning=dict(data.get("tuning", {})),
            selection=data.get("selection"),
        )


def _ordering_note(form: str, d: DegreePair) -> str:
    if form == "feedback" and d.d0 > d.d_inf:
        return (
            "degree ordering favours the feedforward form; large-scaling "
            "guarantees are not covered"
        )
    if form == "feedforward" and d.d_inf > d.d0:
        return (
            "degree ordering favours the feedback form; small-scaling "
            "guarantees are not covered"
        )
    return ""


def assemble(obs: ObserverDesign, ctrl: ControllerDesign, L: float = 1.0,
             form: Optional[str] = None, tuning: Optional[SearchGrid] = None,
             verify: bool = True) -> OutputFeedbackDesign:
    """Couple an observer and a controller into one scaled output feedback.

    Both designs must agree on dimension, degrees, and weights.  Unless
    verification is turned off, the composite Lyapunov weight is searched
    and the sampled decrease of the stacked scaling-free dynamics checked
    for the nominal system and both approximations.
    """
    if obs.n != ctrl.n:
        raise ValueError(f"dimension mismatch: observer {obs.n}, controller {ctrl.n}")
    od, cd = obs.degrees, ctrl.degrees
    if abs(od.d0 - cd.d0) > 1e-12 or abs(od.d_inf - cd.d_inf) > 1e-12:
        raise ValueError("observer and controller disagree on the degree pair")
    if form is None:
        form = "feedback" if cd.d0 <= cd.d_inf else "feedforward"
    c_weight = None
    record = {}
    if verify:
        c_weight, record = composite_lyapunov(obs, ctrl, tuning)
    design = OutputFeedbackDesign(
        observer=obs,
        controller=ctrl,
        L=float(L),
        c_weight=c_weight,
        form=form,
        d_u=tuple(ctrl.d_v),
        ordering_note=_ordering_note(form, cd),
        tuning=record,
    )
    if verify:
        report = design.decrease_report()
        design.decrease = report
        bad = {k: v for k, v in report.items() if not (v < 0.0)}
        if bad:
            raise RuntimeError(f"composite decrease check failed: {bad}")
    return design


def build_output_feedback(n: int, d: DegreePair, L: float = 1.0,
                          tuning: Optional[SearchGrid] = None,
                          ctrl_mode: Optional[str] = None, obs_mode: str = "paper",
                          verify: bool = True) -> OutputFeedbackDesign:
    """Synthesize observer and controller at shared Lyapunov degrees and couple them."""
    d.validate(n)
    du = composite_degrees(n, d)
    obs = build_observer(n, d, tuning=tuning, mode=obs_mode, d_w=du)
    ctrl = build_controller(n, d, tuning=tuning, mode=ctrl_mode, verify=verify, d_v=du)
    return assemble(obs, ctrl, L=L, tuning=tuning, verify=verify)


@dataclass
class SweepSettings:
    """Grid and test-set specification for scaling selection."""

    max_exponent: int = 20
    ic_count: int = 9
    ic_seed: int = 97
    decades: tuple = (-1.0, 1.0)
    step: float = 1e-3
    t_end: float = 40.0
    horizon_margin: float = 1.2
    threshold: float = 1e-6
    origin_guard: float = 1e-9
    refine: bool = False
    refine_steps: int = 3
    aux_tail: float = 0.5
    # stage-evaluation budget per rung, as a multiple of the nominal step
    # count; rungs whose dynamics exceed it count as unverified failures
    work_factor: Optional[float] = 16.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def sweep_initial_states(design: OutputFeedbackDesign,
                         scenario: Optional[DisturbanceScenario],
                         settings: SweepSettings) -> np.ndarray:
    """The declared test set: scaled points on the plant's unit sphere.

    Plant coordinates are drawn on the weighted sphere and pushed through a
    ladder of random decades; observer coordinates start at zero; auxiliary
    coordinates are drawn at the scenario's scale.
    """
    rng = np.random.default_rng(settings.ic_seed)
    n = design.n
    r0 = design.weights.r0.as_array()
    raw = rng.normal(size=(settings.ic_count, n))
    nrm = np.maximum(hom_norm(raw, r0), 1e-12)
    unit = raw / nrm[:, None] ** r0[None, :]
    scales = 10.0 ** rng.uniform(settings.decades[0], settings.decades[1],
                                 size=settings.ic_count)
    parts = [unit * scales[:, None] ** r0[None, :], np.zeros((settings.ic_count, n))]
    z_dim = scenario.z_dim if scenario is not None else 0
    if z_dim:
        parts.append(scenario.z_scale * rng.normal(size=(settings.ic_count, z_dim)))
    return np.concatenate(parts, axis=1)


def _rung_config(design: OutputFeedbackDesign, z_dim: int,
                 settings: SweepSettings, L: float) -> IntegratorConfig:
    # simulated span and step both scale with 1/L so every rung integrates
    # the same scaling-free trajectory segment at the same resolution
    steps = round(settings.t_end * settings.horizon_margin / settings.step)
    limit = None if settings.work_factor is None else settings.work_factor * steps
    return IntegratorConfig(
        step=settings.step / L,
        t_end=settings.t_end * settings.horizon_margin / L,
        origin_guard=settings.origin_guard,
        threshold=settings.threshold,
        weights=tuple(design.weights.r0.entries) * 2 + (1.0,) * z_dim,
        work_limit=limit,
    )


def _run_rung(design: OutputFeedbackDesign, scenario: Optional[DisturbanceScenario],
              settings: SweepSettings, L: float, X0: np.ndarray) -> dict:
    n = design.n
    z_dim = scenario.z_dim if scenario is not None else 0
    rung = design.with_scaling(L)
    cfg = _rung_config(design, z_dim, settings, L)
    res = integrate_batch(rung.coupled_rhs(scenario), X0, cfg)
    plant_final = hom_norm(res.final_states[:, : 2 * n], cfg.weights[: 2 * n])
    settle = settings.threshold
    if scenario is not None and scenario.settle_threshold is not None:
        settle = scenario.settle_threshold
    settled = (
        np.isfinite(res.conv_times)
        | np.isfinite(res.clamp_times)
        | (plant_final < settle)
    )
    ok = bool(
        np.all(settled)
        and not np.any(res.blown_up)
        and not np.any(res.work_exceeded)
    )
    finite = np.isfinite(res.conv_times)
    rec = {
        "L": float(L),
        "passed": ok,
        "settled": int(np.sum(settled)),
        "blown_up": int(np.sum(res.blown_up)),
        "unverified": int(np.sum(res.work_exceeded)),
        "work": float(res.work),
        "worst_final": float(np.max(plant_final)),
        "worst_peak": float(np.max(res.max_norms)),
        "worst_conv_time": float(np.max(res.conv_times[finite])) if np.any(finite) else None,
    }
    if z_dim:
        z_final = np.max(np.abs(res.final_states[:, 2 * n :]), axis=1)
        z_ok = bool(np.all(z_final <= settings.aux_tail))
        rec["aux_final"] = float(np.max(z_final))
        rec["passed"] = ok and z_ok
    return rec


def run_scaling_battery(design: OutputFeedbackDesign, L_values,
                        scenario: Optional[DisturbanceScenario] = None,
                        settings: Optional[SweepSettings] = None) -> list:
    """Simulate the declared test set at each scaling and report pass/fail."""
    settings = settings or SweepSettings()
    if scenario is not None and scenario.n != design.n:
        raise ValueError(f"scenario dimension {scenario.n} != design dimension {design.n}")
    X0 = sweep_initial_states(design, scenario, settings)
    return [_run_rung(design, scenario, settings, float(L), X0) for L in L_values]


def _growth_audit(design: OutputFeedbackDesign, scenario: DisturbanceScenario,
                  settings: SweepSettings, L: float, X0: np.ndarray) -> dict:
    """Worst trace ratio of the disturbance against its power-sum envelope."""
    n = design.n
    z_dim = scenario.z_dim
    cfg = _rung_config(design, z_dim, settings, L)
    row = int(np.argmax(hom_norm(X0[:, :n], design.weights.r0.as_array())))
    trace = integrate(design.with_scaling(L).coupled_rhs(scenario), X0[row], cfg)
    stride = max(1, trace.states.shape[0] // 2000)
    states = trace.states[::stride]
    x = states[:, :n]
    z = states[:, 2 * n :]
    deltas = np.abs(scenario.delta(trace.times[::stride], x, z))
    worst = 0.0
    for i in scenario.active:
        env = scenario.envelope(x, i, design.degrees, design.form)
        good = env > 1e-12
        if np.any(good):
            worst = max(worst, float(np.max(deltas[good, i - 1] / env[good])))
    return {"worst_ratio": worst, "trace_points": int(states.shape[0])}


def _select_scaling(design: OutputFeedbackDesign,
                    scenario: Optional[DisturbanceScenario],
                    settings: Optional[SweepSettings], form: str) -> OutputFeedbackDesign:
    settings = settings or SweepSettings()
    if scenario is not None and scenario.n != design.n:
        raise ValueError(f"scenario dimension {scenario.n} != design dimension {design.n}")
    sign = 1.0 if form == "feedback" else -1.0
    X0 = sweep_initial_states(design, scenario, settings)
    frontier = []
    chosen = None
    last_fail = None
    for k in range(settings.max_exponent + 1):
        L = 2.0 ** (sign * k)
        rec = _run_rung(design, scenario, settings, L, X0)
        frontier.append(rec)
        if rec["passed"]:
            chosen = L
            break
        last_fail = L
    if chosen is None:
        exc = RuntimeError(
            f"{form}-form selection failed: no scaling passed; frontier "
            + repr([(r["L"], r["passed"]) for r in frontier])
        )
        exc.frontier = frontier
        raise exc
    if settings.refine and last_fail is not None:
        lo, hi = (last_fail, chosen) if form == "feedback" else (chosen, last_fail)
        for _ in range(settings.refine_steps):
            mid = float(np.sqrt(lo * hi))
            rec = _run_rung(design, scenario, settings, mid, X0)
            frontier.append(rec)
            if rec["passed"]:
                chosen = mid
                if form == "feedback":
                    hi = mid
                else:
                    lo = mid
            else:
                if form == "feedback":
                    lo = mid
                else:
                    hi = mid
    selection = {
        "form": form,
        "L": chosen,
        "frontier": frontier,
        "settings": settings.to_dict(),
        "scenario": scenario.to_dict() if scenario is not None else None,
        "test_set": X0.tolist(),
    }
    if scenario is not None and scenario.delta is not None and scenario.active:
        selection["growth_audit"] = _growth_audit(design, scenario, settings, chosen, X0)
    note = _ordering_note(form, design.degrees)
    out = dataclasses.replace(design, L=chosen, form=form, ordering_note=note)
    out.selection = selection
    return out


def select_L_feedback(design: OutputFeedbackDesign,
                      scenario: Optional[DisturbanceScenario] = None,
                      settings: Optional[SweepSettings] = None) -> OutputFeedbackDesign:
    """Smallest power-of-two scaling (swept upward) that passes the test set."""
    return _select_scaling(design, scenario, settings, "feedback")


def select_L_feedforward(design: OutputFeedbackDesign,
                         scenario: Optional[DisturbanceScenario] = None,
                         settings: Optional[SweepSettings] = None) -> OutputFeedbackDesign:
    """Largest inverse-power-of-two scaling (swept downward) that passes the test set."""
    return _select_scaling(design, scenario, settings, "feedforward")


def finite_time_bound(c: float, d_v0: float, d_v_inf: float, d: DegreePair) -> float:
    """Uniform convergence-time bound from a certified decrease rate.

    Valid when the zero-side degree is negative and the infinity-side degree
    positive: trajectories enter the unit level set in bounded time from any
    distance, then reach the origin in bounded time from anywhere inside.
    """
    if not (d.d0 < 0.0 < d.d_inf):
        raise ValueError(
            "finite-time bound needs a negative zero-side degree and a "
            "positive infinity-side degree"
        )
    if not c > 0.0:
        raise ValueError("decrease rate must be positive")
    return (d_v_inf / d.d_inf + d_v0 / abs(d.d0)) / c


def certified_decrease_rate(ctrl: ControllerDesign, m_samples: Optional[int] = None,
                            seed: int = 13) -> float:
    """Largest rate c with dV/dt <= -c V**kappa on the sampled closed loop.

    The exponent kappa is the zero-side one where V is at most one and the
    infinity-side one above, matching the two phases of the finite-time
    argument.  The returned rate is the worst sampled ratio.
    """
    d = ctrl.degrees
    dv = ctrl.d_v
    k0 = 1.0 + d.d0 / dv[0]
    ki = 1.0 + d.d_inf / dv[1]
    m = m_samples if m_samples is not None else 96 * ctrl.n
    lams = np.geomspace(1e-3, 1e3, m)
    rhs = ctrl.closed_loop_rhs()
    rate = np.inf
    for off, rw in enumerate((ctrl.weights.r0, ctrl.weights.r_inf)):
        th = sphere_samples(rw, m, seed=seed + off)
        pts = dilate(lams[:, None], rw, th)
        v = np.asarray(ctrl.lyapunov(pts), dtype=float)
        vdot = np.sum(ctrl.lyapunov_gradient(pts) * rhs(0.0, pts), axis=-1)
        kappa = np.where(v <= 1.0, k0, ki)
        ratio = -vdot / np.maximum(v, 1e-300) ** kappa
        rate = min(rate, float(np.min(ratio)))
    if not rate > 0.0:
        raise RuntimeError(f"decrease rate not certified (worst ratio {rate:.3e})")
    return rate


def rescaling_residual(design: OutputFeedbackDesign, L_values,
                       x0, xhat0=None, t_end: float = 6.0,
                       step: float = 1e-3) -> float:
    """Worst deviation between direct and scaling-free simulations.

    For each scaling, the physical coupled system is simulated directly, and
    the stacked scaling-free form is simulated from the matching initial
    state and mapped back to plant and observer coordinates at compressed
    times; the two must coincide up to integration error.
    """
    x0 = np.asarray(x0, dtype=float)
    xhat0 = np.zeros_like(x0) if xhat0 is None else np.asarray(xhat0, dtype=float)
    n = design.n
    w2 = tuple(design.weights.r0.entries) * 2
    worst = 0.0
    for L in (float(v) for v in L_values):
        rung = design.with_scaling(L)
        # guard and threshold are pushed far below the comparison scale so
        # no trajectory is clamped or stopped before the horizon
        ref_cfg = IntegratorConfig(step=step, t_end=t_end * L, origin_guard=0.0,
                                   threshold=1e-280, weights=w2)
        ref = integrate(rung.rescaled_rhs(), rung.tau_state(x0, xhat0), ref_cfg)
        cfg = IntegratorConfig(step=step / L, t_end=t_end, origin_guard=0.0,
                               threshold=1e-280, weights=w2)
        tr = integrate(rung.coupled_rhs(), np.concatenate([x0, xhat0]), cfg)
        tau = L * tr.times
        ref_at = np.stack(
            [np.interp(tau, ref.times, ref.states[:, j]) for j in range(2 * n)],
            axis=-1,
        )
        x_ref, xhat_ref = rung.physical_state(ref_at)
        direct = np.concatenate([x_ref, xhat_ref], axis=-1)
        worst = max(worst, float(np.max(np.abs(tr.states - direct))))
    return worst
