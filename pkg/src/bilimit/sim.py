"""Fixed-step trajectory integration and experiment harnesses.

Right-hand sides with negative scaling degree lose local Lipschitz bounds
near the origin, so the integrator is a classical fixed-step fourth-order
scheme with tiered refinement instead of an adaptive one: the step shrinks
when the homogeneous norm enters a small neighbourhood of the origin, and
the state clamps to exactly zero once the norm falls below the guard radius.
Batches of trajectories integrate vectorized; the BILIMIT_THREADS
environment variable caps optional thread parallelism over batch chunks.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .hom_core import hom_norm

DEFAULT_STEP = 1e-3
DEFAULT_T_END = 50.0
DEFAULT_GUARD = 1e-9
DEFAULT_THRESHOLD = 1e-6
SUBSTEP_FACTOR = 16
MAX_REFINE = 256
BATCH_REFINE_LIMIT = 16 ** 5
QUALITY_THRESH = 0.25
BLOWUP_LIMIT = 1e30


def thread_count() -> int:
    raw = os.environ.get("BILIMIT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass(frozen=True)
class IntegratorConfig:
    """Step size, horizon, origin guard radius, and convergence threshold (seconds).

    work_limit, when set, caps the number of stage evaluations a batch chunk
    may spend (trial and accepted substeps both count).  Rows still live when
    the budget runs out are frozen and flagged instead of ground through the
    refinement floor, so a batch over a right-hand side too stiff for the
    scheme terminates deterministically with an explicit unverified marker
    rather than burning unbounded time on floor-level substeps.
    """

    step: float = DEFAULT_STEP
    t_end: float = DEFAULT_T_END
    origin_guard: float = DEFAULT_GUARD
    threshold: float = DEFAULT_THRESHOLD
    weights: Optional[tuple] = None
    work_limit: Optional[float] = None

    def __post_init__(self):
        if self.step <= 0 or self.t_end <= 0 or self.step >= self.t_end:
            raise ValueError("need 0 < step < t_end")
        if self.threshold <= 0:
            raise ValueError("convergence threshold must be positive")
        if self.origin_guard < 0:
            raise ValueError("origin guard radius must be nonnegative")
        if self.work_limit is not None and self.work_limit <= 0:
            raise ValueError("work limit must be positive when set")
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(v) for v in self.weights))

    def norm_weights(self, dim: int) -> np.ndarray:
        if self.weights is not None:
            if len(self.weights) != dim:
                raise ValueError(
                    f"config weights have length {len(self.weights)}, state has {dim}"
                )
            return np.asarray(self.weights, dtype=float)
        return np.ones(dim)


@dataclass
class Trace:
    """A recorded trajectory; arrays are frozen after construction."""

    times: np.ndarray
    states: np.ndarray
    estimates: Optional[np.ndarray] = None
    disturbances: Optional[np.ndarray] = None
    events: list = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trace times must be strictly increasing")
        if self.states.shape[0] != self.times.shape[0]:
            raise ValueError("states and times must have matching length")
        for name in ("estimates", "disturbances"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=float)
                if arr.shape[0] != self.times.shape[0]:
                    raise ValueError(f"{name} and times must have matching length")
                setattr(self, name, arr)
        t0, t1 = float(self.times[0]), float(self.times[-1])
        for t, kind in self.events:
            if not (t0 <= t <= t1 + 1e-12):
                raise ValueError(f"event {kind!r} at {t} lies outside [{t0}, {t1}]")
        for arr in (self.times, self.states, self.estimates, self.disturbances):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


def _rk4_step(
    field: Callable, t: float, x: np.ndarray, h: float, k1: Optional[np.ndarray] = None
) -> np.ndarray:
    if k1 is None:
        k1 = field(t, x)
    k2 = field(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = field(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = field(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_stages(field: Callable, t, x, h, k1):
    """One RK4 step plus the embedded second-order defect of its stages.

    The defect |k1 - 4 k2 + 2 k3 + k4|/6 is the difference between the
    fourth-order update and the midpoint-rule update built from the same
    stages.  It vanishes like (rate * h)^2 on smooth stretches and blows up
    past the stability margin, so it is the refinement trigger: stages that
    disagree mean the step cannot be trusted at this size.
    """
    k2 = field(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = field(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = field(t + h, x + h * k3)
    xnew = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    defect = np.abs(k1 - 4.0 * k2 + 2.0 * k3 + k4) / 6.0
    return xnew, defect


def integrate(field: Callable, x0, cfg: IntegratorConfig, t0: float = 0.0) -> Trace:
    """Integrate dx/dt = field(t, x) on a fixed grid from t0 to t0 + t_end.

    Fields with negative scaling degree reach the origin in finite time, and
    a fixed step h cannot ride them below the overshoot scale h^(1/(1-d)):
    the iterates chatter there instead of converging.  High-gain injection
    terms are also much faster than the sampling grid at large amplitudes.
    Each substep therefore takes the largest stride (full step divided by
    powers of 16, down to 1/256) whose RK4 stages still agree with their
    embedded midpoint rule; the defect scales like (rate * h)^2, so smooth
    stretches always run at the full step while finite-time approach and
    stiff boundary layers are resolved at whatever stride they need.  Below
    the guard radius the state is set to exactly zero for the rest of the
    horizon.  A non-finite or exploding state truncates the trace with a
    "blowup" event stamped at the last recorded sample.
    """
    x = np.asarray(x0, dtype=float).copy()
    dim = x.shape[0]
    r = cfg.norm_weights(dim)
    steps = int(round(cfg.t_end / cfg.step))
    times = t0 + cfg.step * np.arange(steps + 1)
    rows = np.empty((steps + 1, dim))
    rows[0] = x
    events = []
    clamped = False
    blown = False
    h_min = cfg.step / MAX_REFINE

    with np.errstate(all="ignore"):
        for k in range(steps):
            if clamped:
                rows[k + 1] = 0.0
                continue
            t = float(times[k])
            rem = cfg.step
            while rem > 0.5 * h_min:
                nrm = hom_norm(x, r)
                if cfg.origin_guard > 0.0 and nrm < cfg.origin_guard:
                    x[:] = 0.0
                    clamped = True
                    events.append((t, "clamped"))
                    break
                fx = np.asarray(field(t, x), dtype=float)
                # the defect is judged against the velocity plus the motion
                # that would cross the state's own scale in ten steps, so
                # components idling near zero velocity cannot misfire it
                scale = max(nrm, cfg.threshold) ** r
                h = min(cfg.step, rem)
                if np.all(np.isfinite(fx)):
                    while True:
                        xn, defect = _rk4_stages(field, t, x, h, fx)
                        quality = defect / (np.abs(fx) + 0.1 * scale / h)
                        quality = np.where(np.isfinite(quality), quality, np.inf)
                        if float(np.max(quality)) <= QUALITY_THRESH or h <= 1.01 * h_min:
                            break
                        h = max(h / SUBSTEP_FACTOR, h_min)
                else:
                    xn = _rk4_step(field, t, x, h, k1=fx)
                x = xn
                t += h
                rem -= h
                if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > BLOWUP_LIMIT:
                    blown = True
                    break
            if blown:
                events.append((float(times[k]), "blowup"))
                rows = rows[: k + 1]
                times = times[: k + 1]
                break
            rows[k + 1] = x

    return Trace(times=times, states=rows, events=events)


def convergence_time(
    trace: Trace, threshold: float, weights: Optional[np.ndarray] = None
) -> Optional[float]:
    """First time after which the homogeneous norm stays below threshold; None if never."""
    dim = trace.states.shape[1]
    r = np.asarray(weights, dtype=float) if weights is not None else np.ones(dim)
    norms = hom_norm(trace.states, r)
    below = norms < threshold
    if not below[-1]:
        return None
    above = np.nonzero(~below)[0]
    idx = 0 if above.size == 0 else int(above[-1]) + 1
    return float(trace.times[idx])


@dataclass
class BatchResult:
    """Per-trajectory outcome of a vectorized integration run.

    work counts stage evaluations actually spent; work_exceeded flags rows
    that were still live when the configured budget ran out, meaning their
    outcome is unverified rather than converged or diverged.
    """

    final_states: np.ndarray
    conv_times: np.ndarray
    clamp_times: np.ndarray
    max_norms: np.ndarray
    blown_up: np.ndarray
    norms_history: Optional[np.ndarray] = None
    times: Optional[np.ndarray] = None
    work: float = 0.0
    work_exceeded: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.work_exceeded is None:
            self.work_exceeded = np.zeros(self.final_states.shape[0], dtype=bool)


def _integrate_chunk(field, X0, cfg, t0, keep_norms):
    X = np.asarray(X0, dtype=float).copy()
    nrows, dim = X.shape
    r = cfg.norm_weights(dim)
    steps = int(round(cfg.t_end / cfg.step))
    h = cfg.step

    conv = np.full(nrows, np.nan)
    clamp = np.full(nrows, np.nan)
    blown = np.zeros(nrows, dtype=bool)
    exceeded = np.zeros(nrows, dtype=bool)
    budget = np.inf if cfg.work_limit is None else float(cfg.work_limit)
    work = 0
    nrm = hom_norm(X, r)
    max_norms = nrm.copy()
    history = np.empty((steps + 1, nrows)) if keep_norms else None
    if keep_norms:
        history[0] = nrm

    below = nrm < cfg.threshold
    conv[below] = t0
    live = np.ones(nrows, dtype=bool)

    def fwrap(t, Y):
        with np.errstate(all="ignore"):
            return np.asarray(field(t, Y), dtype=float)

    for k in range(steps):
        t = t0 + k * h
        if np.any(live):
            idx = np.nonzero(live)[0]
            Y = X[idx].copy()
            # live rows cross the step together, but the stride inside it is
            # adaptive: every substep takes the largest stride whose RK4
            # stage defect stays small on every row, so boundary layers cost
            # steps per e-fold instead of a fixed fine grid
            floor_h = h / BATCH_REFINE_LIMIT
            rem = h
            tt = t
            while rem > 0.5 * floor_h:
                ny = hom_norm(Y, r)
                if cfg.origin_guard > 0.0:
                    sub = np.isfinite(ny) & (ny < cfg.origin_guard)
                    if np.any(sub):
                        Y[sub] = 0.0
                        ny = np.where(sub, 0.0, ny)
                k1 = fwrap(tt, Y)
                okrow = np.all(np.isfinite(Y), axis=-1) & np.all(np.isfinite(k1), axis=-1)
                scale = np.maximum(ny, cfg.threshold)[:, None] ** r[None, :]
                hc = rem
                while True:
                    Yn, defect = _rk4_stages(fwrap, tt, Y, hc, k1)
                    work += 1
                    quality = defect / (np.abs(k1) + 0.1 * scale / hc)
                    quality = np.where(np.isfinite(quality), quality, np.inf)
                    quality = np.where(okrow[:, None], quality, 0.0)
                    worst = float(np.max(quality, initial=0.0))
                    if worst <= QUALITY_THRESH or hc <= 1.01 * floor_h or work >= budget:
                        break
                    hc = max(hc / SUBSTEP_FACTOR, floor_h)
                if work >= budget:
                    break
                Y = Yn
                tt += hc
                rem -= hc
            if work >= budget:
                exceeded[idx] = True
                X[idx] = Y
                live[idx] = False
                break
            Ynew = Y

            bad = ~np.all(np.isfinite(Ynew), axis=-1) | (
                np.max(np.abs(Ynew), axis=-1) > BLOWUP_LIMIT
            )
            if np.any(bad):
                blown[idx[bad]] = True
                live[idx[bad]] = False
                Ynew[bad] = X[idx[bad]]
            X[idx] = Ynew

        nrm = hom_norm(X, r)
        if cfg.origin_guard > 0.0:
            hit = live & (nrm < cfg.origin_guard)
            if np.any(hit):
                clamp[hit] = t + h
                X[hit] = 0.0
                live[hit] = False
                nrm = hom_norm(X, r)
        np.maximum(max_norms, nrm, out=max_norms)
        if keep_norms:
            history[k + 1] = nrm

        below_now = nrm < cfg.threshold
        entered = below_now & np.isnan(conv)
        conv[entered] = t + h
        left = ~below_now & ~np.isnan(conv)
        conv[left] = np.nan
        conv[blown] = np.nan

        if not np.any(live):
            if keep_norms and k + 1 < steps:
                history[k + 2 :] = nrm
            break

    conv[exceeded] = np.nan
    times = t0 + h * np.arange(steps + 1)
    return BatchResult(
        final_states=X,
        conv_times=conv,
        clamp_times=clamp,
        max_norms=max_norms,
        blown_up=blown,
        norms_history=history,
        times=times if keep_norms else None,
        work=float(work),
        work_exceeded=exceeded,
    )


def integrate_batch(
    field: Callable,
    X0,
    cfg: IntegratorConfig,
    t0: float = 0.0,
    keep_norms: bool = False,
) -> BatchResult:
    """Vectorized fixed-step integration of many initial conditions at once.

    Rows advance on a shared grid; within each step the whole chunk divides
    the step by the refinement the stiffest live row needs, judged by an
    Euler probe of the homogeneous norm.  Clamping below the guard radius
    freezes a row at zero.  Set BILIMIT_THREADS to split the batch across
    threads.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    workers = thread_count()
    if workers <= 1 or X0.shape[0] < 2 * workers:
        return _integrate_chunk(field, X0, cfg, t0, keep_norms)

    chunks = np.array_split(np.arange(X0.shape[0]), workers)
    chunks = [c for c in chunks if c.size]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(
            pool.map(lambda c: _integrate_chunk(field, X0[c], cfg, t0, keep_norms), chunks)
        )
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    history = (
        np.concatenate([p.norms_history for p in parts], axis=1) if keep_norms else None
    )
    return BatchResult(
        final_states=cat("final_states"),
        conv_times=cat("conv_times"),
        clamp_times=cat("clamp_times"),
        max_norms=cat("max_norms"),
        blown_up=cat("blown_up"),
        norms_history=history,
        times=parts[0].times if keep_norms else None,
        work=float(sum(p.work for p in parts)),
        work_exceeded=cat("work_exceeded"),
    )


def integrate_cascade(
    field: Callable,
    X0,
    cfg: IntegratorConfig,
    growth: float = 8.0,
    segments: int = 6,
) -> BatchResult:
    """Chain batch runs whose step and span both grow geometrically.

    Fields with positive scaling degree decay ever more slowly as the state
    shrinks, while their stable step limit grows in proportion, so a single
    fixed step either wastes work early or stalls late.  Segment i runs the
    fixed-step batch with step*growth**i over a span t_end*growth**i,
    resuming from the previous final states.  The cascade stops early once
    every row has converged, clamped, or blown up.  Convergence times keep
    the usual stays-below-for-the-remainder meaning across segment joins.
    """
    if growth < 1.0:
        raise ValueError("growth factor must be at least 1")
    X = np.atleast_2d(np.asarray(X0, dtype=float))
    t0 = 0.0
    conv = np.full(X.shape[0], np.nan)
    clamp = np.full(X.shape[0], np.nan)
    max_norms = np.zeros(X.shape[0])
    blown = np.zeros(X.shape[0], dtype=bool)
    exceeded = np.zeros(X.shape[0], dtype=bool)
    work = 0.0
    for i in range(segments):
        seg = IntegratorConfig(
            step=cfg.step * growth**i,
            t_end=cfg.t_end * growth**i,
            origin_guard=cfg.origin_guard,
            threshold=cfg.threshold,
            weights=cfg.weights,
            work_limit=cfg.work_limit,
        )
        res = integrate_batch(field, X, seg, t0=t0)
        X = res.final_states
        # a row that left the threshold ball during this segment loses any
        # earlier convergence stamp; one that stayed below keeps the older one
        stayed = np.isfinite(res.conv_times) & (res.conv_times <= t0)
        conv = np.where(np.isfinite(res.conv_times),
                        np.where(stayed & np.isfinite(conv), conv, res.conv_times),
                        np.nan)
        clamp = np.where(np.isfinite(clamp), clamp, res.clamp_times)
        np.maximum(max_norms, res.max_norms, out=max_norms)
        blown |= res.blown_up
        exceeded |= res.work_exceeded
        work += res.work
        t0 += seg.t_end
        done = blown | np.isfinite(clamp) | np.isfinite(conv) | exceeded
        if np.all(done):
            break
    conv[exceeded] = np.nan
    return BatchResult(
        final_states=X,
        conv_times=conv,
        clamp_times=clamp,
        max_norms=max_norms,
        blown_up=blown,
        work=work,
        work_exceeded=exceeded,
    )


def trailing_sup(trace: Trace, weights, block: slice = slice(None), frac: float = 0.2) -> float:
    """Sup of the homogeneous norm of a state block over the trailing fraction."""
    r = np.asarray(weights, dtype=float)
    cut = int((1.0 - frac) * trace.states.shape[0])
    tail = trace.states[cut:, block]
    return float(np.max(hom_norm(tail, r)))


def run_iss_experiment(design, amplitudes, cfg: Optional[IntegratorConfig] = None) -> dict:
    """Probe disturbance-to-state gain with constant worst-sign disturbances.

    For each amplitude the closed loop runs from a fixed initial condition
    with a constant disturbance of that size pushed into the last plant
    equation; the report records the sup of the plant's homogeneous norm over
    the trailing fifth of the horizon, and checks that it is nondecreasing in
    the amplitude and negligible at amplitude zero.  A diverging run is
    reported as infinite and the experiment continues.
    """
    cfg = cfg or IntegratorConfig()
    r = np.asarray(design.plant_weights, dtype=float)
    block = getattr(design, "plant_block", slice(None))

    sups = []
    events = []
    for a in amplitudes:
        fieldfn = design.disturbed_field(float(a))
        trace = integrate(fieldfn, design.iss_initial_state(), cfg)
        if any(kind == "blowup" for _, kind in trace.events):
            sups.append(float("inf"))
            events.append("blowup")
            continue
        sups.append(trailing_sup(trace, r, block))
        events.append("ok")

    monotone = all(sups[i] <= sups[i + 1] + 1e-12 for i in range(len(sups) - 1))
    zero_ok = True
    if len(amplitudes) and float(amplitudes[0]) == 0.0:
        zero_ok = sups[0] < cfg.threshold
    return {
        "amplitudes": [float(a) for a in amplitudes],
        "steady_state_sup": sups,
        "monotone": bool(monotone),
        "zero_amplitude_ok": bool(zero_ok),
        "events": events,
        "trailing_fraction": 0.2,
    }
