"""Time integration of a :class:`CoupledModel`.

Disturbance instants are hard step boundaries: each piecewise-constant load
segment is integrated on its own, so no step straddles a load jump.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import AlgebraicOutputs, CoupledModel, DisturbanceSchedule, Loads

logger = logging.getLogger(__name__)

METHODS = ("rk4", "rk45")


class DivergenceError(RuntimeError):
    def __init__(self, t, message="non-finite state"):
        self.t = t
        super().__init__(f"{message} at t = {t:.12g}")


@dataclass(frozen=True)
class SimParams:
    t_end: float = 200.0
    dt: float = 0.01
    method: str = "rk4"
    rtol: float = 1e-9
    atol: float = 1e-11
    sample_every: int = 1
    steady_eps: float = 1e-8
    steady_hold: float = 1.0
    t0: float = 0.0
    max_step: float = 0.5  # rk45 only

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not self.t_end > self.t0:
            raise ValueError("t_end must be > t0")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be > 0")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if int(self.sample_every) < 1:
            raise ValueError("sample_every must be >= 1")
        if not self.max_step > 0:
            raise ValueError("max_step must be > 0")

    def as_dict(self):
        return asdict(self)


@dataclass
class Trajectory:
    model: CoupledModel
    times: np.ndarray
    states: np.ndarray
    # (t_start, t_stop, loads) per piecewise-constant segment
    segments: list[tuple[float, float, Loads]]
    security: np.ndarray
    params: SimParams
    n_steps: int = 0
    converged: bool | None = None
    steady_time: float | None = None
    _outputs: list[AlgebraicOutputs] | None = field(default=None, repr=False)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def security_flag(self) -> bool:
        return bool(self.security.any())

    def segment_of(self, k: int) -> int:
        """Segment whose loads apply at sample k (right-continuous)."""
        t = self.times[k]
        for s, (a, b, _) in enumerate(self.segments):
            if a <= t < b:
                return s
        return len(self.segments) - 1

    def loads_at_sample(self, k: int) -> Loads:
        return self.segments[self.segment_of(k)][2]

    def segment_samples(self, s: int) -> np.ndarray:
        """Indices of samples within segment s, both end points included."""
        a, b, _ = self.segments[s]
        return np.flatnonzero((self.times >= a) & (self.times <= b))

    @property
    def outputs(self) -> list[AlgebraicOutputs]:
        if self._outputs is None:
            self._outputs = [
                self.model.outputs(self.states[k], self.loads_at_sample(k)) for k in range(len(self.times))
            ]
        return self._outputs

    def output_series(self, name: str) -> np.ndarray:
        return np.array([getattr(o, name) for o in self.outputs])


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0


def rk4_step(f, x, h, k1=None):
    if k1 is None:
        k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def dopri_step(f, x, h, k1):
    """One Dormand-Prince step; returns (x_new, error_estimate, f(x_new))."""
    K = [k1]
    for i in range(1, 7):
        xi = x + h * sum(a * K[j] for j, a in enumerate(_A[i]) if a != 0.0)
        K.append(f(xi))
    x_new = x + h * sum(b * K[j] for j, b in enumerate(_B5) if b != 0.0)
    err = h * sum(e * K[j] for j, e in enumerate(_E))
    return x_new, err, K[6]


def _check_finite(x, t):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(t)


def _march(model, x0, params, schedule, steady):
    schedule = schedule or DisturbanceSchedule()
    t0, t_end = params.t0, params.t_end
    breaks = [t for t in schedule.times if t0 < t < t_end]
    bounds = [t0] + breaks + [t_end]
    segments = [(bounds[i], bounds[i + 1], model.loads_at(bounds[i], schedule)) for i in range(len(bounds) - 1)]

    x = np.array(x0, dtype=float)
    if x.shape != (model.layout.size,):
        raise ValueError(f"x0 has shape {x.shape}, layout needs ({model.layout.size},)")
    _check_finite(x, t0)
    times, states = [t0], [x.copy()]
    n_steps = 0
    converged = None
    steady_time = None
    every = int(params.sample_every)

    if steady:
        f_last = lambda y: model.derivative(y, segments[-1][2])  # noqa: E731
        if len(segments) == 1 and np.max(np.abs(f_last(x)), initial=0.0) < params.steady_eps:
            return _finish(model, times, states, segments, params, 0, True, t0)
        converged = False

    for s, (a, b, loads) in enumerate(segments):
        f = lambda y, _l=loads: model.derivative(y, _l)  # noqa: E731
        check = steady and s == len(segments) - 1
        held_since = None
        t = a
        k_in_seg = 0
        fx = f(x)
        h = min(params.dt, params.max_step) if params.method == "rk45" else params.dt
        while True:
            if check:
                if np.max(np.abs(fx), initial=0.0) < params.steady_eps:
                    if held_since is None:
                        held_since = t
                    if t - held_since >= params.steady_hold:
                        converged, steady_time = True, t
                        break
                else:
                    held_since = None
            if t >= b:
                break
            if params.method == "rk4":
                k_in_seg += 1
                t_next = a + k_in_seg * params.dt
                if t_next > b - 1e-12 * max(1.0, abs(b)):
                    t_next = b
                x = rk4_step(f, x, t_next - t, fx)
                t = t_next
                fx = f(x)
            else:
                while True:
                    h = min(h, params.max_step, b - t)
                    x_new, err, f_new = dopri_step(f, x, h, fx)
                    scale = params.atol + params.rtol * np.maximum(np.abs(x), np.abs(x_new))
                    en = math.sqrt(np.mean((err / scale) ** 2)) if err.size else 0.0
                    if not math.isfinite(en):
                        raise DivergenceError(t, "non-finite error estimate")
                    if en <= 1.0:
                        factor = MAX_FACTOR if en == 0 else min(MAX_FACTOR, max(MIN_FACTOR, SAFETY * en ** -0.2))
                        t_next = t + h
                        if b - t_next <= 1e-12 * max(1.0, abs(b)):
                            t_next = b
                        t, x, fx = t_next, x_new, f_new
                        h *= factor
                        break
                    h *= max(MIN_FACTOR, SAFETY * en ** -0.2)
                    if h < 1e-14 * max(1.0, abs(t)):
                        raise DivergenceError(t, "step size underflow")
            n_steps += 1
            _check_finite(x, t)
            if n_steps % every == 0 or t == b:
                if t != times[-1]:
                    times.append(t)
                    states.append(x.copy())
        if converged:
            break
    if steady and not converged:
        logger.warning("no steady state detected before t_end = %g", t_end)
    if times[-1] != t:
        times.append(t)
        states.append(x.copy())
    return _finish(model, times, states, segments, params, n_steps, converged, steady_time)


def _finish(model, times, states, segments, params, n_steps, converged, steady_time):
    times = np.array(times)
    states = np.array(states)
    eta = states[:, model.layout.eta]
    security = np.any(np.abs(eta) >= math.pi / 2, axis=1) if eta.size else np.zeros(len(times), bool)
    if security.any():
        logger.warning(
            "security constraint |eta| >= pi/2 exceeded at %d samples (first t = %g)",
            int(security.sum()),
            times[np.argmax(security)],
        )
    if converged and steady_time is not None:
        segments = [seg if seg[1] <= steady_time else (seg[0], steady_time, seg[2]) for seg in segments]
        segments = [seg for seg in segments if seg[0] <= steady_time]
    return Trajectory(
        model=model,
        times=times,
        states=states,
        segments=segments,
        security=security,
        params=params,
        n_steps=n_steps,
        converged=converged,
        steady_time=steady_time,
    )


def integrate(model: CoupledModel, x0, params: SimParams, disturbances: DisturbanceSchedule | None = None) -> Trajectory:
    """Integrate from ``params.t0`` to ``params.t_end``.

    RK4 advances in steps of ``dt`` measured from each segment start, with the
    last step of a segment shortened to land on the boundary.  RK45 adapts
    its step to (rtol, atol).  Samples are kept every ``sample_every`` steps
    plus at every segment boundary.
    """
    return _march(model, x0, params, disturbances, steady=False)


def integrate_to_steady(model: CoupledModel, x0, params: SimParams, disturbances: DisturbanceSchedule | None = None):
    """Integrate until ||rhs||_inf < steady_eps has held for steady_hold seconds.

    Only the segment after the last disturbance is checked.  Returns the
    trajectory and the final state; ``traj.converged`` is False when t_end was
    reached first.
    """
    traj = _march(model, x0, params, disturbances, steady=True)
    return traj, traj.final.copy()
