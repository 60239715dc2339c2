"""Voltage-clamp simulation of two potassium channel models.

The delayed-rectifier channel (kd) uses alpha/beta rate kinetics; the slow
non-inactivating channel (ks) uses steady-state/time-constant kinetics. Both
reduce to the same linear gating ODE, advanced with an exponential-Euler
update that is exact while the voltage is frozen. Voltage protocols are
piecewise constant or piecewise linear per sweep; constant segments are
integrated in closed form and ramp segments are stepped per dt in a compiled
kernel. Traces are normalized by the peak conductance and subsampled to a
fixed number of points per sweep.

Sign conventions: the alpha rate uses the denominator (1 - exp(-u/q_alpha)),
which keeps alpha >= 0 over the physiological voltage range, and the ks time
constant uses the (V + th_p) offset so that both kinetic curves are centered
at the same voltage. ``KsParams.printed_tau_offset`` switches the time
constant back to the (V - th_p) offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .errors import InputError, ParameterDomainError, SimulationDivergenceError

CHANNEL_KD = "kd"
CHANNEL_KS = "ks"
CHANNELS = (CHANNEL_KD, CHANNEL_KS)

KD_PARAM_NAMES = ("M", "R_alpha", "V_T", "th_alpha", "q_alpha", "R_beta", "th_beta", "q_beta")
KS_PARAM_NAMES = ("M", "th_p", "q_p", "R_tau", "q_tau")


def _all_pos(x) -> bool:
    return bool(np.all(np.asarray(x, dtype=float) > 0))


def _none_zero(x) -> bool:
    return bool(np.all(np.asarray(x, dtype=float) != 0))


@dataclass(frozen=True)
class KdParams:
    """Delayed-rectifier kinetics; fields may be scalars or (B,) arrays."""

    M: float | np.ndarray
    R_alpha: float | np.ndarray
    V_T: float | np.ndarray
    th_alpha: float | np.ndarray
    q_alpha: float | np.ndarray
    R_beta: float | np.ndarray
    th_beta: float | np.ndarray
    q_beta: float | np.ndarray
    g_bar: float = 5.0
    E_K: float = -90.0

    def __post_init__(self):
        if not _all_pos(self.M):
            raise ParameterDomainError("M must be positive")
        if not _none_zero(self.q_alpha) or not _none_zero(self.q_beta):
            raise ParameterDomainError("q_alpha and q_beta must be non-zero")
        if not _all_pos(self.g_bar):
            raise ParameterDomainError("g_bar must be positive")


@dataclass(frozen=True)
class KsParams:
    """Slow non-inactivating kinetics; fields may be scalars or (B,) arrays."""

    M: float | np.ndarray
    th_p: float | np.ndarray
    q_p: float | np.ndarray
    R_tau: float | np.ndarray
    q_tau: float | np.ndarray
    tau_max: float = 4000.0
    g_bar: float = 0.004
    E_K: float = -90.0
    printed_tau_offset: bool = False

    def __post_init__(self):
        if not _all_pos(self.M):
            raise ParameterDomainError("M must be positive")
        if not _none_zero(self.q_p) or not _none_zero(self.q_tau):
            raise ParameterDomainError("q_p and q_tau must be non-zero")
        if not _all_pos(self.tau_max) or not _all_pos(self.g_bar):
            raise ParameterDomainError("tau_max and g_bar must be positive")


KD_GROUND_TRUTH = KdParams(M=4.0, R_alpha=0.032, V_T=-63.0, th_alpha=15.0, q_alpha=5.0,
                           R_beta=0.5, th_beta=10.0, q_beta=40.0)
KS_GROUND_TRUTH = KsParams(M=1.0, th_p=35.0, q_p=10.0, R_tau=3.3, q_tau=20.0)

# Series threshold for the removable singularity of the alpha rate.
_SERIES_Z = 1e-4


def kd_rates(V, p: KdParams):
    """Opening/closing rates (alpha_n, beta_n) in 1/ms at voltage V (mV).

    alpha_n = R_alpha*u / (1 - exp(-u/q_alpha)) with u = V - V_T - th_alpha;
    the removable singularity at u=0 is evaluated by series expansion, giving
    the limit R_alpha*q_alpha.
    """
    V = np.asarray(V, dtype=float)
    u = V - p.V_T - p.th_alpha
    z = u / p.q_alpha
    z, u, ra, qa = np.broadcast_arrays(z, u, np.asarray(p.R_alpha, dtype=float), np.asarray(p.q_alpha, dtype=float))
    small = np.abs(z) < _SERIES_Z
    zs = np.where(small, 1.0, z)
    with np.errstate(over="ignore"):
        generic = ra * u / (1.0 - np.exp(-zs))
    series = ra * qa * (1.0 + z / 2.0 + z * z / 12.0)
    alpha = np.where(small, series, generic)
    beta = p.R_beta * np.exp(-(V - p.V_T - p.th_beta) / p.q_beta)
    alpha, beta = np.broadcast_arrays(alpha, beta)
    if alpha.ndim == 0:
        return float(alpha), float(beta)
    return alpha, beta


def ks_kinetics(V, p: KsParams):
    """Steady state p_inf (dimensionless) and time constant tau_p (ms) at V."""
    V = np.asarray(V, dtype=float)
    vv = V + p.th_p
    p_inf = 1.0 / (1.0 + np.exp(-vv / p.q_p))
    voff = (V - p.th_p) if p.printed_tau_offset else vv
    with np.errstate(over="ignore"):
        tau = p.tau_max / (p.R_tau * np.exp(voff / p.q_tau) + np.exp(-voff / p.q_tau))
    p_inf, tau = np.broadcast_arrays(p_inf, tau)
    if p_inf.ndim == 0:
        return float(p_inf), float(tau)
    return p_inf, tau


def _gate_kinetics(channel: str, V, p):
    """Unified (g_inf, tau) of the gating ODE dg/dt = (g_inf - g)/tau."""
    if channel == CHANNEL_KD:
        a, b = kd_rates(V, p)
        s = a + b
        return a / s, 1.0 / s
    if channel == CHANNEL_KS:
        return ks_kinetics(V, p)
    raise InputError(f"unknown channel {channel!r}; expected one of {CHANNELS}")


@dataclass(frozen=True)
class Segment:
    """One piece of a sweep's voltage command; constant when v_end == v_start."""

    duration: float
    v_start: float
    v_end: float

    @property
    def is_ramp(self) -> bool:
        return self.v_end != self.v_start

    def voltage(self, t_local):
        if not self.is_ramp:
            return np.full_like(np.asarray(t_local, dtype=float), self.v_start)
        return self.v_start + (self.v_end - self.v_start) * np.asarray(t_local, dtype=float) / self.duration


@dataclass(frozen=True)
class VoltageProtocol:
    """Named set of sweeps, each a sequence of segments."""

    name: str
    sweeps: tuple
    dt: float = 0.025
    holding_v: float = -90.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ParameterDomainError("dt must be positive")
        if not self.sweeps:
            raise InputError("protocol needs at least one sweep")

    @property
    def n_sweeps(self) -> int:
        return len(self.sweeps)

    def sweep_duration(self, i: int) -> float:
        return float(sum(s.duration for s in self.sweeps[i]))

    def sweep_voltage(self, i: int, times: np.ndarray) -> np.ndarray:
        """Command voltage of sweep i at times in (0, duration]."""
        times = np.asarray(times, dtype=float)
        out = np.empty_like(times)
        ends = np.cumsum([s.duration for s in self.sweeps[i]])
        idx = np.searchsorted(ends, times, side="left")
        idx = np.clip(idx, 0, len(ends) - 1)
        starts = ends - np.array([s.duration for s in self.sweeps[i]])
        for j, seg in enumerate(self.sweeps[i]):
            sel = idx == j
            if np.any(sel):
                out[sel] = seg.voltage(times[sel] - starts[j])
        return out


STEP_FAMILY = ("activation", "inactivation", "deactivation")


def build_protocols(dt: float = 0.025, holding_v: float = -90.0, n_step_sweeps: int = 12):
    """The five stereotyped voltage-clamp protocols.

    Step families use 12 amplitudes; the action-potential protocol is a train
    of 10 triangular 2 ms spikes; the ramp protocol holds 4 up/down ramp
    pairs with slopes 0.1/0.2/0.5/1.0 mV/ms.
    """
    step = lambda d, v: Segment(d, v, v)
    activation = VoltageProtocol(
        "activation",
        tuple((step(500.0, a),) for a in np.linspace(-90.0, 60.0, n_step_sweeps)),
        dt=dt, holding_v=holding_v,
    )
    inactivation = VoltageProtocol(
        "inactivation",
        tuple((step(500.0, a), step(200.0, 20.0)) for a in np.linspace(-90.0, 60.0, n_step_sweeps)),
        dt=dt, holding_v=holding_v,
    )
    deactivation = VoltageProtocol(
        "deactivation",
        tuple((step(200.0, 40.0), step(300.0, a)) for a in np.linspace(-120.0, -10.0, n_step_sweeps)),
        dt=dt, holding_v=holding_v,
    )
    spike = (Segment(1.0, -70.0, 40.0), Segment(1.0, 40.0, -70.0), step(48.0, -70.0))
    ap_sweep = (step(24.0, -70.0),) + spike * 10
    action_potentials = VoltageProtocol("action_potentials", (ap_sweep,), dt=dt, holding_v=holding_v)
    ramp_sweeps = []
    for slope in (0.1, 0.2, 0.5, 1.0):
        dur = (40.0 - (-90.0)) / slope
        ramp_sweeps.append((Segment(dur, -90.0, 40.0), Segment(dur, 40.0, -90.0)))
    ramps = VoltageProtocol("ramps", tuple(ramp_sweeps), dt=dt, holding_v=holding_v)
    return [activation, inactivation, deactivation, action_potentials, ramps]


@dataclass(frozen=True)
class TraceSet:
    """Normalized current traces of one simulation under one protocol.

    ``traces`` has shape (n_sweeps, n_points); values are I/g_bar, i.e.
    gate^M * (V - E_K).
    """

    protocol_name: str
    traces: np.ndarray

    def concatenated(self) -> np.ndarray:
        return self.traces.reshape(-1)

    def save(self, path) -> None:
        np.savez(path, protocol_name=np.array([self.protocol_name]), traces=self.traces)

    @classmethod
    def load(cls, path) -> "TraceSet":
        with np.load(path) as z:
            return cls(protocol_name=str(z["protocol_name"][0]), traces=z["traces"])


@njit(parallel=True, cache=True)
def _ramp_kd(state, ra, vt, tha, qa, rb, thb, qb, v0, slope, dt, n_steps, q_step, q_frac, out):
    nq = q_step.shape[0]
    for b in prange(state.shape[0]):
        g = state[b]
        qi = 0
        for j in range(n_steps):
            vm = v0 + slope * dt * (j + 0.5)
            u = vm - vt[b] - tha[b]
            z = u / qa[b]
            if abs(z) < _SERIES_Z:
                a = ra[b] * qa[b] * (1.0 + z / 2.0 + z * z / 12.0)
            else:
                a = ra[b] * u / (1.0 - np.exp(-z))
            be = rb[b] * np.exp(-(vm - vt[b] - thb[b]) / qb[b])
            s = a + be
            ginf = a / s
            gnew = ginf + (g - ginf) * np.exp(-dt * s)
            while qi < nq and q_step[qi] == j:
                out[b, qi] = g + (gnew - g) * q_frac[qi]
                qi += 1
            g = gnew
        state[b] = g


@njit(parallel=True, cache=True)
def _ramp_ks(state, thp, qp, rt, qt, tau_max, printed, v0, slope, dt, n_steps, q_step, q_frac, out):
    nq = q_step.shape[0]
    for b in prange(state.shape[0]):
        g = state[b]
        qi = 0
        for j in range(n_steps):
            vm = v0 + slope * dt * (j + 0.5)
            vv = vm + thp[b]
            pinf = 1.0 / (1.0 + np.exp(-vv / qp[b]))
            voff = vm - thp[b] if printed else vv
            tau = tau_max / (rt[b] * np.exp(voff / qt[b]) + np.exp(-voff / qt[b]))
            gnew = pinf + (g - pinf) * np.exp(-dt / tau)
            while qi < nq and q_step[qi] == j:
                out[b, qi] = g + (gnew - g) * q_frac[qi]
                qi += 1
            g = gnew
        state[b] = g


def _fields(channel: str, p, B: int):
    names = KD_PARAM_NAMES if channel == CHANNEL_KD else KS_PARAM_NAMES
    return {n: np.broadcast_to(np.asarray(getattr(p, n), dtype=float), (B,)).copy() for n in names}


def _batch_size(p) -> int:
    for f in p.__dataclass_fields__:
        v = np.asarray(getattr(p, f))
        if v.ndim == 1:
            return v.shape[0]
    return 1


def _simulate_sweep(channel, p, fields, segments, dt, holding_v, n_points):
    """Gate values of one sweep at its n_points query times, batched over B."""
    B = fields[next(iter(fields))].shape[0]
    durations = np.array([s.duration for s in segments], dtype=float)
    total = float(durations.sum())
    tq = total * (np.arange(1, n_points + 1) / n_points)
    ends = np.cumsum(durations)
    starts = ends - durations
    seg_of_q = np.clip(np.searchsorted(ends, tq, side="left"), 0, len(segments) - 1)

    ginf0, _ = _gate_kinetics(channel, holding_v, p)
    g = np.broadcast_to(np.asarray(ginf0, dtype=float), (B,)).copy()
    gate = np.empty((B, n_points))

    for j, seg in enumerate(segments):
        qsel = np.flatnonzero(seg_of_q == j)
        t_loc = tq[qsel] - starts[j]
        if not seg.is_ramp:
            gi, tau = _gate_kinetics(channel, seg.v_start, p)
            gi = np.broadcast_to(np.asarray(gi, dtype=float), (B,))
            tau = np.broadcast_to(np.asarray(tau, dtype=float), (B,))
            if qsel.size:
                decay = np.exp(-t_loc[None, :] / tau[:, None])
                gate[:, qsel] = gi[:, None] + (g - gi)[:, None] * decay
            g = gi + (g - gi) * np.exp(-seg.duration / tau)
        else:
            n_steps = int(round(seg.duration / dt))
            if abs(n_steps * dt - seg.duration) > 1e-9 * max(1.0, seg.duration):
                raise InputError(
                    f"segment duration {seg.duration} ms is not a multiple of dt={dt} ms"
                )
            ratio = t_loc / dt
            q_step = np.ceil(ratio - 1e-9).astype(np.int64) - 1
            q_step = np.clip(q_step, 0, n_steps - 1)
            q_frac = ratio - q_step
            slope = (seg.v_end - seg.v_start) / seg.duration
            out = np.empty((B, qsel.size))
            if channel == CHANNEL_KD:
                _ramp_kd(g, fields["R_alpha"], fields["V_T"], fields["th_alpha"], fields["q_alpha"],
                         fields["R_beta"], fields["th_beta"], fields["q_beta"],
                         seg.v_start, slope, dt, n_steps, q_step, q_frac, out)
            else:
                _ramp_ks(g, fields["th_p"], fields["q_p"], fields["R_tau"], fields["q_tau"],
                         float(np.asarray(p.tau_max).ravel()[0]), bool(p.printed_tau_offset),
                         seg.v_start, slope, dt, n_steps, q_step, q_frac, out)
            if qsel.size:
                gate[:, qsel] = out
    return gate, tq


def simulate_traces_batch(channel: str, p, protocol: VoltageProtocol, n_points: int = 512) -> np.ndarray:
    """Normalized current traces, shape (B, n_sweeps, n_points).

    ``p`` is a params object whose fields may be (B,) arrays. Raises
    SimulationDivergenceError naming the sweep if any state goes non-finite.
    """
    B = _batch_size(p)
    fields = _fields(channel, p, B)
    M = np.broadcast_to(np.asarray(p.M, dtype=float), (B,))
    out = np.empty((B, protocol.n_sweeps, n_points))
    for i in range(protocol.n_sweeps):
        gate, tq = _simulate_sweep(channel, p, fields, protocol.sweeps[i], protocol.dt,
                                   protocol.holding_v, n_points)
        if not np.all(np.isfinite(gate)):
            raise SimulationDivergenceError(
                f"non-finite gating state in protocol {protocol.name!r}, sweep {i}"
            )
        v = protocol.sweep_voltage(i, tq)
        out[:, i, :] = np.power(gate, M[:, None]) * (v - p.E_K)[None, :]
    return out


def simulate_clamp(channel: str, params, protocol: VoltageProtocol, n_points: int = 512) -> TraceSet:
    """Single-simulation voltage clamp; see :func:`simulate_traces_batch`."""
    traces = simulate_traces_batch(channel, params, protocol, n_points)
    if traces.shape[0] != 1:
        raise InputError("simulate_clamp expects scalar parameters; use simulate_traces_batch")
    return TraceSet(protocol_name=protocol.name, traces=traces[0])


def simulate_protocol_suite(channel: str, p, protocols, n_points: int = 512) -> dict:
    """All protocols for a parameter batch: name -> (B, n_sweeps*n_points)."""
    out = {}
    for prot in protocols:
        tr = simulate_traces_batch(channel, p, prot, n_points)
        out[prot.name] = tr.reshape(tr.shape[0], -1)
    return out


def channel_prior_bounds(channel: str) -> tuple[np.ndarray, np.ndarray]:
    """Uniform prior box 0.3..1.3 times the ground truth, per free parameter."""
    gt = ground_truth_vector(channel)
    a, b = 0.3 * gt, 1.3 * gt
    return np.minimum(a, b), np.maximum(a, b)


def ground_truth_vector(channel: str) -> np.ndarray:
    if channel == CHANNEL_KD:
        return np.array([getattr(KD_GROUND_TRUTH, n) for n in KD_PARAM_NAMES], dtype=float)
    if channel == CHANNEL_KS:
        return np.array([getattr(KS_GROUND_TRUTH, n) for n in KS_PARAM_NAMES], dtype=float)
    raise InputError(f"unknown channel {channel!r}")


def params_from_vector(channel: str, vec: np.ndarray):
    """Params object from a (d,) vector or (B, d) matrix of free parameters."""
    vec = np.asarray(vec, dtype=float)
    cols = vec.T if vec.ndim == 2 else vec
    if channel == CHANNEL_KD:
        if cols.shape[0] != len(KD_PARAM_NAMES):
            raise InputError(f"kd expects {len(KD_PARAM_NAMES)} parameters")
        return KdParams(*[np.asarray(c) if np.ndim(c) else float(c) for c in cols])
    if channel == CHANNEL_KS:
        if cols.shape[0] != len(KS_PARAM_NAMES):
            raise InputError(f"ks expects {len(KS_PARAM_NAMES)} parameters")
        return KsParams(*[np.asarray(c) if np.ndim(c) else float(c) for c in cols])
    raise InputError(f"unknown channel {channel!r}")


def sample_channel_params(channel: str, n: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = channel_prior_bounds(channel)
    return rng.uniform(lo, hi, size=(n, lo.size))
