"""Leaky integrate-and-fire dynamics with learnable threshold and leak.

Forward (soft reset):
    u[t] = leak * u[t-1] + I[t] - v_th * o[t-1]
    z[t] = u[t] / v_th - 1,   o[t] = 1 if z[t] > 0 else 0

Backward uses the arctan-style surrogate 1 / (1 + gamma z^2) inside |z| < 1
and carries membrane credit across timesteps through the leak. The spike
o[t-1] feeding the reset term is treated as a constant.
"""
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from spikeflow.errors import ConfigError, NumericError

V_TH_MIN = 0.01
LEAK_MIN = 1e-4
RESET_MODES = ('soft', 'hard')


@dataclass
class LifConfig:
    """Initial dynamics and surrogate settings shared by every LIF layer."""

    v_th: float = 1.0
    leak: float = 1.0
    gamma: float = 10.0
    reset: str = 'soft'

    def __post_init__(self):
        if self.reset not in RESET_MODES:
            raise ConfigError(f"lif.reset must be one of {RESET_MODES}, got '{self.reset}'")
        if self.gamma <= 0:
            raise ConfigError("lif.gamma must be > 0")
        if self.v_th <= 0:
            raise ConfigError("lif.v_th must be > 0")
        if not 0 < self.leak <= 1:
            raise ConfigError("lif.leak must lie in (0, 1]")


@dataclass
class LifParams:
    """Per-layer threshold and leak plus the global surrogate width."""

    v_th: float
    leak: float
    gamma: float = 10.0
    reset: str = 'soft'


@dataclass
class LifState:
    """Membrane potential and the previous step's spikes."""

    u: np.ndarray
    o_prev: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float64) -> 'LifState':
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))


@dataclass
class SpikeRecord:
    """What one timestep leaves behind for the backward pass."""

    u_prev: np.ndarray
    u: np.ndarray
    z: np.ndarray
    o: np.ndarray
    o_prev: np.ndarray
    current: np.ndarray


@dataclass
class SpikeTrace:
    """Per-timestep records of one layer, oldest first."""

    records: List[SpikeRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: SpikeRecord):
        self.records.append(record)


def lif_step(state: LifState, current: np.ndarray,
             params: LifParams) -> Tuple[LifState, np.ndarray, np.ndarray, SpikeRecord]:
    """Advance one timestep; returns (new state, spikes, normalized potential, record)."""
    if current.shape != state.u.shape:
        raise NumericError(f"current shape {list(current.shape)} does not match state {list(state.u.shape)}")
    if not np.all(np.isfinite(current)):
        raise NumericError("non-finite input current", {'max_abs_u': float(np.max(np.abs(state.u)))})
    if params.reset == 'hard':
        u = params.leak * state.u * (1 - state.o_prev) + current
    else:
        u = params.leak * state.u + current - params.v_th * state.o_prev
    z = u / params.v_th - 1.0
    o = (z > 0).astype(u.dtype)
    record = SpikeRecord(state.u, u, z, o, state.o_prev, current)
    return LifState(u, o), o, z, record


def surrogate_grad(z: np.ndarray, gamma: float) -> np.ndarray:
    """d o / d z: 1 / (1 + gamma z^2) where |z| < 1, else 0."""
    return np.where(1.0 - np.abs(z) > 0, 1.0 / (1.0 + gamma * z * z), 0.0).astype(z.dtype)


def lif_backward_step(record: SpikeRecord, d_spikes: np.ndarray, d_u_next: np.ndarray,
                      params: LifParams) -> Tuple[np.ndarray, np.ndarray, float, float]:
    """Backward through one timestep.

    d_u_next is dL/du[t] arriving from timestep t+1 through the membrane.
    Returns (dL/dI[t], dL/du[t-1], d v_th, d leak).
    """
    v_th = params.v_th
    s = surrogate_grad(record.z, params.gamma)
    d_z = d_spikes * s
    if params.reset == 'hard':
        d_u = d_z / v_th + d_u_next
        d_vth = float(np.sum(d_z * (-record.u / (v_th * v_th))))
        keep = 1 - record.o_prev
        d_leak = float(np.sum(d_u * record.u_prev * keep))
        d_u_prev = d_u * params.leak * keep
    else:
        d_u = d_z / v_th + d_u_next
        # dz/dv_th including the reset term: (-v_th o[t-1] - u[t]) / v_th^2
        d_vth = float(np.sum(d_z * (-v_th * record.o_prev - record.u) / (v_th * v_th)))
        d_vth += float(np.sum(d_u_next * -record.o_prev))
        d_leak = float(np.sum(d_u * record.u_prev))
        d_u_prev = d_u * params.leak
    return d_u, d_u_prev, d_vth, d_leak


def lif_backward(trace: SpikeTrace, upstream: Sequence[np.ndarray], params: LifParams,
                 steps: int = None) -> Tuple[List[np.ndarray], float, float]:
    """BPTT over a full trace: per-timestep dL/dI, and summed d v_th, d leak."""
    steps = len(upstream) if steps is None else steps
    if len(trace) != steps or len(upstream) != steps:
        raise NumericError(f"incomplete trace: {len(trace)} records for {steps} timesteps")
    d_currents = [None] * steps
    d_u_next = np.zeros_like(trace.records[-1].u)
    total_vth = 0.0
    total_leak = 0.0
    for t in reversed(range(steps)):
        d_current, d_u_next, d_vth, d_leak = lif_backward_step(
            trace.records[t], upstream[t], d_u_next, params
        )
        d_currents[t] = d_current
        total_vth += d_vth
        total_leak += d_leak
    return d_currents, total_vth, total_leak
