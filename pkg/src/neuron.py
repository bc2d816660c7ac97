"""
Integrate-and-fire (IF) and leaky integrate-and-fire (LIF) neurons.

One time step is charge -> fire -> reset with a hard reset. The spike's
derivative is replaced by the sigmoid surrogate in backward passes.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from errors import ConfigError, ShapeError, SpikeError
from tensor import check_finite, get_dtype

logger = logging.getLogger(__name__)

NEURON_KINDS = ('IF', 'LIF')


@dataclass
class NeuronConfig:
    """
    Neuron parameters.

    smooth switches on gradient-check mode: fire emits sigmoid(alpha*(h - v_th))
    instead of a hard spike so the whole network becomes differentiable.
    detach_reset treats S_t as a constant in the reset's gradient.
    """

    kind: str = 'LIF'
    v_th: float = 1.0
    v_reset: float = 0.0
    tau_m: float = 2.0
    alpha: float = 4.0
    smooth: bool = False
    detach_reset: bool = True

    def __post_init__(self):
        if self.kind not in NEURON_KINDS:
            raise ConfigError(f"Unknown neuron kind '{self.kind}'", key='neuron_kind', value=self.kind)
        if not self.v_th > self.v_reset:
            raise ConfigError("v_th must be greater than v_reset", v_th=self.v_th, v_reset=self.v_reset)
        if self.kind == 'LIF' and not self.tau_m > 0:
            raise ConfigError("tau_m must be positive for LIF neurons", tau_m=self.tau_m)
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive", alpha=self.alpha)

    @classmethod
    def gradient_check(cls, **kwargs):
        """Smooth forward with the reset differentiated fully."""
        kwargs.update(smooth=True, detach_reset=False)
        return cls(**kwargs)


@dataclass
class MembraneState:
    """Post-reset potential V plus the recorded (H_t, S_t) pairs of this pass."""

    v: np.ndarray
    h_cache: list = field(default_factory=list)

    @classmethod
    def initial(cls, shape, cfg):
        return cls(v=np.full(shape, cfg.v_reset, dtype=get_dtype()))


def _sigmoid(z):
    # tanh form saturates cleanly instead of overflowing exp() for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def charge(v_prev, x, cfg):
    """H_t from V_{t-1} and the input current X_t."""
    if v_prev.shape != x.shape:
        raise ShapeError(
            f"Membrane shape {v_prev.shape} does not match input shape {x.shape}",
            membrane_shape=list(v_prev.shape),
            input_shape=list(x.shape)
        )
    if cfg.kind == 'IF':
        return v_prev + x
    return v_prev + (1.0 / cfg.tau_m) * (-(v_prev - cfg.v_reset) + x)


def fire(h, cfg):
    """Heaviside spike at h >= v_th (a spike exactly at threshold counts)."""
    if cfg.smooth:
        return _sigmoid(cfg.alpha * (h - cfg.v_th))
    return (h >= cfg.v_th).astype(h.dtype)


def reset(h, s, cfg):
    """Hard reset: V_t = H_t (1 - S_t) + V_reset S_t."""
    if not cfg.smooth and not np.all((s == 0) | (s == 1)):
        raise SpikeError("Reset received non-binary spikes")
    return h * (1.0 - s) + cfg.v_reset * s


def surrogate_grad(u, alpha):
    """Derivative of sigmoid(alpha*u): alpha * sig * (1 - sig), even in u."""
    if not alpha > 0:
        raise ConfigError("alpha must be positive", alpha=alpha)
    t = np.tanh(0.5 * alpha * u)
    return alpha * 0.25 * (1.0 - t * t)


def neuron_step(state, x, cfg, record=False):
    """Advance one time step in place; returns (S_t, state)."""
    h = charge(state.v, x, cfg)
    s = fire(h, cfg)
    state.v = reset(h, s, cfg)
    if record:
        state.h_cache.append((h, s))
    return s, state


def run_neurons(x_seq, cfg, record=True):
    """
    Drive a fresh layer of neurons with the input sequence x_seq (T, ...).

    Returns (spikes, H, S) where H and S are stacked (T, ...) arrays, or None
    when record is off.
    """
    state = MembraneState.initial(x_seq.shape[1:], cfg)
    spikes = np.empty_like(x_seq)
    for t in range(x_seq.shape[0]):
        spikes[t], state = neuron_step(state, x_seq[t], cfg, record=record)
    if not record:
        return spikes, None, None
    h_seq = np.stack([h for h, _ in state.h_cache])
    s_seq = np.stack([s for _, s in state.h_cache])
    return spikes, h_seq, s_seq


def neuron_backward(h_seq, s_seq, d_s_seq, cfg):
    """
    Backpropagation through time for one neuron layer.

    Given the recorded H_t, S_t and dL/dS_t for every step, returns dL/dX_t.
    Temporal credit flows V_t -> H_{t+1}; with detach_reset the reset passes
    dV_t/dH_t = 1 - S_t.
    """
    if h_seq.shape != d_s_seq.shape or s_seq.shape != h_seq.shape:
        raise ShapeError(
            f"Neuron trace shape {h_seq.shape} does not match gradient shape {d_s_seq.shape}"
        )
    if cfg.kind == 'IF':
        dh_dv, dh_dx = 1.0, 1.0
    else:
        dh_dv, dh_dx = 1.0 - 1.0 / cfg.tau_m, 1.0 / cfg.tau_m

    d_x = np.empty_like(d_s_seq)
    d_v = np.zeros_like(h_seq[0])
    for t in reversed(range(h_seq.shape[0])):
        h = h_seq[t]
        s = s_seq[t]
        sg = surrogate_grad(h - cfg.v_th, cfg.alpha)
        dv_dh = 1.0 - s
        if not cfg.detach_reset:
            dv_dh = dv_dh + (cfg.v_reset - h) * sg
        d_h = d_s_seq[t] * sg + d_v * dv_dh
        d_x[t] = d_h * dh_dx
        d_v = d_h * dh_dv
    check_finite('neuron_backward', d_x)
    return d_x
