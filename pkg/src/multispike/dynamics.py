"""Adaptive multi-spike LIF cell: membrane update, spike generation, consumed potential.

The cell supports three spike-generation modes:

* ``SFA``    -- multi-spike with spike-frequency adaptation: the spike intensity
  grows logarithmically with membrane potential,
  ``n* = log_q[(v / v_threshold) * (q - 1) + 1]``, and each successive spike in a
  step consumes a geometrically growing slice of potential.
* ``LINEAR`` -- multi-spike without adaptation: ``n* = v / v_threshold``, each
  spike consumes one threshold worth of potential.
* ``SSP``    -- classic binary single-spike baseline: at most one spike per step,
  full reset of the membrane after a spike.

All functions are pure and vectorized over arbitrary leading batch axes; the
trailing axis is the neuron axis. Potentials and parameters are float64.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericFaultError

# Hard cap on spikes per neuron per step. Bounds q**s against overflow; far
# outside the reachable range under sane inputs.
S_MAX = 64.0


class SpikeMode(enum.Enum):
    SFA = "sfa"
    LINEAR = "linear"
    SSP = "ssp"


@dataclass
class NeuronParams:
    """Per-neuron learnable cell parameters.

    v_threshold > 0, 0 < tau_decay < 1 always; q > 1 where the mode uses it.
    The optimizer re-projects into these ranges after every step.
    """

    v_threshold: np.ndarray
    tau_decay: np.ndarray
    q: np.ndarray
    mode: SpikeMode = SpikeMode.SFA

    def validate(self):
        if not isinstance(self.mode, SpikeMode):
            # a plain string would silently fall through the mode dispatch
            raise ValueError(f"mode must be a SpikeMode, got {self.mode!r}")
        if np.any(self.v_threshold <= 0):
            raise ValueError("v_threshold must be positive")
        if np.any((self.tau_decay <= 0) | (self.tau_decay >= 1)):
            raise ValueError("tau_decay must lie in (0, 1)")
        if self.mode is SpikeMode.SFA and np.any(self.q <= 1):
            raise ValueError("q must exceed 1 in SFA mode")

    @property
    def width(self) -> int:
        return self.v_threshold.shape[0]


@dataclass
class NeuronState:
    """Membrane potential ``v`` and previous-step consumed potential ``u``."""

    v: np.ndarray
    u: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "NeuronState":
        return cls(v=np.zeros(shape), u=np.zeros(shape))


@dataclass
class StepOutput:
    """Spike count ``s`` (integer-valued) and continuous intensity ``n_star``.

    ``n_star`` is retained for the straight-through surrogate and for the
    gradcheck relaxation, where ``s`` is replaced by the continuous value.
    """

    s: np.ndarray
    n_star: np.ndarray


def membrane_update(state: NeuronState, params: NeuronParams, i_norm: np.ndarray,
                    context: str | None = None) -> NeuronState:
    """Advance the membrane one step: ``v <- tau_decay * (v - u) + i_norm``.

    ``i_norm`` is the filtered, normalized input current for this step.  In the
    binary SSP mode the consumed potential is bookkept as ``u = v * s``, which
    makes this same expression reduce to the full-reset form
    ``tau_decay * v * (1 - s) + i_norm``.

    The ``u`` of the returned state is zeroed; the stepper fills it in once
    this step's spikes are known.
    """
    if not np.all(np.isfinite(i_norm)):
        where = f" ({context})" if context else ""
        raise NumericFaultError(f"non-finite input current{where}")
    v = params.tau_decay * (state.v - state.u) + i_norm
    return NeuronState(v=v, u=np.zeros_like(v))


def spike_count_sfa(v: np.ndarray, params: NeuronParams, relaxed: bool = False) -> StepOutput:
    """Adaptive spike intensity ``n* = log_q[(v / v_th) * (q - 1) + 1]``.

    The log argument is clamped to >= 1, so n* = 0 (and no spikes) whenever
    v <= 0; negative potentials are reachable because the dendrite filter is
    not exactly non-negative.
    """
    arg = np.maximum((v / params.v_threshold) * (params.q - 1.0) + 1.0, 1.0)
    n_star = np.log(arg) / np.log(params.q)
    return StepOutput(s=_discretize(n_star, relaxed), n_star=n_star)


def spike_count_linear(v: np.ndarray, params: NeuronParams, relaxed: bool = False) -> StepOutput:
    """Non-adaptive spike intensity ``n* = max(v / v_th, 0)``."""
    n_star = np.maximum(v / params.v_threshold, 0.0)
    return StepOutput(s=_discretize(n_star, relaxed), n_star=n_star)


def spike_ssp(v: np.ndarray, params: NeuronParams, relaxed: bool = False) -> StepOutput:
    """Binary spike: 1 iff the potential reaches threshold.

    ``n_star`` is kept as ``v / v_th`` for surrogate use; the relaxation uses
    it directly as the continuous spike value.
    """
    n_star = v / params.v_threshold
    s = n_star if relaxed else (v >= params.v_threshold).astype(float)
    return StepOutput(s=s, n_star=n_star)


def _discretize(n_star: np.ndarray, relaxed: bool) -> np.ndarray:
    capped = np.minimum(n_star, S_MAX)
    return capped if relaxed else np.floor(capped)


def consumed_potential(s: np.ndarray, params: NeuronParams) -> np.ndarray:
    """Potential expended by this step's spikes.

    SFA: ``u = (q^s - 1) / (q - 1) * v_th`` (geometric sum: the k-th spike
    costs ``q^(k-1) * v_th``).  Linear: ``u = s * v_th``.  The binary mode
    does not use this function; its stepper takes ``u = v * s``.
    """
    if params.mode is SpikeMode.SFA:
        return (np.exp(s * np.log(params.q)) - 1.0) / (params.q - 1.0) * params.v_threshold
    return s * params.v_threshold


def surrogate_dsdn() -> float:
    """Straight-through pseudo-derivative of the spike count: exactly 1.

    Applies to the multi-spike modes. The binary mode uses the rectangular
    surrogate of :func:`ssp_rect_surrogate` instead.
    """
    return 1.0


def ssp_rect_surrogate(v: np.ndarray, v_threshold: np.ndarray) -> np.ndarray:
    """Rectangular surrogate ``ds/dv`` for the binary spike.

    Height 1/v_th inside the window |v - v_th| <= 0.5 * v_th, zero outside.
    """
    window = np.abs(v - v_threshold) <= 0.5 * v_threshold
    return window.astype(float) / v_threshold


def step_cell(state: NeuronState, params: NeuronParams, i_norm: np.ndarray,
              relaxed: bool = False, context: str | None = None) -> tuple[NeuronState, StepOutput]:
    """One full cell step: membrane update, spike generation, consumption."""
    st = membrane_update(state, params, i_norm, context=context)
    if params.mode is SpikeMode.SFA:
        out = spike_count_sfa(st.v, params, relaxed)
        u = consumed_potential(out.s, params)
    elif params.mode is SpikeMode.LINEAR:
        out = spike_count_linear(st.v, params, relaxed)
        u = consumed_potential(out.s, params)
    else:
        out = spike_ssp(st.v, params, relaxed)
        u = st.v * out.s
    return NeuronState(v=st.v, u=u), out


@dataclass
class SpikeDerivs:
    """Local derivatives of one step's spike pipeline, used by the backward pass.

    Shapes match the (batch..., neuron) arrays they were computed from.
    Clamped regions (log-argument clamp, linear rectifier, spike cap) carry
    zero derivative throughout.
    """

    dn_dv: np.ndarray
    dn_dvth: np.ndarray
    dn_dq: np.ndarray
    ds_dn: np.ndarray
    du_ds: np.ndarray
    du_dv: np.ndarray
    du_dvth: np.ndarray
    du_dq: np.ndarray


def spike_derivs(v: np.ndarray, n_star: np.ndarray, s: np.ndarray,
                 params: NeuronParams, relaxed: bool) -> SpikeDerivs:
    """Evaluate every local derivative the BPTT sweep chains through.

    The expressions follow the forward definitions with the straight-through
    substitution for the floor. For SFA, with A the clamped log argument:

        dn*/dv    = (q - 1) / (v_th * A * ln q)
        dn*/dv_th = -v (q - 1) / (v_th^2 * A * ln q)
        dn*/dq    = (v / v_th) / (A ln q) - n* / (q ln q)
        du/ds     = q^s ln q / (q - 1) * v_th
        du/dv_th  = (q^s - 1) / (q - 1)
        du/dq     = v_th * [s q^(s-1) (q - 1) - (q^s - 1)] / (q - 1)^2

    all masked to zero where the log argument was clamped (v <= 0).
    """
    vth = params.v_threshold
    zeros = np.zeros_like(v)
    if params.mode is SpikeMode.SFA:
        q = params.q
        lnq = np.log(q)
        arg_raw = (v / vth) * (q - 1.0) + 1.0
        live = (arg_raw > 1.0).astype(float)
        arg = np.maximum(arg_raw, 1.0)
        dn_dv = live * (q - 1.0) / (vth * arg * lnq)
        dn_dvth = live * (-v) * (q - 1.0) / (vth ** 2 * arg * lnq)
        dn_dq = live * ((v / vth) / (arg * lnq) - n_star / (q * lnq))
        qs = np.exp(s * lnq)
        du_ds = qs * lnq / (q - 1.0) * vth
        du_dv = zeros
        du_dvth = (qs - 1.0) / (q - 1.0)
        du_dq = vth * (s * np.exp((s - 1.0) * lnq) * (q - 1.0) - (qs - 1.0)) / (q - 1.0) ** 2
        ds_dn = (n_star < S_MAX).astype(float)
    elif params.mode is SpikeMode.LINEAR:
        live = (v > 0).astype(float)
        dn_dv = live / vth
        dn_dvth = live * (-v) / vth ** 2
        dn_dq = zeros
        du_ds = np.broadcast_to(vth, v.shape).copy()
        du_dv = zeros
        du_dvth = s.copy()
        du_dq = zeros
        ds_dn = (n_star < S_MAX).astype(float)
    else:  # SSP
        dn_dv = np.broadcast_to(1.0 / vth, v.shape).copy()
        dn_dvth = -v / vth ** 2
        dn_dq = zeros
        du_ds = v.copy()
        du_dv = s.copy()
        du_dvth = zeros
        du_dq = zeros
        if relaxed:
            ds_dn = np.ones_like(v)
        else:
            # rectangular surrogate, expressed at the n* level (ds/dv = ds_dn * dn_dv)
            ds_dn = (np.abs(v - vth) <= 0.5 * vth).astype(float)
    return SpikeDerivs(dn_dv=dn_dv, dn_dvth=dn_dvth, dn_dq=dn_dq, ds_dn=ds_dn,
                       du_ds=du_ds, du_dv=du_dv, du_dvth=du_dvth, du_dq=du_dq)
