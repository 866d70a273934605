"""Reverse-mode gradients through the recorded forward tape.

The sweep runs top layer down.  Within a layer the only sequential part is the
membrane recurrence; everything else is vectorized over batch, time and units.
Adjoint recurrence per step (reverse time), with gv_next = dL/dv[t+1]:

    gu = -tau * gv_next                    u[t] only feeds v[t+1]
    gs = gs_ext[t] + gu * du/ds            readout / conv route, plus consumption
    gn = gs * ds/dn                        straight-through or surrogate
    gv = gn * dn/dv + gu * du/dv + tau * gv_next

Parameter gradients then reduce over (batch, time) in one shot.  The same
sweep serves the discrete forward (surrogate derivatives) and the relaxed
forward used by the finite-difference check.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dynamics, network, synapse
from .dynamics import S_MAX, SpikeMode
from .errors import TapeError
from .network import NetworkParams, Tape, group_of, named_parameters


def zero_grads(params: NetworkParams) -> dict:
    """Fresh gradient buffers, one per learnable leaf, keyed like
    :func:`network.named_parameters`."""
    return {name: np.zeros_like(arr) for name, arr in named_parameters(params)}


def _shift_right(arr: np.ndarray) -> np.ndarray:
    """[B, T, L] -> previous-step view with a zero first step."""
    out = np.zeros_like(arr)
    out[:, 1:] = arr[:, :-1]
    return out


def backward(tape: Tape, params: NetworkParams, loss_grad: np.ndarray) -> dict:
    """Accumulate dL/dtheta for every parameter from a recorded tape.

    ``loss_grad`` is dL/dlogits, either [B, classes] for the summed readout or
    [B, T, classes] to weight each step's output spikes individually.
    Kernel gradients are left at zero when ``params.kernels_trainable`` is
    False; spike gradients still flow through the frozen kernels.
    """
    if tape is None:
        raise TapeError("backward needs a tape; run forward(record_tape=True) first")
    num_batch, num_steps, num_classes = tape.layers[-1].s.shape
    loss_grad = np.asarray(loss_grad, dtype=float)
    if loss_grad.shape == (num_batch, num_classes):
        gs_ext = np.broadcast_to(loss_grad[:, None, :],
                                 (num_batch, num_steps, num_classes))
    elif loss_grad.shape == (num_batch, num_steps, num_classes):
        gs_ext = loss_grad
    else:
        raise TapeError(
            f"loss_grad shape {loss_grad.shape} matches neither "
            f"{(num_batch, num_classes)} nor {(num_batch, num_steps, num_classes)}")

    grads = zero_grads(params)
    for n in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[n]
        lt = tape.layers[n]
        derivs = dynamics.spike_derivs(lt.v, lt.n_star, lt.s, layer.neuron,
                                       tape.relaxed)
        tau = layer.neuron.tau_decay

        gv_arr = np.empty_like(lt.v)
        gn_arr = np.empty_like(lt.v)
        gu_arr = np.empty_like(lt.v)
        gv_next = np.zeros((num_batch, layer.width))
        for t in range(num_steps - 1, -1, -1):
            gu = -tau * gv_next
            gs = gs_ext[:, t] + gu * derivs.du_ds[:, t]
            gn = gs * derivs.ds_dn[:, t]
            gv = gn * derivs.dn_dv[:, t] + gu * derivs.du_dv[:, t] + tau * gv_next
            gv_arr[:, t] = gv
            gn_arr[:, t] = gn
            gu_arr[:, t] = gu
            gv_next = gv

        prefix = f"layer{n}"
        carry = _shift_right(lt.v) - _shift_right(lt.u)
        grads[f"{prefix}.tau_decay"] += np.einsum("btl,btl->l", gv_arr, carry)
        grads[f"{prefix}.v_threshold"] += (
            np.sum(gn_arr * derivs.dn_dvth, axis=(0, 1))
            + np.sum(gu_arr * derivs.du_dvth, axis=(0, 1)))
        grads[f"{prefix}.q"] += (
            np.sum(gn_arr * derivs.dn_dq, axis=(0, 1))
            + np.sum(gu_arr * derivs.du_dq, axis=(0, 1)))

        gx = gv_arr * synapse.swish_grad(lt.x)
        o_prev = tape.input_response if n == 0 else tape.layers[n - 1].o
        grads[f"{prefix}.weights"] += np.einsum("btl,btm->lm", gx, o_prev)
        g_oprev = gx @ layer.weights

        if n > 0:
            below = params.layers[n - 1]
            if params.kernels_trainable:
                kgrads, gs_ext = synapse.kernel_gradients(
                    g_oprev, tape.layers[n - 1].s, below.kernel)
                grads[f"layer{n - 1}.kernel.a"] += kgrads.a
                grads[f"layer{n - 1}.kernel.b"] += kgrads.b
                grads[f"layer{n - 1}.kernel.delay"] += kgrads.delay
            else:
                gs_ext = synapse.collect_future_grads(
                    g_oprev, synapse.sample_kernel(below.kernel))
        elif params.kernels_trainable:
            kgrads, _ = synapse.kernel_gradients(
                g_oprev, tape.input_spikes, params.input_kernel)
            grads["input_kernel.a"] += kgrads.a
            grads["input_kernel.b"] += kgrads.b
            grads["input_kernel.delay"] += kgrads.delay
    return grads


# ---------------------------------------------------------------------------
# finite-difference validation


CHECK_GROUPS = {
    SpikeMode.SFA: ("weights", "v_threshold", "tau_decay", "q",
                    "kernel_a", "kernel_b", "kernel_delay"),
    SpikeMode.LINEAR: ("weights", "v_threshold", "tau_decay",
                       "kernel_a", "kernel_b", "kernel_delay"),
    # the binary mode trains only these two
    SpikeMode.SSP: ("weights", "v_threshold"),
}

#: comparison floor: below this gradient scale the check is absolute, which
#: keeps central-difference roundoff (~1e-11 here) out of the verdict
REL_FLOOR = 1e-3

#: a sampled problem only counts when every checked group carries at least
#: this much gradient somewhere; otherwise the comparison is vacuous at
#: REL_FLOOR precision and the sample is redrawn
GRAD_LIVE_FLOOR = 1e-3


@dataclass
class GradcheckReport:
    """Outcome of one micro-network check."""

    mode: str
    seed: int
    max_rel_err: dict
    threshold: float
    resamples: int

    @property
    def passed(self) -> bool:
        return all(v < self.threshold for v in self.max_rel_err.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values())


def _sample_problem(mode: SpikeMode, seed: int):
    rng = np.random.default_rng(seed)
    widths = [int(rng.integers(3, 6)), int(rng.integers(3, 7)), int(rng.integers(2, 4))]
    spec = network.NetworkSpec(widths=widths, dt=1.0,
                               total_steps=int(rng.integers(8, 13)),
                               mode=mode, kernel_size=4)
    net = network.init_network(spec, seed=seed + 1, param_jitter=True)
    for layer in net.layers:
        # stock init is conservative; push the micro-net into its firing regime
        layer.weights *= 3.0
    shape = (2, spec.total_steps, widths[0])
    if mode is SpikeMode.SSP:
        spikes = (rng.random(shape) < 0.5).astype(float)
    else:
        spikes = rng.integers(0, 3, size=shape).astype(float)
    labels = rng.integers(0, widths[-1], size=2)
    return net, spikes, labels


def _near_boundary(net: NetworkParams, tape: Tape) -> bool:
    """True when the relaxed forward sits close enough to a derivative kink
    that a finite-difference step could cross it.

    A tiny potential alone is not a hazard: a perturbation can only reach it
    through a live path, and near-zero potentials usually sit behind dead
    ones.  Potentials deep in the dendrite filter's negative tail are guarded
    by the tail slope itself; carries behind a consumed positive step are
    guarded because relaxed consumption cancels the potential identically, so
    the carry is roundoff with roundoff sensitivity.  Only a live filter slope
    or a negative previous potential (nothing consumed, full carry
    sensitivity) can actually push v across the rectifier corner.  Exact zeros
    are structural: every kernel starts at amplitude 0.  Intensities near the
    spike cap and taps near the delay crossing are flagged directly.  The
    binary relaxation is kink-free.
    """
    if net.spec.mode is not SpikeMode.SSP:
        for lt in tape.layers:
            av = np.abs(lt.v)
            small = (av > 0.0) & (av < 1e-4)
            if np.any(small):
                slope = np.abs(synapse.swish_grad(lt.x))
                v_prev = _shift_right(lt.v)
                if np.any(small & ((slope > 1e-3) | (v_prev < -1e-3))):
                    return True
            if np.any(np.abs(lt.n_star - S_MAX) < 1e-3):
                return True
    kernels = [net.input_kernel] + [l.kernel for l in net.layers if l.kernel is not None]
    for kern in kernels:
        rel = np.arange(kern.kernel_size) * kern.dt - kern.delay[:, None]
        if np.any(np.abs(rel) < 1e-3):
            return True
    return False


def _relaxed_loss(net: NetworkParams, spikes: np.ndarray, labels: np.ndarray) -> float:
    res = network.forward(net, spikes, relaxed=True)
    return network.loss(res.logits, labels)


def check_gradients(net: NetworkParams, spikes: np.ndarray, labels: np.ndarray,
                    groups, threshold: float = 1e-4) -> dict:
    """Compare analytic gradients against central differences on the relaxed
    forward.  Returns {group: max relative error} over the requested groups."""
    res = network.forward(net, spikes, record_tape=True, relaxed=True)
    _, dlogits = network.loss_and_grad(res.logits, labels)
    grads = backward(res.tape, net, dlogits)

    worst = {g: 0.0 for g in groups}
    for name, arr in named_parameters(net):
        group = group_of(name)
        if group not in worst:
            continue
        analytic = grads[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            h = 1e-5 * max(1.0, abs(orig))
            arr[idx] = orig + h
            up = _relaxed_loss(net, spikes, labels)
            arr[idx] = orig - h
            down = _relaxed_loss(net, spikes, labels)
            arr[idx] = orig
            fd = (up - down) / (2.0 * h)
            rel = abs(analytic[idx] - fd) / max(abs(analytic[idx]), abs(fd), REL_FLOOR)
            if rel > worst[group]:
                worst[group] = rel
    return worst


def _group_strength(net: NetworkParams, grads: dict) -> dict:
    strength = {}
    for name, _ in named_parameters(net):
        grp = group_of(name)
        strength[grp] = max(strength.get(grp, 0.0), float(np.max(np.abs(grads[name]))))
    return strength


def gradcheck(mode: SpikeMode, seed: int, threshold: float = 1e-4,
              max_resamples: int = 8) -> GradcheckReport:
    """Run one micro-network check.

    Samples are redrawn, up to ``max_resamples`` tries, when the forward lands
    near a derivative kink, when the network is dead, or when any checked
    group's gradient is too small to compare meaningfully.  If every draw is
    rejected the last one is checked anyway; the report carries the count.
    """
    resamples = 0
    for attempt in range(max_resamples):
        trial_seed = seed + 1000 * attempt
        net, spikes, labels = _sample_problem(mode, trial_seed)
        res = network.forward(net, spikes, record_tape=True, relaxed=True)
        if all(total > 0.0 for total in res.spike_totals) \
                and not _near_boundary(net, res.tape):
            _, dlogits = network.loss_and_grad(res.logits, labels)
            strength = _group_strength(net, backward(res.tape, net, dlogits))
            if all(strength[g] >= GRAD_LIVE_FLOOR for g in CHECK_GROUPS[mode]):
                break
        resamples += 1
    worst = check_gradients(net, spikes, labels, CHECK_GROUPS[mode], threshold)
    return GradcheckReport(mode=mode.value, seed=trial_seed, max_rel_err=worst,
                           threshold=threshold, resamples=resamples)


def gradcheck_suite(num_nets: int = 10, seed: int = 0, threshold: float = 1e-4):
    """Check ``num_nets`` random micro-networks in every mode.

    Returns the list of reports; the caller decides how to render them.
    """
    reports = []
    for m, mode in enumerate((SpikeMode.SFA, SpikeMode.LINEAR, SpikeMode.SSP)):
        for k in range(num_nets):
            reports.append(gradcheck(mode, seed=seed + 17 * k + 7 * m,
                                     threshold=threshold))
    return reports


def format_report(report: GradcheckReport) -> str:
    cols = "  ".join(f"{g}={e:.2e}" for g, e in sorted(report.max_rel_err.items()))
    status = "ok" if report.passed else "FAIL"
    return f"[{status}] mode={report.mode} seed={report.seed} {cols}"
