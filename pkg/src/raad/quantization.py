"""Post-training quantization weighted by a diagonal Fisher estimate.

Weights are fake-quantized symmetrically per output channel, activations
asymmetrically per tensor.  Scales come from a 100-candidate search; for
weight blocks the candidates are scored by the gradient-weighted block
reconstruction error

    err = mean over calibration images of sum_e (g_e * dz_e)^2

where z is the conv's pre-activation output and g = dL/dz is cached from
one backward pass of the full-precision model.  A block is a single conv
layer; the coordinate-descent loop over a block's layers is kept (two
sweeps) and degenerates to a repeated exact search.

Biases stay in full precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError
from .networks import ConvTrace, LayerSpec, Network
from .rng import Rng, derive
from .tensor import Tape, Tensor, _im2col, backward, channel_slice, mse_mean

ALLOWED_BITS = (2, 3, 4, 8)
GRID_POINTS = 100
GRID_LO = 0.2
GRID_STEP = 0.01  # endpoint-exclusive: 0.2, 0.21, ..., 1.19 (1.0 and 0.75 on-grid)


def _check_bits(bits: int) -> None:
    if bits not in ALLOWED_BITS:
        raise ParameterError(f"bit width {bits} outside {ALLOWED_BITS}")


@dataclass
class QuantScheme:
    """Fake-quantization parameters for one tensor."""

    bits: int
    scale: np.ndarray | float
    zero_point: np.ndarray | int
    granularity: str  # "per_tensor" | "per_channel"
    target: str       # "weights" | "activations"

    def __post_init__(self):
        _check_bits(self.bits)
        if np.any(np.asarray(self.scale) <= 0):
            raise ParameterError("quantization scale must be positive")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1)) if self.target == "weights" else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.target == "weights" else 2 ** self.bits - 1

    def apply(self, x: np.ndarray) -> np.ndarray:
        return quantize_dequantize(x, self)


def _channel_shape(scale, ndim: int):
    s = np.asarray(scale, dtype=np.float64)
    return s.reshape((-1,) + (1,) * (ndim - 1))


def quantize_dequantize(x: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    """Round-trip through the integer grid; ties round to even."""
    x = np.asarray(x, dtype=np.float64)
    if scheme.granularity == "per_channel":
        scale = _channel_shape(scheme.scale, x.ndim)
        zp = _channel_shape(scheme.zero_point, x.ndim) if np.ndim(scheme.zero_point) else scheme.zero_point
    else:
        scale = float(np.asarray(scheme.scale).reshape(()))
        zp = scheme.zero_point
    q = np.clip(np.round(x / scale) + zp, scheme.qmin, scheme.qmax)
    return (q - zp) * scale


def _candidate_scales(vmax: float, qmax: int) -> np.ndarray:
    base = vmax / qmax
    return base * (GRID_LO + GRID_STEP * np.arange(GRID_POINTS))


def calibrate_scale(x: np.ndarray, bits: int, granularity: str = "per_tensor") -> np.ndarray | float:
    """Scale minimizing plain round-trip MSE over the candidate grid.

    All-zero input (or channel) gets the sentinel scale 1.0.  Ties pick the
    first (smallest) candidate so the result is deterministic.
    """
    _check_bits(bits)
    x = np.asarray(x, dtype=np.float64)
    qmax = 2 ** (bits - 1) - 1
    qmin = -(2 ** (bits - 1))

    def best_for(flat: np.ndarray) -> float:
        vmax = float(np.max(np.abs(flat)))
        if vmax == 0.0:
            return 1.0
        cands = _candidate_scales(vmax, qmax)
        q = np.clip(np.round(flat[None, :] / cands[:, None]), qmin, qmax) * cands[:, None]
        err = np.mean((q - flat[None, :]) ** 2, axis=1)
        return float(cands[int(np.argmin(err))])

    if granularity == "per_tensor":
        return best_for(x.ravel())
    if granularity == "per_channel":
        return np.array([best_for(x[c].ravel()) for c in range(x.shape[0])])
    raise ParameterError(f"unknown granularity '{granularity}'")


def weight_scheme(weight: np.ndarray, bits: int) -> QuantScheme:
    """Per-output-channel symmetric scheme from plain MSE calibration."""
    scale = calibrate_scale(weight, bits, granularity="per_channel")
    return QuantScheme(bits=bits, scale=scale, zero_point=0,
                       granularity="per_channel", target="weights")


def activation_scheme(lo: float, hi: float, bits: int) -> QuantScheme:
    """Asymmetric per-tensor scheme from an observed value range."""
    _check_bits(bits)
    qmax = 2 ** bits - 1
    if not np.isfinite(lo) or not np.isfinite(hi):
        raise ContractError("activation range is non-finite")
    if hi <= lo:
        return QuantScheme(bits=bits, scale=1.0, zero_point=int(np.clip(round(-lo), 0, qmax)),
                           granularity="per_tensor", target="activations")
    scale = (hi - lo) / qmax
    zp = int(np.clip(round(-lo / scale), 0, qmax))
    return QuantScheme(bits=bits, scale=scale, zero_point=zp,
                       granularity="per_tensor", target="activations")


def fisher_diagonal(grads: list[np.ndarray]) -> np.ndarray:
    """Mean of elementwise squared gradients over the calibration set."""
    if not grads:
        raise ContractError("fisher_diagonal needs at least one gradient sample")
    acc = np.zeros_like(np.asarray(grads[0], dtype=np.float64))
    for g in grads:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != acc.shape:
            raise ParameterError(f"gradient sample shape {g.shape} != {acc.shape}")
        acc += g * g
    return acc / len(grads)


# ---------------------------------------------------------------- caches


@dataclass
class LayerCalibration:
    """Cached full-precision data for one conv layer."""

    spec: LayerSpec
    inputs: list[np.ndarray]   # [Cin,H,W] per image, entering the conv
    outputs: list[np.ndarray]  # [Cout,OH,OW] pre-activation
    grads: list[np.ndarray]    # dL/d(pre-activation), same shape
    post_lo: float             # post-activation range across the calib set
    post_hi: float

    def stacked(self):
        """(col, z, g) with rows stacked across images in input order."""
        cols, zs, gs = [], [], []
        for inp, out, g in zip(self.inputs, self.outputs, self.grads):
            col, _, _ = _im2col(inp[None], self.spec.kernel, self.spec.kernel,
                                self.spec.stride, self.spec.padding)
            cols.append(col)
            zs.append(out.transpose(1, 2, 0).reshape(-1, out.shape[0]))
            gs.append(g.transpose(1, 2, 0).reshape(-1, g.shape[0]))
        return np.concatenate(cols), np.concatenate(zs), np.concatenate(gs)


def _collect(traces: list[ConvTrace], store: list[LayerCalibration], specs: list[LayerSpec],
             with_grads: bool) -> None:
    for j, tr in enumerate(traces):
        pre = tr.pre.data[0]
        if with_grads:
            if tr.pre.grad is None:
                raise ContractError("calibration forward did not receive gradients")
            g = tr.pre.grad[0].copy()
        else:
            g = np.ones_like(pre)
        post = tr.post.data
        if j >= len(store):
            store.append(LayerCalibration(spec=specs[j], inputs=[], outputs=[], grads=[],
                                          post_lo=float(post.min()), post_hi=float(post.max())))
        cal = store[j]
        cal.inputs.append(tr.inputs.data[0].copy())
        cal.outputs.append(pre.copy())
        cal.grads.append(g)
        cal.post_lo = min(cal.post_lo, float(post.min()))
        cal.post_hi = max(cal.post_hi, float(post.max()))


def build_pair_calibration(teacher: Network, student: Network, images: list
                           ) -> tuple[list[LayerCalibration], list[LayerCalibration]]:
    """Run the full-precision pair over calibration images, caching conv
    inputs, pre-activation outputs and their gradients under the plain
    (un-mined) pair loss between teacher output and the student's
    teacher-mimicking half."""
    t_store: list[LayerCalibration] = []
    s_store: list[LayerCalibration] = []
    t_specs = teacher.conv_specs()
    s_specs = student.conv_specs()
    for image in images:
        arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
        # requires_grad on the input forces gradient flow through frozen
        # teacher convs so their pre-activation grads are populated too
        x = Tensor(arr[None] if arr.ndim == 3 else arr, requires_grad=True)
        with Tape() as tape:
            t_out, t_traces = teacher.forward_trace(x)
            s_out, s_traces = student.forward_trace(x)
            c = t_out.shape[1]
            s_head = channel_slice(s_out, 0, c)
            loss = mse_mean(t_out, s_head)
        backward(loss, tape)
        _collect(t_traces, t_store, t_specs, with_grads=True)
        _collect(s_traces, s_store, s_specs, with_grads=True)
    return t_store, s_store


def build_uniform_calibration(net: Network, images: list) -> list[LayerCalibration]:
    """Cache with unit gradient weights (plain output-MSE objective)."""
    store: list[LayerCalibration] = []
    specs = net.conv_specs()
    for image in images:
        arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
        x = Tensor(arr[None] if arr.ndim == 3 else arr)
        _, traces = net.forward_trace(x)
        _collect(traces, store, specs, with_grads=False)
    return store


def select_calibration_images(images: list, size: int, seed: int) -> list:
    """Seed-pinned subset of the (normal) training images."""
    if size <= 0:
        raise ParameterError(f"calibration size must be positive, got {size}")
    size = min(size, len(images))
    rng = Rng(derive(seed, 0xCA11B))
    idx = sorted(rng.choice(len(images), size))
    return [images[i] for i in idx]


# ---------------------------------------------------------- block solver


def block_reconstruction_error(cal: LayerCalibration, weight: np.ndarray,
                               qweight: np.ndarray) -> float:
    """Gradient-weighted output error of a quantized single-conv block."""
    col, _, g = cal.stacked()
    cout = weight.shape[0]
    d = (qweight - weight).reshape(cout, -1)
    dz = col @ d.T
    return float(np.sum((g * dz) ** 2) / len(cal.inputs))


def _quadratic_forms(cal: LayerCalibration, cout: int) -> list[np.ndarray]:
    """H_c = (1/n) * col^T diag(g_c^2) col, one per output channel."""
    col, _, g = cal.stacked()
    n = len(cal.inputs)
    out = []
    for c in range(cout):
        wc = col * (g[:, c] ** 2)[:, None]
        out.append((wc.T @ col) / n)
    return out


def quantize_block(cal: LayerCalibration, weight: np.ndarray, bits: int,
                   sweeps: int = 2) -> tuple[QuantScheme, np.ndarray, float, float]:
    """Pick per-channel scales minimizing the block reconstruction error.

    Starts from the plain-MSE calibrated scales and refines over the same
    candidate grid; with single-conv blocks each sweep of the coordinate
    descent is an exact independent search per channel, so the objective
    is nonincreasing by construction (asserted).

    Returns (scheme, snapped weights, error at start, error at end).
    """
    _check_bits(bits)
    cout = weight.shape[0]
    w2 = weight.reshape(cout, -1).astype(np.float64)
    qmax = 2 ** (bits - 1) - 1
    qmin = -(2 ** (bits - 1))
    hs = _quadratic_forms(cal, cout)

    def channel_error(c: int, scale: float) -> float:
        q = np.clip(np.round(w2[c] / scale), qmin, qmax) * scale
        d = q - w2[c]
        return float(d @ hs[c] @ d)

    scales = np.atleast_1d(np.asarray(
        calibrate_scale(weight, bits, granularity="per_channel"), dtype=np.float64))
    err_before = sum(channel_error(c, scales[c]) for c in range(cout))
    prev = err_before
    for _ in range(sweeps):
        for c in range(cout):
            vmax = float(np.max(np.abs(w2[c])))
            if vmax == 0.0:
                scales[c] = 1.0
                continue
            cands = _candidate_scales(vmax, qmax)
            qs = np.clip(np.round(w2[c][None, :] / cands[:, None]), qmin, qmax) * cands[:, None]
            deltas = qs - w2[c][None, :]
            errs = np.einsum("kd,de,ke->k", deltas, hs[c], deltas)
            scales[c] = float(cands[int(np.argmin(errs))])
        err = sum(channel_error(c, scales[c]) for c in range(cout))
        if err > prev + 1e-12 * max(1.0, abs(prev)):
            raise ContractError("coordinate descent increased the block objective")
        prev = err
    scheme = QuantScheme(bits=bits, scale=scales, zero_point=0,
                         granularity="per_channel", target="weights")
    snapped = quantize_dequantize(weight, scheme)
    return scheme, snapped, err_before, prev


@dataclass
class LayerQuantReport:
    layer: int  # 1-based
    bits: int
    scale_min: float
    scale_mean: float
    scale_max: float
    error_before: float
    error_after: float


def quantize_network(net: Network, cals: list[LayerCalibration], bit_assignment: list[int],
                     act_layers: list[int] | None = None, sweeps: int = 2
                     ) -> tuple[Network, list[LayerQuantReport], list[QuantScheme | None]]:
    """Snap all conv weights of ``net`` and attach activation fake-quant.

    ``bit_assignment`` has one entry per conv layer; the first and last
    are forced to 8 bits regardless of the request.  ``act_layers`` limits
    which convs get activation quantization (None = all).
    """
    n = net.n_convs
    if len(bit_assignment) != n:
        raise ParameterError(f"bit assignment has {len(bit_assignment)} entries for {n} convs")
    for b in bit_assignment:
        _check_bits(b)
    if len(cals) != n:
        raise ContractError(f"calibration cache covers {len(cals)} convs, network has {n}")
    bits = list(bit_assignment)
    bits[0] = 8
    bits[-1] = 8

    qnet = net.copy()
    reports: list[LayerQuantReport] = []
    act_schemes: list[QuantScheme | None] = [None] * n
    act_set = set(range(n)) if act_layers is None else set(act_layers)
    qnet.act_transforms = {}
    for j in range(n):
        w = net.params[f"conv{j}.weight"].data
        scheme, snapped, before, after = quantize_block(cals[j], w, bits[j], sweeps=sweeps)
        qnet.params[f"conv{j}.weight"].data = snapped
        s = np.atleast_1d(np.asarray(scheme.scale, dtype=np.float64))
        reports.append(LayerQuantReport(
            layer=j + 1, bits=bits[j], scale_min=float(s.min()),
            scale_mean=float(s.mean()), scale_max=float(s.max()),
            error_before=before, error_after=after))
        if j in act_set:
            a = activation_scheme(cals[j].post_lo, cals[j].post_hi, bits[j])
            act_schemes[j] = a
            qnet.act_transforms[j] = a.apply
    return qnet, reports, act_schemes


def format_quant_report(rows: list[LayerQuantReport]) -> str:
    lines = ["layer,bits,scale_stats,block_error_before,block_error_after"]
    for r in rows:
        stats = "%.9g/%.9g/%.9g" % (r.scale_min, r.scale_mean, r.scale_max)
        lines.append("%d,%d,%s,%.17g,%.17g"
                     % (r.layer, r.bits, stats, r.error_before, r.error_after))
    return "\n".join(lines) + "\n"
