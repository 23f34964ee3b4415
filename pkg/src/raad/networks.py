"""Patch description networks and the reconstruction autoencoder.

All nets are plain layer lists (conv / relu / avgpool / bilinear_up) over
the tensor engine.  The patch descriptor is fully convolutional with a
32-pixel receptive field; on 64x64 input it emits C x 14 x 14 feature
maps:

    conv 5x5 pad 2 -> relu -> avgpool 2 -> conv 5x5 pad 2 -> relu ->
    avgpool 2 -> conv 3x3 valid -> relu -> conv 3x3 pad 1

The student uses the same trunk with its final channel count widened by
an integer multiplier (2 in the pipeline: first half mimics the teacher,
second half mimics the autoencoder).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError
from .rng import Rng, derive
from .tensor import Tensor, avg_pool2d, bilinear_resize, conv2d, relu


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "relu" | "avgpool" | "bilinear_up"
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    out_h: int = 0  # bilinear_up target
    out_w: int = 0


@dataclass
class ConvTrace:
    """Per-conv tensors captured during a traced forward pass."""

    inputs: Tensor  # activation entering the conv
    pre: Tensor     # conv output before any nonlinearity
    post: Tensor    # after the following relu (== pre when none follows)


class Network:
    """Sequential net with named conv parameters.

    ``act_transforms`` optionally post-processes each conv's
    post-activation value (used for activation fake-quantization); entries
    are plain ndarray->ndarray callables and are skipped when None.
    """

    def __init__(self, name: str, layers: list[LayerSpec], seed: int, frozen: bool = False):
        self.name = name
        self.layers = layers
        self.frozen = frozen
        self.params: dict[str, Tensor] = {}
        self.act_transforms: dict[int, Callable[[np.ndarray], np.ndarray]] | None = None
        rng_root = seed
        conv_idx = 0
        for spec in layers:
            if spec.kind != "conv":
                continue
            rng = Rng(derive(rng_root, conv_idx))
            fan_in = spec.in_ch * spec.kernel * spec.kernel
            bound = float(np.sqrt(6.0 / fan_in))
            w = rng.uniform(-bound, bound, size=(spec.out_ch, spec.in_ch, spec.kernel, spec.kernel))
            self.params[f"conv{conv_idx}.weight"] = Tensor(w, requires_grad=not frozen)
            self.params[f"conv{conv_idx}.bias"] = Tensor(
                np.zeros(spec.out_ch), requires_grad=not frozen)
            conv_idx += 1
        self.n_convs = conv_idx

    # -- forward passes ------------------------------------------------

    def _run(self, x: Tensor, trace: bool):
        value = x
        taps: list[Tensor] = []
        traces: list[ConvTrace] = []
        conv_idx = 0
        prev_was_conv = False
        for spec in self.layers:
            if spec.kind == "conv":
                w = self.params[f"conv{conv_idx}.weight"]
                b = self.params[f"conv{conv_idx}.bias"]
                entering = value
                value = conv2d(value, w, b, stride=spec.stride, padding=spec.padding)
                taps.append(value)
                if trace:
                    traces.append(ConvTrace(inputs=entering, pre=value, post=value))
                value = self._apply_act_transform(value, conv_idx)
                conv_idx += 1
                prev_was_conv = True
                continue
            if spec.kind == "relu":
                value = relu(value)
                if prev_was_conv:
                    taps[-1] = value
                    if trace:
                        traces[-1].post = value
                    value = self._apply_act_transform(value, conv_idx - 1, replace=True)
            elif spec.kind == "avgpool":
                value = avg_pool2d(value, spec.kernel, spec.stride)
            elif spec.kind == "bilinear_up":
                value = bilinear_resize(value, spec.out_h, spec.out_w)
            else:
                raise ConfigError(f"unknown layer kind '{spec.kind}'")
            prev_was_conv = False
        return value, taps, traces

    def _apply_act_transform(self, value: Tensor, conv_idx: int, replace: bool = False):
        # When a relu follows the conv the transform applies to the
        # post-relu tensor; _run calls us twice and the second call wins,
        # so the first (pre-relu) application is skipped by peeking ahead.
        if self.act_transforms is None:
            return value
        fn = self.act_transforms.get(conv_idx)
        if fn is None:
            return value
        if not replace and self._relu_follows(conv_idx):
            return value
        return Tensor(fn(value.data))

    def _relu_follows(self, conv_idx: int) -> bool:
        seen = -1
        for i, spec in enumerate(self.layers):
            if spec.kind == "conv":
                seen += 1
                if seen == conv_idx:
                    return i + 1 < len(self.layers) and self.layers[i + 1].kind == "relu"
        return False

    def forward(self, x: Tensor) -> Tensor:
        out, _, _ = self._run(x, trace=False)
        out.assert_finite(f"{self.name} forward output")
        return out

    def forward_with_taps(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        out, taps, _ = self._run(x, trace=False)
        out.assert_finite(f"{self.name} forward output")
        return out, taps

    def forward_trace(self, x: Tensor) -> tuple[Tensor, list[ConvTrace]]:
        out, _, traces = self._run(x, trace=True)
        return out, traces

    # -- parameter plumbing ---------------------------------------------

    def freeze(self) -> "Network":
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def trainable_params(self) -> dict[str, Tensor]:
        return {} if self.frozen else dict(self.params)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise ConfigError(f"{self.name}: checkpoint missing parameter '{k}'")
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise DimensionError(
                    f"{self.name}: parameter '{k}' shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def copy(self) -> "Network":
        dup = Network.__new__(Network)
        dup.name = self.name
        dup.layers = self.layers
        dup.frozen = self.frozen
        dup.n_convs = self.n_convs
        dup.params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                      for k, v in self.params.items()}
        dup.act_transforms = None if self.act_transforms is None else dict(self.act_transforms)
        return dup

    def conv_specs(self) -> list[LayerSpec]:
        return [s for s in self.layers if s.kind == "conv"]

    def summary(self, in_ch: int, height: int, width: int) -> str:
        """Plain-text table: layer, kind, params, output shape."""
        rows = [("layer", "kind", "params", "output")]
        c, h, w = in_ch, height, width
        conv_idx = 0
        for i, spec in enumerate(self.layers):
            n_params = 0
            if spec.kind == "conv":
                h = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
                w = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
                c = spec.out_ch
                n_params = spec.out_ch * (spec.in_ch * spec.kernel * spec.kernel + 1)
                kind = f"conv{spec.kernel}x{spec.kernel}/s{spec.stride}/p{spec.padding}"
                conv_idx += 1
            elif spec.kind == "avgpool":
                h = (h - spec.kernel) // spec.stride + 1
                w = (w - spec.kernel) // spec.stride + 1
                kind = f"avgpool{spec.kernel}/s{spec.stride}"
            elif spec.kind == "bilinear_up":
                h, w = spec.out_h, spec.out_w
                kind = f"bilinear_up->{spec.out_h}x{spec.out_w}"
            else:
                kind = spec.kind
            rows.append((str(i), kind, str(n_params), f"{c}x{h}x{w}"))
        widths = [max(len(r[j]) for r in rows) for j in range(4)]
        lines = ["  ".join(r[j].ljust(widths[j]) for j in range(4)).rstrip() for r in rows]
        total = sum(p.data.size for p in self.params.values())
        lines.append(f"total parameters: {total}")
        return "\n".join(lines) + "\n"


def _pdn_layers(in_ch: int, hidden: int, out_ch: int) -> list[LayerSpec]:
    return [
        LayerSpec("conv", in_ch=in_ch, out_ch=hidden, kernel=5, padding=2),
        LayerSpec("relu"),
        LayerSpec("avgpool", kernel=2, stride=2),
        LayerSpec("conv", in_ch=hidden, out_ch=hidden, kernel=5, padding=2),
        LayerSpec("relu"),
        LayerSpec("avgpool", kernel=2, stride=2),
        LayerSpec("conv", in_ch=hidden, out_ch=hidden, kernel=3, padding=0),
        LayerSpec("relu"),
        LayerSpec("conv", in_ch=hidden, out_ch=out_ch, kernel=3, padding=1),
    ]


def build_pdn(name: str, seed: int, out_channels: int = 8, width_multiplier: int = 1,
              hidden_channels: int = 8, in_channels: int = 3, frozen: bool = False) -> Network:
    """Patch descriptor; the multiplier widens only the final conv so that
    intermediate taps stay shape-compatible between teacher and student."""
    if width_multiplier < 1:
        raise ConfigError(f"width_multiplier must be >= 1, got {width_multiplier}")
    layers = _pdn_layers(in_channels, hidden_channels, out_channels * width_multiplier)
    return Network(name, layers, seed=seed, frozen=frozen)


def build_extractor(name: str, seed: int, out_channels: int = 8,
                    hidden_channels: int = 8, in_channels: int = 3) -> Network:
    """Frozen random feature extractor used as the pretraining target."""
    layers = _pdn_layers(in_channels, hidden_channels, out_channels)
    return Network(name, layers, seed=seed, frozen=True)


def build_autoencoder(name: str, seed: int, out_channels: int = 8, latent_dim: int = 16,
                      image_size: int = 64, hidden_channels: int = 16,
                      in_channels: int = 3) -> Network:
    """Bottlenecked reconstruction net whose output matches the teacher's.

    The encoder downsamples by strided convs to a 1x1 latent; the decoder
    alternates bilinear upsampling and convs, landing on (size/4 - 2)^2
    to mirror the patch descriptor's output grid.
    """
    if image_size % 16 != 0 or image_size < 32:
        raise ConfigError(f"image_size must be a multiple of 16 and >= 32, got {image_size}")
    s = image_size
    h = hidden_channels
    layers = [
        # encoder: s -> s/2 -> s/4 -> s/8 -> s/16 -> 1
        LayerSpec("conv", in_ch=in_channels, out_ch=h // 2, kernel=3, stride=2, padding=1),
        LayerSpec("relu"),
        LayerSpec("conv", in_ch=h // 2, out_ch=h, kernel=3, stride=2, padding=1),
        LayerSpec("relu"),
        LayerSpec("conv", in_ch=h, out_ch=h, kernel=3, stride=2, padding=1),
        LayerSpec("relu"),
        LayerSpec("conv", in_ch=h, out_ch=h, kernel=3, stride=2, padding=1),
        LayerSpec("relu"),
        LayerSpec("conv", in_ch=h, out_ch=latent_dim, kernel=s // 16, stride=1, padding=0),
        # decoder
        LayerSpec("bilinear_up", out_h=s // 16, out_w=s // 16),
        LayerSpec("conv", in_ch=latent_dim, out_ch=h, kernel=3, padding=1),
        LayerSpec("relu"),
        LayerSpec("bilinear_up", out_h=s // 8, out_w=s // 8),
        LayerSpec("conv", in_ch=h, out_ch=h, kernel=3, padding=1),
        LayerSpec("relu"),
        LayerSpec("bilinear_up", out_h=s // 4, out_w=s // 4),
        LayerSpec("conv", in_ch=h, out_ch=h, kernel=3, padding=0),
        LayerSpec("relu"),
        LayerSpec("conv", in_ch=h, out_ch=out_channels, kernel=3, padding=1),
    ]
    return Network(name, layers, seed=seed)


def encoder_conv_indices(net: Network) -> list[int]:
    """Conv indices before the first upsampling layer (the encoder half)."""
    out = []
    conv_idx = 0
    for spec in net.layers:
        if spec.kind == "bilinear_up":
            break
        if spec.kind == "conv":
            out.append(conv_idx)
            conv_idx += 1
    return out
