"""Config-driven convolutional encoders for the two streams.

The visual stream maps an RGB image to a spatial feature map [c, h, w]; the
audio stream maps a magnitude spectrogram [1, F, T] to an embedding [c] by
global max over its final feature map. Both are plain conv/relu/maxpool
stacks described by layer spec tuples, so paper-scale geometry stays
reachable through configuration alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .tensor import Tensor, apply


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: Union[int, tuple] = 3
    stride: Union[int, tuple] = 1
    pad: Union[int, tuple] = 0


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Pool:
    kernel: Union[int, tuple] = 2
    stride: Union[int, tuple, None] = None  # defaults to kernel


LayerSpec = Union[Conv, Relu, Pool]


@dataclass(frozen=True)
class EncoderConfig:
    visual: tuple
    audio: tuple
    embed_dim: int


def default_config() -> EncoderConfig:
    """Desk-scale encoders: 64x64 RGB -> [16,8,8]; 257xT spectrogram -> [16].

    The visual stack is a non-overlapping 8x8 tiling followed by 1x1 convs: a
    per-tile network. Two properties matter more than depth-along-space here.
    No padding and no absolute-position signal exist, so the contrastive
    objective cannot satisfy its positive term with a border cell that fires
    for every image; and the receptive field equals the grid stride, so every
    cell inside a textured patch sees the same statistics and they cross the
    mining threshold together. With wide receptive fields only the single
    best-centered cell wins the sharp mining sigmoid and heatmaps degenerate
    to one-hot spikes no matter how good the correspondence is.

    The first audio conv spans the whole frequency axis. Narrow kernels plus
    the global max are translation invariant along frequency, and the tone
    classes are exact frequency translates of each other, so full-height
    spectral templates are what make the classes separable at all.
    """
    visual = (
        Conv(32, 8, 8, 0), Relu(),
        Conv(32, 1, 1, 0), Relu(),
        Conv(16, 1, 1, 0), Relu(),
    )
    audio = (
        Pool(2),
        Conv(16, (128, 5), (1, 2), (0, 2)), Relu(),
        Conv(16, (1, 3), (1, 2), (0, 1)), Relu(),
        Conv(16, (1, 3), (1, 2), (0, 1)), Relu(),
    )
    return EncoderConfig(visual=visual, audio=audio, embed_dim=16)


def paper_scale_config() -> EncoderConfig:
    """Full-scale geometry: 224x224 -> [512,14,14]; 257x300 -> 512x17x13 -> [512]."""
    visual = (
        Conv(64, 3, 1, 1), Relu(), Pool(2),
        Conv(128, 3, 1, 1), Relu(), Pool(2),
        Conv(256, 3, 1, 1), Relu(), Pool(2),
        Conv(512, 3, 1, 1), Relu(), Pool(2),
    )
    audio = (
        Conv(64, 3, 2, 1), Relu(),
        Conv(128, 3, 2, 1), Relu(),
        Conv(256, 3, 2, 1), Relu(),
        Conv(512, 3, 2, 1), Relu(),
        Conv(512, (1, 7), 1, 0), Relu(),
    )
    return EncoderConfig(visual=visual, audio=audio, embed_dim=512)


def _pair(v):
    return (int(v), int(v)) if isinstance(v, (int, np.integer)) else (int(v[0]), int(v[1]))


def validate_config(cfg: EncoderConfig) -> None:
    """Raise ValueError listing every problem with the encoder config."""
    problems = []
    if cfg.embed_dim < 1:
        problems.append(f"embed_dim must be >= 1, got {cfg.embed_dim}")
    for stream_name, layers in (("visual", cfg.visual), ("audio", cfg.audio)):
        convs = [l for l in layers if isinstance(l, Conv)]
        if not convs:
            problems.append(f"{stream_name}: needs at least one conv layer")
            continue
        for i, layer in enumerate(layers):
            if isinstance(layer, Conv):
                kh, kw = _pair(layer.kernel)
                sh, sw = _pair(layer.stride)
                ph, pw = _pair(layer.pad)
                if layer.out_channels < 1:
                    problems.append(f"{stream_name}[{i}]: out_channels must be >= 1")
                if kh < 1 or kw < 1 or sh < 1 or sw < 1 or ph < 0 or pw < 0:
                    problems.append(f"{stream_name}[{i}]: bad conv geometry {layer}")
            elif isinstance(layer, Pool):
                kh, kw = _pair(layer.kernel)
                if kh < 1 or kw < 1:
                    problems.append(f"{stream_name}[{i}]: bad pool kernel {layer.kernel}")
            elif not isinstance(layer, Relu):
                problems.append(f"{stream_name}[{i}]: unknown layer {layer!r}")
        if convs and convs[-1].out_channels != cfg.embed_dim:
            problems.append(
                f"{stream_name}: final conv has {convs[-1].out_channels} channels "
                f"but embed_dim is {cfg.embed_dim}; the streams must agree"
            )
    if problems:
        raise ValueError("invalid encoder config:\n  " + "\n  ".join(problems))


def feature_shape(layers, in_shape: tuple) -> tuple:
    """Output (c, h, w) of a layer stack for an input (c, h, w), by shape law."""
    c, h, w = in_shape
    for layer in layers:
        if isinstance(layer, Conv):
            kh, kw = _pair(layer.kernel)
            sh, sw = _pair(layer.stride)
            ph, pw = _pair(layer.pad)
            if h + 2 * ph < kh or w + 2 * pw < kw:
                raise ValueError(f"input {h}x{w} too small for conv kernel ({kh},{kw}) pad ({ph},{pw})")
            h = (h + 2 * ph - kh) // sh + 1
            w = (w + 2 * pw - kw) // sw + 1
            c = layer.out_channels
        elif isinstance(layer, Pool):
            kh, kw = _pair(layer.kernel)
            sh, sw = _pair(layer.stride if layer.stride is not None else layer.kernel)
            if h < kh or w < kw:
                raise ValueError(f"input {h}x{w} too small for pool kernel ({kh},{kw})")
            h = (h - kh) // sh + 1
            w = (w - kw) // sw + 1
    return c, h, w


def init_params(cfg: EncoderConfig, seed: int, dtype=np.float32) -> dict:
    """He fan-in normal weights, zero biases, deterministic in the seed.

    Returns named parameter tensors: '<stream>.<layer index>.weight' / '.bias'.
    """
    validate_config(cfg)
    rng = np.random.default_rng(seed)
    params: dict = {}
    for stream_name, layers, in_ch in (("visual", cfg.visual, 3), ("audio", cfg.audio, 1)):
        c = in_ch
        first_conv = True
        for i, layer in enumerate(layers):
            if not isinstance(layer, Conv):
                continue
            kh, kw = _pair(layer.kernel)
            fan_in = c * kh * kw
            std = np.sqrt(2.0 / fan_in)
            w = rng.normal(0.0, std, size=(layer.out_channels, c, kh, kw))
            if first_conv:
                # zero-sum filters: constant inputs (flat image regions, the
                # broadband noise floor) produce exactly zero response, so the
                # initial similarity maps carry structure only where the input
                # does. Without this, every uniform region shares one feature
                # direction and its fate dominates the early mining gradients.
                w -= w.mean(axis=(1, 2, 3), keepdims=True)
                first_conv = False
            params[f"{stream_name}.{i}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
            params[f"{stream_name}.{i}.bias"] = Tensor(
                np.zeros(layer.out_channels, dtype=dtype), requires_grad=True
            )
            c = layer.out_channels
    return params


def _run_layers(x: Tensor, layers, params: dict, prefix: str) -> Tensor:
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv):
            x = apply(
                "conv2d",
                x,
                params[f"{prefix}.{i}.weight"],
                params[f"{prefix}.{i}.bias"],
                stride=layer.stride,
                pad=layer.pad,
            )
        elif isinstance(layer, Relu):
            x = apply("relu", x)
        elif isinstance(layer, Pool):
            stride = layer.stride if layer.stride is not None else layer.kernel
            x = apply("maxpool2d", x, kernel=layer.kernel, stride=stride)
        else:
            raise ValueError(f"unknown layer {layer!r}")
    return x


def encode_visual(image: Tensor, params: dict, cfg: EncoderConfig) -> Tensor:
    """Image [3,H,W] with values in [0,1] -> feature map [c,h,w]."""
    if image.data.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"encode_visual expects [3,H,W], got {image.shape}")
    lo, hi = float(image.data.min()), float(image.data.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"encode_visual expects values in [0,1], got range [{lo:.3g}, {hi:.3g}]")
    x = image.reshape((1,) + image.shape)
    out = _run_layers(x, cfg.visual, params, "visual")
    return out.reshape(out.shape[1:])


def encode_audio(spec: Tensor, params: dict, cfg: EncoderConfig) -> Tensor:
    """Spectrogram [1,F,T] -> embedding [c] (global max over the final map)."""
    if spec.data.ndim != 3 or spec.shape[0] != 1:
        raise ValueError(f"encode_audio expects [1,F,T], got {spec.shape}")
    x = spec.reshape((1,) + spec.shape)
    out = _run_layers(x, cfg.audio, params, "audio")
    return out.max(axes=(0, 2, 3))


def encode_visual_batch(images: Tensor, params: dict, cfg: EncoderConfig) -> Tensor:
    """Images [N,3,H,W] -> feature maps [N,c,h,w] with one graph node per
    layer, so a whole batch costs the same op count as one sample."""
    if images.data.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"encode_visual_batch expects [N,3,H,W], got {images.shape}")
    lo, hi = float(images.data.min()), float(images.data.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(
            f"encode_visual_batch expects values in [0,1], got range [{lo:.3g}, {hi:.3g}]"
        )
    return _run_layers(images, cfg.visual, params, "visual")


def encode_audio_batch(specs: Tensor, params: dict, cfg: EncoderConfig) -> Tensor:
    """Spectrograms [N,1,F,T] -> embeddings [N,c]."""
    if specs.data.ndim != 4 or specs.shape[1] != 1:
        raise ValueError(f"encode_audio_batch expects [N,1,F,T], got {specs.shape}")
    out = _run_layers(specs, cfg.audio, params, "audio")
    return out.max(axes=(2, 3))
