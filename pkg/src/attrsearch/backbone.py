"""Small convolutional stack exposing a mid and a last feature map.

Four 3x3 conv+relu layers; the first three halve the spatial size. On a
64x64x3 input the third layer's output is the 8x8x32 mid map used for ROI
pooling and the fourth layer's output is the 8x8x64 last map used for the
activation-map classifier.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import (
    DimensionError,
    GradientTape,
    Tensor,
    bias_add,
    conv2d,
    relu,
    rms_norm,
)


@dataclass(frozen=True)
class LayerSpec:
    channels: int
    stride: int


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 64
    input_channels: int = 3
    kernel: int = 3
    layers: Tuple[LayerSpec, ...] = (
        LayerSpec(16, 2),
        LayerSpec(32, 2),
        LayerSpec(32, 2),
        LayerSpec(64, 1),
    )
    mid_layer: int = 2          # index of the layer whose output is the mid map
    last_layer: int = 3
    channel_norm: bool = True   # RMS response normalization after each relu

    def map_size(self, layer: int) -> int:
        size = self.input_size
        for spec in self.layers[:layer + 1]:
            size = -(-size // spec.stride)   # ceil division, "same" padding
        return size

    def parameter_count(self) -> int:
        total = 0
        cin = self.input_channels
        for spec in self.layers:
            total += self.kernel * self.kernel * cin * spec.channels + spec.channels
            cin = spec.channels
        return total

    def to_json_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "input_channels": self.input_channels,
            "kernel": self.kernel,
            "layers": [{"channels": s.channels, "stride": s.stride}
                       for s in self.layers],
            "mid_layer": self.mid_layer,
            "last_layer": self.last_layer,
            "channel_norm": self.channel_norm,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "BackboneConfig":
        return cls(
            input_size=doc["input_size"],
            input_channels=doc["input_channels"],
            kernel=doc["kernel"],
            layers=tuple(LayerSpec(l["channels"], l["stride"])
                         for l in doc["layers"]),
            mid_layer=doc["mid_layer"],
            last_layer=doc["last_layer"],
            channel_norm=doc.get("channel_norm", True),
        )


@dataclass(frozen=True)
class FeatureMaps:
    """The two spatial feature tensors produced for one image (or batch)."""
    mid: Tensor
    last: Tensor


@dataclass
class BackboneParams:
    config: BackboneConfig
    tensors: Dict[str, Tensor]          # conv{i}/kernel, conv{i}/bias
    channel_means: np.ndarray           # per-channel mean removed on input
    trainable: Tuple[bool, ...]         # one flag per layer

    def names(self) -> List[str]:
        return list(self.tensors)

    def trainable_names(self) -> List[str]:
        out = []
        for i, flag in enumerate(self.trainable):
            if flag:
                out += [f"backbone/conv{i}/kernel", f"backbone/conv{i}/bias"]
        return out

    def with_tensors(self, tensors: Dict[str, Tensor]) -> "BackboneParams":
        merged = dict(self.tensors)
        merged.update({k: v for k, v in tensors.items() if k in merged})
        return BackboneParams(self.config, merged, self.channel_means,
                              self.trainable)

    def with_channel_means(self, means: np.ndarray) -> "BackboneParams":
        return BackboneParams(self.config, dict(self.tensors),
                              np.asarray(means, dtype=np.float32),
                              self.trainable)


def init_backbone(seed: int, config: BackboneConfig = BackboneConfig()
                  ) -> BackboneParams:
    """He-scaled Gaussian kernels, zero biases, deterministic per seed."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xB0])))
    tensors: Dict[str, Tensor] = {}
    cin = config.input_channels
    k = config.kernel
    for i, spec in enumerate(config.layers):
        std = np.sqrt(2.0 / (k * k * cin))
        kern = rng.normal(0.0, std, size=(k, k, cin, spec.channels))
        tensors[f"backbone/conv{i}/kernel"] = Tensor(kern.astype(np.float32))
        tensors[f"backbone/conv{i}/bias"] = Tensor(
            np.zeros(spec.channels, dtype=np.float32))
        cin = spec.channels
    return BackboneParams(config=config, tensors=tensors,
                          channel_means=np.zeros(config.input_channels,
                                                 dtype=np.float32),
                          trainable=tuple(True for _ in config.layers))


def extract_features(pixels: Tensor, params: BackboneParams,
                     tape: Optional[GradientTape] = None) -> FeatureMaps:
    """Forward pass from pixels to (mid, last) maps.

    Accepts one (H, W, 3) image or an (N, H, W, 3) batch of floats in
    [0, 1]; per-channel means from the params are removed first. With a
    tape, gradients flow into every layer marked trainable.
    """
    cfg = params.config
    expected = (cfg.input_size, cfg.input_size, cfg.input_channels)
    if pixels.shape != expected and pixels.shape[1:] != expected:
        raise DimensionError(
            f"expected pixels {expected} (optionally batched), got {pixels.shape}")
    x = Tensor._wrap(pixels.array - params.channel_means.astype(pixels.dtype))
    mid = last = None
    for i in range(len(cfg.layers)):
        kern = params.tensors[f"backbone/conv{i}/kernel"]
        bias = params.tensors[f"backbone/conv{i}/bias"]
        x = conv2d(x, kern, stride=cfg.layers[i].stride, padding="same",
                   tape=tape)
        x = bias_add(x, bias, tape=tape)
        x = relu(x, tape=tape)
        if cfg.channel_norm:
            x = rms_norm(x, tape=tape)
        if i == cfg.mid_layer:
            mid = x
        if i == cfg.last_layer:
            last = x
    assert mid is not None and last is not None
    return FeatureMaps(mid=mid, last=last)


def stack_pixels(images: Sequence) -> Tensor:
    """Stack LabeledImage pixels (or pixel tensors) into an (N, H, W, 3) batch."""
    arrays = [im.pixels.array if hasattr(im, "pixels") else im.array
              for im in images]
    return Tensor._wrap(np.stack(arrays, axis=0))
