"""The four small networks trained by the framework.

* ``FusionBackbone`` (B): two-stream stems, concatenation, fusion convs.
* ``FusionDecoder`` (D): fused features -> fused RGB image in (0, 1).
* ``SegHead`` (H): feature-level segmentation of B's output.
* ``SegModel`` (S): pixel-level segmentation of the fused image, a small
  encoder/decoder.

Parameters live in a :class:`ParamRegistry` whose names are prefixed with the
owning group, e.g. ``fusion_backbone.fuse1.weight``.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import DimensionError
from .ops import avgpool2x, conv2d, softmax_channel, upsample_nearest2x
from .tensor import Tensor, concat, relu, sigmoid

FEATURE_CHANNELS = 32
GROUPS = ("fusion_backbone", "fusion_decoder", "seg_head", "seg_model")
SHARED_GROUPS = ("fusion_backbone", "fusion_decoder")


class ParamRegistry:
    """Ordered ``name -> Tensor`` map; iteration order is registration order."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    @staticmethod
    def group_of(name: str) -> str:
        return name.split(".", 1)[0]

    def group(self, *groups: str) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._params.items() if self.group_of(n) in groups]

    def shared(self) -> list[tuple[str, Tensor]]:
        """Parameters of the fusion model, the set GDWA measures gradients on."""
        return self.group(*SHARED_GROUPS)

    def groups(self) -> list[str]:
        return list(dict.fromkeys(self.group_of(n) for n in self._params))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def count(self, *groups: str) -> int:
        items = self.group(*groups) if groups else self._params.items()
        return sum(t.size for _, t in items)

    def state(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((n, t.data.copy()) for n, t in self._params.items())

    def load_state(self, state, strict: bool = True) -> None:
        for name, t in self._params.items():
            if name not in state:
                if strict:
                    raise KeyError(f"checkpoint lacks parameter {name!r}")
                continue
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data[...] = arr


class Conv:
    """3x3 (or kxk) same-padded convolution with bias."""

    def __init__(self, registry: ParamRegistry, name: str, c_in: int, c_out: int, k: int = 3):
        self.k = k
        self.weight = registry.register(f"{name}.weight", Tensor(np.zeros((c_out, c_in, k, k), np.float32), requires_grad=True))
        self.bias = registry.register(f"{name}.bias", Tensor(np.zeros(c_out, np.float32), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=1, padding=self.k // 2)


@dataclass
class FusedOutputs:
    features: Tensor
    fused: Tensor


@dataclass
class SegPrediction:
    logits: Tensor
    probs: Tensor

    @classmethod
    def from_logits(cls, logits: Tensor) -> "SegPrediction":
        return cls(logits=logits, probs=softmax_channel(logits))

    @classmethod
    def from_probs(cls, probs) -> "SegPrediction":
        probs = probs if isinstance(probs, Tensor) else Tensor(probs)
        return cls(logits=probs, probs=probs)

    @property
    def n_classes(self) -> int:
        return self.probs.shape[-3]


def _check_image(x: Tensor, name: str, channels: int) -> None:
    if x.ndim not in (3, 4) or x.shape[-3] != channels:
        raise DimensionError(f"{name}: expected {channels}-channel [C,H,W] or [N,C,H,W], got {x.shape}")


class FusionBackbone:
    group = "fusion_backbone"

    def __init__(self, registry: ParamRegistry):
        g = self.group
        self.vis1 = Conv(registry, f"{g}.vis_stem1", 3, 16)
        self.vis2 = Conv(registry, f"{g}.vis_stem2", 16, 16)
        self.ir1 = Conv(registry, f"{g}.ir_stem1", 3, 16)
        self.ir2 = Conv(registry, f"{g}.ir_stem2", 16, 16)
        self.fuse1 = Conv(registry, f"{g}.fuse1", 32, FEATURE_CHANNELS)
        self.fuse2 = Conv(registry, f"{g}.fuse2", FEATURE_CHANNELS, FEATURE_CHANNELS)

    def __call__(self, ir: Tensor, vis: Tensor) -> Tensor:
        _check_image(ir, "backbone ir", 3)
        _check_image(vis, "backbone vis", 3)
        if ir.shape != vis.shape:
            raise DimensionError(f"backbone: ir {ir.shape} and vis {vis.shape} differ")
        fi = relu(self.ir2(relu(self.ir1(ir))))
        fv = relu(self.vis2(relu(self.vis1(vis))))
        x = concat([fi, fv], axis=ir.ndim - 3)
        return relu(self.fuse2(relu(self.fuse1(x))))


class FusionDecoder:
    group = "fusion_decoder"

    def __init__(self, registry: ParamRegistry):
        self.dec1 = Conv(registry, f"{self.group}.dec1", FEATURE_CHANNELS, 16)
        self.dec2 = Conv(registry, f"{self.group}.dec2", 16, 3)

    def __call__(self, features: Tensor) -> Tensor:
        _check_image(features, "decoder", FEATURE_CHANNELS)
        return sigmoid(self.dec2(relu(self.dec1(features))))


class SegHead:
    group = "seg_head"
    instances = 0

    def __init__(self, registry: ParamRegistry, n_classes: int):
        SegHead.instances += 1
        self.n_classes = n_classes
        self.conv1 = Conv(registry, f"{self.group}.conv1", FEATURE_CHANNELS, 32)
        self.conv2 = Conv(registry, f"{self.group}.conv2", 32, 32)
        self.cls = Conv(registry, f"{self.group}.cls", 32, n_classes, k=1)

    def __call__(self, features: Tensor) -> SegPrediction:
        _check_image(features, "seg_head", FEATURE_CHANNELS)
        return SegPrediction.from_logits(self.cls(relu(self.conv2(relu(self.conv1(features))))))


class SegModel:
    group = "seg_model"
    instances = 0

    def __init__(self, registry: ParamRegistry, n_classes: int):
        SegModel.instances += 1
        g = self.group
        self.n_classes = n_classes
        self.enc1 = Conv(registry, f"{g}.enc1", 3, 16)
        self.enc2 = Conv(registry, f"{g}.enc2", 16, 32)
        self.mid = Conv(registry, f"{g}.mid", 32, 32)
        self.dec1 = Conv(registry, f"{g}.dec1", 32, 16)
        self.dec2 = Conv(registry, f"{g}.dec2", 16, 16)
        self.cls = Conv(registry, f"{g}.cls", 16, n_classes, k=1)

    def __call__(self, fused: Tensor) -> SegPrediction:
        _check_image(fused, "seg_model", 3)
        h, w = fused.shape[-2:]
        if h % 4 or w % 4:
            raise DimensionError(f"seg_model: spatial extents must be divisible by 4, got {h}x{w}")
        x = avgpool2x(relu(self.enc1(fused)))
        x = avgpool2x(relu(self.enc2(x)))
        x = upsample_nearest2x(relu(self.mid(x)))
        x = upsample_nearest2x(relu(self.dec1(x)))
        x = relu(self.dec2(x))
        return SegPrediction.from_logits(self.cls(x))


class FusionModel:
    """F = D o B. The only network needed at inference time."""

    def __init__(self, registry: ParamRegistry | None = None):
        self.registry = registry if registry is not None else ParamRegistry()
        self.backbone = FusionBackbone(self.registry)
        self.decoder = FusionDecoder(self.registry)

    def __call__(self, ir: Tensor, vis: Tensor) -> FusedOutputs:
        features = self.backbone(ir, vis)
        return FusedOutputs(features=features, fused=self.decoder(features))


class SSVIFNetworks:
    """Fusion model plus both segmentation branches, sharing one registry."""

    def __init__(self, n_classes: int, seed: int | None = None):
        self.n_classes = n_classes
        self.registry = ParamRegistry()
        self.fusion = FusionModel(self.registry)
        self.seg_head = SegHead(self.registry, n_classes)
        self.seg_model = SegModel(self.registry, n_classes)
        if seed is not None:
            init_params(self.registry, seed)


def init_params(registry: ParamRegistry, seed: int) -> None:
    """He-uniform fan-in weights, zero biases, in registry order."""
    rng = np.random.default_rng(seed)
    for name, t in registry.items():
        if name.endswith(".bias"):
            t.data[...] = 0
        else:
            fan_in = int(np.prod(t.shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            t.data[...] = rng.uniform(-bound, bound, t.shape).astype(t.dtype)
