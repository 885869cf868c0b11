"""Detector backbones built from depthwise-separable blocks with optional
channel attention, a single neck feature map, and a dense one-box-per-cell
head.

A depthwise L x L convolution followed by a pointwise 1 x 1 convolution
costs L*L*M + M*N kernel weights against L*L*M*N for the standard
convolution it replaces, a ratio of 1/L^2 + 1/N.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .boxes import clip_box, iou
from .tensor import ConfigError, ShapeError, Tensor

NUM_CLASSES = 21
SE_REDUCTION = 4


@dataclass
class BlockSpec:
    """One depthwise-separable block: dw LxL (stride) -> act -> pw 1x1 -> [SE] -> act."""

    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    use_se: bool = False
    activation: str = "h_swish"

    def validate(self) -> None:
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"block kernel must be odd and >= 1, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ConfigError(f"block stride must be 1 or 2, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("block channels must be >= 1")
        if self.use_se and self.out_channels % SE_REDUCTION != 0:
            raise ConfigError(
                f"SE needs out_channels divisible by {SE_REDUCTION}, got {self.out_channels}")


@dataclass
class ModelSpec:
    """Full architecture description: stem, block stack, neck tap, head."""

    stem_channels: int = 16
    stem_kernel: int = 3
    stem_stride: int = 2
    blocks: List[BlockSpec] = field(default_factory=list)
    neck_channels: int = 64
    num_classes: int = NUM_CLASSES
    in_channels: int = 1
    width_mult: float = 1.0
    activation: str = "h_swish"

    def validate(self) -> None:
        if not self.blocks:
            raise ConfigError("model needs at least one block")
        prev = self.stem_channels
        for i, blk in enumerate(self.blocks):
            blk.validate()
            if blk.in_channels != prev:
                raise ConfigError(
                    f"block {i} expects {blk.in_channels} channels, previous stage emits {prev}")
            prev = blk.out_channels

    @property
    def total_stride(self) -> int:
        s = self.stem_stride
        for blk in self.blocks:
            s *= blk.stride
        return s

    def with_width(self, mult: float) -> "ModelSpec":
        """Scale every channel count, rounding to a multiple of the SE reduction."""

        def scaled(c: int) -> int:
            return max(SE_REDUCTION, int(round(c * mult / SE_REDUCTION)) * SE_REDUCTION)

        return ModelSpec(
            stem_channels=scaled(self.stem_channels),
            stem_kernel=self.stem_kernel,
            stem_stride=self.stem_stride,
            blocks=[BlockSpec(scaled(b.in_channels), scaled(b.out_channels), b.kernel,
                              b.stride, b.use_se, b.activation) for b in self.blocks],
            neck_channels=scaled(self.neck_channels),
            num_classes=self.num_classes,
            in_channels=self.in_channels,
            width_mult=self.width_mult * mult,
            activation=self.activation,
        )

    def to_dict(self) -> dict:
        return {
            "stem_channels": self.stem_channels,
            "stem_kernel": self.stem_kernel,
            "stem_stride": self.stem_stride,
            "blocks": [[b.in_channels, b.out_channels, b.kernel, b.stride,
                        int(b.use_se), b.activation] for b in self.blocks],
            "neck_channels": self.neck_channels,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "width_mult": self.width_mult,
            "activation": self.activation,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(
            stem_channels=d["stem_channels"],
            stem_kernel=d["stem_kernel"],
            stem_stride=d["stem_stride"],
            blocks=[BlockSpec(b[0], b[1], b[2], b[3], bool(b[4]), b[5]) for b in d["blocks"]],
            neck_channels=d["neck_channels"],
            num_classes=d["num_classes"],
            in_channels=d["in_channels"],
            width_mult=d["width_mult"],
            activation=d["activation"],
        )


def student_spec() -> ModelSpec:
    """Default compact detector for single-channel pages at total stride 8."""
    return ModelSpec(
        stem_channels=16,
        blocks=[
            BlockSpec(16, 24, stride=2),
            BlockSpec(24, 32, stride=1),
            BlockSpec(32, 48, stride=2, use_se=True),
            BlockSpec(48, 64, stride=1, use_se=True),
            BlockSpec(64, 64, stride=1, use_se=True),
        ],
        neck_channels=64,
    )


def teacher_spec() -> ModelSpec:
    """Same topology at twice the width; strictly larger than the student."""
    return student_spec().with_width(2.0)


# ---------------------------------------------------------------------------
# parameter accounting


def dws_kernel_param_count(L: int, M: int, N: int) -> int:
    """Kernel weights of a depthwise-separable block (biases excluded)."""
    return L * L * 1 * M + 1 * 1 * M * N


def standard_kernel_param_count(L: int, M: int, N: int) -> int:
    return L * L * M * N


def dws_param_ratio(L: int, M: int, N: int) -> Fraction:
    """Exact weight ratio depthwise-separable / standard = 1/L^2 + 1/N."""
    return Fraction(dws_kernel_param_count(L, M, N), standard_kernel_param_count(L, M, N))


# ---------------------------------------------------------------------------
# layers


class Conv:
    def __init__(self, name: str, in_ch: int, out_ch: int, kernel: int, stride: int,
                 padding: int, groups: int, rng: np.random.Generator, params: Dict[str, Tensor],
                 dtype=np.float32, zero_init: bool = False):
        fan_in = (in_ch // groups) * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        shape = (out_ch, in_ch // groups, kernel, kernel)
        w = np.zeros(shape, dtype) if zero_init else rng.standard_normal(shape).astype(dtype) * dtype(std)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_ch, 1, 1), dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding
        self.groups = groups
        params[f"{name}.weight"] = self.weight
        params[f"{name}.bias"] = self.bias

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.stride, self.padding, self.groups)
        return T.add(y, self.bias)


class Linear:
    def __init__(self, name: str, in_dim: int, out_dim: int, rng: np.random.Generator,
                 params: Dict[str, Tensor], dtype=np.float32):
        std = np.sqrt(2.0 / in_dim)
        w = rng.standard_normal((out_dim, in_dim)).astype(dtype) * dtype(std)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype), requires_grad=True)
        params[f"{name}.weight"] = self.weight
        params[f"{name}.bias"] = self.bias

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class SEBlock:
    """Channel gate: pool -> FC squeeze -> relu -> FC restore -> sigmoid -> scale."""

    def __init__(self, name: str, channels: int, rng: np.random.Generator,
                 params: Dict[str, Tensor], reduction: int = SE_REDUCTION, dtype=np.float32):
        if channels % reduction != 0:
            raise ConfigError(f"SE channels {channels} not divisible by reduction {reduction}")
        self.channels = channels
        self.fc1 = Linear(f"{name}.fc1", channels, channels // reduction, rng, params, dtype)
        self.fc2 = Linear(f"{name}.fc2", channels // reduction, channels, rng, params, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        n, c = x.shape[0], x.shape[1]
        squeezed = T.reshape(T.global_avg_pool(x), (n, c))
        gates = T.sigmoid(self.fc2(T.relu(self.fc1(squeezed))))
        return T.mul(x, T.reshape(gates, (n, c, 1, 1)))


class DwsBlock:
    def __init__(self, name: str, spec: BlockSpec, rng: np.random.Generator,
                 params: Dict[str, Tensor], dtype=np.float32):
        spec.validate()
        self.spec = spec
        L = spec.kernel
        self.dw = Conv(f"{name}.dw", spec.in_channels, spec.in_channels, L, spec.stride,
                       (L - 1) // 2, spec.in_channels, rng, params, dtype)
        self.pw = Conv(f"{name}.pw", spec.in_channels, spec.out_channels, 1, 1, 0, 1,
                       rng, params, dtype)
        self.se = SEBlock(f"{name}.se", spec.out_channels, rng, params, dtype=dtype) \
            if spec.use_se else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"block expects {self.spec.in_channels} channels, got {x.shape[1]}")
        y = T.activation(self.dw(x), self.spec.activation)
        y = self.pw(y)
        if self.se is not None:
            y = self.se(y)
        return T.activation(y, self.spec.activation)

    def kernel_param_count(self) -> int:
        return int(self.dw.weight.size + self.pw.weight.size)


# ---------------------------------------------------------------------------
# the detector


HEAD_OBJ = 0  # channel layout of head_raw: [objectness, class logits..., tx, ty, tw, th]


class Model:
    """Backbone + neck + dense head with an ordered named-parameter store."""

    def __init__(self, spec: ModelSpec, seed: int, dtype=np.float32):
        spec.validate()
        self.spec = spec
        self.seed = seed
        self.params: Dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        self.stem = Conv("stem", spec.in_channels, spec.stem_channels, spec.stem_kernel,
                         spec.stem_stride, (spec.stem_kernel - 1) // 2, 1, rng, self.params, dtype)
        self.blocks = [DwsBlock(f"blocks.{i}", blk, rng, self.params, dtype)
                       for i, blk in enumerate(spec.blocks)]
        last = spec.blocks[-1].out_channels
        self.neck = Conv("neck", last, spec.neck_channels, 1, 1, 0, 1, rng, self.params, dtype)
        head_out = 1 + spec.num_classes + 4
        self.head_conv = Conv("head.conv", spec.neck_channels, spec.neck_channels, 3, 1, 1, 1,
                              rng, self.params, dtype)
        self.head_out = Conv("head.out", spec.neck_channels, head_out, 1, 1, 0, 1,
                             rng, self.params, dtype)

    @property
    def total_stride(self) -> int:
        return self.spec.total_stride

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Dict[str, Tensor]:
        return dict(self.params)

    def set_trainable(self, trainable: bool) -> None:
        for p in self.params.values():
            p.requires_grad = trainable

    def forward(self, images: Tensor) -> Tuple[Tensor, Tensor]:
        """Run the detector; returns (neck map, raw head map)."""
        if images.ndim != 4 or images.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected Nx{self.spec.in_channels}xHxW images, got {images.shape}")
        stride = self.total_stride
        if images.shape[2] % stride or images.shape[3] % stride:
            raise ShapeError(
                f"input {images.shape[2]}x{images.shape[3]} not a multiple of stride {stride}")
        y = T.activation(self.stem(images), self.spec.activation)
        for blk in self.blocks:
            y = blk(y)
        neck = T.activation(self.neck(y), self.spec.activation)
        head = self.head_out(T.activation(self.head_conv(neck), self.spec.activation))
        return neck, head

    def kernel_weight_counts(self) -> List[int]:
        """Enumerated dw+pw kernel weights per block (matches the closed form)."""
        return [blk.kernel_param_count() for blk in self.blocks]


def build_model(spec: ModelSpec, seed: int, dtype=np.float32) -> Model:
    return Model(spec, seed, dtype)


# ---------------------------------------------------------------------------
# decoding


@dataclass
class Detection:
    bbox: List[float]  # [x1, y1, w, h] in image pixels
    category_id: int
    score: float


def _nms_keep(dets: List[Detection], nms_iou: float) -> List[Detection]:
    kept: List[Detection] = []
    for d in dets:  # already sorted by score descending
        if all(iou(d.bbox, k.bbox) <= nms_iou for k in kept):
            kept.append(d)
    return kept


def decode_detections(head_raw, stride: int, image_size: Tuple[int, int],
                      score_threshold: float, nms_iou: float,
                      max_dets: int = 100) -> List[List[Detection]]:
    """Turn raw head maps into per-image detection lists.

    Per cell: box center = (cell center + offsets) * stride with exp-scaled
    width/height, class = argmax of the class logits, score = objectness *
    class probability. Greedy per-class NMS, then the top max_dets survive.
    """
    if not (0 <= score_threshold <= 1 and 0 <= nms_iou <= 1):
        raise ConfigError("thresholds must lie in [0, 1]")
    raw = head_raw.data if isinstance(head_raw, Tensor) else np.asarray(head_raw)
    n, ch, hn, wn = raw.shape
    num_classes = ch - 5
    img_w, img_h = image_size
    results: List[List[Detection]] = []
    cols = (np.arange(wn) + 0.5)[None, :]
    rows = (np.arange(hn) + 0.5)[:, None]
    for ni in range(n):
        hm = raw[ni].astype(np.float64)
        obj = 1 / (1 + np.exp(-np.clip(hm[HEAD_OBJ], -60, 60)))
        cls_logits = hm[1:1 + num_classes]
        shifted = cls_logits - cls_logits.max(axis=0, keepdims=True)
        ex = np.exp(shifted)
        probs = ex / ex.sum(axis=0, keepdims=True)
        best_cat = probs.argmax(axis=0)
        best_prob = probs.max(axis=0)
        score = np.minimum(obj * best_prob, np.nextafter(1.0, 0.0))
        tx, ty = hm[-4], hm[-3]
        tw, th = np.clip(hm[-2], -12, 12), np.clip(hm[-1], -12, 12)
        cx = (cols + tx) * stride
        cy = (rows + ty) * stride
        bw = np.exp(tw) * stride
        bh = np.exp(th) * stride
        dets: List[Detection] = []
        for i, j in zip(*np.nonzero(score > score_threshold)):
            box = clip_box([cx[i, j] - bw[i, j] / 2, cy[i, j] - bh[i, j] / 2,
                            bw[i, j], bh[i, j]], img_w, img_h)
            if box[2] <= 1e-3 or box[3] <= 1e-3:
                continue
            dets.append(Detection(box, int(best_cat[i, j]) + 1, float(score[i, j])))
        dets.sort(key=lambda d: -d.score)
        kept: List[Detection] = []
        for cat in sorted({d.category_id for d in dets}):
            kept.extend(_nms_keep([d for d in dets if d.category_id == cat], nms_iou))
        kept.sort(key=lambda d: -d.score)
        results.append(kept[:max_dets])
    return results
