"""Focal and global feature distillation over teacher/student neck maps.

The focal side weights a squared feature-mimicry error by a foreground
binary mask, a per-box scale mask, and the teacher's spatial/channel
attention, and adds an L1 attention-mimicry term. The global side compares
pixel-relation summaries of both maps computed by one shared trainable
context block. Teacher quantities never receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .backbone import Conv
from .boxes import clip_box
from .tensor import ConfigError, ShapeError, Tensor


@dataclass
class DistillConfig:
    """Loss hyperparameters: softmax temperature and the four term weights."""

    temperature: float = 0.5
    alpha: float = 1.0   # foreground feature weight
    beta: float = 0.5    # background feature weight
    gamma: float = 0.1   # attention-mimicry weight
    lam: float = 0.5     # global-relation weight

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        for name in ("alpha", "beta", "gamma", "lam"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass
class MaskSet:
    """Per-image foreground/scale masks plus the teacher attention used as weights."""

    binary: np.ndarray            # H x W in {0, 1}
    scale: np.ndarray             # H x W, positive
    spatial_attention: np.ndarray  # H x W, sums to H*W
    channel_attention: np.ndarray  # length C, sums to C


def _cell_span(lo: float, size: float, limit: int) -> Tuple[int, int]:
    """Indices whose centers fall in [lo, lo+size); empty span may result."""
    first = int(np.ceil(lo - 0.5))
    last = int(np.ceil(lo + size - 0.5)) - 1
    return max(first, 0), min(last, limit - 1)


def _footprint(box: Sequence[float], height: int, width: int) -> Tuple[slice, slice]:
    """Raster footprint of a box; boxes thinner than a cell claim their center cell."""
    x1, y1, w, h = box
    i0, i1 = _cell_span(y1, h, height)
    j0, j1 = _cell_span(x1, w, width)
    if i0 > i1:
        ci = min(max(int(y1 + h / 2), 0), height - 1)
        i0 = i1 = ci
    if j0 > j1:
        cj = min(max(int(x1 + w / 2), 0), width - 1)
        j0 = j1 = cj
    return slice(i0, i1 + 1), slice(j0, j1 + 1)


def binary_mask(gt_boxes: Sequence[Sequence[float]], height: int, width: int) -> np.ndarray:
    """1 where a cell center lies inside any box, else 0."""
    mask = np.zeros((height, width), dtype=np.float32)
    for box in gt_boxes:
        rows, cols = _footprint(box, height, width)
        mask[rows, cols] = 1.0
    return mask


def scale_mask(gt_boxes: Sequence[Sequence[float]], height: int, width: int) -> np.ndarray:
    """Foreground cells get 1/(cells of their smallest covering box), background 1/N_bg.

    Box area is the rasterized cell count, so the foreground mass of a
    disjoint box sums to exactly 1. With no background cells the background
    value is never used.
    """
    mask = np.zeros((height, width), dtype=np.float32)
    covered = np.zeros((height, width), dtype=bool)
    boxes = []
    for idx, box in enumerate(gt_boxes):
        rows, cols = _footprint(box, height, width)
        cells = (rows.stop - rows.start) * (cols.stop - cols.start)
        boxes.append((cells, box[2] * box[3], idx, rows, cols))
    # Biggest first, so the smallest covering box overwrites shared cells last.
    for cells, _, _, rows, cols in sorted(boxes, key=lambda b: (-b[0], -b[1], -b[2])):
        mask[rows, cols] = 1.0 / cells
        covered[rows, cols] = True
    n_bg = int((~covered).sum())
    if n_bg > 0:
        mask[~covered] = 1.0 / n_bg
    return mask


def _as_batched(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), False
    if x.ndim == 4:
        return x, True
    raise ShapeError(f"expected CxHxW or NxCxHxW feature map, got {x.shape}")


def attention_maps(feat: Tensor, temperature: float):
    """Absolute-average summaries and their temperature-softmax masks.

    Returns (G_S, G_C, A_S, A_C). The spatial mask is H*W times a softmax
    over all cells, the channel mask C times a softmax over channels, so
    they sum to H*W and C respectively.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    x, batched = _as_batched(feat)
    n, c, h, w = x.shape
    g_s = T.reduce(x, "abs_mean", (1,))                       # N x H x W
    g_c = T.reduce(x, "abs_mean", (2, 3))                     # N x C
    a_s = T.scale(T.softmax_over(T.scale(g_s, 1.0 / temperature), (1, 2)), float(h * w))
    a_c = T.scale(T.softmax_over(T.scale(g_c, 1.0 / temperature), (1,)), float(c))
    if not batched:
        return (T.reshape(g_s, (h, w)), T.reshape(g_c, (c,)),
                T.reshape(a_s, (h, w)), T.reshape(a_c, (c,)))
    return g_s, g_c, a_s, a_c


def _const_weight(value, shape, dtype) -> Tensor:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    return Tensor(arr.reshape(shape).astype(dtype, copy=False))


def focal_feature_loss(teacher_feat: Tensor, student_feat: Tensor, adapt,
                       binary: np.ndarray, scale: np.ndarray,
                       spatial_att, channel_att,
                       alpha: float, beta: float) -> Tensor:
    """Mask- and attention-weighted squared mimicry error, summed per map.

    Weighting uses the teacher's masks only; gradients reach the adapted
    student features and the adapter parameters, never the teacher.
    """
    t_feat, _ = _as_batched(teacher_feat.detach())
    s_raw, _ = _as_batched(student_feat)
    adapted = adapt(s_raw)
    if adapted.shape[1] != t_feat.shape[1]:
        raise ShapeError(
            f"adapted student has {adapted.shape[1]} channels, teacher {t_feat.shape[1]}")
    if adapted.shape != t_feat.shape:
        raise ShapeError(f"feature shapes differ: {adapted.shape} vs {t_feat.shape}")
    n, c, h, w = t_feat.shape
    dt = t_feat.dtype
    m = _const_weight(binary, (-1, 1, h, w), dt)
    weights = _const_weight(scale, (-1, 1, h, w), dt)
    a_s = _const_weight(spatial_att, (-1, 1, h, w), dt)
    a_c = _const_weight(channel_att, (-1, c, 1, 1), dt)
    delta = T.sub(t_feat, adapted)
    weighted_sq = T.mul(T.mul(T.mul(T.mul(delta, delta), weights), a_s), a_c)
    fg = T.reduce(T.mul(weighted_sq, m), "sum", (1, 2, 3))
    bg = T.reduce(T.mul(weighted_sq, T.sub(Tensor(np.ones(m.shape, dt)), m)), "sum", (1, 2, 3))
    per_image = T.add(T.scale(fg, alpha), T.scale(bg, beta))
    return T.reduce(per_image, "mean")


def attention_loss(teacher_att: Tuple[Tensor, Tensor], student_att: Tuple[Tensor, Tensor],
                   gamma: float) -> Tensor:
    """Mean-L1 mismatch of the spatial and channel attention masks, weighted."""
    t_s, t_c = (a.detach() if isinstance(a, Tensor) else Tensor(a) for a in teacher_att)
    s_s, s_c = student_att
    if t_s.shape != s_s.shape or t_c.shape != s_c.shape:
        raise ShapeError("attention mask shapes differ between teacher and student")
    spatial = T.reduce(T.sub(t_s, s_s), "abs_mean")
    channel = T.reduce(T.sub(t_c, s_c), "abs_mean")
    return T.scale(T.add(spatial, channel), gamma)


class Adapter:
    """Channel alignment f: identity, or a trainable 1x1 conv student->teacher."""

    def __init__(self, student_channels: int, teacher_channels: int,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        self.params: Dict[str, Tensor] = {}
        if student_channels == teacher_channels:
            self.conv = None
        else:
            if rng is None:
                raise ConfigError("channel counts differ: adapter needs an rng to initialize")
            self.conv = Conv("adapt", student_channels, teacher_channels, 1, 1, 0, 1,
                             rng, self.params, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x if self.conv is None else self.conv(x)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())


class GlobalBlock:
    """Pixel-relation block R(F) = F + W_v2(ReLU(LN(W_v1(context)))).

    The context pools features over all pixels with softmax weights from a
    1x1 key conv. One instance is shared between teacher and student
    branches and is trainable.
    """

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        if channels < 2:
            raise ConfigError("global block needs at least 2 channels")
        self.channels = channels
        hidden = channels // 2
        self.params: Dict[str, Tensor] = {}
        self.key = Conv("gc.key", channels, 1, 1, 1, 0, 1, rng, self.params, dtype)
        self.value1 = Conv("gc.value1", channels, hidden, 1, 1, 0, 1, rng, self.params, dtype)
        # Zero-init output conv: the block starts as the identity residual.
        self.value2 = Conv("gc.value2", hidden, channels, 1, 1, 0, 1, rng, self.params,
                           dtype, zero_init=True)
        self.ln_gain = Tensor(np.ones((hidden, 1, 1), dtype), requires_grad=True)
        self.ln_bias = Tensor(np.zeros((hidden, 1, 1), dtype), requires_grad=True)
        self.params["gc.ln.gain"] = self.ln_gain
        self.params["gc.ln.bias"] = self.ln_bias

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def __call__(self, feat: Tensor) -> Tensor:
        x, batched = _as_batched(feat)
        if x.shape[1] != self.channels:
            raise ShapeError(f"global block built for {self.channels} channels, got {x.shape[1]}")
        logits = self.key(x)                                   # N x 1 x H x W
        weights = T.softmax_over(logits, (2, 3))
        context = T.reduce(T.mul(weights, x), "sum", (2, 3), keepdims=True)  # N x C x 1 x 1
        hidden = T.layer_norm(self.value1(context), 3, 1e-5, self.ln_gain, self.ln_bias)
        out = T.add(x, self.value2(T.relu(hidden)))
        return out if batched else T.reshape(out, out.shape[1:])


def global_relation(feat: Tensor, block: GlobalBlock) -> Tensor:
    return block(feat)


def global_loss(teacher_feat: Tensor, student_adapted: Tensor, block: GlobalBlock,
                lam: float) -> Tensor:
    """Squared difference of the shared relation block applied to both maps."""
    t_feat, _ = _as_batched(teacher_feat.detach())
    s_feat, _ = _as_batched(student_adapted)
    if t_feat.shape != s_feat.shape:
        raise ShapeError(f"global loss shapes differ: {t_feat.shape} vs {s_feat.shape}")
    delta = T.sub(block(t_feat), block(s_feat))
    per_image = T.reduce(T.mul(delta, delta), "sum", (1, 2, 3))
    return T.scale(T.reduce(per_image, "mean"), lam)


@dataclass
class DistillBreakdown:
    """All loss terms plus the per-image masks for inspection."""

    feature: Tensor
    attention: Tensor
    focal: Tensor
    global_: Tensor
    masks: List[MaskSet] = field(default_factory=list)


def total_distill_loss(teacher_neck: Tensor, student_neck: Tensor,
                       gt_boxes_per_image: Sequence[Sequence[Sequence[float]]],
                       config: DistillConfig, adapter: Adapter, block: GlobalBlock,
                       stride: int = 1) -> DistillBreakdown:
    """Focal (feature + attention) and global losses over a batch of necks.

    Boxes arrive in image pixels and are mapped to neck cells by the total
    stride. Teacher activations are gradient-blocked throughout.
    """
    config.validate()
    t_neck, _ = _as_batched(teacher_neck)
    s_neck, _ = _as_batched(student_neck)
    if t_neck.shape[0] != s_neck.shape[0] or t_neck.shape[2:] != s_neck.shape[2:]:
        raise ShapeError(f"necks misaligned: teacher {t_neck.shape}, student {s_neck.shape}")
    if len(gt_boxes_per_image) != t_neck.shape[0]:
        raise ShapeError("one gt box list per image is required")
    t_neck = t_neck.detach()
    n, c_t, h, w = t_neck.shape

    binaries = np.empty((n, h, w), dtype=np.float32)
    scales = np.empty((n, h, w), dtype=np.float32)
    for i, boxes in enumerate(gt_boxes_per_image):
        cells = [clip_box([v / stride for v in box], w, h) for box in boxes]
        binaries[i] = binary_mask(cells, h, w)
        scales[i] = scale_mask(cells, h, w)

    _, _, t_as, t_ac = attention_maps(t_neck, config.temperature)
    adapted = adapter(s_neck)
    if adapted.shape[1] != c_t:
        raise ShapeError(f"adapter emits {adapted.shape[1]} channels, teacher has {c_t}")
    _, _, s_as, s_ac = attention_maps(adapted, config.temperature)

    identity = _IdentityAdapt()
    l_fea = focal_feature_loss(t_neck, adapted, identity, binaries, scales,
                               t_as.data, t_ac.data, config.alpha, config.beta)
    l_at = attention_loss((t_as, t_ac), (s_as, s_ac), config.gamma)
    l_focal = T.add(l_fea, l_at)
    l_global = global_loss(t_neck, adapted, block, config.lam)

    masks = [MaskSet(binaries[i].copy(), scales[i].copy(),
                     t_as.data[i].copy(), t_ac.data[i].copy()) for i in range(n)]
    return DistillBreakdown(l_fea, l_at, l_focal, l_global, masks)


class _IdentityAdapt:
    def __call__(self, x: Tensor) -> Tensor:
        return x
