"""Training drivers: plain detector training, teacher-to-student
distillation, and batch prediction.

The per-step metrics log is an append-only TSV of
(step, L_original, L_fea, L_at, L_global, L_total); the reported total is
the exact sum of the logged components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .backbone import Detection, Model, ModelSpec, build_model, decode_detections, \
    student_spec, teacher_spec
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Annotation, Batch, PageRecord, batch_iterator, letterbox_pixels
from .distill import Adapter, DistillConfig, GlobalBlock, total_distill_loss
from .optim import make_optimizer
from .tensor import ConfigError, Tensor


class DivergenceError(RuntimeError):
    """Training loss became NaN/Inf; the run is aborted."""


@dataclass
class TrainConfig:
    model: str = "student"              # "teacher" or "student"
    epochs: int = 10
    batch_size: int = 8
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    seed: int = 0
    input_size: int = 64
    distill: Optional[DistillConfig] = None
    obj_weight: float = 1.0
    cls_weight: float = 1.0
    box_weight: float = 1.0

    def validate(self) -> None:
        if self.model not in ("teacher", "student"):
            raise ConfigError(f"model must be 'teacher' or 'student', got '{self.model}'")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer '{self.optimizer}'")

    def spec(self) -> ModelSpec:
        return teacher_spec() if self.model == "teacher" else student_spec()


@dataclass
class MetricsRow:
    step: int
    l_original: float
    l_fea: float
    l_at: float
    l_global: float

    @property
    def l_total(self) -> float:
        return self.l_original + self.l_fea + self.l_at + self.l_global

    def to_tsv(self) -> str:
        return "\t".join([str(self.step), repr(self.l_original), repr(self.l_fea),
                          repr(self.l_at), repr(self.l_global), repr(self.l_total)])


@dataclass
class TrainResult:
    model: Model
    metrics: List[MetricsRow] = field(default_factory=list)


# ---------------------------------------------------------------------------
# target assignment and the original detection loss


def build_targets(annotations: Sequence[Sequence[Annotation]], stride: int,
                  hn: int, wn: int, num_classes: int):
    """Per-cell targets: the cell holding each gt center is positive.

    When two centers share a cell the smaller-area box wins. Returns
    (objectness, class one-hot, box offsets, positive mask) as numpy maps.
    """
    n = len(annotations)
    obj = np.zeros((n, 1, hn, wn), dtype=np.float32)
    cls = np.zeros((n, num_classes, hn, wn), dtype=np.float32)
    box = np.zeros((n, 4, hn, wn), dtype=np.float32)
    pos = np.zeros((n, 1, hn, wn), dtype=np.float32)
    for ni, anns in enumerate(annotations):
        ordered = sorted(anns, key=lambda a: -(a.bbox[2] * a.bbox[3]))
        for ann in ordered:
            x, y, w, h = ann.bbox
            if w < 1e-3 or h < 1e-3:
                continue
            cx, cy = x + w / 2, y + h / 2
            if not (0 <= cx <= wn * stride and 0 <= cy <= hn * stride):
                raise ValueError(f"gt center ({cx}, {cy}) outside the image frame")
            j = min(int(cx / stride), wn - 1)
            i = min(int(cy / stride), hn - 1)
            obj[ni, 0, i, j] = 1.0
            pos[ni, 0, i, j] = 1.0
            cls[ni, :, i, j] = 0.0
            cls[ni, ann.category_id - 1, i, j] = 1.0
            box[ni, :, i, j] = (cx / stride - (j + 0.5), cy / stride - (i + 0.5),
                                math.log(w / stride), math.log(h / stride))
    return obj, cls, box, pos


def detection_loss(head_raw: Tensor, annotations: Sequence[Sequence[Annotation]],
                   stride: int, num_classes: int,
                   weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)) -> Tuple[Tensor, Dict[str, float]]:
    """Objectness BCE over all cells + class cross-entropy and mean-L1 box
    regression over positive cells, with configurable term weights."""
    n, ch, hn, wn = head_raw.shape
    if ch != 1 + num_classes + 4:
        raise ConfigError(f"head has {ch} channels, expected {1 + num_classes + 4}")
    obj_t, cls_t, box_t, pos = build_targets(annotations, stride, hn, wn, num_classes)
    n_pos = float(pos.sum())
    w_obj, w_cls, w_box = weights

    obj_logits = T.take_channels(head_raw, 0, 1)
    l_obj = T.bce_with_logits(obj_logits, Tensor(obj_t))
    loss = T.scale(l_obj, w_obj)
    parts = {"objectness": float(l_obj.item()), "class": 0.0, "box": 0.0}
    if n_pos > 0:
        cls_logits = T.take_channels(head_raw, 1, 1 + num_classes)
        logp = T.log_softmax_over(cls_logits, (1,))
        picked = T.mul(logp, Tensor(cls_t * pos))
        l_cls = T.scale(T.reduce(picked, "sum"), -1.0 / n_pos)
        box_pred = T.take_channels(head_raw, 1 + num_classes, ch)
        l1 = T.mul(T.absolute(T.sub(box_pred, Tensor(box_t))), Tensor(np.broadcast_to(pos, box_t.shape).copy()))
        l_box = T.scale(T.reduce(l1, "sum"), 1.0 / (4.0 * n_pos))
        loss = T.add(loss, T.add(T.scale(l_cls, w_cls), T.scale(l_box, w_box)))
        parts["class"] = float(l_cls.item())
        parts["box"] = float(l_box.item())
    return loss, parts


# ---------------------------------------------------------------------------
# drivers


def _check_finite(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"loss is not finite at step {step}; aborting")


def _write_outputs(out_dir, model: Model, metrics: List[MetricsRow]) -> None:
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "checkpoint.edoc", model)
    lines = [m.to_tsv() for m in metrics]
    (out_dir / "metrics.tsv").write_text("\n".join(lines) + ("\n" if lines else ""),
                                         encoding="utf-8")


def train(records: Sequence[PageRecord], config: TrainConfig, out_dir=None,
          model: Optional[Model] = None, images_dir=None) -> TrainResult:
    """Plain detector training on the original loss; deterministic per seed."""
    config.validate()
    if model is None:
        model = build_model(config.spec(), config.seed)
    stride = model.total_stride
    size = config.input_size
    if size % stride:
        raise ConfigError(f"input size {size} not a multiple of total stride {stride}")
    opt = make_optimizer(model.parameters(), config.optimizer, config.lr, config.momentum)
    metrics: List[MetricsRow] = []
    step = 0
    for epoch in range(config.epochs):
        for batch in batch_iterator(records, config.batch_size, (size, size),
                                    seed=[config.seed, epoch], images_dir=images_dir,
                                    total_stride=stride):
            _, head = model.forward(Tensor(batch.images))
            loss, _ = detection_loss(head, batch.annotations, stride,
                                     model.spec.num_classes,
                                     (config.obj_weight, config.cls_weight, config.box_weight))
            value = float(loss.item())
            _check_finite(value, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            metrics.append(MetricsRow(step, value, 0.0, 0.0, 0.0))
            step += 1
    _write_outputs(out_dir, model, metrics)
    return TrainResult(model, metrics)


@dataclass
class DistillResult:
    student: Model
    metrics: List[MetricsRow]
    adapter: Adapter
    global_block: GlobalBlock


def distill(teacher: Union[Model, str, Path], records: Sequence[PageRecord],
            config: TrainConfig, out_dir=None, student: Optional[Model] = None,
            images_dir=None) -> DistillResult:
    """Distillation per total = original + focal + global.

    The teacher runs inference-only and its parameters are never updated;
    the optimizer covers the student, the channel adapter, and the shared
    global block.
    """
    config.validate()
    if config.distill is None:
        raise ConfigError("distill() needs config.distill hyperparameters")
    config.distill.validate()
    if not isinstance(teacher, Model):
        teacher = load_checkpoint(teacher)
    teacher.set_trainable(False)
    if student is None:
        student = build_model(student_spec(), config.seed)
    stride = student.total_stride
    if teacher.total_stride != stride:
        raise ConfigError(
            f"teacher stride {teacher.total_stride} != student stride {stride}")
    size = config.input_size
    if size % stride:
        raise ConfigError(f"input size {size} not a multiple of total stride {stride}")
    c_s, c_t = student.spec.neck_channels, teacher.spec.neck_channels
    adapter = Adapter(c_s, c_t, rng=np.random.default_rng([config.seed, 101]))
    block = GlobalBlock(c_t, rng=np.random.default_rng([config.seed, 102]))
    trainable = student.parameters() + adapter.parameters() + block.parameters()
    opt = make_optimizer(trainable, config.optimizer, config.lr, config.momentum)

    metrics: List[MetricsRow] = []
    step = 0
    for epoch in range(config.epochs):
        for batch in batch_iterator(records, config.batch_size, (size, size),
                                    seed=[config.seed, epoch], images_dir=images_dir,
                                    total_stride=stride):
            images = Tensor(batch.images)
            t_neck, _ = teacher.forward(images)
            s_neck, s_head = student.forward(images)
            det_loss, _ = detection_loss(s_head, batch.annotations, stride,
                                         student.spec.num_classes,
                                         (config.obj_weight, config.cls_weight,
                                          config.box_weight))
            boxes = [[a.bbox for a in anns] for anns in batch.annotations]
            bd = total_distill_loss(t_neck, s_neck, boxes, config.distill,
                                    adapter, block, stride)
            total = T.add(T.add(det_loss, bd.focal), bd.global_)
            row = MetricsRow(step, float(det_loss.item()), float(bd.feature.item()),
                             float(bd.attention.item()), float(bd.global_.item()))
            _check_finite(row.l_total, step)
            opt.zero_grad()
            total.backward()
            opt.step()
            metrics.append(row)
            step += 1
    _write_outputs(out_dir, student, metrics)
    return DistillResult(student, metrics, adapter, block)


def predict(model: Union[Model, str, Path], images: Sequence[Union[np.ndarray, str, Path]],
            input_size: int = 64, score_threshold: float = 0.25, nms_iou: float = 0.5,
            max_dets: int = 100) -> List[List[Detection]]:
    """Decode detections for each image, mapped back to original pixels."""
    if not isinstance(model, Model):
        model = load_checkpoint(model)
    stride = model.total_stride
    if input_size % stride:
        raise ConfigError(f"input size {input_size} not a multiple of stride {stride}")
    from .images import read_image

    results: List[List[Detection]] = []
    for item in images:
        pixels = item if isinstance(item, np.ndarray) else read_image(item)
        h, w = pixels.shape
        frame, tf = letterbox_pixels(pixels, (input_size, input_size))
        _, head = model.forward(Tensor(frame[None, None]))
        dets = decode_detections(head.data, stride, (input_size, input_size),
                                 score_threshold, nms_iou, max_dets)[0]
        mapped = []
        for det in dets:
            box = tf.invert_box(det.bbox)
            box = [max(0.0, min(box[0], w)), max(0.0, min(box[1], h)),
                   box[2], box[3]]
            box[2] = min(box[2], w - box[0])
            box[3] = min(box[3], h - box[1])
            if box[2] > 1e-3 and box[3] > 1e-3:
                mapped.append(Detection(box, det.category_id, det.score))
        results.append(mapped)
    return results
