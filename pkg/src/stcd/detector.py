"""Single-class anchor detector: backbone, heads, anchor matching, decoding.

The backbone is four 3x3 conv+relu blocks (1->16->32->64->64 channels, strides
1, 2, 2, 2), giving a 64x8x8 feature map at stride 8 for 64x64 input. A 3x3
classification head predicts one logit per anchor per cell and a 3x3
regression head predicts (dx, dy, dw, dh) per anchor, in channel order
``4 * anchor + k``.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .autodiff import (
    ParamGroup,
    RngStream,
    Tensor,
    adam_step,
    conv2d,
    focal_loss,
    he_normal,
    relu,
    smooth_l1,
)
from .checkpoint import Checkpoint
from .synthgen import Frame, GroundTruthBox

DW_CLAMP = math.log(1000.0 / 16)


@dataclass
class DetectorConfig:
    image_size: int = 64
    widths: tuple = (16, 32, 64, 64)
    strides: tuple = (1, 2, 2, 2)
    anchor_sizes: tuple = (12, 24, 40)
    pos_thr: float = 0.5
    neg_thr: float = 0.4
    score_thr: float = 0.05
    nms_iou: float = 0.5
    max_dets: int = 10
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1 / 9
    prior_prob: float = 0.01
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 20
    flip_augment: bool = True
    seed: int = 0

    @property
    def stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def feat_size(self) -> int:
        return self.image_size // self.stride

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_sizes)

    def validate(self):
        if not 0 <= self.neg_thr <= self.pos_thr <= 1:
            raise ValueError("need 0 <= neg_thr <= pos_thr <= 1")
        if not (0 <= self.score_thr <= 1 and 0 <= self.nms_iou <= 1):
            raise ValueError("score_thr and nms_iou must lie in [0, 1]")
        if self.image_size % self.stride:
            raise ValueError(f"image_size {self.image_size} not divisible by total stride {self.stride}")
        return self


@dataclass(frozen=True)
class Detection:
    box: tuple  # (x0, y0, x1, y1) image pixels
    score: float


def detector_shapes(cfg: DetectorConfig) -> dict:
    shapes = {}
    cin = 1
    for i, cout in enumerate(cfg.widths, start=1):
        shapes[f"backbone.conv{i}.w"] = (cout, cin, 3, 3)
        shapes[f"backbone.conv{i}.b"] = (cout,)
        cin = cout
    a = cfg.num_anchors
    shapes["head.cls.w"] = (a, cin, 3, 3)
    shapes["head.cls.b"] = (a,)
    shapes["head.reg.w"] = (4 * a, cin, 3, 3)
    shapes["head.reg.b"] = (4 * a,)
    return shapes


def init_detector_params(cfg: DetectorConfig, rng: RngStream) -> dict:
    params = {}
    for name, shape in detector_shapes(cfg).items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            data = he_normal(rng, shape, fan_in)
            if name.startswith("head."):
                data *= 0.1
        elif name == "head.cls.b":
            data = np.full(shape, -math.log((1 - cfg.prior_prob) / cfg.prior_prob), dtype=np.float32)
        else:
            data = np.zeros(shape, dtype=np.float32)
        params[name] = Tensor(data.astype(np.float32))
    return params


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def backbone(x: Tensor, params: dict, cfg: DetectorConfig | None = None) -> Tensor:
    """Backbone on normalized input [1,H,W] or [N,1,H,W]."""
    strides = (cfg or DetectorConfig()).strides
    h = x
    for i, s in enumerate(strides, start=1):
        h = relu(conv2d(h, params[f"backbone.conv{i}.w"], params[f"backbone.conv{i}.b"], stride=s, padding=1))
    return h


def frame_input(frame: Frame, cfg: DetectorConfig | None = None) -> Tensor:
    size = (cfg or DetectorConfig()).image_size
    if frame.pixels.shape != (size, size):
        raise ValueError(f"frame is {frame.width}x{frame.height}, detector expects {size}x{size}")
    return Tensor(frame.normalized()[None])


def backbone_features(frame: Frame, params: dict, cfg: DetectorConfig | None = None) -> np.ndarray:
    """Feature map F of one frame, shape (C, H/stride, W/stride)."""
    return backbone(frame_input(frame, cfg), params, cfg).data


def heads(feat: Tensor, params: dict) -> tuple:
    cls = conv2d(feat, params["head.cls.w"], params["head.cls.b"], stride=1, padding=1)
    reg = conv2d(feat, params["head.reg.w"], params["head.reg.b"], stride=1, padding=1)
    return cls, reg


def detect_heads(feat, params: dict) -> tuple:
    """Raw predictions for one feature map: cls logits (A,h,w), offsets (4A,h,w)."""
    f = feat if isinstance(feat, Tensor) else Tensor(np.asarray(feat, dtype=np.float32))
    if f.ndim != 3:
        raise ValueError(f"detect_heads expects a (C,H,W) feature map, got shape {f.shape}")
    if f.shape[0] != params["head.cls.w"].shape[1]:
        raise ValueError(f"feature channels {f.shape[0]} != head input channels {params['head.cls.w'].shape[1]}")
    cls, reg = heads(f, params)
    return cls.data, reg.data


# ---------------------------------------------------------------------------
# anchors and matching
# ---------------------------------------------------------------------------


@dataclass
class AnchorSet:
    boxes: np.ndarray  # (A, h, w, 4) as x0, y0, x1, y1
    stride: int

    @property
    def num_anchors(self) -> int:
        return self.boxes.shape[0]

    def flat(self) -> np.ndarray:
        return self.boxes.reshape(-1, 4)


def make_anchors(feat_h: int, feat_w: int, stride: int, sizes) -> AnchorSet:
    cy = (np.arange(feat_h) + 0.5) * stride
    cx = (np.arange(feat_w) + 0.5) * stride
    boxes = np.empty((len(sizes), feat_h, feat_w, 4))
    for a, s in enumerate(sizes):
        boxes[a, :, :, 0] = cx[None, :] - s / 2
        boxes[a, :, :, 1] = cy[:, None] - s / 2
        boxes[a, :, :, 2] = cx[None, :] + s / 2
        boxes[a, :, :, 3] = cy[:, None] + s / 2
    return AnchorSet(boxes, stride)


def default_anchors(cfg: DetectorConfig | None = None) -> AnchorSet:
    cfg = cfg or DetectorConfig()
    return make_anchors(cfg.feat_size, cfg.feat_size, cfg.stride, cfg.anchor_sizes)


def _as_box(b) -> tuple:
    if isinstance(b, GroundTruthBox):
        return (b.x0, b.y0, b.x1, b.y1)
    if isinstance(b, Detection):
        return b.box
    return tuple(b)


def iou(a, b) -> float:
    """Intersection over union of two (x0, y0, x1, y1) boxes."""
    ax0, ay0, ax1, ay1 = _as_box(a)
    bx0, by0, bx1, by1 = _as_box(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def encode_offsets(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    gw = gts[:, 2] - gts[:, 0]
    gh = gts[:, 3] - gts[:, 1]
    gcx = gts[:, 0] + gw / 2
    gcy = gts[:, 1] + gh / 2
    return np.stack([(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_offsets(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    cx = anchors[:, 0] + aw / 2 + deltas[:, 0] * aw
    cy = anchors[:, 1] + ah / 2 + deltas[:, 1] * ah
    w = aw * np.exp(np.minimum(deltas[:, 2], DW_CLAMP))
    h = ah * np.exp(np.minimum(deltas[:, 3], DW_CLAMP))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


@dataclass
class AnchorTargets:
    labels: np.ndarray  # (A, h, w): 1 positive, 0 negative, -1 ignored
    offsets: np.ndarray  # (4A, h, w), zero where not positive


def assign_anchors(gts, anchors: AnchorSet, pos_thr: float = 0.5, neg_thr: float = 0.4) -> AnchorTargets:
    if not 0 <= neg_thr <= pos_thr <= 1:
        raise ValueError(f"need 0 <= neg_thr <= pos_thr <= 1, got {neg_thr}, {pos_thr}")
    a, h, w, _ = anchors.boxes.shape
    flat = anchors.flat()
    labels = np.zeros(flat.shape[0], dtype=np.int8)
    offsets = np.zeros((flat.shape[0], 4))
    gt = np.array([_as_box(g) for g in gts], dtype=np.float64).reshape(-1, 4)
    if len(gt):
        if np.any(gt[:, 2] <= gt[:, 0]) or np.any(gt[:, 3] <= gt[:, 1]):
            raise ValueError("malformed ground-truth box (x1 <= x0 or y1 <= y0)")
        ious = iou_matrix(flat, gt)
        best_gt = ious.argmax(axis=1)
        best_iou = ious.max(axis=1)
        labels[(best_iou >= neg_thr) & (best_iou < pos_thr)] = -1
        pos = best_iou >= pos_thr
        # the best anchor of each GT is positive regardless of threshold
        for g in range(len(gt)):
            k = int(ious[:, g].argmax())
            pos[k] = True
            best_gt[k] = g
        labels[pos] = 1
        offsets[pos] = encode_offsets(flat[pos], gt[best_gt[pos]])
    offsets = offsets.reshape(a, h, w, 4).transpose(0, 3, 1, 2).reshape(4 * a, h, w)
    return AnchorTargets(labels.reshape(a, h, w), offsets.astype(np.float32))


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def _sigmoid(z):
    return np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))


def decode_and_nms(
    raw: tuple,
    anchors: AnchorSet,
    score_thr: float = 0.05,
    nms_iou: float = 0.5,
    max_dets: int = 10,
    image_size: int | None = None,
) -> list:
    """Scores via sigmoid, threshold, greedy NMS in (score desc, x0 asc, y0 asc) order."""
    cls, reg = raw
    a = anchors.num_anchors
    scores = _sigmoid(np.asarray(cls, dtype=np.float64)).reshape(-1)
    deltas = np.asarray(reg, dtype=np.float64).reshape(a, 4, *reg.shape[1:]).transpose(0, 2, 3, 1).reshape(-1, 4)
    keep = scores > score_thr
    if not np.any(keep):
        return []
    boxes = decode_offsets(anchors.flat()[keep], deltas[keep])
    scores = scores[keep]
    if image_size is not None:
        boxes = np.clip(boxes, 0, image_size)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, scores = boxes[valid], scores[valid]
    order = np.lexsort((boxes[:, 1], boxes[:, 0], -scores))
    boxes, scores = np.ascontiguousarray(boxes[order]), scores[order]
    kept = kernels.greedy_nms(boxes, float(nms_iou), int(max_dets))
    return [Detection(tuple(float(v) for v in boxes[i]), float(scores[i])) for i in kept]


def nms_detections(dets: list, nms_iou: float, max_dets: int = 1 << 30) -> list:
    """Greedy NMS over ready-made detections (same ordering rule as decode_and_nms)."""
    if not dets:
        return []
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets])
    order = np.lexsort((boxes[:, 1], boxes[:, 0], -scores))
    kept = kernels.greedy_nms(np.ascontiguousarray(boxes[order]), float(nms_iou), int(max_dets))
    return [dets[order[i]] for i in kept]


def detect_from_features(feat, params: dict, cfg: DetectorConfig | None = None, anchors: AnchorSet | None = None) -> list:
    cfg = cfg or DetectorConfig()
    anchors = anchors or default_anchors(cfg)
    return decode_and_nms(
        detect_heads(feat, params), anchors, cfg.score_thr, cfg.nms_iou, cfg.max_dets, image_size=cfg.image_size
    )


def detect_frame(frame: Frame, params: dict, cfg: DetectorConfig | None = None, anchors: AnchorSet | None = None) -> list:
    """Framewise inference: backbone_features -> detect_heads -> decode_and_nms."""
    return detect_from_features(backbone_features(frame, params, cfg), params, cfg, anchors)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _batch_targets(frames, anchors: AnchorSet, cfg: DetectorConfig, flips):
    labels, offsets, images = [], [], []
    size = cfg.image_size
    for fr, flip in zip(frames, flips):
        img = fr.normalized()
        boxes = [_as_box(b) for b in fr.boxes or []]
        if flip:
            img = img[:, ::-1]
            boxes = [(size - x1, y0, size - x0, y1) for x0, y0, x1, y1 in boxes]
        t = assign_anchors(boxes, anchors, cfg.pos_thr, cfg.neg_thr)
        labels.append(t.labels)
        offsets.append(t.offsets)
        images.append(img[None])
    return np.stack(images).astype(np.float32), np.stack(labels), np.stack(offsets)


def detection_loss(params: dict, images, labels, offsets, cfg: DetectorConfig) -> Tensor:
    feat = backbone(Tensor(images), params, cfg)
    cls, reg = heads(feat, params)
    valid = (labels >= 0).astype(np.float32)
    pos = (labels == 1).astype(np.float32)
    npos = max(1.0, float(pos.sum()))
    cls_loss = focal_loss(cls, (labels == 1).astype(np.float32), cfg.focal_alpha, cfg.focal_gamma, weights=valid)
    # weighted mean over valid anchors -> sum normalised by positives
    cls_loss = cls_loss * (float(valid.sum()) / npos)
    reg_w = np.repeat(pos, 4, axis=1)
    if reg_w.sum() > 0:
        return cls_loss + smooth_l1(reg, offsets, cfg.smooth_l1_beta, weights=reg_w) * 4.0
    return cls_loss


def train_detector(stills: list, cfg: DetectorConfig | None = None, log=None) -> Checkpoint:
    """Supervised training on labeled stills; returns a detector-only checkpoint."""
    cfg = (cfg or DetectorConfig()).validate()
    if not stills:
        raise ValueError("train_detector needs at least one labeled still")
    rng = RngStream(cfg.seed)
    params = init_detector_params(cfg, rng.child("init"))
    for p in params.values():
        p.requires_grad = True
    groups = [ParamGroup(k, v) for k, v in params.items()]
    anchors = default_anchors(cfg)
    order_rng = rng.child("order").gen
    history = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(stills))
        flips = order_rng.uniform(size=len(stills)) < 0.5 if cfg.flip_augment else np.zeros(len(stills), bool)
        losses = []
        for start in range(0, len(stills), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            images, labels, offsets = _batch_targets([stills[i] for i in idx], anchors, cfg, flips[idx])
            for p in params.values():
                p.grad = None
            loss = detection_loss(params, images, labels, offsets, cfg)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite detector loss at epoch {epoch}")
            loss.backward()
            for g in groups:
                adam_step(g, cfg.lr)
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
        if log:
            log(f"detector epoch {epoch}: loss {history[-1]:.4f} ({time.perf_counter() - t0:.1f}s)")
    tensors = {k: v.data.copy() for k, v in params.items()}
    meta = {"kind": "detector", "epochs": cfg.epochs, "seed": cfg.seed, "loss_history": history, "config": asdict(cfg)}
    return Checkpoint(tensors=tensors, meta=meta)


def detector_params(ckpt: Checkpoint, cfg: DetectorConfig | None = None) -> dict:
    cfg = cfg or DetectorConfig()
    ckpt.validate(detector_shapes(cfg))
    return {k: Tensor(np.asarray(v, dtype=np.float32)) for k, v in ckpt.subset(("backbone.", "head.")).items()}
