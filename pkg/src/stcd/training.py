"""Semi-supervised training of the temporal networks on unlabeled video.

The detector backbone is frozen: its features for both frames of a pair are
the regression targets. Motion and warp networks are warmed up on the
feature loss alone, then the decision network joins and regresses each
pair's correlation score.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import ParamGroup, RngStream, Tensor, adam_step, derive_seed
from .checkpoint import Checkpoint
from .detector import DetectorConfig, backbone, detector_params
from .synthgen import Frame, VideoSequence
from .temporal import (
    TemporalConfig,
    bilinear_warp_features,
    correlation_tensor,
    decision_loss,
    decision_net,
    feature_loss,
    init_temporal_params,
    motion_net,
    temporal_shapes,
    warp_net,
)


@dataclass
class TrainConfig:
    key_fraction: float = 1 / 3
    max_offset: int = 20
    warmup_epochs: int = 10
    total_epochs: int = 30
    batch_size: int = 16
    lr_decision: float = 1e-3
    lr_motion: float = 1e-3
    lr_warp: float = 1e-3
    lr_decay: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warp_kind: str = "warpnet"  # or "bilinear" for the classic-warp baseline
    flow_epochs: int = 2
    lr_flow: float = 1e-3
    seed: int = 0

    def validate(self):
        if not 0 < self.key_fraction <= 1:
            raise ValueError(f"key_fraction must lie in (0, 1], got {self.key_fraction}")
        if self.warmup_epochs > self.total_epochs:
            raise ValueError("warmup_epochs must not exceed total_epochs")
        if self.max_offset < 1 or self.batch_size < 1:
            raise ValueError("max_offset and batch_size must be positive")
        if self.warp_kind not in ("warpnet", "bilinear"):
            raise ValueError(f"unknown warp_kind {self.warp_kind!r}")
        return self


@dataclass(frozen=True)
class TrainingPair:
    key: Frame
    nonkey: Frame
    seq_id: str
    offset: int  # signed; nonkey index = key index + offset


def sample_pairs(videos: list, cfg: TrainConfig | None = None) -> list:
    """Pick floor(key_fraction * len) keys per sequence, each paired within max_offset frames."""
    cfg = (cfg or TrainConfig()).validate()
    pairs = []
    for seq in videos:
        n = len(seq.frames)
        if n < cfg.max_offset + 1:
            raise ValueError(f"sequence {seq.seq_id} has {n} frames; pairing needs at least {cfg.max_offset + 1}")
        rng = RngStream(derive_seed(cfg.seed, f"pairs/{seq.seq_id}")).gen
        n_keys = int(np.floor(cfg.key_fraction * n + 1e-9))
        keys = np.sort(rng.choice(n, size=n_keys, replace=False))
        for k in keys:
            k = int(k)
            dirs = [d for d in (-1, 1) if 0 <= k + d < n]
            d = dirs[int(rng.integers(len(dirs)))]
            reach = k if d < 0 else n - 1 - k
            mag = int(rng.integers(1, min(cfg.max_offset, reach) + 1))
            pairs.append(TrainingPair(seq.frames[k], seq.frames[k + d * mag], seq.seq_id, d * mag))
    return pairs


def lr_schedule(epoch: int, cfg: TrainConfig | None = None) -> tuple:
    """(decision, motion, warp) learning rates for ``epoch``.

    Motion and warp start at their base rate and decay by ``lr_decay`` each
    epoch. The decision rate is 0 during warm-up, switches on at its base
    rate at epoch ``warmup_epochs`` and decays from there.
    """
    cfg = cfg or TrainConfig()
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    decay = cfg.lr_decay**epoch
    lr_dec = 0.0 if epoch < cfg.warmup_epochs else cfg.lr_decision * cfg.lr_decay ** (epoch - cfg.warmup_epochs)
    return lr_dec, cfg.lr_motion * decay, cfg.lr_warp * decay


def frozen_features(frames: list, det_params: dict, det_cfg: DetectorConfig | None = None, batch: int = 32) -> dict:
    """Backbone features for each distinct frame (keyed by id), no gradient tracking."""
    uniq = {}
    for f in frames:
        uniq.setdefault(id(f), f)
    items = list(uniq.items())
    out = {}
    for start in range(0, len(items), batch):
        chunk = items[start : start + batch]
        x = Tensor(np.stack([f.normalized()[None] for _, f in chunk]))
        feats = backbone(x, det_params, det_cfg).data
        for (key, _), feat in zip(chunk, feats):
            out[key] = feat
    return out


def _group_lr(name: str, lrs: tuple, cfg: TrainConfig) -> float:
    lr_dec, lr_mot, lr_warp = lrs
    if name.startswith("motion."):
        return lr_mot
    if name.startswith("warp."):
        return lr_warp
    if name.startswith("decision."):
        return lr_dec
    if name.startswith("flow."):
        return lr_warp if cfg.warp_kind == "bilinear" else 0.0
    raise KeyError(name)


def train_stcd(
    pairs: list,
    detector_ckpt: Checkpoint,
    cfg: TrainConfig | None = None,
    det_cfg: DetectorConfig | None = None,
    tcfg: TemporalConfig | None = None,
    log=None,
) -> Checkpoint:
    """Train motion/warp/decision networks against the frozen detector backbone."""
    cfg = (cfg or TrainConfig()).validate()
    tcfg = tcfg or TemporalConfig()
    if not pairs:
        raise ValueError("train_stcd needs at least one training pair")
    det = detector_params(detector_ckpt, det_cfg)
    feats = frozen_features([f for p in pairs for f in (p.key, p.nonkey)], det, det_cfg)
    rng = RngStream(cfg.seed)
    params = init_temporal_params(rng.child("temporal-init"), tcfg)
    for p in params.values():
        p.requires_grad = True
    groups = [ParamGroup(k, v) for k, v in params.items()]
    order_rng = rng.child("pair-order").gen
    history = {"feat": [], "dec": []}
    t0 = time.perf_counter()

    def batches(epoch_order):
        for start in range(0, len(pairs), cfg.batch_size):
            chunk = [pairs[i] for i in epoch_order[start : start + cfg.batch_size]]
            imgs = np.stack([np.stack([p.key.normalized(), p.nonkey.normalized()]) for p in chunk])
            fk = np.stack([feats[id(p.key)] for p in chunk])
            fi = np.stack([feats[id(p.nonkey)] for p in chunk])
            yield Tensor(imgs), Tensor(fk), fi

    for epoch in range(cfg.total_epochs):
        lrs = lr_schedule(epoch, cfg)
        joint = epoch >= cfg.warmup_epochs
        lf, ld = [], []
        for imgs, fk, fi in batches(order_rng.permutation(len(pairs))):
            for p in params.values():
                p.grad = None
            m = motion_net(imgs, params, tcfg)
            if cfg.warp_kind == "warpnet":
                fw = warp_net(fk, m, params)
            else:
                fw = bilinear_warp_features(fk, m, params)
            q = correlation_tensor(fw, Tensor(fi))
            loss = feature_loss(q)
            lf.append(float(loss.data))
            if joint:
                # decision gradients stop at the decision network
                s = decision_net(m.detach(), params)
                ldec = decision_loss(q.data, s)
                ld.append(float(ldec.data))
                loss = loss + ldec
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite STCD loss at epoch {epoch}")
            loss.backward()
            for g in groups:
                adam_step(g, _group_lr(g.name, lrs, cfg), cfg.beta1, cfg.beta2, cfg.eps)
        history["feat"].append(float(np.mean(lf)))
        history["dec"].append(float(np.mean(ld)) if ld else None)
        if log:
            msg = f"stcd epoch {epoch}: L_feat {history['feat'][-1]:.5f}"
            if ld:
                msg += f" L_dec {history['dec'][-1]:.6f}"
            log(msg + f" ({time.perf_counter() - t0:.1f}s)")

    if cfg.warp_kind == "warpnet" and cfg.flow_epochs > 0:
        history["flow"] = fit_flow_head(pairs, feats, params, cfg, tcfg, order_rng)
        if log:
            log(f"flow head: L_feat {history['flow'][-1]:.5f}")

    tensors = {k: np.asarray(v, dtype=np.float32) for k, v in detector_ckpt.tensors.items()}
    tensors.update({k: v.data.copy() for k, v in params.items()})
    meta = {
        "kind": "stcd",
        "epochs": cfg.total_epochs,
        "seed": cfg.seed,
        "num_pairs": len(pairs),
        "history": history,
        "config": asdict(cfg),
        "detector_meta": {k: v for k, v in detector_ckpt.meta.items() if k != "loss_history"},
    }
    return Checkpoint(tensors=tensors, meta=meta)


def fit_flow_head(pairs, feats, params, cfg: TrainConfig, tcfg, order_rng) -> list:
    """Fit only the flow head so bilinear warping along it mimics the target features.

    Motion features are held fixed, so this never changes the WarpNet path.
    """
    groups = [ParamGroup(k, v) for k, v in params.items() if k.startswith("flow.")]
    history = []
    for epoch in range(cfg.flow_epochs):
        losses = []
        order = order_rng.permutation(len(pairs))
        for start in range(0, len(pairs), cfg.batch_size):
            chunk = [pairs[i] for i in order[start : start + cfg.batch_size]]
            imgs = Tensor(np.stack([np.stack([p.key.normalized(), p.nonkey.normalized()]) for p in chunk]))
            fk = Tensor(np.stack([feats[id(p.key)] for p in chunk]))
            fi = Tensor(np.stack([feats[id(p.nonkey)] for p in chunk]))
            for g in groups:
                g.tensor.grad = None
            m = motion_net(imgs, params, tcfg).detach()
            loss = feature_loss(correlation_tensor(bilinear_warp_features(fk, m, params), fi))
            loss.backward()
            for g in groups:
                adam_step(g, cfg.lr_flow * cfg.lr_decay**epoch, cfg.beta1, cfg.beta2, cfg.eps)
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
    return history


def full_shapes(det_cfg: DetectorConfig | None = None, tcfg: TemporalConfig | None = None) -> dict:
    from .detector import detector_shapes

    shapes = detector_shapes(det_cfg or DetectorConfig())
    shapes.update(temporal_shapes(tcfg))
    return shapes


def stcd_params(ckpt: Checkpoint, det_cfg: DetectorConfig | None = None, tcfg: TemporalConfig | None = None) -> dict:
    """All detector + temporal tensors from a full checkpoint, as inference tensors."""
    ckpt.validate(full_shapes(det_cfg, tcfg))
    return {k: Tensor(np.asarray(v, dtype=np.float32)) for k, v in ckpt.tensors.items()}
