"""Motion, warp and decision networks plus the feature-mimicking losses.

MotionNet encodes a (key, current) frame pair into motion features M at the
detector's feature resolution. WarpNet maps (F_key, M) to features for the
current frame with a 3x3 conv (80->64, relu) followed by a 1x1 conv.
DecisionNet regresses the correlation score Q from M. The flow head projects
M to a 2-channel displacement field for the classic bilinear-warp baseline.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    RngStream,
    ShapeError,
    Tensor,
    bilinear_warp,
    concat,
    conv2d,
    global_avg_pool,
    he_normal,
    leaky_relu,
    linear,
    mean,
    relu,
    reshape,
    square,
)
from .synthgen import Frame


@dataclass
class TemporalConfig:
    motion_widths: tuple = (8, 12, 16)
    motion_strides: tuple = (2, 2, 2)
    motion_alpha: float = 0.1
    feat_channels: int = 64
    decision_hidden: int = 32

    @property
    def motion_channels(self) -> int:
        return self.motion_widths[-1]


def temporal_shapes(cfg: TemporalConfig | None = None) -> dict:
    cfg = cfg or TemporalConfig()
    shapes = {}
    cin = 2
    for i, cout in enumerate(cfg.motion_widths, start=1):
        shapes[f"motion.conv{i}.w"] = (cout, cin, 3, 3)
        shapes[f"motion.conv{i}.b"] = (cout,)
        cin = cout
    c, m = cfg.feat_channels, cfg.motion_channels
    shapes["warp.conv1.w"] = (c, c + m, 3, 3)
    shapes["warp.conv1.b"] = (c,)
    shapes["warp.conv2.w"] = (c, c, 1, 1)
    shapes["warp.conv2.b"] = (c,)
    shapes["decision.fc1.w"] = (cfg.decision_hidden, m)
    shapes["decision.fc1.b"] = (cfg.decision_hidden,)
    shapes["decision.fc2.w"] = (1, cfg.decision_hidden)
    shapes["decision.fc2.b"] = (1,)
    shapes["flow.conv.w"] = (2, m, 1, 1)
    shapes["flow.conv.b"] = (2,)
    return shapes


def init_temporal_params(rng: RngStream, cfg: TemporalConfig | None = None) -> dict:
    params = {}
    for name, shape in temporal_shapes(cfg).items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            data = he_normal(rng, shape, fan_in)
            if name.startswith("flow."):
                data *= 0.01
        else:
            data = np.zeros(shape, dtype=np.float32)
        params[name] = Tensor(data)
    return params


def pair_input(key: Frame, cur: Frame) -> Tensor:
    if key.pixels.shape != cur.pixels.shape:
        raise ShapeError(f"frame sizes differ: {key.pixels.shape} vs {cur.pixels.shape}")
    return Tensor(np.stack([key.normalized(), cur.normalized()]))


def motion_net(pair: Tensor, params: dict, cfg: TemporalConfig | None = None) -> Tensor:
    """Motion features from a stacked (key, current) pair, [2,H,W] or [N,2,H,W]."""
    cfg = cfg or TemporalConfig()
    h = pair
    for i, s in enumerate(cfg.motion_strides, start=1):
        h = conv2d(h, params[f"motion.conv{i}.w"], params[f"motion.conv{i}.b"], stride=s, padding=1)
        h = leaky_relu(h, cfg.motion_alpha)
    return h


def motion_features(key: Frame, cur: Frame, params: dict, cfg: TemporalConfig | None = None) -> np.ndarray:
    return motion_net(pair_input(key, cur), params, cfg).data


def warp_net(feat_key: Tensor, motion: Tensor, params: dict) -> Tensor:
    if feat_key.shape[-2:] != motion.shape[-2:] or feat_key.ndim != motion.ndim:
        raise ShapeError(f"key features {feat_key.shape} and motion features {motion.shape} are not aligned")
    axis = 0 if feat_key.ndim == 3 else 1
    x = concat([feat_key, motion], axis=axis)
    h = relu(conv2d(x, params["warp.conv1.w"], params["warp.conv1.b"], stride=1, padding=1))
    return conv2d(h, params["warp.conv2.w"], params["warp.conv2.b"], stride=1, padding=0)


def warp_features(feat_key, motion, params: dict) -> np.ndarray:
    return warp_net(_t(feat_key), _t(motion), params).data


def flow_net(motion: Tensor, params: dict) -> Tensor:
    return conv2d(motion, params["flow.conv.w"], params["flow.conv.b"], stride=1, padding=0)


def flow_head(motion, params: dict) -> np.ndarray:
    """Displacement field (dx, dy) in feature-map cells, shape (2, h, w)."""
    return flow_net(_t(motion), params).data


def bilinear_warp_features(feat_key: Tensor, motion: Tensor, params: dict) -> Tensor:
    """Classic warp baseline: resample key features along the flow head's field."""
    return bilinear_warp(feat_key, flow_net(motion, params))


def decision_net(motion: Tensor, params: dict) -> Tensor:
    """Consistency score S: [C,h,w] -> scalar tensor of shape (1,), batched -> (N,)."""
    pooled = global_avg_pool(motion)
    h = relu(linear(pooled, params["decision.fc1.w"], params["decision.fc1.b"]))
    s = linear(h, params["decision.fc2.w"], params["decision.fc2.b"])
    return reshape(s, (-1,)) if s.ndim == 2 else s


def decision_score(motion, params: dict) -> float:
    return float(decision_net(_t(motion), params).data.reshape(-1)[0])


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def correlation_tensor(fa: Tensor, fb: Tensor) -> Tensor:
    """Mean squared difference over all C*H*W elements; batched input gives one value per item."""
    if fa.shape != fb.shape:
        raise ShapeError(f"feature maps differ in shape: {fa.shape} vs {fb.shape}")
    d = square(fa - fb)
    if fa.ndim == 4:
        return mean(d, axis=(1, 2, 3))
    return mean(d)


def correlation_score(fa, fb) -> float:
    return float(correlation_tensor(_t(fa), _t(fb)).data)


def feature_loss(qs) -> Tensor:
    """Batch mean of correlation scores; accepts a tensor of scores or a list of scalar tensors."""
    if isinstance(qs, Tensor):
        if qs.data.size == 0:
            raise ValueError("feature_loss needs a non-empty batch")
        return mean(qs)
    qs = list(qs)
    if not qs:
        raise ValueError("feature_loss needs a non-empty batch")
    ts = [reshape(_t(q), (1,)) for q in qs]
    return mean(concat(ts, axis=0))


def decision_loss(q, s) -> Tensor:
    """(Q - S)^2 with Q as a constant target; batched input is averaged."""
    target = q.data if isinstance(q, Tensor) else np.asarray(q)
    st = _t(s)
    target = np.broadcast_to(np.asarray(target, dtype=st.dtype), st.shape)
    return mean(square(st - Tensor(np.array(target))))
