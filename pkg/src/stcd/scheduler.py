"""Streaming key-frame scheduler.

Each incoming frame is compared with the current key frame. In
``decision_net`` mode the decision network scores the motion features and a
score strictly above ``tau`` sends the frame down the heavy path (backbone,
key refresh); otherwise the cached key features are warped forward. The
first frame of a stream is always a key frame. Baseline policies replace the
score test: ``fixed(N)``, ``grey_corr(theta)``, ``flow_corr(theta)`` and
``all_key``.
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .checkpoint import Checkpoint
from .detector import AnchorSet, DetectorConfig, backbone_features, default_anchors, detect_from_features
from .flops import FlopModel
from .synthgen import Frame
from .temporal import (
    TemporalConfig,
    bilinear_warp_features,
    decision_score,
    flow_head,
    motion_features,
    warp_features,
)
from .training import stcd_params

MODES = ("decision_net", "fixed", "grey_corr", "flow_corr", "all_key")
_MODE_RE = re.compile(r"^([a-z_]+)(?:\(([^)]*)\))?$")


def parse_mode(mode: str) -> tuple:
    """'fixed(5)' -> ('fixed', 5); 'grey_corr(0.01)' -> ('grey_corr', 0.01); 'all_key' -> ('all_key', None)."""
    m = _MODE_RE.match(mode.strip())
    if not m or m.group(1) not in MODES:
        raise ValueError(f"unknown scheduler mode {mode!r}; expected one of {MODES}")
    name, arg = m.group(1), m.group(2)
    if name == "fixed":
        if arg is None:
            raise ValueError("fixed mode needs a period, e.g. fixed(5)")
        n = int(arg)
        if n < 1:
            raise ValueError(f"fixed period must be >= 1, got {n}")
        return name, n
    if name in ("grey_corr", "flow_corr"):
        if arg is None:
            raise ValueError(f"{name} mode needs a threshold, e.g. {name}(0.01)")
        theta = float(arg)
        if theta < 0:
            raise ValueError(f"{name} threshold must be >= 0, got {theta}")
        return name, theta
    if arg not in (None, ""):
        raise ValueError(f"{name} mode takes no parameter")
    return name, None


def format_mode(name: str, param) -> str:
    return name if param is None else f"{name}({param:g})" if isinstance(param, float) else f"{name}({param})"


def grey_mse(a: Frame, b: Frame) -> float:
    d = a.normalized().astype(np.float64) - b.normalized().astype(np.float64)
    return float(np.mean(d * d))


def baseline_decide(mode: str, param, key: Frame | None, cur: Frame, motion=None, position: int = 0, params=None):
    """True when a baseline policy makes ``cur`` a new key frame.

    Returns ``(decision, statistic)``; the statistic is the compared value
    (MSE or mean |flow|) or None for ``fixed``/``all_key``.
    """
    if mode == "fixed":
        if param is None or param < 1:
            raise ValueError(f"fixed period must be >= 1, got {param}")
        return position % int(param) == 0, None
    if mode == "all_key":
        return True, None
    if param is None or param < 0:
        raise ValueError(f"{mode} threshold must be >= 0, got {param}")
    if mode == "grey_corr":
        stat = grey_mse(key, cur)
        return stat > param, stat
    if mode == "flow_corr":
        if motion is None or params is None:
            raise ValueError("flow_corr needs motion features and flow-head parameters")
        stat = float(np.mean(np.abs(flow_head(motion, params))))
        return stat > param, stat
    raise ValueError(f"{mode!r} is not a baseline mode")


@dataclass
class StepDiagnostics:
    frame_index: int
    path: str  # "key" or "nonkey"
    s_i: float | None
    flops_charged: int


@dataclass
class SchedulerState:
    params: dict
    tau: float
    mode: str
    mode_param: object = None
    warp_kind: str = "warpnet"
    det_cfg: DetectorConfig = field(default_factory=DetectorConfig)
    tcfg: TemporalConfig = field(default_factory=TemporalConfig)
    key_frame: Frame | None = None
    key_feat: np.ndarray | None = None
    frames_seen: int = 0
    key_count: int = 0
    log: list = field(default_factory=list)

    def __post_init__(self):
        self.anchors: AnchorSet = default_anchors(self.det_cfg)
        self.flops = FlopModel(self.det_cfg, self.tcfg)

    @property
    def mode_label(self) -> str:
        return format_mode(self.mode, self.mode_param)

    def reset(self):
        """Start a new stream with the same networks and policy."""
        self.key_frame = None
        self.key_feat = None
        self.frames_seen = 0
        self.key_count = 0
        self.log = []

    def step(self, frame: Frame, detect: bool = True):
        """Process one frame; returns (detections, diagnostics).

        With ``detect=False`` only the routing decision is made (no features
        or detections are computed for non-key frames); decisions are
        identical to a full run.
        """
        return scheduler_step(self, frame, detect=detect)[:2]


def scheduler_init(
    checkpoint,
    tau: float,
    mode: str = "decision_net",
    warp_kind: str = "warpnet",
    det_cfg: DetectorConfig | None = None,
    tcfg: TemporalConfig | None = None,
) -> SchedulerState:
    """Fresh state for one stream. ``checkpoint`` is a full Checkpoint or its params dict."""
    det_cfg = det_cfg or DetectorConfig()
    tcfg = tcfg or TemporalConfig()
    if isinstance(checkpoint, Checkpoint):
        params = stcd_params(checkpoint, det_cfg, tcfg)
    else:
        params = checkpoint
        stcd_params(Checkpoint({k: v.data for k, v in params.items()}), det_cfg, tcfg)
    name, param = parse_mode(mode)
    if warp_kind not in ("warpnet", "bilinear"):
        raise ValueError(f"unknown warp_kind {warp_kind!r}")
    return SchedulerState(params, float(tau), name, param, warp_kind, det_cfg, tcfg)


def _nonkey_cost(state: SchedulerState) -> int:
    fl = state.flops
    warp = fl["warp"] if state.warp_kind == "warpnet" else fl["flow"] + fl["bilinear"]
    return warp + fl["heads"]


def scheduler_step(state: SchedulerState, frame: Frame, detect: bool = True):
    """Route one frame; returns (detections, diagnostics, state)."""
    if not isinstance(state, SchedulerState) or state.params is None:
        raise ValueError("scheduler state is not initialised; call scheduler_init first")
    size = state.det_cfg.image_size
    if frame.pixels.shape != (size, size):
        raise ValueError(f"frame is {frame.width}x{frame.height}, scheduler expects {size}x{size}")
    fl = state.flops
    position = state.frames_seen
    motion = None
    score = None
    cost = 0

    if state.key_frame is None:
        is_key = True
    elif state.mode == "decision_net":
        motion = motion_features(state.key_frame, frame, state.params, state.tcfg)
        score = decision_score(motion, state.params)
        cost += fl["motion"] + fl["decision"]
        is_key = score > state.tau
    elif state.mode == "flow_corr":
        motion = motion_features(state.key_frame, frame, state.params, state.tcfg)
        is_key, score = baseline_decide("flow_corr", state.mode_param, state.key_frame, frame, motion, position, state.params)
        cost += fl["motion"] + fl["flow"]
    elif state.mode == "grey_corr":
        is_key, score = baseline_decide("grey_corr", state.mode_param, state.key_frame, frame)
        cost += fl["grey"]
    else:
        is_key, _ = baseline_decide(state.mode, state.mode_param, state.key_frame, frame, position=position)

    dets = []
    if is_key:
        feat = backbone_features(frame, state.params, state.det_cfg)
        state.key_frame = frame
        state.key_feat = feat
        state.key_count += 1
        cost += fl["backbone"] + fl["heads"]
    else:
        if motion is None:
            cost += fl["motion"]
        cost += _nonkey_cost(state)
        feat = None
        if detect:
            if motion is None:
                motion = motion_features(state.key_frame, frame, state.params, state.tcfg)
            if state.warp_kind == "warpnet":
                feat = warp_features(state.key_feat, motion, state.params)
            else:
                feat = bilinear_warp_features(Tensor(state.key_feat), Tensor(motion), state.params).data
    if detect and feat is not None:
        dets = detect_from_features(feat, state.params, state.det_cfg, state.anchors)
    diag = StepDiagnostics(frame.frame_index, "key" if is_key else "nonkey", score, int(cost))
    state.frames_seen += 1
    state.log.append(diag)
    return dets, diag, state


def write_diagnostics_csv(path, log: list):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_index", "path", "S_i", "flops_charged"])
        for d in log:
            w.writerow([d.frame_index, d.path, "" if d.s_i is None else repr(float(d.s_i)), d.flops_charged])
