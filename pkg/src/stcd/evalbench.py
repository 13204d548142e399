"""Metrics and experiment harness.

AP is all-point interpolated at a fixed IoU threshold with greedy matching
in descending score order. mAP over a test set is the mean of per-sequence
APs (detections pooled within each sequence). Compute is reported as
analytic FLOPs/frame, with wall-clock as a secondary, machine-dependent
column.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .detector import DetectorConfig, detect_frame, iou
from .flops import FlopModel, count_flops  # noqa: F401  (re-exported)
from .scheduler import SchedulerState, format_mode, parse_mode, scheduler_init
from .temporal import TemporalConfig

CSV_COLUMNS = [
    "tau",
    "mode",
    "map",
    "key_fraction",
    "flops_per_frame",
    "ms_per_frame_mean",
    "ms_per_frame_std",
    "seed",
]


def average_precision(dets: list, gts: list, iou_thr: float = 0.5) -> float:
    """AP over a set of frames.

    ``dets[i]`` is the list of Detection for frame i and ``gts[i]`` its list
    of ground-truth boxes. Detections are taken by descending score (ties
    keep input order); each is matched to the unmatched GT of its frame with
    the highest IoU >= ``iou_thr``.
    """
    if not 0 < iou_thr < 1:
        raise ValueError(f"iou_thr must lie in (0, 1), got {iou_thr}")
    if len(dets) != len(gts):
        raise ValueError("dets and gts must cover the same frames")
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        raise ValueError("average_precision is undefined without ground truth")
    flat = [(d.score, fi, d) for fi, frame_dets in enumerate(dets) for d in frame_dets]
    flat.sort(key=lambda r: -r[0])
    matched = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(flat))
    for k, (_, fi, d) in enumerate(flat):
        best, best_j = -1.0, -1
        for j, g in enumerate(gts[fi]):
            if matched[fi][j]:
                continue
            v = iou(d.box, g)
            if v >= iou_thr and v > best:
                best, best_j = v, j
        if best_j >= 0:
            matched[fi][best_j] = True
            tp[k] = 1
    if not len(flat):
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(flat) + 1)
    recall = ctp / n_gt
    # all-point interpolation: precision envelope integrated over recall steps
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


@dataclass
class EvalResult:
    map: float
    per_sequence_ap: list
    key_fraction: float
    flops_per_frame: float
    ms_per_frame_mean: float
    ms_per_frame_std: float
    tau: float
    mode: str
    seed: int
    corrupted_map: float | None = None
    frames: int = 0
    detections: dict = field(default_factory=dict, repr=False)
    diagnostics: dict = field(default_factory=dict, repr=False)

    def csv_row(self, timed: bool = True) -> list:
        return [
            _fmt(self.tau),
            self.mode,
            _fmt(self.map),
            _fmt(self.key_fraction),
            _fmt(self.flops_per_frame),
            _fmt(self.ms_per_frame_mean) if timed else "",
            _fmt(self.ms_per_frame_std) if timed else "",
            str(self.seed),
        ]


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _sequence_map(videos, per_seq_dets, frame_filter=None):
    aps = []
    for seq, dets in zip(videos, per_seq_dets):
        idx = [i for i, f in enumerate(seq.frames) if frame_filter is None or frame_filter(f)]
        gts = [seq.frames[i].boxes for i in idx]
        if not idx or sum(len(g) for g in gts) == 0:
            continue
        aps.append(average_precision([dets[i] for i in idx], gts, 0.5))
    return aps


def is_corrupted(frame) -> bool:
    return frame.corruption is not None


def _check_labeled(videos):
    for seq in videos:
        if not seq.labeled or any(f.boxes is None for f in seq.frames):
            raise ValueError(f"sequence {seq.seq_id} is unlabeled; evaluation needs ground truth")


def run_scheduler(state: SchedulerState, seq, detect: bool = True) -> tuple:
    """Drive a fresh stream over one sequence; returns (per-frame detections, diagnostics, seconds per frame)."""
    state.reset()
    dets, times = [], []
    for frame in seq.frames:
        t0 = time.perf_counter()
        d, _ = state.step(frame, detect=detect)
        times.append(time.perf_counter() - t0)
        dets.append(d)
    return dets, list(state.log), times


def evaluate_sequences(
    ckpt,
    tau: float,
    mode: str,
    videos: list,
    seed: int = 0,
    warp_kind: str = "warpnet",
    det_cfg: DetectorConfig | None = None,
    tcfg: TemporalConfig | None = None,
    repeats: int = 1,
) -> EvalResult:
    """Run the scheduler over every sequence and pool the results."""
    _check_labeled(videos)
    state = scheduler_init(ckpt, tau, mode, warp_kind, det_cfg, tcfg)
    run_means = []
    per_seq_dets, per_seq_diag = [], []
    for r in range(max(1, repeats)):
        all_times = []
        per_seq_dets, per_seq_diag = [], []
        for seq in videos:
            dets, diag, times = run_scheduler(state, seq)
            per_seq_dets.append(dets)
            per_seq_diag.append(diag)
            all_times.extend(times)
        run_means.append(1000 * float(np.mean(all_times)))
    diags = [d for seq_diag in per_seq_diag for d in seq_diag]
    aps = _sequence_map(videos, per_seq_dets)
    corrupted = _sequence_map(videos, per_seq_dets, is_corrupted)
    return EvalResult(
        map=float(np.mean(aps)),
        per_sequence_ap=aps,
        key_fraction=sum(d.path == "key" for d in diags) / len(diags),
        flops_per_frame=sum(d.flops_charged for d in diags) / len(diags),
        ms_per_frame_mean=float(np.mean(run_means)),
        ms_per_frame_std=float(np.std(run_means)),
        tau=float(tau),
        mode=state.mode_label if warp_kind == "warpnet" else f"{state.mode_label}+bilinear",
        seed=seed,
        corrupted_map=float(np.mean(corrupted)) if corrupted else None,
        frames=len(diags),
        detections={seq.seq_id: d for seq, d in zip(videos, per_seq_dets)},
        diagnostics={seq.seq_id: d for seq, d in zip(videos, per_seq_diag)},
    )


def framewise_detections(params: dict, videos: list, det_cfg: DetectorConfig | None = None) -> list:
    return [[detect_frame(f, params, det_cfg) for f in seq.frames] for seq in videos]


def evaluate_framewise(params: dict, videos: list, det_cfg: DetectorConfig | None = None, seed: int = 0) -> EvalResult:
    """Frame-by-frame detector inference: the oracle that all_key mode must reproduce."""
    _check_labeled(videos)
    det_cfg = det_cfg or DetectorConfig()
    t0 = time.perf_counter()
    per_seq = framewise_detections(params, videos, det_cfg)
    n = sum(len(s.frames) for s in videos)
    ms = 1000 * (time.perf_counter() - t0) / n
    aps = _sequence_map(videos, per_seq)
    corrupted = _sequence_map(videos, per_seq, is_corrupted)
    return EvalResult(
        map=float(np.mean(aps)),
        per_sequence_ap=aps,
        key_fraction=1.0,
        flops_per_frame=float(FlopModel(det_cfg).framewise),
        ms_per_frame_mean=ms,
        ms_per_frame_std=0.0,
        tau=float("nan"),
        mode="framewise",
        seed=seed,
        corrupted_map=float(np.mean(corrupted)) if corrupted else None,
        frames=n,
        detections={seq.seq_id: d for seq, d in zip(videos, per_seq)},
    )


def key_fraction(ckpt, tau: float, mode: str, videos: list, warp_kind="warpnet", det_cfg=None, tcfg=None) -> float:
    """Pooled key-frame fraction from routing decisions alone (no detection work)."""
    state = scheduler_init(ckpt, tau, mode, warp_kind, det_cfg, tcfg)
    keys = frames = 0
    for seq in videos:
        _, diag, _ = run_scheduler(state, seq, detect=False)
        keys += sum(d.path == "key" for d in diag)
        frames += len(diag)
    return keys / frames


def observed_scores(ckpt, videos: list, det_cfg=None, tcfg=None) -> np.ndarray:
    """Decision scores of every non-first frame against its stream's first frame."""
    state = scheduler_init(ckpt, float("inf"), "decision_net", "warpnet", det_cfg, tcfg)
    scores = []
    for seq in videos:
        _, diag, _ = run_scheduler(state, seq, detect=False)
        scores.extend(d.s_i for d in diag if d.s_i is not None)
    return np.asarray(scores)


def calibrate_threshold(rate_fn, target: float, lo: float, hi: float, iters: int = 30) -> tuple:
    """Bisect a threshold whose key fraction (non-increasing in it) is closest to ``target``.

    Returns (threshold, achieved fraction) for the best point visited.
    """
    best = None
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        kf = rate_fn(mid)
        if best is None or abs(kf - target) < abs(best[1] - target):
            best = (mid, kf)
        if kf > target:
            lo = mid
        else:
            hi = mid
        if abs(kf - target) < 1e-3:
            break
    return best


def calibrate_tau(ckpt, videos: list, target: float = 1 / 3, det_cfg=None, tcfg=None) -> tuple:
    """τ whose decision_net key fraction on ``videos`` is closest to ``target``."""
    s = observed_scores(ckpt, videos, det_cfg, tcfg)
    span = float(s.max() - s.min()) + 1e-6
    return calibrate_threshold(
        lambda t: key_fraction(ckpt, t, "decision_net", videos, det_cfg=det_cfg, tcfg=tcfg),
        target,
        float(s.min()) - span,
        float(s.max()) + span,
    )


def sweep_tau(ckpt, taus, videos: list, seed: int = 0, timed: bool = False, **kw) -> list:
    """One EvalResult per τ, ascending."""
    taus = sorted(float(t) for t in taus)
    if len(taus) < 2:
        raise ValueError("sweep_tau needs at least two τ values")
    return [evaluate_sequences(ckpt, t, "decision_net", videos, seed=seed, **kw) for t in taus]


@dataclass
class AblationRow:
    result: EvalResult | None
    mode: str
    target_key_fraction: float
    calibrated: bool
    note: str = ""


def fixed_key_fraction(videos: list, n: int) -> float:
    frames = sum(len(s.frames) for s in videos)
    return sum(math.ceil(len(s.frames) / n) for s in videos) / frames


def ablate_scheduler(ckpt, modes, target_key_fraction: float, videos: list, seed: int = 0, tol: float = 0.05, det_cfg=None, tcfg=None) -> list:
    """Evaluate baseline policies calibrated to ``target_key_fraction`` (±``tol``).

    ``modes`` holds bare mode names; ``decision_net`` entries must be given
    with their τ as ``("decision_net", tau)``.
    """
    rows = []
    for mode in modes:
        name, param = mode if isinstance(mode, tuple) else (mode, None)
        if name == "decision_net":
            res = evaluate_sequences(ckpt, param, "decision_net", videos, seed=seed, det_cfg=det_cfg, tcfg=tcfg)
            rows.append(AblationRow(res, res.mode, target_key_fraction, abs(res.key_fraction - target_key_fraction) <= tol))
            continue
        if name == "all_key":
            res = evaluate_sequences(ckpt, 0.0, "all_key", videos, seed=seed, det_cfg=det_cfg, tcfg=tcfg)
            rows.append(AblationRow(res, "all_key", target_key_fraction, abs(1.0 - target_key_fraction) <= tol))
            continue
        if name == "fixed":
            n = max(1, min(range(1, 64), key=lambda k: abs(fixed_key_fraction(videos, k) - target_key_fraction)))
            label = format_mode("fixed", n)
            achieved = fixed_key_fraction(videos, n)
        elif name in ("grey_corr", "flow_corr"):
            if name == "grey_corr":
                hi = 0.25
            else:
                hi = 10.0
            theta, achieved = calibrate_threshold(
                lambda t: key_fraction(ckpt, 0.0, format_mode(name, float(t)), videos, det_cfg=det_cfg, tcfg=tcfg),
                target_key_fraction,
                0.0,
                hi,
            )
            label = format_mode(name, float(theta))
        else:
            raise ValueError(f"unknown mode {name!r}")
        if abs(achieved - target_key_fraction) > tol:
            rows.append(AblationRow(None, label, target_key_fraction, False, f"calibration failed: key fraction {achieved:.3f}"))
            continue
        res = evaluate_sequences(ckpt, 0.0, label, videos, seed=seed, det_cfg=det_cfg, tcfg=tcfg)
        rows.append(AblationRow(res, res.mode, target_key_fraction, abs(res.key_fraction - target_key_fraction) <= tol))
    return rows


def benchmark_runtime(ckpt, tau: float, videos: list, repeats: int = 3, mode: str = "decision_net", det_cfg=None, tcfg=None) -> dict:
    """Wall-clock ms/frame over ``repeats`` timed passes after one untimed warm-up pass."""
    if repeats < 3:
        raise ValueError("benchmark_runtime needs repeats >= 3")
    state = scheduler_init(ckpt, tau, mode, "warpnet", det_cfg, tcfg)
    for seq in videos:
        run_scheduler(state, seq)
    means = []
    keys = frames = flops = 0
    for _ in range(repeats):
        times = []
        for seq in videos:
            _, diag, t = run_scheduler(state, seq)
            times.extend(t)
            keys += sum(d.path == "key" for d in diag)
            flops += sum(d.flops_charged for d in diag)
            frames += len(diag)
        means.append(1000 * float(np.mean(times)))
    return {
        "mode": state.mode_label,
        "tau": tau,
        "ms_per_frame_mean": float(np.mean(means)),
        "ms_per_frame_std": float(np.std(means)),
        "key_fraction": keys / frames,
        "flops_per_frame": flops / frames,
    }


def results_csv(results: list, timed: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in results:
        w.writerow(r.csv_row(timed))
    return buf.getvalue()


def write_results_csv(path, results: list, timed: bool = True):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(results_csv(results, timed))
