"""End-to-end experiment steps shared by the CLI and the acceptance suite."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .checkpoint import Checkpoint
from .config import Config
from .detector import detect_frame, detector_params, train_detector
from .evalbench import average_precision, calibrate_tau
from .synthgen import gen_stills, gen_videos
from .training import sample_pairs, train_stcd


@dataclass
class Datasets:
    stills: list
    test_stills: list
    unlabeled: list
    test_videos: list


def make_datasets(cfg: Config) -> Datasets:
    gen = cfg.gen_config()
    return Datasets(
        stills=gen_stills(gen, cfg.n_stills, "stills"),
        test_stills=gen_stills(gen, cfg.n_test_stills, "test-stills"),
        unlabeled=gen_videos(gen, cfg.n_unlabeled, "unlabeled", labeled=False),
        test_videos=gen_videos(gen, cfg.n_test_videos, "test-videos", labeled=True),
    )


def unlabeled_subset(videos: list, fraction: float) -> list:
    """Leading ``ceil(fraction * n)`` videos, so smaller subsets nest inside larger ones."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    return videos[: max(1, math.ceil(fraction * len(videos) - 1e-9))]


def fit_detector(cfg: Config, stills: list, log=None) -> Checkpoint:
    return train_detector(stills, cfg.detector_config(), log=log)


def still_map(ckpt: Checkpoint, stills: list, cfg: Config) -> float:
    """AP@0.5 of the detector over a set of stills, pooled as one frame set."""
    det_cfg = cfg.detector_config()
    params = detector_params(ckpt, det_cfg)
    dets = [detect_frame(f, params, det_cfg) for f in stills]
    return average_precision(dets, [f.boxes for f in stills], 0.5)


def fit_stcd(cfg: Config, det_ckpt: Checkpoint, unlabeled: list, log=None) -> Checkpoint:
    videos = unlabeled_subset(unlabeled, cfg.unlabeled_fraction)
    tcfg = cfg.train_config()
    pairs = sample_pairs(videos, tcfg)
    return train_stcd(pairs, det_ckpt, tcfg, cfg.detector_config(), cfg.temporal_config(), log=log)


def resolve_tau(cfg: Config, ckpt: Checkpoint, videos: list) -> tuple:
    """(tau, key fraction on ``videos``); calibrated from routing alone when ``cfg.tau`` is unset."""
    if cfg.tau is not None:
        from .evalbench import key_fraction

        return cfg.tau, key_fraction(ckpt, cfg.tau, "decision_net", videos, det_cfg=cfg.detector_config(), tcfg=cfg.temporal_config())
    return calibrate_tau(ckpt, videos, cfg.target_key_fraction, cfg.detector_config(), cfg.temporal_config())
