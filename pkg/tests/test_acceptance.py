"""Acceptance criteria 1-11, each reported as one PASS/FAIL line.

The trained-model criteria (6-10) share one end-to-end run per seed:
detector on 500 stills, STCD on 100% and 25% of the unlabeled videos,
τ calibrated to a 1/3 key fraction, then evaluation on the test videos.
"""
import struct
import time

import numpy as np
import pytest

from acceptance_report import record
from gradient_cases import ALL_CASES
from oracles import brute_force_ap, check_gradients, reference_lr
from stcd import checkpoint as ck
from stcd import synthgen as sg
from stcd.autodiff import Tensor
from stcd.config import parse_config
from stcd.detector import Detection
from stcd.evalbench import (
    ablate_scheduler,
    average_precision,
    evaluate_framewise,
    evaluate_sequences,
    observed_scores,
    results_csv,
    sweep_tau,
)
from stcd.flops import FlopModel
from stcd.pipeline import fit_detector, fit_stcd, make_datasets, resolve_tau, still_map
from stcd.selftest import random_ap_instance
from stcd.temporal import correlation_score, decision_loss, feature_loss
from stcd.training import TrainConfig, lr_schedule, sample_pairs, stcd_params

SEEDS = (0, 1, 2)


# ---------------------------------------------------------------------------
# shared end-to-end runs
# ---------------------------------------------------------------------------


class SeedRun:
    def __init__(self, seed: int):
        t0 = time.perf_counter()
        self.seed = seed
        self.cfg = parse_config(overrides=[f"seed={seed}"])
        self.data = make_datasets(self.cfg)
        t = time.perf_counter()
        self.det = fit_detector(self.cfg, self.data.stills)
        self.det_seconds = time.perf_counter() - t
        self.still_map = still_map(self.det, self.data.test_stills, self.cfg)
        self.ckpt = fit_stcd(self.cfg, self.det, self.data.unlabeled)
        self.ckpt_25 = fit_stcd(self.cfg.replace(unlabeled_fraction=0.25), self.det, self.data.unlabeled)
        videos = self.data.test_videos
        self.tau, _ = resolve_tau(self.cfg, self.ckpt, videos)
        self.tau_25, _ = resolve_tau(self.cfg, self.ckpt_25, videos)
        self.stcd = evaluate_sequences(self.ckpt, self.tau, "decision_net", videos, seed=seed)
        self.stcd_25 = evaluate_sequences(self.ckpt_25, self.tau_25, "decision_net", videos, seed=seed)
        self.framewise = evaluate_framewise(stcd_params(self.ckpt), videos, seed=seed)
        self.seconds = time.perf_counter() - t0


_RUNS: dict = {}


@pytest.fixture(scope="session")
def runs():
    def get(seed):
        if seed not in _RUNS:
            _RUNS[seed] = SeedRun(seed)
        return _RUNS[seed]

    return get


def _mean(xs):
    return float(np.mean(list(xs)))


# ---------------------------------------------------------------------------
# 1-5: oracles and protocol
# ---------------------------------------------------------------------------


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    failures = []
    for name, case in ALL_CASES.items():
        for seed in range(20):
            build, arrays, max_elems = case(np.random.default_rng(seed))
            worst, where = check_gradients(build, arrays, np.random.default_rng(1000 + seed), max_elems, rtol=1e-4, atol=1e-6)
            if worst > 0:
                failures.append((name, seed, where))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120
    record(1, ok, f"{len(ALL_CASES)} cases x 20 seeds, {len(failures)} failures, {elapsed:.1f}s (< 120s)")
    assert ok, failures[:3]


def test_criterion_02_all_key_equals_framewise(runs):
    r = runs(0)
    videos = r.data.test_videos
    ak = evaluate_sequences(r.ckpt, float("nan"), "all_key", videos)
    same_dets = ak.detections == r.framewise.detections
    ok = same_dets and ak.map == r.framewise.map
    record(2, ok, f"{ak.frames} frames, detections identical={same_dets}, mAP {ak.map!r} vs {r.framewise.map!r}")
    assert ok


def test_criterion_03_loss_identities():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(64, 8, 8))
    checks = {
        "Q(F,F)=0": correlation_score(f, f) == 0.0,
        "Q(F+1,F)=1": correlation_score(f + 1.0, f) == 1.0,
        "L_dec(Q,Q)=0": float(decision_loss(0.37, Tensor(np.array([0.37]))).data) == 0.0,
        "L_feat{1,3}=2": float(feature_loss([Tensor(np.array(1.0)), Tensor(np.array(3.0))]).data) == 2.0,
    }
    ok = all(checks.values())
    record(3, ok, ", ".join(f"{k} {'ok' if v else 'WRONG'}" for k, v in checks.items()))
    assert ok


def test_criterion_04_map_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        dets, gts = random_ap_instance(rng)
        flat = [d for fd in dets for d in fd]
        scores = iter(rng.permutation(len(flat)) / max(1, len(flat)) + 0.01)
        dets = [[Detection(d.box, float(next(scores))) for d in fd] for fd in dets]
        oracle = brute_force_ap([[(d.box, d.score) for d in fd] for fd in dets], gts)
        worst = max(worst, abs(average_precision(dets, gts) - oracle))
    ok = worst <= 1e-12
    record(4, ok, f"200 instances, max |AP - brute force| = {worst:.3e} (<= 1e-12)")
    assert ok


def test_criterion_05_training_protocol(runs):
    sched_ok = all(lr_schedule(e) == reference_lr(e) for e in range(30))
    sched_ok &= lr_schedule(0) == (0.0, 0.001, 0.001) and lr_schedule(10)[0] == 0.001
    r = runs(0)
    frozen = all(np.array_equal(r.ckpt.tensors[k], v) for k, v in r.det.tensors.items())
    pairs = sample_pairs(r.data.unlabeled, TrainConfig(seed=0))
    per_seq = {}
    for p in pairs:
        per_seq[p.seq_id] = per_seq.get(p.seq_id, 0) + 1
    counts_ok = all(per_seq[s.seq_id] == len(s.frames) // 3 for s in r.data.unlabeled)
    offsets_ok = all(1 <= abs(p.offset) <= 20 for p in pairs)
    ok = sched_ok and frozen and counts_ok and offsets_ok
    record(
        5,
        ok,
        f"lr schedule {sched_ok}, frozen backbone {frozen}, {len(pairs)} pairs at 1/3 per sequence {counts_ok}, |offset|<=20 {offsets_ok}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 6-10: trained-model trends
# ---------------------------------------------------------------------------


def test_criterion_06_detector_competence(runs):
    r = runs(0)
    ok = r.still_map >= 0.70
    record(6, ok, f"held-out still mAP@0.5 {r.still_map:.4f} (>= 0.70), trained in {r.det_seconds:.0f}s on {len(r.data.stills)} stills")
    assert ok


def test_criterion_07_temporal_coherence(runs):
    rs = [runs(s) for s in SEEDS]
    fm = FlopModel()
    corr_stcd = _mean(r.stcd.corrupted_map for r in rs)
    corr_fw = _mean(r.framewise.corrupted_map for r in rs)
    all_stcd = _mean(r.stcd.map for r in rs)
    all_fw = _mean(r.framewise.map for r in rs)
    kf = _mean(r.stcd.key_fraction for r in rs)
    blended = _mean(r.stcd.flops_per_frame for r in rs) / fm.framewise
    nonkey_ratio = fm.nonkey_path / fm.key_path
    per_seed = "; ".join(
        f"seed {r.seed}: corrupted {r.stcd.corrupted_map:.4f}/{r.framewise.corrupted_map:.4f} overall {r.stcd.map:.4f}/{r.framewise.map:.4f}"
        for r in rs
    )
    checks = [corr_stcd >= corr_fw, all_fw - all_stcd <= 0.02, nonkey_ratio <= 0.6, blended <= 0.75, abs(kf - 1 / 3) <= 0.05]
    ok = all(checks)
    record(
        7,
        ok,
        f"corrupted mAP {corr_stcd:.4f} vs framewise {corr_fw:.4f}; overall {all_stcd:.4f} vs {all_fw:.4f} "
        f"(gap {100 * (all_fw - all_stcd):.2f} pts <= 2); key fraction {kf:.3f}; non-key/key FLOPs {nonkey_ratio:.3f} (<= 0.6); "
        f"blended/framewise FLOPs {blended:.3f} (<= 0.75) [{per_seed}]",
    )
    assert ok


def test_criterion_08_unlabeled_trend(runs):
    rs = [runs(s) for s in SEEDS]
    full = _mean(r.stcd.map for r in rs)
    quarter = _mean(r.stcd_25.map for r in rs)
    floor = _mean(r.framewise.map for r in rs) - 0.02
    tie = quarter - full <= 0.005 and min(full, quarter) >= floor
    ok = full >= quarter or tie
    per_seed = ", ".join(f"seed {r.seed}: {r.stcd.map:.4f}/{r.stcd_25.map:.4f}" for r in rs)
    record(8, ok, f"mAP with 100% unlabeled {full:.4f} vs 25% {quarter:.4f} [{per_seed}]")
    assert ok


def _inversions(values, tol):
    """Increases along a sequence that should be non-increasing."""
    return [b - a for a, b in zip(values, values[1:]) if b - a > tol(a)]


def test_criterion_09_tau_sweep(runs):
    from stcd.cli import auto_taus

    r = runs(0)
    videos = r.data.test_videos
    taus = auto_taus(r.ckpt, videos, 7)
    rows = sweep_tau(r.ckpt, taus, videos, seed=0)
    kfs = [x.key_fraction for x in rows]
    flops = [x.flops_per_frame for x in rows]
    kf_inv = _inversions(kfs, lambda a: 0.0)
    fl_inv = _inversions(flops, lambda a: 0.0)
    kf_ok = len(kf_inv) <= 1 and all(d <= 0.02 for d in kf_inv)
    fl_ok = len(fl_inv) <= 1 and all(d <= 0.02 * fl for d, fl in zip(fl_inv, flops))
    csv_a = results_csv(rows, timed=False)
    csv_b = results_csv(sweep_tau(r.ckpt, taus, videos, seed=0), timed=False)
    ok = len(rows) >= 5 and kf_ok and fl_ok and csv_a.encode() == csv_b.encode()
    record(
        9,
        ok,
        f"{len(rows)} tau values, key fractions {[round(k, 3) for k in kfs]}, inversions kf {len(kf_inv)} flops {len(fl_inv)}, "
        f"CSV byte-identical {csv_a == csv_b}",
    )
    assert ok


def test_criterion_10_scheduling_ablation(runs):
    rs = [runs(s) for s in SEEDS]
    dn, fixed, lines = [], [], []
    for r in rs:
        rows = ablate_scheduler(r.ckpt, [("decision_net", r.tau), "fixed"], r.stcd.key_fraction, r.data.test_videos, seed=r.seed)
        d, f = rows[0].result, rows[1].result
        assert f is not None, rows[1].note
        assert abs(f.key_fraction - d.key_fraction) <= 0.05
        dn.append(d.map)
        fixed.append(f.map)
        lines.append(f"seed {r.seed}: {d.map:.4f} vs {f.mode} {f.map:.4f} (kf {d.key_fraction:.3f}/{f.key_fraction:.3f})")
    ok = _mean(dn) >= _mean(fixed)
    record(10, ok, f"decision_net mAP {_mean(dn):.4f} vs fixed {_mean(fixed):.4f} at matched key rate [{'; '.join(lines)}]")
    assert ok


# ---------------------------------------------------------------------------
# 11: formats
# ---------------------------------------------------------------------------


def _expect(exc, fn):
    try:
        fn()
    except exc:
        return True
    except Exception:
        return False
    return False


def test_criterion_11_format_round_trips(runs, tmp_path):
    r = runs(0)
    # checkpoint
    data = ck.encode_checkpoint(r.ckpt)
    back = ck.decode_checkpoint(data)
    ck_ok = ck.encode_checkpoint(back) == data and all(np.array_equal(back.tensors[k], v) for k, v in r.ckpt.tensors.items())
    flipped = bytearray(data)
    flipped[100] ^= 0x10
    bad_version = data[:4] + struct.pack("<I", 9) + data[8:]
    ck_faults = [
        _expect(ck.BadMagicError, lambda: ck.decode_checkpoint(b"NOPE" + data[4:])),
        _expect(ck.VersionMismatchError, lambda: ck.decode_checkpoint(bad_version)),
        _expect(ck.TruncatedCheckpointError, lambda: ck.decode_checkpoint(data[: len(data) // 2])),
        _expect(ck.ChecksumError, lambda: ck.decode_checkpoint(bytes(flipped))),
    ]
    # datasets
    seq = r.data.test_videos[0]
    sg.write_dataset(tmp_path / "videos", [seq])
    got = sg.read_dataset(tmp_path / "videos")[0]
    ds_ok = all(np.array_equal(a.pixels, b.pixels) and a.boxes == b.boxes for a, b in zip(seq.frames, got.frames))
    sg.write_dataset(tmp_path / "stills", r.data.test_stills[:20])
    stills = sg.read_dataset(tmp_path / "stills")
    ds_ok &= all(np.array_equal(a.pixels, b.pixels) and a.boxes == b.boxes for a, b in zip(r.data.test_stills, stills))
    d = tmp_path / "videos" / seq.seq_id
    frame = d / "frame_00001.pgm"
    raw = frame.read_bytes()
    frame.write_bytes(raw[:50])
    ds_faults = [_expect(sg.FrameFileError, lambda: sg.read_sequence(d))]
    frame.write_bytes(raw[:-1] + bytes([raw[-1] ^ 1]))
    ds_faults.append(_expect(sg.ChecksumMismatchError, lambda: sg.read_sequence(d)))
    frame.unlink()
    ds_faults.append(_expect(sg.MissingFrameError, lambda: sg.read_sequence(d)))
    ok = ck_ok and ds_ok and all(ck_faults) and all(ds_faults)
    record(
        11,
        ok,
        f"checkpoint round-trip {ck_ok}, faults {sum(ck_faults)}/4 distinct; dataset round-trip {ds_ok}, faults {sum(ds_faults)}/3 distinct",
    )
    assert ok
