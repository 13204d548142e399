"""Fast invariant suites runnable from an installed package (``stcd selftest``)."""
from __future__ import annotations

import traceback

import numpy as np

from . import autodiff as ad
from . import kernels
from .checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint
from .detector import Detection, iou
from .evalbench import average_precision
from .temporal import correlation_score, decision_loss, feature_loss


def brute_force_ap(dets: list, gts: list, iou_thr: float = 0.5) -> float:
    """AP by enumerating every score cut-point and re-matching from scratch.

    Independent of the incremental implementation: for each prefix of the
    score ordering the greedy matching is redone, precision/recall recorded,
    and the interpolated envelope integrated over distinct recall levels.
    """
    n_gt = sum(len(g) for g in gts)
    flat = sorted(((d.score, i, fi, d) for fi, fd in enumerate(dets) for i, d in enumerate(fd)), key=lambda r: -r[0])
    points = []
    for cut in range(1, len(flat) + 1):
        used = set()
        tp = 0
        for _, _, fi, d in flat[:cut]:
            cands = [(iou(d.box, g), j) for j, g in enumerate(gts[fi]) if (fi, j) not in used]
            cands = [c for c in cands if c[0] >= iou_thr]
            if cands:
                best = max(cands, key=lambda c: (c[0], -c[1]))
                used.add((fi, best[1]))
                tp += 1
        points.append((tp / n_gt, tp / cut))
    ap = 0.0
    prev_r = 0.0
    for k, (r, _) in enumerate(points):
        if r > prev_r:
            ap += (r - prev_r) * max(p for rr, p in points[k:])
            prev_r = r
    return ap


def random_ap_instance(rng: np.random.Generator):
    n_frames = int(rng.integers(1, 4))
    gts, dets = [], []
    for _ in range(n_frames):
        g = []
        for _ in range(int(rng.integers(0, 3))):
            x, y = rng.uniform(0, 40, 2)
            w, h = rng.uniform(6, 20, 2)
            g.append((x, y, x + w, y + h))
        gts.append(g)
    if not any(gts):
        gts[0].append((10.0, 10.0, 20.0, 20.0))
    while sum(len(g) for g in gts) > 5:
        for g in gts:
            if g and sum(len(x) for x in gts) > 5:
                g.pop()
    budget = int(rng.integers(0, 11))
    for fi in range(n_frames):
        d = []
        for _ in range(budget // n_frames):
            if gts[fi] and rng.random() < 0.6:
                x0, y0, x1, y1 = gts[fi][int(rng.integers(len(gts[fi])))]
                j = rng.normal(0, 3, 4)
                box = (x0 + j[0], y0 + j[1], x1 + j[2], y1 + j[3])
            else:
                x, y = rng.uniform(0, 40, 2)
                box = (x, y, x + 10, y + 10)
            d.append(Detection(tuple(float(v) for v in box), float(np.round(rng.random(), 2))))
        dets.append(d)
    return dets, gts


def check_ap(n: int = 50, seed: int = 0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        dets, gts = random_ap_instance(rng)
        # distinct scores keep the brute force free of tie-order ambiguity
        flat = [d for fd in dets for d in fd]
        scores = rng.permutation(len(flat)) / max(1, len(flat)) + 0.01
        it = iter(scores)
        dets = [[Detection(d.box, float(next(it))) for d in fd] for fd in dets]
        a, b = average_precision(dets, gts), brute_force_ap(dets, gts)
        assert abs(a - b) <= 1e-12, (a, b)


def check_gradients(seeds: int = 3):
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        x = ad.Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
        w = ad.Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        b = ad.Tensor(rng.normal(size=(4,)), requires_grad=True)
        err = ad.finite_diff_check(lambda x, w, b: ad.total(ad.square(ad.conv2d(x, w, b, 2, 1))), [x, w, b])
        assert err < 1e-4, f"conv2d gradient error {err}"
        f = ad.Tensor(rng.normal(size=(2, 5, 5)), requires_grad=True)
        fl = ad.Tensor(rng.uniform(-1.3, 1.3, size=(2, 5, 5)) + 0.17, requires_grad=True)
        err = ad.finite_diff_check(lambda f, fl: ad.total(ad.square(ad.bilinear_warp(f, fl))), [f, fl])
        assert err < 1e-4, f"bilinear gradient error {err}"


def check_losses():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(4, 3, 3))
    assert correlation_score(f, f) == 0.0
    assert correlation_score(f, f + 1.0) == 1.0
    assert float(decision_loss(0.3, ad.Tensor(np.array([0.3]))).data) == 0.0
    assert float(feature_loss([ad.Tensor(np.array(1.0)), ad.Tensor(np.array(3.0))]).data) == 2.0


def check_checkpoint():
    rng = np.random.default_rng(0)
    ck = Checkpoint({"a.w": rng.normal(size=(2, 3)).astype(np.float32), "b": np.zeros(4, np.float32)})
    data = encode_checkpoint(ck)
    back = decode_checkpoint(data)
    assert encode_checkpoint(back) == data


def check_kernels():
    rng = np.random.default_rng(0)
    nb, npk = kernels.NUMBA_KERNELS, kernels.NUMPY_KERNELS
    d = rng.normal(size=(2, 4, 4, 3, 3, 3))
    assert np.array_equal(nb["col2im"](d, 10, 10, 2), npk["col2im"](d, 10, 10, 2))
    x = rng.normal(size=(2, 3, 9, 9))
    assert np.array_equal(nb["im2col"](x, 3, 2, 4, 4), npk["im2col"](x, 3, 2, 4, 4))


SUITES = {
    "ap-oracle": check_ap,
    "gradients": check_gradients,
    "loss-identities": check_losses,
    "checkpoint-roundtrip": check_checkpoint,
    "kernel-backends": check_kernels,
}


def run_selftest(log=print) -> bool:
    ok = True
    for name, fn in SUITES.items():
        try:
            fn()
            log(f"PASS {name}")
        except Exception:  # report every failing suite, keep going
            ok = False
            log(f"FAIL {name}\n{traceback.format_exc()}")
    return ok


__all__ = ["brute_force_ap", "random_ap_instance", "run_selftest", "SUITES"]
