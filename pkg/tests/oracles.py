"""Reference implementations written independently of the package.

Everything here is deliberately naive (explicit loops, direct formulas) so
it can serve as ground truth for the vectorized code under test.
"""
import math

import numpy as np


def numeric_grad(fn, arrays, k, idx, h=1e-6):
    """Central difference of scalar ``fn(*arrays)`` w.r.t. arrays[k][idx]."""
    a = arrays[k]
    old = a[idx]
    a[idx] = old + h
    fp = fn(*arrays)
    a[idx] = old - h
    fm = fn(*arrays)
    a[idx] = old
    return (fp - fm) / (2 * h)


def pick_indices(shape, rng, max_elems):
    n = int(np.prod(shape))
    flat = np.arange(n) if max_elems is None or n <= max_elems else rng.choice(n, size=max_elems, replace=False)
    return [np.unravel_index(int(i), shape) for i in flat]


def check_gradients(build, arrays, rng, max_elems=None, rtol=1e-4, atol=1e-6, h=1e-6):
    """Compare package backward() against central differences.

    ``build(*tensors)`` returns a scalar Tensor. Returns the worst
    ``|a - n| - rtol*|n|`` excess over atol (<= 0 means pass) and a message.
    """
    from stcd.autodiff import Tensor

    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    out.backward()
    analytic = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, tensors)]

    def f(*arrs):
        return float(build(*[Tensor(x) for x in arrs]).data)

    worst, where = -np.inf, None
    for k, a in enumerate(arrays):
        for idx in pick_indices(a.shape, rng, max_elems):
            n = numeric_grad(f, arrays, k, idx, h)
            an = analytic[k][idx]
            excess = abs(an - n) - (atol + rtol * abs(n))
            if excess > worst:
                worst, where = excess, (k, idx, an, n)
    return worst, where


def naive_conv2d(x, w, b, stride, pad):
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((cin, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0 if b is None else float(b[o])
                for c in range(cin):
                    for u in range(k):
                        for v in range(k):
                            acc += w[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = acc
    return out


def naive_bilinear(feat, flow):
    c, h, w = feat.shape
    out = np.zeros_like(feat, dtype=np.float64)
    for y in range(h):
        for x in range(w):
            sx = min(max(x + flow[0, y, x], 0.0), w - 1.0)
            sy = min(max(y + flow[1, y, x], 0.0), h - 1.0)
            x0, y0 = int(math.floor(sx)), int(math.floor(sy))
            x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
            ax, ay = sx - x0, sy - y0
            for ch in range(c):
                out[ch, y, x] = (
                    (1 - ax) * (1 - ay) * feat[ch, y0, x0]
                    + ax * (1 - ay) * feat[ch, y0, x1]
                    + (1 - ax) * ay * feat[ch, y1, x0]
                    + ax * ay * feat[ch, y1, x1]
                )
    return out


def box_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def brute_force_ap(dets, gts, iou_thr=0.5):
    """AP by enumerating every score threshold.

    ``dets[f]`` is a list of (box, score) for frame f, scores distinct.
    For each cut-point t the detections with score >= t are matched from
    scratch (descending score, each to the best unmatched GT with IoU >=
    iou_thr); precision and recall at every cut give the PR curve, whose
    monotone envelope is integrated over recall.
    """
    n_gt = sum(len(g) for g in gts)
    scores = sorted({s for fd in dets for _, s in fd}, reverse=True)
    curve = []
    for t in scores:
        kept = sorted(((s, f, box) for f, fd in enumerate(dets) for box, s in fd if s >= t), key=lambda r: -r[0])
        taken = [[False] * len(g) for g in gts]
        tp = 0
        for _, f, box in kept:
            best, bj = -1.0, None
            for j, g in enumerate(gts[f]):
                v = box_iou(box, g)
                if not taken[f][j] and v >= iou_thr and v > best:
                    best, bj = v, j
            if bj is not None:
                taken[f][bj] = True
                tp += 1
        curve.append((tp / n_gt, tp / len(kept)))
    ap, last_r = 0.0, 0.0
    for i, (r, _) in enumerate(curve):
        if r > last_r:
            ap += (r - last_r) * max(p for _, p in curve[i:])
            last_r = r
    return ap


def reference_lr(epoch, warmup=10, base=1e-3, decay=0.9):
    dec = 0.0 if epoch < warmup else base * decay ** (epoch - warmup)
    return dec, base * decay**epoch, base * decay**epoch


def reference_conv_flops(cin, cout, k, ho, wo):
    return 2 * cin * cout * k * k * ho * wo


def reference_focal(logit, y, alpha, gamma):
    p = 1 / (1 + math.exp(-logit))
    pt = p if y == 1 else 1 - p
    at = alpha if y == 1 else 1 - alpha
    return -at * (1 - pt) ** gamma * math.log(pt)


def reference_adam(theta, g, lr, b1, b2, eps, steps):
    m = v = 0.0
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta
