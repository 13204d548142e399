"""Inner loops that dominate runtime.

Every kernel exists twice: a numba ``@njit`` version (``_nb_*``) and a
pure-numpy version (``_np_*``). The public name is bound once at import time
according to :mod:`stcd._accel`. Both versions accumulate in the same order,
so patch extraction and its adjoint agree bit-for-bit across backends.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# patch extraction (im2col) and its adjoint (col2im)
# ---------------------------------------------------------------------------


def _np_im2col(xp, k, stride, ho, wo):
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


@njit(cache=True)
def _nb_im2col(xp, k, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, ho, wo, c, k, k), dtype=xp.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    for ki in range(k):
                        for kj in range(k):
                            cols[b, i, j, ch, ki, kj] = xp[b, ch, i * stride + ki, j * stride + kj]
    return cols


def _np_col2im(dcols, hp, wp, stride):
    n, ho, wo, c, k, _ = dcols.shape
    out = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + stride * (ho - 1) + 1 : stride, kj : kj + stride * (wo - 1) + 1 : stride] += (
                dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            )
    return out


@njit(cache=True)
def _nb_col2im(dcols, hp, wp, stride):
    n, ho, wo, c, k = dcols.shape[0], dcols.shape[1], dcols.shape[2], dcols.shape[3], dcols.shape[4]
    out = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    # (ki, kj) outermost: same accumulation order as the numpy path
    for ki in range(k):
        for kj in range(k):
            for b in range(n):
                for ch in range(c):
                    for i in range(ho):
                        for j in range(wo):
                            out[b, ch, i * stride + ki, j * stride + kj] += dcols[b, i, j, ch, ki, kj]
    return out


# ---------------------------------------------------------------------------
# bilinear sampling with border clamping
# ---------------------------------------------------------------------------


def _sample_coords(flow, h, w):
    ys = np.arange(h, dtype=flow.dtype)[:, None]
    xs = np.arange(w, dtype=flow.dtype)[None, :]
    rx = xs + flow[:, 0]
    ry = ys + flow[:, 1]
    sx = np.clip(rx, 0, w - 1)
    sy = np.clip(ry, 0, h - 1)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = sx - x0
    wy = sy - y0
    inx = (rx > 0) & (rx < w - 1)
    iny = (ry > 0) & (ry < h - 1)
    return x0, x1, y0, y1, wx, wy, inx, iny


def _np_bilinear_fwd(feat, flow):
    n, c, h, w = feat.shape
    x0, x1, y0, y1, wx, wy, _, _ = _sample_coords(flow, h, w)
    out = np.empty_like(feat)
    for b in range(n):
        f = feat[b]
        top = f[:, y0[b], x0[b]] * (1 - wx[b]) + f[:, y0[b], x1[b]] * wx[b]
        bot = f[:, y1[b], x0[b]] * (1 - wx[b]) + f[:, y1[b], x1[b]] * wx[b]
        out[b] = top * (1 - wy[b]) + bot * wy[b]
    return out


def _np_bilinear_bwd(feat, flow, gout):
    n, c, h, w = feat.shape
    x0, x1, y0, y1, wx, wy, inx, iny = _sample_coords(flow, h, w)
    gfeat = np.zeros_like(feat)
    gflow = np.zeros_like(flow)
    for b in range(n):
        f = feat[b]
        g = gout[b]
        gf = gfeat[b].reshape(c, h * w)
        for yy, xx, wgt in (
            (y0[b], x0[b], (1 - wx[b]) * (1 - wy[b])),
            (y0[b], x1[b], wx[b] * (1 - wy[b])),
            (y1[b], x0[b], (1 - wx[b]) * wy[b]),
            (y1[b], x1[b], wx[b] * wy[b]),
        ):
            idx = (yy * w + xx).ravel()
            contrib = (g * wgt).reshape(c, h * w)
            for ch in range(c):
                np.add.at(gf[ch], idx, contrib[ch])
        f00 = f[:, y0[b], x0[b]]
        f01 = f[:, y0[b], x1[b]]
        f10 = f[:, y1[b], x0[b]]
        f11 = f[:, y1[b], x1[b]]
        dsx = (f01 - f00) * (1 - wy[b]) + (f11 - f10) * wy[b]
        dsy = (f10 - f00) * (1 - wx[b]) + (f11 - f01) * wx[b]
        gflow[b, 0] = np.where(inx[b], (g * dsx).sum(axis=0), 0)
        gflow[b, 1] = np.where(iny[b], (g * dsy).sum(axis=0), 0)
    return gfeat, gflow


@njit(cache=True)
def _nb_bilinear_fwd(feat, flow):
    n, c, h, w = feat.shape
    out = np.empty_like(feat)
    for b in range(n):
        for y in range(h):
            for x in range(w):
                sx = min(max(x + flow[b, 0, y, x], 0.0), w - 1.0)
                sy = min(max(y + flow[b, 1, y, x], 0.0), h - 1.0)
                x0 = int(np.floor(sx))
                y0 = int(np.floor(sy))
                x1 = min(x0 + 1, w - 1)
                y1 = min(y0 + 1, h - 1)
                wx = sx - x0
                wy = sy - y0
                for ch in range(c):
                    top = feat[b, ch, y0, x0] * (1 - wx) + feat[b, ch, y0, x1] * wx
                    bot = feat[b, ch, y1, x0] * (1 - wx) + feat[b, ch, y1, x1] * wx
                    out[b, ch, y, x] = top * (1 - wy) + bot * wy
    return out


@njit(cache=True)
def _nb_bilinear_bwd(feat, flow, gout):
    n, c, h, w = feat.shape
    gfeat = np.zeros_like(feat)
    gflow = np.zeros_like(flow)
    for b in range(n):
        for y in range(h):
            for x in range(w):
                rx = x + flow[b, 0, y, x]
                ry = y + flow[b, 1, y, x]
                sx = min(max(rx, 0.0), w - 1.0)
                sy = min(max(ry, 0.0), h - 1.0)
                x0 = int(np.floor(sx))
                y0 = int(np.floor(sy))
                x1 = min(x0 + 1, w - 1)
                y1 = min(y0 + 1, h - 1)
                wx = sx - x0
                wy = sy - y0
                dx_acc = 0.0
                dy_acc = 0.0
                for ch in range(c):
                    g = gout[b, ch, y, x]
                    gfeat[b, ch, y0, x0] += g * ((1 - wx) * (1 - wy))
                    gfeat[b, ch, y0, x1] += g * (wx * (1 - wy))
                    gfeat[b, ch, y1, x0] += g * ((1 - wx) * wy)
                    gfeat[b, ch, y1, x1] += g * (wx * wy)
                    f00 = feat[b, ch, y0, x0]
                    f01 = feat[b, ch, y0, x1]
                    f10 = feat[b, ch, y1, x0]
                    f11 = feat[b, ch, y1, x1]
                    dx_acc += g * ((f01 - f00) * (1 - wy) + (f11 - f10) * wy)
                    dy_acc += g * ((f10 - f00) * (1 - wx) + (f11 - f01) * wx)
                if rx > 0 and rx < w - 1:
                    gflow[b, 0, y, x] = dx_acc
                if ry > 0 and ry < h - 1:
                    gflow[b, 1, y, x] = dy_acc
    return gfeat, gflow


# ---------------------------------------------------------------------------
# greedy non-maximum suppression over boxes pre-sorted by priority
# ---------------------------------------------------------------------------


def _np_greedy_nms(boxes, iou_thr, max_keep):
    n = boxes.shape[0]
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    suppressed = np.zeros(n, dtype=np.bool_)
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        if len(keep) >= max_keep:
            break
        rest = np.arange(i + 1, n)
        iw = np.minimum(boxes[i, 2], boxes[rest, 2]) - np.maximum(boxes[i, 0], boxes[rest, 0])
        ih = np.minimum(boxes[i, 3], boxes[rest, 3]) - np.maximum(boxes[i, 1], boxes[rest, 1])
        inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
        iou = inter / (areas[i] + areas[rest] - inter)
        suppressed[rest[iou >= iou_thr]] = True
    return np.asarray(keep, dtype=np.int64)


@njit(cache=True)
def _nb_greedy_nms(boxes, iou_thr, max_keep):
    n = boxes.shape[0]
    suppressed = np.zeros(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    nk = 0
    for i in range(n):
        if suppressed[i]:
            continue
        keep[nk] = i
        nk += 1
        if nk >= max_keep:
            break
        ai = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        for j in range(i + 1, n):
            if suppressed[j]:
                continue
            iw = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
            ih = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
            inter = max(iw, 0.0) * max(ih, 0.0)
            aj = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
            if inter / (ai + aj - inter) >= iou_thr:
                suppressed[j] = True
    return keep[:nk]


if USE_NUMBA:
    im2col = _nb_im2col
    col2im = _nb_col2im
    bilinear_fwd = _nb_bilinear_fwd
    bilinear_bwd = _nb_bilinear_bwd
    greedy_nms = _nb_greedy_nms
else:
    im2col = _np_im2col
    col2im = _np_col2im
    bilinear_fwd = _np_bilinear_fwd
    bilinear_bwd = _np_bilinear_bwd
    greedy_nms = _np_greedy_nms

NUMPY_KERNELS = {
    "im2col": _np_im2col,
    "col2im": _np_col2im,
    "bilinear_fwd": _np_bilinear_fwd,
    "bilinear_bwd": _np_bilinear_bwd,
    "greedy_nms": _np_greedy_nms,
}
NUMBA_KERNELS = {
    "im2col": _nb_im2col,
    "col2im": _nb_col2im,
    "bilinear_fwd": _nb_bilinear_fwd,
    "bilinear_bwd": _nb_bilinear_bwd,
    "greedy_nms": _nb_greedy_nms,
}
