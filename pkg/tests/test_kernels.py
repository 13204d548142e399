import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_bilinear
from stcd import kernels

NB, NP = kernels.NUMBA_KERNELS, kernels.NUMPY_KERNELS


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(3, 9), st.sampled_from([1, 3]), st.integers(1, 2), st.integers(0, 2**31 - 1))
def test_im2col_col2im_backends_bit_identical(n, c, size, k, stride, seed):
    rng = np.random.default_rng(seed)
    if size < k:
        return
    ho = (size - k) // stride + 1
    xp = rng.normal(size=(n, c, size, size)).astype(np.float32)
    a, b = NB["im2col"](xp, k, stride, ho, ho), NP["im2col"](xp, k, stride, ho, ho)
    assert np.array_equal(a, b)
    d = rng.normal(size=a.shape).astype(np.float32)
    assert np.array_equal(NB["col2im"](d, size, size, stride), NP["col2im"](d, size, size, stride))


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 7, 7))
    cols = NP["im2col"](x, 3, 2, 3, 3)
    d = rng.normal(size=cols.shape)
    assert np.isclose(np.sum(cols * d), np.sum(x * NP["col2im"](d, 7, 7, 2)), rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(2, 6), st.integers(2, 6), st.floats(0.1, 3.0), st.integers(0, 2**31 - 1))
def test_bilinear_backends_agree_with_naive_loops(c, h, w, spread, seed):
    rng = np.random.default_rng(seed)
    feat = rng.normal(size=(1, c, h, w))
    flow = rng.normal(scale=spread, size=(1, 2, h, w))
    ref = naive_bilinear(feat[0], flow[0])
    for impl in (NB, NP):
        np.testing.assert_allclose(impl["bilinear_fwd"](feat, flow)[0], ref, rtol=1e-12, atol=1e-12)
    g = rng.normal(size=feat.shape)
    ga, gb = NB["bilinear_bwd"](feat, flow, g), NP["bilinear_bwd"](feat, flow, g)
    for u, v in zip(ga, gb):
        np.testing.assert_allclose(u, v, rtol=1e-10, atol=1e-12)


def test_bilinear_integer_flow_is_clamped_shift():
    feat = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    flow = np.zeros((1, 2, 4, 4))
    flow[0, 0] = 1.0
    out = kernels.bilinear_fwd(feat, flow)[0, 0]
    expect = np.concatenate([feat[0, 0, :, 1:], feat[0, 0, :, 3:]], axis=1)
    assert np.array_equal(out, expect)
    assert np.array_equal(kernels.bilinear_fwd(feat, np.zeros_like(flow)), feat)


def _brute_nms(boxes, thr, max_keep):
    keep = []
    for i in range(len(boxes)):
        ok = True
        for j in keep:
            a, b = boxes[i], boxes[j]
            iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
            ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
            inter = iw * ih
            u = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
            if inter / u >= thr:
                ok = False
                break
        if ok:
            keep.append(i)
            if len(keep) >= max_keep:
                break
    return keep


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 25), st.floats(0.05, 0.95), st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_greedy_nms_backends_match_brute_force(n, thr, max_keep, seed):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 40, size=(n, 2))
    wh = rng.uniform(2, 20, size=(n, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)
    ref = _brute_nms(boxes, thr, max_keep)
    assert list(NB["greedy_nms"](boxes, thr, max_keep)) == ref
    assert list(NP["greedy_nms"](boxes, thr, max_keep)) == ref
