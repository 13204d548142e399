import numpy as np
import pytest

from stcd.detector import DetectorConfig, detect_frame
from stcd.evalbench import observed_scores, run_scheduler
from stcd.flops import FlopModel
from stcd.scheduler import baseline_decide, grey_mse, parse_mode, scheduler_init, scheduler_step
from stcd.synthgen import Frame
from stcd.training import stcd_params


def _const_frame(v, idx=0):
    return Frame(np.full((64, 64), v, dtype=np.uint8), [], idx)


def test_initial_state_and_first_frame_is_key(random_ckpt, short_videos):
    for tau in (-1e9, 0.0, 1e9):
        st = scheduler_init(random_ckpt, tau)
        assert st.key_count == 0 and st.frames_seen == 0
        _, diag = st.step(short_videos[0].frames[0])
        assert diag.path == "key" and diag.s_i is None


def test_parse_mode():
    assert parse_mode("fixed(5)") == ("fixed", 5)
    assert parse_mode("grey_corr(0.01)") == ("grey_corr", 0.01)
    assert parse_mode("all_key") == ("all_key", None)
    for bad in ("fixed", "fixed(0)", "grey_corr(-1)", "random", "all_key(3)"):
        with pytest.raises(ValueError):
            parse_mode(bad)


def test_all_key_reproduces_framewise(random_ckpt, short_videos):
    st = scheduler_init(random_ckpt, float("nan"), "all_key")
    params = stcd_params(random_ckpt)
    for seq in short_videos:
        dets, diag, _ = run_scheduler(st, seq)
        assert all(d.path == "key" for d in diag)
        assert dets == [detect_frame(f, params, DetectorConfig()) for f in seq.frames]


def test_strict_threshold_at_equal_score(random_ckpt, short_videos):
    seq = short_videos[0]
    st = scheduler_init(random_ckpt, 0.0)
    st.step(seq.frames[0])
    _, d1 = st.step(seq.frames[1])
    # rerun with tau exactly equal to the observed score
    st = scheduler_init(random_ckpt, d1.s_i)
    st.step(seq.frames[0])
    _, tie = st.step(seq.frames[1])
    assert tie.s_i == d1.s_i and tie.path == "nonkey"
    st = scheduler_init(random_ckpt, np.nextafter(d1.s_i, -np.inf))
    st.step(seq.frames[0])
    assert st.step(seq.frames[1])[1].path == "key"


def test_huge_tau_keeps_only_first_frame(random_ckpt, short_videos):
    st = scheduler_init(random_ckpt, 1e9)
    for seq in short_videos:
        _, diag, _ = run_scheduler(st, seq)
        assert [d.path for d in diag] == ["key"] + ["nonkey"] * (len(seq.frames) - 1)
        assert len(diag) == len(seq.frames)
        assert st.key_count == 1 and st.frames_seen == len(seq.frames)


def test_fixed_period_keys():
    st = scheduler_init(_ckpt_params_only(), 0.0, "fixed(5)")
    paths = [st.step(_const_frame(i, i), detect=False)[1].path for i in range(13)]
    assert [i for i, p in enumerate(paths) if p == "key"] == [0, 5, 10]


def _ckpt_params_only():
    from stcd.autodiff import RngStream
    from stcd.detector import init_detector_params
    from stcd.temporal import init_temporal_params

    p = init_detector_params(DetectorConfig(), RngStream(1))
    p.update(init_temporal_params(RngStream(2)))
    return p


def test_grey_corr_examples():
    a, b = _const_frame(100), _const_frame(100)
    assert grey_mse(a, b) == 0.0
    assert baseline_decide("grey_corr", 1e-6, a, b)[0] is False
    # 0.1 everywhere in normalized units: 25.5 gray levels is not an integer, so build it directly
    c = Frame(np.zeros((64, 64), np.uint8), [], 0)
    d = Frame(np.zeros((64, 64), np.uint8), [], 1)
    d.normalized = lambda: np.full((64, 64), 0.1, np.float32)  # noqa: E731
    mse = grey_mse(c, d)
    assert mse == pytest.approx(0.01, rel=1e-6)
    assert baseline_decide("grey_corr", 0.0099, c, d)[0] is True
    assert baseline_decide("grey_corr", 0.0101, c, d)[0] is False


def test_parameters_unchanged_by_inference(random_ckpt, short_videos):
    before = {k: v.copy() for k, v in random_ckpt.tensors.items()}
    st = scheduler_init(random_ckpt, 0.0)
    run_scheduler(st, short_videos[0])
    for k, v in before.items():
        assert np.array_equal(random_ckpt.tensors[k], v)
        assert np.array_equal(st.params[k].data, v)


def test_routing_only_matches_full_run(random_ckpt, short_videos):
    tau = float(np.median(observed_scores(random_ckpt, short_videos)))
    st = scheduler_init(random_ckpt, tau)
    for seq in short_videos:
        _, full, _ = run_scheduler(st, seq)
        _, light, _ = run_scheduler(st, seq, detect=False)
        assert [(d.path, d.s_i, d.flops_charged) for d in full] == [(d.path, d.s_i, d.flops_charged) for d in light]


def test_flops_charging(random_ckpt, short_videos):
    fm = FlopModel()
    st = scheduler_init(random_ckpt, 1e9)
    _, diag, _ = run_scheduler(st, short_videos[0])
    assert diag[0].flops_charged == fm.framewise
    assert all(d.flops_charged == fm.nonkey_path for d in diag[1:])
    st = scheduler_init(random_ckpt, -1e9)
    _, diag, _ = run_scheduler(st, short_videos[0])
    assert all(d.flops_charged == fm.key_path for d in diag[1:])


def test_uninitialised_state_and_bad_frame(random_ckpt):
    with pytest.raises(ValueError):
        scheduler_step(None, _const_frame(0))
    st = scheduler_init(random_ckpt, 0.0)
    with pytest.raises(ValueError):
        st.step(Frame(np.zeros((32, 32), np.uint8), [], 0))
    with pytest.raises(ValueError):
        scheduler_init(random_ckpt, 0.0, warp_kind="optical")


def test_bilinear_warp_kind_runs(random_ckpt, short_videos):
    st = scheduler_init(random_ckpt, 1e9, warp_kind="bilinear")
    dets, diag, _ = run_scheduler(st, short_videos[0])
    assert len(dets) == len(diag) == len(short_videos[0].frames)
