import numpy as np
import pytest

from oracles import reference_lr
from stcd.checkpoint import Checkpoint
from stcd.detector import DetectorConfig, init_detector_params
from stcd.autodiff import RngStream
from stcd.synthgen import GenConfig, gen_videos
from stcd.training import TrainConfig, lr_schedule, sample_pairs, stcd_params, train_stcd


@pytest.fixture(scope="module")
def videos():
    return gen_videos(GenConfig(seed=2, seq_length=(60, 60)), 5, "train-test", labeled=False)


@pytest.fixture(scope="module")
def detector():
    params = init_detector_params(DetectorConfig(), RngStream(5))
    return Checkpoint({k: v.data.copy() for k, v in params.items()}, meta={"kind": "detector"})


@pytest.mark.parametrize("epoch", range(0, 30))
def test_lr_schedule_matches_reference(epoch):
    got = lr_schedule(epoch, TrainConfig())
    want = reference_lr(epoch, warmup=10, base=1e-3, decay=0.9)
    assert np.allclose(got, want, rtol=1e-12, atol=0)


def test_lr_schedule_examples():
    assert lr_schedule(0) == (0.0, 0.001, 0.001)
    assert lr_schedule(1)[1] == pytest.approx(0.0009, rel=1e-12)
    assert lr_schedule(10)[0] == pytest.approx(0.001, rel=1e-12)
    with pytest.raises(ValueError):
        lr_schedule(-1)


def test_sampler_counts_offsets_and_determinism(videos):
    pairs = sample_pairs(videos[:1])
    assert len(pairs) == 20
    assert all(1 <= abs(p.offset) <= 20 for p in pairs)
    assert all(p.nonkey.frame_index == p.key.frame_index + p.offset for p in pairs)
    again = sample_pairs(videos[:1])
    assert [(p.key.frame_index, p.offset) for p in pairs] == [(p.key.frame_index, p.offset) for p in again]
    other = sample_pairs(videos[:1], TrainConfig(seed=9))
    assert [p.offset for p in other] != [p.offset for p in pairs]


def test_sampler_rejects_short_sequences():
    short = gen_videos(GenConfig(seed=0, seq_length=(15, 15)), 1, "short", labeled=False)
    with pytest.raises(ValueError, match="frames"):
        sample_pairs(short)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(key_fraction=1.5).validate()
    with pytest.raises(ValueError):
        TrainConfig(warmup_epochs=5, total_epochs=3).validate()


@pytest.fixture(scope="module")
def warmup_run(videos, detector):
    pairs = sample_pairs(videos)
    cfg = TrainConfig(total_epochs=3, warmup_epochs=3, flow_epochs=0)
    return pairs, cfg, train_stcd(pairs, detector, cfg)


def test_warmup_decreases_feature_loss(warmup_run):
    pairs, _, ck = warmup_run
    assert len(pairs) == 100
    hist = ck.meta["history"]["feat"]
    assert hist[-1] < hist[0]
    assert all(d is None for d in ck.meta["history"]["dec"])


def test_detector_weights_are_frozen(warmup_run, detector):
    ck = warmup_run[2]
    for k, v in detector.tensors.items():
        assert np.array_equal(ck.tensors[k], v)
    stcd_params(ck)


def test_decision_weights_untouched_during_warmup(warmup_run):
    from stcd.temporal import init_temporal_params

    ck = warmup_run[2]
    init = init_temporal_params(RngStream(0).child("temporal-init"))
    for k, v in init.items():
        if k.startswith("decision."):
            assert np.array_equal(ck.tensors[k], v.data)


def test_training_is_deterministic(warmup_run, detector):
    pairs, cfg, ck = warmup_run
    again = train_stcd(pairs, detector, cfg)
    for k, v in ck.tensors.items():
        assert np.array_equal(again.tensors[k], v), k


def test_joint_phase_trains_decision_net(videos, detector):
    pairs = sample_pairs(videos[:2])
    ck = train_stcd(pairs, detector, TrainConfig(total_epochs=2, warmup_epochs=1, flow_epochs=1))
    dec = ck.meta["history"]["dec"]
    assert dec[0] is None and dec[1] is not None
    assert len(ck.meta["history"]["flow"]) == 1
