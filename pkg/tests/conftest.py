import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import numpy as np
import pytest

from stcd.autodiff import RngStream
from stcd.checkpoint import Checkpoint
from stcd.detector import DetectorConfig, init_detector_params
from stcd.synthgen import GenConfig, gen_videos
from stcd.temporal import init_temporal_params


@pytest.fixture(scope="session")
def random_ckpt():
    """Untrained full checkpoint: enough for routing and equality contracts."""
    tensors = {k: v.data.copy() for k, v in init_detector_params(DetectorConfig(), RngStream(1)).items()}
    tensors.update({k: v.data.copy() for k, v in init_temporal_params(RngStream(2)).items()})
    return Checkpoint(tensors)


@pytest.fixture(scope="session")
def short_videos():
    return gen_videos(GenConfig(seed=4, seq_length=(10, 14)), 3, "sched-test")


@pytest.fixture(scope="session")
def small_ckpt():
    """Briefly trained detector plus random temporal networks, so detections are non-trivial."""
    from stcd.detector import train_detector
    from stcd.synthgen import gen_stills

    det = train_detector(gen_stills(GenConfig(seed=8), 128), DetectorConfig(epochs=10))
    tensors = dict(det.tensors)
    tensors.update({k: v.data.copy() for k, v in init_temporal_params(RngStream(2)).items()})
    return Checkpoint(tensors)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
