import sys

import numpy as np
import pytest

from stdaffect.datamodel import FrameRecord, SubjectSequence


def make_sequence(video_id, frame_indices, dim=3, valid=None, seed=0, value_fn=None):
    rng = np.random.default_rng(seed)
    frames = []
    for k, idx in enumerate(frame_indices):
        ok = True if valid is None else valid[k]
        vec = value_fn(idx) if value_fn else rng.normal(size=dim)
        frames.append(
            FrameRecord(video_id, idx, valid=ok, image_feature=np.asarray(vec, float) if ok else None)
        )
    return SubjectSequence(video_id, frames)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
