import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from sdfocc.geometry import Intrinsics  # noqa: E402
from sdfocc.scenes import SynthConfig, default_scene, synthesize  # noqa: E402


def tiny_synth_config():
    """Six 32x24 frames of the default scene, two held out, 8^3 ground truth."""
    return SynthConfig(
        scene=default_scene(),
        intrinsics=Intrinsics(16.0, 16.0, 15.5, 11.5, 32, 24),
        trajectory=dict(kind="straight", frames=6, spacing=0.4, start=(0.0, 0.4, 1.6),
                        heading=0.0, pitch=np.deg2rad(12.0), radius=20.0),
        heldout=2, grid_resolution=8, supersample=1,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    synthesize(tiny_synth_config(), str(out))
    return out


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    from sdfocc.scenes import default_synth_config

    out = tmp_path_factory.mktemp("desk")
    synthesize(default_synth_config(), str(out))
    return out


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(acceptance_log.LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
