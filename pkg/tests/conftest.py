import numpy as np
import pytest
import torch

from pedgen.motion import Motion
from pedgen.rotations import random_rotations
from pedgen.skeleton import N_BODY_JOINTS

torch.set_num_threads(1)


def random_motion(T: int, gen: np.random.Generator, scale: float = 1.0) -> Motion:
    trans = np.cumsum(gen.normal(0.0, 0.05 * scale, (T, 3)), axis=0)
    root = random_rotations(T, gen)
    body = random_rotations(T * N_BODY_JOINTS, gen).reshape(T, N_BODY_JOINTS, 3, 3)
    return Motion(trans, root, body, np.ones(T, dtype=bool))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data():
    from pedgen.rng import Stream
    from pedgen.synth import generate_dataset
    return generate_dataset(2, 24, Stream(0).split("tiny"), n_frames=16)


@pytest.fixture(scope="session")
def tiny_generator(tiny_data):
    """A few optimizer steps of a small goal/shape/scene model: enough to be 'trained'."""
    from pedgen.diffusion import build_schedule
    from pedgen.model import DenoiserConfig
    from pedgen.rng import Stream
    from pedgen.training import TrainConfig, train
    cfg = DenoiserConfig(n_blocks=1, dim=32, heads=4, max_frames=16, use_scene=True, use_shape=True, use_goal=True)
    gen, _ = train(tiny_data.records, cfg, TrainConfig(batch_size=8, max_steps=20), build_schedule(100),
                   Stream(0).split("tiny-train"))
    return gen


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
        ACCEPTANCE[n] = line
        print("\n" + line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
