import hypothesis
import numpy as np
import pytest
import torch

from reidtl.data import SyntheticSpec, generate_synthetic

torch.set_num_threads(1)
np.seterr(all="warn")

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def tiny_ds():
    return generate_synthetic(SyntheticSpec(num_identities=6, images_per_identity_per_camera=2,
                                            num_cameras=2, seed=3))


@pytest.fixture
def noisy_ds():
    return generate_synthetic(SyntheticSpec(num_identities=10, images_per_identity_per_camera=3,
                                            num_cameras=2, cross_view_noise=0.1, seed=11))


BENCH_SEEDS = range(5)
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def cotrain_rows():
    from reidtl.experiments import cotrain_ablation

    return [cotrain_ablation(s) for s in BENCH_SEEDS]


@pytest.fixture(scope="session")
def finetune_rows():
    from reidtl.experiments import finetune_ablation

    return [finetune_ablation(s) for s in BENCH_SEEDS]
