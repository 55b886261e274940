import numpy as np
import pytest

from drpriv.dataset import SyntheticSpec, assign_access_levels, split_train_test, synth_dataset

# narrow networks keep unit tests fast; acceptance tests use the defaults
TINY_WIDTHS = {"g_channels": (2, 3), "kernel": 3, "g_hidden": 8, "r_hidden": 8,
               "d_hidden": (8, 6, 4), "c_hidden": (6, 5, 4)}


@pytest.fixture(scope="session")
def tiny_split():
    ds = synth_dataset(SyntheticSpec(num_subjects=4, images_per_subject=10, h=8, w=8, noise_std=0.05, seed=0))
    ds = assign_access_levels(ds, 2, 0)
    return split_train_test(ds, 0.2, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria append (criterion, passed, detail); printed after the run
ACCEPTANCE_RESULTS = []


@pytest.fixture
def criterion():
    def record(name, passed, detail="", status=None):
        status = status or ("PASS" if passed else "FAIL")
        line = f"{name}: {status}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_RESULTS.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
