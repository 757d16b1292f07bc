import numpy as np
import pytest

from fedskew.data import (
    CIFAR_RECORD,
    CIFAR_RECORDS_PER_FILE,
    CIFAR_TEST_FILE,
    CIFAR_TRAIN_FILES,
    SyntheticSpec,
    generate_synthetic,
)


@pytest.fixture(scope="session")
def cifar_labels():
    """CIFAR-10-shaped training labels: 5,000 of each of 10 classes."""
    return np.repeat(np.arange(10), 5000)


@pytest.fixture(scope="session")
def small_data():
    return generate_synthetic(
        SyntheticSpec(num_classes=4, input_dim=6, train_per_class=30, test_per_class=20, seed=3)
    )


def write_cifar_batch(path, labels, rng):
    records = np.empty((CIFAR_RECORDS_PER_FILE, CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = rng.integers(0, 256, size=(CIFAR_RECORDS_PER_FILE, CIFAR_RECORD - 1))
    records.tofile(path)
    return records


@pytest.fixture(scope="session")
def cifar_dir(tmp_path_factory):
    """Six full-size CIFAR-10 binary batches with random pixels.

    Every training file holds 1,000 examples per class, as does the test file.
    """
    root = tmp_path_factory.mktemp("cifar-10-batches-bin")
    rng = np.random.default_rng(1234)
    for name in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,):
        labels = rng.permutation(np.repeat(np.arange(10), 1000)).astype(np.uint8)
        write_cifar_batch(root / name, labels, rng)
    return root


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, title, ok, detail):
        lines.append(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
        assert ok, f"criterion {number} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
