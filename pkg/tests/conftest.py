import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from disaster_vsa.manifest import Dataset, ImageRecord, TaskSpec, builtin_task_spec  # noqa: E402

ABC = TaskSpec("task1", ("A", "B", "C"), "single_label")
SEVEN = TaskSpec("task2", tuple("ABCDEFG"), "multi_label")


def make_dataset(spec, label_lists, split="train"):
    records = tuple(ImageRecord(f"img{i}.jpg", frozenset(ls)) for i, ls in enumerate(label_lists))
    return Dataset(spec, records, split)


@pytest.fixture
def task1():
    return builtin_task_spec("task1")


@pytest.fixture
def task2():
    return builtin_task_spec("task2")


@pytest.fixture
def task3():
    return builtin_task_spec("task3")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def image_fixture_set():
    """Ten small RGB images of varied shape, including odd and non-square sizes."""
    gen = np.random.default_rng(7)
    shapes = [(8, 8), (9, 9), (5, 7), (12, 6), (1, 1), (2, 3), (16, 16), (11, 13), (4, 4), (10, 15)]
    images = [gen.random((h, w, 3)).astype(np.float32) for h, w in shapes]
    images[3][:] = 0.25  # constant image
    return images


_acceptance: list[tuple[str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if item.module.__name__.endswith("test_acceptance") and (report.when == "call" or report.failed):
        doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
        _acceptance.append((doc, "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for doc, status in _acceptance:
        terminalreporter.write_line(f"{status}  {doc}")
