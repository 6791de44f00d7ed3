import json
from pathlib import Path

import numpy as np
import pytest

from diffinv.backends import MockBackend
from diffinv.images import save_png

_CRITERIA: dict[int, dict] = {}


@pytest.fixture
def backend():
    return MockBackend(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, size=8):
    return rng.random((size, size, 3))


def edited(image, rng, amount=0.3):
    return np.clip(image + amount * rng.standard_normal(image.shape), 0.0, 1.0)


def make_dataset(root: Path, instructions, seed=0, size=8) -> Path:
    """Write a manifest with one edit pair per entry of ``instructions``."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, instr in enumerate(instructions):
        before = rng.random((size, size, 3))
        after = np.clip(0.6 * before[..., ::-1] + 0.3 * rng.random((size, size, 3)), 0, 1)
        save_png(before, root / f"p{i}_before.png")
        save_png(after, root / f"p{i}_after.png")
        lines.append(json.dumps({"id": f"p{i}", "before": f"p{i}_before.png", "after": f"p{i}_after.png", "instruction": instr}))
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return root


# -- acceptance summary ---------------------------------------------------------------


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "seen": False})
    if report.when == "call" or report.failed:
        entry["seen"] = True
        if report.failed:
            entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["ok"] and entry["seen"] else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {entry['title']}")
