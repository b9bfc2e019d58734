import numpy as np
import pytest
import torch
from PIL import Image

from vqanomaly.synthetic import SyntheticConfig, generate_synthetic


def write_clip(root, split, clip_id, frames):
    d = root / split / "frames" / clip_id
    d.mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(frames):
        Image.fromarray(f).save(d / f"{t:06d}.png")


def write_labels(root, clip_id, flags):
    d = root / "testing" / "labels"
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{clip_id}.csv").write_text("".join(f"{v}\n" for v in flags))


@pytest.fixture
def tiny_synthetic(tmp_path):
    cfg = SyntheticConfig(frame_size=32, train_clips=2, test_clips=2, clip_length=12, crowd_size=2.0,
                          walkway=(16, 30), forbidden_region=(0, 0, 32, 14),
                          anomalies=[{"clip": 0, "kind": "fast_mover", "start": 3, "length": 5},
                                     {"clip": 1, "kind": "novel_shape", "start": 6, "length": 6}])
    return generate_synthetic(cfg, seed=3, out=tmp_path / "syn")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


# acceptance criteria report: tests marked ``criterion(n, title)`` get one summary line each
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        if rep.skipped and not detail:
            detail = str(rep.longrepr[-1]) if isinstance(rep.longrepr, tuple) else ""
        elif rep.failed and not detail:
            detail = rep.longreprtext.strip().splitlines()[-1] if rep.longreprtext else ""
        ACCEPTANCE[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}  {title}: {detail}")
