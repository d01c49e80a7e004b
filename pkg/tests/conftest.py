import json
import time
from pathlib import Path

import numpy as np
import pytest

from camfprint.cli import main
from camfprint.signature import Signature

ROOT = Path(__file__).resolve().parents[1]
SYNTHETIC_CONFIG = ROOT / "configs" / "synthetic.json"

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    number, title = props["criterion"]
    status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
    prev = _criteria.get(number)
    if prev is None or prev[0] == "PASS":
        _criteria[number] = (status, title, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, title, detail = _criteria[number]
        line = f"AC{number} {status:4s} {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _criterion_property(request):
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        request.node.user_properties.append(("criterion", tuple(marker.args)))


@pytest.fixture
def detail(request):
    """Attach a short measured-value note to the acceptance summary line."""

    def _set(text):
        request.node.user_properties.append(("detail", text))

    return _set


def make_signatures(devices, per_device, version="a" * 64, seed=0, dim=1024):
    rng = np.random.default_rng(seed)
    out = []
    for d in devices:
        for k in range(per_device):
            v = np.tanh(rng.standard_normal(dim)).astype(np.float32)
            out.append(Signature(v, f"/img/{d}_{k:05d}.png", d, version))
    return out


@pytest.fixture(scope="session")
def synthetic_run(tmp_path_factory):
    """The full synthetic pipeline (8 devices x 40 images, 64x64), once per session."""
    out = tmp_path_factory.mktemp("synthetic_run")
    t0 = time.perf_counter()
    common = ["--config", str(SYNTHETIC_CONFIG), "--output-dir", str(out)]
    assert main(["ingest", *common]) == 0
    common = ["--output-dir", str(out)]
    assert main(["train", "--phase", "1", *common]) == 0
    assert main(["train", "--phase", "2", *common]) == 0
    code = main(["evaluate", *common])
    elapsed = time.perf_counter() - t0
    report = json.loads((out / "eval" / "report.json").read_text())
    return {"dir": out, "elapsed": elapsed, "report": report, "exit": code}
