import json

import pytest

from msfseg.cli import main

SMALL_SCALES = "64x128,128x256,256x512"
SMALL_CONFIG = {
    "phantom": {"native": "256x512", "mass_radius_range": [15, 40], "margin": 8},
    "noise": {"fp_size_range": [15, 60]},
}


def make_benchmark(root, count=4, seed=42, config=SMALL_CONFIG, scales=SMALL_SCALES):
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "synth.json"
    cfg.write_text(json.dumps(config))
    assert main(["synth", "--out-dir", str(root), "--seed", str(seed), "--count", str(count),
                 "--scales", scales, "--config", str(cfg)]) == 0
    return root


@pytest.fixture(scope="session")
def small_bench(tmp_path_factory):
    """Four small seeded phantoms with simulated detections at three scales."""
    return make_benchmark(tmp_path_factory.mktemp("bench"))


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} [{number}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
