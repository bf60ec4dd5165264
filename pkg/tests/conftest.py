import pytest

TINY_TOML = """
[scene]
preset = "elastic-cube-drop"
particles_per_cell = 1
grid_resolution = 16
image_size = 32
n_frames = 6

[experiment]
train_frames = 4
iterations = [2, 2, 2]

[stage0]
hull_resolution = 16
control_points = 8
spacing = 0.0625
track_iterations = 2
iterations = 2
"""


@pytest.fixture
def tiny_toml(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY_TOML)
    return p


ACCEPTANCE = {}


@pytest.fixture
def record_criterion():
    """Store one line per acceptance criterion for the end-of-run summary."""

    def record(number: int, ok: bool, detail: str):
        ACCEPTANCE[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
