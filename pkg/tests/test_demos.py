import runpy
from pathlib import Path

import pytest

DEMOS = Path(__file__).resolve().parent.parent / "demos"
FAST = ["demo_01_box_geometry.py", "demo_02_point_encodings.py", "demo_03_targets_and_losses.py",
        "demo_05_metrics.py"]
SLOW = ["demo_04_train_and_refine.py", "demo_06_ambiguity_and_speed.py"]


@pytest.mark.parametrize("name", FAST)
def test_demo_runs(name, capsys):
    runpy.run_path(str(DEMOS / name), run_name="__main__")
    assert capsys.readouterr().out


@pytest.mark.slow
@pytest.mark.parametrize("name", SLOW)
def test_slow_demo_runs(name, capsys):
    runpy.run_path(str(DEMOS / name), run_name="__main__")
    assert capsys.readouterr().out
