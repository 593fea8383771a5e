import os
import runpy

import pytest

DEMOS = os.path.join(os.path.dirname(__file__), "..", "demos")


@pytest.mark.parametrize("name", sorted(f for f in os.listdir(DEMOS) if f.endswith(".py")))
def test_demo_runs(name, tmp_path, monkeypatch):
    monkeypatch.setenv("SEGIN_DEMO_OUT", str(tmp_path))
    monkeypatch.setenv("SEGIN_DEMO_STEPS", "3")
    runpy.run_path(os.path.join(DEMOS, name), run_name="__main__")
