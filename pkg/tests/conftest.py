import functools

import pytest

from cadloop.environment import TaskInstance
from cadloop.fem import SimSetting
from cadloop.materials import default_library
from cadloop.toolchain import Toolchain

A105 = "Carbon Steel - ASTM A105"
SS304 = "Stainless Steel 304"
CAST = "Gray Cast Iron"
CHROME = "Chrome-Moly Alloy Steel"

# Criterion results collected by test_acceptance and echoed in the summary.
ACCEPTANCE_RESULTS = {}


@functools.lru_cache(maxsize=None)
def feedback_of(category, params, material, pressure, resolution=1):
    setting = SimSetting(pressure=pressure, mesh_resolution=resolution)
    return Toolchain().evaluate(category, list(params), material, setting, default_library())


def make_task(
    category="rect_plate",
    params=(100.0, 50.0, 5.0),
    material=A105,
    pressure=0.4,
    resolution=1,
    delta_scale=1.5,
    kappa_scale=1.5,
    task_id="t",
    **kw,
):
    """A task whose thresholds are scaled from the simulated feedback of (params, material)."""
    fb = feedback_of(category, tuple(params), material, pressure, resolution)
    return TaskInstance(
        id=task_id,
        category=category,
        p0=tuple(params),
        m0=material,
        setting=SimSetting(pressure=pressure, mesh_resolution=resolution),
        delta=fb.u_max * delta_scale,
        kappa=fb.cost * kappa_scale,
        **kw,
    )


@pytest.fixture
def library():
    return default_library()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[key])
