import math

import numpy as np
import pytest
from hypothesis import settings

from conf3d.geometry import Box3D
from conf3d.kitti_io import Annotation, Detection

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def make_gt(x=0.0, z=20.0, yaw=0.0, shape=(1.5, 1.6, 3.9), cls="Car", bbox=(100.0, 100.0, 200.0, 160.0),
            occlusion=0, truncation=0.0, y=1.65):
    return Annotation(cls, truncation, occlusion, 0.0, bbox, shape, (x, y, z), yaw)


def make_det(gt: Annotation, score=0.5, dx=0.0, dz=0.0, **kw):
    loc = (gt.location[0] + dx, gt.location[1], gt.location[2] + dz)
    fields = dict(class_name=gt.class_name, truncation=gt.truncation, occlusion=gt.occlusion, alpha=gt.alpha,
                  bbox2d=gt.bbox2d, shape=gt.shape, location=loc, rotation_y=gt.rotation_y)
    fields.update(kw)
    return Detection(**fields, score2d=score)


def random_box(rng: np.random.Generator, spread=2.0) -> Box3D:
    return Box3D(
        (rng.uniform(-spread, spread), rng.uniform(1.0, 2.0), rng.uniform(-spread, spread)),
        (rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5), rng.uniform(0.5, 4.5)),
        rng.uniform(-math.pi, math.pi),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ---------------------------------------------------------

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
