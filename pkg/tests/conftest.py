import numpy as np
import pytest

from pcdistill import data as dat
from pcdistill import detector as det
from pcdistill.core import seeded_rng


@pytest.fixture(scope="session")
def tiny_cfg():
    return det.tiny_pipeline_config()


@pytest.fixture(scope="session")
def tiny_scene():
    cfg = dat.SceneGenConfig(extent=(12.0, 12.0, 4.0), objects_min=2,
                             objects_max=3, surface_density=3.0,
                             clutter_density=0.06, noise_points=4)
    return dat.generate_scene(cfg, seed=5)


@pytest.fixture(scope="session")
def tiny_models(tiny_cfg, tiny_scene):
    """A (teacher, student) pair at toy width with anchors/stats prepared."""
    teacher = det.DetectorModel("teacher", tiny_cfg, 2, ["car", "cyclist"])
    student = det.DetectorModel("student", tiny_cfg, 2, ["car", "cyclist"])
    rng = seeded_rng(9)
    rows = rng.normal(1.0, 0.3, size=(2, tiny_cfg.stats_dim))
    teacher.stats = det.ClassStats(rows)
    student.stats = det.ClassStats(rows.copy())
    det.set_anchors_from_scenes(teacher, [tiny_scene])
    det.set_anchors_from_scenes(student, [tiny_scene])
    return teacher, student


def random_box(rng):
    from pcdistill.core import Box3D
    return Box3D(
        rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-0.5, 0.5),
        rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5),
        rng.uniform(-np.pi, np.pi),
    )
