import pytest

from texnerf.camera import generate_orbit_poses
from texnerf.dataset import PosedDataset
from texnerf.scenesynth import emit_dataset, reference_library, reference_scene


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """Eight 12x12 views of the reference scene; view 7 is held out."""
    root = tmp_path_factory.mktemp("tiny_ds")
    poses = generate_orbit_poses(8, 2.5, 45.0, lookat=(0, 0, 0.3), width=12, height=12, camera_angle_x=0.6981317)
    emit_dataset(reference_scene(), poses, root, reference_library(), seed=0)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return PosedDataset.load(tiny_dataset_dir)


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """``record(n, ok, detail)`` stores one criterion's outcome for the summary."""

    def record(n, ok, detail):
        _ACCEPTANCE[str(n)] = f"criterion {str(n):<3} {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE, key=lambda k: (int(k.rstrip("abcdefgh")), k)):
            terminalreporter.write_line(_ACCEPTANCE[n])
