import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gfscreen.cropgrid import CropRegion, SubVolume
from gfscreen.synthvol import Lesion, ScanRecord, VolumeSpec

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def scan_with_lesions(dims, lesions, scan_id="toy", volume=None):
    """Hand-built scan: mask is the union of the lesion voxel masks."""
    mask = np.zeros(dims, dtype=bool)
    for lesion in lesions:
        mask |= lesion.voxel_mask(dims)
    if volume is None:
        volume = np.where(mask, 0.8, 0.3).astype(np.float32)
    return ScanRecord(volume=volume, mask=mask, lesions=list(lesions), healthy=not lesions,
                      spec=VolumeSpec(dims=dims, target_fg_fraction=0.0), scan_id=scan_id)


def make_sub(voxels, mask=None, origin=(0, 0, 0), scan_id="toy"):
    voxels = np.asarray(voxels, dtype=np.float64)
    mask = np.zeros(voxels.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return SubVolume(voxels, mask, CropRegion(tuple(origin), voxels.shape), int(mask.any()), scan_id)


@pytest.fixture
def one_lesion_scan():
    lesion = Lesion(center=(15.0, 15.0, 7.0), semi_axes=(3.0, 3.0, 2.0), delta=0.3)
    return scan_with_lesions((32, 32, 16), [lesion])


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
