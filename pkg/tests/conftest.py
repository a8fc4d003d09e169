import numpy as np
import pytest

from hemoloop.dicomio import SliceImage, VolumeImage


@pytest.fixture
def rng():
    return np.random.default_rng(20240815)


def make_slice(
    study="1.2.3",
    series="1.2.3.4",
    sop="1.2.3.4.5",
    rows=2,
    cols=2,
    pixel_spacing=(0.5, 0.5),
    slice_location=0.0,
    image_position=(0.0, 0.0, 0.0),
    slope=1.0,
    intercept=-1024.0,
    pixels=None,
):
    if pixels is None:
        pixels = np.arange(rows * cols, dtype=np.int16).reshape(rows, cols)
    return SliceImage(
        study_uid=study,
        series_uid=series,
        sop_uid=sop,
        rows=rows,
        cols=cols,
        pixel_spacing=pixel_spacing,
        slice_location=slice_location,
        image_position=image_position,
        rescale_slope=slope,
        rescale_intercept=intercept,
        pixel_data=np.asarray(pixels, dtype=np.int16),
    )


def make_volume(voxels, spacing=(1.0, 1.0, 1.0), study="9.8.7", series="9.8.7.6"):
    return VolumeImage(
        study_uid=study,
        series_uid=series,
        voxels=np.asarray(voxels, dtype=np.float64),
        spacing=spacing,
        origin=(0.0, 0.0, 0.0),
    )


@pytest.fixture
def slice_factory():
    return make_slice


@pytest.fixture
def volume_factory():
    return make_volume
