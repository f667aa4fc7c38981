import numpy as np
import pytest

from xrbmd.imaging import Image2D, Volume3D, VolumeUnit


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(20240601))


def make_volume(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), unit=VolumeUnit.DENSITY_MG_CM3):
    return Volume3D(np.asarray(data, dtype=np.float64), spacing, origin, unit)


def make_image(data, spacing=(1.0, 1.0)):
    return Image2D(np.asarray(data, dtype=np.float64), spacing)
