"""Bone mineral density estimation from radiographs: renderer, registration and analysis toolkit."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    DataError,
    EmptyRegionError,
    NumericalError,
    ParseError,
    RankDeficiencyError,
    RegistrationError,
    XrbmdError,
    ZeroVarianceError,
)
from .imaging import Image2D, ImageUnit, Volume3D, VolumeUnit  # noqa: E402
from .pose import RigidTransform6  # noqa: E402

__all__ = [
    "__version__",
    "XrbmdError",
    "DataError",
    "ParseError",
    "NumericalError",
    "ZeroVarianceError",
    "RankDeficiencyError",
    "EmptyRegionError",
    "RegistrationError",
    "Volume3D",
    "Image2D",
    "VolumeUnit",
    "ImageUnit",
    "RigidTransform6",
]
