"""Reference-view colorization of fixed-geometry Gaussian splat scenes."""

import numba as _numba

# the bundled TBB is too old for numba and only produces a warning; skip it
if _numba.config.THREADING_LAYER_PRIORITY[0] == "tbb":
    _numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

__version__ = "0.1.0"

from .act import ACTParams, apply_act, average_act  # noqa: E402
from .camera import CameraView, load_cameras, save_cameras  # noqa: E402
from .errors import (ConfigError, DivergenceError, InvalidInputError,  # noqa: E402
                     SchemaError)
from .render import RenderSettings, render_view  # noqa: E402
from .scene import SplatScene, load_scene_ply, save_scene_ply  # noqa: E402

__all__ = [
    "ACTParams", "apply_act", "average_act", "CameraView", "load_cameras", "save_cameras",
    "ConfigError", "DivergenceError", "InvalidInputError", "SchemaError",
    "RenderSettings", "render_view", "SplatScene", "load_scene_ply", "save_scene_ply",
]
