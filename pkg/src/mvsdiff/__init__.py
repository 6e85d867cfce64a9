"""Multi-view stereo depth estimation with diffusion-based iterative refinement."""
from .config import RunConfig, load_config, make_variant
from .estimator import DepthDiffusionEstimator
from .fusion import FusionConfig, PointCloud, eval_cloud, fuse, geometric_check
from .geometry import Camera, DepthMap
from .pipeline import DepthDiffusionMVS, ModelOutput
from .synthetic import SceneSpec, generate_dataset, generate_scene

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "load_config", "make_variant", "DepthDiffusionEstimator", "FusionConfig", "PointCloud",
    "eval_cloud", "fuse", "geometric_check", "Camera", "DepthMap", "DepthDiffusionMVS", "ModelOutput",
    "SceneSpec", "generate_dataset", "generate_scene",
]
