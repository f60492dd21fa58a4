"""Unsupervised point-cloud features from multi-angle half-to-half prediction."""
from .config import TrainConfig, completion_config, desk_config, full_config
from .geometry import PointCloud, build_sequence_pairs, load_point_cloud, normalize, synth_shape
from .transport import chamfer, emd_bruteforce, emd_exact

__version__ = "0.1.0"

__all__ = ["TrainConfig", "completion_config", "desk_config", "full_config", "PointCloud",
           "build_sequence_pairs", "load_point_cloud", "normalize", "synth_shape", "chamfer",
           "emd_bruteforce", "emd_exact"]
