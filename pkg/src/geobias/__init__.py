"""Two-view depth estimation with geometry injected as extra model inputs,
plus camera localization by gradient descent through the frozen model."""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    Camera,
    CameraPair,
    EmbeddingConfig,
    EpipolarRef,
    camera_center,
    epipolar_angle,
    epipolar_normal,
    fourier_embed,
    projection_matrix,
    ray_direction,
    relative_pose,
)
from .featurizer import FeaturizerConfig, InputMatrix, QueryMatrix, build_inputs, build_queries  # noqa: F401
from .model import DepthMap, ModelConfig, convex_upsample, forward_depth, init_params  # noqa: F401
from .params import ParamStore, load_checkpoint, save_checkpoint  # noqa: F401
from .scenegen import SamplePair, SceneConfig, generate_dataset, load_dataset  # noqa: F401
from .training import MetricsReport, TrainConfig, evaluate_store, l1log_loss, train, valid_mask  # noqa: F401
from .localization import LocalizerConfig, PoseEstimate, localize, orthogonalize  # noqa: F401
