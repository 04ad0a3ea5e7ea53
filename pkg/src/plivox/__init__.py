"""Online RGB-D reconstruction on probabilistic local implicit voxels."""

from .geometry import (
    Intrinsics,
    OrientedPointCloud,
    Pose,
    RgbdFrame,
    Twist,
    backproject,
    bilinear_sample,
    project,
    se3_exp,
    se3_log,
)
from .grid import PLIVox, VoxelGrid, load_grid, save_grid
from .mapping import IntegrationConfig, integrate
from .meshing import (
    MeshRequest,
    TriangleMesh,
    blended_sdf,
    colorize_mesh,
    extract_mesh,
    load_ply,
    save_obj,
    save_ply,
    sigma_filter,
)
from .network import (
    MlpWeights,
    SdfDistribution,
    decode,
    decode_batch,
    decode_spatial_gradient,
    encode_points,
    init_weights,
    load_weights,
    save_weights,
)
from .tracking import (
    AnalyticSdfField,
    MapField,
    TrackingConfig,
    TrackingResult,
    gd_reference_step,
    track,
)

__version__ = "0.1.0"
