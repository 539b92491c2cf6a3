"""otgeo: optimal-transport embeddings of surface point clouds into
uniform latent grids, plus a spectral operator that learns on them.

The flow: load or synthesize a surface sampling, downsample it, build a
parametric latent grid of comparable extent, couple the two with either
an entropic transport plan or a projection-pursuit Monge map, gather
the cloud onto the grid as a feature tensor, run a small spectral
operator there, and scatter predictions back through nearest-neighbor
index maps. Everything is float64 numpy and deterministic per seed.
"""

__version__ = "0.1.0"

from .errors import (DegenerateRowError, FormatError, InvalidConfigError,
                     InvalidInputError, NumericError, OtgeoError, SizeError)
from .geometry import (PointCloud, VoxelConfig, estimate_normals,
                       load_point_cloud, uniform_weights, voxel_downsample,
                       write_point_cloud)
from .latent_mesh import LatentGrid, generate_grid, grid_size_for, match_bounding_box
from .ot_plan import (CostMatrix, SinkhornConfig, TransportPlan, cost_matrix,
                      exact_plan_lp, plan_strategy, sinkhorn,
                      solve_plan_streaming, transported_mesh)
from .ot_map import MongeMapResult, informative_direction, ot_1d, ppmm
from .coupling import (IndexMap, LatentFeatures, assemble_features,
                       decode_solution, decoder_indices, encode_function,
                       encoder_indices, exact_nn)
from .latent_operator import (SpectralOperator, TrainConfig, TrainSample,
                              evaluate, forward, forward_batch, gradient,
                              load_checkpoint, metrics, save_checkpoint, train)

__all__ = [name for name in dir() if not name.startswith("_")]
