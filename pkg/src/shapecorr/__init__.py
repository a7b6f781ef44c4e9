"""Spectral non-rigid shape correspondence.

Pointwise maps between shapes are estimated through truncated
Laplace-Beltrami bases and functional maps, refined by training a
smoothness-biased feature network against noisy correspondences, and
evaluated with geodesic-error and map-smoothness metrics.
"""

from .featnet import (AdamState, Architecture, FeatureNet, adam_init,
                      adam_step, backward, forward, init_random,
                      load_checkpoint, save_checkpoint)
from .fmap import (fmap_to_p2p, nn_map, p2p_to_fmap, soft_correspondence,
                   solve_fmap)
from .geometry import (AugmentParams, Shape, augment, icosphere, load_shape,
                       normalize, save_shape, synth_collection, synth_pair)
from .maps import FunctionalMap, PointMap, identity_map
from .pipeline import (Collection, DenoiseResult, MapSet, TrainConfig,
                       build_collection, ncp_demo, ncp_un, stage1_predict,
                       stage1_train, stage2_train, synthetic_collection,
                       test_time_denoise)
from .spectral import (Descriptor, LaplacianPair, SpectralBasis,
                       cotan_laplacian, eigenbasis, heat_diffuse, hks,
                       load_basis, pointcloud_laplacian, project, reconstruct,
                       save_basis, wks)

__version__ = "0.1.0"
