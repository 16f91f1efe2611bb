"""Bi-equivariant point cloud registration.

The estimated transform moves the source cloud into the reference frame and
commutes with independent rigid motions of either input.
"""

from .errors import *  # noqa: F401,F403
from .geometry import (RigidTransform, apply_transform, axis_angle_rotation, compose, invert, random_rotation,
                       random_transform, rotation_geodesic_angle, svd3, weighted_procrustes)
from .pointcloud import PointCloud, build_hierarchy, knn
from .params import ModelConfig, ParamSet, init_params, load_archive, save_archive
from .backbone import FeatureSet, extract_features
from .primitives import align, channel_tensor_product, phi_norm, svd_bieq
from .attention import coarse_transformer
from .matching import FineMatchSet, sinkhorn, mutual_topm, coarse_correlation_topk
from .registration import RegisterOptions, RegistrationResult, iterative_refine, register_pair
from .bench import (AugmentConfig, PairRecord, RobustReport, SyntheticPair, gen_synthetic_pair, inlier_ratio,
                    make_augment_configs, measured_overlap, metric_rmse, metrics_rre_rte, registration_recall,
                    robust_report, run_benchmark)
from .io import read_gt_log, read_ply, read_scan, write_gt_log, write_ply, write_synthetic
from .selftest import run_selftest, sign_aligned_err

__version__ = "0.1.0"
