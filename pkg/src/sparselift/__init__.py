"""Sparse-to-dense 2D-to-3D human pose uplifting."""

from .adaptive import AdaptiveConfig, AdaptiveResult, adaptive_infer
from .bench import BenchReport, bench_throughput
from .checkpoint import load_checkpoint, load_model, save_checkpoint
from .dataio import PoseDataset, SequenceRecord, read_dataset, validate_dataset, write_dataset
from .errors import SparseliftError
from .geometry import (CameraIntrinsics, H36M_SKELETON, Skeleton, bilinear_upsample,
                       horizontal_flip, normalize_image_coords, pose_velocity,
                       project_to_camera, root_relative)
from .metrics import MetricsReport, auc, compute_report, mpjpe, mpjpe_by_velocity, n_mpjpe, p_mpjpe, pck
from .network import ForwardOutput, ModelConfig, UpliftModel, flops_estimate, grad_check
from .sequencing import StrideSchedule, TokenLayout, WindowPlan, sliding_plan, token_layout, validate_schedule, window_plan
from .synthetic import CameraRanges, MotionSpec, NoiseConfig, build_dataset, generate_motion, sample_camera
from .training import EmaWeights, TrainConfig, Trainer, evaluate, pretrain_finetune

__version__ = "0.1.0"
