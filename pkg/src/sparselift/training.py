"""Losses, batch construction, optimizer schedule, EMA and the training loop.

The model is optimized for one output stride but multiple input strides at
once: every sample draws its input stride uniformly from the configured
list. With within-batch augmentation (WBA) the second half of each batch
is the horizontally flipped copy of the first half.
"""

from __future__ import annotations

import contextlib
import csv
import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import metrics
from .dataio import PoseDataset, SequenceRecord
from .errors import NonFiniteGradientError, SparseliftError
from .geometry import Skeleton, horizontal_flip, pose_velocity
from .inference import predict_dense
from .network import ModelConfig, UpliftModel
from .sequencing import StrideSchedule, token_layout, window_plan

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; defaults follow the full-scale recipe."""

    strides_in: tuple[int, ...]
    epochs: int = 120
    steps_per_epoch: int = 200
    batch_size: int = 512
    lr0: float = 4e-5
    lr_decay: float = 0.99
    # Linear lr ramp over the first steps; 0 keeps the plain schedule.
    # Short-budget runs need it to tolerate the high peak rates they use.
    warmup_steps: int = 0
    wd0: float = 4e-6
    alpha_seq: float = 0.5
    alpha_center: float = 0.5
    ema_decay: float = 0.999
    ema_enabled: bool = True
    wba_enabled: bool = True
    flip_tta_enabled: bool = True
    seed: int = 0

    @classmethod
    def desk_scale(cls, strides_in, steps: int = 500, **overrides) -> "TrainConfig":
        """Small-budget preset for CPU experiments: batch 32, one short epoch."""
        defaults = dict(strides_in=tuple(strides_in), epochs=1, steps_per_epoch=steps,
                        batch_size=32, lr0=1e-3)
        defaults.update(overrides)
        return cls(**defaults)

    def validate(self, schedule: StrideSchedule) -> None:
        if not self.strides_in:
            raise SparseliftError("strides_in must not be empty")
        for s in self.strides_in:
            if s % schedule.stride_out != 0:
                raise SparseliftError(
                    f"input stride {s} is not a multiple of output stride {schedule.stride_out}")
        if self.wba_enabled and self.batch_size % 2 != 0:
            raise SparseliftError("batch_size must be even when WBA is enabled")
        if self.alpha_seq < 0 or self.alpha_center < 0:
            raise SparseliftError("loss weights must be non-negative")


def root_relative_t(pose: torch.Tensor, root: int) -> torch.Tensor:
    return pose - pose[..., root : root + 1, :]


def loss_center(pred: torch.Tensor, gt: torch.Tensor, root: int) -> torch.Tensor:
    """Root-relative mean per-joint position error of the center pose (mm)."""
    diff = root_relative_t(pred, root) - root_relative_t(gt, root)
    return diff.norm(dim=-1).mean()


def loss_sequence(pred: torch.Tensor, gt: torch.Tensor, root: int) -> torch.Tensor:
    """Mean root-relative error over all joints and output slots (mm)."""
    if pred.shape != gt.shape:
        raise SparseliftError(f"sequence loss shape mismatch: {pred.shape} vs {gt.shape}")
    diff = root_relative_t(pred, root) - root_relative_t(gt, root)
    return diff.norm(dim=-1).mean()


def loss_total(seq_pred, center_pred, seq_gt, center_gt, root,
               alpha_seq: float, alpha_center: float) -> torch.Tensor:
    return (alpha_seq * loss_sequence(seq_pred, seq_gt, root)
            + alpha_center * loss_center(center_pred, center_gt, root))


@dataclass
class TrainingSample:
    """One window: 2D key-frame inputs and 3D targets at all output slots."""

    inputs_2d: np.ndarray  # (N_in, J, 2)
    gt_sequence: np.ndarray  # (N_out, J, 3)
    gt_center: np.ndarray  # (J, 3)
    stride_in: int
    flipped: bool = False


def build_batch(
    records: list[SequenceRecord],
    schedule: StrideSchedule,
    cfg: TrainConfig,
    rng: np.random.Generator,
    skeleton: Skeleton,
) -> list[TrainingSample]:
    """Draw one training batch: random clip, center and input stride per sample.

    With WBA the second half mirrors the first (flipped 2D inputs paired
    with correspondingly flipped 3D targets).
    """
    usable = [r for r in records if len(r) >= 1]
    if len(usable) < len(records):
        logger.warning("skipping %d empty sequences", len(records) - len(usable))
    if not usable:
        raise SparseliftError("no usable sequences to sample from")
    n_base = cfg.batch_size // 2 if cfg.wba_enabled else cfg.batch_size
    samples = []
    for _ in range(n_base):
        rec = usable[rng.integers(0, len(usable))]
        stride = int(cfg.strides_in[rng.integers(0, len(cfg.strides_in))])
        center = int(rng.integers(0, len(rec)))
        plan = window_plan(center, len(rec), schedule.with_stride_in(stride))
        samples.append(TrainingSample(
            inputs_2d=rec.poses_2d[plan.input_indices],
            gt_sequence=rec.poses_3d[plan.output_indices],
            gt_center=rec.poses_3d[center],
            stride_in=stride,
        ))
    if cfg.wba_enabled:
        for s in list(samples):
            samples.append(TrainingSample(
                inputs_2d=horizontal_flip(s.inputs_2d, skeleton),
                gt_sequence=horizontal_flip(s.gt_sequence, skeleton),
                gt_center=horizontal_flip(s.gt_center, skeleton),
                stride_in=s.stride_in,
                flipped=True,
            ))
    return samples


@dataclass
class StrideGroup:
    """Samples sharing one input stride, stacked for a single forward pass."""

    stride_in: int
    layout: object
    inputs: torch.Tensor
    gt_sequence: torch.Tensor
    gt_center: torch.Tensor
    count: int


def collate_by_stride(samples: list[TrainingSample], schedule: StrideSchedule,
                      dtype=torch.float32, device="cpu") -> list[StrideGroup]:
    groups = []
    for stride in sorted({s.stride_in for s in samples}):
        subset = [s for s in samples if s.stride_in == stride]
        groups.append(StrideGroup(
            stride_in=stride,
            layout=token_layout(schedule.with_stride_in(stride)),
            inputs=torch.as_tensor(np.stack([s.inputs_2d for s in subset]), dtype=dtype, device=device),
            gt_sequence=torch.as_tensor(np.stack([s.gt_sequence for s in subset]), dtype=dtype, device=device),
            gt_center=torch.as_tensor(np.stack([s.gt_center for s in subset]), dtype=dtype, device=device),
            count=len(subset),
        ))
    return groups


class EmaWeights:
    """Exponential moving average of model parameters for evaluation."""

    def __init__(self, model: UpliftModel):
        self.shadow = {name: p.detach().clone() for name, p in model.named_parameters()}

    def update(self, model: UpliftModel, decay: float) -> None:
        with torch.no_grad():
            for name, p in model.named_parameters():
                self.shadow[name].mul_(decay).add_(p.detach(), alpha=1.0 - decay)

    @contextlib.contextmanager
    def applied(self, model: UpliftModel):
        """Temporarily swap EMA weights in; training weights are untouched after."""
        stash = {name: p.detach().clone() for name, p in model.named_parameters()}
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(self.shadow[name])
        try:
            yield model
        finally:
            with torch.no_grad():
                for name, p in model.named_parameters():
                    p.copy_(stash[name])


class Trainer:
    """Seeded training loop: AdamW with decoupled, exponentially decayed lr/wd."""

    def __init__(self, model: UpliftModel, dataset: PoseDataset, cfg: TrainConfig):
        cfg.validate(model.config.schedule)
        if dataset.skeleton.joint_count != model.config.joints:
            raise SparseliftError("dataset joint count does not match the model")
        self.model = model
        self.dataset = dataset
        self.cfg = cfg
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr0, weight_decay=cfg.wd0)
        self.ema = EmaWeights(model) if cfg.ema_enabled else None
        self.rng = np.random.default_rng(cfg.seed)
        torch.manual_seed(cfg.seed)
        self.step_count = 0
        self.history: list[dict] = []

    def _apply_schedule(self, epoch: int) -> tuple[float, float]:
        lr = self.cfg.lr0 * self.cfg.lr_decay**epoch
        wd = self.cfg.wd0 * self.cfg.lr_decay**epoch
        if self.step_count < self.cfg.warmup_steps:
            lr = lr * (self.step_count + 1) / self.cfg.warmup_steps
        for group in self.optimizer.param_groups:
            group["lr"] = lr
            group["weight_decay"] = wd
        return lr, wd

    def train_step(self, epoch: int) -> dict:
        lr, wd = self._apply_schedule(epoch)
        self.model.train()
        samples = build_batch(self.dataset.records, self.model.config.schedule,
                              self.cfg, self.rng, self.dataset.skeleton)
        groups = collate_by_stride(samples, self.model.config.schedule,
                                   dtype=next(self.model.parameters()).dtype)
        total = len(samples)
        root = self.dataset.skeleton.root
        loss = seq_part = center_part = 0.0
        for group in groups:
            out = self.model(group.inputs, group.layout)
            l_seq = loss_sequence(out.sequence, group.gt_sequence, root)
            l_center = loss_center(out.center, group.gt_center, root)
            weight = group.count / total
            loss = loss + weight * (self.cfg.alpha_seq * l_seq + self.cfg.alpha_center * l_center)
            seq_part += weight * float(l_seq.detach())
            center_part += weight * float(l_center.detach())
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        loss = loss.detach()
        for name, p in self.model.named_parameters():
            if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
                raise NonFiniteGradientError(
                    f"non-finite gradient in {name} at step {self.step_count}", parameter=name)
        self.optimizer.step()
        if self.ema is not None:
            self.ema.update(self.model, self.cfg.ema_decay)
        self.step_count += 1
        row = {"step": self.step_count, "epoch": epoch, "lr": lr, "wd": wd,
               "loss": float(loss), "loss_seq": seq_part, "loss_center": center_part,
               "ema": self.cfg.ema_enabled}
        self.history.append(row)
        return row

    def run(self, log_every: int = 100) -> list[dict]:
        for epoch in range(self.cfg.epochs):
            for _ in range(self.cfg.steps_per_epoch):
                row = self.train_step(epoch)
                if row["step"] % log_every == 0:
                    logger.info("step %d epoch %d loss %.3f", row["step"], epoch, row["loss"])
        return self.history


TRAIN_LOG_COLUMNS = ("step", "epoch", "lr", "wd", "loss", "loss_seq", "loss_center", "ema")


def write_training_log(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAIN_LOG_COLUMNS)
        for row in history:
            writer.writerow([row[c] for c in TRAIN_LOG_COLUMNS])


@dataclass
class PretrainResult:
    pretrain_state: dict
    final_state: dict
    pretrain_history: list[dict]
    finetune_history: list[dict]


def pretrain_finetune(
    model: UpliftModel,
    pretrain_set: PoseDataset,
    finetune_set: PoseDataset,
    pretrain_cfg: TrainConfig,
    finetune_cfg: TrainConfig,
) -> PretrainResult:
    """Train on the pre-training set, then continue on the fine-tuning set.

    The optimizer (and EMA) state is re-initialized between phases; model
    weights carry over. Both phase-end weight snapshots are returned.
    """
    if pretrain_set.skeleton.joint_count != finetune_set.skeleton.joint_count:
        raise SparseliftError("pre-train and fine-tune skeletons do not match")
    pre_history: list[dict] = []
    if pretrain_cfg.epochs * pretrain_cfg.steps_per_epoch > 0:
        pre_history = Trainer(model, pretrain_set, pretrain_cfg).run()
    pretrain_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    ft_history: list[dict] = []
    if finetune_cfg.epochs * finetune_cfg.steps_per_epoch > 0:
        ft_history = Trainer(model, finetune_set, finetune_cfg).run()
    final_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return PretrainResult(pretrain_state=pretrain_state, final_state=final_state,
                          pretrain_history=pre_history, finetune_history=ft_history)


@dataclass
class EvalReport:
    """Metric suites at the full frame rate and restricted to key-frames."""

    all_frames: metrics.MetricsReport
    key_frames: metrics.MetricsReport
    stride_in: int
    flip_tta: bool

    def to_dict(self) -> dict:
        return {"stride_in": self.stride_in, "flip_tta": self.flip_tta,
                "all_frames": self.all_frames.to_dict(),
                "key_frames": self.key_frames.to_dict()}


def _aggregate_report(triples, skeleton: Skeleton, bin_width: float) -> metrics.MetricsReport:
    """Score (pred, gt, per-frame velocity or None) triples as one evaluation."""
    preds = np.concatenate([p for p, _, _ in triples])
    gts = np.concatenate([g for _, g, _ in triples])
    velocities, errors = [], []
    for pred, gt, vel in triples:
        if vel is not None and len(gt) > 0:
            velocities.append(vel)
            errors.append(metrics.per_frame_mpjpe(pred, gt, skeleton))
    if velocities:
        hist = metrics.velocity_histogram(np.concatenate(velocities),
                                          np.concatenate(errors), bin_width)
    else:
        hist = []
    return metrics.MetricsReport(
        mpjpe_mm=metrics.mpjpe(preds, gts, skeleton),
        n_mpjpe_mm=metrics.n_mpjpe(preds, gts, skeleton),
        p_mpjpe_mm=metrics.p_mpjpe(preds, gts, skeleton),
        pck_percent=metrics.pck(preds, gts, skeleton),
        auc_percent=metrics.auc(preds, gts, skeleton),
        per_frame_errors=[float(e) for e in metrics.per_frame_mpjpe(preds, gts, skeleton)],
        velocity_histogram=hist,
    )


def evaluate(
    model: UpliftModel,
    dataset: PoseDataset,
    stride_in: int | None = None,
    flip_tta: bool = False,
    ema: EmaWeights | None = None,
    bin_width: float = metrics.VELOCITY_BIN_WIDTH,
) -> EvalReport:
    """Sliding-window evaluation at the full video frame rate.

    Predicts every sequence densely (centers every ``stride_out`` frames,
    interpolation in between), then scores all frames and, separately, the
    key-frames (multiples of the input stride).
    """
    schedule = model.config.schedule
    if stride_in is not None:
        schedule = schedule.with_stride_in(stride_in)
    schedule.require_valid()
    skeleton = dataset.skeleton
    swap = ema.applied(model) if ema is not None else contextlib.nullcontext()
    all_triples, key_triples = [], []
    with swap:
        for rec in dataset.records:
            pred = predict_dense(model, rec.poses_2d, schedule, skeleton, flip_tta=flip_tta)
            vel = pose_velocity(rec.poses_3d, skeleton, dataset.frame_rate) if len(rec) >= 2 else None
            all_triples.append((pred, rec.poses_3d, vel))
            key_mask = (np.asarray(rec.frames) % schedule.stride_in) == 0
            key_triples.append((pred[key_mask], rec.poses_3d[key_mask],
                                vel[key_mask] if vel is not None else None))
    return EvalReport(
        all_frames=_aggregate_report(all_triples, skeleton, bin_width),
        key_frames=_aggregate_report(key_triples, skeleton, bin_width),
        stride_in=schedule.stride_in,
        flip_tta=flip_tta,
    )
