"""Three-stage uplifting network with learnable upsampling tokens.

Stage 1 encodes each 2D input pose with self-attention across joints and
condenses it into a pose token. Stage 2 pads the token sequence to the
output resolution with a shared learnable upsampling token and runs
temporal self-attention; its first block only draws attention keys/values
from pose tokens (deferred upsampling-token attention, DUTA), since fresh
upsampling tokens carry no input information. Stage 3 reduces the sequence
to the center frame with attention + strided convolutions and refines the
center prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NonFiniteGradientError, SparseliftError
from .sequencing import StrideSchedule, TokenLayout, token_layout


def default_reduction_strides(n_out: int, blocks: int = 3) -> tuple[int, ...]:
    """Strides r_1..r_K whose ceil-division chain reduces n_out to exactly 1."""
    presets = {(71, 3): (3, 5, 5), (41, 3): (4, 4, 3)}
    if (n_out, blocks) in presets:
        return presets[(n_out, blocks)]
    strides = []
    remaining = n_out
    for k in range(blocks, 0, -1):
        # The last stride equals the remaining length, so the chain always ends at 1.
        r = remaining if k == 1 else max(1, math.ceil(remaining ** (1.0 / k)))
        strides.append(r)
        remaining = math.ceil(remaining / r)
    return tuple(strides)


def reduction_chain(n_out: int, strides) -> list[int]:
    """Sequence lengths produced by the strided blocks, starting at n_out."""
    lengths = [n_out]
    for r in strides:
        lengths.append(math.ceil(lengths[-1] / r))
    return lengths


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; ``schedule`` fixes window and strides."""

    joints: int
    schedule: StrideSchedule
    d_joint: int = 32
    d_temp: int = 348
    blocks_spatial: int = 4
    blocks_temporal: int = 4
    blocks_strided: int = 3
    heads_spatial: int = 4
    heads_temporal: int = 6
    mlp_ratio: int = 2
    drop_path_rate: float = 0.1
    # Output heads predict in units of this many mm; keeps head weights O(1)
    # for mm-scale poses, which Adam-style optimizers need to converge.
    output_scale_mm: float = 100.0
    reduction_strides: tuple[int, ...] | None = None
    duta_enabled: bool = True
    spatial_enabled: bool = True
    temporal_enabled: bool = True
    strided_enabled: bool = True

    @property
    def n_out(self) -> int:
        return self.schedule.n_out

    def resolved_reduction_strides(self) -> tuple[int, ...]:
        if self.reduction_strides is not None:
            return tuple(self.reduction_strides)
        return default_reduction_strides(self.n_out, self.blocks_strided)

    def validate(self) -> None:
        self.schedule.require_valid()
        if self.joints < 1:
            raise SparseliftError("joint count must be >= 1")
        if self.d_joint % self.heads_spatial != 0:
            raise SparseliftError(
                f"d_joint {self.d_joint} not divisible by {self.heads_spatial} spatial heads")
        if self.d_temp % self.heads_temporal != 0:
            raise SparseliftError(
                f"d_temp {self.d_temp} not divisible by {self.heads_temporal} temporal heads")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise SparseliftError("drop_path_rate must be in [0, 1)")
        if self.output_scale_mm <= 0:
            raise SparseliftError("output_scale_mm must be positive")
        strides = self.resolved_reduction_strides()
        if len(strides) != self.blocks_strided or any(r < 1 for r in strides):
            raise SparseliftError(f"need {self.blocks_strided} positive reduction strides, got {strides}")
        if self.strided_enabled and reduction_chain(self.n_out, strides)[-1] != 1:
            raise SparseliftError(
                f"reduction strides {strides} do not reduce {self.n_out} slots to 1: "
                f"{reduction_chain(self.n_out, strides)}")

    def to_dict(self) -> dict:
        raw = asdict(self)
        raw["schedule"] = {"window": self.schedule.window,
                           "stride_in": self.schedule.stride_in,
                           "stride_out": self.schedule.stride_out}
        return raw

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        sched = raw.pop("schedule")
        strides = raw.pop("reduction_strides", None)
        return cls(
            schedule=StrideSchedule(int(sched["window"]), int(sched["stride_in"]),
                                    int(sched["stride_out"])),
            reduction_strides=tuple(strides) if strides is not None else None,
            **raw,
        )


def drop_path(x: torch.Tensor, rate: float, training: bool) -> torch.Tensor:
    """Stochastic depth: zero the residual branch per sample, rescale survivors."""
    if rate == 0.0 or not training:
        return x
    keep = 1.0 - rate
    shape = (x.shape[0],) + (1,) * (x.dim() - 1)
    mask = torch.rand(shape, dtype=x.dtype, device=x.device) < keep
    return x * mask.to(x.dtype) / keep


class MultiHeadSelfAttention(nn.Module):
    """Self-attention with optional restriction of keys/values to a slot subset."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, kv_slots=None, need_weights=False):
        b, length, dim = x.shape
        qkv = self.qkv(x).reshape(b, length, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each (B, H, L, hd)
        if kv_slots is not None:
            idx = torch.as_tensor(kv_slots, dtype=torch.long, device=x.device)
            k = k[:, :, idx]
            v = v[:, :, idx]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, length, dim)
        out = self.proj(out)
        if not need_weights:
            return out, None
        if kv_slots is None:
            weights = attn
        else:
            # Materialize the full L x L matrix: exact zeros on excluded slots.
            weights = torch.zeros(b, self.heads, length, length, dtype=attn.dtype, device=attn.device)
            weights[:, :, :, idx] = attn
        return out, weights


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm attention + MLP block with stochastic depth on both branches."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, drop_path_rate: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio)
        self.drop_path_rate = drop_path_rate

    def forward(self, x, kv_slots=None, need_weights=False):
        branch, weights = self.attn(self.norm1(x), kv_slots=kv_slots, need_weights=need_weights)
        x = x + drop_path(branch, self.drop_path_rate, self.training)
        x = x + drop_path(self.mlp(self.norm2(x)), self.drop_path_rate, self.training)
        return x, weights


class StridedBlock(nn.Module):
    """Attention block whose feed-forward is a strided kernel-3 convolution.

    The convolution uses replicate padding and reduces the sequence length
    from L to ceil(L / stride); the residual path is subsampled at the
    convolution window centers (every stride-th element).
    """

    def __init__(self, dim: int, heads: int, stride: int):
        super().__init__()
        self.stride = stride
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.conv = nn.Conv1d(dim, dim, kernel_size=3, stride=stride)

    def forward(self, x, need_weights=False):
        branch, weights = self.attn(self.norm1(x), need_weights=need_weights)
        x = x + branch
        h = self.norm2(x).transpose(1, 2)
        h = self.conv(F.pad(h, (1, 1), mode="replicate")).transpose(1, 2)
        return x[:, :: self.stride] + h, weights


@dataclass
class ForwardOutput:
    """Model outputs: per-slot sequence, refined center pose, optional traces."""

    sequence: torch.Tensor  # (B, N_out, J, 3)
    center: torch.Tensor  # (B, J, 3)
    attention: dict[str, torch.Tensor] | None = None


class UpliftModel(nn.Module):
    """Sparse 2D pose windows in, dense 3D pose windows plus center pose out."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        j, dj, dt = config.joints, config.d_joint, config.d_temp

        self.joint_embed = nn.Linear(2, dj)
        self.spatial_pos = nn.Parameter(torch.empty(1, j, dj).normal_(std=0.02))
        self.spatial_blocks = nn.ModuleList(
            TransformerBlock(dj, config.heads_spatial, config.mlp_ratio, config.drop_path_rate)
            for _ in range(config.blocks_spatial))
        self.spatial_norm = nn.LayerNorm(dj)
        self.condense = nn.Linear(j * dj, dt)

        self.upsample_token = nn.Parameter(torch.empty(dt).normal_(std=0.02))
        self.temporal_pos = nn.Parameter(torch.empty(1, config.n_out, dt).normal_(std=0.02))
        self.temporal_blocks = nn.ModuleList(
            TransformerBlock(dt, config.heads_temporal, config.mlp_ratio, config.drop_path_rate)
            for _ in range(config.blocks_temporal))
        self.temporal_norm = nn.LayerNorm(dt)
        self.sequence_head = nn.Linear(dt, j * 3)

        self.strided_blocks = nn.ModuleList(
            StridedBlock(dt, config.heads_temporal, r)
            for r in config.resolved_reduction_strides())
        self.strided_norm = nn.LayerNorm(dt)
        self.center_head = nn.Linear(dt, j * 3)

    def spatial_forward(self, poses: torch.Tensor, traces=None) -> torch.Tensor:
        """Encode (B, L, J, 2) input poses into (B, L, d_temp) pose tokens."""
        b, length, j, _ = poses.shape
        x = self.joint_embed(poses.reshape(b * length, j, 2)) + self.spatial_pos
        if self.config.spatial_enabled and len(self.spatial_blocks) > 0:
            for i, block in enumerate(self.spatial_blocks):
                x, w = block(x, need_weights=traces is not None)
                if traces is not None:
                    traces[f"spatial.{i}"] = w.reshape(b, length, *w.shape[1:])
            x = self.spatial_norm(x)
        return self.condense(x.reshape(b, length, j * self.config.d_joint))

    def assemble_tokens(self, pose_tokens: torch.Tensor, layout: TokenLayout) -> torch.Tensor:
        """Place pose tokens at their output slots, the shared upsampling token elsewhere."""
        if pose_tokens.shape[1] != layout.n_in:
            raise SparseliftError(
                f"got {pose_tokens.shape[1]} pose tokens for {layout.n_in} pose slots")
        if layout.n_out != self.config.n_out:
            raise SparseliftError(
                f"layout has {layout.n_out} slots, model built for {self.config.n_out}")
        b = pose_tokens.shape[0]
        y = self.upsample_token.expand(b, layout.n_out, -1).clone()
        slots = torch.as_tensor(layout.pose_slots, dtype=torch.long, device=pose_tokens.device)
        y[:, slots] = pose_tokens
        return y + self.temporal_pos

    def temporal_forward(self, y: torch.Tensor, layout: TokenLayout, traces=None):
        """Run the temporal blocks; returns (y', per-slot 3D poses)."""
        if layout.n_in == 0:
            raise SparseliftError("layout has no pose slots; nothing to attend to")
        if self.config.temporal_enabled and len(self.temporal_blocks) > 0:
            for i, block in enumerate(self.temporal_blocks):
                restrict = (self.config.duta_enabled and i == 0 and len(layout.upsample_slots) > 0)
                y, w = block(y, kv_slots=layout.pose_slots if restrict else None,
                             need_weights=traces is not None)
                if traces is not None:
                    traces[f"temporal.{i}"] = w
            y = self.temporal_norm(y)
        seq = self.sequence_head(y).reshape(y.shape[0], y.shape[1], self.config.joints, 3)
        return y, seq * self.config.output_scale_mm

    def strided_forward(self, y: torch.Tensor, traces=None) -> torch.Tensor:
        """Reduce (B, N_out, d_temp) to the refined (B, J, 3) center pose."""
        z = y
        for i, block in enumerate(self.strided_blocks):
            z, w = block(z, need_weights=traces is not None)
            if traces is not None:
                traces[f"strided.{i}"] = w
        if z.shape[1] != 1:
            raise SparseliftError(f"strided reduction ended at length {z.shape[1]}, expected 1")
        z = self.strided_norm(z[:, 0])
        center = self.center_head(z).reshape(-1, self.config.joints, 3)
        return center * self.config.output_scale_mm

    def forward(self, poses: torch.Tensor, layout: TokenLayout,
                collect_attention: bool = False) -> ForwardOutput:
        traces = {} if collect_attention else None
        tokens = self.spatial_forward(poses, traces)
        y = self.assemble_tokens(tokens, layout)
        y, seq = self.temporal_forward(y, layout, traces)
        if self.config.strided_enabled:
            center = self.strided_forward(y, traces)
        else:
            center = seq[:, layout.center_slot]
        return ForwardOutput(sequence=seq, center=center, attention=traces)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


FLOPS_CONVENTION = (
    "1 multiply-accumulate = 2 FLOPs; counts cover linear maps, attention "
    "score and value products, convolutions and output heads; "
    "normalizations, softmax, bias adds and other nonlinearities ignored."
)


def _attention_macs(length: int, kv_length: int, dim: int) -> int:
    projections = length * dim * dim + 2 * kv_length * dim * dim  # Q, K, V
    scores = length * kv_length * dim
    values = length * kv_length * dim
    out = length * dim * dim
    return projections + scores + values + out


def flops_breakdown(config: ModelConfig) -> dict[str, int]:
    """Closed-form FLOPs per stage for one forward pass (see FLOPS_CONVENTION)."""
    config.validate()
    layout = token_layout(config.schedule)
    j, dj, dt, ratio = config.joints, config.d_joint, config.d_temp, config.mlp_ratio
    n_in, n_out = layout.n_in, layout.n_out

    spatial = j * 2 * dj  # joint embedding
    if config.spatial_enabled:
        block = _attention_macs(j, j, dj) + 2 * j * dj * (ratio * dj)
        spatial += config.blocks_spatial * block
    spatial += j * dj * dt  # condense
    spatial *= n_in

    temporal = 0
    if config.temporal_enabled:
        for i in range(config.blocks_temporal):
            restrict = config.duta_enabled and i == 0 and len(layout.upsample_slots) > 0
            kv = n_in if restrict else n_out
            temporal += _attention_macs(n_out, kv, dt) + 2 * n_out * dt * (ratio * dt)
    temporal += n_out * dt * (j * 3)  # sequence head

    strided = 0
    if config.strided_enabled:
        lengths = reduction_chain(n_out, config.resolved_reduction_strides())
        for length, reduced in zip(lengths[:-1], lengths[1:]):
            strided += _attention_macs(length, length, dt)
            strided += reduced * 3 * dt * dt  # kernel-3 conv at each output position
        strided += dt * (j * 3)  # center head

    return {"spatial": 2 * spatial, "temporal": 2 * temporal, "strided": 2 * strided}


def flops_estimate(config: ModelConfig) -> int:
    """Total FLOPs for a single forward pass."""
    return sum(flops_breakdown(config).values())


@dataclass
class GradCheckResult:
    max_rel_error: float
    probes: int
    worst_parameter: str
    failures: list = field(default_factory=list)


def grad_check(model: UpliftModel, loss_fn, probes: int = 200,
               epsilon: float = 1e-4, seed: int = 0,
               tolerance: float = 1e-3) -> GradCheckResult:
    """Compare autograd parameter gradients against central finite differences.

    ``loss_fn`` maps the model to a scalar loss and must be deterministic;
    the model must be in double precision and eval mode. Probes are drawn
    uniformly over all scalar parameters. Entries whose relative error
    exceeds ``tolerance`` are returned in ``failures``.
    """
    if any(p.dtype != torch.float64 for p in model.parameters()):
        raise SparseliftError("grad_check requires a double-precision model")
    was_training = model.training
    model.eval()
    try:
        model.zero_grad(set_to_none=True)
        loss = loss_fn(model)
        loss.backward()
        named = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
        for name, p in named:
            if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient in {name}", parameter=name)
        sizes = np.array([p.numel() for _, p in named])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        rng = np.random.default_rng(seed)
        picks = rng.integers(0, offsets[-1], size=probes)

        max_err, worst = 0.0, ""
        failures = []
        with torch.no_grad():
            for flat_idx in picks:
                pi = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
                name, p = named[pi]
                local = int(flat_idx - offsets[pi])
                analytic = float(p.grad.reshape(-1)[local]) if p.grad is not None else 0.0
                original = float(p.reshape(-1)[local])
                p.reshape(-1)[local] = original + epsilon
                loss_hi = float(loss_fn(model))
                p.reshape(-1)[local] = original - epsilon
                loss_lo = float(loss_fn(model))
                p.reshape(-1)[local] = original
                fd = (loss_hi - loss_lo) / (2.0 * epsilon)
                rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-6)
                if rel > max_err:
                    max_err, worst = rel, f"{name}[{local}]"
                if rel > tolerance:
                    failures.append((f"{name}[{local}]", analytic, fd, rel))
        return GradCheckResult(max_rel_error=max_err, probes=probes,
                               worst_parameter=worst, failures=failures)
    finally:
        model.train(was_training)
