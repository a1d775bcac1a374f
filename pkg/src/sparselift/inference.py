"""Sliding-window inference: sparse 2D input video to dense 3D poses."""

from __future__ import annotations

import numpy as np
import torch

from .geometry import Skeleton, bilinear_upsample, horizontal_flip
from .network import UpliftModel
from .sequencing import StrideSchedule, sliding_plan, token_layout, window_plan


def gather_windows(poses_2d: np.ndarray, centers, schedule: StrideSchedule) -> np.ndarray:
    """Stack the key-frame 2D inputs of every window: (C, N_in, J, 2)."""
    video_len = len(poses_2d)
    return np.stack([poses_2d[window_plan(int(c), video_len, schedule).input_indices]
                     for c in centers])


def predict_centers(
    model: UpliftModel,
    poses_2d: np.ndarray,
    centers,
    schedule: StrideSchedule,
    skeleton: Skeleton,
    flip_tta: bool = False,
    batch_size: int = 256,
) -> np.ndarray:
    """Center-frame 3D predictions (mm) for the given window centers.

    With ``flip_tta`` the result is the average of the plain prediction and
    the un-flipped prediction on horizontally flipped inputs.
    """
    layout = token_layout(schedule)
    windows = gather_windows(poses_2d, centers, schedule)
    dtype = next(model.parameters()).dtype
    device = next(model.parameters()).device
    was_training = model.training
    model.eval()
    outputs = []
    with torch.no_grad():
        for lo in range(0, len(windows), batch_size):
            chunk = windows[lo : lo + batch_size]
            x = torch.as_tensor(chunk, dtype=dtype, device=device)
            pred = model(x, layout).center.cpu().numpy()
            if flip_tta:
                flipped = np.stack([horizontal_flip(w, skeleton) for w in chunk])
                x_f = torch.as_tensor(flipped, dtype=dtype, device=device)
                pred_f = model(x_f, layout).center.cpu().numpy()
                pred = 0.5 * (pred + np.stack([horizontal_flip(p, skeleton) for p in pred_f]))
            outputs.append(pred)
    model.train(was_training)
    return np.concatenate(outputs, axis=0).astype(np.float64)


def predict_dense(
    model: UpliftModel,
    poses_2d: np.ndarray,
    schedule: StrideSchedule,
    skeleton: Skeleton,
    flip_tta: bool = False,
    batch_size: int = 256,
) -> np.ndarray:
    """Full-rate (T, J, 3) prediction: sliding windows, then interpolation.

    The model predicts every ``stride_out``-th frame; intermediate frames
    are filled by linear interpolation between adjacent center predictions.
    """
    video_len = len(poses_2d)
    centers = sliding_plan(video_len, schedule)
    preds = predict_centers(model, poses_2d, centers, schedule, skeleton,
                            flip_tta=flip_tta, batch_size=batch_size)
    if schedule.stride_out == 1:
        return preds
    return bilinear_upsample(preds, centers, video_len)
