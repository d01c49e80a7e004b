"""Input checks shared by the estimators and the functional API."""
from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
import torch

SIGNATURE_DIM = 1024


def check_images(X, input_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Validate a stack of RGB images ``(n, H, W, 3)``.

    uint8 input is taken as 0..255; float input must already be in [0, 1].
    """
    X = np.asarray(X)
    if X.ndim == 3 and X.shape[-1] == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images of shape (n, H, W, 3), got {X.shape}")
    if input_size is not None and tuple(X.shape[1:3]) != tuple(input_size):
        raise ValueError(f"image size {X.shape[1:3]} does not match network input {tuple(input_size)}")
    if X.dtype != np.uint8:
        X = X.astype(np.float32, copy=False)
        if not np.all(np.isfinite(X)):
            raise ValueError("images contain non-finite values")
    return X


def preprocess(images: np.ndarray, channel_mean) -> torch.Tensor:
    """Scale to [0, 1], subtract the per-channel mean, return NCHW float32."""
    x = images.astype(np.float32)
    if images.dtype == np.uint8:
        x /= 255.0
    x -= np.asarray(channel_mean, np.float32)
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


def channel_means(images: np.ndarray) -> np.ndarray:
    x = images.astype(np.float64)
    if images.dtype == np.uint8:
        x /= 255.0
    return x.reshape(-1, 3).mean(axis=0).astype(np.float32)


def check_signatures(S, dim: int = SIGNATURE_DIM) -> np.ndarray:
    S = np.asarray(S, dtype=np.float32)
    if S.ndim == 1:
        S = S[None]
    if S.ndim != 2 or S.shape[1] != dim:
        raise ValueError(f"signatures must have length {dim}, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise ValueError("signatures contain non-finite values")
    return S


def check_pair_array(X, dim: int = SIGNATURE_DIM) -> Tuple[np.ndarray, np.ndarray]:
    """Split an ``(n, 2, dim)`` pair array into its two halves."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2 and X.shape[0] == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1] != 2 or X.shape[2] != dim:
        raise ValueError(f"expected pairs of shape (n, 2, {dim}), got {X.shape}")
    return check_signatures(X[:, 0], dim), check_signatures(X[:, 1], dim)


def check_binary_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y).astype(np.int64).ravel()
    if len(y) != n:
        raise ValueError(f"{len(y)} labels for {n} samples")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return y
