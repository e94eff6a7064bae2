"""Input validation helpers.

Images travel through the package as float arrays/tensors in [-1, 1] with
shape (C, H, W) for single images and (N, C, H, W) for batches. These checks
run at IO boundaries and estimator entry points; inner loops trust their
inputs.
"""

from __future__ import annotations

import numpy as np
import torch


def check_image(x, *, name: str = "image") -> None:
    """Validate a single (C, H, W) image in [-1, 1]."""
    if x.ndim != 3:
        raise ValueError(f"{name} must have shape (C, H, W), got {tuple(x.shape)}")
    _check_values(x, name)


def check_image_batch(x, *, name: str = "batch") -> None:
    """Validate an (N, C, H, W) image batch in [-1, 1]."""
    if x.ndim != 4:
        raise ValueError(f"{name} must have shape (N, C, H, W), got {tuple(x.shape)}")
    if x.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    _check_values(x, name)


def _check_values(x, name: str) -> None:
    if isinstance(x, torch.Tensor):
        finite = bool(torch.isfinite(x).all())
        lo, hi = float(x.min()), float(x.max())
    else:
        x = np.asarray(x)
        finite = bool(np.isfinite(x).all())
        lo, hi = float(x.min()), float(x.max())
    if not finite:
        raise ValueError(f"{name} contains non-finite values")
    if lo < -1.0 - 1e-6 or hi > 1.0 + 1e-6:
        raise ValueError(f"{name} values outside [-1, 1] (min={lo:.4f}, max={hi:.4f})")


def check_same_shape(a, b, *, names: tuple[str, str] = ("a", "b")) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(
            f"shape mismatch between {names[0]} {tuple(a.shape)} and {names[1]} {tuple(b.shape)}"
        )


def check_embeddings(x, *, dim: int | None = None, name: str = "embeddings") -> np.ndarray:
    """Coerce to a 2-D float64 array of finite embedding vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"{name} must be (n, d), got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")
    if dim is not None and x.shape[1] != dim:
        raise ValueError(f"{name} dimension {x.shape[1]} != expected {dim}")
    return x


def check_scores(scores, *, name: str = "scores") -> np.ndarray:
    """Coerce a score collection to a non-empty finite 1-D float64 array."""
    arr = np.asarray(scores, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_probability(p: float, *, name: str = "p", open_interval: bool = False) -> float:
    p = float(p)
    if open_interval:
        if not (0.0 < p < 1.0):
            raise ValueError(f"{name} must be in (0, 1), got {p}")
    elif not (0.0 <= p <= 1.0):
        raise ValueError(f"{name} must be in [0, 1], got {p}")
    return p


def as_tensor_image(x, *, dtype=torch.float32) -> torch.Tensor:
    """Convert a numpy (C, H, W) or (H, W) image to a torch tensor, validating range."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    check_image(arr)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def as_numpy_image(x: torch.Tensor) -> np.ndarray:
    """Convert a (C, H, W) tensor back to float32 numpy, validating range."""
    arr = x.detach().cpu().numpy().astype(np.float32)
    check_image(arr)
    return arr
