"""Canny edge maps used as the spatial-control signal for generation.

Classic pipeline: Gaussian smoothing, Sobel gradients, non-maximum
suppression, hysteresis linking. Thresholds are fractions of the peak
gradient magnitude, which makes the detector invariant to affine intensity
rescaling of the input.

Conventions (deliberately explicit so a scalar reference implementation can
reproduce the output bit for bit):

- Borders are padded symmetrically (edge value duplicated) for both the
  Gaussian and Sobel correlations; taps accumulate in ascending offset
  order.
- The Gaussian kernel has radius ``int(4 * sigma + 0.5)``; Sobel applies the
  derivative [-1, 0, 1] along its axis first, then [1, 2, 1] smoothing
  across.
- Gradient direction is quantized by rounding (cos, sin) of the gradient
  angle to {-1, 0, 1} neighbor offsets.
- A pixel survives suppression when its magnitude is strictly greater than
  the neighbor ahead (along the gradient) and at least the neighbor behind,
  so ties across a symmetric step resolve to the brighter side.
- The one-pixel image border is always suppressed.
"""

from __future__ import annotations

import numpy as np
import torch

DEFAULT_SIGMA = 1.0
DEFAULT_T_LOW = 0.1
DEFAULT_T_HIGH = 0.3


def _as_gray(image) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError(f"expected single-channel image, got {arr.shape}")
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"expected (H, W) or (1, H, W) image, got {arr.shape}")
    return arr


def correlate1d(arr: np.ndarray, weights, axis: int) -> np.ndarray:
    """Symmetric-padded 1-D correlation with fixed tap accumulation order."""
    weights = list(weights)
    radius = len(weights) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, mode="symmetric")
    out = np.zeros_like(arr)
    for k, w in enumerate(weights):
        index = [slice(None), slice(None)]
        index[axis] = slice(k, k + arr.shape[axis])
        out += w * padded[tuple(index)]
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(4.0 * sigma + 0.5)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def gaussian_smooth(arr: np.ndarray, sigma: float) -> np.ndarray:
    kernel = gaussian_kernel(sigma)
    return correlate1d(correlate1d(arr, kernel, axis=0), kernel, axis=1)


def sobel_gradients(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(gx, gy): derivative along columns resp. rows, [1,2,1]-smoothed across."""
    gx = correlate1d(correlate1d(arr, [-1.0, 0.0, 1.0], axis=1), [1.0, 2.0, 1.0], axis=0)
    gy = correlate1d(correlate1d(arr, [-1.0, 0.0, 1.0], axis=0), [1.0, 2.0, 1.0], axis=1)
    return gx, gy


def canny_edges(
    image,
    sigma: float = DEFAULT_SIGMA,
    t_low: float = DEFAULT_T_LOW,
    t_high: float = DEFAULT_T_HIGH,
) -> np.ndarray:
    """Binary edge map of ``image`` as a uint8 (H, W) array of {0, 1}.

    ``t_low`` and ``t_high`` are relative to the maximum gradient magnitude.
    A constant image has no gradients and yields an all-zero map.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not (t_low < t_high):
        raise ValueError(f"thresholds must satisfy t_low < t_high, got ({t_low}, {t_high})")
    arr = _as_gray(image)

    smoothed = gaussian_smooth(arr, sigma)
    gx, gy = sobel_gradients(smoothed)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0.0:
        return np.zeros(arr.shape, dtype=np.uint8)

    nms = _suppress_non_maxima(mag, gx, gy)
    weak = nms >= t_low * peak
    strong = nms >= t_high * peak
    return _link_hysteresis(weak, strong)


def _suppress_non_maxima(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    theta = np.arctan2(gy, gx)
    dc = np.rint(np.cos(theta)).astype(np.intp)
    dr = np.rint(np.sin(theta)).astype(np.intp)

    h, w = mag.shape
    padded = np.pad(mag, 1, mode="constant")
    rows, cols = np.mgrid[0:h, 0:w]
    ahead = padded[rows + 1 + dr, cols + 1 + dc]
    behind = padded[rows + 1 - dr, cols + 1 - dc]

    keep = (mag > ahead) & (mag >= behind) & (mag > 0)
    keep[0, :] = keep[-1, :] = False
    keep[:, 0] = keep[:, -1] = False
    return np.where(keep, mag, 0.0)


def _dilate8(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1, mode="constant")
    out = np.zeros_like(mask)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            out |= padded[1 + dr : 1 + dr + mask.shape[0], 1 + dc : 1 + dc + mask.shape[1]]
    return out


def _link_hysteresis(weak: np.ndarray, strong: np.ndarray) -> np.ndarray:
    # grow strong seeds through the weak mask until fixpoint (8-connectivity)
    edges = strong & weak
    while True:
        grown = (_dilate8(edges) & weak) | edges
        if np.array_equal(grown, edges):
            return edges.astype(np.uint8)
        edges = grown


def edge_map_tensor(edge_map: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """Lift a binary (H, W) edge map to a (1, H, W) float tensor."""
    if edge_map.ndim != 2:
        raise ValueError(f"edge map must be (H, W), got {edge_map.shape}")
    return torch.from_numpy(np.ascontiguousarray(edge_map)).to(dtype)[None, :, :]
