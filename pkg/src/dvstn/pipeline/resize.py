"""Area (box-filter) and bilinear resampling of single-channel frames."""

from __future__ import annotations

import logging
import warnings

import numpy as np

from ..errors import ConfigurationError

log = logging.getLogger(__name__)


def _size(size):
    if isinstance(size, (int, np.integer)):
        return int(size), int(size)
    w, h = size
    return int(w), int(h)


def _area_matrix(n_in, n_out):
    """Row i holds the overlap of each source cell with output cell i, normalized."""
    scale = n_in / n_out
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(lo)), min(n_in, int(np.ceil(hi)))
        for j in range(j0, j1):
            m[i, j] = min(hi, j + 1) - max(lo, j)
    return m / scale


def resize_area(image, size):
    """Downscale by exact area-weighted averaging.

    ``size`` is a side length or ``(width, height)``.  Output cells average
    the source rectangle they cover, with fractional weights at non-integral
    boundaries.  Upscaling is delegated to :func:`resize_bilinear` with a
    warning.  Returns float32.
    """
    img = np.asarray(image, dtype=np.float64)
    out_w, out_h = _size(size)
    h, w = img.shape
    if out_w < 1 or out_h < 1:
        raise ConfigurationError(f"output size must be positive, got {(out_w, out_h)}")
    if out_w > w or out_h > h:
        warnings.warn(f"area resize cannot upscale {w}x{h} to {out_w}x{out_h}; using bilinear",
                      RuntimeWarning, stacklevel=2)
        log.warning("area resize upscale request %dx%d -> %dx%d, fell back to bilinear", w, h, out_w, out_h)
        return resize_bilinear(image, (out_w, out_h))
    if h % out_h == 0 and w % out_w == 0:
        fy, fx = h // out_h, w // out_w
        return img.reshape(out_h, fy, out_w, fx).mean(axis=(1, 3)).astype(np.float32)
    return (_area_matrix(h, out_h) @ img @ _area_matrix(w, out_w).T).astype(np.float32)


def _bilinear_taps(n_in, n_out):
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0, n_in - 1)
    i0 = np.floor(x).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, x - i0


def resize_bilinear(image, size):
    """Bilinear resampling with half-pixel centers (align_corners=False)."""
    img = np.asarray(image, dtype=np.float64)
    out_w, out_h = _size(size)
    if out_w < 1 or out_h < 1:
        raise ConfigurationError(f"output size must be positive, got {(out_w, out_h)}")
    h, w = img.shape
    y0, y1, fy = _bilinear_taps(h, out_h)
    x0, x1, fx = _bilinear_taps(w, out_w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy[:, None]) + bot * fy[:, None]).astype(np.float32)
