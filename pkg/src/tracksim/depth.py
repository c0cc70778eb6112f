"""Depth/disparity conversion, polynomial disparity alignment, dense depth
completion, and histogram-mode target depth extraction.

Frames are H x W float grids with a boolean validity mask. Disparity and
depth are mutual inverses through Delta = f*B / (D + eps).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class DegenerateFitError(ValueError):
    """Too few or rank-deficient samples for the disparity polynomial fit."""


class NoDepthError(ValueError):
    """No valid depth pixels inside the detection box."""


HIST_RANGE = (0.1, 100.0)  # depth pixels outside this range are ignored

_GRID_MAGIC = b"TGRD"
FLAG_DISPARITY = 0x1


@dataclass
class DepthFrame:
    values: np.ndarray  # H x W, meters
    valid: np.ndarray  # H x W, bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape or self.values.ndim != 2:
            raise ValueError("values and valid must be matching H x W grids")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class DisparityFrame:
    values: np.ndarray  # H x W, pixels
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape or self.values.ndim != 2:
            raise ValueError("values and valid must be matching H x W grids")

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class StereoGeometry:
    f: float  # focal length, pixels
    B: float  # baseline, meters
    eps: float = 1e-6

    def __post_init__(self):
        if not (self.f > 0 and self.B > 0 and self.eps > 0):
            raise ValueError("stereo geometry values must be positive")


@dataclass(frozen=True)
class DisparityFit:
    a: float
    b: float
    c: float
    n_valid: int
    residual_rms: float

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])

    def apply(self, rel: np.ndarray) -> np.ndarray:
        return self.a * rel * rel + self.b * rel + self.c


@dataclass(frozen=True)
class TargetDepthEstimate:
    z: float
    modal_bin_index: int
    support: int
    total: int


def depth_to_disparity(d: DepthFrame, g: StereoGeometry) -> DisparityFrame:
    disp = g.f * g.B / (d.values + g.eps)
    return DisparityFrame(disp, d.valid.copy())


def disparity_to_depth(disp: DisparityFrame, g: StereoGeometry) -> DepthFrame:
    depth = g.f * g.B / (disp.values + g.eps)
    valid = disp.valid & (disp.values > 0)
    return DepthFrame(depth, valid)


def fit_disparity_polynomial(
    rel: DisparityFrame, abs_: DisparityFrame, mask: np.ndarray | None = None
) -> DisparityFit:
    """Least-squares quadratic mapping relative -> absolute disparity.

    Solved with an orthogonal factorization (lstsq) rather than the normal
    equations: X^T X is badly conditioned when disparities cluster.
    """
    m = rel.valid & abs_.valid
    if mask is not None:
        m = m & np.asarray(mask, dtype=bool)
    r = rel.values[m]
    y = abs_.values[m]
    n = r.size
    if n < 3:
        raise DegenerateFitError(f"need >= 3 valid pixels, got {n}")
    X = np.column_stack([r * r, r, np.ones(n)])
    theta, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < 3:
        raise DegenerateFitError("rank-deficient design matrix (disparities collinear)")
    resid = X @ theta - y
    rms = float(np.sqrt(np.mean(resid * resid)))
    return DisparityFit(float(theta[0]), float(theta[1]), float(theta[2]), n, rms)


def complete_depth(rel: DisparityFrame, fit: DisparityFit, g: StereoGeometry) -> DepthFrame:
    """Apply the fitted polynomial at all pixels and convert back to depth.

    Pixels whose completed disparity is non-positive are non-physical and
    are marked invalid.
    """
    disp_com = fit.apply(rel.values)
    valid = disp_com > 0
    depth = np.where(valid, g.f * g.B / (disp_com + g.eps), 0.0)
    return DepthFrame(depth, valid)


def estimate_target_depth(d: DepthFrame, box, bin_width: float) -> TargetDepthEstimate:
    """Histogram-mode depth inside a detection box.

    box is any object with center (x, y) and size (w, h) in pixel units.
    The estimate is the mean of the depth values falling into the most
    populated fixed-width bin; ties break toward the nearer bin.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    H, W = d.shape
    x0 = max(int(np.floor(box.x - box.w / 2)), 0)
    x1 = min(int(np.ceil(box.x + box.w / 2)), W)
    y0 = max(int(np.floor(box.y - box.h / 2)), 0)
    y1 = min(int(np.ceil(box.y + box.h / 2)), H)
    if x0 >= x1 or y0 >= y1:
        raise NoDepthError("detection box does not intersect the image")

    patch = d.values[y0:y1, x0:x1]
    ok = d.valid[y0:y1, x0:x1] & (patch >= HIST_RANGE[0]) & (patch <= HIST_RANGE[1])
    vals = patch[ok]
    if vals.size == 0:
        raise NoDepthError("no valid depth pixels inside the detection box")

    bins = np.floor((vals - HIST_RANGE[0]) / bin_width).astype(int)
    counts = np.bincount(bins)
    # argmax returns the first (nearest) bin on ties
    mode = int(np.argmax(counts))
    members = vals[bins == mode]
    return TargetDepthEstimate(
        z=float(np.mean(members)),
        modal_bin_index=mode,
        support=int(counts[mode]),
        total=int(vals.size),
    )


def write_grid(path, values: np.ndarray, valid: np.ndarray, *, disparity: bool = False):
    """Serialize a frame as row-major little-endian float32 with a 16-byte header.

    Header: magic 'TGRD', H, W, flags (uint32 LE). Invalid pixels are NaN.
    """
    H, W = values.shape
    flags = FLAG_DISPARITY if disparity else 0
    data = np.array(values, dtype="<f4")
    data[~np.asarray(valid, dtype=bool)] = np.nan
    with open(path, "wb") as fh:
        fh.write(_GRID_MAGIC)
        fh.write(struct.pack("<III", H, W, flags))
        fh.write(data.tobytes(order="C"))


def read_grid(path):
    """Inverse of write_grid. Returns (values, valid, flags)."""
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != _GRID_MAGIC:
            raise ValueError("not a grid file (bad magic)")
        H, W, flags = struct.unpack("<III", header[4:])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != H * W:
        raise ValueError("grid payload size mismatch")
    values = data.reshape(H, W).astype(np.float64)
    valid = np.isfinite(values)
    values = np.where(valid, values, 0.0)
    return values, valid, flags
