"""Adaptive zoom: crop management around the last detection, miss-recovery
growth, and crop <-> full-frame coordinate mapping.

The crop window always keeps the detector aspect ratio, so the crop-to-
detector resize factor is a single scalar. Saturation under repeated misses
is the largest aspect-preserving window centered in the image.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import CameraIntrinsics


@dataclass(frozen=True)
class BBox:
    x: float  # center, full-frame pixels
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError("box must have positive size")


@dataclass(frozen=True)
class Detection:
    box: BBox
    confidence: float


@dataclass(frozen=True)
class CropWindow:
    x0: float
    y0: float
    cw: float
    ch: float
    scale: float  # crop-to-detector resize factor (detector px per crop px)

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x0 + self.cw and self.y0 <= y <= self.y0 + self.ch


@dataclass(frozen=True)
class ZoomConfig:
    enlarge: float = 1.5  # margin factor alpha around the last box
    growth: float = 1.4  # per-miss crop growth
    sat_misses: int = 6  # misses until full-frame search
    conf_threshold: float = 0.30
    detector_width: int = 320
    detector_height: int = 256
    max_zoom: float = 2.0  # upsampling beyond native pixels adds no detail

    @property
    def detector_aspect(self) -> float:
        return self.detector_width / self.detector_height


@dataclass(frozen=True)
class ZoomState:
    last_box: BBox | None = None
    miss_count: int = 0
    config: ZoomConfig = ZoomConfig()


def _max_window(k: CameraIntrinsics, aspect: float) -> tuple[float, float]:
    """Largest aspect-preserving window that fits the image."""
    cw = float(k.width)
    ch = cw / aspect
    if ch > k.height:
        ch = float(k.height)
        cw = ch * aspect
    return cw, ch


def compute_crop(state: ZoomState, k: CameraIntrinsics) -> CropWindow:
    """Crop window around the last detection, grown per miss count.

    Without any prior box (or once growth saturates) this degenerates to the
    largest detector-aspect window centered in the image.
    """
    cfg = state.config
    aspect = cfg.detector_aspect
    max_cw, max_ch = _max_window(k, aspect)

    if state.last_box is None:
        cw, ch = max_cw, max_ch
        cx, cy = k.width / 2.0, k.height / 2.0
    else:
        if state.miss_count >= cfg.sat_misses:
            # growth saturated: fall back to the full search window
            w, h = max_cw, max_ch
        else:
            grow = cfg.growth**state.miss_count
            w = cfg.enlarge * state.last_box.w * grow
            h = cfg.enlarge * state.last_box.h * grow
        # expand the short side to the detector aspect
        if w / h < aspect:
            w = h * aspect
        else:
            h = w / aspect
        # cap the zoom factor: crop no smaller than detector_res / max_zoom
        min_cw = cfg.detector_width / cfg.max_zoom
        if w < min_cw:
            w = min_cw
            h = w / aspect
        cw = min(w, max_cw)
        ch = cw / aspect
        cx, cy = state.last_box.x, state.last_box.y

    x0 = np.clip(cx - cw / 2.0, 0.0, k.width - cw)
    y0 = np.clip(cy - ch / 2.0, 0.0, k.height - ch)
    return CropWindow(float(x0), float(y0), float(cw), float(ch), cfg.detector_width / cw)


def to_full_frame(box_in_crop: BBox, win: CropWindow) -> BBox:
    """Map a detector-coordinate box back into full-frame pixels."""
    return BBox(
        x=win.x0 + box_in_crop.x / win.scale,
        y=win.y0 + box_in_crop.y / win.scale,
        w=box_in_crop.w / win.scale,
        h=box_in_crop.h / win.scale,
    )


def to_crop(box_full: BBox, win: CropWindow) -> BBox:
    """Inverse of to_full_frame."""
    return BBox(
        x=(box_full.x - win.x0) * win.scale,
        y=(box_full.y - win.y0) * win.scale,
        w=box_full.w * win.scale,
        h=box_full.h * win.scale,
    )


def on_detection(state: ZoomState, det: Detection | None) -> ZoomState:
    """Accept a detection (resetting miss recovery) or count a miss."""
    if det is not None and det.confidence >= state.config.conf_threshold:
        return replace(state, last_box=det.box, miss_count=0)
    return replace(state, miss_count=state.miss_count + 1)
