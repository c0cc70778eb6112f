"""Adaptive zoom crop management tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracksim import zoom
from tracksim.geometry import CameraIntrinsics


CFG = zoom.ZoomConfig()


def make_state(box=None, misses=0, cfg=CFG):
    return zoom.ZoomState(last_box=box, miss_count=misses, config=cfg)


class TestCropWindow:
    def test_no_prior_box_gives_centered_max_window(self, cam):
        win = zoom.compute_crop(make_state(), cam)
        assert win.cw / win.ch == pytest.approx(CFG.detector_aspect)
        # centered
        assert win.x0 + win.cw / 2 == pytest.approx(cam.width / 2)
        assert win.y0 + win.ch / 2 == pytest.approx(cam.height / 2)
        # largest aspect-preserving window in a 320 x 240 image at 320:256
        assert win.ch == pytest.approx(240.0)
        assert win.cw == pytest.approx(240.0 * CFG.detector_aspect)

    def test_crop_centers_on_last_box(self, cam):
        box = zoom.BBox(200.0, 100.0, 40.0, 40.0)
        win = zoom.compute_crop(make_state(box), cam)
        assert win.x0 + win.cw / 2 == pytest.approx(box.x)
        assert win.y0 + win.ch / 2 == pytest.approx(box.y)

    def test_crop_grows_with_misses(self, cam):
        box = zoom.BBox(160.0, 120.0, 80.0, 80.0)
        sizes = [zoom.compute_crop(make_state(box, m), cam).cw for m in range(CFG.sat_misses)]
        assert all(b >= a for a, b in zip(sizes, sizes[1:]))

    def test_saturation_is_max_window(self, cam):
        box = zoom.BBox(10.0, 10.0, 8.0, 8.0)
        win = zoom.compute_crop(make_state(box, CFG.sat_misses), cam)
        base = zoom.compute_crop(make_state(), cam)
        assert (win.cw, win.ch) == (base.cw, base.ch)

    def test_max_zoom_cap(self, cam):
        # a tiny box cannot shrink the crop below detector_width / max_zoom
        box = zoom.BBox(160.0, 120.0, 2.0, 2.0)
        win = zoom.compute_crop(make_state(box), cam)
        assert win.cw >= CFG.detector_width / CFG.max_zoom - 1e-9
        assert win.scale <= CFG.max_zoom + 1e-9

    def test_crop_stays_inside_image(self, cam, rng):
        for _ in range(200):
            box = zoom.BBox(
                rng.uniform(0, cam.width), rng.uniform(0, cam.height),
                rng.uniform(2, 200), rng.uniform(2, 200),
            )
            win = zoom.compute_crop(make_state(box, int(rng.integers(0, 8))), cam)
            assert win.x0 >= -1e-9 and win.y0 >= -1e-9
            assert win.x0 + win.cw <= cam.width + 1e-9
            assert win.y0 + win.ch <= cam.height + 1e-9
            assert win.cw / win.ch == pytest.approx(CFG.detector_aspect)


class TestCoordinateMaps:
    @given(
        bx=st.floats(0, 320), by=st.floats(0, 240),
        bw=st.floats(1, 100), bh=st.floats(1, 100),
        cx=st.floats(0, 160), cy=st.floats(0, 112),
        cw=st.floats(160, 320),
    )
    @settings(max_examples=100, deadline=None)
    def test_to_crop_to_full_roundtrip(self, bx, by, bw, bh, cx, cy, cw):
        win = zoom.CropWindow(cx, cy, cw, cw / CFG.detector_aspect, CFG.detector_width / cw)
        box = zoom.BBox(bx, by, bw, bh)
        back = zoom.to_full_frame(zoom.to_crop(box, win), win)
        assert back.x == pytest.approx(box.x, abs=1e-9)
        assert back.y == pytest.approx(box.y, abs=1e-9)
        assert back.w == pytest.approx(box.w, rel=1e-9)
        assert back.h == pytest.approx(box.h, rel=1e-9)

    def test_scale_semantics(self):
        # a crop half the detector width doubles pixel coordinates
        win = zoom.CropWindow(100.0, 50.0, 160.0, 128.0, 2.0)
        box = zoom.to_crop(zoom.BBox(110.0, 60.0, 10.0, 10.0), win)
        assert (box.x, box.y, box.w, box.h) == (20.0, 20.0, 20.0, 20.0)


class TestMissRecovery:
    def test_good_detection_resets(self):
        st0 = make_state(zoom.BBox(10, 10, 5, 5), misses=3)
        det = zoom.Detection(zoom.BBox(20, 20, 6, 6), confidence=0.9)
        st1 = zoom.on_detection(st0, det)
        assert st1.miss_count == 0
        assert st1.last_box == det.box

    def test_low_confidence_counts_as_miss(self):
        st0 = make_state(zoom.BBox(10, 10, 5, 5), misses=1)
        det = zoom.Detection(zoom.BBox(20, 20, 6, 6), confidence=0.05)
        st1 = zoom.on_detection(st0, det)
        assert st1.miss_count == 2
        assert st1.last_box == st0.last_box

    def test_none_counts_as_miss(self):
        st1 = zoom.on_detection(make_state(), None)
        assert st1.miss_count == 1

    def test_bbox_validation(self):
        with pytest.raises(ValueError):
            zoom.BBox(0, 0, 0.0, 5.0)
