import numpy as np
import pytest
import torch

from stitchforge import (
    ShapeMismatch,
    correlate,
    correlation_counters,
    memory_cells,
    reset_correlation_counters,
)

RNG = np.random.default_rng(99)


def rand_feats(b, c, h, w):
    return torch.from_numpy(RNG.standard_normal((b, c, h, w)))


def correlate_oracle(fa, fb, radius):
    """Triple-loop cosine volume, the reference semantics."""
    b, c, h, w = fa.shape
    k = 2 * radius + 1
    out = np.zeros((b, k * k, h, w))
    a = fa.numpy()
    bb = fb.numpy()

    def unit(v):
        n = np.linalg.norm(v)
        return v / max(n, 1e-8)

    for bi in range(b):
        for y in range(h):
            for x in range(w):
                va = unit(a[bi, :, y, x])
                for dy in range(-radius, radius + 1):
                    for dx in range(-radius, radius + 1):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w:
                            vb = unit(bb[bi, :, yy, xx])
                            slot = (dy + radius) * k + (dx + radius)
                            out[bi, slot, y, x] = float(va @ vb)
    return np.clip(out, -1.0, 1.0)


class TestCorrelate:
    def test_local_path_matches_oracle(self):
        fa, fb = rand_feats(2, 3, 5, 6), rand_feats(2, 3, 5, 6)
        vol = correlate(fa, fb, radius=2)
        np.testing.assert_allclose(vol.numpy(), correlate_oracle(fa, fb, 2), atol=1e-12)

    def test_global_path_matches_oracle(self):
        fa, fb = rand_feats(1, 4, 3, 3), rand_feats(1, 4, 3, 3)
        vol = correlate(fa, fb, radius=3)  # radius >= max(h, w) covers the whole map
        np.testing.assert_allclose(vol.numpy(), correlate_oracle(fa, fb, 3), atol=1e-12)

    def test_self_peak_is_one_at_zero_displacement(self):
        fa = rand_feats(1, 8, 4, 4)
        r = 2
        vol = correlate(fa, fa, radius=r)
        center = (0 + r) * (2 * r + 1) + (0 + r)
        peak = vol[0, center]
        assert float((peak - 1.0).abs().max()) <= 1e-6
        assert torch.equal(vol.argmax(dim=1)[0], torch.full((4, 4), center))

    def test_shift_peak_localization_exact(self):
        fa = rand_feats(1, 8, 6, 6)
        dy, dx = 1, -2
        fb = torch.zeros_like(fa)
        # fb(y, x) = fa(y - dy, x - dx), so a's match sits at displacement (dy, dx)...
        fb[:, :, max(dy, 0) : 6 + min(dy, 0), max(dx, 0) : 6 + min(dx, 0)] = fa[
            :, :, max(-dy, 0) : 6 + min(-dy, 0), max(-dx, 0) : 6 + min(-dx, 0)
        ]
        r = 2
        vol = correlate(fa, fb, radius=r)
        slot = (dy + r) * (2 * r + 1) + (dx + r)
        # interior positions whose displaced partner is in range
        for y in range(2, 4):
            for x in range(2, 4):
                assert int(vol[0, :, y, x].argmax()) == slot
                assert float(vol[0, slot, y, x]) == pytest.approx(1.0, abs=1e-6)

    def test_values_within_unit_interval(self):
        fa, fb = rand_feats(2, 16, 8, 8), rand_feats(2, 16, 8, 8)
        vol = correlate(fa, fb, radius=3)
        assert float(vol.max()) <= 1.0
        assert float(vol.min()) >= -1.0
        self_vol = correlate(fa, fa, radius=3)
        assert float(self_vol.max()) <= 1.0

    def test_out_of_bounds_slots_are_exactly_zero(self):
        fa = rand_feats(1, 4, 4, 4).abs() + 0.5  # strictly positive cosines inside
        vol = correlate(fa, fa, radius=2)
        k = 5
        # top-left position: any negative displacement leaves the map
        for dy in range(-2, 3):
            for dx in range(-2, 3):
                if dy < 0 or dx < 0:
                    slot = (dy + 2) * k + (dx + 2)
                    assert float(vol[0, slot, 0, 0]) == 0.0

    def test_zero_feature_vector_gives_zero_slots(self):
        fa = rand_feats(1, 4, 3, 3)
        fb = rand_feats(1, 4, 3, 3)
        fa[0, :, 1, 1] = 0.0
        vol = correlate(fa, fb, radius=1)
        assert float(vol[0, :, 1, 1].abs().max()) == 0.0

    def test_symmetry_identity(self):
        fa, fb = rand_feats(1, 6, 5, 5), rand_feats(1, 6, 5, 5)
        r = 2
        k = 2 * r + 1
        vab = correlate(fa, fb, radius=r)
        vba = correlate(fb, fa, radius=r)
        for y in range(5):
            for x in range(5):
                for dy in range(-r, r + 1):
                    for dx in range(-r, r + 1):
                        yy, xx = y + dy, x + dx
                        if not (0 <= yy < 5 and 0 <= xx < 5):
                            continue
                        s1 = (dy + r) * k + (dx + r)
                        s2 = (-dy + r) * k + (-dx + r)
                        assert float(vab[0, s1, y, x]) == pytest.approx(
                            float(vba[0, s2, yy, xx]), abs=1e-12
                        )

    def test_gradient_matches_finite_differences(self):
        fa = rand_feats(1, 3, 4, 4).requires_grad_(True)
        fb = rand_feats(1, 3, 4, 4).requires_grad_(True)
        assert torch.autograd.gradcheck(
            lambda a, b: correlate(a, b, radius=1), (fa, fb), eps=1e-6, rtol=1e-3, atol=1e-5
        )

    def test_global_gradient_matches_finite_differences(self):
        fa = rand_feats(1, 3, 3, 3).requires_grad_(True)
        fb = rand_feats(1, 3, 3, 3).requires_grad_(True)
        assert torch.autograd.gradcheck(
            lambda a, b: correlate(a, b, radius=3), (fa, fb), eps=1e-6, rtol=1e-3, atol=1e-5
        )

    def test_batch_independence(self):
        fa, fb = rand_feats(2, 4, 4, 4), rand_feats(2, 4, 4, 4)
        vol = correlate(fa, fb, radius=1)
        solo = correlate(fa[1:], fb[1:], radius=1)
        assert torch.allclose(vol[1:], solo)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            correlate(rand_feats(1, 3, 4, 4), rand_feats(1, 3, 4, 5), radius=1)
        with pytest.raises(ShapeMismatch):
            correlate(rand_feats(1, 3, 4, 4), rand_feats(1, 3, 4, 4)[0], radius=1)

    def test_rejects_bad_radius(self):
        f = rand_feats(1, 3, 4, 4)
        with pytest.raises(ValueError):
            correlate(f, f, radius=0)


class TestAllocationTracking:
    def test_memory_cells_formula(self):
        assert memory_cells(16, 16, 4) == 16 * 16 * 81
        assert memory_cells(8, 8, 8) == 8 * 8 * 289

    def test_counters_record_each_call(self):
        reset_correlation_counters()
        f = rand_feats(1, 3, 4, 4)
        correlate(f, f, radius=1)
        correlate(f, f, radius=2)
        stats = correlation_counters()
        assert stats["calls"] == 2
        assert stats["peak_cells"] == 16 * 25
        assert stats["total_cells"] == 16 * 9 + 16 * 25
        reset_correlation_counters()
        assert correlation_counters()["calls"] == 0
