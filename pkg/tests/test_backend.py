import concurrent.futures
import math

import numpy as np
import pytest

import posesearch.backend as backend_mod
from posesearch.backend import (
    DEFAULT_IMAGE_SIZE,
    DegradationModel,
    DenoiseRequest,
    GenerationRequest,
    OracleObject,
    make_oracle_backend,
    oracle_render,
)
from posesearch.errors import InvalidConditioning, ShapeMismatch
from posesearch.geometry import ViewChange, Viewpoint, great_circle_deg, relative_change
from posesearch.imaging import TensorBuffer, add_noise, sample_noise


class TestOracleObject:
    def test_deterministic_from_seed(self, blob_object):
        again = OracleObject.from_seed(blob_object.seed)
        np.testing.assert_array_equal(blob_object.centers, again.centers)
        np.testing.assert_array_equal(blob_object.radii, again.radii)
        np.testing.assert_array_equal(blob_object.colors, again.colors)

    def test_blob_invariants(self, blob_object):
        assert len(blob_object.radii) >= 20
        assert np.all(np.linalg.norm(blob_object.centers, axis=1) < 1.0)
        assert np.all(blob_object.radii > 0.0)
        assert np.all((blob_object.colors > 0.0) & (blob_object.colors < 1.0))

    @pytest.mark.parametrize("seed", [0, 1, 17])
    def test_asymmetry_guard_holds(self, seed):
        # the enforced invariant: no 180-degree azimuth flip looks the same
        obj = OracleObject.from_seed(seed)
        for v in [Viewpoint(33.0, 25.0), Viewpoint(140.0, 60.0), Viewpoint(280.0, 10.0)]:
            a = oracle_render(obj, v, 48).image.pixels
            b = oracle_render(
                obj, Viewpoint(v.azimuth_deg + 180.0, v.elevation_deg), 48
            ).image.pixels
            rms = float(np.sqrt(np.mean((a - b) ** 2)))
            assert rms > 0.05


class TestRenderer:
    def test_bit_identical_renders(self, blob_object):
        v = Viewpoint(200.0, 40.0)
        a = oracle_render(blob_object, v, 64)
        b = oracle_render(blob_object, v, 64)
        np.testing.assert_array_equal(a.image.pixels, b.image.pixels)
        np.testing.assert_array_equal(a.encoding.values, b.encoding.values)

    def test_size_floor(self, blob_object):
        with pytest.raises(ValueError):
            oracle_render(blob_object, Viewpoint(0.0, 30.0), 16)

    def test_moves_with_viewpoint(self, blob_object):
        a = oracle_render(blob_object, Viewpoint(100.0, 30.0), 64).image.pixels
        b = oracle_render(blob_object, Viewpoint(101.0, 30.0), 64).image.pixels
        assert float(np.abs(a - b).max()) > 0.0  # 1 degree moves the render

    def _centroid_of_lit(self, pixels: np.ndarray) -> tuple:
        mask = np.any(pixels < 0.999, axis=2)  # background is white
        ys, xs = np.nonzero(mask)
        return float(xs.mean() + 0.5), float(ys.mean() + 0.5)

    @pytest.mark.parametrize(
        "center",
        [(0.3, 0.0, 0.0), (0.3, 0.1, 0.05), (-0.2, -0.15, 0.1)],
    )
    def test_pinhole_projection_hand_check(self, center):
        # single blob, camera at (1, 0, 0) looking at the origin: camera axes
        # are right=+y, up=+z, so x_c = c_y, y_c = c_z, depth = 1 - c_x
        size = 64
        obj = OracleObject(
            seed=0,
            centers=np.array([center], dtype=np.float64),
            radii=np.array([0.08]),
            colors=np.array([[0.8, 0.2, 0.2]]),
        )
        res = oracle_render(obj, Viewpoint(0.0, 0.0, 1.0), size)
        cx, cy = self._centroid_of_lit(res.image.pixels)
        f = 0.85 * size
        depth = 1.0 - center[0]
        u = size / 2 + f * center[1] / depth
        v = size / 2 - f * center[2] / depth
        assert abs(cx - u) < 1.0
        assert abs(cy - v) < 1.0

    def test_painter_ordering(self):
        # rear blob must not punch through the front one along the view axis
        obj = OracleObject(
            seed=0,
            centers=np.array([[0.3, 0.0, 0.0], [-0.3, 0.0, 0.0]], dtype=np.float64),
            radii=np.array([0.08, 0.08]),
            colors=np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
        )
        pix = oracle_render(obj, Viewpoint(0.0, 0.0, 1.0), 64).image.pixels
        center = pix[32, 32]
        assert center[0] > center[2]  # red (near) wins over blue (far)


class TestDegradationModel:
    def test_perfect_at_zero_gain(self):
        m = DegradationModel()
        assert m.std_for_angle(120.0) == 0.0

    def test_zero_angle_zero_noise(self):
        m = DegradationModel(gain=0.5, exponent=1.0)
        assert m.std_for_angle(0.0) == 0.0

    def test_law(self):
        m = DegradationModel(gain=0.5, exponent=2.0)
        assert m.std_for_angle(90.0) == pytest.approx(0.5 * 0.25)

    def test_validation(self):
        with pytest.raises(ValueError):
            DegradationModel(gain=-0.1)
        with pytest.raises(ValueError):
            DegradationModel(gain=1.0, exponent=0.0)


class TestOracleGenerate:
    def test_zero_change_identity(self, perfect_backend, blob_object):
        v = Viewpoint(170.0, 35.0)
        cond = oracle_render(blob_object, v, 64)
        out = perfect_backend.generate(
            GenerationRequest(cond=cond.image, change=ViewChange(0.0, 0.0, 0.0))
        )
        np.testing.assert_array_equal(out.encoding.values, cond.encoding.values)

    def test_any_change_equals_direct_render(self, perfect_backend, blob_object):
        src, dst = Viewpoint(40.0, 20.0), Viewpoint(285.0, 55.0)
        cond = oracle_render(blob_object, src, 64)
        out = perfect_backend.generate(
            GenerationRequest(cond=cond.image, change=relative_change(src, dst))
        )
        direct = oracle_render(blob_object, dst, 64)
        np.testing.assert_array_equal(out.encoding.values, direct.encoding.values)

    def test_rejects_radius_change(self, perfect_backend, blob_object):
        cond = oracle_render(blob_object, Viewpoint(0.0, 30.0), 64)
        with pytest.raises(ValueError):
            GenerationRequest(cond=cond.image, change=ViewChange(0.0, 0.0, 0.5))

    def test_deterministic_across_calls(self, degraded_backend, blob_object):
        cond = oracle_render(blob_object, Viewpoint(10.0, 25.0), 64)
        req = GenerationRequest(cond=cond.image, change=ViewChange(15.0, 120.0, 0.0))
        a = degraded_backend.generate(req)
        b = degraded_backend.generate(req)
        np.testing.assert_array_equal(a.encoding.values, b.encoding.values)

    def test_degradation_std_ratio(self, blob_object, schedule, catalog):
        # eta=0.5, p=1: the a=120 vs a=60 noise-std ratio is 2
        be = make_oracle_backend(
            blob_object, DegradationModel(gain=0.5, exponent=1.0), schedule, 64
        )
        be.register_viewpoints(catalog)
        src = Viewpoint(0.0, 0.1)  # near-equatorial so azimuth ~ great-circle angle
        cond = oracle_render(blob_object, src, 64)

        def added_noise_std(d_az):
            out = be.generate(GenerationRequest(cond=cond.image, change=ViewChange(0.0, d_az, 0.0)))
            tgt = Viewpoint(src.azimuth_deg + d_az, src.elevation_deg)
            clean = oracle_render(blob_object, tgt, 64)
            return float(np.std(out.encoding.values - clean.encoding.values))

        r = added_noise_std(120.0) / added_noise_std(60.0)
        assert r == pytest.approx(2.0, rel=0.1)

    def test_degradation_energy_statistics(self, blob_object, schedule, catalog):
        # gain=1, p=1: ||enc - clean||^2 / numel averages to (a/180)^2 across
        # many decorrelated (cond, change) draws
        be = make_oracle_backend(
            blob_object, DegradationModel(gain=1.0, exponent=1.0), schedule, 64
        )
        be.register_viewpoints(catalog)
        g = np.random.default_rng(99)
        ratios = []
        for _ in range(100):
            src = Viewpoint(g.uniform(0, 360), g.uniform(5, 70))
            cond = oracle_render(blob_object, src, 64)
            change = ViewChange(g.uniform(-20, 20), g.uniform(30, 150), 0.0)
            out = be.generate(GenerationRequest(cond=cond.image, change=change))
            tgt = Viewpoint(
                src.azimuth_deg + change.d_azimuth_deg,
                src.elevation_deg + change.d_elevation_deg,
            )
            clean = oracle_render(blob_object, tgt, 64)
            a = great_circle_deg(src, tgt)
            energy = float(np.mean((out.encoding.values - clean.encoding.values) ** 2))
            ratios.append(energy / (a / 180.0) ** 2)
        assert float(np.mean(ratios)) == pytest.approx(1.0, rel=0.05)


class TestOracleDenoise:
    def test_recovers_eps_exactly(self, perfect_backend, blob_object, schedule):
        src, dst = Viewpoint(75.0, 15.0), Viewpoint(190.0, 50.0)
        cond = oracle_render(blob_object, src, 64)
        gen = perfect_backend.generate(
            GenerationRequest(cond=cond.image, change=relative_change(src, dst))
        )
        eps = sample_noise(31, gen.encoding.shape)
        t = 400
        noisy = add_noise(gen.encoding, schedule, t, eps)
        out = perfect_backend.denoise(
            DenoiseRequest(noisy=noisy, t_index=t, cond=cond.image,
                           change=relative_change(src, dst))
        )
        np.testing.assert_allclose(out.values, eps.tensor.values, atol=1e-5)

    def test_residual_formula_brute_force(self, perfect_backend, blob_object, schedule):
        # noisy built from a different clean tensor x': eps_hat - eps must be
        # (alpha/sigma) * (x' - G) elementwise
        src = Viewpoint(120.0, 30.0)
        cond = oracle_render(blob_object, src, 64)
        change = ViewChange(10.0, 45.0, 0.0)
        g_enc = perfect_backend.generate(
            GenerationRequest(cond=cond.image, change=change)
        ).encoding
        rng_ = np.random.default_rng(5)
        x_prime = TensorBuffer.from_array(rng_.random((64, 64, 3), dtype=np.float32))
        eps = sample_noise(77, (64, 64, 3))
        t = 400
        noisy = add_noise(x_prime, schedule, t, eps)
        out = perfect_backend.denoise(
            DenoiseRequest(noisy=noisy, t_index=t, cond=cond.image, change=change)
        )
        a_over_s = schedule.alpha(t) / schedule.sigma(t)
        want = eps.tensor.values + a_over_s * (x_prime.values - g_enc.values)
        np.testing.assert_allclose(out.values, want, atol=1e-4)
        # spot-check a few entries against the scalar formula, written out
        for idx in [(0, 0, 0), (31, 40, 1), (63, 63, 2)]:
            alpha = math.sqrt(schedule.alpha_bar[t])
            sigma = math.sqrt(1.0 - schedule.alpha_bar[t])
            scalar = (float(noisy.values[idx]) - alpha * float(g_enc.values[idx])) / sigma
            assert float(out.values[idx]) == pytest.approx(scalar, abs=1e-4)

    def test_residual_shrinks_with_t(self, perfect_backend, blob_object, schedule):
        src = Viewpoint(10.0, 40.0)
        cond = oracle_render(blob_object, src, 64)
        change = ViewChange(0.0, 90.0, 0.0)
        g_enc = perfect_backend.generate(
            GenerationRequest(cond=cond.image, change=change)
        ).encoding
        x_prime = TensorBuffer.from_array(np.zeros((64, 64, 3), dtype=np.float32))
        eps = sample_noise(3, (64, 64, 3))

        def residual_norm(t):
            noisy = add_noise(x_prime, schedule, t, eps)
            out = perfect_backend.denoise(
                DenoiseRequest(noisy=noisy, t_index=t, cond=cond.image, change=change)
            )
            return float(np.linalg.norm(out.values - eps.tensor.values))

        t_lo, t_hi = 400, 900
        want = (schedule.alpha(t_lo) / schedule.sigma(t_lo)) / (
            schedule.alpha(t_hi) / schedule.sigma(t_hi)
        )
        assert residual_norm(t_lo) / residual_norm(t_hi) == pytest.approx(want, rel=1e-2)

    def test_shape_validation(self, perfect_backend, blob_object, schedule):
        cond = oracle_render(blob_object, Viewpoint(0.0, 30.0), 64)
        bad = TensorBuffer.from_array(np.zeros((32, 32, 3), dtype=np.float32))
        with pytest.raises(ShapeMismatch):
            perfect_backend.denoise(
                DenoiseRequest(noisy=bad, t_index=400, cond=cond.image,
                               change=ViewChange(0.0, 0.0, 0.0))
            )
        ok = TensorBuffer.from_array(np.zeros((64, 64, 3), dtype=np.float32))
        with pytest.raises(ShapeMismatch):
            perfect_backend.denoise(
                DenoiseRequest(noisy=ok, t_index=schedule.t_total, cond=cond.image,
                               change=ViewChange(0.0, 0.0, 0.0))
            )


class TestResolution:
    def test_descriptor(self, perfect_backend, schedule):
        d = perfect_backend.descriptor()
        assert d.working_shape == (64, 64, 3)
        assert d.schedule is schedule
        assert f"{5:016x}" in d.name

    def test_registered_views_resolve_exactly(self, perfect_backend, blob_object, catalog):
        for v in catalog[:5]:
            img = oracle_render(blob_object, v, 64).image
            got = perfect_backend.resolve(img)
            assert got.azimuth_deg == pytest.approx(v.azimuth_deg)
            assert got.elevation_deg == pytest.approx(v.elevation_deg)

    def test_wrong_size_rejected(self, perfect_backend, blob_object):
        img = oracle_render(blob_object, Viewpoint(0.0, 30.0), 48).image
        with pytest.raises(InvalidConditioning):
            perfect_backend.resolve(img)

    def test_fallback_search_recovers_viewpoint(self, perfect_backend, blob_object):
        # simulate a fresh process: render, then forget the digest registry
        v = Viewpoint(77.9, 41.3)
        img = oracle_render(blob_object, v, 64).image
        key = (blob_object.seed, 64)
        with backend_mod._MEMO_LOCK:
            saved = dict(backend_mod._RESOLVE_MEMO.get(key, {}))
            backend_mod._RESOLVE_MEMO[key] = {}
        try:
            got = perfect_backend.resolve(img)
        finally:
            with backend_mod._MEMO_LOCK:
                backend_mod._RESOLVE_MEMO[key] = saved
        assert great_circle_deg(got, v) < 0.2

    def test_no_fallback_raises(self, blob_object, schedule):
        be = make_oracle_backend(blob_object, DegradationModel(), schedule, 64)
        v = Viewpoint(12.3, 45.6)
        img = oracle_render(blob_object, v, 64).image
        be_strict = backend_mod.OracleBackend(
            blob_object, DegradationModel(), schedule, 64, fallback_resolve=False
        )
        key = (blob_object.seed, 64)
        with backend_mod._MEMO_LOCK:
            saved = dict(backend_mod._RESOLVE_MEMO.get(key, {}))
            backend_mod._RESOLVE_MEMO[key] = {}
        try:
            with pytest.raises(InvalidConditioning):
                be_strict.resolve(img)
        finally:
            with backend_mod._MEMO_LOCK:
                backend_mod._RESOLVE_MEMO[key] = saved
        del be


class TestConcurrency:
    def test_parallel_calls_match_serial(self, perfect_backend, blob_object, schedule):
        src = Viewpoint(30.0, 30.0)
        cond = oracle_render(blob_object, src, 64)
        changes = [ViewChange(5.0 * k, 20.0 * k, 0.0) for k in range(8)]
        serial = [
            perfect_backend.generate(GenerationRequest(cond=cond.image, change=c)).encoding.values
            for c in changes
        ]
        with concurrent.futures.ThreadPoolExecutor(max_workers=8) as ex:
            parallel = list(
                ex.map(
                    lambda c: perfect_backend.generate(
                        GenerationRequest(cond=cond.image, change=c)
                    ).encoding.values,
                    changes,
                )
            )
        for a, b in zip(serial, parallel):
            np.testing.assert_array_equal(a, b)


def test_default_size_constant():
    assert DEFAULT_IMAGE_SIZE == 64
