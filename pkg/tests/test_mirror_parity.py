"""Cross-implementation checks against the standalone pybackend server.

The server process never imports this package; everything below goes through
the HTTP wire protocol, so agreement here means the two implementations of
the renderer, the degradation PRNG, and the schedule really are twins.
"""

import signal
import socket
import subprocess
import sys
import time

import numpy as np
import pytest

import posesearch.rng as our_rng
from posesearch.backend import (
    DegradationModel,
    DenoiseRequest,
    GenerationRequest,
    OracleObject,
    make_oracle_backend,
    oracle_render,
)
from posesearch.errors import BackendUnavailable
from posesearch.geometry import (
    ViewChange,
    Viewpoint,
    apply_change,
    fibonacci_hemisphere,
    great_circle_deg,
)
from posesearch.imaging import TensorBuffer, add_noise, sample_noise
from posesearch.remote import RemoteBackend, RemoteConfig
from posesearch.scoring import ScoreConfig, build_reference_context, two_side_score

OBJ = 6
SIZE = 64
VIEWS = 21


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _launch(*extra: str) -> tuple:
    port = _free_port()
    proc = subprocess.Popen(
        [sys.executable, "-m", "pybackend.cli", "serve", "--port", str(port), *extra],
        stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True,
    )
    remote = RemoteBackend(RemoteConfig(base_url=f"http://127.0.0.1:{port}"))
    deadline = time.monotonic() + 40.0
    while time.monotonic() < deadline:
        if proc.poll() is not None:
            pytest.fail(f"pybackend exited early: {proc.communicate()[0]}")
        try:
            if remote.health():
                break
        except Exception:
            time.sleep(0.1)
    else:
        proc.kill()
        pytest.fail("pybackend server did not come up")
    return proc, remote


def _stop(proc) -> None:
    proc.send_signal(signal.SIGTERM)
    try:
        proc.communicate(timeout=15)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.communicate()


@pytest.fixture(scope="module")
def obj():
    return OracleObject.from_seed(OBJ)


@pytest.fixture(scope="module")
def catalog():
    return fibonacci_hemisphere(VIEWS)


@pytest.fixture(scope="module")
def mirror():
    proc, remote = _launch(
        "--mode", "mirror", "--object-seed", str(OBJ),
        "--views", str(VIEWS), "--size", str(SIZE),
    )
    yield remote
    _stop(proc)


@pytest.fixture(scope="module")
def local(obj, catalog):
    backend = make_oracle_backend(obj, DegradationModel(), size=SIZE)
    backend.register_viewpoints(catalog)
    return backend


def _cond(obj, vp):
    # catalog render; both processes produce these exact bytes
    return oracle_render(obj, vp, SIZE).image


class TestPrngTwin:
    def test_derived_seeds_and_streams_match(self):
        # 10^4 draws per stream, byte-identical
        their_rng = pytest.importorskip("pybackend.rng")
        tags = [("blob", 3, 0), ("degrade", 9, 10, -20, 10, 0, 450, 0), ("eps", 1, 2, 3)]
        for tag in tags:
            assert our_rng.derive_seed(*tag) == their_rng.derive_seed(*tag)
        for seed in (0, 1, 2**63, 12345):
            a = our_rng.normal_array(seed, (100, 100))
            b = their_rng.normal_array(seed, (100, 100))
            assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_same_seed_gives_identical_blob_list(self, seed):
        their_oracle = pytest.importorskip("pybackend.oracle")
        ours = OracleObject.from_seed(seed)
        theirs = their_oracle.BlobObject.from_seed(seed)
        assert ours.centers.tobytes() == theirs.centers.tobytes()
        assert ours.radii.tobytes() == theirs.radii.tobytes()
        assert ours.colors.tobytes() == theirs.colors.tobytes()


class TestMirrorParity:
    def test_descriptor_matches(self, mirror, local):
        got, want = mirror.descriptor(), local.descriptor()
        assert got.name == want.name
        assert got.working_shape == want.working_shape
        assert got.schedule.t_total == want.schedule.t_total
        np.testing.assert_array_equal(
            np.asarray(got.schedule.alpha_bar), np.asarray(want.schedule.alpha_bar)
        )

    def test_generate_and_denoise_bit_exact(self, mirror, local, obj, catalog):
        # 100 generations + 50 denoisings; bit-exact, well inside the 1e-5 bar
        schedule = local.descriptor().schedule
        g = np.random.default_rng(3)
        for k in range(100):
            vp = catalog[int(g.integers(len(catalog)))]
            cond = _cond(obj, vp)
            change = ViewChange(float(g.uniform(-50, 50)), float(g.uniform(-170, 170)), 0.0)
            req = GenerationRequest(cond=cond, change=change, seed=k)
            assert (
                mirror.generate(req).encoding.values.tobytes()
                == local.generate(req).encoding.values.tobytes()
            )
            if k % 2 == 0:
                enc = local.generate(req).encoding
                eps = sample_noise(k, enc.shape)
                t = int(g.integers(1, schedule.t_total))
                dreq = DenoiseRequest(
                    noisy=add_noise(enc, schedule, t, eps), t_index=t,
                    cond=cond, change=change,
                )
                assert (
                    mirror.denoise(dreq).values.tobytes()
                    == local.denoise(dreq).values.tobytes()
                )

    def test_zero_change_returns_conditioning_render(self, mirror, obj, catalog):
        cond = _cond(obj, catalog[10])
        got = mirror.generate(
            GenerationRequest(cond=cond, change=ViewChange(0.0, 0.0, 0.0), seed=0)
        )
        assert got.encoding.values.tobytes() == cond.pixels.tobytes()

    def test_generation_is_deterministic(self, mirror, obj, catalog):
        req = GenerationRequest(
            cond=_cond(obj, catalog[7]), change=ViewChange(20.0, 135.0, 0.0), seed=1
        )
        a, b = mirror.generate(req), mirror.generate(req)
        assert a.encoding.values.tobytes() == b.encoding.values.tobytes()
        np.testing.assert_array_equal(a.image.pixels, b.image.pixels)

    def test_denoise_cancellation_identity(self, mirror, obj, catalog):
        # perfect mirror: denoising its own noised generation recovers eps
        schedule = mirror.descriptor().schedule
        cond = _cond(obj, catalog[3])
        change = ViewChange(-10.0, 60.0, 0.0)
        enc = mirror.generate(GenerationRequest(cond=cond, change=change, seed=0)).encoding
        eps = sample_noise(42, enc.shape)
        for t in (1, schedule.t_index_for(0.4), schedule.t_total - 1):
            out = mirror.denoise(
                DenoiseRequest(
                    noisy=add_noise(enc, schedule, t, eps), t_index=t,
                    cond=cond, change=change,
                )
            )
            assert float(np.max(np.abs(out.values - eps.tensor.values))) < 1e-5

    def test_denoise_is_affine_in_noisy_input(self, mirror, obj, catalog):
        # closed form implies eps_hat(x) - eps_hat(y) = (x - y) / sigma_t
        schedule = mirror.descriptor().schedule
        cond = _cond(obj, catalog[6])
        change = ViewChange(15.0, -80.0, 0.0)
        t = schedule.t_index_for(0.4)
        g = np.random.default_rng(11)
        x = TensorBuffer.from_array(g.standard_normal((SIZE, SIZE, 3)).astype(np.float32))
        y = TensorBuffer.from_array(g.standard_normal((SIZE, SIZE, 3)).astype(np.float32))
        dx = (
            mirror.denoise(DenoiseRequest(noisy=x, t_index=t, cond=cond, change=change)).values
            - mirror.denoise(DenoiseRequest(noisy=y, t_index=t, cond=cond, change=change)).values
        )
        want = (x.values - y.values) / np.float32(schedule.sigma(t))
        assert float(np.max(np.abs(dx - want))) < 1e-4

    def test_scoring_through_the_wire(self, mirror, obj, catalog):
        # full reference-side expansion + batched denoising served remotely:
        # the true pose must sit at an essentially zero minimum
        ref_vp, query_vp = catalog[4], catalog[9]
        cfg = ScoreConfig(n_intermediate=8, m_samples=1, t_fraction=0.4, seed=5)
        ctx = build_reference_context(_cond(obj, ref_vp), ref_vp, cfg, mirror)
        query = _cond(obj, query_vp)
        truth = two_side_score(ctx, query, query_vp, cfg, mirror).value
        off = two_side_score(
            ctx, query,
            Viewpoint(query_vp.azimuth_deg + 40.0, query_vp.elevation_deg), cfg, mirror,
        ).value
        assert truth < 1e-6
        assert off > truth


class TestDegradedMirror:
    def test_seeded_degradation_matches(self, obj, catalog):
        proc, remote = _launch(
            "--mode", "mirror", "--object-seed", str(OBJ), "--views", str(VIEWS),
            "--size", str(SIZE), "--gain", "0.75", "--exponent", "1.3",
        )
        try:
            backend = make_oracle_backend(
                obj, DegradationModel(gain=0.75, exponent=1.3), size=SIZE
            )
            backend.register_viewpoints(catalog)
            g = np.random.default_rng(4)
            for k in range(20):
                vp = catalog[int(g.integers(len(catalog)))]
                change = ViewChange(float(g.uniform(-40, 40)), float(g.uniform(-170, 170)), 0.0)
                req = GenerationRequest(cond=_cond(obj, vp), change=change, seed=k)
                assert (
                    remote.generate(req).encoding.values.tobytes()
                    == backend.generate(req).encoding.values.tobytes()
                )

            # measured injected-noise level over the wire follows the law
            vp = catalog[5]
            change = ViewChange(0.0, 150.0, 0.0)
            enc = remote.generate(
                GenerationRequest(cond=_cond(obj, vp), change=change, seed=0)
            ).encoding.values
            target = apply_change(vp, change)
            clean = oracle_render(obj, target, SIZE).encoding.values
            measured = float(np.std(enc.astype(np.float64) - clean))
            expect = 0.75 * (great_circle_deg(vp, target) / 180.0) ** 1.3
            assert measured == pytest.approx(expect, rel=0.05)
        finally:
            _stop(proc)


class TestStubMode:
    def test_stub_serves_503_until_model_mounted(self, obj, catalog):
        proc, remote = _launch("--mode", "stub")
        try:
            assert remote.health()
            with pytest.raises(BackendUnavailable):
                remote.descriptor()
            with pytest.raises(BackendUnavailable):
                remote.generate(
                    GenerationRequest(
                        cond=_cond(obj, catalog[0]), change=ViewChange(0.0, 5.0, 0.0), seed=0
                    )
                )
        finally:
            _stop(proc)
