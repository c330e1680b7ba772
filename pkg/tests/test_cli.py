import json
import re
import signal
import socket
import subprocess
import sys
import time
from types import SimpleNamespace

import pytest
from click.testing import CliRunner
from PIL import Image

from posesearch.backend import OracleObject, oracle_render
from posesearch.cli import main
from posesearch.geometry import fibonacci_hemisphere, wrap_delta

OBJ = 3  # demo object seed, distinct from the shared conftest object

runner = CliRunner()


def _invoke(args):
    return runner.invoke(main, args, catch_exceptions=False)


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-demo")
    catalog = fibonacci_hemisphere(21)
    obj = OracleObject.from_seed(OBJ)
    ref_vp, query_vp = catalog[4], catalog[13]
    for name, vp in (("ref", ref_vp), ("query", query_vp)):
        img = oracle_render(obj, vp, 64).image
        Image.fromarray(img.to_uint8()).save(root / f"{name}.png")
    return SimpleNamespace(
        root=root,
        ref=str(root / "ref.png"),
        query=str(root / "query.png"),
        ref_vp=ref_vp,
        query_vp=query_vp,
    )


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-data") / "d"
    res = _invoke(
        ["gen-dataset", "--objects", "2", "--views", "6", "--queries", "3",
         "--img-size", "64", "--seed", "11", "--out", str(out)]
    )
    assert res.exit_code == 0, res.output
    return out


def _estimate_args(demo, extra=()):
    pose = f"{demo.ref_vp.azimuth_deg},{demo.ref_vp.elevation_deg}"
    return [
        "estimate", "--ref", demo.ref, "--ref-pose", pose, "--query", demo.query,
        "--object-seed", str(OBJ), "--n", "8", "--m", "1", "--iterations", "1",
        "--seed", "7", *extra,
    ]


class TestEstimate:
    def test_recovers_demo_pose(self, demo):
        res = _invoke(_estimate_args(demo))
        assert res.exit_code == 0, res.output
        m = re.search(r"estimated azimuth ([-\d.]+) deg, elevation ([-\d.]+) deg", res.output)
        assert m, res.output
        az, el = float(m.group(1)), float(m.group(2))
        assert abs(wrap_delta(az - demo.query_vp.azimuth_deg)) < 5.0
        assert abs(el - demo.query_vp.elevation_deg) < 5.0
        assert "evaluations" in res.output

    def test_dump_intermediates_count(self, demo, tmp_path):
        dump = tmp_path / "dump"
        res = _invoke(_estimate_args(demo, ["--n", "6", "--dump-intermediates", str(dump)]))
        assert res.exit_code == 0, res.output
        files = sorted(p.name for p in dump.iterdir())
        assert len(files) == 12
        assert "ref_to_000.png" in files and "query_to_005.png" in files

    def test_bad_pose_string_is_usage_error(self, demo):
        res = _invoke(
            ["estimate", "--ref", demo.ref, "--ref-pose", "abc", "--query", demo.query]
        )
        assert res.exit_code == 2

    def test_unreadable_image_exits_4(self, demo, tmp_path):
        bogus = tmp_path / "not-an-image.png"
        bogus.write_text("plain text, not a PNG")
        args = _estimate_args(demo)
        args[args.index(demo.ref)] = str(bogus)
        res = _invoke(args)
        assert res.exit_code == 4

    def test_unreachable_remote_exits_3(self, demo):
        res = _invoke(_estimate_args(demo, ["--backend", "remote:http://127.0.0.1:1"]))
        assert res.exit_code == 3


class TestGenDataset:
    def test_rerun_byte_identical(self, tmp_path):
        outs = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            res = _invoke(
                ["gen-dataset", "--objects", "1", "--views", "5", "--queries", "2",
                 "--img-size", "32", "--seed", "4", "--out", str(out)]
            )
            assert res.exit_code == 0, res.output
            outs.append(out)
        a, b = outs
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
        pngs_a = sorted(a.rglob("*.png"))
        pngs_b = sorted(b.rglob("*.png"))
        assert len(pngs_a) == 5
        for pa, pb in zip(pngs_a, pngs_b):
            assert pa.read_bytes() == pb.read_bytes()

    def test_missing_out_is_usage_error(self):
        res = runner.invoke(main, ["gen-dataset", "--objects", "1"])
        assert res.exit_code == 2

    def test_config_precedence(self, tmp_path):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text("views: 6\nqueries: 2\nimg-size: 32\n")
        out = tmp_path / "d"
        res = _invoke(
            ["gen-dataset", "--objects", "1", "--config", str(cfg),
             "--views", "7", "--out", str(out)]
        )
        assert res.exit_code == 0, res.output
        spec = json.loads((out / "manifest.json").read_text())["spec"]
        assert spec["views_per_object"] == 7  # explicit flag beats config file
        assert spec["queries_per_reference"] == 2  # config beats built-in default
        assert spec["image_size"] == 32  # dash key normalized


class TestBench:
    def test_smoke_and_scheme_metadata(self, tiny_dataset, tmp_path):
        outs = {}
        for scheme in ("two-side", "naive"):
            out = tmp_path / scheme
            res = _invoke(
                ["bench", "--data", str(tiny_dataset), "--out", str(out),
                 "--scheme", scheme, "--n", "4", "--m", "1", "--iterations", "0",
                 "--elev-noise-std", "0", "--seed", "5"]
            )
            assert res.exit_code == 0, res.output
            assert "Racc" in res.output
            outs[scheme] = json.loads((out / "summary.json").read_text())
        for scheme, summary in outs.items():
            assert summary["config"]["scheme"] == scheme
            assert summary["config"]["cli"]["scheme"] == scheme
            assert summary["n_pairs"] == 6
        assert outs["two-side"] != outs["naive"]

    def test_missing_out_is_usage_error(self, tiny_dataset):
        res = runner.invoke(main, ["bench", "--data", str(tiny_dataset)])
        assert res.exit_code == 2

    def test_ablate_smoke(self, tiny_dataset, tmp_path):
        out = tmp_path / "abl"
        res = _invoke(
            ["ablate", "--data", str(tiny_dataset), "--out", str(out),
             "--sweep", "n_intermediate=4,8", "--m", "1", "--iterations", "0",
             "--elev-noise-std", "0", "--seed", "5"]
        )
        assert res.exit_code == 0, res.output
        assert (out / "ablation.csv").exists()
        assert res.output.count("n_intermediate=") >= 2


class TestServeOracle:
    def test_serve_health_and_clean_shutdown(self):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port = s.getsockname()[1]
        proc = subprocess.Popen(
            [sys.executable, "-m", "posesearch.cli", "serve-oracle",
             "--port", str(port), "--object-seed", "1", "--views", "5"],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True,
        )
        try:
            import requests

            deadline = time.monotonic() + 30.0
            ok = False
            while time.monotonic() < deadline:
                try:
                    ok = requests.get(f"http://127.0.0.1:{port}/v1/health", timeout=1).json()["ok"]
                    break
                except (requests.ConnectionError, requests.Timeout):
                    time.sleep(0.1)
            assert ok
            proc.send_signal(signal.SIGTERM)
            out, _ = proc.communicate(timeout=15)
        finally:
            if proc.poll() is None:
                proc.kill()
                proc.communicate()
        assert proc.returncode == 0
        assert "serving oracle (object seed 1)" in out
        assert "server stopped" in out
