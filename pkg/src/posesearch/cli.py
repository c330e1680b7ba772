"""Command-line entry point.

Configuration precedence is flags > config file > built-in defaults; the
config file is a flat YAML mapping whose keys mirror flag names with
underscores. Exit codes: 0 success, 2 usage, 3 backend/transport, 4 I/O.
"""

from __future__ import annotations

import functools
import logging
import signal
import sys
from pathlib import Path

import click
import yaml
from click.core import ParameterSource

from . import bench as bench_mod
from .backend import (
    DEFAULT_IMAGE_SIZE,
    DegradationModel,
    GenerationRequest,
    OracleObject,
    make_oracle_backend,
)
from .errors import (
    BackendUnavailable,
    IoFailure,
    PoseSearchError,
    ProtocolMismatch,
    ServerError,
    Unreachable,
)
from .geometry import Viewpoint, fibonacci_hemisphere, relative_change
from .imaging import ImageBuffer, make_schedule
from .remote import RemoteBackend, RemoteConfig
from .scoring import DEFAULT_SEED, ScoreConfig
from .search import SCHEMES, RefineConfig, estimate_pose
from .server import make_server

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BACKEND = 3
EXIT_IO = 4

_TRANSPORT_ERRORS = (BackendUnavailable, Unreachable, ProtocolMismatch, ServerError)


def _merge_config(ctx: click.Context, config_path: str | None) -> dict:
    """Effective parameters after applying the config file under the flags."""
    params = dict(ctx.params)
    if not config_path:
        return params
    try:
        data = yaml.safe_load(Path(config_path).read_text()) or {}
    except OSError as exc:
        raise click.UsageError(f"cannot read config file: {exc}") from exc
    except yaml.YAMLError as exc:
        raise click.UsageError(f"config file is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise click.UsageError("config file must be a flat key: value mapping")
    by_name = {p.name: p for p in ctx.command.params}
    for key, value in data.items():
        name = str(key).replace("-", "_")
        if name not in by_name or name == "config":
            continue
        if ctx.get_parameter_source(name) == ParameterSource.DEFAULT:
            params[name] = by_name[name].type.convert(value, by_name[name], ctx)
    return params


def _exit_mapped(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _TRANSPORT_ERRORS as exc:
            click.echo(f"backend error: {exc}", err=True)
            sys.exit(EXIT_BACKEND)
        except (IoFailure, OSError) as exc:
            click.echo(f"i/o error: {exc}", err=True)
            sys.exit(EXIT_IO)
        except ValueError as exc:
            # parameter-combination problems surface as plain usage errors
            raise click.UsageError(str(exc)) from exc
        except PoseSearchError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


def _build_backend(backend_sel: str, object_seed: int, size: int, gain: float,
                   exponent: float, views: int):
    if backend_sel == "oracle":
        be = make_oracle_backend(
            OracleObject.from_seed(object_seed),
            DegradationModel(gain=gain, exponent=exponent),
            make_schedule(),
            size,
        )
        be.register_viewpoints(fibonacci_hemisphere(views))
        return be
    if backend_sel.startswith("remote:"):
        url = backend_sel[len("remote:"):]
        if not url:
            raise click.UsageError("remote backend needs a URL, e.g. remote:http://host:port")
        return RemoteBackend(RemoteConfig(base_url=url))
    raise click.UsageError(f"unknown backend {backend_sel!r}; use 'oracle' or 'remote:URL'")


def _load_image(path: str) -> ImageBuffer:
    import numpy as np
    from PIL import Image

    try:
        with Image.open(path) as im:
            return ImageBuffer.from_uint8(np.asarray(im.convert("RGB"), dtype=np.uint8))
    except OSError as exc:
        raise IoFailure(f"cannot read image {path}: {exc}") from exc


def _parse_pose(text: str) -> Viewpoint:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) not in (2, 3):
        raise click.UsageError(f"pose must be 'azimuth,elevation[,radius]', got {text!r}")
    try:
        az, el = float(parts[0]), float(parts[1])
        r = float(parts[2]) if len(parts) == 3 else 1.0
        return Viewpoint(az, el, r)
    except ValueError as exc:
        raise click.UsageError(f"bad pose {text!r}: {exc}") from exc


_common_backend_opts = [
    click.option("--backend", "backend_sel", default="oracle", show_default=True,
                 help="'oracle' or 'remote:URL'."),
    click.option("--object-seed", default=0, show_default=True, type=int,
                 help="Oracle blob-object seed."),
    click.option("--size", default=DEFAULT_IMAGE_SIZE, show_default=True, type=int,
                 help="Oracle image size in pixels."),
    click.option("--gain", default=0.0, show_default=True, type=float,
                 help="Generation-degradation gain (0 = perfect oracle)."),
    click.option("--exponent", default=1.0, show_default=True, type=float,
                 help="Generation-degradation exponent."),
    click.option("--views", default=21, show_default=True, type=int,
                 help="Catalog size registered for conditioning-image resolution."),
]


def _add_opts(opts):
    def deco(fn):
        for opt in reversed(opts):
            fn = opt(fn)
        return fn

    return deco


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Debug logging.")
def main(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


@main.command("gen-dataset")
@click.option("--objects", default=5, show_default=True, type=int)
@click.option("--views", default=21, show_default=True, type=int)
@click.option("--queries", default=bench_mod.DEFAULT_QUERIES_PER_REFERENCE,
              show_default=True, type=int)
@click.option("--img-size", default=DEFAULT_IMAGE_SIZE, show_default=True, type=int)
@click.option("--seed", default=DEFAULT_SEED, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path())
@click.option("--config", type=click.Path(exists=True), default=None,
              help="YAML file with flag-name keys.")
@click.pass_context
@_exit_mapped
def cmd_gen_dataset(ctx, **_kw):
    """Render a synthetic blob-object dataset with a viewpoint manifest."""
    p = _merge_config(ctx, ctx.params["config"])
    spec = bench_mod.DatasetSpec(
        n_objects=p["objects"],
        views_per_object=p["views"],
        queries_per_reference=p["queries"],
        image_size=p["img_size"],
        seed=p["seed"],
    )
    root = bench_mod.generate_dataset(spec, p["out"])
    click.echo(f"wrote {spec.n_objects * spec.views_per_object} images under {root}")
    click.echo(str(root / bench_mod.MANIFEST_NAME))


@main.command("estimate")
@click.option("--ref", "ref_path", required=True, type=click.Path(exists=True))
@click.option("--ref-pose", required=True, help="Reference pose 'azimuth,elevation[,radius]'.")
@click.option("--query", "query_path", required=True, type=click.Path(exists=True))
@click.option("--elev-init", type=float, default=None,
              help="Elevation initializer in degrees [default: reference elevation].")
@click.option("--n", "n_intermediate", default=64, show_default=True, type=int)
@click.option("--m", "m_samples", default=4, show_default=True, type=int)
@click.option("--t", "t_fraction", default=0.4, show_default=True, type=float)
@click.option("--iterations", default=3, show_default=True, type=int)
@click.option("--scheme", default="two-side", show_default=True,
              type=click.Choice(SCHEMES))
@click.option("--seed", default=DEFAULT_SEED, show_default=True, type=int)
@click.option("--dump-intermediates", "dump_dir", type=click.Path(), default=None,
              help="Write both sides' generations at the intermediate viewpoints.")
@click.option("--config", type=click.Path(exists=True), default=None)
@_add_opts(_common_backend_opts)
@click.pass_context
@_exit_mapped
def cmd_estimate(ctx, **_kw):
    """Estimate the query image's viewpoint relative to a posed reference."""
    p = _merge_config(ctx, ctx.params["config"])
    backend = _build_backend(p["backend_sel"], p["object_seed"], p["size"],
                             p["gain"], p["exponent"], p["views"])
    ref_vp = _parse_pose(p["ref_pose"])
    ref_img = _load_image(p["ref_path"])
    query_img = _load_image(p["query_path"])
    elev_init = p["elev_init"] if p["elev_init"] is not None else ref_vp.elevation_deg
    cfg = ScoreConfig(
        n_intermediate=p["n_intermediate"],
        m_samples=p["m_samples"],
        t_fraction=p["t_fraction"],
        seed=p["seed"],
    )
    rcfg = RefineConfig(iterations=p["iterations"])
    est = estimate_pose(
        ref_img, ref_vp, query_img, elev_init, cfg, backend,
        refine_cfg=rcfg, scheme=p["scheme"],
    )
    click.echo(
        f"estimated azimuth {est.viewpoint.azimuth_deg:.2f} deg, "
        f"elevation {est.viewpoint.elevation_deg:.2f} deg "
        f"(score {est.score:.6g}, {len(est.trace)} evaluations)"
    )
    if p["dump_dir"]:
        n_png = _dump_intermediates(
            backend, ref_img, ref_vp, query_img, est.viewpoint, cfg, Path(p["dump_dir"])
        )
        click.echo(f"wrote {n_png} intermediate-view generations to {p['dump_dir']}")


def _dump_intermediates(backend, ref_img, ref_vp, query_img, est_vp, cfg, out_dir: Path) -> int:
    """Both sides' generations at the intermediate viewpoints (2N images)."""
    from PIL import Image

    from . import rng

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        count = 0
        for i, inter in enumerate(fibonacci_hemisphere(cfg.n_intermediate)):
            for side, (img, vp) in (
                ("ref", (ref_img, ref_vp)),
                ("query", (query_img, est_vp)),
            ):
                gen = backend.generate(
                    GenerationRequest(
                        cond=img,
                        change=relative_change(vp, inter),
                        seed=rng.derive_seed("gen-dump", cfg.seed, side, i),
                    )
                )
                Image.fromarray(gen.image.to_uint8(), mode="RGB").save(
                    out_dir / f"{side}_to_{i:03d}.png"
                )
                count += 1
        return count
    except OSError as exc:
        raise IoFailure(f"cannot write intermediates to {out_dir}: {exc}") from exc


_bench_shared_opts = [
    click.option("--data", required=True, type=click.Path(exists=True),
                 help="Dataset directory from gen-dataset."),
    click.option("--out", required=True, type=click.Path()),
    click.option("--n", "n_intermediate", default=64, show_default=True, type=int),
    click.option("--m", "m_samples", default=4, show_default=True, type=int),
    click.option("--t", "t_fraction", default=0.4, show_default=True, type=float),
    click.option("--iterations", default=3, show_default=True, type=int),
    click.option("--gain", default=0.0, show_default=True, type=float),
    click.option("--exponent", default=1.0, show_default=True, type=float),
    click.option("--elev-noise-std", default=bench_mod.DEFAULT_ELEV_NOISE_STD,
                 show_default=True, type=float),
    click.option("--seed", default=DEFAULT_SEED, show_default=True, type=int),
    click.option("--jobs", default=1, show_default=True, type=int),
    click.option("--config", type=click.Path(exists=True), default=None),
]


def _cli_echo_config(report: bench_mod.EvalReport, p: dict) -> None:
    # provenance echo; 'out' and 'jobs' are execution details omitted so that
    # identical evaluations emit byte-identical reports
    skip = ("out", "config", "jobs")
    report.config["cli"] = {
        k: v for k, v in sorted(p.items()) if k not in skip and v is not None
    }


@main.command("bench")
@click.option("--scheme", default="two-side", show_default=True, type=click.Choice(SCHEMES))
@_add_opts(_bench_shared_opts)
@click.pass_context
@_exit_mapped
def cmd_bench(ctx, **_kw):
    """Evaluate pose estimation over a dataset and write report.csv/summary.json."""
    p = _merge_config(ctx, ctx.params["config"])
    report = bench_mod.evaluate(
        p["data"],
        score_cfg=ScoreConfig(n_intermediate=p["n_intermediate"], m_samples=p["m_samples"],
                              t_fraction=p["t_fraction"], seed=p["seed"]),
        refine_cfg=RefineConfig(iterations=p["iterations"]),
        degradation=DegradationModel(gain=p["gain"], exponent=p["exponent"]),
        scheme=p["scheme"],
        elev_noise_std=p["elev_noise_std"],
        seed=p["seed"],
        jobs=p["jobs"],
    )
    _cli_echo_config(report, p)
    paths = bench_mod.write_report(report, p["out"])
    click.echo(bench_mod.format_summary_table(report), nl=False)
    click.echo(f"report: {paths['csv']}")


@main.command("ablate")
@click.option("--sweep", "sweeps", multiple=True, required=True,
              help="Axis sweep like 'n_intermediate=16,64' (repeatable).")
@_add_opts(_bench_shared_opts)
@click.pass_context
@_exit_mapped
def cmd_ablate(ctx, **_kw):
    """Sweep score/search parameters; one evaluation per grid point."""
    p = _merge_config(ctx, ctx.params["config"])
    sweep = {}
    casts = {"scheme": str, "n_intermediate": int, "m_samples": int,
             "t_fraction": float, "iterations": int}
    for item in p["sweeps"]:
        if "=" not in item:
            raise click.UsageError(f"sweep must look like axis=v1,v2 — got {item!r}")
        axis, _, values = item.partition("=")
        axis = axis.strip()
        if axis not in casts:
            raise click.UsageError(f"unknown sweep axis {axis!r}")
        try:
            sweep[axis] = [casts[axis](v.strip()) for v in values.split(",") if v.strip()]
        except ValueError as exc:
            raise click.UsageError(f"bad sweep values in {item!r}: {exc}") from exc
        if not sweep[axis]:
            raise click.UsageError(f"sweep axis {axis!r} has no values")
    results = bench_mod.ablate(
        p["data"],
        sweep,
        score_cfg=ScoreConfig(n_intermediate=p["n_intermediate"], m_samples=p["m_samples"],
                              t_fraction=p["t_fraction"], seed=p["seed"]),
        refine_cfg=RefineConfig(iterations=p["iterations"]),
        degradation=DegradationModel(gain=p["gain"], exponent=p["exponent"]),
        elev_noise_std=p["elev_noise_std"],
        seed=p["seed"],
        jobs=p["jobs"],
    )
    out_dir = Path(p["out"])
    path = bench_mod.write_ablation_csv(results, out_dir / "ablation.csv")
    for point, report in results:
        s = report.summary()
        label = ", ".join(f"{k}={v}" for k, v in sorted(point.items())) or "defaults"
        click.echo(f"{label:<50} Racc@15 {s['racc15']:6.2f}  Racc@30 {s['racc30']:6.2f}")
    click.echo(f"table: {path}")


@main.command("serve-oracle")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8008, show_default=True, type=int)
@click.option("--config", type=click.Path(exists=True), default=None)
@_add_opts(_common_backend_opts[1:])  # oracle-only: no --backend selector
@click.pass_context
@_exit_mapped
def cmd_serve_oracle(ctx, **_kw):
    """Serve the in-process oracle over the wire protocol until SIGTERM."""
    p = _merge_config(ctx, ctx.params["config"])
    backend = _build_backend("oracle", p["object_seed"], p["size"],
                             p["gain"], p["exponent"], p["views"])
    try:
        server = make_server(backend, p["host"], p["port"])
    except OSError as exc:
        click.echo(f"cannot bind {p['host']}:{p['port']}: {exc}", err=True)
        sys.exit(EXIT_BACKEND)

    def _stop(_signum, _frame):
        # shutdown() must run off the serve_forever thread
        import threading

        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, _stop)
    signal.signal(signal.SIGINT, _stop)
    click.echo(f"serving oracle (object seed {p['object_seed']}) on "
               f"http://{p['host']}:{p['port']}", err=False)
    sys.stdout.flush()
    server.serve_forever()
    server.server_close()
    click.echo("server stopped")


if __name__ == "__main__":
    main()
