"""Command-line entry point: serve an adapter over the wire protocol.

Exit codes: 0 clean shutdown, 2 usage, 3 cannot bind the socket.
"""

from __future__ import annotations

import argparse
import signal
import sys
import threading

from .adapters import DiffusionAdapter, oracle_mirror_adapter
from .oracle import DEFAULT_IMAGE_SIZE
from .server import make_server


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pybackend")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="serve generate/denoise over HTTP until SIGTERM")
    serve.add_argument("--mode", choices=("mirror", "stub"), required=True,
                       help="mirror: deterministic oracle twin; stub: diffusion mounting point")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8009)
    serve.add_argument("--object-seed", type=int, default=0,
                       help="mirror mode: seed of the blob object to serve")
    serve.add_argument("--views", type=int, default=0,
                       help="mirror mode: pre-register this many catalog viewpoints")
    serve.add_argument("--size", type=int, default=DEFAULT_IMAGE_SIZE)
    serve.add_argument("--gain", type=float, default=0.0,
                       help="mirror mode: generation degradation gain")
    serve.add_argument("--exponent", type=float, default=1.0,
                       help="mirror mode: generation degradation exponent")
    serve.add_argument("--model-dir", default=None,
                       help="stub mode: where a mounted diffusion model would live")
    return parser


def _cmd_serve(args: argparse.Namespace) -> int:
    if args.mode == "mirror":
        adapter = oracle_mirror_adapter(
            args.object_seed,
            gain=args.gain,
            exponent=args.exponent,
            size=args.size,
            catalog_views=args.views,
        )
        what = f"oracle mirror (object seed {args.object_seed})"
    else:
        adapter = DiffusionAdapter(model_dir=args.model_dir)
        what = "diffusion stub (not ready: all calls answer 503)"

    try:
        server = make_server(adapter, args.host, args.port)
    except OSError as exc:
        print(f"cannot bind {args.host}:{args.port}: {exc}", file=sys.stderr)
        return 3

    def _stop(_signum, _frame):
        # shutdown() must run off the serve_forever thread
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, _stop)
    signal.signal(signal.SIGINT, _stop)
    print(f"serving {what} on http://{args.host}:{args.port}")
    sys.stdout.flush()
    server.serve_forever()
    server.server_close()
    print("server stopped")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "serve":
        return _cmd_serve(args)
    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
