"""Command-line entry point: parse flags, build the app, run uvicorn."""

from __future__ import annotations

import argparse
import os
import sys

import uvicorn

from .config import AdapterConfig, AdapterConfigError, Mode, parse_listen
from .service import create_app

LISTEN_ENV = "GENADAPTER_LISTEN"


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(
        prog="genadapter",
        description="Generation-backend service (wire protocol v1).",
    )
    parser.add_argument(
        "--mode", choices=[m.value for m in Mode], default=Mode.STUB.value
    )
    parser.add_argument(
        "--listen",
        default=os.environ.get(LISTEN_ENV, "127.0.0.1:8080"),
        help=f"host:port to bind; defaults to ${LISTEN_ENV} if set",
    )
    parser.add_argument("--max-concurrent", type=int, default=2)
    parser.add_argument("--generator-model", help="model id (model mode)")
    parser.add_argument("--captioner-model", help="model id (model mode)")
    args = parser.parse_args(argv)

    try:
        host, port = parse_listen(args.listen)
        config = AdapterConfig(
            mode=Mode(args.mode),
            generator_model=args.generator_model,
            captioner_model=args.captioner_model,
            host=host,
            port=port,
            max_concurrent=args.max_concurrent,
        )
        app = create_app(config)
    except AdapterConfigError as e:
        parser.exit(2, f"genadapter: {e}\n")
        return

    uvicorn.run(app, host=config.host, port=config.port)


if __name__ == "__main__":
    main(sys.argv[1:])
