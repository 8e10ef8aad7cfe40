"""Entry point for the cloud process: TCP fleet listener plus HTTP gateway."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import uvicorn

from ..config import load_config
from .gateway import build_app
from .node import CloudNode


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fleet-cloud", description=__doc__)
    parser.add_argument("--config", default=None, help="path to JSON config file")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--client-port", type=int, default=None)
    parser.add_argument("--gateway-port", type=int, default=None)
    parser.add_argument("--module-root", default=None)
    parser.add_argument("--fault-injection", action="store_true", default=None,
                        help="enable the test-only CODE_PUSH delay hook")
    parser.add_argument("--ui-root", default=None, help="directory with the dashboard build")
    parser.add_argument("--log-level", default=os.environ.get("FLEET_LOG", "info"))
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    config = load_config(args.config)
    if args.client_port is not None:
        config.client_port = args.client_port
    if args.gateway_port is not None:
        config.gateway_port = args.gateway_port
    if args.module_root is not None:
        config.module_root = args.module_root
    if args.fault_injection:
        config.fault_injection = True
    if args.ui_root is not None:
        config.ui_root = args.ui_root

    node = CloudNode(config, host=args.host)
    node.start()
    app = build_app(node, config)
    print(
        f"fleet-cloud ready: clients on {args.host}:{node.client_port}, "
        f"gateway on {args.host}:{config.gateway_port}",
        flush=True,
    )
    try:
        uvicorn.run(
            app,
            host=args.host,
            port=config.gateway_port,
            log_level="warning",
            ws="websockets",
        )
    finally:
        node.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
