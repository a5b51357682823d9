"""victim-bridge serve --model <adapter>:<spec> --port <p>"""

import argparse
import logging
import sys

from .adapters import available_adapters, make_adapter
from .server import serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="victim-bridge")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("serve", help="serve a victim as a hard-label oracle")
    p.add_argument("--model", required=True,
                   help="adapter spec, e.g. centroid:/path/to/dataset or constant:0")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        adapter = make_adapter(args.model)
    except KeyError as exc:
        print(exc.args[0], file=sys.stderr)
        print(f"known adapters: {sorted(available_adapters())}", file=sys.stderr)
        return 2
    serve(adapter, args.host, args.port)
    return 0


if __name__ == "__main__":
    sys.exit(main())
