"""Command line: ringpaxos-plot --kind <kind> --in a.csv [--in b.csv] --out x.png"""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, PlotSpec, SchemaError, render


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ringpaxos-plot")
    ap.add_argument("--kind", required=True, choices=KINDS)
    ap.add_argument("--in", dest="inputs", action="append", required=True,
                    metavar="CSV", help="benchmark CSV (repeatable)")
    ap.add_argument("--out", required=True, help="output image (.png or .svg)")
    ap.add_argument("--log-y", action="store_true",
                    help="log-scale the y axis")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = PlotSpec(args.kind, tuple(args.inputs), args.out, args.log_y)
    try:
        render(spec)
    except (SchemaError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
