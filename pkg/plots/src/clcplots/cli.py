"""CLI: clc-plot <kind> --in <csv> --out <img> [--title ...]

Exit codes: 0 success, 1 schema violation (message names the offending
column), 2 missing/unreadable input.
"""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, SchemaError, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="clc-plot", description="Render clcbench CSVs as figures")
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--in", dest="input", required=True, help="input CSV path")
    parser.add_argument("--out", dest="output", required=True, help="output image path")
    parser.add_argument("--title", default=None)
    args = parser.parse_args(argv)
    try:
        out = render(args.kind, args.input, args.output, title=args.title)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
