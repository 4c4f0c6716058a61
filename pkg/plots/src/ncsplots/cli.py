"""Standalone entry point: ncs-plots --spec FIGURE.json [--spec ...]"""

from __future__ import annotations

import argparse
import sys

from .render import RenderError, render_spec_file


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ncs-plots",
        description="Render ncsim figure specs (CSV tables in, images out)")
    parser.add_argument("--spec", action="append", required=True,
                        help="FigureSpec JSON path (repeatable)")
    args = parser.parse_args(argv)
    for spec in args.spec:
        try:
            out = render_spec_file(spec)
        except RenderError as exc:
            print(f"render error: {exc}", file=sys.stderr)
            return 1
        print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
