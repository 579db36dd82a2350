"""saltplot command line: render one figure kind from a run directory."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .figures import FIGURE_KINDS, FigureSpec, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saltplot", description="Render figures from assimilation CSV outputs"
    )
    parser.add_argument("kind", choices=FIGURE_KINDS)
    parser.add_argument("--in", dest="input_dir", required=True,
                        help="directory holding the diagnostics CSVs")
    parser.add_argument("--out", dest="output_dir", required=True,
                        help="directory for the image and its sidecar CSV")
    parser.add_argument("--members", type=int, default=None,
                        help="ensemble size (fixes the rank-histogram bin count)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    options = {}
    if args.members is not None:
        options["n_members"] = args.members
    out_dir = Path(args.output_dir)
    spec = FigureSpec(
        kind=args.kind,
        input_dir=Path(args.input_dir),
        output_path=out_dir / f"{args.kind}.png",
        options=options,
    )
    path = render(spec)
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
