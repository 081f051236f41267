"""``istc`` command line.

Every setting of an experiment can come from a flat ``key = value`` file
(``--config``) or from a flag ``--key value`` (dashes and underscores are
interchangeable); flags win.
"""

import argparse
import sys

from . import __version__
from .errors import IstcError
from .harness import DEFAULTS, RUNNERS, load_config


def build_parser():
    parser = argparse.ArgumentParser(prog="istc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"istc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind, defaults in DEFAULTS.items():
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", metavar="PATH", help="key = value settings file")
        p.add_argument("--out", metavar="DIR", required=True, help="output directory")
        for key, value in defaults.items():
            flag = "--" + key.replace("_", "-")
            kw = {"dest": key, "default": None, "metavar": type(value).__name__.upper()}
            if key == "seed":
                kw["type"] = int
            p.add_argument(flag, **kw)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    kind = args.command
    overrides = {k: getattr(args, k) for k in DEFAULTS[kind] if getattr(args, k) is not None}
    try:
        cfg = load_config(kind, args.config, overrides)
        code, summary = RUNNERS[kind](cfg, args.out)
    except (IstcError, KeyError, ValueError, OSError) as e:
        print(f"istc {kind}: error: {e}", file=sys.stderr)
        return 64
    for k, v in summary.items():
        if k != "rows" and k != "stats":
            print(f"{k} = {v}")
    if "stats" in summary:
        for solver, st in summary["stats"].items():
            for k, v in st.items():
                print(f"{solver}.{k} = {v:.6g}")
    return code


if __name__ == "__main__":
    sys.exit(main())
