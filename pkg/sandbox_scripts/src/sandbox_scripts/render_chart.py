"""Headless renderer for untrusted matplotlib code.

Forces the Agg backend before the user code runs, redirects every savefig
call to the contract output path (so exactly one raster lands in the
workdir), and saves the current figure itself only when the user code saved
nothing. Any exception becomes one JSON error object on stdout and exit 1;
the timeout is enforced by the parent, never here.
"""

import argparse
import json
import os
import sys
import traceback
from pathlib import Path


def _parse_args(argv):
    parser = argparse.ArgumentParser(description="render chart code to a raster")
    parser.add_argument("--code-file", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--trace-out", default=None, help="accepted for contract parity; unused")
    return parser.parse_args(argv)


def _emit_error(exc):
    print(json.dumps({
        "error_class": type(exc).__name__,
        "message": str(exc),
        "traceback": traceback.format_exc(),
    }))


def main(argv=None):
    args = _parse_args(argv)
    os.environ["MPLBACKEND"] = "Agg"
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt
    from matplotlib.figure import Figure

    out_path = os.path.abspath(args.out)
    try:
        code = Path(args.code_file).read_text(encoding="utf-8")
    except OSError as exc:
        _emit_error(exc)
        return 1

    save_count = 0
    original_savefig = Figure.savefig

    def savefig_to_out(self, fname=None, **kwargs):
        nonlocal save_count
        kwargs.pop("fname", None)
        save_count += 1
        return original_savefig(self, out_path, **kwargs)

    Figure.savefig = savefig_to_out
    try:
        exec(compile(code, "<chart-code>", "exec"), {"__name__": "__main__"})
    except BaseException as exc:  # report whatever the user code raised
        _emit_error(exc)
        return 1
    finally:
        Figure.savefig = original_savefig

    try:
        if save_count == 0:
            plt.gcf().savefig(out_path)
    except BaseException as exc:
        _emit_error(exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
