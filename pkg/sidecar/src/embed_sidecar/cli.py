"""embed-sidecar command line wrapper.

Exit codes mirror the pipeline convention: 0 success, 1 input problem
(including any skipped lines), 2 runtime failure such as a model that will
not load.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .encoder import DEFAULT_MODEL, ModelLoad, SidecarJob, run_job


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="embed-sidecar",
        description="Encode JSONL texts into an EMB1 vector file with a pretrained transformer.",
    )
    parser.add_argument("--in", dest="input_path", required=True, help="input JSONL ({id, text} per line)")
    parser.add_argument("--out", dest="output_path", required=True, help="output EMB1 file")
    parser.add_argument("--model", default=DEFAULT_MODEL, help=f"model id or local path (default {DEFAULT_MODEL})")
    parser.add_argument("--batch", type=int, default=32, help="inference batch size")
    parser.add_argument("--sep", default=None, help="separator joining title+abstract (default: the model's sep token)")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    input_path = Path(args.input_path)
    if not input_path.exists():
        print(f"input file {input_path} does not exist", file=sys.stderr)
        return 1
    if args.batch < 1:
        print("--batch must be >= 1", file=sys.stderr)
        return 1

    job = SidecarJob(
        input_path=input_path,
        output_path=Path(args.output_path),
        model_id=args.model,
        batch_size=args.batch,
        separator=args.sep,
    )
    try:
        stats = run_job(job)
    except ModelLoad as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2

    print(f"encoded {stats.encoded} texts (dim {stats.dim}) -> {job.output_path}")
    if stats.skipped:
        print(f"skipped {stats.skipped} malformed input lines", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
