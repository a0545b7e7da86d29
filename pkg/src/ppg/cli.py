"""Command-line entry point: ``ppg synth|train|plan|compose|eval|all``.

Exit codes: 0 success, 2 bad input, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .pipeline import STAGES, BadInput, load_config, run_end_to_end

EXIT_OK, EXIT_BAD_INPUT, EXIT_RUNTIME = 0, 2, 3


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppg", description="Plan-and-render product poster pipeline")
    p.add_argument("command", choices=sorted(STAGES) + ["all"])
    p.add_argument("--config", help="JSON run config (a previous manifest.json also works)")
    p.add_argument("--seed", type=_u64)
    p.add_argument("--profile", choices=["desk", "paper"])
    p.add_argument("--constraints", help="constraints JSON for plan")
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, help="worker processes (default: core count)")
    p.add_argument("--dataset", help="dataset directory (default: <out>/corpus)")
    p.add_argument("--records", type=int, dest="synth_records", help="records to synthesize")
    p.add_argument("--steps", type=int, dest="train_steps", help="training steps")
    p.add_argument("--temperature", type=float, help="sampling temperature for plan")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_BAD_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: getattr(args, k) for k in ("seed", "profile", "constraints", "out", "jobs", "dataset",
                                               "synth_records", "train_steps", "temperature")}
    try:
        config = load_config(args.config, **overrides)
        if args.command == "all":
            manifest = run_end_to_end(config)
        else:
            manifest = STAGES[args.command](config)
    except BadInput as exc:
        print(f"ppg: error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        logging.getLogger("ppg").debug("failure", exc_info=True)
        print(f"ppg: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    summary = {"command": args.command, "out": str(config.out_dir), "config_hash": manifest.get("config_hash")}
    if args.command in ("eval", "all") and "eval" in manifest.get("stages", {}):
        summary["eval"] = manifest["stages"]["eval"]
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
