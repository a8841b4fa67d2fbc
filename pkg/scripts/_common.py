import argparse
import json
import logging
from pathlib import Path


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--out", default=None, help="directory for checkpoints and summary.json")
    p.add_argument("--steps", type=int, default=None, help="override the training steps")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def overrides(args) -> dict:
    return {k: v for k, v in (("steps", args.steps), ("seed", args.seed)) if v is not None}


def setup(args):
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")


def finish(args, summary: dict, name: str):
    clean = {k: v for k, v in summary.items() if k != "head" and not k.endswith("_head")}
    text = json.dumps(clean, indent=2, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o))
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.json").write_text(text + "\n")
