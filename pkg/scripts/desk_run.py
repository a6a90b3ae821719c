#!/usr/bin/env python3
"""Run the 256/64-clip generalization experiment end to end.

Generates the dataset, trains with shift augmentation and early stopping,
then decodes and scores the validation split with constrained greedy search.

Usage: python3 scripts/desk_run.py [ROOT_DIR]  (default: ./runs/desk)
"""

import json
import sys
from pathlib import Path

from sedgen.cli import main
from sedgen.presets import desk_preset


def run(root: str) -> int:
    root_dir = Path(root)
    root_dir.mkdir(parents=True, exist_ok=True)
    cfg_path = root_dir / "config.json"
    cfg_path.write_text(json.dumps(desk_preset(root_dir), indent=2) + "\n")
    for argv in (
        ["generate-data", "--config", str(cfg_path)],
        ["train", "--config", str(cfg_path)],
        ["infer", "--config", str(cfg_path), "--split", "val"],
        ["evaluate", "--config", str(cfg_path), "--split", "val"],
    ):
        rc = main(argv)
        if rc != 0:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(run(sys.argv[1] if len(sys.argv) > 1 else "runs/desk"))
