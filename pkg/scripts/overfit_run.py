#!/usr/bin/env python3
"""Run the 16-clip memorization experiment end to end.

Generates the dataset, trains under the 2000-step cap, then decodes and
scores the train split. Prints the final metrics table; exits nonzero if any
stage fails.

Usage: python3 scripts/overfit_run.py [ROOT_DIR]  (default: ./runs/overfit)
"""

import json
import sys
from pathlib import Path

from sedgen.cli import main
from sedgen.presets import overfit_preset


def run(root: str) -> int:
    root_dir = Path(root)
    root_dir.mkdir(parents=True, exist_ok=True)
    cfg_path = root_dir / "config.json"
    cfg_path.write_text(json.dumps(overfit_preset(root_dir), indent=2) + "\n")
    for argv in (
        ["generate-data", "--config", str(cfg_path)],
        ["train", "--config", str(cfg_path)],
        ["infer", "--config", str(cfg_path), "--split", "train"],
        ["evaluate", "--config", str(cfg_path), "--split", "train"],
    ):
        rc = main(argv)
        if rc != 0:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(run(sys.argv[1] if len(sys.argv) > 1 else "runs/overfit"))
