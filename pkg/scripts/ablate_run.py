#!/usr/bin/env python3
"""Train and score both ablation grids on the desk-scale dataset.

Reuses (or creates) the desk dataset, then runs the encoder x decoder grid
and the strategy x decoder grid, printing both tables and writing
ablation.json under the output directory.

Usage: python3 scripts/ablate_run.py [ROOT_DIR]  (default: ./runs/ablate)
"""

import json
import sys
from pathlib import Path

from sedgen.cli import main
from sedgen.presets import desk_preset


def run(root: str) -> int:
    root_dir = Path(root)
    root_dir.mkdir(parents=True, exist_ok=True)
    cfg = desk_preset(root_dir)
    cfg_path = root_dir / "config.json"
    cfg_path.write_text(json.dumps(cfg, indent=2) + "\n")
    if not Path(cfg["data"]["manifest"]).exists():
        rc = main(["generate-data", "--config", str(cfg_path)])
        if rc != 0:
            return rc
    return main(["ablate", "--config", str(cfg_path)])


if __name__ == "__main__":
    sys.exit(run(sys.argv[1] if len(sys.argv) > 1 else "runs/ablate"))
