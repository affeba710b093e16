"""The command-line pipeline end to end in a scratch directory.

Equivalent shell session::

    sslab simulate --config cfg.json
    sslab oracle-verify --config cfg.json
    sslab symmetry-check --config cfg.json --set channel=Frozen
    sslab test --config cfg.json --data out/dataset.csv
    sslab report --report out/report.json
"""

from __future__ import annotations

import json
import sys
import tempfile
from pathlib import Path

from sslab.cli import run


def main() -> int:
    work = Path(tempfile.mkdtemp(prefix="sslab-demo-"))
    cfg = work / "cfg.json"
    cfg.write_text(json.dumps({"seed": 7, "n": 100_000, "B": 49,
                               "output_dir": str(work / "out")}, indent=1))
    steps = [
        ["simulate", "--config", str(cfg)],
        ["oracle-verify", "--config", str(cfg)],
        ["symmetry-check", "--config", str(cfg), "--set", "channel=Frozen"],
        ["test", "--config", str(cfg), "--data", str(work / "out" / "dataset.csv")],
        ["report", "--report", str(work / "out" / "report.json")],
    ]
    for argv in steps:
        code = run(argv)
        if code != 0:
            print(f"step {argv[0]} exited with {code}", file=sys.stderr)
            return code
    print(f"artifacts in {work / 'out'}: {sorted(p.name for p in (work / 'out').iterdir())}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
