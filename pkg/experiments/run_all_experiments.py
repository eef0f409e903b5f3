#!/usr/bin/env python3
"""
Run all studies sequentially on one generated dataset through the CLI.
"""

import os
import subprocess
import sys

ROOT = os.path.dirname(os.path.abspath(__file__))
MAIN = os.path.join(ROOT, "..", "main.py")


def run(cmd: list[str]) -> int:
    print(f"\n$ {' '.join(cmd)}")
    return subprocess.call(cmd)


def main():
    python = sys.executable
    config = sys.argv[1:] or []
    steps = [
        ("gen-data", ["--out", "data"]),
        ("ablate", ["--out", os.path.join(ROOT, "ablation", "results")]),
        ("sweep-data", ["--out", os.path.join(ROOT, "data_sweep", "results")]),
        ("corrupt-class", ["--variant", "with_class", "--out", os.path.join(ROOT, "class_corruption", "results")]),
    ]
    for command, args in steps:
        rc = run([python, MAIN, command, *config, *args])
        if rc != 0:
            print(f"[warn] {command} returned exit code {rc}")
            if command == "gen-data":
                return rc

    print("\n✅ All experiments attempted. Check experiments/*/results for outputs.")
    return 0


if __name__ == "__main__":
    sys.exit(main())
