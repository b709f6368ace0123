"""End-to-end demo over a synthetic dataset: decode, match, fuse, evaluate.

Runs the CLI commands in-process on the bundles written by
make_synthetic_bundles.py and prints the PQ table plus match statistics.
"""

import argparse
import json
import subprocess
import sys
from collections import Counter
from pathlib import Path

from panoptic_ocp import io
from panoptic_ocp.cli import main as cli


def run(*argv):
    code = cli([str(a) for a in argv])
    if code:
        sys.exit(f"command {argv[0]} failed with exit code {code}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("work", type=Path)
    ap.add_argument("--images", type=int, default=8)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    data = args.work / "data"
    if not data.exists():
        maker = Path(__file__).with_name("make_synthetic_bundles.py")
        subprocess.run([sys.executable, str(maker), str(data), "--images", str(args.images),
                        "--seed", str(args.seed)], check=True)

    out = args.work / "out"
    run("decode", data / "heads", "--jobs", args.jobs, "--output", out / "decode")
    run("match", "--pred", data / "pred", "--gt", data / "gt", "--jobs", args.jobs, "--output", out / "match")
    run("match", "--pred", data / "pred", "--gt", data / "gt", "--no-refine", "--jobs", args.jobs,
        "--output", out / "match_base")
    run("fuse", data / "pred", "--jobs", args.jobs, "--output", out / "fused")
    run("eval", "--pred", out / "fused", "--gt", data / "gt", "--jobs", args.jobs, "--output", out / "eval")
    run("detect-rate", "--pred", out / "fused", "--gt", data / "gt", "--output", out / "rate")

    n_props = [len(io.read_manifest(b)["proposals"]) for b in io.bundle_paths(out / "decode")]
    print(f"decode: {sum(n_props)} proposals over {len(n_props)} images")
    for name in ("match_base", "match"):
        stages = Counter()
        for b in io.bundle_paths(out / name):
            things = io.read_manifest(b)["things"]
            stages.update(m["stage"] for m in things["matches"] + things["removed"])
        print(f"{name}: {dict(sorted(stages.items()))}")
    print((out / "eval" / "report.txt").read_text(), end="")
    rate = json.loads((out / "rate" / "detection_rate.json").read_text())
    for b in rate["bins"]:
        hi = "inf" if b["hi"] is None else b["hi"]
        r = "-" if b["rate"] is None else f"{b['rate']:.2f}"
        print(f"  diag [{b['lo']}, {hi}): {b['detected']}/{b['total']} = {r}")


if __name__ == "__main__":
    main()
