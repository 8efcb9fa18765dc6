"""Print the headline numbers from a directory written by run_experiments.sh."""

import argparse
import csv
import json
from collections import defaultdict
from pathlib import Path


def sweep_table(path: Path):
    errors = defaultdict(list)
    with open(path / "sweep.csv", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["test_error"]:
                errors[int(row["hidden_units"])].append(float(row["test_error"]))
    print("hidden units  mean test error  runs")
    for H in sorted(errors):
        e = errors[H]
        print(f"{H:12d}  {sum(e) / len(e):15.4f}  {len(e):4d}")


def frontier_table(path: Path):
    for name in ("distance", "embedded_depth"):
        f = path / f"frontier_{name}.csv"
        if f.exists():
            with open(f, encoding="utf-8") as fh:
                row = {int(r["hidden_units"]): r["max_metric"] for r in csv.DictReader(fh)}
            print(f"frontier ({name}): {row}")
    fit = json.loads((path / "frontier_fit.json").read_text())
    for axis, v in fit.items():
        if v:
            print(f"  {axis}: max_metric = {v['slope']:.2f} log(H) + {v['intercept']:.2f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("root", type=Path)
    root = ap.parse_args().root
    if (root / "sweep").exists():
        sweep_table(root / "sweep")
    if (root / "frontier").exists():
        frontier_table(root / "frontier")
    for d in sorted(root.glob("generalize-*")):
        s = json.loads((d / "generalization_summary.json").read_text())
        print(f"{d.name}: in {s['in_error_weighted']:.4f} out {s['out_error_weighted']:.4f} "
              f"ratio {s['out_in_ratio']:.2f}")
    probe = root / "probe" / "probe_summary.json"
    if probe.exists():
        for H, v in json.loads(probe.read_text()).get("scalar", {}).items():
            print(f"depth probe H={H}: MAE {v['mae']:.3f} (baseline {v['baseline_mae']:.3f})")
        with open(root / "probe" / "probe_previous.csv", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                if r["k"] in ("1", "4", "10", "16"):
                    print(f"sequence probe H={r['hidden_units']} k={r['k']} {r['relevance']}: {float(r['error_rate']):.3f}")


if __name__ == "__main__":
    main()
