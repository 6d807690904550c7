"""Reduce each shipped run's loss.csv to 1000-step window means.

Usage: python3 scripts/summarize_losses.py RUNS_DIR
Writes src/feedbackcode/data/losses/<name>.csv with columns
window, first_step, last_step, mean_loss.
"""

import csv
import sys
from pathlib import Path

import numpy as np

WINDOW = 1000
DATA = Path(__file__).resolve().parent.parent / "src" / "feedbackcode" / "data" / "losses"


def summarize(loss_csv: Path, out: Path) -> None:
    with open(loss_csv, newline="") as fh:
        loss = np.array([float(r["loss"]) for r in csv.DictReader(fh)])
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("window", "first_step", "last_step", "mean_loss"))
        for k, start in enumerate(range(0, loss.size, WINDOW)):
            chunk = loss[start : start + WINDOW]
            w.writerow((k, start + 1, start + chunk.size, f"{chunk.mean():.17g}"))


def main(runs: Path) -> None:
    DATA.mkdir(parents=True, exist_ok=True)
    for loss_csv in sorted(runs.glob("*/loss.csv")):
        summarize(loss_csv, DATA / f"{loss_csv.parent.name}.csv")
        print("summarized", loss_csv.parent.name)


if __name__ == "__main__":
    main(Path(sys.argv[1]))
