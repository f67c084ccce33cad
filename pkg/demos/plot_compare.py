"""
Plot a compare.csv
==================

Usage: python demos/plot_compare.py compare_out/compare.csv [figure.png]

Draws test top-1 against epochs, communication rounds and total bytes, one
line per (strategy, h). Needs matplotlib, which the library itself does not.
"""
import csv
import sys
from collections import defaultdict

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "compare_out/compare.csv"
out = sys.argv[2] if len(sys.argv) > 2 else "compare.png"

curves = defaultdict(list)
with open(path) as f:
    for row in csv.DictReader(f):
        curves[(row["strategy"], row["h"])].append(row)

fig, axes = plt.subplots(1, 3, figsize=(14, 4), sharey=True)
for (name, h), rows in sorted(curves.items()):
    label = name if h == "1" else f"{name} h={h}"
    acc = [float(r["test_top1"]) for r in rows]
    for ax, key in zip(axes, ("epoch", "comm_rounds", "total_bytes")):
        ax.plot([float(r[key]) for r in rows], acc, label=label)
for ax, key in zip(axes, ("epochs", "communication rounds", "total bytes")):
    ax.set_xlabel(key)
axes[2].set_xscale("log")
axes[0].set_ylabel("test top-1")
axes[0].legend()
fig.tight_layout()
fig.savefig(out, dpi=120)
print("wrote", out)
