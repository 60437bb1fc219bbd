#!/usr/bin/env python3
"""Regenerate the bundled 256-entry iron colormap CSV.

The palette is fixed by the anchor table below; the shipped file is part of
the output contract (fused images must be bit-reproducible), so only edit the
anchors if you intend to change that contract.
"""

import csv
import pathlib

import numpy as np

ANCHORS = [
    (0.00, (0, 0, 0)),
    (0.10, (40, 0, 70)),
    (0.25, (120, 10, 130)),
    (0.45, (210, 50, 90)),
    (0.65, (255, 130, 30)),
    (0.85, (255, 215, 70)),
    (1.00, (255, 255, 255)),
]


def main():
    xs = np.array([a[0] for a in ANCHORS])
    rgb = np.array([a[1] for a in ANCHORS], dtype=float)
    grid = np.linspace(0.0, 1.0, 256)
    table = np.stack([np.interp(grid, xs, rgb[:, c]) for c in range(3)], axis=1)
    table = np.clip(np.rint(table), 0, 255).astype(np.uint8)

    out = pathlib.Path(__file__).resolve().parents[1] / "src" / "thermoslam" / "data" / "iron_colormap.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "r", "g", "b"])
        for i, (r, g, b) in enumerate(table):
            writer.writerow([i, int(r), int(g), int(b)])
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
