"""Similarity heatmaps as binary PPM images with a JSON legend.

Colour ramp for a value v in [-1, 1] (channels rounded to the nearest int):
    v <= 0: (255 (1 + v), 255 (1 + v), 255)   -1 -> blue, 0 -> white
    v >= 0: (255, 255 (1 - v), 255 (1 - v))    0 -> white, +1 -> red
Missing entries (NaN) are drawn mid grey (128, 128, 128).
"""

from __future__ import annotations

import json
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np

CELL = 16
MISSING = (128, 128, 128)


def ramp(v: float) -> tuple[int, int, int]:
    if np.isnan(v):
        return MISSING
    v = float(min(1.0, max(-1.0, v)))
    if v <= 0:
        c = int(round(255 * (1.0 + v)))
        return (c, c, 255)
    c = int(round(255 * (1.0 - v)))
    return (255, c, c)


def heatmap_pixels(matrix: np.ndarray, cell: int = CELL) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"heatmap needs a matrix, got shape {m.shape}")
    finite = m[np.isfinite(m)]
    if finite.size and (finite.min() < -1 or finite.max() > 1):
        warnings.warn("heatmap entries outside [-1, 1] were clamped", stacklevel=2)
    colours = np.array([[ramp(v) for v in row] for row in m], dtype=np.uint8).reshape(m.shape[0], m.shape[1], 3)
    return np.repeat(np.repeat(colours, cell, axis=0), cell, axis=1)


def emit_heatmap(matrix: np.ndarray, path: str | Path, labels: Sequence[str] | None = None, cell: int = CELL) -> Path:
    """Write ``path`` (PPM P6) and ``path`` + '.json' (row/column labels, ramp)."""
    pixels = heatmap_pixels(matrix, cell)
    h, w, _ = pixels.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    n = np.asarray(matrix).shape[0]
    legend = {
        "labels": list(labels) if labels is not None else [str(i) for i in range(n)],
        "cell_size": cell,
        "ramp": {"-1": [0, 0, 255], "0": [255, 255, 255], "1": [255, 0, 0], "missing": list(MISSING)},
        "order": "rows and columns follow the action declaration order",
    }
    Path(str(path) + ".json").write_text(json.dumps(legend, indent=1, sort_keys=True) + "\n")
    return path


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
