"""Visual diagnostics: feature maps, filters, confusion heatmap, curves.

Everything here renders to plain numpy uint8 images (grayscale 2D or RGB
3D) or CSV text; callers decide where the bytes go. Rendering is
read-only over the model and deterministic.

Feature maps are taken after each convolution's ReLU. Each map or filter
is min-max normalized on its own; a constant map (min equals max) rends
as mid-gray 128 rather than dividing by zero. Grids are square-ish:
ceil(sqrt(C)) tiles per side with 1-pixel black separators.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ShapeError
from .metrics import ConfusionMatrix
from .model import Model

CURVE_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


def normalize_to_u8(plane: np.ndarray) -> np.ndarray:
    """Min-max scale one 2D plane to 0..255; constant planes become 128."""
    lo = float(plane.min())
    hi = float(plane.max())
    if hi == lo:
        return np.full(plane.shape, 128, dtype=np.uint8)
    scaled = (plane.astype(np.float64) - lo) * (255.0 / (hi - lo))
    return np.rint(scaled).astype(np.uint8)


def tile_grid(tiles: np.ndarray, separator: int = 0) -> np.ndarray:
    """Lay (N, h, w[, 3]) tiles into a ceil(sqrt(N))-per-side grid with
    1-pixel separators; unused cells stay at the separator value."""
    n, h, w = tiles.shape[:3]
    channels = tiles.shape[3:]
    side = math.ceil(math.sqrt(n))
    gh = side * h + (side - 1)
    gw = side * w + (side - 1)
    grid = np.full((gh, gw) + channels, separator, dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, side)
        y = r * (h + 1)
        x = c * (w + 1)
        grid[y : y + h, x : x + w] = tiles[i]
    return grid


def _conv_stage_layer(model: Model, stage: int) -> int:
    """Map a 1-based conv stage number to its spec-chain layer index."""
    conv_indices = [i for i, s in enumerate(model.specs) if s.kind == "conv3x3"]
    if not 1 <= stage <= len(conv_indices):
        raise ShapeError(
            f"conv stage must be 1..{len(conv_indices)}, got {stage}")
    return conv_indices[stage - 1]


def extract_feature_maps(
    model: Model,
    image_tensor: np.ndarray,
    stages: Optional[list] = None,
) -> dict:
    """Post-ReLU activation grids for the requested conv stages (1-based).

    Returns {stage: grayscale grid}; each channel map is min-max
    normalized independently before tiling.
    """
    if stages is None:
        stages = list(range(1, 7))
    relu_after = model.conv_activation_indices()
    conv_to_relu = {}
    for stage in stages:
        conv_idx = _conv_stage_layer(model, stage)
        conv_to_relu[stage] = relu_after[stage - 1] if stage - 1 < len(relu_after) \
            else conv_idx
    taps = {idx: None for idx in conv_to_relu.values()}
    model.forward(image_tensor, capture=taps)
    out = {}
    for stage, idx in conv_to_relu.items():
        maps = taps[idx][0]  # (C, h, w)
        tiles = np.stack([normalize_to_u8(m) for m in maps])
        out[stage] = tile_grid(tiles)
    return out


def visualize_filters(model: Model, stage: int) -> np.ndarray:
    """Filter grid for one conv stage (1-based), upscaled x16.

    Stage 1 kernels are true RGB patches; deeper stages render each
    filter's mean over input channels as grayscale.
    """
    idx = _conv_stage_layer(model, stage)
    w = model.params[idx].w  # (out_c, in_c, 3, 3)
    if w is None:
        raise ShapeError(f"conv stage {stage} has no weights loaded")
    patches = []
    for f in range(w.shape[0]):
        kern = w[f]
        if stage == 1:
            flat = normalize_to_u8(kern.reshape(-1)[None, :])[0]
            patch = flat.reshape(3, 3, 3).transpose(1, 2, 0)  # HWC
        else:
            patch = normalize_to_u8(kern.mean(axis=0))
        patches.append(np.repeat(np.repeat(patch, 16, axis=0), 16, axis=1))
    return tile_grid(np.stack(patches))


def confusion_cell_values(cm: ConfusionMatrix) -> np.ndarray:
    """Per-cell pixel value: 255 at zero, darker toward each row's max."""
    counts = cm.counts.astype(np.float64)
    row_max = counts.max(axis=1, keepdims=True)
    ratio = np.divide(counts, row_max, out=np.zeros_like(counts),
                      where=row_max > 0)
    return np.rint(255.0 * (1.0 - ratio)).astype(np.uint8)


def render_confusion(
    cm: ConfusionMatrix,
    labels: Optional[list] = None,
    cell: int = 16,
) -> np.ndarray:
    """Heatmap as an RGB image: k x k cells shaded by count/row-max,
    with a left margin carrying class labels when given."""
    values = confusion_cell_values(cm)
    k = cm.k
    body = np.repeat(np.repeat(values, cell, axis=0), cell, axis=1)
    body = np.stack([body] * 3, axis=-1)
    if labels is None:
        return body
    margin = 8 + 6 * max(len(str(l)) for l in labels)
    img = np.full((body.shape[0], margin + body.shape[1], 3), 255,
                  dtype=np.uint8)
    img[:, margin:] = body
    for row, text in enumerate(labels[:k]):
        _draw_text(img, str(text), x=4, y=row * cell + max(0, cell // 2 - 3))
    return img


# 5x3 bitmap glyphs for the label strip: enough for slugs and digits
_GLYPHS = {
    "0": "111101101101111", "1": "010110010010111", "2": "111001111100111",
    "3": "111001111001111", "4": "101101111001001", "5": "111100111001111",
    "6": "111100111101111", "7": "111001010010010", "8": "111101111101111",
    "9": "111101111001111", "a": "010101111101101", "b": "110101110101110",
    "c": "011100100100011", "d": "110101101101110", "e": "111100110100111",
    "f": "111100110100100", "g": "011100101101011", "h": "101101111101101",
    "i": "111010010010111", "j": "001001001101010", "k": "101110100110101",
    "l": "100100100100111", "m": "101111111101101", "n": "110101101101101",
    "o": "010101101101010", "p": "110101110100100", "q": "010101101011001",
    "r": "110101110110101", "s": "011100010001110", "t": "111010010010010",
    "u": "101101101101011", "v": "101101101010010", "w": "101101111111101",
    "x": "101010010010101", "y": "101101010010010", "z": "111001010100111",
    "_": "000000000000111", "-": "000000111000000", " ": "000000000000000",
    ".": "000000000000010",
}


def _draw_text(img: np.ndarray, text: str, x: int, y: int) -> None:
    for ch in text.lower():
        bits = _GLYPHS.get(ch)
        if bits is not None and y + 5 <= img.shape[0] and x + 3 <= img.shape[1]:
            glyph = np.array([int(b) for b in bits]).reshape(5, 3)
            region = img[y : y + 5, x : x + 3]
            region[glyph == 1] = 0
        x += 4
        if x + 3 > img.shape[1]:
            break


# -- training curves ---------------------------------------------------------------


def export_curves(history: list, csv_path, plot_path=None) -> None:
    """Write per-epoch curves as CSV (and optionally a line-plot PNG).

    Columns are epoch,train_loss,train_acc,val_loss,val_acc; validation
    cells are empty when the run had no validation set.
    """
    if not history:
        raise ValueError("history is empty")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CURVE_COLUMNS)
        for rec in history:
            writer.writerow([
                rec["epoch"],
                repr(rec["loss"]),
                repr(rec["train_acc"]),
                repr(rec["val_loss"]) if "val_loss" in rec else "",
                repr(rec["val_acc"]) if "val_acc" in rec else "",
            ])
    if plot_path is not None:
        img = plot_curves(history)
        from .imaging import encode_png
        Path(plot_path).write_bytes(encode_png(img))


def parse_curves(csv_path) -> list:
    out = []
    with open(csv_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != CURVE_COLUMNS:
            raise ValueError(f"unexpected curve columns {header}")
        for row in reader:
            rec = {"epoch": int(row[0]), "loss": float(row[1]),
                   "train_acc": float(row[2])}
            if row[3]:
                rec["val_loss"] = float(row[3])
            if row[4]:
                rec["val_acc"] = float(row[4])
            out.append(rec)
    return out


PLOT_W, PLOT_H, PLOT_MARGIN = 480, 200, 20


def epoch_to_x(epoch: float, first: float, last: float,
               width: int = PLOT_W, margin: int = PLOT_MARGIN) -> int:
    """Affine epoch -> pixel-column map used by the plot panels."""
    if last == first:
        return margin
    span = width - 2 * margin - 1
    return margin + int(round((epoch - first) / (last - first) * span))


def _panel(series: list, height: int = PLOT_H) -> np.ndarray:
    img = np.full((height, PLOT_W, 3), 255, dtype=np.uint8)
    img[height - PLOT_MARGIN, PLOT_MARGIN : PLOT_W - PLOT_MARGIN] = 0  # x axis
    img[PLOT_MARGIN : height - PLOT_MARGIN, PLOT_MARGIN] = 0  # y axis
    values = [v for _, pts in series for _, v in pts]
    if not values:
        return img
    lo, hi = min(values), max(values)
    if hi == lo:
        hi = lo + 1.0
    first = min(e for _, pts in series for e, _ in pts)
    last = max(e for _, pts in series for e, _ in pts)

    def to_y(v):
        frac = (v - lo) / (hi - lo)
        return int(round((height - PLOT_MARGIN - 1)
                         - frac * (height - 2 * PLOT_MARGIN - 1)))

    for color, pts in series:
        prev = None
        for e, v in pts:
            x, y = epoch_to_x(e, first, last), to_y(v)
            if prev is not None:
                steps = max(abs(x - prev[0]), abs(y - prev[1]), 1)
                xs = np.linspace(prev[0], x, steps + 1).round().astype(int)
                ys = np.linspace(prev[1], y, steps + 1).round().astype(int)
                img[ys, xs] = color
            else:
                img[y, x] = color
            prev = (x, y)
    return img


def plot_curves(history: list) -> np.ndarray:
    """Two stacked panels: accuracy curves on top, loss curves below.
    Training series draw in blue, validation in red."""
    blue, red = (40, 80, 200), (200, 60, 40)
    acc = [(blue, [(r["epoch"], r["train_acc"]) for r in history])]
    loss = [(blue, [(r["epoch"], r["loss"]) for r in history])]
    if any("val_acc" in r for r in history):
        acc.append((red, [(r["epoch"], r["val_acc"])
                          for r in history if "val_acc" in r]))
    if any("val_loss" in r for r in history):
        loss.append((red, [(r["epoch"], r["val_loss"])
                           for r in history if "val_loss" in r]))
    return np.vstack([_panel(acc), _panel(loss)])
