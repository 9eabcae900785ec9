"""Evaluation: accuracy metrics, attention boxes, crop-refeed, map export.

Crop-refeed derives a bounding box from the mean attention map,
crops the input, resizes back with nearest-neighbor sampling, runs a
second forward pass, and averages the two softmax outputs. A
full-image box therefore reproduces the no-refeed prediction bit for
bit.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as T
from .model import Model
from .tensor import Tensor

DEFAULT_BATCH = 32


@dataclass
class EvalReport:
    split: str
    crop_refeed: bool
    n: int
    top1: float
    per_class: list          # accuracy per class id; nan when unsupported
    support: list            # samples per class id
    mean_per_class: float    # mean over classes with support
    confusion: list          # [true][pred] counts

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def save_confusion_csv(self, path) -> None:
        c = len(self.confusion)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["true\\pred"] + [str(j) for j in range(c)])
            for i, row in enumerate(self.confusion):
                writer.writerow([str(i)] + [str(v) for v in row])


def bilinear_upsample(grid: np.ndarray, out_size: int) -> np.ndarray:
    """[h,w] -> [out,out] bilinear, cell centers aligned to pixel centers."""
    h, w = grid.shape
    yc = np.clip((np.arange(out_size) + 0.5) * h / out_size - 0.5, 0, h - 1)
    xc = np.clip((np.arange(out_size) + 0.5) * w / out_size - 0.5, 0, w - 1)
    y0 = np.floor(yc).astype(int)
    x0 = np.floor(xc).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (yc - y0)[:, None]
    wx = (xc - x0)[None, :]
    g = grid
    return ((1 - wy) * (1 - wx) * g[np.ix_(y0, x0)] + (1 - wy) * wx * g[np.ix_(y0, x1)]
            + wy * (1 - wx) * g[np.ix_(y1, x0)] + wy * wx * g[np.ix_(y1, x1)])


def attention_box(maps: np.ndarray, threshold_frac: float = 0.5,
                  upscale_to: int = 64) -> tuple:
    """Tight (x0, y0, x1, y1) box around thresholded mean attention.

    maps is [Hf, Wf, M] for one sample. The mean map is upsampled to
    the input resolution and thresholded at threshold_frac times its
    max; an empty mask yields the full-image box. x1/y1 are exclusive.
    """
    if maps.ndim != 3:
        raise ValueError(f"attention_box: expected [Hf,Wf,M], got {maps.shape}")
    mean_map = maps.mean(axis=2)
    up = bilinear_upsample(mean_map, upscale_to)
    mask = up >= threshold_frac * up.max()
    if not mask.any():
        return (0, 0, upscale_to, upscale_to)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def crop_and_resize(image: np.ndarray, box: tuple) -> np.ndarray:
    """Nearest-neighbor resize of the box content back to full size.

    The full-image box returns the input array unchanged.
    """
    size = image.shape[0]
    x0, y0, x1, y1 = box
    if not (0 <= x0 < x1 <= size and 0 <= y0 < y1 <= size):
        raise ValueError(f"crop_and_resize: box {box} outside image of size {size}")
    src_y = y0 + np.arange(size) * (y1 - y0) // size
    src_x = x0 + np.arange(size) * (x1 - x0) // size
    return image[src_y][:, src_x]


def _batched(seq, size):
    for start in range(0, len(seq), size):
        yield seq[start:start + size]


def evaluate(model: Model, samples, num_classes: int, split_name: str = "",
             crop_refeed: bool = False, batch_size: int = DEFAULT_BATCH) -> EvalReport:
    if not samples:
        raise ValueError(f"evaluate: split {split_name!r} is empty")
    if crop_refeed and model.attention is None:
        raise ValueError("crop_refeed requires a model with attention maps "
                         f"(pool mode {model.config.pool_mode!r} has none)")
    dtype = T.default_dtype()
    labels = []
    preds = []
    with T.no_grad():
        for batch in _batched(samples, batch_size):
            x = np.stack([s.image for s in batch]).astype(dtype)
            out = model.forward(Tensor(x))
            probs = T.softmax(out.logits, axis=1).data
            if crop_refeed:
                boxes = [attention_box(out.stack.maps.data[i],
                                       upscale_to=model.config.input_size)
                         for i in range(len(batch))]
                crops = np.stack([crop_and_resize(x[i], boxes[i])
                                  for i in range(len(batch))])
                probs2 = T.softmax(model.forward(Tensor(crops)).logits, axis=1).data
                probs = (probs + probs2) / 2.0
            preds.extend(int(p) for p in probs.argmax(axis=1))
            labels.extend(s.label for s in batch)

    confusion = np.zeros((num_classes, num_classes), dtype=int)
    for yt, yp in zip(labels, preds):
        confusion[yt, yp] += 1
    support = confusion.sum(axis=1)
    hits = np.diag(confusion)
    with np.errstate(invalid="ignore"):
        per_class = np.where(support > 0, hits / np.maximum(support, 1), np.nan)
    present = support > 0
    return EvalReport(
        split=split_name,
        crop_refeed=crop_refeed,
        n=len(samples),
        top1=float(hits.sum() / support.sum()),
        per_class=[float(v) for v in per_class],
        support=[int(v) for v in support],
        mean_per_class=float(per_class[present].mean()),
        confusion=confusion.tolist(),
    )


def _to_gray_png(path, grid: np.ndarray, out_size: int) -> None:
    idx = np.arange(out_size) * grid.shape[0] // out_size
    up = grid[idx][:, idx]
    data = np.clip(np.rint(up * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def _overlay_box(image: np.ndarray, box: tuple) -> np.ndarray:
    out = (np.clip(image, 0, 1) * 255).astype(np.uint8).copy()
    x0, y0, x1, y1 = box
    red = np.array([255, 0, 0], dtype=np.uint8)
    out[y0, x0:x1] = red
    out[y1 - 1, x0:x1] = red
    out[y0:y1, x0] = red
    out[y0:y1, x1 - 1] = red
    return out


def export_attention(model: Model, samples, out_dir, keypoint_names) -> list:
    """Write per-sample map PNGs; returns the created file paths.

    Per sample: the input with the predicted box overlaid, one
    grayscale PNG per supervised map (named by keypoint), one per
    complementary map (numbered), and the supervised/complementary
    mean maps.
    """
    if model.attention is None:
        raise ValueError(f"export_attention requires attention maps "
                         f"(pool mode {model.config.pool_mode!r} has none)")
    k = model.config.num_keypoints
    if len(keypoint_names) != k:
        raise ValueError(f"expected {k} keypoint names, got {list(keypoint_names)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    size = model.config.input_size
    dtype = T.default_dtype()
    written = []
    with T.no_grad():
        for i, sample in enumerate(samples):
            x = sample.image[None].astype(dtype)
            maps = model.forward(Tensor(x)).stack.maps.data[0]
            box = attention_box(maps, upscale_to=size)
            prefix = out / f"{i:04d}"

            path = f"{prefix}_input_box.png"
            Image.fromarray(_overlay_box(sample.image, box), mode="RGB").save(
                path, format="PNG")
            written.append(path)
            for j, name in enumerate(keypoint_names):
                path = f"{prefix}_map_{name}.png"
                _to_gray_png(path, maps[:, :, j], size)
                written.append(path)
            for q in range(model.config.num_complementary):
                path = f"{prefix}_map_comp{q}.png"
                _to_gray_png(path, maps[:, :, k + q], size)
                written.append(path)
            path = f"{prefix}_mean_supervised.png"
            _to_gray_png(path, maps[:, :, :k].mean(axis=2), size)
            written.append(path)
            path = f"{prefix}_mean_complementary.png"
            _to_gray_png(path, maps[:, :, k:].mean(axis=2), size)
            written.append(path)
    return written
