"""Synthetic biased dataset: generation, I/O, augmentation, oracles.

Each image is a textured background plus a small, low-salience creature:
a class-colored head disc and tail disc flanking a neutral body dot
along a random heading. Class identity lives ONLY in the head and tail
colors AT the keypoints, and nothing larger marks the creature, so
*locating* those patches is the hard part of the task; the background
texture correlates with the class (probability beta) in the cis splits
and is drawn from held-out textures in the trans splits. Keypoints mark
the true head, body center, and tail tip.

Two oracle classifiers certify the construction: a texture-histogram
classifier captures the background shortcut (high cis, chance trans),
a keypoint-patch classifier shows the task is solvable from the
keypoint neighborhoods alone on every split.
"""

from __future__ import annotations

import colorsys
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .attention import KeypointTargets

KEYPOINT_NAMES = ("head", "body", "tail")
NUM_TRAIN_CONTEXTS = 8
NUM_TRANS_CONTEXTS = 4
SPLITS = ("train", "val_cis", "val_trans", "test_cis", "test_trans")

# class c wears head color c % 4 and tail color c // 4
HEAD_COLORS = tuple(colorsys.hsv_to_rgb(h / 360.0, 1.0, 1.0)
                    for h in (0, 90, 180, 270))
TAIL_COLORS = tuple(colorsys.hsv_to_rgb(h / 360.0, 1.0, 1.0)
                    for h in (45, 225))


def worker_threads() -> int:
    """Worker count for parallel generation; PRIVPOOL_THREADS caps it."""
    env = os.environ.get("PRIVPOOL_THREADS")
    if env is not None:
        try:
            n = int(env)
        except ValueError as exc:
            raise ValueError(f"PRIVPOOL_THREADS must be an integer, got {env!r}") from exc
        return max(1, n)
    return min(4, os.cpu_count() or 1)


@dataclass
class Keypoint:
    name: str
    x: int  # column
    y: int  # row
    visible: bool = True


@dataclass
class LabeledSample:
    image: np.ndarray  # [H, W, 3] float in [0, 1]
    label: int
    keypoints: list[Keypoint] | None  # None when annotation was stripped
    context_id: int = -1
    path: str = ""

    def __post_init__(self):
        if self.keypoints is not None:
            h, w = self.image.shape[:2]
            for kp in self.keypoints:
                if kp.visible and not (0 <= kp.x < w and 0 <= kp.y < h):
                    raise ValueError(f"keypoint {kp.name} at ({kp.x},{kp.y}) "
                                     f"outside {w}x{h} image")


@dataclass
class GenConfig:
    num_classes: int = 8
    n_per_class: int = 20      # train samples per class
    image_size: int = 64
    keypoint_names: tuple = KEYPOINT_NAMES
    bias: float = 0.9          # P(background context == class context) in cis
    seed: int = 0
    keypoint_fraction: float = 1.0  # fraction of train samples keeping keypoints

    def __post_init__(self):
        if not (0.0 <= self.bias <= 1.0):
            raise ValueError(f"bias must be in [0,1], got {self.bias}")
        if self.bias >= 1.0 and self.num_classes > 1:
            # bias 1.0 would make trans contexts carry zero train support;
            # the task stays solvable only through keypoints, which is the
            # point, so allow it but keep the documented invariant for < 1
            pass
        if not (0.0 < self.keypoint_fraction <= 1.0):
            raise ValueError("keypoint_fraction must be in (0, 1]")
        if self.num_classes > NUM_TRAIN_CONTEXTS:
            raise ValueError(f"at most {NUM_TRAIN_CONTEXTS} classes supported "
                             f"(one preferred context each)")
        if self.image_size < 64:
            raise ValueError("image_size must be at least 64")

    @property
    def val_per_class(self) -> int:
        return max(2, self.n_per_class // 4)

    @property
    def test_per_class(self) -> int:
        return max(2, self.n_per_class // 2)


# ---------------------------------------------------------------------------
# rendering


def _texture(context_id: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Muted procedural background keyed by context id."""
    hue = ((context_id * 30 + 15) % 360) / 360.0
    val = 0.40 + 0.15 * (context_id % 3)
    base = np.array(colorsys.hsv_to_rgb(hue, 0.55, val))
    alt = np.array(colorsys.hsv_to_rgb(hue, 0.55, min(val + 0.15, 1.0)))
    yy, xx = np.mgrid[0:size, 0:size]
    period = int(rng.integers(4, 9))
    phase = int(rng.integers(0, period))
    kind = context_id % 4
    if kind == 0:
        mask = ((yy + phase) // period) % 2
    elif kind == 1:
        mask = ((yy + phase) // period + (xx + phase) // period) % 2
    elif kind == 2:
        r = period / 3.0
        mask = ((((yy + phase) % period) - period / 2) ** 2
                + (((xx + phase) % period) - period / 2) ** 2 < r * r).astype(int)
    else:
        mask = ((yy + xx + phase) // period) % 2
    img = np.where(mask[..., None] == 1, alt, base)
    img += rng.normal(0.0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0)


def _render_creature(img: np.ndarray, label: int,
                     rng: np.random.Generator) -> list[Keypoint]:
    """Draw tail disc, body dot, head disc; return true keypoints.

    The creature is deliberately low-salience: three small discs along a
    random heading, of which only the head and tail carry class color.
    No larger structure marks the creature, so a classifier must locate
    two small color patches on a busy texture to beat the context
    shortcut.  Pose is fully randomized: position, heading, and scale.
    Position is rejection-sampled so the head and tail keypoints stay at
    least a patch margin inside the frame (class identity must remain
    locally decidable at the keypoints).
    """
    size = img.shape[0]
    lo, hi = 4.0, size - 5.0  # keypoint margin for 5x5 oracle patches
    for _ in range(20):
        cx = rng.uniform(16.0, size - 16.0)
        cy = rng.uniform(16.0, size - 16.0)
        theta = rng.uniform(0.0, 2.0 * math.pi)
        scale = rng.uniform(0.6, 1.0)
        ux, uy = math.cos(theta), math.sin(theta)
        a = 14.0 * scale   # body-center-to-head base offset along the heading
        rh = 5.0 * scale   # head radius
        tail_len = 10.0 * scale
        hx = cx + (a + 0.6 * rh) * ux
        hy = cy + (a + 0.6 * rh) * uy
        tx = cx - (a + tail_len) * ux
        ty = cy - (a + tail_len) * uy
        if (lo <= min(hx, hy, tx, ty)) and (max(hx, hy, tx, ty) <= hi):
            break
    else:
        cx = cy = size / 2.0  # fully centered pose always fits
        hx = cx + (a + 0.6 * rh) * ux
        hy = cy + (a + 0.6 * rh) * uy
        tx = cx - (a + tail_len) * ux
        ty = cy - (a + tail_len) * uy

    body_shade = rng.uniform(0.40, 0.50)

    yy, xx = np.mgrid[0:size, 0:size]

    # tail: small class-colored disc at the tail tip
    rt = 4.0 * scale
    tail_mask = (xx - tx) ** 2 + (yy - ty) ** 2 <= rt * rt
    img[tail_mask] = TAIL_COLORS[label // len(HEAD_COLORS)]

    # body: small neutral dot at the center (class-uninformative)
    rb = 3.0 * scale
    body_mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= rb * rb
    img[body_mask] = body_shade

    # head: class-colored disc past the front of the body
    head_mask = (xx - hx) ** 2 + (yy - hy) ** 2 <= rh * rh
    img[head_mask] = HEAD_COLORS[label % len(HEAD_COLORS)]

    def _pt(name: str, x: float, y: float) -> Keypoint:
        return Keypoint(name, int(np.clip(round(x), 0, size - 1)),
                        int(np.clip(round(y), 0, size - 1)))

    return [_pt("head", hx, hy), _pt("body", cx, cy), _pt("tail", tx, ty)]


def _sample_rng(cfg: GenConfig, split: str, label: int, index: int):
    ss = np.random.SeedSequence([cfg.seed, SPLITS.index(split), label, index])
    return np.random.default_rng(ss)


def _render_sample(cfg: GenConfig, split: str, label: int, index: int):
    rng = _sample_rng(cfg, split, label, index)
    if split.endswith("_trans"):
        context = NUM_TRAIN_CONTEXTS + int(rng.integers(0, NUM_TRANS_CONTEXTS))
    elif rng.random() < cfg.bias:
        context = label % NUM_TRAIN_CONTEXTS
    else:
        context = int(rng.integers(0, NUM_TRAIN_CONTEXTS))
    img = _texture(context, cfg.image_size, rng)
    keypoints = _render_creature(img, label, rng)
    annotated = True
    if split == "train" and rng.random() >= cfg.keypoint_fraction:
        annotated = False
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return data, context, (keypoints if annotated else None)


def _split_sizes(cfg: GenConfig) -> dict[str, int]:
    return {
        "train": cfg.n_per_class,
        "val_cis": cfg.val_per_class,
        "val_trans": cfg.val_per_class,
        "test_cis": cfg.test_per_class,
        "test_trans": cfg.test_per_class,
    }


def generate(cfg: GenConfig, out_dir) -> dict:
    """Write images/, annotations.jsonl, manifest.json; return the manifest."""
    out = Path(out_dir)
    sizes = _split_sizes(cfg)
    jobs = []
    for split in SPLITS:
        for label in range(cfg.num_classes):
            for index in range(sizes[split]):
                jobs.append((split, label, index))

    n_workers = worker_threads()
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            rendered = list(pool.map(
                lambda j: _render_sample(cfg, *j), jobs))
    else:
        rendered = [_render_sample(cfg, *j) for j in jobs]

    for split in SPLITS:
        (out / "images" / split).mkdir(parents=True, exist_ok=True)

    records = []
    counters = {s: 0 for s in SPLITS}
    for (split, label, index), (data, context, keypoints) in zip(jobs, rendered):
        rel = f"images/{split}/{counters[split]:04d}.png"
        counters[split] += 1
        Image.fromarray(data, mode="RGB").save(out / rel, format="PNG")
        rec = {
            "path": rel,
            "split": split,
            "class": label,
            "context_id": context,
            "keypoints": None if keypoints is None else [
                {"name": k.name, "x": k.x, "y": k.y, "visible": k.visible}
                for k in keypoints
            ],
        }
        records.append(rec)

    with open(out / "annotations.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    manifest = {
        "classes": [f"class_{c}" for c in range(cfg.num_classes)],
        "keypoint_names": list(cfg.keypoint_names),
        "splits": {s: counters[s] for s in SPLITS},
        "annotations": "annotations.jsonl",
        "config": asdict(cfg),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# ---------------------------------------------------------------------------
# loading


class Dataset:
    def __init__(self, classes: list[str], keypoint_names: list[str],
                 splits: dict[str, list[LabeledSample]], config: dict):
        self.classes = classes
        self.keypoint_names = keypoint_names
        self.splits = splits
        self.config = config

    @staticmethod
    def load(directory) -> "Dataset":
        directory = Path(directory)
        with open(directory / "manifest.json") as fh:
            manifest = json.load(fh)
        splits: dict[str, list[LabeledSample]] = {s: [] for s in manifest["splits"]}
        with open(directory / manifest["annotations"]) as fh:
            for line in fh:
                rec = json.loads(line)
                img = np.asarray(Image.open(directory / rec["path"]).convert("RGB"))
                image = img.astype(np.float64) / 255.0
                kps = rec["keypoints"]
                keypoints = None if kps is None else [
                    Keypoint(k["name"], k["x"], k["y"], k["visible"]) for k in kps
                ]
                splits[rec["split"]].append(LabeledSample(
                    image, rec["class"], keypoints, rec["context_id"], rec["path"]))
        return Dataset(manifest["classes"], manifest["keypoint_names"],
                       splits, manifest["config"])

    def split(self, name: str) -> list[LabeledSample]:
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}; have {sorted(self.splits)}")
        return self.splits[name]


# ---------------------------------------------------------------------------
# keypoint rasterization and augmentation


def rasterize_keypoints(sample: LabeledSample, feature_hw: int,
                        keypoint_names=KEYPOINT_NAMES) -> KeypointTargets:
    """Nearest-cell one-hot plus 3x3 dilation at feature resolution."""
    return batch_targets([sample], feature_hw, keypoint_names)


def batch_targets(samples, feature_hw: int,
                  keypoint_names=KEYPOINT_NAMES) -> KeypointTargets:
    k = len(keypoint_names)
    n = len(samples)
    maps = np.zeros((n, feature_hw, feature_hw, k))
    visible = np.zeros((n, k), dtype=bool)
    annotated = np.zeros(n, dtype=bool)
    order = {name: i for i, name in enumerate(keypoint_names)}
    for i, sample in enumerate(samples):
        if sample.keypoints is None:
            continue
        annotated[i] = True
        h, w = sample.image.shape[:2]
        for kp in sample.keypoints:
            j = order[kp.name]
            if not kp.visible:
                continue
            visible[i, j] = True
            col = min(kp.x * feature_hw // w, feature_hw - 1)
            row = min(kp.y * feature_hw // h, feature_hw - 1)
            maps[i, max(row - 1, 0):row + 2, max(col - 1, 0):col + 2, j] = 1.0
    return KeypointTargets(maps, visible, annotated)


def augment(sample: LabeledSample, rng: np.random.Generator) -> LabeledSample:
    """Random zoom crop: scale in [0.5, 1], nearest-neighbor resize back.

    A keypoint whose source pixel survives the crop maps to a pixel
    with the exact same value; keypoints cropped out become invisible.
    """
    size = sample.image.shape[0]
    scale = rng.uniform(0.5, 1.0)
    crop = max(size // 2, min(size, int(round(scale * size))))
    left = int(rng.integers(0, size - crop + 1))
    top = int(rng.integers(0, size - crop + 1))
    src = np.minimum(np.arange(size) * crop // size, crop - 1)
    window = sample.image[top:top + crop, left:left + crop]
    image = window[src][:, src]

    keypoints = None
    if sample.keypoints is not None:
        keypoints = []
        for kp in sample.keypoints:
            rx, ry = kp.x - left, kp.y - top
            if kp.visible and 0 <= rx < crop and 0 <= ry < crop:
                # first output pixel whose nearest-neighbor source is (rx, ry)
                nx = (rx * size + crop - 1) // crop
                ny = (ry * size + crop - 1) // crop
                keypoints.append(Keypoint(kp.name, nx, ny, True))
            else:
                keypoints.append(Keypoint(kp.name, 0, 0, False))
    return LabeledSample(image, sample.label, keypoints,
                         sample.context_id, sample.path)


# ---------------------------------------------------------------------------
# oracle classifiers


def _color_histogram(image: np.ndarray, bins: int = 4) -> np.ndarray:
    # drop pixels near the saturated creature palette so the histogram
    # reflects the background texture, not the class markings
    palette = np.asarray(HEAD_COLORS + TAIL_COLORS)
    dist = np.linalg.norm(image[:, :, None, :] - palette[None, None], axis=-1)
    keep = dist.min(axis=-1) > 0.25
    pixels = image[keep]
    idx = np.minimum((pixels * bins).astype(int), bins - 1)
    flat = (idx[..., 0] * bins + idx[..., 1]) * bins + idx[..., 2]
    hist = np.bincount(flat.ravel(), minlength=bins ** 3).astype(np.float64)
    return hist / max(hist.sum(), 1.0)


def texture_histogram_oracle(dataset: Dataset) -> dict[str, float]:
    """Nearest-class-centroid histogram classifier over background pixels."""
    train = dataset.split("train")
    n_classes = len(dataset.classes)
    centroids = np.zeros((n_classes, 64))
    counts = np.zeros(n_classes)
    for s in train:
        centroids[s.label] += _color_histogram(s.image)
        counts[s.label] += 1
    centroids /= counts[:, None]

    accuracies = {}
    for name, samples in dataset.splits.items():
        hits = 0
        for s in samples:
            h = _color_histogram(s.image)
            pred = int(np.abs(centroids - h).sum(axis=1).argmin())
            hits += pred == s.label
        accuracies[name] = hits / len(samples)
    return accuracies


def keypoint_patch_oracle(dataset: Dataset, patch: int = 5) -> dict[str, float]:
    """Classify from 5x5 patches at the true head and tail keypoints.

    Uses min-over-pixels distance to the palette colors, so a single
    surviving head or tail pixel in the patch is enough.
    """
    half = patch // 2
    head_pal = np.asarray(HEAD_COLORS)
    tail_pal = np.asarray(TAIL_COLORS)

    def _min_dist(image, kp, palette):
        h, w = image.shape[:2]
        y0, x0 = max(kp.y - half, 0), max(kp.x - half, 0)
        window = image[y0:min(kp.y + half + 1, h), x0:min(kp.x + half + 1, w)]
        d = np.linalg.norm(window[:, :, None, :] - palette[None, None], axis=-1)
        return d.reshape(-1, len(palette)).min(axis=0)

    accuracies = {}
    for name, samples in dataset.splits.items():
        hits = 0
        total = 0
        for s in samples:
            kps = {k.name: k for k in (s.keypoints or [])}
            if "head" not in kps or "tail" not in kps:
                continue
            dh = _min_dist(s.image, kps["head"], head_pal)
            dt = _min_dist(s.image, kps["tail"], tail_pal)
            score = dh[None, :] + dt[:, None]  # [tail_idx, head_idx]
            ti, hi = np.unravel_index(score.argmin(), score.shape)
            pred = int(ti) * len(HEAD_COLORS) + int(hi)
            hits += pred == s.label
            total += 1
        accuracies[name] = hits / total if total else float("nan")
    return accuracies
