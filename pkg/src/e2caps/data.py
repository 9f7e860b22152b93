"""Datasets: manifest I/O, sample loading, stratified splits and a
procedural face generator with ground-truth landmarks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .attention import (AuRule, LandmarkSet, attention_from_landmarks, normalize_landmarks,
                        read_landmarks, write_landmarks)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
DEFAULT_CLASSES = ("neutral", "smile", "frown", "surprise")
INNER_LEFT, INNER_RIGHT = 1, 2
N_LANDMARKS = 13


class DataError(ValueError):
    pass


@dataclass
class Record:
    id: str
    image: str
    landmarks: str
    label: int


@dataclass
class DatasetManifest:
    root: Path
    classes: list
    records: list
    split_seed: int = 0
    train_fraction: float = 0.8

    def __len__(self):
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)


@dataclass
class Sample:
    image: np.ndarray           # (3, S, S) float32 in [0, 1]
    landmarks: LandmarkSet
    label: int
    id: str


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def write_manifest(m: DatasetManifest, path=None) -> Path:
    path = Path(path) if path else Path(m.root) / MANIFEST_NAME
    lines = [f"# classes={','.join(m.classes)}",
             f"# split_seed={m.split_seed} train_fraction={m.train_fraction!r}",
             "id,image_path,landmark_path,label"]
    lines += [f"{r.id},{r.image},{r.landmarks},{r.label}" for r in m.records]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    classes, seed, frac, records = None, 0, 0.8, []
    header_seen = False
    for ln in path.read_text().splitlines():
        ln = ln.strip()
        if not ln:
            continue
        if ln.startswith("#"):
            body = ln[1:].strip()
            for tok in body.split():
                key, _, val = tok.partition("=")
                if key == "classes":
                    classes = val.split(",")
                elif key == "split_seed":
                    seed = int(val)
                elif key == "train_fraction":
                    frac = float(val)
            continue
        if not header_seen:
            if ln != "id,image_path,landmark_path,label":
                raise DataError(f"bad manifest header: {ln!r}")
            header_seen = True
            continue
        parts = ln.split(",")
        if len(parts) != 4:
            raise DataError(f"bad manifest line: {ln!r}")
        records.append(Record(parts[0], parts[1], parts[2], int(parts[3])))
    if classes is None:
        raise DataError("manifest does not name its classes")
    root = path.parent
    for r in records:
        if not 0 <= r.label < len(classes):
            raise DataError(f"record {r.id}: label {r.label} outside {len(classes)} classes")
        for rel in (r.image, r.landmarks):
            if not (root / rel).exists():
                raise DataError(f"record {r.id}: missing file {rel}")
    return DatasetManifest(root, classes, records, seed, frac)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def load_image(path, size: Optional[int] = None) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("RGB")
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / np.float32(255.0)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_sample(m: DatasetManifest, index: int, input_size: Optional[int] = None) -> Sample:
    if not 0 <= index < len(m.records):
        raise IndexError(f"sample index {index} out of range")
    r = m.records[index]
    try:
        with Image.open(m.root / r.image) as img:
            w, h = img.size
        image = load_image(m.root / r.image, input_size)
        pts, il, ir = read_landmarks(m.root / r.landmarks)
        lms = normalize_landmarks(pts, w, h, il, ir)
    except (OSError, ValueError) as exc:
        raise DataError(f"record {r.id}: {exc}") from exc
    return Sample(image=image, landmarks=lms, label=r.label, id=r.id)


def grayscale_target(images: np.ndarray, size: int) -> np.ndarray:
    """Flattened grayscale reconstruction targets (B, size*size)."""
    gray = images.mean(axis=1)
    if gray.shape[-1] != size:
        out = np.empty((len(gray), size, size), dtype=np.float32)
        for i, g in enumerate(gray):
            img = Image.fromarray(g.astype(np.float32), mode="F").resize((size, size),
                                                                          Image.BILINEAR)
            out[i] = np.asarray(img)
        gray = np.clip(out, 0, 1)
    return gray.reshape(len(gray), -1).astype(np.float32)


@dataclass
class ArrayDataset:
    """Whole dataset decoded into memory, attention maps pre-rendered."""

    ids: list
    images: np.ndarray      # (M, 3, S, S) float32
    attention: np.ndarray   # (M, 100, 100) float32
    labels: np.ndarray      # (M,) int64
    classes: list = field(default_factory=list)

    def subset(self, idx) -> "ArrayDataset":
        idx = np.asarray(idx)
        return ArrayDataset([self.ids[i] for i in idx], self.images[idx],
                            self.attention[idx], self.labels[idx], self.classes)

    def __len__(self):
        return len(self.ids)


def load_arrays(m: DatasetManifest, input_size: int,
                rules: Optional[Sequence[AuRule]] = None) -> ArrayDataset:
    n = len(m.records)
    images = np.empty((n, 3, input_size, input_size), dtype=np.float32)
    attention = np.empty((n, 100, 100), dtype=np.float32)
    for i in range(n):
        s = load_sample(m, i, input_size)
        images[i] = s.image
        attention[i] = attention_from_landmarks(s.landmarks, rules).grid
    return ArrayDataset([r.id for r in m.records], images, attention, m.labels, list(m.classes))


def split(m: DatasetManifest, train_fraction: Optional[float] = None,
          seed: Optional[int] = None) -> tuple[list, list]:
    """Stratified deterministic split; returns sorted (train ids, test ids)."""
    frac = m.train_fraction if train_fraction is None else train_fraction
    seed = m.split_seed if seed is None else seed
    if not 0 < frac < 1:
        raise DataError("train fraction must lie strictly between 0 and 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    train, test = [], []
    for c in range(len(m.classes)):
        ids = sorted(r.id for r in m.records if r.label == c)
        if len(ids) < 2:
            raise DataError(f"class {m.classes[c]!r} has {len(ids)} samples; need >= 2")
        perm = rng.permutation(len(ids))
        k = min(max(int(round(frac * len(ids))), 1), len(ids) - 1)
        train += [ids[i] for i in perm[:k]]
        test += [ids[i] for i in perm[k:]]
    return sorted(train), sorted(test)


def split_indices(m: DatasetManifest, train_fraction=None, seed=None):
    train, test = split(m, train_fraction, seed)
    pos = {r.id: i for i, r in enumerate(m.records)}
    return np.array([pos[i] for i in train]), np.array([pos[i] for i in test])


# ---------------------------------------------------------------------------
# synthetic faces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticFaceParams:
    classes: tuple = DEFAULT_CLASSES
    samples_per_class: int = 250
    image_size: int = 64
    noise: float = 0.06
    supersample: int = 4
    jitter: float = 2.5          # face-center jitter, pixels at 64 px
    scale_range: tuple = (0.9, 1.1)
    # (lo, hi) per class, in face-scale units at 64 px
    mouth_curvature: dict = field(default_factory=lambda: {
        "neutral": (-0.8, 0.8), "smile": (1.8, 4.0), "frown": (-4.0, -1.8),
        "surprise": (-0.5, 0.5)})
    mouth_open: dict = field(default_factory=lambda: {
        "neutral": (0.0, 0.0), "smile": (0.0, 0.0), "frown": (0.0, 0.0),
        "surprise": (2.5, 5.0)})
    eye_openness: dict = field(default_factory=lambda: {
        "neutral": (0.25, 0.5), "smile": (0.2, 0.45), "frown": (0.25, 0.5),
        "surprise": (0.6, 0.95)})
    brow_raise: dict = field(default_factory=lambda: {
        "neutral": (0.0, 1.0), "smile": (0.0, 1.0), "frown": (-1.0, 0.5),
        "surprise": (1.5, 3.0)})
    brow_inner_drop: dict = field(default_factory=lambda: {
        "neutral": (-0.5, 0.5), "smile": (-0.5, 0.5), "frown": (1.0, 2.5),
        "surprise": (-1.0, 0.0)})

    def validate(self):
        if self.samples_per_class < 1 or self.image_size < 16:
            raise DataError("need >= 1 sample per class and image size >= 16")
        for table in (self.mouth_curvature, self.mouth_open, self.eye_openness,
                      self.brow_raise, self.brow_inner_drop):
            missing = set(self.classes) - set(table)
            if missing:
                raise DataError(f"no geometry range for classes {sorted(missing)}")
        return self


def sample_geometry(params: SyntheticFaceParams, label: int, rng: np.random.Generator) -> dict:
    name = params.classes[label]

    def u(table):
        lo, hi = table[name]
        return float(rng.uniform(lo, hi))

    return {
        "cx": 32 + float(rng.uniform(-params.jitter, params.jitter)),
        "cy": 33 + float(rng.uniform(-params.jitter, params.jitter)),
        "scale": float(rng.uniform(*params.scale_range)),
        "skin": float(rng.uniform(0.55, 0.8)),
        "background": float(rng.uniform(0.05, 0.3)),
        "mouth_halfwidth": float(rng.uniform(6.0, 8.0)),
        "mouth_curvature": u(params.mouth_curvature),
        "mouth_open": u(params.mouth_open),
        "eye_openness": u(params.eye_openness),
        "brow_raise": u(params.brow_raise),
        "brow_inner_drop": u(params.brow_inner_drop),
    }


def face_landmarks(g: dict, size: int) -> np.ndarray:
    """13 landmarks (x, y) in ``size``-pixel coordinates for geometry ``g``."""
    k = size / 64.0
    s = g["scale"]
    cx, cy = g["cx"], g["cy"]
    ew = 4.0 * s
    ey = cy - 7.0 * s
    lx, rx = cx - 9.0 * s, cx + 9.0 * s
    by = ey - 6.0 * s - g["brow_raise"] * s
    drop = g["brow_inner_drop"] * s
    my = cy + 12.0 * s
    mw = g["mouth_halfwidth"] * s
    if g["mouth_open"] > 0:
        mw *= 0.6
        h = g["mouth_open"] * s / 2
        upper, lower, center = (cx, my - h), (cx, my + h), (cx, my)
        corners_y = my
    else:
        curve = g["mouth_curvature"] * s
        corners_y = my - curve / 2
        mid = corners_y + curve
        upper, lower, center = (cx, mid - 0.8 * s), (cx, mid + 0.8 * s), (cx, mid)
    pts = [
        (lx - ew, ey), (lx + ew, ey), (rx - ew, ey), (rx + ew, ey),
        (lx - 5.0 * s, by), (lx + 4.0 * s, by + drop), (rx - 4.0 * s, by + drop), (rx + 5.0 * s, by),
        (cx - mw, corners_y), (cx + mw, corners_y), upper, lower, center,
    ]
    return np.array(pts, dtype=np.float64) * k


def render_face(g: dict, size: int, supersample: int = 4) -> np.ndarray:
    """Noise-free grayscale face in [0, 1], shape (size, size)."""
    big = size * supersample
    k = big / 64.0
    s = g["scale"]
    img = Image.new("L", (big, big), int(round(255 * g["background"])))
    d = ImageDraw.Draw(img)
    cx, cy = g["cx"] * k, g["cy"] * k
    rx, ry = 21.0 * s * k, 26.0 * s * k
    d.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=int(round(255 * g["skin"])))
    dark = int(round(255 * 0.08))
    lm = face_landmarks(g, big)
    line_w = max(1, int(round(1.6 * s * k)))
    ew = 4.0 * s * k
    eh = max(g["eye_openness"] * ew, 0.5 * k)
    for outer, inner in ((lm[0], lm[1]), (lm[3], lm[2])):
        ex = (outer[0] + inner[0]) / 2
        ey = outer[1]
        d.ellipse([ex - ew, ey - eh, ex + ew, ey + eh], fill=dark)
    d.line([tuple(lm[4]), tuple(lm[5])], fill=dark, width=line_w)
    d.line([tuple(lm[6]), tuple(lm[7])], fill=dark, width=line_w)
    if g["mouth_open"] > 0:
        left, right = lm[8], lm[9]
        d.ellipse([left[0], lm[10][1], right[0], lm[11][1]], fill=dark)
    else:
        left, right, mid = lm[8], lm[9], lm[12]
        t = np.linspace(-1.0, 1.0, 33)
        xs = mid[0] + t * (right[0] - left[0]) / 2
        ys = left[1] + (mid[1] - left[1]) * (1 - t * t)
        d.line(list(zip(xs.tolist(), ys.tolist())), fill=dark, width=line_w, joint="curve")
    img = img.resize((size, size), Image.BOX)
    return np.asarray(img, dtype=np.float64) / 255.0


def generate_synthetic_dataset(params: SyntheticFaceParams, seed: int, out_dir,
                               train_fraction: float = 0.8) -> DatasetManifest:
    params.validate()
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "landmarks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot write to {root}: {exc}") from exc
    n_classes = len(params.classes)
    records = []
    for i in range(params.samples_per_class * n_classes):
        label = i % n_classes
        rng = np.random.Generator(np.random.PCG64([seed, i]))
        g = sample_geometry(params, label, rng)
        face = render_face(g, params.image_size, params.supersample)
        if params.noise > 0:
            face = face + rng.standard_normal(face.shape) * params.noise
        pix = np.floor(np.clip(face, 0, 1) * 255 + 0.5).astype(np.uint8)
        rid = f"s{i:05d}"
        img_rel, lm_rel = f"images/{rid}.png", f"landmarks/{rid}.txt"
        Image.fromarray(np.repeat(pix[..., None], 3, axis=2), mode="RGB").save(root / img_rel)
        write_landmarks(root / lm_rel, face_landmarks(g, params.image_size),
                        INNER_LEFT, INNER_RIGHT)
        records.append(Record(rid, img_rel, lm_rel, label))
    m = DatasetManifest(root, list(params.classes), records, seed, train_fraction)
    write_manifest(m)
    logger.info("wrote %d synthetic samples to %s", len(records), root)
    return m
