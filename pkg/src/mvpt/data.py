"""Synthetic correlated two-view dataset, PGM image I/O, orientation
normalization, augmentation, and stratified subject-level splitting.

The generator stands in for restricted clinical data. Each subject has a
latent class c in {0,1,2} and a latent nuisance s with P(s) = (0.66, 0.17,
0.17). The MLO view renders a blob whose radius bin is (c + s) mod 3; the CC
view renders a bar whose folded-orientation bin is (c + 2s) mod 3. Either cue
alone caps Bayes accuracy at 0.66; both together recover c exactly via
c = 2 * (bin_a + bin_b) mod 3. Orientation bins are 0/45/90 degrees of the
*folded* angle min(theta, 180-theta), which is invariant under the horizontal
and vertical flips used by orientation normalization and augmentation.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

S_PROBS = (0.66, 0.17, 0.17)
RADIUS_SIGMAS = (2.0, 3.5, 5.5)      # blob radius bins for the MLO cue
ANGLE_BINS = (0.0, 45.0, 90.0)       # folded bar orientation bins for the CC cue
TERNARY_CLASSES = ("benign", "dcis", "invasive")
BINARY_CLASSES = ("benign", "malignant")


class DataError(RuntimeError):
    """Malformed image file or manifest."""


class SplitError(ValueError):
    """Not enough subjects per class for the requested split."""


# ---- PGM I/O -----------------------------------------------------------------


def write_pgm(path, image):
    """Write a float [0,1] image as binary 8-bit PGM (P5)."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    arr = np.rint(arr * 255.0).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_pgm(path):
    """Read a binary P5 PGM into a float array in [0,1]."""
    with open(path, "rb") as f:
        data = f.read()
    try:
        fields = []
        pos = 0
        while len(fields) < 4:
            while pos < len(data) and data[pos:pos + 1].isspace():
                pos += 1
            if data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos] != 0x0A:
                    pos += 1
                continue
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            fields.append(data[start:pos])
        if fields[0] != b"P5":
            raise DataError(f"{path}: not a binary PGM (P5)")
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
        pos += 1
        pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    except (ValueError, IndexError) as e:
        raise DataError(f"{path}: malformed PGM header ({e})") from e
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    if pixels.size != w * h:
        raise DataError(f"{path}: truncated pixel payload")
    return pixels.reshape(h, w).astype(np.float64) / 255.0


def load_image(path, image_size=None):
    """Image tensor in [0,1], bilinearly resized to image_size if needed."""
    img = read_pgm(path)
    if image_size is not None and img.shape != (image_size, image_size):
        zoom = (image_size / img.shape[0], image_size / img.shape[1])
        img = ndimage.zoom(img, zoom, order=1)
        img = np.clip(img, 0.0, 1.0)
    return img


# ---- orientation & augmentation ---------------------------------------------


def orient_normalize(image):
    """Horizontally flip iff the right half carries more intensity mass; ties
    keep the original. Idempotent."""
    w = image.shape[1]
    half = w // 2
    left = image[:, :half].sum()
    right = image[:, w - half:].sum()
    if right > left:
        return image[:, ::-1].copy()
    return image


@dataclass
class AugmentParams:
    flip: bool = False
    angle: float = 0.0    # degrees
    tx: float = 0.0       # pixels
    ty: float = 0.0
    scale: float = 1.0

    @classmethod
    def sample(cls, rng, size):
        return cls(
            flip=bool(rng.random() < 0.5),
            angle=float(rng.uniform(-10.0, 10.0)),
            tx=float(rng.uniform(-0.05, 0.05) * size),
            ty=float(rng.uniform(-0.05, 0.05) * size),
            scale=float(rng.uniform(0.95, 1.05)),
        )


def augment(image, rng=None, params=None):
    """Random vertical flip plus a small affine (rotation, translation,
    scale), bilinear resampling with zero fill."""
    if params is None:
        params = AugmentParams.sample(rng, image.shape[0])
    out = image
    if params.flip:
        out = out[::-1, :]
    identity = (not params.flip and params.angle == 0.0 and params.tx == 0.0
                and params.ty == 0.0 and params.scale == 1.0)
    if identity:
        return np.ascontiguousarray(out)
    theta = math.radians(params.angle)
    c, s = math.cos(theta), math.sin(theta)
    # inverse map: output -> input, rotation+scale about the image center
    m = np.array([[c, -s], [s, c]]) / params.scale
    center = (np.asarray(out.shape) - 1) / 2.0
    offset = center - m @ (center + np.array([params.ty, params.tx]))
    out = ndimage.affine_transform(out, m, offset=offset, order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


# ---- synthetic generator -----------------------------------------------------


@dataclass
class StudyRecord:
    subject_id: str
    mlo_path: str
    cc_path: str
    label: int


@dataclass
class Latent:
    subject_id: str
    c3: int       # ternary class
    s: int        # shared nuisance
    digit_a: int  # MLO radius bin
    digit_b: int  # CC folded-orientation bin


def _soft_disk(size, cy, cx, sigma, amp):
    yy, xx = np.mgrid[0:size, 0:size]
    return amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))


def _bar(size, cy, cx, theta_deg, length, width, amp):
    yy, xx = np.mgrid[0:size, 0:size]
    t = math.radians(theta_deg)
    dx, dy = math.cos(t), -math.sin(t)   # image rows grow downward
    rx, ry = xx - cx, yy - cy
    along = rx * dx + ry * dy
    across = -rx * dy + ry * dx
    prof = np.exp(-(across ** 2) / (2.0 * width ** 2))
    prof *= np.clip((length / 2.0 + 1.0 - np.abs(along)), 0.0, 1.0)
    return amp * prof


def _render_view(size, rng, cue_kind, digit, side):
    """One synthetic view: tissue mass on `side`, the class cue, nuisance
    blobs, and additive noise."""
    img = np.zeros((size, size))
    cx_tissue = size * (0.28 if side == "left" else 0.72)
    img += _soft_disk(size, size * 0.5 + rng.uniform(-4, 4),
                      cx_tissue + rng.uniform(-3, 3), size * 0.30, 0.25)
    cy = size * 0.5 + rng.uniform(-0.12, 0.12) * size
    cx = cx_tissue + rng.uniform(-0.10, 0.10) * size
    if cue_kind == "blob":
        img += _soft_disk(size, cy, cx, RADIUS_SIGMAS[digit], 0.75)
    else:
        theta = ANGLE_BINS[digit] + rng.uniform(-8.0, 8.0)
        img += _bar(size, cy, cx, theta, length=size * 0.38, width=1.6, amp=0.75)
    for _ in range(2):
        img += _soft_disk(size, rng.uniform(0, size), rng.uniform(0, size),
                          1.1, 0.30)
    img += rng.normal(0.0, 0.02, size=(size, size))
    return np.clip(img, 0.0, 1.0)


def synth_generate(n_subjects, scheme, seed, out_dir, image_size=64):
    """Write a synthetic two-view dataset: PGM images, `manifest.csv`, and
    `latents.json`. Returns (manifest_path, records, latents)."""
    if scheme not in ("binary", "ternary"):
        raise ValueError(f"unknown label scheme {scheme!r}")
    if n_subjects < 30:
        raise ValueError("need at least 10 subjects per class")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    img_dir = out / "images"
    img_dir.mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)
    classes = np.arange(n_subjects) % 3
    rng.shuffle(classes)
    records = []
    latents = []
    for i, c3 in enumerate(classes):
        c3 = int(c3)
        sid = f"subj{i:05d}"
        s = int(rng.choice(3, p=S_PROBS))
        digit_a = (c3 + s) % 3
        digit_b = (c3 + 2 * s) % 3
        side_a = "left" if rng.random() < 0.5 else "right"
        side_b = "left" if rng.random() < 0.5 else "right"
        mlo = _render_view(image_size, rng, "blob", digit_a, side_a)
        cc = _render_view(image_size, rng, "bar", digit_b, side_b)
        mlo_path = img_dir / f"{sid}_mlo.pgm"
        cc_path = img_dir / f"{sid}_cc.pgm"
        write_pgm(mlo_path, mlo)
        write_pgm(cc_path, cc)
        label = c3 if scheme == "ternary" else min(c3, 1)
        records.append(StudyRecord(sid, f"images/{sid}_mlo.pgm",
                                   f"images/{sid}_cc.pgm", label))
        latents.append(Latent(sid, c3, s, digit_a, digit_b))
    manifest_path = out / "manifest.csv"
    write_manifest(manifest_path, records)
    with open(out / "latents.json", "w") as f:
        json.dump([vars(l) for l in latents], f, indent=0, sort_keys=True)
    return manifest_path, records, latents


def write_manifest(path, records):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["subject_id", "mlo", "cc", "label"])
        for r in records:
            w.writerow([r.subject_id, r.mlo_path, r.cc_path, r.label])


def read_manifest(path):
    path = Path(path)
    records = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["subject_id", "mlo", "cc", "label"]:
            raise DataError(f"{path}: unexpected manifest header {reader.fieldnames}")
        for row in reader:
            records.append(StudyRecord(row["subject_id"], row["mlo"],
                                       row["cc"], int(row["label"])))
    return records


def load_pairs(manifest_path, image_size=64, normalize_orientation=True):
    """Load every study into memory: (mlo [N,S,S], cc [N,S,S], labels [N], ids)."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    records = read_manifest(manifest_path)
    mlo = np.empty((len(records), image_size, image_size))
    cc = np.empty_like(mlo)
    labels = np.empty(len(records), dtype=np.int64)
    ids = []
    for i, r in enumerate(records):
        a = load_image(base / r.mlo_path, image_size)
        b = load_image(base / r.cc_path, image_size)
        if normalize_orientation:
            a = orient_normalize(a)
            b = orient_normalize(b)
        mlo[i] = a
        cc[i] = b
        labels[i] = r.label
        ids.append(r.subject_id)
    return mlo, cc, labels, ids


# ---- latent-cue oracles (generator self-checks) ------------------------------


def oracle_joint(digit_a, digit_b):
    """Exact class from both cues: c = 2*(a+b) mod 3."""
    return (2 * (np.asarray(digit_a) + np.asarray(digit_b))) % 3


def oracle_single(digit, which):
    """Bayes-optimal class guess from one cue alone under the known noise
    model: the most likely nuisance is s = 0, so guess c = digit."""
    del which  # identical decision rule for both cues
    return np.asarray(digit) % 3


# ---- stratified splitting ----------------------------------------------------


@dataclass
class SplitPlan:
    test_ids: list = field(default_factory=list)
    fold_of: dict = field(default_factory=dict)  # train subject_id -> fold index
    k: int = 5

    @property
    def train_ids(self):
        return sorted(self.fold_of)

    def fold_train_ids(self, fold):
        return sorted(sid for sid, f in self.fold_of.items() if f != fold)

    def fold_val_ids(self, fold):
        return sorted(sid for sid, f in self.fold_of.items() if f == fold)

    def save(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["subject_id", "split", "fold"])
            for sid in sorted(self.test_ids):
                w.writerow([sid, "test", -1])
            for sid in sorted(self.fold_of):
                w.writerow([sid, "train", self.fold_of[sid]])

    @classmethod
    def load(cls, path):
        plan = cls()
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            folds = set()
            for row in reader:
                if row["split"] == "test":
                    plan.test_ids.append(row["subject_id"])
                else:
                    fold = int(row["fold"])
                    plan.fold_of[row["subject_id"]] = fold
                    folds.add(fold)
        plan.k = len(folds) if folds else 0
        return plan


def split(records, seed, k=5, test_frac=0.2):
    """Stratified 80/20 + k folds at subject granularity, deterministic under
    `seed` and invariant to the manifest's row order."""
    rng = np.random.default_rng(seed)
    by_class = {}
    for r in sorted(records, key=lambda r: r.subject_id):
        by_class.setdefault(r.label, []).append(r.subject_id)
    for label, ids in by_class.items():
        if len(ids) < k:
            raise SplitError(f"class {label} has {len(ids)} subjects, fewer than k={k}")
    n_total = sum(len(v) for v in by_class.values())
    target_test = int(round(n_total * test_frac))
    # largest-remainder apportionment of the test quota across classes
    quotas = {lab: len(ids) * test_frac for lab, ids in by_class.items()}
    n_test = {lab: int(q) for lab, q in quotas.items()}
    remainders = sorted(quotas, key=lambda lab: quotas[lab] - n_test[lab], reverse=True)
    i = 0
    while sum(n_test.values()) < target_test:
        n_test[remainders[i % len(remainders)]] += 1
        i += 1
    plan = SplitPlan(k=k)
    for label in sorted(by_class):
        ids = list(by_class[label])
        rng.shuffle(ids)
        nt = n_test[label]
        plan.test_ids.extend(ids[:nt])
        for j, sid in enumerate(ids[nt:]):
            plan.fold_of[sid] = j % k
    return plan
