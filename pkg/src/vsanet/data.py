"""Manifests, image loading, and the procedural paired-spectrum corpus."""

from __future__ import annotations

import csv
import os
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

MANIFEST_HEADER = ("path", "subject_id", "spectrum", "yaw", "expression", "scene", "split", "gallery")
SPECTRA = ("NIR", "VIS")
EXPRESSIONS = ("neutral", "eyes_closed", "smile")
SCENES = ("indoor_natural", "indoor_strong", "indoor_dim", "outdoor_natural", "outdoor_backlight")
SPLITS = ("train", "test")
YAWS = (-45.0, 0.0, 45.0)


class ManifestError(ValueError):
    """Invalid manifest contents; message lists offending rows."""


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class FaceRecord:
    path: str
    subject_id: str
    spectrum: str
    yaw: float
    expression: str
    scene: str
    split: str
    gallery: bool
    row: int = 0

    @property
    def frontal(self) -> bool:
        return self.yaw == 0.0


@dataclass(frozen=True)
class Manifest:
    records: tuple[FaceRecord, ...]
    root: Path = Path(".")

    def __len__(self):
        return len(self.records)

    def select(self, *, split=None, spectrum=None, gallery=None, subject_id=None) -> list[FaceRecord]:
        out = []
        for r in self.records:
            if split is not None and r.split != split:
                continue
            if spectrum is not None and r.spectrum != spectrum:
                continue
            if gallery is not None and r.gallery != gallery:
                continue
            if subject_id is not None and r.subject_id != subject_id:
                continue
            out.append(r)
        return out

    def subjects(self, split: str) -> list[str]:
        return sorted({r.subject_id for r in self.records if r.split == split})

    def counts(self) -> dict[str, int]:
        c: dict[str, int] = defaultdict(int)
        for r in self.records:
            c[f"{r.split}/{r.spectrum}"] += 1
        return dict(c)

    def resolve(self, record: FaceRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def validate_records(records) -> None:
    errors = []
    gallery_rows = defaultdict(list)
    split_of = defaultdict(set)
    for r in records:
        split_of[r.subject_id].add((r.split, r.row))
        if r.gallery:
            gallery_rows[r.subject_id].append(r.row)
            if not (r.spectrum == "VIS" and r.yaw == 0.0 and r.expression == "neutral" and r.split == "test"):
                errors.append(f"row {r.row}: gallery record must be a frontal neutral VIS test image")
    for subject, rows in sorted(gallery_rows.items()):
        if len(rows) > 1:
            errors.append(f"subject {subject}: duplicate gallery records at rows {', '.join(map(str, rows))}")
    for subject, entries in sorted(split_of.items()):
        splits = {s for s, _ in entries}
        if len(splits) > 1:
            rows = sorted(row for s, row in entries if s == "test")
            errors.append(f"subject {subject}: appears in both train and test (test rows {rows[:5]})")
        elif splits == {"test"} and subject not in gallery_rows:
            errors.append(f"subject {subject}: test subject without a gallery record")
    if errors:
        raise ManifestError("; ".join(errors))


def load_manifest(path: str | os.PathLike) -> Manifest:
    """Parse and validate a manifest CSV. Relative image paths resolve against its directory."""
    path = Path(path)
    records = []
    errors = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                errors.append(f"row {row_no}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
                continue
            p, subject, spectrum, yaw, expression, scene, split, gallery = (v.strip() for v in row)
            try:
                yaw_v = float(yaw)
                gal = _parse_bool(gallery)
            except ValueError as exc:
                errors.append(f"row {row_no}: {exc}")
                continue
            if spectrum not in SPECTRA:
                errors.append(f"row {row_no}: spectrum {spectrum!r} not in {SPECTRA}")
            if not -45.0 <= yaw_v <= 45.0:
                errors.append(f"row {row_no}: yaw {yaw_v} outside [-45, 45]")
            if expression not in EXPRESSIONS:
                errors.append(f"row {row_no}: expression {expression!r} not in {EXPRESSIONS}")
            if scene not in SCENES:
                errors.append(f"row {row_no}: scene {scene!r} not in {SCENES}")
            if split not in SPLITS:
                errors.append(f"row {row_no}: split {split!r} not in {SPLITS}")
            if not subject:
                errors.append(f"row {row_no}: empty subject_id")
            records.append(FaceRecord(p, subject, spectrum, yaw_v, expression, scene, split, gal, row_no))
    if errors:
        raise ManifestError("; ".join(errors))
    validate_records(records)
    return Manifest(tuple(records), path.parent)


def write_manifest(path: str | os.PathLike, records) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            w.writerow([r.path, r.subject_id, r.spectrum, f"{r.yaw:g}", r.expression, r.scene, r.split,
                        "true" if r.gallery else "false"])
    return path


def load_image(path: str | os.PathLike, image_size: int) -> torch.Tensor:
    """Center-crop to square, resize, scale to [0, 1]; grayscale becomes 3 identical channels."""
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("L", "I", "I;16", "F", "1"):
                im = im.convert("L")
            else:
                im = im.convert("RGB")
            w, h = im.size
            side = min(w, h)
            left, top = (w - side) // 2, (h - side) // 2
            im = im.crop((left, top, left + side, top + side))
            if side != image_size:
                im = im.resize((image_size, image_size), PILImage.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = np.repeat(arr[None], 3, axis=0)
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(np.clip(arr, 0.0, 1.0).copy())


class FaceDataset:
    """Manifest plus a lazily filled in-memory image cache."""

    def __init__(self, manifest: Manifest, image_size: int):
        self.manifest = manifest
        self.image_size = image_size
        self._cache: dict[str, torch.Tensor] = {}

    def image(self, record: FaceRecord) -> torch.Tensor:
        img = self._cache.get(record.path)
        if img is None:
            img = load_image(self.manifest.resolve(record), self.image_size)
            self._cache[record.path] = img
        return img

    def stack(self, records) -> torch.Tensor:
        return torch.stack([self.image(r) for r in records])

    def match_record(self, subject_id: str, split: str = "train") -> FaceRecord:
        """Frontal VIS image of ``subject_id``, neutral if available."""
        cands = [r for r in self.manifest.select(split=split, spectrum="VIS", subject_id=subject_id)
                 if r.frontal]
        if not cands:
            raise DataError(f"no frontal VIS match image for subject {subject_id!r}")
        neutral = [r for r in cands if r.expression == "neutral"]
        return (neutral or cands)[0]


# ---------------------------------------------------------------------------
# procedural corpus

# NIR luminance weights: red reflects strongly, blue barely
NIR_WEIGHTS = np.array([0.55, 0.35, 0.10])
SCENE_GAIN = {
    # (face gain, background gain, vertical gradient)
    "indoor_natural": (1.0, 1.0, 0.0),
    "indoor_strong": (1.25, 1.15, 0.0),
    "indoor_dim": (0.55, 0.6, 0.0),
    "outdoor_natural": (1.05, 1.1, 0.25),
    "outdoor_backlight": (0.6, 1.35, 0.0),
}
REGIONS = ("background", "skin", "hair", "eyes", "mouth", "marker")
MIN_NIR_GAP = 0.15
# region pairs that can share a boundary
ADJACENT = ((0, 1), (0, 2), (1, 2), (1, 3), (1, 4), (1, 5), (2, 3))
SUPERSAMPLE = 4


def nir_level(color: np.ndarray) -> np.ndarray:
    lum = color @ NIR_WEIGHTS
    return 0.1 + 0.85 * np.power(np.clip(lum, 0.0, 1.0), 0.7)


@dataclass(frozen=True)
class SubjectParams:
    face_center: tuple[float, float]
    face_radii: tuple[float, float]
    eye_y: float
    eye_sep: float
    eye_radius: float
    mouth_y: float
    mouth_size: tuple[float, float]
    hair_height: float
    marker: tuple[float, float, float, int]  # x, y, size, kind (0 disc, 1 square)
    palette: np.ndarray  # [len(REGIONS), 3]


def _region_gains(scene: str, spectrum: str) -> np.ndarray:
    """Per-region brightness gain of a scene, ignoring the vertical gradient."""
    face_gain, bg_gain, _ = SCENE_GAIN[scene]
    gains = np.full(len(REGIONS), float(face_gain))
    gains[0] = bg_gain
    if spectrum == "NIR":
        gains = 1.0 + 0.3 * (gains - 1.0)
    return gains


def _palette_ok(palettes: np.ndarray) -> np.ndarray:
    """Adjacent regions stay distinguishable in both spectra under every scene gain."""
    a, b = np.array(ADJACENT).T
    levels = nir_level(palettes)
    ok = np.ones(len(palettes), dtype=bool)
    for scene in SCENES:
        nir = levels * _region_gains(scene, "NIR")
        ok &= (np.abs(nir[:, a] - nir[:, b]) >= MIN_NIR_GAP).all(axis=1)
        vis = np.clip(palettes * _region_gains(scene, "VIS")[:, None], 0.0, 1.0)
        ok &= (np.abs(vis[:, a] - vis[:, b]).max(axis=-1) >= MIN_NIR_GAP).all(axis=1)
    return ok


def sample_subject(rng: np.random.Generator) -> SubjectParams:
    while True:
        palettes = rng.uniform(0.05, 0.95, size=(64, len(REGIONS), 3))
        ok = np.flatnonzero(_palette_ok(palettes))
        if ok.size:
            palette = palettes[ok[0]]
            break
    angle = rng.uniform(0, 2 * np.pi)
    radius = rng.uniform(0.05, 0.15)
    return SubjectParams(
        face_center=(0.5 + rng.uniform(-0.03, 0.03), 0.53 + rng.uniform(-0.03, 0.03)),
        face_radii=(rng.uniform(0.26, 0.34), rng.uniform(0.33, 0.41)),
        eye_y=rng.uniform(0.40, 0.47),
        eye_sep=rng.uniform(0.09, 0.15),
        eye_radius=rng.uniform(0.035, 0.06),
        mouth_y=rng.uniform(0.64, 0.72),
        mouth_size=(rng.uniform(0.07, 0.14), rng.uniform(0.02, 0.045)),
        hair_height=rng.uniform(0.05, 0.16),
        marker=(0.5 + radius * np.cos(angle), 0.55 + radius * np.sin(angle) * 0.6,
                rng.uniform(0.03, 0.06), int(rng.integers(0, 2))),
        palette=palette,
    )


def render_labels(params: SubjectParams, size: int, yaw: float, expression: str) -> np.ndarray:
    """Region label map at ``size * SUPERSAMPLE`` resolution."""
    n = size * SUPERSAMPLE
    v, u = np.mgrid[0:n, 0:n]
    u = (u + 0.5) / n
    v = (v + 0.5) / n
    cx, cy = params.face_center
    t = np.deg2rad(yaw)
    # yaw: horizontal foreshortening, lateral shift, and a shear of the face plane
    squeeze = 0.65 + 0.35 * np.cos(t)
    x = cx + (u - cx - 0.12 * np.sin(t)) / squeeze + 0.3 * np.sin(t) * (v - cy)
    y = v
    labels = np.zeros((n, n), dtype=np.uint8)
    rx, ry = params.face_radii
    face = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1.0
    labels[face] = 1
    hair = face & (y < cy - ry + params.hair_height)
    labels[hair] = 2
    eye_r = params.eye_radius
    eye_ry = eye_r * (0.2 if expression == "eyes_closed" else 1.0)
    for side in (-1, 1):
        ex = cx + side * params.eye_sep
        eye = ((x - ex) / eye_r) ** 2 + ((y - params.eye_y) / eye_ry) ** 2 <= 1.0
        labels[eye & face] = 3
    mw, mh = params.mouth_size
    if expression == "smile":
        mw, mh = mw * 1.3, mh * 1.6
        # curve: mouth band bends upward at the corners
        my = params.mouth_y - 2.5 * (x - cx) ** 2 / max(mw, 1e-6) * mh
    else:
        my = params.mouth_y
    mouth = ((x - cx) / mw) ** 2 + ((y - my) / mh) ** 2 <= 1.0
    labels[mouth & face] = 4
    mx, my_, ms, kind = params.marker
    if kind == 0:
        marker = ((x - mx) ** 2 + (y - my_) ** 2) <= ms**2
    else:
        marker = (np.abs(x - mx) <= ms) & (np.abs(y - my_) <= ms)
    labels[marker & face & (labels == 1)] = 5
    return labels


def _downsample(arr: np.ndarray) -> np.ndarray:
    n = arr.shape[0] // SUPERSAMPLE
    return arr.reshape(n, SUPERSAMPLE, n, SUPERSAMPLE, *arr.shape[2:]).mean(axis=(1, 3))


def render_face(params: SubjectParams, spectrum: str, yaw: float, expression: str, scene: str,
                size: int, rng: np.random.Generator) -> np.ndarray:
    """Float image in [0, 1]: ``[size, size, 3]`` for VIS, ``[size, size]`` for NIR."""
    labels = render_labels(params, size, yaw, expression)
    face_gain, bg_gain, gradient = SCENE_GAIN[scene]
    n = labels.shape[0]
    vert = 1.0 + gradient * (0.5 - (np.arange(n) + 0.5) / n)[:, None]
    is_face = labels > 0
    if spectrum == "VIS":
        gain = np.where(is_face, face_gain, bg_gain) * vert
        img = params.palette[labels] * gain[..., None]
        img = _downsample(img)
    elif spectrum == "NIR":
        # active NIR illumination flattens the scene lighting
        gain = 1.0 + 0.3 * (np.where(is_face, face_gain, bg_gain) * vert - 1.0)
        img = nir_level(params.palette)[labels] * gain
        img = _downsample(img)
        img = img + rng.normal(0.0, 0.01, size=img.shape)
    else:
        raise ValueError(f"unknown spectrum {spectrum!r}")
    return np.clip(img, 0.0, 1.0)


def _to_png(img: np.ndarray, path: Path) -> None:
    arr = np.round(img * 255.0).astype(np.uint8)
    PILImage.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB").save(path, format="PNG")


def _capture_plan(per_subject: int, rng: np.random.Generator):
    """(spectrum, yaw, expression, scene) per image; image 0 is always frontal neutral VIS."""
    plan = [("VIS", 0.0, "neutral", SCENES[0])]
    for i in range(1, per_subject):
        spectrum = "NIR" if i % 2 else "VIS"
        plan.append((spectrum, float(rng.choice(YAWS)), EXPRESSIONS[(i // 2) % 3], SCENES[i % 5]))
    return plan


def synth_corpus(n_subjects: int, per_subject: int, seed: int, image_size: int,
                 out_dir: str | os.PathLike, test_fraction: float = 0.5):
    """Render a procedural corpus and its manifest under ``out_dir``.

    Returns ``(manifest_path, Manifest)``. Output files are a pure function of
    the arguments.
    """
    if n_subjects < 2:
        raise ValueError("n_subjects must be >= 2")
    if per_subject < 2:
        raise ValueError("per_subject must be >= 2 (one gallery VIS plus at least one NIR)")
    if image_size < 8:
        raise ValueError("image_size must be >= 8")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    subjects = [f"s{i:04d}" for i in range(n_subjects)]
    n_test = min(n_subjects - 1, max(1, int(round(n_subjects * test_fraction))))
    order = rng.permutation(n_subjects)
    test_set = {subjects[i] for i in order[:n_test]}
    records = []
    for subject in subjects:
        params = sample_subject(rng)
        split = "test" if subject in test_set else "train"
        for k, (spectrum, yaw, expression, scene) in enumerate(_capture_plan(per_subject, rng)):
            img = render_face(params, spectrum, yaw, expression, scene, image_size, rng)
            rel = f"images/{subject}_{k:02d}_{spectrum.lower()}.png"
            _to_png(img, out / rel)
            gallery = split == "test" and k == 0
            records.append(FaceRecord(rel, subject, spectrum, yaw, expression, scene, split, gallery))
    manifest_path = write_manifest(out / "manifest.csv", records)
    return manifest_path, load_manifest(manifest_path)
