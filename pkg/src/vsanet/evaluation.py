"""Gallery/probe recognition protocol: rank-1 accuracy and verification rate at fixed FAR."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from vsanet.data import FaceDataset, Manifest

FAR_POINTS = {"vr_far_1e-2": 1e-2, "vr_far_1e-3": 1e-3}


class ProtocolError(ValueError):
    pass


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # [n_probe, n_gallery]
    probe_ids: np.ndarray
    gallery_ids: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.probe_ids = np.asarray(self.probe_ids)
        self.gallery_ids = np.asarray(self.gallery_ids)
        if self.scores.shape != (len(self.probe_ids), len(self.gallery_ids)):
            raise ValueError(
                f"scores shape {self.scores.shape} does not match "
                f"{len(self.probe_ids)} probes x {len(self.gallery_ids)} gallery"
            )
        if len(set(self.gallery_ids.tolist())) != len(self.gallery_ids):
            raise ValueError("gallery subject ids must be distinct")

    def genuine_impostor(self) -> tuple[np.ndarray, np.ndarray]:
        same = self.probe_ids[:, None] == self.gallery_ids[None, :]
        return self.scores[same], self.scores[~same]


@torch.no_grad()
def embed_set(embedder, images, batch_size: int = 64) -> np.ndarray:
    """Unit-norm embeddings, one row per image."""
    if isinstance(images, torch.Tensor):
        chunks = images.split(batch_size)
    else:
        images = list(images)
        chunks = [torch.stack(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    rows = [embedder.embed(c).double() for c in chunks]
    if not rows:
        return np.zeros((0, 0))
    emb = torch.cat(rows)
    emb = emb / emb.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return emb.numpy()


def cosine_scores(probe_emb: np.ndarray, gallery_emb: np.ndarray) -> np.ndarray:
    p = probe_emb / np.linalg.norm(probe_emb, axis=1, keepdims=True)
    g = gallery_emb / np.linalg.norm(gallery_emb, axis=1, keepdims=True)
    return p @ g.T


def rank1(sm: ScoreMatrix) -> float:
    """Fraction of probes whose best gallery match has their subject id.

    Ties go to the lowest gallery index.
    """
    if sm.scores.size == 0:
        raise ValueError("empty score matrix")
    best = np.argmax(sm.scores, axis=1)
    return float(np.mean(sm.gallery_ids[best] == sm.probe_ids))


def far_threshold(impostor: np.ndarray, far: float) -> float:
    """Smallest impostor score ``t`` with ``mean(impostor >= t) <= far``.

    If no impostor score qualifies, the threshold sits just above the largest one.
    """
    imp = np.sort(np.asarray(impostor, dtype=np.float64))
    n = imp.size
    values = np.unique(imp)
    # count of impostors >= v for each distinct v
    above = n - np.searchsorted(imp, values, side="left")
    ok = np.flatnonzero(above / n <= far)
    if ok.size:
        return float(values[ok[0]])
    return float(np.nextafter(imp[-1], np.inf))


def vr_at_far(genuine, impostor, far: float) -> float:
    genuine = np.asarray(genuine, dtype=np.float64).ravel()
    impostor = np.asarray(impostor, dtype=np.float64).ravel()
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("genuine and impostor scores must be nonempty")
    if not 0.0 < far < 1.0:
        raise ValueError(f"far must lie in (0, 1), got {far}")
    t = far_threshold(impostor, far)
    return float(np.mean(genuine >= t))


def metrics(sm: ScoreMatrix) -> dict[str, float]:
    genuine, impostor = sm.genuine_impostor()
    out = {"rank1": rank1(sm)}
    for key, far in FAR_POINTS.items():
        out[key] = vr_at_far(genuine, impostor, far)
    return out


def write_scores_csv(path: str | os.PathLike, sm: ScoreMatrix) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["probe_subject", *sm.gallery_ids.tolist()])
        for pid, row in zip(sm.probe_ids.tolist(), sm.scores):
            w.writerow([pid, *(f"{v:.9g}" for v in row)])
    return path


def protocol_sets(manifest: Manifest):
    gallery = manifest.select(split="test", spectrum="VIS", gallery=True)
    probes = manifest.select(split="test", spectrum="NIR")
    if not gallery:
        raise ProtocolError("manifest has no gallery records in the test split")
    if not probes:
        raise ProtocolError("manifest has no NIR probe records in the test split")
    enrolled = {r.subject_id for r in gallery}
    missing = sorted({r.subject_id for r in probes} - enrolled)
    if missing:
        raise ProtocolError(f"probe subjects absent from gallery: {', '.join(missing[:10])}")
    return gallery, probes


def run_protocol(manifest: Manifest, embedder, image_size: int,
                 translate: Callable[[torch.Tensor], torch.Tensor] | None = None,
                 score_dump: str | os.PathLike | None = None,
                 score_sink: dict[str, ScoreMatrix] | None = None) -> dict:
    """Score raw NIR probes (and translated ones if ``translate`` is given) against the gallery.

    ``translate`` maps a batch of NIR images to VIS images. If ``score_sink`` is given the
    score matrix of each mode is stored in it under the mode name.
    """
    gallery, probes = protocol_sets(manifest)
    data = FaceDataset(manifest, image_size)
    gal_emb = embed_set(embedder, data.stack(gallery))
    gal_ids = [r.subject_id for r in gallery]
    probe_ids = [r.subject_id for r in probes]
    nir = data.stack(probes)
    report: dict = {}
    modes: list[tuple[str, torch.Tensor]] = [("raw_nir", nir)]
    if translate is not None:
        with torch.no_grad():
            modes.append(("translated", torch.cat([translate(b) for b in nir.split(32)])))
    for name, imgs in modes:
        sm = ScoreMatrix(cosine_scores(embed_set(embedder, imgs), gal_emb), probe_ids, gal_ids)
        report[name] = metrics(sm)
        if score_sink is not None:
            score_sink[name] = sm
        if score_dump is not None:
            dump = Path(score_dump)
            write_scores_csv(dump.with_name(f"{dump.stem}_{name}{dump.suffix or '.csv'}"), sm)
    report["n_probe"] = len(probes)
    report["n_gallery"] = len(gallery)
    return report


class OracleEmbedder:
    """Maps each image to a one-hot code of its known subject; for protocol tests."""

    def __init__(self, lookup: Callable[[torch.Tensor], int], dim: int):
        self.lookup = lookup
        self.dim = dim

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        out = torch.zeros(x.shape[0], self.dim)
        for i, img in enumerate(x):
            out[i, self.lookup(img)] = 1.0
        return out


def report_schema() -> dict:
    """JSON schema of the protocol report."""
    block = {
        "type": "object",
        "properties": {k: {"type": "number", "minimum": 0, "maximum": 1}
                       for k in ("rank1", *FAR_POINTS)},
        "required": ["rank1", *FAR_POINTS],
        "additionalProperties": False,
    }
    return {
        "type": "object",
        "properties": {
            "raw_nir": block,
            "translated": block,
            "n_probe": {"type": "integer", "minimum": 1},
            "n_gallery": {"type": "integer", "minimum": 1},
        },
        "required": ["raw_nir", "n_probe", "n_gallery"],
        "additionalProperties": False,
    }
