"""Two-stage optimization: SVAE on VIS images, then CSU + attention + discriminator."""

from __future__ import annotations

import json
import logging
import math
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import torch
from torch import nn

from vsanet.checkpoint import load_into, module_tensors, read_checkpoint, write_checkpoint
from vsanet.core import TrainConfig, config_from_dict, seed_all
from vsanet.csu_gan import CsuModel, Discriminator
from vsanet.data import DataError, FaceDataset
from vsanet.losses import (
    StandInEmbedder,
    content_loss,
    discriminator_loss,
    freeze,
    generator_adv_loss,
    id_loss,
    standin_backbone,
    style_loss,
    total_loss,
)
from vsanet.svae import LatentStats, SvaeModel, kl_divergence, reparameterize

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimizerState:
    lr: float
    beta1: float
    beta2: float
    eps: float = 1e-8
    step: int = 0
    exp_avg: list[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: list[torch.Tensor] = field(default_factory=list)


def adam_step(state: OptimizerState, params: list[torch.Tensor], grads: list[torch.Tensor]) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    if len(grads) != len(params):
        raise ValueError("params and grads differ in length")
    for g in grads:
        if not torch.isfinite(g).all():
            raise TrainingError("non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / c1)


class Adam:
    """Adam over a fixed parameter list; missing gradients count as zero."""

    def __init__(self, params: Iterable[nn.Parameter], config: TrainConfig):
        self.params = [p for p in params if p.requires_grad]
        self.state = OptimizerState(config.lr, config.beta1, config.beta2)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        adam_step(self.state, self.params, grads)


# ---------------------------------------------------------------------------
# checkpoints

def generator_tensors(csu: CsuModel) -> dict[str, torch.Tensor]:
    out = {}
    for k, v in csu.state_dict().items():
        out[k if k.startswith("sca.") else f"csu.{k}"] = v
    return out


def _load_csu(csu: CsuModel, tensors: dict[str, torch.Tensor]) -> None:
    remapped = {}
    for k, v in tensors.items():
        if k.startswith("sca."):
            remapped[f"csu.{k}"] = v
        elif k.startswith("csu."):
            remapped[k] = v
    load_into(csu, "csu", remapped)


def save_svae(path, svae: SvaeModel, config: TrainConfig, iteration: int) -> Path:
    meta = {"stage": "svae", "iteration": iteration, "config": config.to_dict()}
    return write_checkpoint(path, module_tensors("svae", svae), meta)


def save_translation(path, svae, csu, disc, config: TrainConfig, iteration: int) -> Path:
    tensors = module_tensors("svae", svae)
    tensors.update(generator_tensors(csu))
    tensors.update(module_tensors("disc", disc))
    meta = {"stage": "translation", "iteration": iteration, "config": config.to_dict()}
    return write_checkpoint(path, tensors, meta)


@dataclass
class Models:
    config: TrainConfig
    svae: SvaeModel
    csu: CsuModel | None = None
    disc: Discriminator | None = None


def load_checkpoint(path, config: TrainConfig | None = None) -> Models:
    """Rebuild models from a checkpoint; the stored config is used unless one is given."""
    tensors, meta = read_checkpoint(path)
    if config is None:
        config = config_from_dict(meta["config"])
    svae = SvaeModel(config)
    load_into(svae, "svae", tensors)
    models = Models(config, svae)
    if meta.get("stage") == "translation":
        models.csu = CsuModel(config)
        _load_csu(models.csu, tensors)
        models.disc = Discriminator(config)
        load_into(models.disc, "disc", tensors)
    return models


# ---------------------------------------------------------------------------
# loops

@dataclass
class TrainState:
    models: Models
    optimizers: dict[str, Adam]
    iteration: int = 0
    history: deque = field(default_factory=lambda: deque(maxlen=1000))


@dataclass
class TrainOutcome:
    state: TrainState
    log: list[dict]
    checkpoint: Path | None


def _check_terms(iteration: int, terms: dict[str, float]) -> None:
    for name, value in terms.items():
        if value is not None and not math.isfinite(value):
            detail = ", ".join(f"{k}={v}" for k, v in terms.items())
            raise TrainingError(f"non-finite {name} at iteration {iteration} ({detail})")


class _LogWriter:
    def __init__(self, path):
        self.fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        if self.fh is not None:
            self.fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def _pick(gen: torch.Generator, n: int, k: int) -> list[int]:
    return torch.randint(0, n, (k,), generator=gen).tolist()


def train_svae(dataset: FaceDataset, config: TrainConfig, out_path: str | os.PathLike | None = None,
               log_path: str | os.PathLike | None = None) -> TrainOutcome:
    """Fit the SVAE to the training-split VIS images."""
    gen = seed_all(config.seed)
    svae = SvaeModel(config)
    opt = Adam(svae.parameters(), config)
    state = TrainState(Models(config, svae), {"svae": opt}, history=deque(maxlen=config.loss_history))
    records = dataset.manifest.select(split="train", spectrum="VIS")
    if not records and config.iterations:
        raise DataError("no training VIS images in manifest")
    writer = _LogWriter(log_path)
    trace = []
    try:
        for it in range(config.iterations):
            x = dataset.stack([records[i] for i in _pick(gen, len(records), config.batch_size)])
            mean, log_var = svae.encoder(x)
            stats = LatentStats(mean, log_var)
            noise = torch.randn(mean.shape, generator=gen)
            x_hat, _, _ = svae.generator(reparameterize(stats, noise))
            rec = 0.5 * (x - x_hat).pow(2).flatten(1).sum(1).mean()
            kl = kl_divergence(stats).mean()
            loss = rec + kl
            terms = {"l_rec": rec.item(), "l_kl": kl.item(), "l_svae": loss.item()}
            _check_terms(it, terms)
            opt.zero_grad()
            loss.backward()
            opt.step()
            record = {"iteration": it, **terms}
            trace.append(record)
            state.history.append(record)
            writer.write(record)
            state.iteration = it + 1
    finally:
        writer.close()
    ckpt = save_svae(out_path, svae, config, state.iteration) if out_path is not None else None
    return TrainOutcome(state, trace, ckpt)


def train_translation(dataset: FaceDataset, svae: SvaeModel | str | os.PathLike, config: TrainConfig,
                      out_path: str | os.PathLike | None = None,
                      log_path: str | os.PathLike | None = None,
                      backbone=None, embedder=None) -> TrainOutcome:
    """Alternate one discriminator step and one generator step per iteration.

    The SVAE is frozen; it supplies the exemplar latent and style taps.
    """
    if not isinstance(svae, SvaeModel):
        svae = load_checkpoint(svae, config).svae
    freeze(svae)
    gen = seed_all(config.seed)
    csu = CsuModel(config)
    disc = Discriminator(config)
    backbone = backbone if backbone is not None else standin_backbone(config.backbone_seed)
    embedder = embedder if embedder is not None else StandInEmbedder(config.embedder_seed)
    use_adv = config.lambda_adv > 0
    opt_g = Adam(csu.parameters(), config)
    opt_d = Adam(disc.parameters(), config)
    state = TrainState(Models(config, svae, csu, disc), {"generator": opt_g, "discriminator": opt_d},
                       history=deque(maxlen=config.loss_history))

    manifest = dataset.manifest
    nir_records = manifest.select(split="train", spectrum="NIR")
    subjects = manifest.subjects("train")
    vis_by_subject = {s: manifest.select(split="train", spectrum="VIS", subject_id=s) for s in subjects}
    vis_subjects = [s for s in subjects if vis_by_subject[s]]
    if config.iterations and (not nir_records or not vis_subjects):
        raise DataError("training split needs NIR images and VIS exemplars")
    match = {s: dataset.match_record(s, "train") for s in {r.subject_id for r in nir_records}}

    writer = _LogWriter(log_path)
    trace = []
    out_dir = Path(out_path).parent if out_path is not None else None
    try:
        for it in range(config.iterations):
            batch = [nir_records[i] for i in _pick(gen, len(nir_records), config.batch_size)]
            ex_subjects = [vis_subjects[i] for i in _pick(gen, len(vis_subjects), config.batch_size)]
            exemplars = [vis_by_subject[s][_pick(gen, len(vis_by_subject[s]), 1)[0]] for s in ex_subjects]
            x_nir = dataset.stack(batch)
            x_vis = dataset.stack(exemplars)
            x_match = dataset.stack([match[r.subject_id] for r in batch])

            with torch.no_grad():
                mean, log_var = svae.encoder(x_vis)
                noise = torch.randn(mean.shape, generator=gen)
                z = reparameterize(LatentStats(mean, log_var), noise)
                _, tap3, tap4 = svae.generator(z)
            y = csu(x_nir, z, tap3, tap4)

            l_d = None
            if use_adv:
                d_loss = discriminator_loss(disc, x_vis, y)
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
                l_d = d_loss.item()

            l_content = content_loss(backbone, y, x_nir)
            l_style = style_loss(backbone, x_vis, y)
            l_id = id_loss(embedder, x_match, y)
            if use_adv:
                disc.requires_grad_(False)
                l_adv = generator_adv_loss(disc, y)
            else:
                l_adv = torch.zeros((), dtype=y.dtype)
            l_total = total_loss((l_content, l_style, l_id, l_adv), config)
            terms = {"l_content": l_content.item(), "l_style": l_style.item(), "l_id": l_id.item(),
                     "l_adv": l_adv.item(), "l_d": l_d, "l_total": l_total.item()}
            _check_terms(it, terms)
            opt_g.zero_grad()
            l_total.backward()
            opt_g.step()
            disc.requires_grad_(True)

            record = {"iteration": it, **terms}
            trace.append(record)
            state.history.append(record)
            writer.write(record)
            state.iteration = it + 1
            if out_dir is not None and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
                save_translation(out_dir / f"translation_{state.iteration:06d}.vsan", svae, csu, disc,
                                 config, state.iteration)
    finally:
        writer.close()
    ckpt = None
    if out_path is not None:
        ckpt = save_translation(out_path, svae, csu, disc, config, state.iteration)
    return TrainOutcome(state, trace, ckpt)


# ---------------------------------------------------------------------------
# inference

class Translator:
    """NIR -> VIS translation in exemplar (posterior) or prior mode."""

    def __init__(self, models: Models, seed: int = 0):
        if models.csu is None:
            raise ValueError("checkpoint has no translation network")
        self.config = models.config
        self.svae = freeze(models.svae)
        self.csu = freeze(models.csu)
        self.gen = torch.Generator().manual_seed(seed)

    @torch.no_grad()
    def latent_from_exemplar(self, x_vis: torch.Tensor, sample: bool = True) -> torch.Tensor:
        mean, log_var = self.svae.encoder(x_vis)
        if not sample:
            return mean
        noise = torch.randn(mean.shape, generator=self.gen)
        return reparameterize(LatentStats(mean, log_var), noise)

    @torch.no_grad()
    def latent_from_prior(self, n: int) -> torch.Tensor:
        return torch.randn((n, self.config.latent_dim), generator=self.gen)

    @torch.no_grad()
    def translate(self, x_nir: torch.Tensor, z: torch.Tensor, use_sca: bool = True) -> torch.Tensor:
        _, tap3, tap4 = self.svae.generator(z)
        return self.csu(x_nir, z, tap3, tap4, use_sca=use_sca)

    def exemplar(self, x_nir, x_vis, sample: bool = True):
        return self.translate(x_nir, self.latent_from_exemplar(x_vis, sample))

    def prior(self, x_nir):
        return self.translate(x_nir, self.latent_from_prior(x_nir.shape[0]))
