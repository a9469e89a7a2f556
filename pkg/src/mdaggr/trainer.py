"""Three-stage adversarial training: per-source translation, adapted-domain
aggregation, and task training with feature (and category) alignment.

Stage 1 trains one cycle-consistent translator pair per source against the
shared target discriminator, then pretrains the task network F on the
adapted images and snapshots a frozen fine-tune F_i per source.
Stage 2 continues translator training with semantic consistency against the
dynamic model (F_A, parameter-aliased to F) and aggregates the adapted
domains with the one-vs-rest and cross-cycle discriminators.
Stage 3 trains F on the regenerated aggregated domain with feature-level
alignment (plus category-level alignment in segmentation mode).

Direction of play: discriminators treat the target/real side as positive
and ascend their discrimination objective; generators and the task encoder
descend a non-saturating fooling objective. The printed-form loss values
(under the configured ``convention``) are what the history records.
"""

from __future__ import annotations

import copy
import functools
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import losses, models
from .data import (KIND_CLASSIFICATION, KIND_SEGMENTATION, DatasetManifest,
                   DomainBundle, SynthSpec, load_bundle, load_manifest,
                   synthesize_classification_domains,
                   synthesize_segmentation_domains,
                   synthesize_target_eval_bundle)
from .errors import (ConfigurationError, ContractViolation, StageOrderError,
                     TrainingDivergence)
from .evaluation import MetricReport, batch_to_torch, evaluate
from .losses import GridSpec, LossWeights, scores_from_logits

MODE_MADAN = "madan"
MODE_MADAN_PLUS = "madan+"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    mode: str = MODE_MADAN
    task_kind: str = KIND_CLASSIFICATION
    # schedule
    stage1_epochs: int = 20
    stage1_task_epochs: int = 10
    stage1_finetune_epochs: int = 5
    stage2_epochs: int = 20
    stage3_epochs: int = 40
    outer_iterations: int = 2
    max_steps_per_epoch: int | None = None
    # optimization
    batch_size: int = 8
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    lr_task: float = 1e-4
    lr_feature: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    # model sizes
    translator_blocks: int = 9
    translator_width: int = 64
    discriminator_width: int = 64
    task_width: int = 64
    feature_disc_width: int = 64
    class_disc_width: int = 64
    # segmentation extension
    crop_scales: tuple = (1.0, 0.5)
    grid_rows: int = 8
    grid_cols: int = 8
    # run control
    seed: int = 0
    convention: str = "standard"
    semantic_consistency: str = "dsc"   # dsc | frozen
    deterministic: bool = True

    def __post_init__(self):
        if self.mode not in (MODE_MADAN, MODE_MADAN_PLUS):
            raise ConfigurationError("mode must be madan or madan+, got %r" % (self.mode,))
        if self.task_kind not in (KIND_CLASSIFICATION, KIND_SEGMENTATION):
            raise ConfigurationError("unknown task_kind %r" % (self.task_kind,))
        if self.mode == MODE_MADAN_PLUS and self.task_kind != KIND_SEGMENTATION:
            raise ConfigurationError("madan+ mode requires the segmentation task")
        for name in ("stage1_epochs", "stage1_task_epochs", "stage1_finetune_epochs",
                     "stage2_epochs", "stage3_epochs"):
            if getattr(self, name) < 0:
                raise ConfigurationError("%s must be >= 0" % (name,))
        if self.outer_iterations < 1:
            raise ConfigurationError("outer_iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        for name in ("lr_generator", "lr_discriminator", "lr_task", "lr_feature"):
            if getattr(self, name) < 0:
                raise ConfigurationError("%s must be >= 0" % (name,))
        if not self.crop_scales:
            raise ConfigurationError("crop_scales must list at least one scale")
        for c in self.crop_scales:
            if not 0.0 < c <= 1.0:
                raise ConfigurationError("crop scales must lie in (0, 1], got %r" % (c,))
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ConfigurationError("grid dims must be >= 1")
        if self.convention not in losses.CONVENTIONS:
            raise ConfigurationError("unknown convention %r" % (self.convention,))
        if self.semantic_consistency not in ("dsc", "frozen"):
            raise ConfigurationError("semantic_consistency must be dsc or frozen")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["weights"] = self.weights.as_dict()
        doc["crop_scales"] = list(self.crop_scales)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError("unknown config keys: %s" % (", ".join(sorted(unknown)),))
        if "weights" in doc and not isinstance(doc["weights"], LossWeights):
            doc["weights"] = LossWeights(**doc["weights"])
        if "crop_scales" in doc:
            doc["crop_scales"] = tuple(doc["crop_scales"])
        return cls(**doc)


@dataclass
class TrainState:
    sources: list[DomainBundle]
    target: DomainBundle
    translators: list[models.TranslatorPair]
    discriminators: models.DiscriminatorSet
    task_net: models.TaskNetwork
    frozen_sources: list[models.TaskNetwork] = field(default_factory=list)
    stage: int = 0
    round: int = 0
    history: list = field(default_factory=list)

    @property
    def f_a(self) -> models.TaskNetwork:
        """Dynamic consistency model: the task network itself (parameter
        aliasing, never a copy)."""
        return self.task_net

    @property
    def num_sources(self) -> int:
        return len(self.sources)


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _set_epoch_seed(config: TrainConfig, round_index: int, stage: int, epoch: int,
                    ) -> np.random.Generator:
    seed = _derive_seed(config.seed, round_index, stage, epoch)
    torch.manual_seed(seed)
    return np.random.Generator(np.random.PCG64(seed))


def _apply_determinism(config: TrainConfig) -> None:
    if config.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def build_state(sources: Sequence[DomainBundle], target: DomainBundle,
                config: TrainConfig) -> TrainState:
    if len(sources) < 2:
        raise ConfigurationError("training needs at least two source domains")
    if target.is_labeled:
        raise ConfigurationError("the target bundle must be unlabeled")
    shapes = {b.image_shape for b in list(sources) + [target]}
    if len(shapes) != 1:
        raise ConfigurationError("all domains must share one image shape, got %r" % (shapes,))
    h, w, c = target.image_shape
    if h % 4 or w % 4:
        raise ConfigurationError("image sides must be multiples of 4 for the translators")
    for b in sources:
        if b.kind != config.task_kind:
            raise ConfigurationError("bundle %r kind %r does not match config task_kind %r"
                                     % (b.name, b.kind, config.task_kind))
        if not b.is_labeled:
            raise ConfigurationError("source bundle %r is unlabeled" % (b.name,))

    num_classes = sources[0].num_classes
    t_cfg = models.TranslatorConfig(residual_blocks=config.translator_blocks,
                                    base_width=config.translator_width, channels=c)
    d_cfg = models.DiscriminatorConfig(base_width=config.discriminator_width, channels=c)
    translators = [models.build_translator(t_cfg, seed=_derive_seed(config.seed, 10, i))
                   for i in range(len(sources))]
    task = models.build_task_network(config.task_kind, num_classes,
                                     base_width=config.task_width, channels=c,
                                     seed=_derive_seed(config.seed, 20))
    per_class = None
    if config.mode == MODE_MADAN_PLUS:
        per_class = models.build_class_discriminator(
            task.feature_channels, num_classes,
            GridSpec(config.grid_rows, config.grid_cols),
            base_width=config.class_disc_width, seed=_derive_seed(config.seed, 30))
    discs = models.DiscriminatorSet(
        target_pixel=models.build_pixel_discriminator(d_cfg, seed=_derive_seed(config.seed, 40)),
        per_source_pixel=[models.build_pixel_discriminator(d_cfg, seed=_derive_seed(config.seed, 41, i))
                          for i in range(len(sources))],
        aggregation=[models.build_pixel_discriminator(d_cfg, seed=_derive_seed(config.seed, 42, i))
                     for i in range(len(sources))],
        feature=models.build_feature_discriminator(
            task.feature_channels, base_width=config.feature_disc_width,
            seed=_derive_seed(config.seed, 43)),
        per_class=per_class)
    return TrainState(sources=list(sources), target=target, translators=translators,
                      discriminators=discs, task_net=task)


# ---------------------------------------------------------------------------
# Step helpers
# ---------------------------------------------------------------------------

def _convert_divergence(fn):
    """Non-finite activations surface as score/logit contract violations;
    during training they mean divergence (callers keep the last finite
    checkpoint)."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ContractViolation as exc:
            if "non-finite" in str(exc):
                raise TrainingDivergence(str(exc)) from exc
            raise
    return wrapper


def _nonsat(raw_scores: torch.Tensor) -> torch.Tensor:
    """Non-saturating fooling objective: push these outputs toward the
    discriminator's positive class."""
    return -torch.log(scores_from_logits(raw_scores)).mean()


def _guard_loss(value: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(value):
        raise TrainingDivergence("non-finite %s loss" % (what,))
    return value


def _step(optimizer: torch.optim.Optimizer, loss: torch.Tensor, params, what: str) -> None:
    optimizer.zero_grad(set_to_none=True)
    _guard_loss(loss, what).backward()
    bad = [float(p.grad.abs().max()) for p in params
           if p.grad is not None and not torch.isfinite(p.grad).all()]
    if bad:
        optimizer.zero_grad(set_to_none=True)
        raise TrainingDivergence("non-finite gradient in %s step (max |g| per bad tensor: %s)"
                                 % (what, bad))
    optimizer.step()


@_convert_divergence
def adversarial_step(generator: torch.nn.Module, discriminator: torch.nn.Module,
                     gen_optimizer: torch.optim.Optimizer,
                     disc_optimizer: torch.optim.Optimizer,
                     gen_input: torch.Tensor, real_batch: torch.Tensor) -> dict:
    """One discriminator ascent step followed by one generator descent step.

    The discriminator sees generator output detached; the generator update
    re-scores its (cached) output against the updated discriminator."""
    fake = generator(gen_input)
    d_value = losses.gan_loss_src_to_tgt(
        scores_from_logits(discriminator(fake.detach())),
        scores_from_logits(discriminator(real_batch)), convention="standard")
    _step(disc_optimizer, -d_value, list(discriminator.parameters()), "discriminator")
    g_loss = _nonsat(discriminator(fake))
    _step(gen_optimizer, g_loss, list(generator.parameters()), "generator")
    return {"disc": float(-d_value.detach()), "gen": float(g_loss.detach())}


def _epoch_step_count(config: TrainConfig, *counts: int) -> int:
    steps = max(1, min(c // config.batch_size for c in counts))
    if config.max_steps_per_epoch is not None:
        steps = min(steps, config.max_steps_per_epoch)
    return steps


class _BatchSampler:
    """Per-epoch shuffled full batches over one array of images (+labels)."""

    def __init__(self, images: torch.Tensor, labels: np.ndarray | None,
                 batch_size: int, rng: np.random.Generator):
        self.images = images
        self.labels = labels
        self.batch_size = batch_size
        self.order = rng.permutation(len(images))
        self.cursor = 0

    def next(self) -> tuple[torch.Tensor, torch.Tensor | None]:
        if self.cursor + self.batch_size > len(self.order):
            self.cursor = 0
        idx = self.order[self.cursor:self.cursor + self.batch_size]
        self.cursor += self.batch_size
        images = self.images[idx]
        labels = None
        if self.labels is not None:
            labels = torch.from_numpy(self.labels[idx])
        return images, labels


def _translate_bundle(translator: models.TranslatorNet, bundle: DomainBundle,
                      batch_size: int = 64) -> np.ndarray:
    """Adapted images for a whole bundle, back in (N, H, W, C) layout."""
    out = []
    with torch.no_grad():
        for start in range(0, bundle.count, batch_size):
            batch = batch_to_torch(bundle.images[start:start + batch_size])
            out.append(translator(batch).numpy().transpose(0, 2, 3, 1))
    return np.concatenate(out, axis=0)


def adapted_bundles(state: TrainState, batch_size: int = 64) -> list[DomainBundle]:
    """Current adapted version of every source (labels carried over)."""
    result = []
    for src, pair in zip(state.sources, state.translators):
        images = np.clip(_translate_bundle(pair.forward, src, batch_size), -1.0, 1.0)
        result.append(DomainBundle(name="%s_adapted" % src.name, kind=src.kind,
                                   images=images.astype(np.float32), labels=src.labels,
                                   num_classes=src.num_classes))
    return result


# ---------------------------------------------------------------------------
# Context-aware multi-scale cropping
# ---------------------------------------------------------------------------

def context_aware_crop(adapted_batch: torch.Tensor, target_batch: torch.Tensor,
                       scales: Sequence[float], rng: np.random.Generator,
                       adapted_labels: torch.Tensor | None = None,
                       min_pixels: int = 8) -> list[tuple]:
    """Crop each (adapted, target) pair around one shared random center at
    every scale, then resize back to the training resolution.

    Returns one (adapted, target[, labels]) tuple per scale; label maps are
    cropped identically and resized nearest-neighbor."""
    if adapted_batch.shape != target_batch.shape:
        raise ConfigurationError("paired batches must share a shape, got %r vs %r"
                                 % (tuple(adapted_batch.shape), tuple(target_batch.shape)))
    b, _, h, w = adapted_batch.shape
    centers = np.stack([rng.integers(0, h, size=b), rng.integers(0, w, size=b)], axis=1)
    out = []
    for scale in scales:
        ch = int(round(scale * h))
        cw = int(round(scale * w))
        if ch < min_pixels or cw < min_pixels:
            raise ConfigurationError("crop scale %r yields %dx%d, below the %d px floor"
                                     % (scale, ch, cw, min_pixels))
        tops = np.clip(centers[:, 0] - ch // 2, 0, h - ch)
        lefts = np.clip(centers[:, 1] - cw // 2, 0, w - cw)
        crops_a = torch.stack([adapted_batch[i, :, t:t + ch, l:l + cw]
                               for i, (t, l) in enumerate(zip(tops, lefts))])
        crops_t = torch.stack([target_batch[i, :, t:t + ch, l:l + cw]
                               for i, (t, l) in enumerate(zip(tops, lefts))])
        if (ch, cw) != (h, w):
            crops_a = torch.nn.functional.interpolate(crops_a, size=(h, w), mode="bilinear",
                                                      align_corners=False)
            crops_t = torch.nn.functional.interpolate(crops_t, size=(h, w), mode="bilinear",
                                                      align_corners=False)
            crops_a = crops_a.clamp(-1.0, 1.0)
            crops_t = crops_t.clamp(-1.0, 1.0)
        if adapted_labels is None:
            out.append((crops_a, crops_t))
            continue
        lab = torch.stack([adapted_labels[i, t:t + ch, l:l + cw]
                           for i, (t, l) in enumerate(zip(tops, lefts))])
        if (ch, cw) != (h, w):
            lab = torch.nn.functional.interpolate(lab[:, None].double(), size=(h, w),
                                                  mode="nearest")[:, 0].long()
        out.append((crops_a, crops_t, lab))
    return out


# ---------------------------------------------------------------------------
# Stage 1: per-source translation + task pretraining
# ---------------------------------------------------------------------------

def _record(state: TrainState, out_dir: Path | None, **fields_) -> None:
    record = {"round": state.round, **fields_}
    state.history.append(record)
    if out_dir is not None:
        with open(Path(out_dir) / "history.jsonl", "a") as f:
            f.write(json.dumps(record) + "\n")


def _epoch_checkpoint(state: TrainState, config: TrainConfig, out_dir: Path | None) -> None:
    if out_dir is not None:
        save_state(state, config, Path(out_dir) / "last.pt")


@_convert_divergence
def stage1_pretrain(sources: Sequence[DomainBundle], target: DomainBundle,
                    config: TrainConfig, state: TrainState | None = None,
                    out_dir: Path | None = None) -> TrainState:
    """Cycle-consistent translation per source (no semantic term), then task
    pretraining on the adapted union and per-source frozen fine-tunes."""
    _apply_determinism(config)
    if state is None:
        state = build_state(sources, target, config)
    elif state.stage < 3:
        raise StageOrderError("stage 1 can only restart after a completed round")
    else:
        state.round += 1
    w = config.weights
    m = state.num_sources
    x_target = batch_to_torch(target.images)
    x_sources = [batch_to_torch(b.images) for b in sources]
    discs = state.discriminators

    opt_g = [torch.optim.Adam(pair.parameters(), lr=config.lr_generator, betas=(0.5, 0.999))
             for pair in state.translators]
    opt_dt = torch.optim.Adam(discs.target_pixel.parameters(),
                              lr=config.lr_discriminator, betas=(0.5, 0.999))
    opt_di = [torch.optim.Adam(d.parameters(), lr=config.lr_discriminator, betas=(0.5, 0.999))
              for d in discs.per_source_pixel]

    for epoch in range(config.stage1_epochs):
        t0 = time.perf_counter()
        rng = _set_epoch_seed(config, state.round, 1, epoch)
        samplers = [_BatchSampler(x, b.labels, config.batch_size, rng)
                    for x, b in zip(x_sources, sources)]
        sampler_t = _BatchSampler(x_target, None, config.batch_size, rng)
        steps = _epoch_step_count(config, target.count, *[b.count for b in sources])
        sums = {"gan_src_to_tgt": 0.0, "gan_tgt_to_src": 0.0, "cycle": 0.0}
        for _ in range(steps):
            xb_t, _ = sampler_t.next()
            for i in range(m):
                xb_i, _ = samplers[i].next()
                pair = state.translators[i]
                fake_t = pair.forward(xb_i)
                back = pair.backward(xb_t)
                rec_i = pair.backward(fake_t)
                rec_t = pair.forward(back)
                cyc = losses.cycle_loss(xb_i, rec_i) + losses.cycle_loss(xb_t, rec_t)
                g_loss = (w.gan_src_to_tgt * _nonsat(discs.target_pixel(fake_t))
                          + w.gan_tgt_to_src * _nonsat(discs.per_source_pixel[i](back))
                          + w.cycle * cyc)
                _step(opt_g[i], g_loss, list(pair.parameters()), "stage1 generator")

                d_t_value = losses.gan_loss_src_to_tgt(
                    scores_from_logits(discs.target_pixel(fake_t.detach())),
                    scores_from_logits(discs.target_pixel(xb_t)), convention="standard")
                _step(opt_dt, -d_t_value, list(discs.target_pixel.parameters()),
                      "stage1 target discriminator")
                d_i_value = losses.gan_loss_tgt_to_src(
                    scores_from_logits(discs.per_source_pixel[i](xb_i)),
                    scores_from_logits(discs.per_source_pixel[i](back.detach())),
                    convention="standard")
                _step(opt_di[i], -d_i_value, list(discs.per_source_pixel[i].parameters()),
                      "stage1 source discriminator")
                with torch.no_grad():
                    sums["gan_src_to_tgt"] += float(losses.gan_loss_src_to_tgt(
                        scores_from_logits(discs.target_pixel(fake_t.detach())),
                        scores_from_logits(discs.target_pixel(xb_t)), config.convention))
                    sums["gan_tgt_to_src"] += float(losses.gan_loss_tgt_to_src(
                        scores_from_logits(discs.per_source_pixel[i](xb_i)),
                        scores_from_logits(discs.per_source_pixel[i](back.detach())),
                        config.convention))
                    sums["cycle"] += float(cyc.detach())
        record = {k: v / (steps * m) for k, v in sums.items()}
        if not config.deterministic:
            record["wall_time"] = time.perf_counter() - t0
        _record(state, out_dir, stage=1, phase="translate", epoch=epoch, **record)
        _epoch_checkpoint(state, config, out_dir)

    _pretrain_task(state, config, out_dir)
    _snapshot_frozen_sources(state, config, out_dir)
    state.stage = 1
    return state


def _task_epoch(net: models.TaskNetwork, optimizer, images: torch.Tensor,
                labels: np.ndarray, config: TrainConfig, rng: np.random.Generator,
                what: str) -> float:
    sampler = _BatchSampler(images, labels, config.batch_size, rng)
    steps = _epoch_step_count(config, len(images))
    total = 0.0
    for _ in range(steps):
        xb, yb = sampler.next()
        logits = net(xb)
        if config.task_kind == KIND_CLASSIFICATION:
            loss = losses.task_loss_classification(logits, yb)
        else:
            loss = losses.task_loss_segmentation(logits, yb)
        _step(optimizer, config.weights.task * loss, list(net.parameters()), what)
        total += float(loss.detach())
    return total / steps


def _pretrain_task(state: TrainState, config: TrainConfig, out_dir: Path | None) -> None:
    adapted = adapted_bundles(state)
    images = batch_to_torch(np.concatenate([b.images for b in adapted]))
    labels = np.concatenate([b.labels for b in adapted])
    opt = torch.optim.Adam(state.task_net.parameters(), lr=config.lr_task)
    for epoch in range(config.stage1_task_epochs):
        t0 = time.perf_counter()
        rng = _set_epoch_seed(config, state.round, 1, 10_000 + epoch)
        mean_loss = _task_epoch(state.task_net, opt, images, labels, config, rng,
                                "stage1 task")
        record = {"task": mean_loss}
        if not config.deterministic:
            record["wall_time"] = time.perf_counter() - t0
        _record(state, out_dir, stage=1, phase="task", epoch=epoch, **record)
    _epoch_checkpoint(state, config, out_dir)


def _snapshot_frozen_sources(state: TrainState, config: TrainConfig,
                             out_dir: Path | None) -> None:
    """Per-source frozen snapshots: copies of F fine-tuned on the original
    labeled source images."""
    state.frozen_sources = []
    for i, bundle in enumerate(state.sources):
        snap = copy.deepcopy(state.task_net)
        snap.role = "F_i"
        opt = torch.optim.Adam(snap.parameters(), lr=config.lr_task)
        images = batch_to_torch(bundle.images)
        for epoch in range(config.stage1_finetune_epochs):
            rng = _set_epoch_seed(config, state.round, 1, 20_000 + 100 * i + epoch)
            mean_loss = _task_epoch(snap, opt, images, bundle.labels, config, rng,
                                    "stage1 finetune")
            _record(state, out_dir, stage=1, phase="finetune", epoch=epoch,
                    source=bundle.name, task=mean_loss)
        snap.eval()
        for p in snap.parameters():
            p.requires_grad_(False)
        state.frozen_sources.append(snap)


# ---------------------------------------------------------------------------
# Stage 2: semantic-consistent translation + adversarial aggregation
# ---------------------------------------------------------------------------

@_convert_divergence
def stage2_aggregate(state: TrainState, config: TrainConfig,
                     out_dir: Path | None = None) -> TrainState:
    """Continue translator training with the semantic-consistency term and
    aggregate the adapted domains (one-vs-rest + cross-cycle adversaries)."""
    if state.stage < 1:
        raise StageOrderError("stage 2 requires a completed stage 1")
    _apply_determinism(config)
    w = config.weights
    m = state.num_sources
    discs = state.discriminators
    f_dynamic = state.f_a
    f_dynamic.eval()
    task_grads = [p.requires_grad for p in f_dynamic.parameters()]
    for p in f_dynamic.parameters():
        p.requires_grad_(False)

    x_target = batch_to_torch(state.target.images)
    x_sources = [batch_to_torch(b.images) for b in state.sources]
    all_gen_params = [p for pair in state.translators for p in pair.parameters()]
    opt_g = torch.optim.Adam(all_gen_params, lr=config.lr_generator, betas=(0.5, 0.999))
    opt_dt = torch.optim.Adam(discs.target_pixel.parameters(),
                              lr=config.lr_discriminator, betas=(0.5, 0.999))
    opt_di = [torch.optim.Adam(d.parameters(), lr=config.lr_discriminator, betas=(0.5, 0.999))
              for d in discs.per_source_pixel]
    opt_da = [torch.optim.Adam(d.parameters(), lr=config.lr_discriminator, betas=(0.5, 0.999))
              for d in discs.aggregation]

    use_crops = config.mode == MODE_MADAN_PLUS
    for epoch in range(config.stage2_epochs):
        t0 = time.perf_counter()
        rng = _set_epoch_seed(config, state.round, 2, epoch)
        samplers = [_BatchSampler(x, None, config.batch_size, rng) for x in x_sources]
        sampler_t = _BatchSampler(x_target, None, config.batch_size, rng)
        steps = _epoch_step_count(config, state.target.count,
                                  *[b.count for b in state.sources])
        sums = {"gan_src_to_tgt": 0.0, "gan_tgt_to_src": 0.0, "cycle": 0.0,
                "dsc": 0.0, "sad": 0.0, "ccd": 0.0}
        for _ in range(steps):
            xb_t, _ = sampler_t.next()
            batches = [samplers[i].next()[0] for i in range(m)]

            # -- generator pass (all sources jointly; aggregation couples them)
            g_total = torch.zeros(())
            fake_full = []
            for i in range(m):
                pair = state.translators[i]
                if use_crops:
                    scale_pairs = context_aware_crop(batches[i], xb_t,
                                                     config.crop_scales, rng)
                else:
                    scale_pairs = [(batches[i], xb_t)]
                for xs_i, xs_t in scale_pairs:
                    fake_t = pair.forward(xs_i)
                    back = pair.backward(xs_t)
                    rec_i = pair.backward(fake_t)
                    rec_t = pair.forward(back)
                    cyc = losses.cycle_loss(xs_i, rec_i) + losses.cycle_loss(xs_t, rec_t)
                    frozen_logits = state.frozen_sources[i](xs_i)
                    if config.semantic_consistency == "dsc":
                        dynamic_logits = f_dynamic(fake_t)
                    else:
                        dynamic_logits = state.frozen_sources[i](fake_t)
                    dsc = losses.dsc_loss(dynamic_logits, frozen_logits)
                    g_total = (g_total
                               + w.gan_src_to_tgt * _nonsat(discs.target_pixel(fake_t))
                               + w.gan_tgt_to_src * _nonsat(discs.per_source_pixel[i](back))
                               + w.cycle * cyc + w.dsc * dsc)
                    sums["cycle"] += float(cyc.detach()) / len(scale_pairs)
                    sums["dsc"] += float(dsc.detach()) / len(scale_pairs)
                fake_full.append(pair.forward(batches[i]) if use_crops else fake_t)

            for i in range(m):
                for j in range(m):
                    if j == i:
                        continue
                    # others' adapted images fool this aggregation adversary
                    g_total = g_total + w.sad / (m - 1) * _nonsat(
                        discs.aggregation[i](fake_full[j]))
                    # cross-cycled images fool this source's discriminator
                    cross = state.translators[i].backward(fake_full[j])
                    g_total = g_total + w.ccd / (m - 1) * _nonsat(
                        discs.per_source_pixel[i](cross))
            _step(opt_g, g_total, all_gen_params, "stage2 generator")

            # -- discriminator passes
            fake_detached = [f.detach() for f in fake_full]
            dt_value = torch.zeros(())
            for i in range(m):
                dt_value = dt_value + losses.gan_loss_src_to_tgt(
                    scores_from_logits(discs.target_pixel(fake_detached[i])),
                    scores_from_logits(discs.target_pixel(xb_t)), convention="standard")
            _step(opt_dt, -w.gan_src_to_tgt * dt_value,
                  list(discs.target_pixel.parameters()), "stage2 target discriminator")

            for i in range(m):
                with torch.no_grad():
                    back = state.translators[i].backward(xb_t)
                    crosses = [state.translators[i].backward(fake_detached[j])
                               for j in range(m) if j != i]
                d = discs.per_source_pixel[i]
                gan_val = losses.gan_loss_tgt_to_src(
                    scores_from_logits(d(batches[i])), scores_from_logits(d(back)),
                    convention="standard")
                ccd_val = losses.ccd_loss(scores_from_logits(d(batches[i])),
                                          [scores_from_logits(d(x)) for x in crosses])
                _step(opt_di[i], -(w.gan_tgt_to_src * gan_val + w.ccd * ccd_val),
                      list(d.parameters()), "stage2 source discriminator")

                da = discs.aggregation[i]
                sad_val = losses.sad_loss(
                    scores_from_logits(da(fake_detached[i])),
                    [scores_from_logits(da(fake_detached[j])) for j in range(m) if j != i])
                _step(opt_da[i], -w.sad * sad_val, list(da.parameters()),
                      "stage2 aggregation discriminator")

                with torch.no_grad():
                    sums["gan_src_to_tgt"] += float(losses.gan_loss_src_to_tgt(
                        scores_from_logits(discs.target_pixel(fake_detached[i])),
                        scores_from_logits(discs.target_pixel(xb_t)), config.convention))
                    sums["gan_tgt_to_src"] += float(gan_val.detach())
                    sums["sad"] += float(sad_val.detach())
                    sums["ccd"] += float(ccd_val.detach())

        record = {k: v / (steps * m) for k, v in sums.items()}
        if not config.deterministic:
            record["wall_time"] = time.perf_counter() - t0
        _record(state, out_dir, stage=2, epoch=epoch, **record)
        _epoch_checkpoint(state, config, out_dir)

    for p, had in zip(f_dynamic.parameters(), task_grads):
        p.requires_grad_(had)
    state.stage = 2
    return state


# ---------------------------------------------------------------------------
# Stage 3: task training on the aggregated domain
# ---------------------------------------------------------------------------

@_convert_divergence
def stage3_task_train(state: TrainState, config: TrainConfig,
                      out_dir: Path | None = None) -> TrainState:
    """Train F on the regenerated aggregated domain with feature alignment
    (and category alignment with target pseudo-labels in segmentation mode)."""
    if state.stage < 2:
        raise StageOrderError("stage 3 requires a completed stage 2")
    _apply_determinism(config)
    w = config.weights
    discs = state.discriminators
    net = state.task_net
    net.train()
    for p in net.parameters():
        p.requires_grad_(True)

    adapted = adapted_bundles(state)
    images = batch_to_torch(np.concatenate([b.images for b in adapted]))
    labels = np.concatenate([b.labels for b in adapted])
    x_target = batch_to_torch(state.target.images)
    grid = GridSpec(config.grid_rows, config.grid_cols)
    use_cla = config.mode == MODE_MADAN_PLUS

    opt_task = torch.optim.Adam(net.parameters(), lr=config.lr_task)
    opt_df = torch.optim.Adam(discs.feature.parameters(), lr=config.lr_feature,
                              betas=(0.5, 0.999))
    opt_dc = None
    if use_cla:
        opt_dc = torch.optim.Adam(discs.per_class.parameters(), lr=config.lr_feature,
                                  betas=(0.5, 0.999))

    for epoch in range(config.stage3_epochs):
        t0 = time.perf_counter()
        rng = _set_epoch_seed(config, state.round, 3, epoch)
        sampler = _BatchSampler(images, labels, config.batch_size, rng)
        sampler_t = _BatchSampler(x_target, None, config.batch_size, rng)
        steps = _epoch_step_count(config, len(images))
        sums = {"task": 0.0, "fla": 0.0, "cla": 0.0}
        for _ in range(steps):
            xb, yb = sampler.next()
            xb_t, _ = sampler_t.next()

            with torch.no_grad():
                feat_a = net.extract_features(xb)
                feat_t = net.extract_features(xb_t)
            fla_val = losses.fla_loss(
                scores_from_logits(discs.feature(feat_a)),
                scores_from_logits(discs.feature(feat_t)), convention="standard")
            _step(opt_df, -w.fla * fla_val, list(discs.feature.parameters()),
                  "stage3 feature discriminator")

            norm_a = norm_t = None
            if use_cla:
                with torch.no_grad():
                    target_pseudo = losses.pseudo_label(net(xb_t))
                norm_a = _grid_weights(yb.numpy(), grid, net.config.num_classes)
                norm_t = _grid_weights(target_pseudo, grid, net.config.num_classes)
                dc_value = losses.cla_loss(
                    scores_from_logits(discs.per_class(feat_t)),
                    scores_from_logits(discs.per_class(feat_a)),
                    norm_t, norm_a)
                _step(opt_dc, -w.cla * dc_value, list(discs.per_class.parameters()),
                      "stage3 class discriminator")

            logits, feat = net.logits_and_features(xb)
            if config.task_kind == KIND_CLASSIFICATION:
                task_val = losses.task_loss_classification(logits, yb)
            else:
                task_val = losses.task_loss_segmentation(logits, yb)
            total = w.task * task_val + w.fla * _nonsat(discs.feature(feat))
            if use_cla:
                scores_c = scores_from_logits(discs.per_class(feat))
                weights_c = torch.as_tensor(norm_a, dtype=scores_c.dtype)
                fool_cla = -(weights_c * torch.log(scores_c)).sum(dim=(1, 2)).mean()
                total = total + w.cla * fool_cla
            _step(opt_task, total, list(net.parameters()), "stage3 task")

            sums["task"] += float(task_val.detach())
            sums["fla"] += float(fla_val.detach())
            if use_cla:
                sums["cla"] += float(dc_value.detach())

        record = {"task": sums["task"] / steps, "fla": sums["fla"] / steps}
        if use_cla:
            record["cla"] = sums["cla"] / steps
        if not config.deterministic:
            record["wall_time"] = time.perf_counter() - t0
        _record(state, out_dir, stage=3, epoch=epoch, **record)
        _epoch_checkpoint(state, config, out_dir)

    state.stage = 3
    return state


def train_task_baseline(bundles: Sequence[DomainBundle], config: TrainConfig,
                        epochs: int | None = None) -> models.TaskNetwork:
    """Task network trained directly on the given labeled bundles (no
    translation, no alignment): the source-only reference point."""
    _apply_determinism(config)
    for b in bundles:
        if not b.is_labeled:
            raise ConfigurationError("baseline training needs labeled bundles")
    net = models.build_task_network(config.task_kind, bundles[0].num_classes,
                                    base_width=config.task_width,
                                    channels=bundles[0].image_shape[2],
                                    seed=_derive_seed(config.seed, 50))
    opt = torch.optim.Adam(net.parameters(), lr=config.lr_task)
    images = batch_to_torch(np.concatenate([b.images for b in bundles]))
    labels = np.concatenate([b.labels for b in bundles])
    if epochs is None:
        epochs = config.stage1_task_epochs + config.stage3_epochs
    for epoch in range(epochs):
        rng = _set_epoch_seed(config, 0, 9, epoch)
        _task_epoch(net, opt, images, labels, config, rng, "baseline task")
    return net


def baseline_report(bundles: Sequence[DomainBundle], eval_bundle: DomainBundle,
                    config: TrainConfig, epochs: int | None = None) -> MetricReport:
    """Evaluate a source-only baseline on a labeled evaluation bundle."""
    net = train_task_baseline(bundles, config, epochs=epochs)
    payload = models.pack_checkpoint(
        {"task": net}, config.to_dict(),
        extra={"task_kind": config.task_kind,
               "num_classes": bundles[0].num_classes,
               "task_base_width": config.task_width,
               "channels": bundles[0].image_shape[2],
               "stage": 0, "mode": "source_only"})
    return evaluate(payload, eval_bundle)


def _grid_weights(label_maps: np.ndarray, grid: GridSpec, num_classes: int) -> np.ndarray:
    """Normalized per-class grid frequencies for a batch of label maps."""
    out = np.zeros((len(label_maps), num_classes, grid.num_cells), dtype=np.float64)
    for b, lab in enumerate(label_maps):
        hist = losses.grid_label_histogram(lab, grid, num_classes)
        out[b] = losses.normalize_grid_labels(hist).normalized
    return out


# ---------------------------------------------------------------------------
# Checkpointing and the full protocol
# ---------------------------------------------------------------------------

def _component_map(state: TrainState) -> dict[str, torch.nn.Module]:
    comps: dict[str, torch.nn.Module] = {"task": state.task_net}
    for i, pair in enumerate(state.translators):
        comps["translator_fwd_%d" % i] = pair.forward
        comps["translator_bwd_%d" % i] = pair.backward
    comps["disc_target"] = state.discriminators.target_pixel
    for i, d in enumerate(state.discriminators.per_source_pixel):
        comps["disc_source_%d" % i] = d
    for i, d in enumerate(state.discriminators.aggregation):
        comps["disc_agg_%d" % i] = d
    comps["disc_feature"] = state.discriminators.feature
    if state.discriminators.per_class is not None:
        comps["disc_class"] = state.discriminators.per_class
    for i, f in enumerate(state.frozen_sources):
        comps["frozen_%d" % i] = f
    return comps


def save_state(state: TrainState, config: TrainConfig, path: Path) -> None:
    h, w, c = state.target.image_shape
    payload = models.pack_checkpoint(
        _component_map(state), config.to_dict(),
        extra={
            "task_kind": config.task_kind,
            "mode": config.mode,
            "num_classes": state.task_net.config.num_classes,
            "task_base_width": config.task_width,
            "channels": c,
            "image_size": [h, w, c],
            "source_names": [b.name for b in state.sources],
            "stage": state.stage,
            "round": state.round,
            "history": list(state.history),
            "has_frozen": bool(state.frozen_sources),
        })
    models.save_checkpoint(path, payload)


def load_state(path: Path, sources: Sequence[DomainBundle], target: DomainBundle,
               ) -> tuple[TrainState, TrainConfig]:
    payload = models.load_checkpoint(path)
    config = TrainConfig.from_dict(payload["config"])
    state = build_state(sources, target, config)
    if payload.get("has_frozen"):
        state.frozen_sources = []
        for i in range(len(sources)):
            snap = copy.deepcopy(state.task_net)
            snap.role = "F_i"
            for p in snap.parameters():
                p.requires_grad_(False)
            state.frozen_sources.append(snap)
    models.restore_components(payload, _component_map(state), config.to_dict())
    state.stage = payload["stage"]
    state.round = payload["round"]
    state.history = list(payload["history"])
    return state, config


def _resolve_data(data, config: TrainConfig):
    if isinstance(data, (str, Path)):
        data = load_manifest(data)
    if isinstance(data, DatasetManifest):
        sources = [load_bundle(data, n) for n in data.source_names]
        target = load_bundle(data, data.target_name)
        evals = [load_bundle(data, n) for n in data.eval_names]
        return sources, target, (evals[0] if evals else None)
    if isinstance(data, SynthSpec):
        if config.task_kind == KIND_CLASSIFICATION:
            bundles = synthesize_classification_domains(data)
        else:
            bundles = synthesize_segmentation_domains(data)
        eval_bundle = synthesize_target_eval_bundle(data, config.task_kind)
        return bundles[:-1], bundles[-1], eval_bundle
    sources, target = list(data[0]), data[1]
    eval_bundle = data[2] if len(data) > 2 else None
    return sources, target, eval_bundle


def train(data, config: TrainConfig, out_dir: Path | None = None,
          ) -> tuple[TrainState, MetricReport | None]:
    """Run the full protocol: stages 1 -> 2 -> 3 for ``outer_iterations``
    rounds, emitting per-stage checkpoints and a final evaluation when a
    labeled evaluation bundle is available."""
    sources, target, eval_bundle = _resolve_data(data, config)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "history.jsonl").write_text("")

    state: TrainState | None = None
    for _ in range(config.outer_iterations):
        state = stage1_pretrain(sources, target, config, state=state, out_dir=out_dir)
        if out_dir is not None:
            save_state(state, config, out_dir / ("round%d_stage1.pt" % state.round))
        state = stage2_aggregate(state, config, out_dir=out_dir)
        if out_dir is not None:
            save_state(state, config, out_dir / ("round%d_stage2.pt" % state.round))
        state = stage3_task_train(state, config, out_dir=out_dir)
        if out_dir is not None:
            save_state(state, config, out_dir / ("round%d_stage3.pt" % state.round))

    report = None
    if out_dir is not None:
        save_state(state, config, out_dir / "final.pt")
    if eval_bundle is not None:
        if out_dir is not None:
            report = evaluate(out_dir / "final.pt", eval_bundle)
        else:
            tmp_components = _component_map(state)
            payload = models.pack_checkpoint(
                tmp_components, config.to_dict(),
                extra={"task_kind": config.task_kind, "mode": config.mode,
                       "num_classes": state.task_net.config.num_classes,
                       "task_base_width": config.task_width,
                       "channels": state.target.image_shape[2],
                       "stage": state.stage})
            report = evaluate(payload, eval_bundle)
        _record(state, out_dir, stage=3, event="final_eval",
                overall=report.overall, micro=report.micro)
        if out_dir is not None:
            report.save(out_dir / "report.json")
    return state, report
