"""Differentiable losses for translation, aggregation, task training, and
category-level alignment, plus the grid-label bookkeeping they need.

Scalar losses are means over the batch (and over patch/pixel sites), so
values are batch-size invariant. Every log argument is clamped to
``[EPS, 1 - EPS]``.

Two sign conventions are supported for the adversarial losses:

* ``paper_literal`` — the printed forms, where the adapted side carries the
  positive log term;
* ``standard`` (default) — the conventional assignment with the target side
  real and the adapted side fake, which is what training uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import Tensor
from torch.nn import functional as F

from .errors import CompositionError, ContractViolation, UndefinedLossError

EPS = 1e-7
_LOG_EPS = math.log(EPS)

CONVENTIONS = ("standard", "paper_literal")


def _check_convention(convention: str) -> None:
    if convention not in CONVENTIONS:
        raise ContractViolation("unknown convention %r" % (convention,))


def clamp_scores(scores: Tensor) -> Tensor:
    """Clamp discriminator scores into (0, 1); values outside [0, 1] by more
    than 1e-6 violate the Score contract."""
    detached = scores.detach()
    if not torch.isfinite(detached).all():
        raise ContractViolation("scores contain non-finite values")
    lo, hi = float(detached.min()), float(detached.max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        raise ContractViolation("scores outside [0, 1]: min=%g max=%g" % (lo, hi))
    return scores.clamp(EPS, 1.0 - EPS)


def scores_from_logits(raw: Tensor) -> Tensor:
    """Logistic map applied at the loss boundary to raw discriminator output."""
    return torch.sigmoid(raw).clamp(EPS, 1.0 - EPS)


def _mean_log(scores: Tensor) -> Tensor:
    return torch.log(clamp_scores(scores)).mean()


def _mean_log1m(scores: Tensor) -> Tensor:
    return torch.log(1.0 - clamp_scores(scores)).mean()


# ---------------------------------------------------------------------------
# Translation losses
# ---------------------------------------------------------------------------

def gan_loss_src_to_tgt(d_on_adapted: Tensor, d_on_target: Tensor,
                        convention: str = "standard") -> Tensor:
    """Adversarial value for the source-to-target direction.

    paper_literal: E[log D(adapted)] + E[log(1 - D(target))]
    standard:      E[log D(target)] + E[log(1 - D(adapted))]
    """
    _check_convention(convention)
    if convention == "paper_literal":
        return _mean_log(d_on_adapted) + _mean_log1m(d_on_target)
    return _mean_log(d_on_target) + _mean_log1m(d_on_adapted)


def gan_loss_tgt_to_src(d_on_source: Tensor, d_on_backtranslated: Tensor,
                        convention: str = "standard") -> Tensor:
    """Adversarial value for the target-to-source direction.

    paper_literal: E[log(1 - D(source))] + E[log D(backtranslated)]
    standard:      E[log D(source)] + E[log(1 - D(backtranslated))]
    """
    _check_convention(convention)
    if convention == "paper_literal":
        return _mean_log1m(d_on_source) + _mean_log(d_on_backtranslated)
    return _mean_log(d_on_source) + _mean_log1m(d_on_backtranslated)


def cycle_loss(x: Tensor, x_roundtrip: Tensor) -> Tensor:
    """Mean absolute reconstruction error for one translation round trip."""
    if x.shape != x_roundtrip.shape:
        raise ContractViolation("cycle shapes differ: %r vs %r"
                                % (tuple(x.shape), tuple(x_roundtrip.shape)))
    return (x - x_roundtrip).abs().mean()


def dsc_loss(dynamic_logits: Tensor, frozen_source_logits: Tensor) -> Tensor:
    """Semantic-consistency KL between the adapting model's prediction on a
    translated image and a frozen per-source model's prediction on the
    original: KL(softmax(dynamic) || softmax(frozen)).

    The frozen side carries no gradient. Per-site mean for segmentation
    logits (B, L, H, W); clamped logs; floored at zero (KL is nonnegative,
    and the floor only binds past the clamp regime)."""
    if dynamic_logits.shape != frozen_source_logits.shape:
        raise ContractViolation("logit shapes differ: %r vs %r"
                                % (tuple(dynamic_logits.shape),
                                   tuple(frozen_source_logits.shape)))
    if not torch.isfinite(dynamic_logits).all() or not torch.isfinite(frozen_source_logits).all():
        raise ContractViolation("dsc logits contain non-finite values")
    frozen = frozen_source_logits.detach()
    p = F.softmax(dynamic_logits, dim=1)
    log_p = F.log_softmax(dynamic_logits, dim=1).clamp_min(_LOG_EPS)
    log_q = F.log_softmax(frozen, dim=1).clamp_min(_LOG_EPS)
    kl_per_site = (p * (log_p - log_q)).sum(dim=1)
    return kl_per_site.mean().clamp_min(0.0)


# ---------------------------------------------------------------------------
# Aggregation losses
# ---------------------------------------------------------------------------

def sad_loss(d_own: Tensor, d_others: Sequence[Tensor]) -> Tensor:
    """One-vs-rest adapted-domain discrimination value:
    E[log D(own)] + (1/(M-1)) * sum_j E[log(1 - D(other_j))]."""
    if not len(d_others):
        raise ContractViolation("sad_loss needs at least one other domain")
    other = torch.stack([_mean_log1m(d) for d in d_others]).mean()
    return _mean_log(d_own) + other


def ccd_loss(d_on_real_source: Tensor, d_on_cross_cycled: Sequence[Tensor]) -> Tensor:
    """Cross-cycled-image discrimination value against the real source:
    E[log D(source)] + (1/(M-1)) * sum_j E[log(1 - D(cross_cycled_j))]."""
    if not len(d_on_cross_cycled):
        raise ContractViolation("ccd_loss needs at least one cross-cycled batch")
    other = torch.stack([_mean_log1m(d) for d in d_on_cross_cycled]).mean()
    return _mean_log(d_on_real_source) + other


# ---------------------------------------------------------------------------
# Task losses
# ---------------------------------------------------------------------------

def task_loss_classification(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean cross-entropy -log softmax(logits)[label] over the batch."""
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ContractViolation("label outside [0, %d)" % (logits.shape[1],))
    log_p = F.log_softmax(logits, dim=1).clamp_min(_LOG_EPS)
    picked = log_p.gather(1, labels.view(-1, 1)).squeeze(1)
    return -picked.mean()


def task_loss_segmentation(logit_maps: Tensor, label_maps: Tensor,
                           ignore: int = 255) -> Tensor:
    """Pixel-wise cross-entropy, meaned over non-ignored pixels."""
    if logit_maps.shape[0] != label_maps.shape[0] or logit_maps.shape[2:] != label_maps.shape[1:]:
        raise ContractViolation("segmentation shapes differ: %r vs %r"
                                % (tuple(logit_maps.shape), tuple(label_maps.shape)))
    labels = torch.as_tensor(label_maps, dtype=torch.long, device=logit_maps.device)
    mask = labels != ignore
    if not bool(mask.any()):
        raise UndefinedLossError("every pixel is ignored; segmentation loss undefined")
    valid = labels[mask]
    if valid.min() < 0 or valid.max() >= logit_maps.shape[1]:
        raise ContractViolation("label outside [0, %d)" % (logit_maps.shape[1],))
    log_p = F.log_softmax(logit_maps, dim=1).clamp_min(_LOG_EPS)
    flat = log_p.permute(0, 2, 3, 1)[mask]
    picked = flat.gather(1, valid.view(-1, 1)).squeeze(1)
    return -picked.mean()


def fla_loss(d_on_adapted_features: Tensor, d_on_target_features: Tensor,
             convention: str = "standard") -> Tensor:
    """Feature-alignment adversarial value; same form and convention switch
    as the source-to-target image loss."""
    return gan_loss_src_to_tgt(d_on_adapted_features, d_on_target_features, convention)


# ---------------------------------------------------------------------------
# Pseudo-labels and grid labels
# ---------------------------------------------------------------------------

def pseudo_label(logits) -> np.ndarray:
    """Argmax labeling; ties break toward the lowest class index.

    The class axis is 0 for (L,) and (L, H, W) inputs, 1 for batched input."""
    z = logits.detach().cpu().numpy() if isinstance(logits, Tensor) else np.asarray(logits)
    if not np.all(np.isfinite(z)):
        raise ContractViolation("pseudo_label expects finite logits")
    class_dim = 0 if z.ndim in (1, 3) else 1
    return np.argmax(z, axis=class_dim).astype(np.int64)


@dataclass(frozen=True)
class GridSpec:
    """Regular grid whose cells exactly partition a label map."""

    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ContractViolation("grid dims must be positive")

    @property
    def num_cells(self) -> int:
        return self.rows * self.cols

    def check_partition(self, height: int, width: int) -> None:
        if height % self.rows or width % self.cols:
            raise ContractViolation("grid %dx%d does not partition %dx%d"
                                    % (self.rows, self.cols, height, width))


@dataclass(frozen=True)
class GridLabelMap:
    """Per-cell class frequencies: raw (L, N) in [0, 1], and the per-class
    normalized variant where each present class row sums to one."""

    raw: np.ndarray
    normalized: np.ndarray | None = None


def grid_label_histogram(label_map, grid: GridSpec, num_classes: int,
                         ignore: int = 255) -> GridLabelMap:
    """Fraction of each cell's non-ignored pixels belonging to each class."""
    lab = (label_map.detach().cpu().numpy() if isinstance(label_map, Tensor)
           else np.asarray(label_map))
    h, w = lab.shape
    grid.check_partition(h, w)
    ch, cw = h // grid.rows, w // grid.cols
    cells = lab.reshape(grid.rows, ch, grid.cols, cw).transpose(0, 2, 1, 3)
    cells = cells.reshape(grid.num_cells, ch * cw)
    raw = np.zeros((num_classes, grid.num_cells), dtype=np.float64)
    valid = cells != ignore
    counts = valid.sum(axis=1)
    for n in np.nonzero(counts)[0]:
        hist = np.bincount(cells[n][valid[n]], minlength=num_classes)[:num_classes]
        raw[:, n] = hist / counts[n]
    return GridLabelMap(raw=raw)


def normalize_grid_labels(grid_labels: GridLabelMap) -> GridLabelMap:
    """Normalize each class row across cells; absent classes stay all-zero."""
    raw = grid_labels.raw
    denom = raw.sum(axis=1, keepdims=True)
    normalized = np.divide(raw, denom, out=np.zeros_like(raw), where=denom > 0)
    return GridLabelMap(raw=raw, normalized=normalized)


def cla_loss(per_class_scores_adapted: Tensor, per_class_scores_target: Tensor,
             norm_adapted: Tensor, norm_target: Tensor) -> Tensor:
    """Category-weighted adversarial value over grid cells, batch-meaned:
    sum_{l,n} w_a[l,n] log D_l(cell) + sum_{l,n} w_t[l,n] log(1 - D_l(cell))."""
    sa, st = per_class_scores_adapted, per_class_scores_target
    wa = torch.as_tensor(norm_adapted, dtype=sa.dtype, device=sa.device)
    wt = torch.as_tensor(norm_target, dtype=st.dtype, device=st.device)
    if sa.shape != wa.shape or st.shape != wt.shape:
        raise ContractViolation("cla score/weight shapes differ")
    if sa.dim() == 2:
        sa, st, wa, wt = sa[None], st[None], wa[None], wt[None]
    if sa.dim() != 3:
        raise ContractViolation("cla expects (L, N) or (B, L, N) scores")
    term_a = (wa * torch.log(clamp_scores(sa))).sum(dim=(1, 2))
    term_t = (wt * torch.log(1.0 - clamp_scores(st))).sum(dim=(1, 2))
    return (term_a + term_t).mean()


# ---------------------------------------------------------------------------
# Objective composition
# ---------------------------------------------------------------------------

MADAN_TERMS = ("gan_src_to_tgt", "gan_tgt_to_src", "cycle", "dsc",
               "sad", "ccd", "task", "fla")
MADAN_PLUS_TERMS = ("cag", "sad", "ccd", "task", "fla", "cla")


@dataclass(frozen=True)
class LossWeights:
    """One non-negative weight per objective term; all-ones reproduces the
    plain unweighted sums."""

    gan_src_to_tgt: float = 1.0
    gan_tgt_to_src: float = 1.0
    cycle: float = 1.0
    dsc: float = 1.0
    sad: float = 1.0
    ccd: float = 1.0
    task: float = 1.0
    fla: float = 1.0
    cla: float = 1.0
    cag: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ContractViolation("weight %s must be finite and >= 0, got %r"
                                        % (f.name, v))

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _weighted_sum(components: Mapping, weights: LossWeights, terms) -> Tensor:
    missing = [t for t in terms if t not in components]
    if missing:
        raise CompositionError("missing loss terms: %s" % (", ".join(missing),))
    unexpected = [k for k in components if k not in terms]
    if unexpected:
        raise CompositionError("unexpected loss terms: %s" % (", ".join(unexpected),))
    total = None
    for t in terms:
        value = components[t]
        if not isinstance(value, Tensor):
            value = torch.as_tensor(float(value), dtype=torch.float64)
        term = getattr(weights, t) * value
        total = term if total is None else total + term
    return total


def total_madan_loss(components: Mapping, weights: LossWeights = LossWeights()) -> Tensor:
    """Weighted sum of the eight per-round objective terms (per-source terms
    are summed by the caller before composition)."""
    return _weighted_sum(components, weights, MADAN_TERMS)


def total_madan_plus_loss(components: Mapping, weights: LossWeights = LossWeights()) -> Tensor:
    """Weighted sum of the segmentation-mode objective: multi-scale
    translation block plus aggregation, task, feature, and category terms."""
    return _weighted_sum(components, weights, MADAN_PLUS_TERMS)
