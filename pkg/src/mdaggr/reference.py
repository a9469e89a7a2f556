"""Slow, loop-based oracle implementations used as test ground truth.

Everything here recomputes the losses, metrics, and grid bookkeeping with
explicit Python loops and 64-bit floats, sharing no code with the
vectorized implementations it verifies. Inputs are capped at 1e4 elements;
these oracles are for checking, not for training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, OracleSizeError

EPS = 1e-7
MAX_ORACLE_ELEMENTS = 10_000


def _arr(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.size > MAX_ORACLE_ELEMENTS:
        raise OracleSizeError("oracle input has %d elements (limit %d)"
                              % (a.size, MAX_ORACLE_ELEMENTS))
    return a


def _clamp01(v: float) -> float:
    return min(max(float(v), EPS), 1.0 - EPS)


def _mean_log(values, of_one_minus: bool = False) -> float:
    flat = _arr(values).reshape(-1)
    total = 0.0
    for v in flat:
        s = _clamp01(v)
        total += math.log(1.0 - s) if of_one_minus else math.log(s)
    return total / flat.size


# ---------------------------------------------------------------------------
# Adversarial and consistency losses
# ---------------------------------------------------------------------------

def naive_gan_loss_src_to_tgt(d_on_adapted, d_on_target, convention="standard") -> float:
    if convention == "paper_literal":
        return _mean_log(d_on_adapted) + _mean_log(d_on_target, of_one_minus=True)
    if convention == "standard":
        return _mean_log(d_on_target) + _mean_log(d_on_adapted, of_one_minus=True)
    raise ContractViolation("unknown convention %r" % (convention,))


def naive_gan_loss_tgt_to_src(d_on_source, d_on_backtranslated, convention="standard") -> float:
    if convention == "paper_literal":
        return _mean_log(d_on_source, of_one_minus=True) + _mean_log(d_on_backtranslated)
    if convention == "standard":
        return _mean_log(d_on_source) + _mean_log(d_on_backtranslated, of_one_minus=True)
    raise ContractViolation("unknown convention %r" % (convention,))


def naive_fla_loss(d_on_adapted_features, d_on_target_features, convention="standard") -> float:
    return naive_gan_loss_src_to_tgt(d_on_adapted_features, d_on_target_features, convention)


def naive_cycle_loss(x, x_roundtrip) -> float:
    a = _arr(x).reshape(-1)
    b = _arr(x_roundtrip).reshape(-1)
    if a.size != b.size:
        raise ContractViolation("cycle inputs differ in size")
    total = 0.0
    for u, v in zip(a, b):
        total += abs(float(u) - float(v))
    return total / a.size


def _softmax_row(row) -> list[float]:
    m = max(float(v) for v in row)
    exps = [math.exp(float(v) - m) for v in row]
    s = sum(exps)
    return [e / s for e in exps]


def _log_clamped(p: float) -> float:
    return math.log(max(p, EPS))


def naive_dsc_loss(dynamic_logits, frozen_logits) -> float:
    """KL(softmax(dynamic) || softmax(frozen)), clamped logs, site-meaned,
    floored at zero."""
    dyn = _arr(dynamic_logits)
    fro = _arr(frozen_logits)
    if dyn.shape != fro.shape:
        raise ContractViolation("logit shapes differ")
    if dyn.ndim == 2:          # (B, L)
        sites = [(b,) for b in range(dyn.shape[0])]
        rows_dyn = [dyn[b] for b, in sites]
        rows_fro = [fro[b] for b, in sites]
    elif dyn.ndim == 4:        # (B, L, H, W)
        rows_dyn, rows_fro = [], []
        for b in range(dyn.shape[0]):
            for h in range(dyn.shape[2]):
                for w in range(dyn.shape[3]):
                    rows_dyn.append(dyn[b, :, h, w])
                    rows_fro.append(fro[b, :, h, w])
    else:
        raise ContractViolation("dsc oracle expects (B, L) or (B, L, H, W)")
    total = 0.0
    for p_row, q_row in zip(rows_dyn, rows_fro):
        p = _softmax_row(p_row)
        q = _softmax_row(q_row)
        total += sum(pi * (_log_clamped(pi) - _log_clamped(qi)) for pi, qi in zip(p, q))
    return max(0.0, total / len(rows_dyn))


def naive_sad_loss(d_own, d_others) -> float:
    if not len(d_others):
        raise ContractViolation("sad oracle needs at least one other domain")
    other = sum(_mean_log(d, of_one_minus=True) for d in d_others) / len(d_others)
    return _mean_log(d_own) + other


def naive_ccd_loss(d_on_real_source, d_on_cross_cycled) -> float:
    if not len(d_on_cross_cycled):
        raise ContractViolation("ccd oracle needs at least one cross-cycled batch")
    other = sum(_mean_log(d, of_one_minus=True) for d in d_on_cross_cycled)
    return _mean_log(d_on_real_source) + other / len(d_on_cross_cycled)


def naive_task_loss_classification(logits, labels) -> float:
    z = _arr(logits)
    lab = np.asarray(labels)
    total = 0.0
    for row, y in zip(z, lab):
        p = _softmax_row(row)
        total += -_log_clamped(p[int(y)])
    return total / len(lab)


def naive_task_loss_segmentation(logit_maps, label_maps, ignore=255) -> float:
    z = _arr(logit_maps)          # (B, L, H, W)
    lab = np.asarray(label_maps)  # (B, H, W)
    total, count = 0.0, 0
    for b in range(z.shape[0]):
        for h in range(z.shape[2]):
            for w in range(z.shape[3]):
                y = int(lab[b, h, w])
                if y == ignore:
                    continue
                p = _softmax_row(z[b, :, h, w])
                total += -_log_clamped(p[y])
                count += 1
    if count == 0:
        raise ContractViolation("all pixels ignored; loss undefined")
    return total / count


def naive_pseudo_label(logits) -> np.ndarray:
    """Argmax over the class axis; ties resolve to the lowest class index."""
    z = _arr(logits)
    class_dim = 0 if z.ndim in (1, 3) else 1
    moved = np.moveaxis(z, class_dim, -1)
    flat = moved.reshape(-1, moved.shape[-1])
    out = np.empty(flat.shape[0], dtype=np.int64)
    for i, row in enumerate(flat):
        best, best_v = 0, float(row[0])
        for c in range(1, row.size):
            if float(row[c]) > best_v:
                best, best_v = c, float(row[c])
        out[i] = best
    return out.reshape(moved.shape[:-1])


# ---------------------------------------------------------------------------
# Grid labels and category-level loss
# ---------------------------------------------------------------------------

def naive_grid_label_histogram(label_map, rows, cols, num_classes, ignore=255) -> np.ndarray:
    lab = np.asarray(label_map)
    h, w = lab.shape
    if h % rows or w % cols:
        raise ContractViolation("grid %dx%d does not partition %dx%d" % (rows, cols, h, w))
    ch, cw = h // rows, w // cols
    raw = np.zeros((num_classes, rows * cols), dtype=np.float64)
    for gr in range(rows):
        for gc in range(cols):
            n = gr * cols + gc
            counts = [0] * num_classes
            valid = 0
            for i in range(gr * ch, (gr + 1) * ch):
                for j in range(gc * cw, (gc + 1) * cw):
                    y = int(lab[i, j])
                    if y == ignore:
                        continue
                    counts[y] += 1
                    valid += 1
            if valid:
                for c in range(num_classes):
                    raw[c, n] = counts[c] / valid
    return raw


def naive_normalize_grid_labels(raw) -> np.ndarray:
    raw = _arr(raw)
    out = np.zeros_like(raw)
    for c in range(raw.shape[0]):
        denom = sum(float(v) for v in raw[c])
        if denom > 0.0:
            for n in range(raw.shape[1]):
                out[c, n] = float(raw[c, n]) / denom
    return out


def naive_cla_loss(scores_adapted, scores_target, norm_adapted, norm_target) -> float:
    sa, st = _arr(scores_adapted), _arr(scores_target)
    na, nt = _arr(norm_adapted), _arr(norm_target)
    if sa.ndim == 2:
        sa, st, na, nt = sa[None], st[None], na[None], nt[None]
    total = 0.0
    batch = sa.shape[0]
    for b in range(batch):
        for c in range(sa.shape[1]):
            for n in range(sa.shape[2]):
                total += float(na[b, c, n]) * math.log(_clamp01(sa[b, c, n]))
                total += float(nt[b, c, n]) * math.log(1.0 - _clamp01(st[b, c, n]))
    return total / batch


def naive_total_loss(components: dict, weights: dict, terms) -> float:
    total = 0.0
    for term in terms:
        total += float(weights[term]) * float(components[term])
    return total


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def naive_classification_accuracy(predictions, labels) -> float:
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    per_class = []
    for c in sorted(set(int(v) for v in labs)):
        hits, total = 0, 0
        for p, y in zip(preds, labs):
            if int(y) == c:
                total += 1
                hits += int(int(p) == c)
        per_class.append(hits / total)
    return sum(per_class) / len(per_class)


def naive_class_wise_iou(pred_maps, gt_maps, num_classes, ignore=255) -> list:
    preds = np.asarray(pred_maps).reshape(-1)
    gts = np.asarray(gt_maps).reshape(-1)
    out = []
    for c in range(num_classes):
        inter, union = 0, 0
        for p, g in zip(preds, gts):
            if int(g) == ignore:
                continue
            in_p = int(p) == c
            in_g = int(g) == c
            inter += int(in_p and in_g)
            union += int(in_p or in_g)
        out.append(inter / union if union else None)
    return out


def naive_mean_iou(cwiou) -> float:
    present = [v for v in cwiou if v is not None]
    return sum(present) / len(present)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradientCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    relative_error: np.ndarray
    max_relative_error: float
    step: float
    tolerance: float
    passed: bool


def finite_difference_gradient(loss_fn, params, step: float = 1e-3,
                               tolerance: float = 1e-4) -> GradientCheckReport:
    """Central-difference gradient of ``loss_fn`` at ``params``, compared
    against the analytic (autograd) gradient.

    ``params`` is a single torch tensor; ``loss_fn(params)`` must return a
    scalar. The check runs in float64 regardless of the input dtype.
    """
    import torch

    base = params.detach().to(torch.float64)
    leaf = base.clone().requires_grad_(True)
    value = loss_fn(leaf)
    if not torch.isfinite(torch.as_tensor(value)).all():
        raise ContractViolation("loss is non-finite at the probe point")
    grad, = torch.autograd.grad(value, leaf, allow_unused=False)
    analytic = grad.detach().cpu().numpy().reshape(-1)

    flat = base.clone().reshape(-1)
    numeric = np.empty(flat.numel(), dtype=np.float64)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            for sign in (+1.0, -1.0):
                flat[i] = orig + sign * step
                probe = loss_fn(flat.reshape(base.shape))
                probe = float(probe)
                if not math.isfinite(probe):
                    raise ContractViolation("loss is non-finite at a probe point")
                if sign > 0:
                    f_plus = probe
                else:
                    f_minus = probe
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * step)

    # gradients below the floor compare on an absolute scale: both sides of
    # a mathematically-zero gradient carry only O(1e-12) round-off noise
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradientCheckReport(
        analytic=analytic, numeric=numeric, relative_error=rel,
        max_relative_error=max_rel, step=step, tolerance=tolerance,
        passed=max_rel <= tolerance)
