"""Shared drivers for oracle-equivalence and gradient-check sweeps.

Both the per-module tests and the acceptance suite run these; the module
tests use fewer instances for quick feedback, the acceptance suite the full
counts at the pinned tolerances.
"""

import numpy as np
import torch

from mdaggr import evaluation, losses, reference


def _scores(rng, shape):
    return torch.tensor(rng.uniform(0.05, 0.95, size=shape), dtype=torch.float64)


def _grad_scores(rng, shape):
    # away from the clamp and from the high-curvature ends of log(1 - s),
    # where central differences at the pinned step exceed the tolerance
    return torch.tensor(rng.uniform(0.12, 0.88, size=shape), dtype=torch.float64)


def _logits(rng, shape):
    return torch.tensor(rng.normal(0.0, 2.5, size=shape), dtype=torch.float64)


def oracle_equivalence_cases(rng):
    """Yield (name, vectorized_value, oracle_value) for one random draw."""
    a, t = _scores(rng, (8,)), _scores(rng, (8,))
    for conv in losses.CONVENTIONS:
        yield ("gan_src_to_tgt/%s" % conv,
               float(losses.gan_loss_src_to_tgt(a, t, conv)),
               reference.naive_gan_loss_src_to_tgt(a.numpy(), t.numpy(), conv))
        yield ("gan_tgt_to_src/%s" % conv,
               float(losses.gan_loss_tgt_to_src(a, t, conv)),
               reference.naive_gan_loss_tgt_to_src(a.numpy(), t.numpy(), conv))
        yield ("fla/%s" % conv,
               float(losses.fla_loss(a, t, conv)),
               reference.naive_fla_loss(a.numpy(), t.numpy(), conv))

    x = torch.tensor(rng.uniform(-1, 1, size=(4, 2, 5, 5)), dtype=torch.float64)
    y = torch.tensor(rng.uniform(-1, 1, size=(4, 2, 5, 5)), dtype=torch.float64)
    yield ("cycle", float(losses.cycle_loss(x, y)),
           reference.naive_cycle_loss(x.numpy(), y.numpy()))

    dyn, fro = _logits(rng, (4, 5)), _logits(rng, (4, 5))
    yield ("dsc/classification", float(losses.dsc_loss(dyn, fro)),
           reference.naive_dsc_loss(dyn.numpy(), fro.numpy()))
    dyn4, fro4 = _logits(rng, (2, 3, 4, 4)), _logits(rng, (2, 3, 4, 4))
    yield ("dsc/segmentation", float(losses.dsc_loss(dyn4, fro4)),
           reference.naive_dsc_loss(dyn4.numpy(), fro4.numpy()))

    own = _scores(rng, (6,))
    others = [_scores(rng, (6,)) for _ in range(2)]
    yield ("sad", float(losses.sad_loss(own, others)),
           reference.naive_sad_loss(own.numpy(), [o.numpy() for o in others]))
    yield ("ccd", float(losses.ccd_loss(own, others)),
           reference.naive_ccd_loss(own.numpy(), [o.numpy() for o in others]))

    logits = _logits(rng, (6, 4))
    labels = rng.integers(0, 4, size=6)
    yield ("task/classification",
           float(losses.task_loss_classification(logits, torch.tensor(labels))),
           reference.naive_task_loss_classification(logits.numpy(), labels))

    maps = _logits(rng, (2, 3, 4, 4))
    lab_maps = rng.integers(0, 3, size=(2, 4, 4))
    lab_maps[0, 0, 0] = 255
    yield ("task/segmentation",
           float(losses.task_loss_segmentation(maps, torch.tensor(lab_maps))),
           reference.naive_task_loss_segmentation(maps.numpy(), lab_maps))

    seg_logits = _logits(rng, (3, 4, 4))
    yield ("pseudo_label",
           float(np.abs(losses.pseudo_label(seg_logits)
                        - reference.naive_pseudo_label(seg_logits.numpy())).max()),
           0.0)

    lab = rng.integers(0, 4, size=(8, 8))
    lab[0, :3] = 255
    grid = losses.GridSpec(2, 4)
    hist = losses.grid_label_histogram(lab, grid, 4)
    naive_hist = reference.naive_grid_label_histogram(lab, 2, 4, 4)
    yield ("grid_label_histogram", float(np.abs(hist.raw - naive_hist).max()), 0.0)
    norm = losses.normalize_grid_labels(hist).normalized
    yield ("normalize_grid_labels",
           float(np.abs(norm - reference.naive_normalize_grid_labels(hist.raw)).max()), 0.0)

    n = 6
    sa, st = _scores(rng, (2, 3, n)), _scores(rng, (2, 3, n))
    wa = rng.uniform(0, 1, size=(2, 3, n))
    wa[:, 1, :] = 0.0
    wt = rng.uniform(0, 1, size=(2, 3, n))
    yield ("cla", float(losses.cla_loss(sa, st, torch.tensor(wa), torch.tensor(wt))),
           reference.naive_cla_loss(sa.numpy(), st.numpy(), wa, wt))

    comps = {k: float(rng.normal()) for k in losses.MADAN_TERMS}
    weights = losses.LossWeights(**{k: float(rng.uniform(0, 2))
                                    for k in losses.LossWeights().as_dict()})
    yield ("total_madan", float(losses.total_madan_loss(comps, weights)),
           reference.naive_total_loss(comps, weights.as_dict(), losses.MADAN_TERMS))
    comps_p = {k: float(rng.normal()) for k in losses.MADAN_PLUS_TERMS}
    yield ("total_madan_plus", float(losses.total_madan_plus_loss(comps_p, weights)),
           reference.naive_total_loss(comps_p, weights.as_dict(), losses.MADAN_PLUS_TERMS))

    preds = rng.integers(0, 4, size=40)
    labs = rng.integers(0, 3, size=40)
    yield ("classification_accuracy",
           evaluation.classification_accuracy(preds, labs),
           reference.naive_classification_accuracy(preds, labs))

    pmap = rng.integers(0, 3, size=(2, 6, 6))
    gmap = rng.integers(0, 3, size=(2, 6, 6))
    gmap[0, 0, 0] = 255
    cw = evaluation.class_wise_iou(pmap, gmap, 4)
    naive_cw = reference.naive_class_wise_iou(pmap, gmap, 4)
    diffs = [abs(v - n_) for v, n_ in zip(cw, naive_cw)
             if n_ is not None and not np.isnan(v)]
    agree = all((n_ is None) == bool(np.isnan(v)) for v, n_ in zip(cw, naive_cw))
    yield ("class_wise_iou", max(diffs) if diffs else 0.0, 0.0 if agree else 1.0)
    yield ("mean_iou", evaluation.mean_iou(cw), reference.naive_mean_iou(naive_cw))


def run_oracle_equivalence(instances: int, seed: int = 7, tolerance: float = 1e-10):
    """Max |vectorized - oracle| per operation over ``instances`` draws."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(instances):
        for name, got, want in oracle_equivalence_cases(rng):
            diff = abs(got - want)
            worst[name] = max(worst.get(name, 0.0), diff)
    failures = {k: v for k, v in worst.items() if v > tolerance}
    return worst, failures


def gradient_cases(rng):
    """Yield (name, loss_fn, input_tensor) for finite-difference checks.

    ``loss_fn`` closes over every other input; only ``input_tensor`` varies.
    """
    a, t = _grad_scores(rng, (6,)), _grad_scores(rng, (6,))
    for conv in losses.CONVENTIONS:
        yield ("gan_src_to_tgt/%s/adapted" % conv,
               lambda v, t=t, c=conv: losses.gan_loss_src_to_tgt(v, t, c), a)
        yield ("gan_src_to_tgt/%s/target" % conv,
               lambda v, a=a, c=conv: losses.gan_loss_src_to_tgt(a, v, c), t)
        yield ("gan_tgt_to_src/%s/source" % conv,
               lambda v, t=t, c=conv: losses.gan_loss_tgt_to_src(v, t, c), a)
        yield ("gan_tgt_to_src/%s/backtranslated" % conv,
               lambda v, a=a, c=conv: losses.gan_loss_tgt_to_src(a, v, c), t)
        yield ("fla/%s/adapted" % conv,
               lambda v, t=t, c=conv: losses.fla_loss(v, t, c), a)
        yield ("fla/%s/target" % conv,
               lambda v, a=a, c=conv: losses.fla_loss(a, v, c), t)

    x = torch.tensor(rng.uniform(-0.8, 0.8, size=(2, 1, 4, 4)), dtype=torch.float64)
    y = torch.tensor(rng.uniform(-0.8, 0.8, size=(2, 1, 4, 4)), dtype=torch.float64)
    yield ("cycle/x", lambda v, y=y: losses.cycle_loss(v, y), x)
    yield ("cycle/roundtrip", lambda v, x=x: losses.cycle_loss(x, v), y)

    dyn, fro = _logits(rng, (3, 4)), _logits(rng, (3, 4))
    yield ("dsc/dynamic", lambda v, f=fro: losses.dsc_loss(v, f), dyn)
    dyn4, fro4 = _logits(rng, (2, 3, 3, 3)), _logits(rng, (2, 3, 3, 3))
    yield ("dsc/dynamic_seg", lambda v, f=fro4: losses.dsc_loss(v, f), dyn4)

    own = _grad_scores(rng, (5,))
    o1, o2 = _grad_scores(rng, (5,)), _grad_scores(rng, (5,))
    yield ("sad/own", lambda v, o1=o1, o2=o2: losses.sad_loss(v, [o1, o2]), own)
    yield ("sad/other", lambda v, own=own, o2=o2: losses.sad_loss(own, [v, o2]), o1)
    yield ("ccd/source", lambda v, o1=o1, o2=o2: losses.ccd_loss(v, [o1, o2]), own)
    yield ("ccd/cross", lambda v, own=own, o2=o2: losses.ccd_loss(own, [v, o2]), o1)

    logits = _logits(rng, (4, 3))
    labels = torch.tensor(rng.integers(0, 3, size=4))
    yield ("task_classification/logits",
           lambda v, y=labels: losses.task_loss_classification(v, y), logits)

    maps = _logits(rng, (2, 3, 3, 3))
    lab_maps = rng.integers(0, 3, size=(2, 3, 3))
    lab_maps[0, 0, 0] = 255
    lab_t = torch.tensor(lab_maps)
    yield ("task_segmentation/logit_maps",
           lambda v, y=lab_t: losses.task_loss_segmentation(v, y), maps)

    sa, st = _grad_scores(rng, (2, 2, 4)), _grad_scores(rng, (2, 2, 4))
    wa = torch.tensor(rng.uniform(0, 1, size=(2, 2, 4)), dtype=torch.float64)
    wt = torch.tensor(rng.uniform(0, 1, size=(2, 2, 4)), dtype=torch.float64)
    yield ("cla/adapted", lambda v, st=st, wa=wa, wt=wt: losses.cla_loss(v, st, wa, wt), sa)
    yield ("cla/target", lambda v, sa=sa, wa=wa, wt=wt: losses.cla_loss(sa, v, wa, wt), st)


def run_gradient_suite(instances: int, seed: int = 11, step: float = 1e-3,
                       tolerance: float = 1e-4):
    """Max relative error per input slot over ``instances`` random draws."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(instances):
        for name, fn, tensor in gradient_cases(rng):
            report = reference.finite_difference_gradient(fn, tensor, step=step,
                                                          tolerance=tolerance)
            worst[name] = max(worst.get(name, 0.0), report.max_relative_error)
    failures = {k: v for k, v in worst.items() if v > tolerance}
    return worst, failures
