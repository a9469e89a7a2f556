"""Metrics, checkpoint evaluation, and report emission.

Classification quality is macro-averaged per-class accuracy (micro is also
reported); segmentation quality is class-wise IoU and its mean over classes
with nonzero union. Counts are accumulated as integers so sharded
evaluation reduces order-independently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import models
from .data import IGNORE_LABEL, KIND_CLASSIFICATION, KIND_SEGMENTATION, DomainBundle
from .errors import EvalError

def batch_to_torch(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, C) float arrays to (N, C, H, W) float32 tensors."""
    arr = np.ascontiguousarray(images.transpose(0, 3, 1, 2))
    if not arr.flags.writeable:  # bundles are read-only; torch wants writable
        arr = arr.copy()
    return torch.from_numpy(arr).float()


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def confusion_matrix(predictions, labels, num_classes: int,
                     ignore: int = IGNORE_LABEL) -> np.ndarray:
    """Integer confusion counts with ground truth on rows."""
    preds = np.asarray(predictions).reshape(-1)
    labs = np.asarray(labels).reshape(-1)
    if preds.shape != labs.shape:
        raise EvalError("prediction/label lengths differ")
    keep = labs != ignore
    preds, labs = preds[keep], labs[keep]
    idx = labs * num_classes + preds
    counts = np.bincount(idx, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes).astype(np.int64)


def classification_accuracy(predictions, labels) -> float:
    """Macro average of per-class accuracies; classes absent from the ground
    truth are excluded from the average."""
    preds = np.asarray(predictions).reshape(-1)
    labs = np.asarray(labels).reshape(-1)
    if preds.size == 0:
        raise EvalError("cannot compute accuracy of an empty prediction set")
    accs = []
    for c in np.unique(labs):
        sel = labs == c
        accs.append(float((preds[sel] == c).mean()))
    return float(np.mean(accs))


def micro_accuracy(predictions, labels) -> float:
    preds = np.asarray(predictions).reshape(-1)
    labs = np.asarray(labels).reshape(-1)
    if preds.size == 0:
        raise EvalError("cannot compute accuracy of an empty prediction set")
    return float((preds == labs).mean())


def class_wise_iou(pred_maps, gt_maps, num_classes: int,
                   ignore: int = IGNORE_LABEL) -> np.ndarray:
    """Set-based IoU per class; classes with empty prediction-union-truth get
    NaN (excluded, never scored 0 or 1). Ignored pixels leave both sets."""
    if num_classes < 1:
        raise EvalError("num_classes must be >= 1")
    cm = confusion_matrix(pred_maps, gt_maps, num_classes, ignore)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    out = np.full(num_classes, np.nan, dtype=np.float64)
    nonzero = union > 0
    out[nonzero] = inter[nonzero] / union[nonzero]
    return out


def mean_iou(cwiou) -> float:
    vals = np.asarray(cwiou, dtype=np.float64)
    present = vals[~np.isnan(vals)]
    if present.size == 0:
        raise EvalError("no class has a nonzero union; mIoU undefined")
    return float(present.mean())


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    task_kind: str
    overall: float
    per_class: list
    micro: float
    confusion: list
    sample_count: int
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "task_kind": self.task_kind,
            "overall": self.overall,
            "per_class": self.per_class,
            "micro": self.micro,
            "confusion": self.confusion,
            "sample_count": self.sample_count,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricReport":
        return cls(task_kind=doc["task_kind"], overall=doc["overall"],
                   per_class=doc["per_class"], micro=doc["micro"],
                   confusion=doc["confusion"], sample_count=doc["sample_count"],
                   metadata=doc.get("metadata", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls.from_dict(json.loads(text))

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: Path) -> "MetricReport":
        return cls.from_json(Path(path).read_text())


def _predict_bundle(net: models.TaskNetwork, bundle: DomainBundle,
                    batch_size: int = 64) -> np.ndarray:
    net.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, bundle.count, batch_size):
            batch = batch_to_torch(bundle.images[start:start + batch_size])
            logits = net(batch)
            outputs.append(logits.argmax(dim=1).cpu().numpy())
    return np.concatenate(outputs, axis=0)


def report_from_predictions(preds: np.ndarray, bundle: DomainBundle,
                            metadata: dict | None = None) -> MetricReport:
    labels = bundle.labels
    cm = confusion_matrix(preds, labels, bundle.num_classes)
    if bundle.kind == KIND_CLASSIFICATION:
        overall = classification_accuracy(preds, labels)
        per_class = []
        for c in range(bundle.num_classes):
            total = int(cm[c].sum())
            per_class.append(float(cm[c, c] / total) if total else None)
    else:
        cw = class_wise_iou(preds, labels, bundle.num_classes)
        overall = mean_iou(cw)
        per_class = [None if np.isnan(v) else float(v) for v in cw]
    micro = float(np.trace(cm) / cm.sum()) if cm.sum() else 0.0
    return MetricReport(task_kind=bundle.kind, overall=float(overall),
                        per_class=per_class, micro=micro,
                        confusion=cm.tolist(), sample_count=bundle.count,
                        metadata=metadata or {})


def evaluate(checkpoint, bundle: DomainBundle, batch_size: int = 64,
             plot_path: Path | None = None) -> MetricReport:
    """Full-pass deterministic evaluation of a checkpoint's task network on
    one labeled bundle."""
    payload = checkpoint if isinstance(checkpoint, dict) else models.load_checkpoint(checkpoint)
    if payload.get("task_kind") != bundle.kind:
        raise EvalError("checkpoint task kind %r does not match bundle kind %r"
                        % (payload.get("task_kind"), bundle.kind))
    if not bundle.is_labeled:
        raise EvalError("cannot evaluate on the unlabeled bundle %r" % (bundle.name,))
    if payload.get("num_classes") != bundle.num_classes:
        raise EvalError("checkpoint has %r classes, bundle has %r"
                        % (payload.get("num_classes"), bundle.num_classes))
    net = models.build_task_network(
        kind=payload["task_kind"], num_classes=payload["num_classes"],
        base_width=payload["task_base_width"], channels=payload["channels"])
    net.load_state_dict(payload["components"]["task"])
    preds = _predict_bundle(net, bundle, batch_size)
    metadata = {"bundle": bundle.name, "stage": payload.get("stage"),
                "mode": payload.get("mode")}
    report = report_from_predictions(preds, bundle, metadata)
    if plot_path is not None:
        plot_metric_report(report, plot_path)
    return report


# ---------------------------------------------------------------------------
# Domain discriminability probe
# ---------------------------------------------------------------------------

class _ProbeNet(torch.nn.Module):
    def __init__(self, channels: int, num_domains: int, width: int = 16):
        super().__init__()
        self.features = torch.nn.Sequential(
            torch.nn.Conv2d(channels, width, 3, stride=2, padding=1),
            torch.nn.ReLU(inplace=True),
            torch.nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            torch.nn.ReLU(inplace=True))
        self.head = torch.nn.Linear(2 * width, num_domains)

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))


def domain_discriminability_probe(adapted_bundles: Sequence, seed: int = 0,
                                  epochs: int = 10, batch_size: int = 64,
                                  holdout: float = 0.25, lr: float = 2e-3) -> float:
    """Held-out accuracy of a small fixed classifier trained to identify
    which adapted domain an image came from; lower means better aggregated."""
    if len(adapted_bundles) < 2:
        raise EvalError("probe needs at least two adapted domains")
    arrays = [b.images if isinstance(b, DomainBundle) else np.asarray(b)
              for b in adapted_bundles]
    images = np.concatenate(arrays, axis=0)
    domains = np.concatenate([np.full(len(a), i, dtype=np.int64)
                              for i, a in enumerate(arrays)])
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(images))
    images, domains = images[order], domains[order]
    n_test = max(1, int(round(holdout * len(images))))
    x_test = batch_to_torch(images[:n_test])
    y_test = torch.from_numpy(domains[:n_test])
    x_train, y_train = images[n_test:], domains[n_test:]

    net = _ProbeNet(images.shape[3], len(arrays))
    models.init_weights(net, seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    loss_fn = torch.nn.CrossEntropyLoss()
    net.train()
    for epoch in range(epochs):
        perm = rng.permutation(len(x_train))
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            xb = batch_to_torch(x_train[idx])
            yb = torch.from_numpy(y_train[idx])
            opt.zero_grad()
            loss_fn(net(xb), yb).backward()
            opt.step()
    net.eval()
    with torch.no_grad():
        preds = net(x_test).argmax(dim=1)
    return float((preds == y_test).float().mean())


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt
    return plt


def plot_metric_report(report: MetricReport, path: Path) -> None:
    plt = _pyplot()
    values = [0.0 if v is None else v for v in report.per_class]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(range(len(values)), values, color="#4878d0")
    label = "accuracy" if report.task_kind == KIND_CLASSIFICATION else "IoU"
    ax.set_xlabel("class")
    ax.set_ylabel("per-class %s" % label)
    ax.set_ylim(0, 1)
    ax.set_title("overall %.3f (micro %.3f)" % (report.overall, report.micro))
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_history(records: Sequence[dict], path: Path) -> None:
    """Loss curves over epochs, one line per recorded loss term."""
    plt = _pyplot()
    terms = sorted({k for r in records for k in r
                    if k not in ("stage", "epoch", "round", "wall_time")})
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = range(len(records))
    for term in terms:
        ys = [r.get(term) for r in records]
        if any(y is not None for y in ys):
            ax.plot(xs, [float("nan") if y is None else y for y in ys], label=term)
    ax.set_xlabel("epoch (all stages, in order)")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
