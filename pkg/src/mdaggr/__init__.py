"""Multi-source adversarial domain aggregation at desk scale.

A library for adapting several labeled source image domains toward one
unlabeled target: per-source cycle-consistent translators, adversarial
aggregation of the adapted domains, and a single task network trained on
the aggregated domain with feature- and category-level alignment.
"""

__version__ = "0.1.0"

from .data import (DatasetManifest, DomainBundle, SynthSpec, load_bundle,
                   load_manifest, save_dataset, synthesize_classification_domains,
                   synthesize_segmentation_domains, synthesize_target_eval_bundle)
from .evaluation import (MetricReport, class_wise_iou, classification_accuracy,
                         domain_discriminability_probe, evaluate, mean_iou)
from .losses import (GridLabelMap, GridSpec, LossWeights, cla_loss, cycle_loss,
                     dsc_loss, fla_loss, gan_loss_src_to_tgt, gan_loss_tgt_to_src,
                     grid_label_histogram, normalize_grid_labels, pseudo_label,
                     sad_loss, ccd_loss, task_loss_classification,
                     task_loss_segmentation, total_madan_loss, total_madan_plus_loss)
from .trainer import (TrainConfig, TrainState, context_aware_crop, stage1_pretrain,
                      stage2_aggregate, stage3_task_train, train)

__all__ = [
    "DatasetManifest", "DomainBundle", "SynthSpec", "load_bundle", "load_manifest",
    "save_dataset", "synthesize_classification_domains",
    "synthesize_segmentation_domains", "synthesize_target_eval_bundle",
    "MetricReport", "class_wise_iou", "classification_accuracy",
    "domain_discriminability_probe", "evaluate", "mean_iou",
    "GridLabelMap", "GridSpec", "LossWeights", "cla_loss", "cycle_loss", "dsc_loss",
    "fla_loss", "gan_loss_src_to_tgt", "gan_loss_tgt_to_src", "grid_label_histogram",
    "normalize_grid_labels", "pseudo_label", "sad_loss", "ccd_loss",
    "task_loss_classification", "task_loss_segmentation", "total_madan_loss",
    "total_madan_plus_loss",
    "TrainConfig", "TrainState", "context_aware_crop", "stage1_pretrain",
    "stage2_aggregate", "stage3_task_train", "train",
]
