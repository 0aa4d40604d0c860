"""Last-layer randomization check for the mask learner."""

from dataclasses import dataclass

import numpy as np

from .masker import MaskSaliency
from .metrics import insertion_aucs, top_s_binarize
from .net import randomize_last_layer


def top_fraction_iou(m1, m2, fraction=0.3):
    """IoU of the top ``fraction`` pixels of two maps."""
    s = int(round(fraction * np.size(m1)))
    a = top_s_binarize(m1, s).astype(bool)
    b = top_s_binarize(m2, s).astype(bool)
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 1.0


@dataclass
class SanityReport:
    predicted: np.ndarray
    iou_randomized: np.ndarray
    iou_rerun: np.ndarray
    auc_trained: np.ndarray
    auc_randomized: np.ndarray

    def rows(self):
        return [
            {"sample_id": i, "predicted": int(self.predicted[i]),
             "iou_trained_randomized": self.iou_randomized[i],
             "iou_trained_rerun": self.iou_rerun[i],
             "insertion_auc_trained": self.auc_trained[i],
             "insertion_auc_randomized": self.auc_randomized[i]}
            for i in range(len(self.predicted))
        ]

    def summary(self):
        return {
            "mean_iou_trained_randomized": float(self.iou_randomized.mean()),
            "mean_iou_trained_rerun": float(self.iou_rerun.mean()),
            "mean_insertion_auc_trained": float(self.auc_trained.mean()),
            "mean_insertion_auc_randomized": float(self.auc_randomized.mean()),
        }


def sanity_check(model, X, pool, seed=0, top_fraction=0.3, **mask_params):
    """Compare masks for the predicted label under the trained model, an
    independent rerun (mask seed + 1) and a last-layer-randomized copy."""
    X = np.asarray(X, dtype=np.float64)
    C = model.n_classes_
    pred = model.predict(X)
    tasks = np.arange(len(X)) * C + pred
    mask_seed = mask_params.pop("mask_seed", 0)
    randomized = randomize_last_layer(model, seed)

    def run(m, s):
        return MaskSaliency(m, seed=s, **mask_params).fit(pool).explain(X, pred, tasks)

    trained = run(model, mask_seed)
    rerun = run(model, mask_seed + 1)
    rand = run(randomized, mask_seed)
    return SanityReport(
        pred,
        np.array([top_fraction_iou(a, b, top_fraction) for a, b in zip(trained, rand)]),
        np.array([top_fraction_iou(a, b, top_fraction) for a, b in zip(trained, rerun)]),
        insertion_aucs(model, X, pred, trained),
        insertion_aucs(randomized, X, pred, rand),
    )
