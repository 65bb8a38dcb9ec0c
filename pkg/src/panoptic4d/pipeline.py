"""End-to-end wiring: a trained model as a window predictor, whole-sequence
inference, and evaluation against ground truth.
"""

from __future__ import annotations

import numpy as np

from .autodiff import no_grad
from .config import RunConfig
from .inference import (
    PanopticPrediction,
    WindowPrediction,
    extract_panoptic,
    run_sequence,
    split_non_compact,
)
from .kitti_io import label_path, write_labels
from .metrics import MetricReport, SequenceLabels, evaluate
from .model import PanopticModel, prepare_window
from .sequence import ScanSequence


def model_predictor(model: PanopticModel, cfg: RunConfig):
    """Wrap a model as a window predictor for run_sequence."""
    class_ids = model.class_ids()
    thing_index = np.array(
        [model.class_map.is_thing(int(c)) for c in class_ids], dtype=bool
    )

    def predict(scans, poses, frames) -> WindowPrediction:
        with no_grad():
            data = prepare_window(scans, poses, cfg.voxel_size)
            fwd = model.forward(data)
        pred = extract_panoptic(
            fwd.final, data.grid, data.cloud, frames, class_ids, thing_index
        )
        if cfg.use_dbscan:
            pred = split_non_compact(
                pred,
                data.cloud,
                frames,
                eps=cfg.dbscan_eps,
                min_pts=cfg.dbscan_min_pts,
                per_frame=cfg.dbscan_per_frame,
            )
        return pred

    return predict


def predict_sequence(
    model: PanopticModel, seq: ScanSequence, cfg: RunConfig
) -> PanopticPrediction:
    return run_sequence(model_predictor(model, cfg), seq, cfg.window, cfg.stride)


def prediction_labels(pred: PanopticPrediction) -> SequenceLabels:
    return SequenceLabels(
        frames=list(pred.frames), semantic=pred.semantic, instance=pred.instance
    )


def evaluate_prediction(pred: PanopticPrediction, seq: ScanSequence) -> MetricReport:
    gt = SequenceLabels.from_scans(seq)
    return evaluate(prediction_labels(pred), gt, seq.class_map)


def write_prediction(pred: PanopticPrediction, out_dir: str) -> list[str]:
    """Emit one packed .label file per scan; returns the created paths."""
    import os

    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    created = []
    for f in pred.frames:
        path = label_path(out_dir, f)
        write_labels(path, pred.semantic[f], pred.instance[f])
        created.append(path)
    return created
