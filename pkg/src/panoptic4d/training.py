"""Toy-scale training loop: window round-robin, Hungarian matching on the
final output, deep-supervised loss, AdamW with the one-cycle schedule.
Deterministic under the config seeds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .backbone import seed_features
from .config import RunConfig, config_to_text, config_from_text
from .decoder import WindowContext
from .errors import ParameterError
from .geometry import LidarScan, Pose, rot_z, superimpose, voxelize
from .heads import Targets, hungarian_match, total_loss
from .model import PanopticModel, WindowData, prepare_window
from .nn import load_parameters
from .optim import AdamW, OneCycleSchedule, load_checkpoint, save_checkpoint
from .sequence import ScanSequence

log = logging.getLogger(__name__)

LOSS_CSV_COLUMNS = [
    "step",
    "lr",
    "loss_total",
    "loss_dice",
    "loss_bce",
    "loss_ce",
    "loss_box",
    "loss_no_object",
]


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries batch diagnostics."""

    def __init__(self, step: int, frames: list[int], breakdown: dict):
        self.step = step
        self.frames = frames
        self.breakdown = breakdown
        super().__init__(
            f"non-finite loss at step {step} on window frames {frames}: {breakdown}"
        )


@dataclass
class TrainResult:
    rows: list[dict] = field(default_factory=list)
    final_loss: float = float("nan")

    def csv(self) -> str:
        lines = [",".join(LOSS_CSV_COLUMNS)]
        for row in self.rows:
            lines.append(",".join("%.10g" % row[c] for c in LOSS_CSV_COLUMNS))
        return "\n".join(lines) + "\n"


def sequence_windows(
    seq: ScanSequence, window: int, stride: int
) -> list[tuple[list[LidarScan], list[Pose]]]:
    n = seq.num_frames
    window = min(window, n)
    starts = list(range(0, n - window + 1, max(1, stride)))
    if starts[-1] != n - window:
        starts.append(n - window)
    return [
        (seq.scans[s : s + window], seq.poses[s : s + window]) for s in starts
    ]


def _augmented_window(
    scans: list[LidarScan],
    poses: list[Pose],
    cfg: RunConfig,
    rng: np.random.Generator,
) -> WindowData:
    """Window preparation with a random rigid + scale transform of the
    superimposed cloud (applied in the global frame)."""
    cloud = superimpose(scans, poses)
    pts = cloud.points
    if cfg.aug_rotate:
        pts = pts @ rot_z(rng.uniform(0.0, 2.0 * np.pi)).T
    if cfg.aug_scale:
        pts = pts * rng.uniform(0.95, 1.05)
    if cfg.aug_translate:
        pts = pts + rng.uniform(-1.0, 1.0, size=3)
    cloud.points = pts
    grid = voxelize(cloud, cfg.voxel_size)
    frames = [s.frame_index for s in scans]
    ext_min, ext_max = cloud.extent()
    ctx = WindowContext(ext_min, ext_max, min(frames), max(frames))
    return WindowData(
        frames=frames,
        scans=scans,
        cloud=cloud,
        grid=grid,
        seed=seed_features(grid, frames),
        ctx=ctx,
    )


def train_model(
    model: PanopticModel,
    seq: ScanSequence | list[ScanSequence],
    cfg: RunConfig,
    log_every: int = 100,
) -> TrainResult:
    """Optimize the model on one or more sequences under a single schedule;
    returns the per-step loss trace."""
    sequences = seq if isinstance(seq, list) else [seq]
    if not sequences or any(s.num_frames == 0 for s in sequences):
        raise ParameterError("cannot train on an empty sequence")
    if not all(s.has_labels() for s in sequences):
        raise ParameterError("training sequence has no labels")
    windows = []
    for s in sequences:
        windows.extend(sequence_windows(s, cfg.window, cfg.train_stride))
    augmenting = cfg.aug_rotate or cfg.aug_translate or cfg.aug_scale
    rng = np.random.Generator(np.random.PCG64(cfg.train_seed))

    cache: list[tuple[WindowData, Targets]] = []
    if not augmenting:
        for scans, poses in windows:
            data = prepare_window(scans, poses, cfg.voxel_size)
            cache.append((data, model.window_targets(data)))

    params = model.parameters()
    opt = AdamW(
        params,
        lr=cfg.max_lr,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        weight_decay=cfg.weight_decay,
    )
    sched = OneCycleSchedule(cfg.max_lr, cfg.steps, warmup_frac=cfg.warmup_frac)
    weights = cfg.loss_weights()

    result = TrainResult()
    counter = 0
    for step in range(cfg.steps):
        lr = sched.lr(step)
        opt.zero_grad()
        breakdown = None
        for _ in range(cfg.batch_size):
            if augmenting:
                scans, poses = windows[counter % len(windows)]
                data = _augmented_window(scans, poses, cfg, rng)
                targets = model.window_targets(data)
            else:
                data, targets = cache[counter % len(windows)]
            counter += 1
            fwd = model.forward(data)
            if not (
                np.all(np.isfinite(fwd.final.heatmap_logits.values))
                and np.all(np.isfinite(fwd.final.class_logits.values))
            ):
                raise TrainingDiverged(step, data.frames, {"forward": "non-finite outputs"})
            match = hungarian_match(fwd.final, targets, weights)
            loss, breakdown = total_loss(fwd.outputs, targets, match, weights)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(step, data.frames, breakdown.as_row())
            if cfg.batch_size > 1:
                loss = ad.mul(loss, 1.0 / cfg.batch_size)
            ad.backward(loss)
        opt.step(lr)
        row = {"step": float(step), "lr": lr}
        row.update(breakdown.as_row())
        result.rows.append(row)
        result.final_loss = breakdown.total
        if log_every and step % log_every == 0:
            log.info("step %d lr %.3g loss %.4f", step, lr, breakdown.total)
    return result


def save_model(path: str, model: PanopticModel, cfg: RunConfig) -> None:
    save_checkpoint(path, model.parameters(), config_text=config_to_text(cfg))


def load_model(path: str) -> tuple[PanopticModel, RunConfig]:
    values, cfg_text = load_checkpoint(path)
    cfg = config_from_text(RunConfig, cfg_text)
    model = PanopticModel(cfg.model_config(), init_seed=cfg.model_seed)
    load_parameters(model.parameters(), values)
    return model, cfg
