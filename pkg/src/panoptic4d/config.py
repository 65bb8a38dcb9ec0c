"""Run configuration and the plain-text key-value config format.

Files hold one `key = value` pair per line; blank lines and lines starting
with '#' are skipped. Tuples are comma-separated, booleans are true/false,
and the (instance, frame) hide list uses `instance:frame` pairs. Unknown keys
are rejected so typos fail loudly, and load -> serialize -> load is the
identity.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ParameterError
from .heads import LossWeights
from .model import ModelConfig
from .synth import SceneSpec


@dataclass(frozen=True)
class RunConfig:
    # window formation / model
    voxel_size: float = 0.05
    window: int = 2
    num_queries: int = 100
    dim: int = 64
    num_heads: int = 4
    num_rounds: int = 3
    ffn_width: int = 128
    mask_threshold: float = 0.5
    num_frequencies: int = 6
    freq_base: float = 2.0
    backbone_depth: int = 4
    backbone_widths: tuple[int, ...] = (32, 64, 96, 128)
    thing_classes: tuple[int, ...] = (1, 2)
    stuff_classes: tuple[int, ...] = (3, 4)
    query_seed: int = 0
    model_seed: int = 0
    # training
    steps: int = 2000
    batch_size: int = 1
    max_lr: float = 2e-4
    warmup_frac: float = 0.3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_dice: float = 2.0
    lambda_bce: float = 5.0
    lambda_ce: float = 2.0
    lambda_box: float = 1.0
    no_object_weight: float = 0.1
    cost_reduction: str = "mean"
    use_box_loss: bool = True
    train_stride: int = 1
    train_seed: int = 0
    aug_rotate: bool = False
    aug_translate: bool = False
    aug_scale: bool = False
    sequence_dir: str = ""
    # inference / tracking
    stride: int = 1
    use_dbscan: bool = True
    dbscan_eps: float = 1.0
    dbscan_min_pts: int = 1
    dbscan_per_frame: bool = False

    def __post_init__(self):
        if self.window > 1 and not 1 <= self.stride < self.window:
            raise ParameterError(
                f"stride {self.stride} must be in [1, window) for window {self.window}"
            )
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            voxel_size=self.voxel_size,
            window=self.window,
            num_queries=self.num_queries,
            dim=self.dim,
            num_heads=self.num_heads,
            num_rounds=self.num_rounds,
            ffn_width=self.ffn_width,
            mask_threshold=self.mask_threshold,
            num_frequencies=self.num_frequencies,
            freq_base=self.freq_base,
            backbone_depth=self.backbone_depth,
            backbone_widths=self.backbone_widths,
            thing_classes=self.thing_classes,
            stuff_classes=self.stuff_classes,
            query_seed=self.query_seed,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_dice=self.lambda_dice,
            lambda_bce=self.lambda_bce,
            lambda_ce=self.lambda_ce,
            lambda_box=self.lambda_box if self.use_box_loss else 0.0,
            no_object_weight=self.no_object_weight,
            cost_reduction=self.cost_reduction,
        )


def desk_preset(**overrides) -> RunConfig:
    """Small configuration that trains in minutes on one CPU core."""
    base = dict(
        voxel_size=0.8,
        window=2,
        num_queries=12,
        dim=64,
        num_heads=4,
        num_rounds=2,
        ffn_width=96,
        num_frequencies=6,
        backbone_depth=3,
        backbone_widths=(24, 48, 64),
        steps=1500,
        batch_size=1,
        max_lr=1e-3,
    )
    base.update(overrides)
    return RunConfig(**base)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{a}:{b}" for a, b in value)
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_value(text: str, field: dataclasses.Field):
    text = text.strip()
    tp = field.type
    if tp in ("int", int):
        return int(text)
    if tp in ("float", float):
        return float(text)
    if tp in ("str", str):
        return text
    if tp in ("bool", bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ParameterError(f"bad boolean {text!r} for key {field.name}")
    if isinstance(tp, str) and tp.startswith("tuple"):
        if not text:
            return ()
        if ":" in text:
            return tuple(
                tuple(int(x) for x in part.split(":")) for part in text.split(",")
            )
        items = [p.strip() for p in text.split(",") if p.strip()]
        if "float" in tp:
            return tuple(float(p) for p in items)
        return tuple(int(p) for p in items)
    raise ParameterError(f"unsupported config field type {tp!r} for {field.name}")


def config_to_text(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def config_from_text(cls, text: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParameterError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in fields:
            raise ParameterError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ParameterError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(value, fields[key])
    return cls(**values)


def load_config(path: str, cls=RunConfig):
    with open(path) as f:
        return config_from_text(cls, f.read())


def save_config(path: str, obj) -> None:
    with open(path, "w") as f:
        f.write(config_to_text(obj))


def load_scene_spec(path: str) -> SceneSpec:
    return load_config(path, cls=SceneSpec)
