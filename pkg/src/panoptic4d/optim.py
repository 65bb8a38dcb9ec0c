"""Decoupled-weight-decay Adam, the one-cycle learning-rate schedule, and the
binary checkpoint format.

Checkpoint layout (all little-endian):
  magic    8 bytes  b"P4DMODEL"
  version  uint32   currently 1
  cfg_len  uint32   length of a UTF-8 config text block (may be 0)
  cfg      cfg_len bytes
  count    uint32   number of named parameters
  then per parameter:
  name_len uint16, name (UTF-8), ndim uint8, dims uint32[ndim],
  payload  float64[prod(dims)]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, FormatError, ParameterError

CHECKPOINT_MAGIC = b"P4DMODEL"
CHECKPOINT_VERSION = 1


@dataclass
class AdamW:
    """Adam with decoupled weight decay.

    Each step first shrinks the parameter by lr * weight_decay and then
    applies the bias-corrected Adam update from the accumulated moments.
    """

    params: dict[str, Tensor]
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            if not p.requires_grad:
                raise ContractError(f"parameter {name!r} does not require grad")
            self.m[name] = np.zeros_like(p.values)
            self.v[name] = np.zeros_like(p.values)

    def step(self, lr: float | None = None) -> None:
        if lr is None:
            lr = self.lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g.shape != p.values.shape:
                raise ContractError(f"gradient shape mismatch for {name!r}")
            if self.weight_decay:
                p.values *= 1.0 - lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


@dataclass(frozen=True)
class OneCycleSchedule:
    """Cosine warmup to max_lr, then cosine anneal to a much lower floor."""

    max_lr: float
    total_steps: int
    warmup_frac: float = 0.3
    div_start: float = 25.0
    div_end: float = 1e4

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ParameterError("total_steps must be positive")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ParameterError("warmup_frac must be in [0, 1]")
        if self.max_lr <= 0 or self.div_start < 1 or self.div_end < 1:
            raise ParameterError("max_lr must be > 0 and both divisors >= 1")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_frac * (self.total_steps - 1)))

    def lr(self, step: int) -> float:
        if not 0 <= step < self.total_steps:
            raise ParameterError(
                f"step {step} outside schedule of {self.total_steps} steps"
            )
        warm = self.warmup_steps
        if step <= warm:
            lo, hi = self.max_lr / self.div_start, self.max_lr
            t = 1.0 if warm == 0 else step / warm
            # cosine ramp lo -> hi
            return hi + (lo - hi) * (1.0 + np.cos(np.pi * t)) / 2.0
        lo, hi = self.max_lr / self.div_end, self.max_lr
        span = self.total_steps - 1 - warm
        t = 1.0 if span == 0 else (step - warm) / span
        return lo + (hi - lo) * (1.0 + np.cos(np.pi * t)) / 2.0


def save_checkpoint(path: str, params: dict[str, Tensor | np.ndarray], config_text: str = "") -> None:
    cfg = config_text.encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            values = p.values if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
            name_b = name.encode("utf-8")
            if len(name_b) >= 2**16:
                raise ParameterError(f"parameter name too long: {name!r}")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", values.ndim))
            for d in values.shape:
                f.write(struct.pack("<I", d))
            f.write(values.astype("<f8").tobytes())


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], str]:
    """Returns (name -> float64 array, config text)."""
    with open(path, "rb") as f:
        blob = f.read()

    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"checkpoint truncated while reading {what}", byte_offset=pos)
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if take(8, "magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a checkpoint file", byte_offset=0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", byte_offset=8)
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    config_text = take(cfg_len, "config").decode("utf-8")
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims")) if ndim else ()
        n_values = int(np.prod(dims)) if dims else 1
        payload = take(8 * n_values, f"payload of {name!r}")
        params[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    if pos != len(blob):
        raise FormatError("trailing bytes after parameter table", byte_offset=pos)
    return params, config_text
