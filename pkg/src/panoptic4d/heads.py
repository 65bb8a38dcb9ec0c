"""Mask module (instance heatmaps, class logits, box regression), ground-truth
target construction, Hungarian matching, and the loss stack.

The matching cost combines the mask losses (dice + binary cross-entropy) with
the classification cross-entropy; the box term is deliberately excluded from
matching and only enters the training loss for matched thing targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import FeaturePyramid
from .errors import CapacityError, ContractError, ParameterError, ShapeError
from .geometry import SuperimposedCloud, TrajectoryBox, VoxelGrid, trajectory_box
from .nn import MLP, LayerNorm, Linear, collect_parameters
from .sequence import IGNORE_LABEL, ClassMap

EPS = 1e-7


@dataclass
class MaskModuleOutput:
    heatmap_logits: Tensor  # (N_q, K0)
    class_logits: Tensor  # (N_q, C+1), last column is "no object"
    boxes: Tensor  # (N_q, 6) in [0, 1]

    @property
    def num_queries(self) -> int:
        return self.heatmap_logits.shape[0]

    def class_probs(self) -> np.ndarray:
        z = self.class_logits.values
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def heatmap_sigmoid(self) -> np.ndarray:
        return ad.sigmoid_np(self.heatmap_logits.values)


class MaskModule:
    """Per-query predictions against the finest pyramid level.

    Query features are layer-normalized before the heads; with pre-norm
    residual refinement blocks the raw features grow with depth, which would
    otherwise saturate the class softmax and the heatmap dot products.
    """

    def __init__(self, rng: np.random.Generator, dim: int, finest_width: int, num_classes: int):
        self.num_classes = num_classes
        self.norm = LayerNorm(dim)
        self.mask_embed = MLP(rng, [dim, dim, dim])
        self.feature_proj = Linear(rng, finest_width, dim)
        self.class_head = Linear(rng, dim, num_classes + 1)
        self.box_head = MLP(rng, [dim, dim, 6])

    def __call__(self, query_features: Tensor, pyramid: FeaturePyramid) -> MaskModuleOutput:
        f0 = pyramid.levels[0].features
        normed = self.norm(query_features)
        embed = self.mask_embed(normed)
        projected = self.feature_proj(f0)
        heatmap = ad.matmul(embed, ad.transpose(projected))
        class_logits = self.class_head(normed)
        boxes = ad.sigmoid(self.box_head(normed))
        return MaskModuleOutput(heatmap_logits=heatmap, class_logits=class_logits, boxes=boxes)

    def parameters(self) -> dict[str, Tensor]:
        return collect_parameters(
            {
                "norm": self.norm,
                "embed": self.mask_embed,
                "fproj": self.feature_proj,
                "cls": self.class_head,
                "box": self.box_head,
            }
        )


# ---------------------------------------------------------------------------
# targets


@dataclass
class TargetSegment:
    """One ground-truth segment of a window: a thing instance or a stuff region."""

    class_index: int  # contiguous class index, not the raw class id
    is_thing: bool
    voxel_mask: np.ndarray  # (K0,) bool
    box: TrajectoryBox | None  # things only
    instance_id: int = 0  # gt instance id, 0 for stuff


@dataclass
class Targets:
    segments: list[TargetSegment]

    def __len__(self) -> int:
        return len(self.segments)


def build_targets(
    cloud: SuperimposedCloud,
    grid: VoxelGrid,
    point_semantic: np.ndarray,
    point_instance: np.ndarray,
    class_map: ClassMap,
) -> Targets:
    """Voxel-level segments from per-point labels.

    Each voxel is assigned to the most frequent (class, instance) pair among
    its member points (ignored points excluded, ties to the pair seen first).
    Thing instances additionally get a trajectory box computed from their raw
    points, normalized by the window extent.
    """
    point_semantic = np.asarray(point_semantic).reshape(-1)
    point_instance = np.asarray(point_instance).reshape(-1)
    if point_semantic.shape[0] != cloud.num_points:
        raise ShapeError("per-point labels do not match the cloud size")
    class_index = {cid: i for i, cid in enumerate(class_map.all_ids)}

    k = grid.num_voxels
    voxel_key: list[tuple[int, int] | None] = [None] * k
    for v in range(k):
        members = grid.voxel_to_points[v]
        counts: dict[tuple[int, int], int] = {}
        for p in members:
            sem = int(point_semantic[p])
            if sem == IGNORE_LABEL or sem not in class_index:
                continue
            inst = int(point_instance[p]) if class_map.is_thing(sem) else 0
            key = (sem, inst)
            counts[key] = counts.get(key, 0) + 1
        if counts:
            best = max(counts.values())
            voxel_key[v] = next(k_ for k_ in counts if counts[k_] == best)

    groups: dict[tuple[int, int], list[int]] = {}
    for v, key in enumerate(voxel_key):
        if key is not None:
            groups.setdefault(key, []).append(v)

    extent_min, extent_max = cloud.extent()
    segments = []
    for (sem, inst), voxels in groups.items():
        mask = np.zeros(k, dtype=bool)
        mask[voxels] = True
        is_thing = class_map.is_thing(sem) and inst > 0
        box = None
        if is_thing:
            pts = cloud.points[(point_instance == inst) & (point_semantic == sem)]
            if pts.shape[0] == 0:  # only possible via voxel-majority flips
                pts = grid.voxel_centroids[mask]
            box = trajectory_box(pts, extent_min, extent_max)
        segments.append(
            TargetSegment(
                class_index=class_index[sem],
                is_thing=is_thing,
                voxel_mask=mask,
                box=box,
                instance_id=inst,
            )
        )
    return Targets(segments=segments)


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossWeights:
    lambda_dice: float = 2.0
    lambda_bce: float = 5.0
    lambda_ce: float = 2.0
    lambda_box: float = 1.0
    no_object_weight: float = 0.1
    cost_reduction: str = "mean"  # or "sum": BCE summed instead of averaged over voxels

    def __post_init__(self):
        if min(self.lambda_dice, self.lambda_bce, self.lambda_ce, self.lambda_box) < 0:
            raise ParameterError("loss weights must be nonnegative")
        if self.cost_reduction not in ("mean", "sum"):
            raise ParameterError(f"unknown cost reduction {self.cost_reduction!r}")


def dice_loss(pred_probs: Tensor, target: np.ndarray) -> Tensor:
    """1 - 2 * |p * g| / (|p| + |g| + eps) over one mask."""
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred_probs.shape != target.shape:
        raise ShapeError(f"dice: {pred_probs.shape} vs {target.shape}")
    inter = ad.tsum(ad.mul(pred_probs, target))
    denom = ad.tsum(pred_probs) + float(target.sum()) + EPS
    return 1.0 - ad.div(ad.mul(inter, 2.0), denom)


def bce_loss(pred_probs: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over a mask; log arguments are eps-clamped."""
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred_probs.shape != target.shape:
        raise ShapeError(f"bce: {pred_probs.shape} vs {target.shape}")
    pos = ad.mul(ad.log(pred_probs + EPS), target)
    negv = ad.mul(ad.log((1.0 - pred_probs) + EPS), 1.0 - target)
    return ad.neg(ad.tmean(pos + negv))


def ce_loss(class_logits: Tensor, target_classes: np.ndarray) -> Tensor:
    """Per-row cross-entropy -log p[target]; returns a vector of losses."""
    target_classes = np.asarray(target_classes, dtype=np.int64).reshape(-1)
    n, c = class_logits.shape
    if target_classes.shape[0] != n:
        raise ShapeError(f"ce: {n} rows but {target_classes.shape[0]} targets")
    if target_classes.size and (target_classes.min() < 0 or target_classes.max() >= c):
        raise ParameterError("ce: target class out of range")
    probs = ad.softmax(class_logits, axis=-1)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), target_classes] = 1.0
    picked = ad.tsum(ad.mul(probs, onehot), axis=1)
    return ad.neg(ad.log(picked + EPS))


def box_l1_loss(pred_boxes: Tensor, target_boxes: np.ndarray) -> Tensor:
    """Mean absolute error over the 6 box parameters, one value per row."""
    target_boxes = np.asarray(target_boxes, dtype=np.float64).reshape(-1, 6)
    if pred_boxes.shape != target_boxes.shape:
        raise ShapeError(f"box l1: {pred_boxes.shape} vs {target_boxes.shape}")
    return ad.tmean(ad.absolute(pred_boxes - target_boxes), axis=1)


# ---------------------------------------------------------------------------
# matching


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (query index, target index)
    num_queries: int

    def unmatched_queries(self) -> np.ndarray:
        used = {q for q, _ in self.pairs}
        return np.array([q for q in range(self.num_queries) if q not in used], dtype=np.int64)


def solve_assignment(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of rows to columns (rows <= cols).

    Shortest augmenting path formulation with row/column potentials; returns
    (row, column) pairs sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise CapacityError(f"assignment needs rows <= cols, got {cost.shape}")
    if n == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise ContractError("assignment cost matrix must be finite")
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match_col = np.zeros(m + 1, dtype=np.int64)  # column -> row (1-based, 0 = free)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match_col[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_col[j0]
            delta = INF
            j1 = -1
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[match_col[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_col[j0] = match_col[j1]
            j0 = j1
    pairs = [(int(match_col[j]) - 1, j - 1) for j in range(1, m + 1) if match_col[j]]
    return sorted(pairs)


def matching_cost_matrix(
    output: MaskModuleOutput, targets: Targets, weights: LossWeights
) -> np.ndarray:
    """(num_targets, N_q) cost matrix of dice + BCE + classification terms."""
    sig = output.heatmap_sigmoid()  # (N_q, K0)
    probs = output.class_probs()
    k0 = sig.shape[1]
    masks = np.stack([t.voxel_mask.astype(np.float64) for t in targets.segments])  # (T, K0)
    classes = np.array([t.class_index for t in targets.segments])

    inter = sig @ masks.T  # (N_q, T)
    dice = 1.0 - 2.0 * inter / (sig.sum(axis=1, keepdims=True) + masks.sum(axis=1)[None, :] + EPS)
    log_p = np.log(sig + EPS)
    log_n = np.log(1.0 - sig + EPS)
    bce = -(log_p @ masks.T + log_n @ (1.0 - masks).T)
    if weights.cost_reduction == "mean":
        bce /= k0
    ce = -np.log(probs[:, classes] + EPS)  # (N_q, T)
    cost = weights.lambda_dice * dice + weights.lambda_bce * bce + weights.lambda_ce * ce
    return cost.T  # rows = targets


def hungarian_match(
    output: MaskModuleOutput, targets: Targets, weights: LossWeights
) -> MatchResult:
    """Globally optimal one-to-one target-to-query assignment; every target is
    matched, leftover queries later count as "no object"."""
    nq = output.num_queries
    if len(targets) > nq:
        raise CapacityError(f"{len(targets)} targets exceed {nq} queries")
    if len(targets) == 0:
        return MatchResult(pairs=[], num_queries=nq)
    cost = matching_cost_matrix(output, targets, weights)
    pairs = solve_assignment(cost)  # (target, query)
    return MatchResult(pairs=sorted((q, t) for t, q in pairs), num_queries=nq)


# ---------------------------------------------------------------------------
# total loss


@dataclass
class LossBreakdown:
    """Final-round components (already normalized by target count) plus the
    deep-supervision total."""

    total: float = 0.0
    dice: float = 0.0
    bce: float = 0.0
    ce: float = 0.0
    box: float = 0.0
    no_object: float = 0.0

    def as_row(self) -> dict[str, float]:
        return {
            "loss_total": self.total,
            "loss_dice": self.dice,
            "loss_bce": self.bce,
            "loss_ce": self.ce,
            "loss_box": self.box,
            "loss_no_object": self.no_object,
        }


def _single_output_loss(
    output: MaskModuleOutput,
    targets: Targets,
    match: MatchResult,
    weights: LossWeights,
) -> tuple[Tensor, dict[str, float]]:
    norm = float(max(1, len(targets)))
    num_classes = output.class_logits.shape[1] - 1
    terms: list[Tensor] = []
    parts = {"dice": 0.0, "bce": 0.0, "ce": 0.0, "box": 0.0, "no_object": 0.0}

    if match.pairs:
        q_idx = np.array([q for q, _ in match.pairs], dtype=np.int64)
        t_idx = [t for _, t in match.pairs]
        masks = np.stack([targets.segments[t].voxel_mask.astype(np.float64) for t in t_idx])
        classes = np.array([targets.segments[t].class_index for t in t_idx])

        sig = ad.sigmoid(ad.gather_rows(output.heatmap_logits, q_idx))  # (P, K0)
        k0 = sig.shape[1]
        inter = ad.tsum(ad.mul(sig, masks), axis=1)
        denom = ad.tsum(sig, axis=1) + masks.sum(axis=1) + EPS
        dice_vec = 1.0 - ad.div(ad.mul(inter, 2.0), denom)
        bce_elems = ad.mul(ad.log(sig + EPS), masks) + ad.mul(
            ad.log((1.0 - sig) + EPS), 1.0 - masks
        )
        bce_vec = ad.neg(ad.tsum(bce_elems, axis=1))
        if weights.cost_reduction == "mean":
            bce_vec = ad.mul(bce_vec, 1.0 / k0)
        ce_vec = ce_loss(ad.gather_rows(output.class_logits, q_idx), classes)

        dice_term = ad.mul(ad.tsum(dice_vec), weights.lambda_dice / norm)
        bce_term = ad.mul(ad.tsum(bce_vec), weights.lambda_bce / norm)
        ce_term = ad.mul(ad.tsum(ce_vec), weights.lambda_ce / norm)
        terms += [dice_term, bce_term, ce_term]
        parts["dice"] = dice_term.item()
        parts["bce"] = bce_term.item()
        parts["ce"] = ce_term.item()

        thing_pairs = [(q, t) for q, t in match.pairs if targets.segments[t].is_thing]
        if thing_pairs and weights.lambda_box > 0:
            bq = np.array([q for q, _ in thing_pairs], dtype=np.int64)
            bt = np.stack([targets.segments[t].box.as_vector() for _, t in thing_pairs])
            box_vec = box_l1_loss(ad.gather_rows(output.boxes, bq), bt)
            box_term = ad.mul(ad.tsum(box_vec), weights.lambda_box / norm)
            terms.append(box_term)
            parts["box"] = box_term.item()

    free = match.unmatched_queries()
    if free.size:
        no_obj = np.full(free.size, num_classes, dtype=np.int64)
        noobj_vec = ce_loss(ad.gather_rows(output.class_logits, free), no_obj)
        noobj_term = ad.mul(
            ad.tsum(noobj_vec), weights.no_object_weight * weights.lambda_ce / norm
        )
        terms.append(noobj_term)
        parts["no_object"] = noobj_term.item()

    if not terms:
        return Tensor(0.0), parts
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total, parts


def total_loss(
    outputs: list[MaskModuleOutput],
    targets: Targets,
    match: MatchResult,
    weights: LossWeights,
) -> tuple[Tensor, LossBreakdown]:
    """Deep-supervised loss: the matched assignment is applied to every
    intermediate output and the per-output losses are summed."""
    if not outputs:
        raise ParameterError("total_loss needs at least one output")
    total: Tensor | None = None
    last_parts: dict[str, float] = {}
    for output in outputs:
        loss, parts = _single_output_loss(output, targets, match, weights)
        total = loss if total is None else ad.add(total, loss)
        last_parts = parts
    breakdown = LossBreakdown(total=total.item(), **last_parts)
    return total, breakdown
