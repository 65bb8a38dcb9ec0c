"""From mask predictions to a non-overlapping 4D panoptic labeling.

extract_panoptic resolves the overlapping per-query heatmaps into one query
per voxel by confidence argmax, split_non_compact breaks spatially scattered
instances apart with DBSCAN, and stitch/run_sequence carry instance ids across
overlapping windows so a whole sequence gets consistent tracks.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParameterError
from .geometry import SuperimposedCloud, VoxelGrid
from .heads import MaskModuleOutput
from .sequence import ScanSequence

log = logging.getLogger(__name__)


@dataclass
class WindowPrediction:
    """Panoptic labels of one window, with window-local instance ids."""

    frames: list[int]
    # per frame: per original point of that scan
    semantic: dict[int, np.ndarray]
    instance: dict[int, np.ndarray]  # local ids, 0 = stuff / none

    def local_ids(self) -> list[int]:
        ids: set[int] = set()
        for arr in self.instance.values():
            ids.update(int(i) for i in np.unique(arr) if i > 0)
        return sorted(ids)


@dataclass
class PanopticPrediction:
    """Sequence-level result: one (semantic, instance) pair per point per scan."""

    frames: list[int] = field(default_factory=list)
    semantic: dict[int, np.ndarray] = field(default_factory=dict)
    instance: dict[int, np.ndarray] = field(default_factory=dict)

    def covers(self, frame: int) -> bool:
        return frame in self.semantic


def extract_panoptic(
    output: MaskModuleOutput,
    grid: VoxelGrid,
    cloud: SuperimposedCloud,
    frames: list[int],
    class_ids: np.ndarray,
    thing_index: np.ndarray,
) -> WindowPrediction:
    """Assign every voxel to one query by confidence argmax, then expand to points.

    Query confidence on a voxel is (max real-class probability) times the
    sigmoid heatmap value. Queries whose most likely class is "no object" are
    excluded; if that excludes everyone, all queries are kept and a warning is
    emitted. Ties go to the lower query index.
    """
    probs = output.class_probs()  # (N_q, C+1)
    heat = output.heatmap_sigmoid()  # (N_q, K0)
    class_ids = np.asarray(class_ids, dtype=np.int64)
    num_classes = class_ids.shape[0]
    if probs.shape[1] != num_classes + 1:
        raise ContractError(
            f"{probs.shape[1]} class columns but {num_classes} class ids given"
        )

    best_class = probs[:, :num_classes].argmax(axis=1)
    confidence = probs[np.arange(probs.shape[0]), best_class]
    included = probs.argmax(axis=1) != num_classes
    if not included.any():
        warnings.warn("all queries predict no-object; keeping all of them")
        included[:] = True

    score = confidence[:, None] * heat  # (N_q, K0)
    score[~included, :] = -np.inf
    voxel_query = score.argmax(axis=0)  # first maximum = lowest query index

    # thing queries get dense local instance ids, stuff queries id 0
    is_thing_query = thing_index[best_class]
    local_id = np.zeros(probs.shape[0], dtype=np.int64)
    nxt = 1
    for q in np.flatnonzero(included & is_thing_query):
        local_id[q] = nxt
        nxt += 1

    sem_point = np.empty(cloud.num_points, dtype=np.int64)
    inst_point = np.empty(cloud.num_points, dtype=np.int64)
    q_of_point = voxel_query[grid.point_to_voxel]
    sem_point[:] = class_ids[best_class[q_of_point]]
    inst_point[:] = local_id[q_of_point]

    return _point_labels_to_window(cloud, frames, sem_point, inst_point)


def _point_labels_to_window(
    cloud: SuperimposedCloud,
    frames: list[int],
    sem_point: np.ndarray,
    inst_point: np.ndarray,
) -> WindowPrediction:
    semantic: dict[int, np.ndarray] = {}
    instance: dict[int, np.ndarray] = {}
    for slot, frame in enumerate(frames):
        sel = cloud.source_point[:, 0] == slot
        order = np.argsort(cloud.source_point[sel, 1])
        semantic[frame] = sem_point[sel][order]
        instance[frame] = inst_point[sel][order]
    return WindowPrediction(frames=list(frames), semantic=semantic, instance=instance)


def _window_points(pred: WindowPrediction, cloud: SuperimposedCloud, frames: list[int]):
    """Flatten window labels back into superimposed point order."""
    sem = np.empty(cloud.num_points, dtype=np.int64)
    inst = np.empty(cloud.num_points, dtype=np.int64)
    for slot, frame in enumerate(frames):
        sel = cloud.source_point[:, 0] == slot
        idx = cloud.source_point[sel, 1]
        sem[sel] = pred.semantic[frame][idx]
        inst[sel] = pred.instance[frame][idx]
    return sem, inst


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Textbook DBSCAN: returns a cluster id per point, -1 for noise.

    A point is core when it has at least min_pts neighbors within eps,
    itself included. Scanning follows input order, so border points go to the
    first cluster that reaches them.
    """
    if eps <= 0:
        raise ParameterError("eps must be positive")
    if min_pts < 1:
        raise ParameterError("min_pts must be >= 1")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    labels = np.zeros(n, dtype=np.int64)  # 0 = unvisited
    if n == 0:
        return labels

    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    neighbor = d2 <= eps * eps
    neighbor_lists = [np.flatnonzero(neighbor[i]) for i in range(n)]
    is_core = np.array([len(nb) >= min_pts for nb in neighbor_lists])

    cluster = 0
    for i in range(n):
        if labels[i] != 0:
            continue
        if not is_core[i]:
            labels[i] = -1
            continue
        cluster += 1
        labels[i] = cluster
        queue = list(neighbor_lists[i])
        qi = 0
        while qi < len(queue):
            j = queue[qi]
            qi += 1
            if labels[j] == -1:  # border, previously flagged as noise
                labels[j] = cluster
            if labels[j] != 0:
                continue
            labels[j] = cluster
            if is_core[j]:
                queue.extend(neighbor_lists[j])
    return labels


def split_non_compact(
    pred: WindowPrediction,
    cloud: SuperimposedCloud,
    frames: list[int],
    eps: float = 1.0,
    min_pts: int = 1,
    per_frame: bool = False,
) -> WindowPrediction:
    """Split each thing instance into spatially compact DBSCAN clusters.

    Every cluster becomes its own instance with the same semantics; noise
    points join the nearest cluster by centroid distance. An instance whose
    points are all noise is kept as a single instance. Semantic labels and
    point coverage are never altered.
    """
    sem, inst = _window_points(pred, cloud, frames)
    new_inst = np.zeros_like(inst)
    nxt = 1
    for local in sorted(int(i) for i in np.unique(inst) if i > 0):
        idx = np.flatnonzero(inst == local)
        pts = cloud.points[idx]
        if per_frame:
            cl = _per_frame_clusters(pts, cloud.frame_of[idx], eps, min_pts)
        else:
            cl = dbscan(pts, eps, min_pts)
        cluster_ids = sorted(int(c) for c in np.unique(cl) if c >= 1)
        if not cluster_ids:  # everything noise: keep the instance whole
            new_inst[idx] = nxt
            nxt += 1
            continue
        centroids = np.stack([pts[cl == c].mean(axis=0) for c in cluster_ids])
        noise = cl == -1
        if noise.any():
            d = np.linalg.norm(pts[noise][:, None, :] - centroids[None, :, :], axis=2)
            cl[noise] = np.array(cluster_ids)[d.argmin(axis=1)]
        remap = {c: nxt + k for k, c in enumerate(cluster_ids)}
        nxt += len(cluster_ids)
        new_inst[idx] = np.array([remap[int(c)] for c in cl])
    return _point_labels_to_window(cloud, frames, sem, new_inst)


def _per_frame_clusters(pts, frame_of, eps, min_pts):
    """DBSCAN per frame, then merge clusters across frames whose centroids lie
    within eps of each other (single linkage)."""
    n = pts.shape[0]
    cl = np.full(n, -1, dtype=np.int64)
    offset = 0
    pieces = []
    for f in sorted(set(int(f) for f in frame_of)):
        sel = np.flatnonzero(frame_of == f)
        sub = dbscan(pts[sel], eps, min_pts)
        keep = sub >= 1
        cl[sel[keep]] = sub[keep] + offset
        for c in sorted(int(c) for c in np.unique(sub) if c >= 1):
            pieces.append((c + offset, pts[sel][sub == c].mean(axis=0)))
        offset += int(sub.max()) if sub.size and sub.max() > 0 else 0
    if not pieces:
        return cl
    # union pieces whose centroids are close
    parent = {pid: pid for pid, _ in pieces}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i in range(len(pieces)):
        for j in range(i + 1, len(pieces)):
            if np.linalg.norm(pieces[i][1] - pieces[j][1]) <= eps:
                parent[find(pieces[i][0])] = find(pieces[j][0])
    roots = {}
    out = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        if cl[k] >= 1:
            r = find(int(cl[k]))
            if r not in roots:
                roots[r] = len(roots) + 1
            out[k] = roots[r]
    return out


def stitch(
    prev: PanopticPrediction,
    nxt: WindowPrediction,
    shared_frames: list[int],
    next_free_id: int,
) -> tuple[dict[int, int], int]:
    """One-to-one match of window-local instances against existing track ids.

    Overlap counts on the shared frames feed a maximum-weight assignment;
    matched locals inherit the previous id (only with overlap >= 1 point),
    everything else gets a fresh globally unique id. Returns the local -> global
    mapping and the updated fresh-id counter.
    """
    shared = [f for f in shared_frames if prev.covers(f) and f in nxt.instance]
    if not shared:
        raise ContractError("stitch requires at least one shared frame")
    overlap: dict[tuple[int, int], int] = {}
    for f in shared:
        a = prev.instance[f]
        b = nxt.instance[f]
        if a.shape != b.shape:
            raise ContractError(f"shared frame {f} has mismatched point counts")
        both = (a > 0) & (b > 0)
        for pg, nl in zip(a[both], b[both]):
            overlap[(int(pg), int(nl))] = overlap.get((int(pg), int(nl)), 0) + 1

    locals_ = nxt.local_ids()
    prevs = sorted({pg for pg, _ in overlap})
    mapping: dict[int, int] = {}
    if overlap:
        counts = np.zeros((len(prevs), len(locals_)))
        p_pos = {p: i for i, p in enumerate(prevs)}
        l_pos = {l: i for i, l in enumerate(locals_)}
        for (pg, nl), c in overlap.items():
            counts[p_pos[pg], l_pos[nl]] = c
        from .heads import solve_assignment

        if len(prevs) <= len(locals_):
            pairs = solve_assignment(-counts)
            chosen = [(prevs[i], locals_[j]) for i, j in pairs]
        else:
            pairs = solve_assignment(-counts.T)
            chosen = [(prevs[j], locals_[i]) for i, j in pairs]
        for pg, nl in chosen:
            if overlap.get((pg, nl), 0) >= 1:
                mapping[nl] = pg
    for nl in locals_:
        if nl not in mapping:
            mapping[nl] = next_free_id
            next_free_id += 1
    return mapping, next_free_id


def run_sequence(
    predictor,
    sequence: ScanSequence,
    window: int,
    stride: int | None = None,
) -> PanopticPrediction:
    """Slide overlapping windows over a sequence and stitch the results.

    predictor(scans, poses, frames) must return a WindowPrediction with
    window-local instance ids. Shared-frame labels are taken from the later
    window after its instances have been remapped onto existing tracks.
    """
    n = sequence.num_frames
    window = min(window, n)
    if stride is None:
        stride = max(1, window - 1)
    if window > 1 and stride >= window:
        raise ParameterError(f"stride {stride} must be < window {window} so windows overlap")
    if window == n:
        starts = [0]
    else:
        starts = list(range(0, n - window + 1, stride))
        if starts[-1] != n - window:
            starts.append(n - window)

    result = PanopticPrediction()
    next_free_id = 1
    for w, start in enumerate(starts):
        scans = sequence.scans[start : start + window]
        poses = sequence.poses[start : start + window]
        frames = [s.frame_index for s in scans]
        pred = predictor(scans, poses, frames)
        shared = [f for f in frames if result.covers(f)]
        if not shared:
            # first window, or single-scan windows: no tracking context yet
            mapping = {}
            for nl in pred.local_ids():
                mapping[nl] = next_free_id
                next_free_id += 1
        else:
            mapping, next_free_id = stitch(result, pred, shared, next_free_id)
        log.debug("window %d frames %s: %d local instances", w, frames, len(mapping))
        for f in frames:
            inst = pred.instance[f]
            remapped = np.zeros_like(inst)
            pos = inst > 0
            if pos.any():
                remapped[pos] = np.array([mapping[int(i)] for i in inst[pos]])
            result.semantic[f] = pred.semantic[f].copy()
            result.instance[f] = remapped
            if f not in result.frames:
                result.frames.append(f)
    result.frames.sort()
    return result
