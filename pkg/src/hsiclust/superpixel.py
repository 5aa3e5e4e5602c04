"""Superpixel segmentation, per-superpixel mean features and pixel-sampling views.

The segmenter is a SLIC-style iterative clustering on a gray image: grid
seeding, local (value, y, x) distance assignment, connectivity enforcement,
then split/merge until the region count is exactly M. Externally produced
segmentations can be imported instead.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class TooManySuperpixels(ValueError):
    pass


class EmptySuperpixel(ValueError):
    pass


class DisconnectedSuperpixel(Warning):
    pass


@dataclass(frozen=True)
class SuperpixelSet:
    """Segmentation plus per-superpixel mean features."""

    m: int
    assignment: np.ndarray          # (H, W) int32, ids 0..m-1
    members: tuple[np.ndarray, ...]  # flat pixel indices per superpixel
    features: np.ndarray            # (m, d) mean feature per superpixel
    sizes: np.ndarray               # (m,) member counts

    @property
    def height(self) -> int:
        return self.assignment.shape[0]

    @property
    def width(self) -> int:
        return self.assignment.shape[1]


def from_assignment(assignment: np.ndarray, pixel_features: np.ndarray) -> SuperpixelSet:
    assignment = np.asarray(assignment, dtype=np.int32)
    m = int(assignment.max()) + 1
    flat = assignment.reshape(-1)
    features = mean_features(flat, pixel_features, m)
    sizes = np.bincount(flat, minlength=m)
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(m + 1))
    members = tuple(order[bounds[j]:bounds[j + 1]] for j in range(m))
    return SuperpixelSet(m, assignment, members, features, sizes)


def mean_features(assignment_flat: np.ndarray, pixel_features: np.ndarray,
                  m: int | None = None) -> np.ndarray:
    """Row j = mean of member pixel features of superpixel j."""
    assignment_flat = np.asarray(assignment_flat).reshape(-1)
    pixel_features = np.asarray(pixel_features, dtype=np.float64)
    if m is None:
        m = int(assignment_flat.max()) + 1
    counts = np.bincount(assignment_flat, minlength=m)
    if (counts == 0).any():
        empty = np.flatnonzero(counts == 0)
        raise EmptySuperpixel(f"superpixels with no members: {empty.tolist()}")
    sums = np.zeros((m, pixel_features.shape[1]))
    np.add.at(sums, assignment_flat, pixel_features)
    return sums / counts[:, None]


def _connected_components(assignment: np.ndarray) -> np.ndarray:
    """4-connected component labels of same-id regions (flood fill)."""
    h, w = assignment.shape
    comp = np.full((h, w), -1, dtype=np.int32)
    next_id = 0
    for y0 in range(h):
        for x0 in range(w):
            if comp[y0, x0] >= 0:
                continue
            sid = assignment[y0, x0]
            stack = [(y0, x0)]
            comp[y0, x0] = next_id
            while stack:
                y, x = stack.pop()
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and comp[ny, nx] < 0 \
                            and assignment[ny, nx] == sid:
                        comp[ny, nx] = next_id
                        stack.append((ny, nx))
            next_id += 1
    return comp


def _region_adjacency(labels: np.ndarray) -> dict[int, set[int]]:
    adj: dict[int, set[int]] = {}
    pairs = set()
    a, b = labels[:, :-1].reshape(-1), labels[:, 1:].reshape(-1)
    mask = a != b
    pairs.update(zip(a[mask].tolist(), b[mask].tolist()))
    a, b = labels[:-1, :].reshape(-1), labels[1:, :].reshape(-1)
    mask = a != b
    pairs.update(zip(a[mask].tolist(), b[mask].tolist()))
    for u, v in pairs:
        adj.setdefault(u, set()).add(v)
        adj.setdefault(v, set()).add(u)
    return adj


def _merge_orphans(assignment: np.ndarray) -> np.ndarray:
    """Keep each id's largest component; merge fragments into largest adjacent region."""
    comp = _connected_components(assignment)
    n_comp = comp.max() + 1
    comp_flat = comp.reshape(-1)
    sizes = np.bincount(comp_flat, minlength=n_comp)
    ids = np.full(n_comp, -1, dtype=np.int64)
    ids[comp_flat] = assignment.reshape(-1)
    keep = np.zeros(n_comp, dtype=bool)
    for sid in np.unique(ids):
        cands = np.flatnonzero(ids == sid)
        keep[cands[np.argmax(sizes[cands])]] = True

    adj = _region_adjacency(comp)
    labels = comp.copy()
    orphans = sorted(np.flatnonzero(~keep).tolist(), key=lambda c: (sizes[c], c))
    target = np.arange(n_comp)
    for c in orphans:
        neighbors = sorted(adj.get(c, ()))
        if not neighbors:
            continue
        resolved = [target[n] for n in neighbors]
        while any(target[r] != r for r in resolved):
            resolved = [target[r] for r in resolved]
        best = max(resolved, key=lambda r: (sizes[r], -r))
        sizes[best] += sizes[c]
        target[c] = best
        labels[labels == c] = best
    return labels


def _relabel_contiguous(labels: np.ndarray) -> np.ndarray:
    """Remap ids to 0..M-1 in order of first raster-scan occurrence."""
    flat = labels.reshape(-1)
    _, first_idx, inverse = np.unique(flat, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first_idx))
    return rank[inverse].reshape(labels.shape).astype(np.int32)


def _split_region(labels: np.ndarray, region: int, next_id: int) -> int:
    """Bisect one region along its longer bbox axis; returns the next free id."""
    ys, xs = np.nonzero(labels == region)
    if ys.size < 2:
        return next_id
    if ys.max() - ys.min() >= xs.max() - xs.min():
        cut = np.median(ys)
        half = ys > cut
        if not half.any() or half.all():
            half = ys > np.partition(ys, ys.size // 2)[ys.size // 2 - 1]
    else:
        cut = np.median(xs)
        half = xs > cut
        if not half.any() or half.all():
            half = xs > np.partition(xs, xs.size // 2)[xs.size // 2 - 1]
    if not half.any() or half.all():
        half = np.zeros(ys.size, dtype=bool)
        half[0] = True
    labels[ys[half], xs[half]] = next_id
    return next_id + 1


def segment(gray: np.ndarray, m: int, seed: int = 0) -> np.ndarray:
    """Segment a gray image into exactly m non-empty 4-connected regions.

    Deterministic for fixed inputs; `seed` is accepted for interface stability
    but the procedure itself is deterministic.
    """
    gray = np.asarray(gray, dtype=np.float64)
    h, w = gray.shape
    n = h * w
    if m < 1:
        raise ValueError("m must be >= 1")
    if m > n:
        raise TooManySuperpixels(f"m={m} exceeds pixel count {n}")

    if m == n:
        return np.arange(n, dtype=np.int32).reshape(h, w)

    # grid seeding
    spacing = np.sqrt(n / m)
    rows = max(1, int(round(h / spacing)))
    cols = max(1, int(np.ceil(m / rows)))
    while rows * cols < m:
        cols += 1
    ys = ((np.arange(rows) + 0.5) * h / rows).astype(int).clip(0, h - 1)
    xs = ((np.arange(cols) + 0.5) * w / cols).astype(int).clip(0, w - 1)
    seeds = [(y, x) for y in ys for x in xs][:m]

    centers_y = np.array([s[0] for s in seeds], dtype=np.float64)
    centers_x = np.array([s[1] for s in seeds], dtype=np.float64)
    centers_v = gray[[s[0] for s in seeds], [s[1] for s in seeds]]

    yy, xx = np.mgrid[0:h, 0:w]
    value_scale = 0.1  # a 0.1 gray contrast weighs like one full spacing offset
    win = int(np.ceil(2 * spacing))

    labels = np.zeros((h, w), dtype=np.int32)
    for _ in range(10):
        best = np.full((h, w), np.inf)
        labels.fill(-1)
        for j in range(len(seeds)):
            cy, cx = centers_y[j], centers_x[j]
            y0, y1 = max(0, int(cy) - win), min(h, int(cy) + win + 1)
            x0, x1 = max(0, int(cx) - win), min(w, int(cx) + win + 1)
            dv = (gray[y0:y1, x0:x1] - centers_v[j]) / value_scale
            dy = (yy[y0:y1, x0:x1] - cy) / spacing
            dx = (xx[y0:y1, x0:x1] - cx) / spacing
            dist = dv * dv + dy * dy + dx * dx
            better = dist < best[y0:y1, x0:x1]
            best[y0:y1, x0:x1] = np.where(better, dist, best[y0:y1, x0:x1])
            labels[y0:y1, x0:x1] = np.where(better, j, labels[y0:y1, x0:x1])
        # windowed search can strand far pixels; snap them to the nearest center
        if (labels < 0).any():
            oy, ox = np.nonzero(labels < 0)
            d = ((gray[oy, ox][:, None] - centers_v[None, :]) / value_scale) ** 2 \
                + ((oy[:, None] - centers_y[None, :]) / spacing) ** 2 \
                + ((ox[:, None] - centers_x[None, :]) / spacing) ** 2
            labels[oy, ox] = np.argmin(d, axis=1)
        flat = labels.reshape(-1)
        counts = np.bincount(flat, minlength=len(seeds)).astype(np.float64)
        nonzero = counts > 0
        sum_y = np.bincount(flat, weights=yy.reshape(-1), minlength=len(seeds))
        sum_x = np.bincount(flat, weights=xx.reshape(-1), minlength=len(seeds))
        sum_v = np.bincount(flat, weights=gray.reshape(-1), minlength=len(seeds))
        centers_y[nonzero] = sum_y[nonzero] / counts[nonzero]
        centers_x[nonzero] = sum_x[nonzero] / counts[nonzero]
        centers_v[nonzero] = sum_v[nonzero] / counts[nonzero]

    labels = _merge_orphans(labels)
    labels = _relabel_contiguous(labels)

    # split largest regions until at least m, then merge smallest into a neighbor
    count = labels.max() + 1
    while count < m:
        sizes = np.bincount(labels.reshape(-1), minlength=count)
        next_id = _split_region(labels, int(np.argmax(sizes)), count)
        if next_id == count:
            break
        labels = _merge_orphans(labels)  # splits may fragment; re-extract components
        labels = _relabel_contiguous(labels)
        count = labels.max() + 1
    while count > m:
        sizes = np.bincount(labels.reshape(-1), minlength=count)
        adj = _region_adjacency(labels)
        smallest = int(np.argmin(sizes))
        neighbors = sorted(adj.get(smallest, ()))
        partner = min(neighbors, key=lambda r: (sizes[r], r))
        labels[labels == smallest] = partner
        labels = _relabel_contiguous(labels)
        count = labels.max() + 1
    return labels


def majority_labels(assignment: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-superpixel mode over labeled member pixels; ties to smallest class id.

    Superpixels whose members are all unlabeled get 0.
    """
    flat_a = np.asarray(assignment).reshape(-1)
    flat_l = np.asarray(labels).reshape(-1)
    m = int(flat_a.max()) + 1
    k = int(flat_l.max())
    out = np.zeros(m, dtype=np.int32)
    if k == 0:
        return out
    counts = np.zeros((m, k + 1), dtype=np.int64)
    np.add.at(counts, (flat_a, flat_l), 1)
    labeled = counts[:, 1:]
    has_label = labeled.sum(axis=1) > 0
    out[has_label] = np.argmax(labeled[has_label], axis=1) + 1
    return out


def sample_augmented_views(sp: SuperpixelSet, pixel_features: np.ndarray,
                           rng: np.random.Generator) -> np.ndarray:
    """Row j = feature of one uniformly sampled member pixel of superpixel j."""
    pixel_features = np.asarray(pixel_features, dtype=np.float64)
    picks = np.empty(sp.m, dtype=np.int64)
    for j in range(sp.m):
        mem = sp.members[j]
        picks[j] = mem[rng.integers(0, mem.size)]
    return pixel_features[picks]


def import_segmentation(path, expected_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Load a segmentation raster; relabels to contiguous ids when gaps exist."""
    with open(path, "rb") as fh:
        line = fh.readline()
        header = json.loads(line.decode("utf-8"))
        h, w = int(header["height"]), int(header["width"])
        declared = int(header["count"])
        payload = fh.read()
    if len(payload) != h * w * 4:
        raise ValueError(f"payload {len(payload)} bytes, expected {h * w * 4}")
    if expected_shape is not None and (h, w) != expected_shape:
        raise ValueError(f"segmentation {h}x{w} does not match cube {expected_shape}")
    raster = np.frombuffer(payload, dtype="<u4").astype(np.int64).reshape(h, w)
    present = np.unique(raster)
    if present.size != declared or present[-1] != present.size - 1:
        log.warning("segmentation ids have gaps (declared %d, found %d); relabeling",
                    declared, present.size)
        raster = np.searchsorted(present, raster)
    comp = _connected_components(raster.astype(np.int32))
    if comp.max() + 1 != present.size:
        log.warning("imported segmentation contains disconnected superpixels")
    return raster.astype(np.int32)


def export_segmentation(path, assignment: np.ndarray) -> None:
    assignment = np.asarray(assignment)
    header = json.dumps({"height": assignment.shape[0], "width": assignment.shape[1],
                         "count": int(assignment.max()) + 1}) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(np.ascontiguousarray(assignment, dtype="<u4").tobytes())
