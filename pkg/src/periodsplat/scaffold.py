"""The unified anchor scaffold.

Anchors are fixed 3D points on a voxel grid built from the union of all
periods' sparse points. Each anchor carries learnable features (a base
vector plus per-period rows), K learnable center offsets, and two learnable
per-axis scales. Training statistics drive mid-training growth (new anchors
at high-gradient decoded positions) and pruning (persistently transparent
anchors).

Structure-of-arrays layout: row i of every array belongs to anchor i. At
most one anchor ever occupies a voxel cell; the grid (box_min, voxel_size)
is fixed at construction so grown anchors land on the same lattice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyPointCloud
from .geom import frustum_test_many


@dataclass
class Anchor:
    """Single-anchor view into the scaffold arrays (no copies)."""

    position: np.ndarray
    f_base: np.ndarray
    f_var: np.ndarray
    offsets: np.ndarray
    offset_scale: np.ndarray
    shape_scale: np.ndarray


@dataclass
class AccumStats:
    """Per-slot and per-anchor training statistics between densify events."""

    grad_norm_sum: np.ndarray  # (N, K) accumulated ||dL/dmean2d||
    visible_count: np.ndarray  # (N, K) int
    opacity_sum: np.ndarray  # (N,) accumulated per-anchor max decoded opacity
    sample_count: np.ndarray  # (N,) int
    feature_grad_sum: np.ndarray  # (N,) accumulated ||dL/df_base||

    @staticmethod
    def zeros(n, k):
        return AccumStats(
            grad_norm_sum=np.zeros((n, k), dtype=np.float64),
            visible_count=np.zeros((n, k), dtype=np.int64),
            opacity_sum=np.zeros(n, dtype=np.float64),
            sample_count=np.zeros(n, dtype=np.int64),
            feature_grad_sum=np.zeros(n, dtype=np.float64),
        )


class AnchorScaffold:
    def __init__(self, positions, f_base, f_var, offsets, offset_scale, shape_scale,
                 voxel_size, box_min, occupied):
        self.positions = positions
        self.f_base = f_base
        self.f_var = f_var
        self.offsets = offsets
        self.offset_scale = offset_scale
        self.shape_scale = shape_scale
        self.voxel_size = float(voxel_size)
        self.box_min = np.asarray(box_min, dtype=np.float64)
        self.occupied = occupied  # cell tuple -> anchor index
        self.stats = AccumStats.zeros(len(positions), offsets.shape[1])

    def __len__(self):
        return self.positions.shape[0]

    @property
    def K(self):
        return self.offsets.shape[1]

    @property
    def T(self):
        return self.f_var.shape[1]

    @property
    def d_b(self):
        return self.f_base.shape[1]

    @property
    def d_v(self):
        return self.f_var.shape[2]

    def anchor(self, i):
        return Anchor(self.positions[i], self.f_base[i], self.f_var[i],
                      self.offsets[i], self.offset_scale[i], self.shape_scale[i])

    def cell_of(self, point):
        return tuple(np.floor((np.asarray(point) - self.box_min) / self.voxel_size).astype(np.int64))

    def decoded_positions(self):
        """World centers of every offset slot: x_i + offset_scale_i * offsets_ik."""
        return self.positions[:, None, :] + self.offset_scale[:, None, :] * self.offsets


def voxel_cells(points, voxel_size, box_min, box_max=None):
    """Grid cell index of each point. When box_max is given, indices are
    clamped so points exactly on the upper box face join the last interior
    cell instead of opening a boundary-only cell."""
    cells = np.floor((points - box_min) / voxel_size).astype(np.int64)
    if box_max is not None:
        top = np.ceil((box_max - box_min) / voxel_size).astype(np.int64) - 1
        cells = np.minimum(cells, np.maximum(top, 0))
    return cells


def voxelize(points, voxel_size):
    """Deduplicated cell centers of the occupied voxels, in lexicographic
    cell order. Centers are (cell + 0.5) * voxel_size + box_min."""
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        raise EmptyPointCloud("voxelize needs at least one point")
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    box_min = points.min(axis=0)
    cells = np.unique(voxel_cells(points, voxel_size, box_min, points.max(axis=0)), axis=0)
    # np.unique sorts rows lexicographically already.
    centers = (cells + 0.5) * voxel_size + box_min
    return centers


def voxel_size_for_points(points, fraction):
    """Cell size as a fraction of the point bounding-box diagonal."""
    points = np.asarray(points, dtype=np.float64)
    diag = float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
    if diag == 0.0:
        diag = 1.0
    return fraction * diag


def init_scaffold(per_period_points, voxel_size, *, d_b, d_v, K):
    """Build the scaffold from the union of all periods' sparse points.

    One zero-featured anchor per occupied voxel cell; offsets start at zero
    and both per-anchor scales start at the voxel size on every axis. T is
    the number of per-period point lists.
    """
    T = len(per_period_points)
    arrays = [np.asarray(p, dtype=np.float64).reshape(-1, 3) for p in per_period_points]
    nonempty = [a for a in arrays if a.size > 0]
    if not nonempty:
        raise EmptyPointCloud("all periods are empty")
    points = np.concatenate(nonempty, axis=0)
    box_min = points.min(axis=0)
    cells = np.unique(voxel_cells(points, voxel_size, box_min, points.max(axis=0)), axis=0)
    centers = (cells + 0.5) * voxel_size + box_min
    n = centers.shape[0]
    occupied = {tuple(c): i for i, c in enumerate(cells)}
    return AnchorScaffold(
        positions=centers,
        f_base=np.zeros((n, d_b), dtype=np.float64),
        f_var=np.zeros((n, T, d_v), dtype=np.float64),
        offsets=np.zeros((n, K, 3), dtype=np.float64),
        offset_scale=np.full((n, 3), voxel_size, dtype=np.float64),
        shape_scale=np.full((n, 3), voxel_size, dtype=np.float64),
        voxel_size=voxel_size,
        box_min=box_min,
        occupied=occupied,
    )


def visible_anchors(scaffold, camera, margin=None):
    """Indices (ascending) of anchors whose position passes the frustum test."""
    if len(scaffold) == 0:
        return np.empty(0, dtype=np.int64)
    mask = frustum_test_many(camera, scaffold.positions, margin)
    return np.nonzero(mask)[0]


def accumulate_stats(scaffold, graph, grads):
    """Fold one view's backward results into the scaffold statistics.

    Every rendered splat adds its 2D positional gradient norm to its
    (anchor, slot) cell and bumps the slot's visible count; every visible
    anchor adds its strongest decoded opacity, one sample, and the norm of
    its base-feature gradient.
    """
    st = scaffold.stats
    if graph.splat_anchors.size:
        norms = np.linalg.norm(grads.splat_mean2d, axis=1)
        np.add.at(st.grad_norm_sum, (graph.splat_anchors, graph.splat_slots), norms)
        np.add.at(st.visible_count, (graph.splat_anchors, graph.splat_slots), 1)
    vis = graph.visible
    if vis.size:
        st.opacity_sum[vis] += graph.max_opacity
        st.sample_count[vis] += 1
        st.feature_grad_sum[vis] += np.linalg.norm(grads.f_base[vis], axis=1)


def grow_anchors(scaffold, tau_g, min_visibility):
    """Spawn zero-featured anchors at hot offset slots' decoded positions.

    A slot qualifies when its mean 2D positional gradient exceeds tau_g over
    at least min_visibility sightings. The decoded position's voxel cell is
    filled only if empty; existing anchors are never touched. Qualifying
    slots have their statistics reset. Returns the number of new anchors.
    """
    st = scaffold.stats
    seen = st.visible_count >= max(int(min_visibility), 1)
    denom = np.maximum(st.visible_count, 1)
    hot = seen & (st.grad_norm_sum / denom > tau_g)
    if not hot.any():
        return 0

    candidates = scaffold.decoded_positions()[hot]  # in (anchor, slot) order
    new_cells = []
    for pos in candidates:
        cell = scaffold.cell_of(pos)
        if cell not in scaffold.occupied:
            scaffold.occupied[cell] = len(scaffold) + len(new_cells)
            new_cells.append(cell)
    st.grad_norm_sum[hot] = 0.0
    st.visible_count[hot] = 0
    if not new_cells:
        return 0

    centers = (np.asarray(new_cells, dtype=np.float64) + 0.5) * scaffold.voxel_size + scaffold.box_min
    m = len(new_cells)
    scaffold.positions = np.concatenate([scaffold.positions, centers], axis=0)
    scaffold.f_base = np.concatenate(
        [scaffold.f_base, np.zeros((m, scaffold.d_b), dtype=scaffold.f_base.dtype)], axis=0)
    scaffold.f_var = np.concatenate(
        [scaffold.f_var, np.zeros((m, scaffold.T, scaffold.d_v), dtype=scaffold.f_var.dtype)], axis=0)
    scaffold.offsets = np.concatenate(
        [scaffold.offsets, np.zeros((m, scaffold.K, 3), dtype=scaffold.offsets.dtype)], axis=0)
    fill = np.full((m, 3), scaffold.voxel_size, dtype=scaffold.offset_scale.dtype)
    scaffold.offset_scale = np.concatenate([scaffold.offset_scale, fill], axis=0)
    scaffold.shape_scale = np.concatenate(
        [scaffold.shape_scale, fill.astype(scaffold.shape_scale.dtype)], axis=0)
    st.grad_norm_sum = np.concatenate([st.grad_norm_sum, np.zeros((m, scaffold.K))], axis=0)
    st.visible_count = np.concatenate([st.visible_count, np.zeros((m, scaffold.K), dtype=np.int64)], axis=0)
    st.opacity_sum = np.concatenate([st.opacity_sum, np.zeros(m)], axis=0)
    st.sample_count = np.concatenate([st.sample_count, np.zeros(m, dtype=np.int64)], axis=0)
    st.feature_grad_sum = np.concatenate([st.feature_grad_sum, np.zeros(m)], axis=0)
    return m


def prune_keep_mask(scaffold, min_opacity, min_samples):
    """Boolean keep mask: drop anchors sampled at least min_samples times
    whose mean per-view max opacity stayed below min_opacity."""
    st = scaffold.stats
    sampled = st.sample_count >= max(int(min_samples), 1)
    mean_opacity = st.opacity_sum / np.maximum(st.sample_count, 1)
    return ~(sampled & (mean_opacity < min_opacity))


def apply_keep_mask(scaffold, keep):
    """Drop anchors where keep is False; resets all statistics."""
    removed = int((~keep).sum())
    if removed:
        scaffold.positions = scaffold.positions[keep]
        scaffold.f_base = scaffold.f_base[keep]
        scaffold.f_var = scaffold.f_var[keep]
        scaffold.offsets = scaffold.offsets[keep]
        scaffold.offset_scale = scaffold.offset_scale[keep]
        scaffold.shape_scale = scaffold.shape_scale[keep]
        old_to_new = np.cumsum(keep) - 1
        scaffold.occupied = {
            cell: int(old_to_new[idx]) for cell, idx in scaffold.occupied.items() if keep[idx]
        }
    scaffold.stats = AccumStats.zeros(len(scaffold), scaffold.K)
    return removed


def prune_anchors(scaffold, min_opacity, min_samples):
    """Remove persistently transparent anchors; returns the count removed."""
    keep = prune_keep_mask(scaffold, min_opacity, min_samples)
    return apply_keep_mask(scaffold, keep)
