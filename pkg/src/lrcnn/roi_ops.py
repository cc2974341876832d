"""Region-level differentiable operators.

Four ops: RoIAlign, position-sensitive RoIAlign, affine grid generation and
bilinear grid sampling. All are pure functions of their inputs with analytic
backward passes registered on the tape.

Coordinate conventions:
  * RoIs live in image pixels and are scaled by `spatial_scale` into feature
    coordinates with no half-pixel shift.
  * Feature pixel (i, j) sits at continuous coordinate (i, j); RoIAlign
    samples clamp to the [0, H-1] x [0, W-1] border.
  * affine_grid / grid_sample use align-corners normalized coordinates
    (x = -1 and +1 map to the first/last pixel exactly); grid_sample
    zero-pads samples that fall outside the input.

The pooling ops bucket rois by their per-axis sampling counts so each bucket
runs as one rectangular gather; a bucket also defines one flat scatter per
bilinear corner on the backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Array, Tensor, is_grad_enabled

# Sample coordinates this close to an integer snap to it, which makes
# identity-grid resampling exact despite the normalized-coordinate roundtrip.
_SNAP = 1e-9

# Above this many gathered elements (channels x samples) pooling falls back
# to a per-roi loop to bound temporary memory.
_GATHER_LIMIT = 1 << 24


@dataclass(frozen=True)
class RoI:
    """Axis-aligned rectangle in image pixels plus its batch row."""

    batch_index: int
    x1: float
    y1: float
    x2: float
    y2: float


@dataclass(frozen=True)
class RoiAlignConfig:
    pooled_size: int = 7
    spatial_scale: float = 1.0 / 8.0
    sampling_points_per_bin_axis: int | None = None  # None = adaptive ceil(bin extent)

    def __post_init__(self):
        if self.pooled_size < 1:
            raise ValueError("pooled_size must be >= 1")
        if self.spatial_scale <= 0:
            raise ValueError("spatial_scale must be > 0")


def rois_to_array(rois) -> Array:
    """Normalize a list of RoI (or an (R,5) array) to a float64 (R,5) array."""
    if isinstance(rois, np.ndarray):
        arr = np.asarray(rois, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 5:
            raise ValueError(f"roi array must be (R,5), got {arr.shape}")
        return arr
    arr = np.array(
        [[r.batch_index, r.x1, r.y1, r.x2, r.y2] for r in rois], dtype=np.float64
    ).reshape(-1, 5)
    return arr


def _check_rois(arr: Array, batch: int) -> None:
    if np.isnan(arr).any():
        raise ValueError("RoI coordinates contain NaN")
    idx = arr[:, 0]
    if arr.shape[0] and ((idx < 0).any() or (idx >= batch).any() or (idx != np.round(idx)).any()):
        raise ValueError("RoI batch index out of range")


def _bilinear_prep(coords: Array, limit: int):
    """Clamped bilinear decomposition: indices of the two neighbors and the
    interpolation weight, for coordinates clamped to [0, limit-1]."""
    c = np.clip(coords, 0.0, limit - 1.0)
    i0 = np.floor(c).astype(np.intp)
    i0 = np.minimum(i0, limit - 1)
    i1 = np.minimum(i0 + 1, limit - 1)
    w = c - i0
    return i0, i1, w


@dataclass
class _PoolPlan:
    """Sampling layout shared by roi_align and ps_roi_align."""

    x1f: Array
    y1f: Array
    rw: Array
    rh: Array
    sy: Array
    sx: Array
    groups: list[tuple[int, int, Array]]  # (sy, sx, roi indices)
    total: int  # total flattened samples over all rois


def _plan_pooling(arr: Array, scale: float, bins: int, fixed: int | None) -> _PoolPlan:
    x1f = arr[:, 1] * scale
    y1f = arr[:, 2] * scale
    rw = np.maximum(arr[:, 3] * scale - x1f, 1e-6)
    rh = np.maximum(arr[:, 4] * scale - y1f, 1e-6)
    if fixed is not None:
        sy = np.full(arr.shape[0], fixed, dtype=np.intp)
        sx = sy
    else:
        sy = np.maximum(np.ceil(rh / bins), 1).astype(np.intp)
        sx = np.maximum(np.ceil(rw / bins), 1).astype(np.intp)
    groups = []
    total = 0
    for key in sorted({(int(a), int(b)) for a, b in zip(sy, sx)}):
        idx = np.flatnonzero((sy == key[0]) & (sx == key[1]))
        groups.append((key[0], key[1], idx))
        total += idx.size * (bins * key[0]) * (bins * key[1])
    return _PoolPlan(x1f, y1f, rw, rh, sy, sx, groups, total)


def _group_sample_coords(plan: _PoolPlan, idx: Array, bins: int, sy: int, sx: int):
    """Flattened (Rg, My*Mx) y/x sample coordinates for one bucket, y-major."""

    def axis_coords(lo, extent, s):
        frac = ((np.arange(bins)[:, None] + (np.arange(s)[None, :] + 0.5) / s) / bins).ravel()
        return lo[idx][:, None] + frac[None, :] * extent[idx][:, None]

    ys = axis_coords(plan.y1f, plan.rh, sy)  # (Rg, bins*sy)
    xs = axis_coords(plan.x1f, plan.rw, sx)
    rg = idx.size
    my, mx = bins * sy, bins * sx
    y_all = np.broadcast_to(ys[:, :, None], (rg, my, mx)).reshape(rg, my * mx)
    x_all = np.broadcast_to(xs[:, None, :], (rg, my, mx)).reshape(rg, my * mx)
    return y_all, x_all


def roi_align(features: Tensor, rois, cfg: RoiAlignConfig) -> Tensor:
    """Average RoIAlign: (N,C,H,W) + R rois -> (R,C,P,P).

    Each output bin averages sy x sx bilinear samples at regularly spaced
    points inside the bin (adaptive ceil(bin extent) per axis by default);
    samples outside the feature map clamp to the border. Degenerate rois are
    widened to 1e-6 feature pixels.
    """
    arr = rois_to_array(rois)
    n, c, h, w = features.shape
    _check_rois(arr, n)
    p = cfg.pooled_size
    r_count = arr.shape[0]
    out = np.zeros((r_count, c, p, p))
    if r_count == 0:
        return Tensor(out)
    plan = _plan_pooling(arr, cfg.spatial_scale, p, cfg.sampling_points_per_bin_axis)
    b_all = arr[:, 0].astype(np.intp)
    fd = features.data

    if c * plan.total > _GATHER_LIMIT:
        return _roi_align_chunked(features, arr, cfg, plan, out)

    # one flat gather per bilinear corner over every roi
    fflat = fd.transpose(1, 0, 2, 3).reshape(c, -1) if n > 1 else fd.reshape(c, -1)
    fflat_is_cfirst = n > 1  # channels-first layout flattens to (c, n*h*w)
    seg_parts_y, seg_parts_x, seg_parts_b = [], [], []
    seg_meta = []  # (roi indices, start, my, mx)
    start = 0
    for sy, sx, idx in plan.groups:
        y_all, x_all = _group_sample_coords(plan, idx, p, sy, sx)
        seg_parts_y.append(y_all.ravel())
        seg_parts_x.append(x_all.ravel())
        seg_parts_b.append(np.repeat(b_all[idx], y_all.shape[1]))
        seg_meta.append((idx, start, p * sy, p * sx, sy, sx))
        start += y_all.size
    y_cat = np.concatenate(seg_parts_y)
    x_cat = np.concatenate(seg_parts_x)
    b_cat = np.concatenate(seg_parts_b)
    x0, x1, wx = _bilinear_prep(x_cat, w)
    y0, y1, wy = _bilinear_prep(y_cat, h)
    if fflat_is_cfirst:
        flat_of = lambda yi, xi: (b_cat * h + yi) * w + xi
    else:
        flat_of = lambda yi, xi: yi * w + xi  # n == 1
    corners = (
        (y0, x0, (1 - wy) * (1 - wx)),
        (y0, x1, (1 - wy) * wx),
        (y1, x0, wy * (1 - wx)),
        (y1, x1, wy * wx),
    )
    vals = np.zeros((c, plan.total))
    idxs = []
    for yi, xi, wgt in corners:
        fi = flat_of(yi, xi)
        idxs.append(fi)
        vals += fflat[:, fi] * wgt[None, :]
    for idx, s0, my, mx, sy, sx in seg_meta:
        seg = vals[:, s0 : s0 + idx.size * my * mx].reshape(c, idx.size, p, sy, p, sx)
        out[idx] = seg.mean(axis=(3, 5)).transpose(1, 0, 2, 3)

    if not is_grad_enabled():
        return Tensor(out)

    def bw(g: Array) -> Array:
        gs = np.empty((c, plan.total))
        for idx, s0, my, mx, sy, sx in seg_meta:
            seg = np.broadcast_to(
                g[idx].transpose(1, 0, 2, 3)[:, :, :, None, :, None] / (sy * sx),
                (c, idx.size, p, sy, p, sx),
            ).reshape(c, -1)
            gs[:, s0 : s0 + idx.size * my * mx] = seg
        df_t = np.zeros((c, n, h, w))
        dflat = df_t.reshape(c, -1)
        rows = np.arange(c)[:, None]
        for (yi, xi, wgt), fi in zip(corners, idxs):
            gfi = fi if fflat_is_cfirst else b_cat * (h * w) + fi
            np.add.at(dflat, (rows, gfi[None, :]), gs * wgt[None, :])
        return df_t.transpose(1, 0, 2, 3)

    return Tensor(out, [(features, bw)])


def _roi_align_chunked(features: Tensor, arr: Array, cfg: RoiAlignConfig, plan: _PoolPlan, out: Array) -> Tensor:
    """Per-roi fallback used when a single gather would be too large."""
    n, c, h, w = features.shape
    p = cfg.pooled_size
    fd = features.data
    grad_on = is_grad_enabled()
    records = []
    for r in range(arr.shape[0]):
        b = int(arr[r, 0])
        sy, sx = int(plan.sy[r]), int(plan.sx[r])
        y_all, x_all = _group_sample_coords(plan, np.array([r]), p, sy, sx)
        x0, x1, wx = _bilinear_prep(x_all[0], w)
        y0, y1, wy = _bilinear_prep(y_all[0], h)
        fb = fd[b].reshape(c, -1)
        corners = (
            (y0, x0, (1 - wy) * (1 - wx)),
            (y0, x1, (1 - wy) * wx),
            (y1, x0, wy * (1 - wx)),
            (y1, x1, wy * wx),
        )
        vals = np.zeros((c, y_all.shape[1]))
        for yi, xi, wgt in corners:
            vals += fb[:, yi * w + xi] * wgt[None, :]
        out[r] = vals.reshape(c, p, sy, p, sx).mean(axis=(2, 4))
        if grad_on:
            records.append((b, corners, sy, sx))

    if not grad_on:
        return Tensor(out)

    def bw(g: Array) -> Array:
        df = np.zeros((n, c, h, w))
        rows = np.arange(c)[:, None]
        for r, (b, corners, sy, sx) in enumerate(records):
            gs = np.broadcast_to(
                g[r][:, :, None, :, None] / (sy * sx), (c, p, sy, p, sx)
            ).reshape(c, -1)
            dflat = df[b].reshape(c, -1)
            for yi, xi, wgt in corners:
                np.add.at(dflat, (rows, (yi * w + xi)[None, :]), gs * wgt[None, :])
        return df

    return Tensor(out, [(features, bw)])


def ps_roi_align(score_maps: Tensor, rois, cfg: RoiAlignConfig, k: int, num_classes: int) -> Tensor:
    """Position-sensitive RoIAlign: (N, k*k*C, H, W) + R rois -> (R, C, k, k).

    Output bin (i, j) of class c pools only input channel c*k*k + i*k + j
    (class-major layout), using the same sampling rules as roi_align.
    """
    arr = rois_to_array(rois)
    n, ch, h, w = score_maps.shape
    if ch != k * k * num_classes:
        raise ValueError(f"ps_roi_align needs {k * k * num_classes} channels, got {ch}")
    if cfg.pooled_size != k:
        raise ValueError("ps_roi_align requires cfg.pooled_size == k")
    _check_rois(arr, n)
    r_count = arr.shape[0]
    out = np.zeros((r_count, num_classes, k, k))
    if r_count == 0:
        return Tensor(out)
    plan = _plan_pooling(arr, cfg.spatial_scale, k, cfg.sampling_points_per_bin_axis)
    sflat = score_maps.data.reshape(-1)
    b_all = arr[:, 0].astype(np.intp)
    grad_on = is_grad_enabled()

    # chan[c, i, j] = c*k*k + i*k + j
    chan = (
        np.arange(num_classes)[:, None, None] * k * k
        + np.arange(k)[None, :, None] * k
        + np.arange(k)[None, None, :]
    )

    group_data = []
    for sy, sx, idx in plan.groups:
        y_all, x_all = _group_sample_coords(plan, idx, k, sy, sx)
        rg, my, mx = idx.size, k * sy, k * sx
        x0, x1, wx = _bilinear_prep(x_all.reshape(rg, my, mx)[:, 0, :], w)
        y0, y1, wy = _bilinear_prep(y_all.reshape(rg, my, mx)[:, :, 0], h)

        def s6y(a):  # (Rg, k, sy) -> (Rg, 1, k, 1, sy, 1)
            return a.reshape(rg, k, sy)[:, None, :, None, :, None]

        def s6x(a):
            return a.reshape(rg, k, sx)[:, None, None, :, None, :]

        base = (b_all[idx][:, None, None, None, None, None] * ch + chan[None, :, :, :, None, None]) * h
        corners = []
        for yi, wy_, xi, wx_ in (
            (s6y(y0), 1 - s6y(wy), s6x(x0), 1 - s6x(wx)),
            (s6y(y0), 1 - s6y(wy), s6x(x1), s6x(wx)),
            (s6y(y1), s6y(wy), s6x(x0), 1 - s6x(wx)),
            (s6y(y1), s6y(wy), s6x(x1), s6x(wx)),
        ):
            fi, wgt = np.broadcast_arrays((base + yi) * w + xi, wy_ * wx_)
            corners.append((fi, wgt))
        vals = np.zeros((rg, num_classes, k, k, sy, sx))
        for fi, wgt in corners:
            vals += sflat[fi] * wgt
        out[idx] = vals.mean(axis=(4, 5))
        if grad_on:
            group_data.append((idx, corners, sy, sx))

    if not grad_on:
        return Tensor(out)

    def bw(g: Array) -> Array:
        df = np.zeros(n * ch * h * w)
        for ci in range(4):
            fis, vvs = [], []
            for idx, corners, sy, sx in group_data:
                fi, wgt = corners[ci]
                gs = g[idx][:, :, :, :, None, None] / (sy * sx)
                fi_b, vv = np.broadcast_arrays(fi, gs * wgt)
                fis.append(fi_b.ravel())
                vvs.append(vv.ravel())
            np.add.at(df, np.concatenate(fis), np.concatenate(vvs))
        return df.reshape(n, ch, h, w)

    return Tensor(out, [(score_maps, bw)])


def affine_grid(theta: Tensor, out_size: tuple[int, int, int, int]) -> Tensor:
    """Per-row 2x3 affine params -> sampling grid (R, H_g, W_g, 2).

    Target cell (u, v) gets normalized coords x_t = -1 + 2u/(W_g-1),
    y_t = -1 + 2v/(H_g-1) (align-corners) and source coords theta @ (x, y, 1).
    """
    r, _, hg, wg = out_size
    if theta.ndim != 3 or theta.shape[1:] != (2, 3):
        raise ValueError(f"theta must be (R,2,3), got {theta.shape}")
    if theta.shape[0] != r:
        raise ValueError("theta rows must match out_size batch")
    if hg < 2 or wg < 2:
        raise ValueError("affine_grid output dims must be >= 2")
    xs = np.linspace(-1.0, 1.0, wg)
    ys = np.linspace(-1.0, 1.0, hg)
    homog = np.empty((hg, wg, 3))
    homog[:, :, 0] = xs[None, :]
    homog[:, :, 1] = ys[:, None]
    homog[:, :, 2] = 1.0
    grid = np.einsum("rij,hwj->rhwi", theta.data, homog)

    def bw(g: Array) -> Array:
        return np.einsum("rhwi,hwj->rij", g, homog)

    return Tensor(grid, [(theta, bw)])


def grid_sample(inp: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of (R,C,H,W) at normalized grid (R,H_g,W_g,2).

    Align-corners pixel mapping px = (x+1)(W-1)/2; out-of-range neighbors
    contribute zero (zero padding). Gradients flow to both the input and the
    grid.
    """
    r, c, h, w = inp.shape
    if grid.ndim != 4 or grid.shape[3] != 2 or grid.shape[0] != r:
        raise ValueError(f"grid shape {grid.shape} incompatible with input {inp.shape}")
    hg, wg = grid.shape[1], grid.shape[2]

    px = (grid.data[..., 0] + 1.0) * ((w - 1) / 2.0)
    py = (grid.data[..., 1] + 1.0) * ((h - 1) / 2.0)
    rx = np.rint(px)
    ry = np.rint(py)
    px = np.where(np.abs(px - rx) < _SNAP, rx, px)
    py = np.where(np.abs(py - ry) < _SNAP, ry, py)

    x0 = np.floor(px).astype(np.intp)
    y0 = np.floor(py).astype(np.intp)
    x1 = x0 + 1
    y1 = y0 + 1
    wx = (px - x0).reshape(r, -1)
    wy = (py - y0).reshape(r, -1)
    s = hg * wg

    def masked_flat(yi, xi):
        m = (yi >= 0) & (yi <= h - 1) & (xi >= 0) & (xi <= w - 1)
        idx = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
        return idx.reshape(r, s), m.reshape(r, s).astype(np.float64)

    weights = ((1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx)
    pairs = ((y0, x0), (y0, x1), (y1, x0), (y1, x1))
    inpf = inp.data.reshape(r, c, h * w)
    vals = []  # masked corner samples (r, c, s), reused by both gradients
    out = np.zeros((r, c, s))
    corner_cache = []
    for (yi, xi), wgt in zip(pairs, weights):
        idx, m = masked_flat(yi, xi)
        v = np.take_along_axis(inpf, idx[:, None, :], axis=2) * m[:, None, :]
        out += v * wgt[:, None, :]
        vals.append(v)
        corner_cache.append((idx, m, wgt))
    out = out.reshape(r, c, hg, wg)

    if not is_grad_enabled():
        return Tensor(out)

    def bw_input(g: Array) -> Array:
        gf = g.reshape(r, c, s)
        di = np.zeros((r, c, h * w))
        rows = np.arange(c)[None, :, None]
        r_idx = np.arange(r)[:, None, None]
        for idx, m, wgt in corner_cache:
            np.add.at(di, (r_idx, rows, idx[:, None, :]), gf * (m * wgt)[:, None, :])
        return di.reshape(r, c, h, w)

    def bw_grid(g: Array) -> Array:
        gf = g.reshape(r, c, s)
        v00, v01, v10, v11 = vals
        dwx = ((1 - wy)[:, None, :] * (v01 - v00) + wy[:, None, :] * (v11 - v10)) * gf
        dwy = ((1 - wx)[:, None, :] * (v10 - v00) + wx[:, None, :] * (v11 - v01)) * gf
        dg = np.empty((r, s, 2))
        dg[:, :, 0] = dwx.sum(axis=1) * ((w - 1) / 2.0)
        dg[:, :, 1] = dwy.sum(axis=1) * ((h - 1) / 2.0)
        return dg.reshape(r, hg, wg, 2)

    return Tensor(out, [(inp, bw_input), (grid, bw_grid)])
