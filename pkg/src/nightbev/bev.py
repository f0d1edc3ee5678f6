"""Depth/context split, lift-splat BEV pooling, residual cross-attention queries,
and illumination-weighted BEV refinement.

The pooling scatter enumerates contributions in a fixed (bin, row, column)
order so accumulated cell values are bit-stable from run to run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Tensor3, bilinear_sample_many, read_raw_tensor
from .geometry import BevSpec, CameraMatrix, project_points, sample_heights
from .guided_sampling import ConvParams, conv2d_replicate

DEPTH_SUM_TOL = 1e-6


def depth_bin_centers(d_min: float, d_max: float, bins: int) -> np.ndarray:
    """Centers of `bins` uniform metric-depth intervals over [d_min, d_max]."""
    if bins < 1:
        raise ValueError("depth bins must be >= 1")
    if not 0.0 < d_min < d_max:
        raise ValueError(f"need 0 < d_min < d_max, got {d_min}, {d_max}")
    step = (d_max - d_min) / float(bins)
    return d_min + (np.arange(bins, dtype=np.float64) + 0.5) * step


@dataclass(frozen=True)
class DepthContext:
    """Context feature plus a per-pixel categorical depth distribution."""

    f_ctx: Tensor3
    depth: Tensor3
    bin_centers: np.ndarray

    def __post_init__(self) -> None:
        centers = np.array(self.bin_centers, dtype=np.float64).ravel()
        if centers.size != self.depth.channels:
            raise ValueError(
                f"{centers.size} bin centers for {self.depth.channels} depth channels"
            )
        if centers.size > 1 and not (np.diff(centers) > 0).all():
            raise ValueError("bin centers must be strictly increasing")
        if (self.f_ctx.height, self.f_ctx.width) != (self.depth.height, self.depth.width):
            raise ValueError("context and depth spatial dims must match")
        sums = self.depth.data.sum(axis=0)
        if np.abs(sums - 1.0).max() > DEPTH_SUM_TOL:
            raise ValueError("depth bins must sum to 1 per pixel")
        centers.flags.writeable = False
        object.__setattr__(self, "bin_centers", centers)


def _softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def depth_context_split(
    f_in: Tensor3,
    params: ConvParams,
    c_ctx: int,
    d_bins: int,
    bin_centers: np.ndarray | None = None,
) -> DepthContext:
    """1x1 convolution splitting a feature into context channels and depth bins.

    The first c_ctx output channels pass through as the context feature; the
    remaining d_bins go through a per-pixel softmax.
    """
    if c_ctx < 1 or d_bins < 1:
        raise ValueError("c_ctx and d_bins must be >= 1")
    if params.out_channels != c_ctx + d_bins:
        raise ValueError(
            f"split conv must emit {c_ctx + d_bins} channels, got {params.out_channels}"
        )
    if params.kernel_size != 1:
        raise ValueError("split conv kernel must be 1x1")
    raw = conv2d_replicate(f_in, params)
    f_ctx = Tensor3(raw.data[:c_ctx])
    depth = Tensor3(_softmax(raw.data[c_ctx:], axis=0))
    if bin_centers is None:
        bin_centers = depth_bin_centers(1.0, 20.0, d_bins)
    return DepthContext(f_ctx=f_ctx, depth=depth, bin_centers=bin_centers)


@dataclass(frozen=True)
class AttentionParams:
    """Single-head deformable attention parameters, linear in the query vector."""

    offset_weights: np.ndarray  # (2K, C): interleaved du, dv per point
    attn_weights: np.ndarray  # (K, C): pre-softmax logits per point

    def __post_init__(self) -> None:
        ow = np.array(self.offset_weights, dtype=np.float64)
        aw = np.array(self.attn_weights, dtype=np.float64)
        if ow.ndim != 2 or aw.ndim != 2 or ow.shape[1] != aw.shape[1]:
            raise ValueError("offset/attention weights must be 2D over one query size")
        if ow.shape[0] != 2 * aw.shape[0]:
            raise ValueError(
                f"offset rows {ow.shape[0]} must be twice attention rows {aw.shape[0]}"
            )
        if not (np.isfinite(ow).all() and np.isfinite(aw).all()):
            raise ValueError("attention parameters must be finite")
        ow.flags.writeable = False
        aw.flags.writeable = False
        object.__setattr__(self, "offset_weights", ow)
        object.__setattr__(self, "attn_weights", aw)

    @property
    def k_points(self) -> int:
        return self.attn_weights.shape[0]

    @property
    def query_channels(self) -> int:
        return self.attn_weights.shape[1]

    @classmethod
    def load(cls, offset_path, attn_path) -> "AttentionParams":
        """Load from raw tensor files shaped [1, rows, cols]."""
        ot = read_raw_tensor(offset_path)
        at = read_raw_tensor(attn_path)
        if ot.channels != 1 or at.channels != 1:
            raise ValueError("attention weight files must be [1, rows, cols]")
        return cls(ot.data[0].astype(np.float64), at.data[0].astype(np.float64))


def bev_pool(dc: DepthContext, m: CameraMatrix, spec: BevSpec) -> Tensor3:
    """Lift-splat pooling of the context feature into the BEV grid.

    Every (pixel, depth bin) pair back-projects the ray through the pixel
    center to the bin's metric depth; if the point lands inside the BEV x/y
    extents its depth mass times the pixel's context vector accumulates into
    the containing cell (heights collapse). Out-of-range mass is dropped.
    """
    h, w = dc.depth.height, dc.depth.width
    a_inv = np.linalg.inv(m.matrix[:, :3])
    t = m.matrix[:, 3]

    us = np.arange(w, dtype=np.float64) + 0.5
    vs = np.arange(h, dtype=np.float64) + 0.5
    uv1 = np.stack(
        [
            np.broadcast_to(us[None, :], (h, w)),
            np.broadcast_to(vs[:, None], (h, w)),
            np.ones((h, w)),
        ],
        axis=0,
    )  # (3, h, w)
    d = dc.bin_centers
    rhs = d[:, None, None, None] * uv1[None] - t[None, :, None, None]  # (D, 3, h, w)
    pts = np.einsum("ij,bjhw->bihw", a_inv, rhs)

    fx = (pts[:, 0] - spec.x_range[0]) / spec.voxel
    fy = (pts[:, 1] - spec.y_range[0]) / spec.voxel
    nx, ny = spec.nx, spec.ny
    in_range = (fx >= 0) & (fx < nx) & (fy >= 0) & (fy < ny)

    # Cast only in-range coordinates (out-of-range ones may overflow int64).
    ix = np.floor(fx[in_range]).astype(np.int64)
    iy = np.floor(fy[in_range]).astype(np.int64)
    # Contributions flatten in (bin, row, column) order; bincount accumulates
    # sequentially in that order, keeping per-cell sums bit-stable.
    flat_cell = ix * ny + iy
    mass = dc.depth.data.astype(np.float64, copy=False)

    out = np.zeros((dc.f_ctx.channels, nx, ny), dtype=np.float64)
    ctx = dc.f_ctx.data.astype(np.float64, copy=False)
    for c in range(dc.f_ctx.channels):
        contrib = (mass * ctx[c][None])[in_range]
        out[c] = np.bincount(flat_cell, weights=contrib, minlength=nx * ny).reshape(
            nx, ny
        )
    return Tensor3(out)


def residual_query(
    q: Tensor3,
    f_ctx: Tensor3,
    m: CameraMatrix,
    spec: BevSpec,
    n_z: int,
    params: AttentionParams,
) -> Tensor3:
    """Deformable cross-attention correction for every BEV cell.

    Each cell center is lifted to n_z heights and projected into the image;
    in-view references gather K bilinear samples of the context feature at
    query-predicted offsets, combined with softmax attention and summed over
    heights. Invalid or out-of-view references contribute zero.
    """
    nx, ny = spec.nx, spec.ny
    if (q.height, q.width) != (nx, ny):
        raise ValueError(f"query grid {q.shape} does not match BEV {nx}x{ny}")
    if params.query_channels != q.channels:
        raise ValueError(
            f"attention expects {params.query_channels} query channels, got {q.channels}"
        )
    k_points = params.k_points
    heights = sample_heights(spec, n_z)

    xs = spec.x_centers()
    ys = spec.y_centers()
    gx, gy, gz = np.meshgrid(xs, ys, heights, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(nx * ny, n_z, 3)
    u, v, _, valid = project_points(m, pts)
    iu = np.floor(u)
    iv = np.floor(v)
    in_view = (
        valid
        & (iu >= 0)
        & (iu <= f_ctx.width - 1)
        & (iv >= 0)
        & (iv <= f_ctx.height - 1)
    )

    q_flat = q.data.reshape(q.channels, nx * ny).astype(np.float64, copy=False)
    off = params.offset_weights @ q_flat  # (2K, cells)
    logits = params.attn_weights @ q_flat  # (K, cells)
    attn = _softmax(logits, axis=0)

    du = off[0::2]  # (K, cells)
    dv = off[1::2]
    us = u[:, :, None] + du.T[:, None, :]  # (cells, n_z, K)
    vs = v[:, :, None] + dv.T[:, None, :]
    sampled = bilinear_sample_many(f_ctx, us, vs)  # (C, cells, n_z, K)

    gate = in_view.astype(np.float64)
    out = np.einsum("cxjk,kx,xj->cx", sampled, attn, gate)
    return Tensor3(out.reshape(f_ctx.channels, nx, ny))


def refine_bev(q: Tensor3, q_res: Tensor3, s: np.ndarray) -> Tensor3:
    """Add the residual query scaled by the illumination field: Q + Q' * S.

    Cells where S is zero keep the original query bit for bit.
    """
    if q_res.shape != q.shape:
        raise ValueError(f"residual shape {q_res.shape} does not match {q.shape}")
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (q.height, q.width):
        raise ValueError(
            f"field shape {s.shape} does not match grid {(q.height, q.width)}"
        )
    refined = q.data + q_res.data * s[None]
    return Tensor3(np.where(s[None] != 0.0, refined, q.data))
