"""Discrete differential geometry on grid-sampled metric fields.

Fields live on a regular grid with a boolean mask selecting the nodes of a
truncated ball.  All per-node tensors are stored as dense arrays of shape
``extents + component_shape``; entries at masked-out nodes are kept finite
(zero) but carry no meaning.  Derivatives are second-order central at nodes
whose axis neighbours are both inside the mask and first-order one-sided
where one neighbour is missing.

Index conventions follow the classical coordinate formulas:

* Christoffel  ``G^k_ij = 1/2 g^kl (d_i g_jl + d_j g_il - d_l g_ij)``
* Riemann      ``R^l_ijk = d_i G^l_jk - d_j G^l_ik + G^p_jk G^l_ip - G^p_ik G^l_jp``
* Ricci        ``R_ij = R^p_pij``,  scalar ``R = g^ij R_ij``

Norms of (0,2)- and (0,3)-tensors raise indices with a caller-supplied
reference metric; volume integrals use ``sqrt(det(ref)) * h^n``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import BallConfig, NotPositiveDefinite

__all__ = [
    "GridSpec",
    "MetricField",
    "ChristoffelField",
    "CurvatureFields",
    "ball_grid",
    "partials",
    "christoffel",
    "riemann",
    "lower_riemann",
    "ricci",
    "scalar_curvature",
    "covariant_derivative",
    "deturck_vector",
    "lie_term",
    "tensor_norm_sq",
    "l2_distance_sq",
    "write_metric_field",
    "read_metric_field",
]

_SYM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Regular grid with a node mask selecting the computational domain.

    mask marks nodes inside the domain; boundary marks masked-in nodes with
    at least one axis neighbour that is either outside the grid or masked
    out.  interior = mask & ~boundary.
    """

    dim: int
    spacing: float
    extents: tuple[int, ...]
    origin_offset: np.ndarray
    mask: np.ndarray
    boundary: np.ndarray = field(init=False)
    interior: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if len(self.extents) != self.dim:
            raise ValueError("extents must have one entry per axis")
        if any(e < 3 for e in self.extents):
            raise ValueError("degenerate grid: need at least 3 nodes per axis")
        if self.mask.shape != self.extents:
            raise ValueError("mask shape does not match extents")
        boundary = np.zeros_like(self.mask)
        wf, wb = [], []
        h = self.spacing
        for axis in range(self.dim):
            has_fwd = self._neighbor_in(axis, +1)
            has_bwd = self._neighbor_in(axis, -1)
            boundary |= self.mask & ~(has_fwd & has_bwd)
            both = has_fwd & has_bwd
            # d = wf*(v_fwd - v) + wb*(v - v_bwd) realises central where both
            # neighbours exist and first-order one-sided where one is missing
            wf.append(
                np.where(both, 0.5 / h, np.where(has_fwd, 1.0 / h, 0.0))
            )
            wb.append(
                np.where(both, 0.5 / h, np.where(has_bwd, 1.0 / h, 0.0))
            )
        object.__setattr__(self, "boundary", boundary)
        object.__setattr__(self, "interior", self.mask & ~boundary)
        object.__setattr__(self, "_fd_wf", wf)
        object.__setattr__(self, "_fd_wb", wb)

    def _neighbor_in(self, axis: int, step: int) -> np.ndarray:
        """Boolean grid: node has a masked-in neighbour at index +step along axis."""
        ok = np.zeros(self.extents, dtype=bool)
        src = [slice(None)] * self.dim
        dst = [slice(None)] * self.dim
        if step > 0:
            dst[axis] = slice(None, -1)
            src[axis] = slice(1, None)
        else:
            dst[axis] = slice(1, None)
            src[axis] = slice(None, -1)
        ok[tuple(dst)] = self.mask[tuple(src)]
        return ok

    def coordinates(self) -> np.ndarray:
        """Node coordinates, shape extents + (dim,)."""
        axes = [
            self.origin_offset[a] + self.spacing * np.arange(self.extents[a])
            for a in range(self.dim)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    @property
    def node_count(self) -> int:
        return int(self.mask.sum())


def same_grid(a: GridSpec, b: GridSpec) -> bool:
    return a is b or (
        a.dim == b.dim
        and a.extents == b.extents
        and a.spacing == b.spacing
        and np.array_equal(a.origin_offset, b.origin_offset)
        and np.array_equal(a.mask, b.mask)
    )


def ball_grid(
    cfg: BallConfig, nodes_per_axis: int, truncation: float = 0.9
) -> GridSpec:
    """Grid over the cube [-a, a]^n, a = truncation/sqrt(r), masking the ball ||x|| <= a.

    For r = 0 the cube [-truncation, truncation]^n is used with a full mask
    (flat space has no rim to avoid).
    """
    if not 0.0 < truncation < 1.0:
        raise ValueError("truncation must lie in (0, 1)")
    n = cfg.dim
    r = cfg.curvature_param
    a = truncation if r == 0.0 else truncation / np.sqrt(r)
    h = 2.0 * a / (nodes_per_axis - 1)
    offset = np.full(n, -a)
    extents = (nodes_per_axis,) * n
    grid_tmp = GridSpec(n, h, extents, offset, np.ones(extents, dtype=bool))
    coords = grid_tmp.coordinates()
    if r == 0.0:
        mask = np.ones(extents, dtype=bool)
    else:
        mask = np.sum(coords * coords, axis=-1) <= a * a * (1.0 + 1e-12)
    return GridSpec(n, h, extents, offset, mask)


class MetricField:
    """A symmetric positive-definite matrix per masked-in node."""

    def __init__(self, grid: GridSpec, values: np.ndarray, validate: bool = True):
        n = grid.dim
        values = np.asarray(values, dtype=np.float64)
        if values.shape != grid.extents + (n, n):
            raise ValueError(
                f"values must have shape {grid.extents + (n, n)}, got {values.shape}"
            )
        values = values.copy()
        values[~grid.mask] = 0.0
        self.grid = grid
        self.values = values
        if validate:
            self.validate()

    def validate(self):
        vals = self.values[self.grid.mask]
        asym = np.max(np.abs(vals - np.swapaxes(vals, -1, -2)))
        if asym > _SYM_TOL:
            raise ValueError(f"metric not symmetric: max asymmetry {asym:.3e}")
        try:
            np.linalg.cholesky(vals)
        except np.linalg.LinAlgError as exc:
            bad = _first_non_spd(vals)
            idx = np.argwhere(self.grid.mask)[bad]
            raise NotPositiveDefinite(
                f"metric not SPD at node {tuple(idx)}"
            ) from exc

    def inverse_values(self) -> np.ndarray:
        """Per-node inverse metric; identity placed at masked-out nodes."""
        filled = self.values.copy()
        filled[~self.grid.mask] = np.eye(self.grid.dim)
        return np.linalg.inv(filled)

    def copy(self) -> "MetricField":
        return MetricField(self.grid, self.values, validate=False)


def _first_non_spd(stack: np.ndarray) -> int:
    for i, m in enumerate(stack):
        try:
            np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            return i
    return -1


@dataclass(frozen=True)
class ChristoffelField:
    """Connection coefficients G^k_ij per node, symmetric in (i, j).

    values has shape extents + (n, n, n) indexed [k, i, j].
    """

    grid: GridSpec
    values: np.ndarray


@dataclass(frozen=True)
class CurvatureFields:
    """Riemann R^l_ijk, Ricci R_ij and scalar curvature per node."""

    grid: GridSpec
    riemann: np.ndarray
    ricci: np.ndarray
    scalar: np.ndarray


def partials(grid: GridSpec, values: np.ndarray) -> np.ndarray:
    """Per-node derivatives of an arbitrary component field.

    values: extents + comp_shape.  Returns extents + (dim,) + comp_shape with
    the derivative axis first after the grid axes.  Central differences where
    both axis neighbours are masked in, one-sided where only one is, zero
    where the node is isolated along that axis.
    """
    n = grid.dim
    comp = values.shape[n:]
    out = np.empty(grid.extents + (n,) + comp, dtype=np.float64)
    flat_comp = (1,) * len(comp)
    for axis in range(n):
        wf = grid._fd_wf[axis].reshape(grid.extents + flat_comp)
        wb = grid._fd_wb[axis].reshape(grid.extents + flat_comp)
        vf = _shift(values, axis, +1, n)
        vb = _shift(values, axis, -1, n)
        d = wf * (vf - values) + wb * (values - vb)
        out[(Ellipsis, axis) + (slice(None),) * len(comp)] = d
    return out


def _shift(values: np.ndarray, axis: int, step: int, ndim_grid: int) -> np.ndarray:
    """Array of neighbour values at index +step along axis (zeros past the edge)."""
    out = np.zeros_like(values)
    src = [slice(None)] * ndim_grid
    dst = [slice(None)] * ndim_grid
    if step > 0:
        dst[axis] = slice(None, -1)
        src[axis] = slice(1, None)
    else:
        dst[axis] = slice(1, None)
        src[axis] = slice(None, -1)
    out[tuple(dst)] = values[tuple(src)]
    return out


def christoffel(
    fld: MetricField, ginv: np.ndarray | None = None
) -> ChristoffelField:
    """G^k_ij = 1/2 g^kl (d_i g_jl + d_j g_il - d_l g_ij)."""
    n = fld.grid.dim
    ext = fld.grid.extents
    dg = partials(fld.grid, fld.values)  # [..., p, i, j]
    if ginv is None:
        ginv = fld.inverse_values()
    # bracket[..., l, i, j] = d_i g_jl + d_j g_il - d_l g_ij
    bracket = (
        np.transpose(dg, axes=tuple(range(n)) + (n + 2, n, n + 1))
        + np.transpose(dg, axes=tuple(range(n)) + (n + 2, n + 1, n))
        - dg
    )
    gamma = 0.5 * (ginv @ bracket.reshape(ext + (n, n * n))).reshape(
        ext + (n, n, n)
    )
    gamma[~fld.grid.mask] = 0.0
    return ChristoffelField(fld.grid, gamma)


def riemann(fld: MetricField, gamma: ChristoffelField) -> np.ndarray:
    """R^l_ijk = d_i G^l_jk - d_j G^l_ik + G^p_jk G^l_ip - G^p_ik G^l_jp.

    Returns extents + (n, n, n, n) indexed [l, i, j, k]; antisymmetric in
    (i, j) by construction.
    """
    n = fld.grid.dim
    ext = fld.grid.extents
    gam = gamma.values
    dgam = partials(fld.grid, gam)  # [..., p, l, i, j]
    grid_axes = tuple(range(n))
    # G^l_ip G^p_jk as a (li) x (jk) matrix product over p
    gg1 = (gam.reshape(ext + (n * n, n)) @ gam.reshape(ext + (n, n * n))).reshape(
        ext + (n, n, n, n)
    )
    # G^l_jp G^p_ik -> [l, j, i, k], swap to [l, i, j, k]
    gg2 = gg1.swapaxes(-3, -2)
    riem = (
        np.transpose(dgam, axes=grid_axes + (n + 1, n, n + 2, n + 3))
        - np.transpose(dgam, axes=grid_axes + (n + 1, n + 2, n, n + 3))
        + gg1
        - gg2
    )
    riem[~fld.grid.mask] = 0.0
    return riem


def lower_riemann(fld: MetricField, riem: np.ndarray) -> np.ndarray:
    """Fully covariant curvature R_ijkl = g_km R^m_ijl.

    The contracted slot is placed so that a metric of constant sectional
    curvature -r satisfies R_ijkl = -r (g_ik g_jl - g_il g_jk).
    """
    return np.einsum("...km,...mijl->...ijkl", fld.values, riem)


def ricci(riem: np.ndarray) -> np.ndarray:
    """Ricci tensor R_ij = R^p_pij."""
    return np.einsum("...ppij->...ij", riem)


def scalar_curvature(fld: MetricField, ric: np.ndarray) -> np.ndarray:
    """Scalar curvature R = g^ij R_ij per node."""
    scal = np.einsum("...ij,...ij->...", fld.inverse_values(), ric)
    scal[~fld.grid.mask] = 0.0
    return scal


def covariant_derivative(
    grid: GridSpec, gamma: ChristoffelField, tensor: np.ndarray
) -> np.ndarray:
    """Covariant derivative of a (0,2)-field: D_p h_ij = d_p h_ij - G^q_pi h_qj - G^q_pj h_iq.

    Returns extents + (n, n, n) indexed [p, i, j].
    """
    dh = partials(grid, tensor)
    corr_i = np.einsum("...qpi,...qj->...pij", gamma.values, tensor)
    corr_j = np.einsum("...qpj,...iq->...pij", gamma.values, tensor)
    return dh - corr_i - corr_j


def covariant_derivative_covector(
    grid: GridSpec, gamma: ChristoffelField, w: np.ndarray
) -> np.ndarray:
    """Covariant derivative of a (0,1)-field: D_i w_j = d_i w_j - G^q_ij w_q."""
    dw = partials(grid, w)
    corr = np.einsum("...qij,...q->...ij", gamma.values, w)
    return dw - corr


def deturck_vector(
    gbar: MetricField,
    ref: MetricField,
    gamma_bar: ChristoffelField | None = None,
    gamma_ref: ChristoffelField | None = None,
    ginv: np.ndarray | None = None,
) -> np.ndarray:
    """Gauge-fixing covector W_i = gbar^pq gbar_ij (G[gbar]^j_pq - G[ref]^j_pq).

    Built from the Christoffel difference between the evolving metric and the
    reference; identically zero when the two metrics coincide.
    """
    if not same_grid(gbar.grid, ref.grid):
        raise ValueError("metric fields live on different grids")
    if gamma_bar is None:
        gamma_bar = christoffel(gbar)
    if gamma_ref is None:
        gamma_ref = christoffel(ref)
    diff = gamma_bar.values - gamma_ref.values  # [..., j, p, q]
    if ginv is None:
        ginv = gbar.inverse_values()
    w_up = np.einsum("...pq,...jpq->...j", ginv, diff)
    w = np.einsum("...ij,...j->...i", gbar.values, w_up)
    w[~gbar.grid.mask] = 0.0
    return w


def lie_term(
    fld: MetricField, gamma: ChristoffelField, w: np.ndarray
) -> np.ndarray:
    """Symmetrized covariant derivative D_i w_j + D_j w_i of a covector field."""
    dw = covariant_derivative_covector(fld.grid, gamma, w)
    out = dw + np.swapaxes(dw, -1, -2)
    out[~fld.grid.mask] = 0.0
    return out


def tensor_norm_sq(h: np.ndarray, ref: MetricField) -> np.ndarray:
    """Pointwise |h|^2 = ref^ip ref^jq h_ij h_pq for a (0,2)-field h."""
    rinv = ref.inverse_values()
    hr = np.einsum("...ip,...jq,...pq->...ij", rinv, rinv, h)
    out = np.einsum("...ij,...ij->...", hr, h)
    out[~ref.grid.mask] = 0.0
    return out


def grad_norm_sq(dh: np.ndarray, ref: MetricField) -> np.ndarray:
    """Pointwise |Dh|^2 for a (0,3)-field indexed [p, i, j], all indices raised by ref."""
    rinv = ref.inverse_values()
    raised = np.einsum("...pa,...ib,...jc,...abc->...pij", rinv, rinv, rinv, dh)
    out = np.einsum("...pij,...pij->...", raised, dh)
    out[~ref.grid.mask] = 0.0
    return out


def volume_weights(ref: MetricField) -> np.ndarray:
    """Per-node volume element sqrt(det(ref)) * h^n (zero off the mask)."""
    det = np.linalg.det(ref.values)
    det = np.where(ref.grid.mask, det, 0.0)
    return np.sqrt(np.maximum(det, 0.0)) * ref.grid.spacing**ref.grid.dim


def l2_distance_sq(gbar: MetricField, ref: MetricField) -> float:
    """Integral of |gbar - ref|^2 over masked-in nodes with the ref volume element.

    The sum runs in fixed node order, so results are bit-stable.
    """
    dens = tensor_norm_sq(gbar.values - ref.values, ref) * volume_weights(ref)
    return float(np.sum(dens[ref.grid.mask]))


# ---------------------------------------------------------------------------
# Serialization: header (magic, version, dim, extents, spacing, offset),
# then the mask as bytes and the full row-major float64 node matrices.
# ---------------------------------------------------------------------------

_MAGIC = b"HMF1"


def write_metric_field(fld: MetricField, path) -> None:
    grid = fld.grid
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", 1, grid.dim))
    buf.write(struct.pack(f"<{grid.dim}I", *grid.extents))
    buf.write(struct.pack("<d", grid.spacing))
    buf.write(struct.pack(f"<{grid.dim}d", *np.asarray(grid.origin_offset)))
    buf.write(np.packbits(grid.mask.ravel()).tobytes())
    buf.write(fld.values.astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_metric_field(path) -> MetricField:
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)
    magic = buf.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    version, dim = struct.unpack("<II", buf.read(8))
    if version != 1:
        raise ValueError(f"unsupported metric-field file version {version}")
    extents = struct.unpack(f"<{dim}I", buf.read(4 * dim))
    (spacing,) = struct.unpack("<d", buf.read(8))
    offset = np.array(struct.unpack(f"<{dim}d", buf.read(8 * dim)))
    n_nodes = int(np.prod(extents))
    mask_bytes = (n_nodes + 7) // 8
    mask = np.unpackbits(
        np.frombuffer(buf.read(mask_bytes), dtype=np.uint8), count=n_nodes
    ).astype(bool).reshape(extents)
    values = np.frombuffer(buf.read(), dtype="<f8").reshape(extents + (dim, dim))
    grid = GridSpec(dim, spacing, extents, offset, mask)
    return MetricField(grid, values.copy())
