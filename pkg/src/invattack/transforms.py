"""Label-preserving image transforms and alignment search.

A transform is scale -> shear -> rotate -> translate about the image center,
realized by inverse-mapped bilinear sampling with zero background. Alignment
enumerates a parameter grid and returns the transform of a donor image that
lands closest to a source image; enumeration order (rotation outermost, scale
innermost, donors in dataset order) breaks all ties, so results are
bit-reproducible regardless of internal vectorization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset_io import GrayImage
from .errors import EmptyGrid, InvalidParams, ShapeMismatch

ROTATION_BOUND = 20.0
SHIFT_BOUND = 6.0
SHEAR_BOUND = 0.20
SCALE_BOUNDS = (0.5, 1.5)

L0_SOFT = "l0_soft"
LINF = "linf"
L2 = "l2"
NORMS = (L0_SOFT, LINF, L2)


@dataclass(frozen=True)
class TransformParams:
    rotation_deg: float = 0.0
    shift_x: float = 0.0
    shift_y: float = 0.0
    shear_frac: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if abs(self.rotation_deg) > ROTATION_BOUND:
            raise InvalidParams(f"|rotation| must be <= {ROTATION_BOUND} deg")
        if abs(self.shift_x) > SHIFT_BOUND or abs(self.shift_y) > SHIFT_BOUND:
            raise InvalidParams(f"|shift| must be <= {SHIFT_BOUND} px")
        if abs(self.shear_frac) > SHEAR_BOUND:
            raise InvalidParams(f"|shear| must be <= {SHEAR_BOUND}")
        if not SCALE_BOUNDS[0] <= self.scale <= SCALE_BOUNDS[1]:
            raise InvalidParams(f"scale must be in {SCALE_BOUNDS}")

    @classmethod
    def identity(cls) -> "TransformParams":
        return cls()


def _axis_values(rng: tuple[float, float, float], name: str) -> list[float]:
    start, stop, step = (float(v) for v in rng)
    if step <= 0.0:
        raise EmptyGrid(f"{name}: step must be > 0")
    if stop < start:
        raise EmptyGrid(f"{name}: empty range [{start}, {stop}]")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 12) for i in range(n)]


@dataclass(frozen=True)
class TransformGrid:
    """Inclusive (start, stop, step) ranges per parameter."""
    rotation: tuple[float, float, float] = (0.0, 0.0, 1.0)
    shift_x: tuple[float, float, float] = (0.0, 0.0, 1.0)
    shift_y: tuple[float, float, float] = (0.0, 0.0, 1.0)
    shear: tuple[float, float, float] = (0.0, 0.0, 1.0)
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def axes(self) -> tuple[list[float], ...]:
        return (_axis_values(self.rotation, "rotation"),
                _axis_values(self.shift_x, "shift_x"),
                _axis_values(self.shift_y, "shift_y"),
                _axis_values(self.shear, "shear"),
                _axis_values(self.scale, "scale"))


def default_grid() -> TransformGrid:
    """The reference search grid (11025 points on 28x28 inputs)."""
    return TransformGrid(rotation=(-20.0, 20.0, 5.0),
                         shift_x=(-6.0, 6.0, 2.0),
                         shift_y=(-6.0, 6.0, 2.0),
                         shear=(-0.2, 0.2, 0.1),
                         scale=(0.5, 1.5, 0.25))


def identity_grid() -> TransformGrid:
    return TransformGrid()


def enumerate_grid(grid: TransformGrid) -> list[TransformParams]:
    """Cartesian product, rotation outermost then shift_x, shift_y, shear,
    scale innermost. Raises EmptyGrid on degenerate ranges or steps."""
    rot, sx, sy, sh, sc = grid.axes()
    out = []
    for r in rot:
        for x in sx:
            for y in sy:
                for s in sh:
                    for c in sc:
                        out.append(TransformParams(r, x, y, s, c))
    return out


# --- inverse-mapped bilinear sampling ---

def _inverse_map(params: TransformParams, rows: np.ndarray, cols: np.ndarray,
                 cx: float, cy: float) -> tuple[np.ndarray, np.ndarray]:
    """Map output pixel coords to source coords (float64)."""
    theta = math.radians(params.rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    u = (cols - cx) - params.shift_x
    v = (rows - cy) - params.shift_y
    x = u * cos_t + v * sin_t
    y = -u * sin_t + v * cos_t
    x = x - params.shear_frac * y
    x = x / params.scale
    y = y / params.scale
    return y + cy, x + cx


def _corner_data(src_r: np.ndarray, src_c: np.ndarray, height: int, width: int):
    """Bilinear corner flat indices, weights (float32), and validity masks."""
    i0 = np.floor(src_r).astype(np.int64)
    j0 = np.floor(src_c).astype(np.int64)
    fr = src_r - i0
    fc = src_c - j0
    w00 = ((1.0 - fr) * (1.0 - fc)).astype(np.float32)
    w01 = ((1.0 - fr) * fc).astype(np.float32)
    w10 = (fr * (1.0 - fc)).astype(np.float32)
    w11 = (fr * fc).astype(np.float32)
    corners = []
    for di, dj, w in ((0, 0, w00), (0, 1, w01), (1, 0, w10), (1, 1, w11)):
        ii, jj = i0 + di, j0 + dj
        valid = (ii >= 0) & (ii < height) & (jj >= 0) & (jj < width)
        flat = np.where(valid, ii * width + jj, 0)
        corners.append((flat, np.where(valid, w, np.float32(0.0))))
    return corners


def _sample_flat(flat_images: np.ndarray, corners) -> np.ndarray:
    """Sample (m, h*w) images at precomputed corners -> (m, *coords.shape)."""
    (f0, w0), (f1, w1), (f2, w2), (f3, w3) = corners
    out = flat_images[:, f0] * w0
    out += flat_images[:, f1] * w1
    out += flat_images[:, f2] * w2
    out += flat_images[:, f3] * w3
    np.clip(out, 0.0, 1.0, out=out)
    return out


def apply_transform(img: GrayImage, params: TransformParams) -> GrayImage:
    """Transform one image; output has the same shape, background 0."""
    h, w = img.height, img.width
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    src_r, src_c = _inverse_map(params, rows, cols, cx, cy)
    corners = _corner_data(src_r, src_c, h, w)
    out = _sample_flat(img.flat[None, :], corners)[0]
    return GrayImage(out.reshape(h, w))


# --- distances ---

def image_distance(a: np.ndarray, b: np.ndarray, norm: str,
                   soft_threshold: float = 0.5) -> float:
    """Distance between two same-shape [0,1] rasters under an attack norm."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    d = np.abs(a - b)
    if norm == L0_SOFT:
        return float(np.count_nonzero(d > np.float32(soft_threshold)))
    if norm == LINF:
        return float(d.max())
    if norm == L2:
        return float(np.sqrt(np.sum(d.astype(np.float64) ** 2)))
    raise InvalidParams(f"unknown norm {norm!r}")


def _block_distances(block: np.ndarray, src: np.ndarray, norm: str,
                     soft_threshold: float = 0.5) -> np.ndarray:
    """Distances of block[..., p] rows to src (p,) along the last axis."""
    d = np.abs(block - src)
    if norm == L0_SOFT:
        return (d > np.float32(soft_threshold)).sum(axis=-1).astype(np.float64)
    if norm == LINF:
        return d.max(axis=-1).astype(np.float64)
    if norm == L2:
        return np.sqrt((d.astype(np.float64) ** 2).sum(axis=-1))
    raise InvalidParams(f"unknown norm {norm!r}")


# --- grid alignment search ---

def _grid_distance_matrix(src: GrayImage, donors: np.ndarray,
                          grid: TransformGrid, norm: str,
                          soft_threshold: float = 0.5) -> np.ndarray:
    """(m, T) distances of every grid transform of every donor to src.

    Column order equals enumerate_grid order. Uses the padded-canvas fast path
    when all grid shifts are integers, else transforms one chunk at a time.
    """
    rot, sxs, sys_, shs, scs = grid.axes()
    if all(float(v).is_integer() for v in sxs + sys_):
        return _distances_integer_shifts(src, donors, rot, sxs, sys_, shs, scs,
                                         norm, soft_threshold)
    return _distances_generic(src, donors, grid, norm, soft_threshold)


def _distances_integer_shifts(src, donors, rot, sxs, sys_, shs, scs,
                              norm, soft_threshold=0.5):
    h, w = src.height, src.width
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    pad_x = int(max(abs(v) for v in sxs))
    pad_y = int(max(abs(v) for v in sys_))
    he, we = h + 2 * pad_y, w + 2 * pad_x
    rows, cols = np.meshgrid(np.arange(he, dtype=np.float64) - pad_y,
                             np.arange(we, dtype=np.float64) - pad_x,
                             indexing="ij")
    m = donors.shape[0]
    nr, nx, ny, nh, nc = len(rot), len(sxs), len(sys_), len(shs), len(scs)
    dist = np.empty((m, nr, nx, ny, nh, nc), dtype=np.float64)
    src_flat = src.flat
    shapes = [(ri, hi, ci) for ri in range(nr) for hi in range(nh) for ci in range(nc)]
    chunk = max(1, 4_000_000 // (max(m, 1) * he * we))
    for lo in range(0, len(shapes), chunk):
        batch = shapes[lo:lo + chunk]
        fields = np.empty((m, len(batch), he, we), dtype=np.float32)
        for bi, (ri, hi, ci) in enumerate(batch):
            p = TransformParams(rot[ri], 0.0, 0.0, shs[hi], scs[ci])
            src_r, src_c = _inverse_map(p, rows, cols, cx, cy)
            corners = _corner_data(src_r, src_c, h, w)
            fields[:, bi] = _sample_flat(donors, corners).reshape(m, he, we)
        for yi, sy in enumerate(sys_):
            oy = pad_y - int(sy)
            for xi, sx in enumerate(sxs):
                ox = pad_x - int(sx)
                view = fields[:, :, oy:oy + h, ox:ox + w].reshape(m, len(batch), -1)
                vals = _block_distances(view, src_flat, norm, soft_threshold)
                for bi, (ri, hi, ci) in enumerate(batch):
                    dist[:, ri, xi, yi, hi, ci] = vals[:, bi]
    return dist.reshape(m, -1)


def _distances_generic(src, donors, grid, norm, soft_threshold=0.5):
    h, w = src.height, src.width
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    params = enumerate_grid(grid)
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    m = donors.shape[0]
    dist = np.empty((m, len(params)), dtype=np.float64)
    src_flat = src.flat
    chunk = max(1, 4_000_000 // (max(m, 1) * h * w))
    for lo in range(0, len(params), chunk):
        batch = params[lo:lo + chunk]
        block = np.empty((m, len(batch), h * w), dtype=np.float32)
        for bi, p in enumerate(batch):
            src_r, src_c = _inverse_map(p, rows, cols, cx, cy)
            corners = _corner_data(src_r, src_c, h, w)
            block[:, bi] = _sample_flat(donors, corners).reshape(m, -1)
        dist[:, lo:lo + len(batch)] = _block_distances(block, src_flat, norm,
                                                        soft_threshold)
    return dist


def align(src: GrayImage, donor: GrayImage, grid: TransformGrid,
          norm: str = L0_SOFT,
          soft_threshold: float = 0.5) -> tuple[TransformParams, GrayImage, float]:
    """Grid transform of donor minimizing distance to src.

    Ties resolve to the lowest enumeration index. The returned image is the
    canonical apply_transform output for the winning parameters.
    """
    if src.pixels.shape != donor.pixels.shape:
        raise ShapeMismatch("source and donor must share dimensions")
    params = enumerate_grid(grid)
    dist = _grid_distance_matrix(src, donor.flat[None, :], grid, norm,
                                 soft_threshold)[0]
    best = int(np.argmin(dist))
    p = params[best]
    return p, apply_transform(donor, p), float(dist[best])


def align_over_donors(src: GrayImage, donors: np.ndarray, grid: TransformGrid,
                      norm: str = L0_SOFT,
                      soft_threshold: float = 0.5) -> tuple[int, TransformParams, float]:
    """Best (donor_row, params, distance) over donors x grid.

    Ties resolve donor-major (dataset order), then by grid enumeration index.
    donors is an (m, h*w) float32 matrix in [0,1].
    """
    params = enumerate_grid(grid)
    dist = _grid_distance_matrix(src, donors, grid, norm, soft_threshold)
    flat = int(np.argmin(dist))
    row, t_idx = divmod(flat, dist.shape[1])
    return row, params[t_idx], float(dist[row, t_idx])
