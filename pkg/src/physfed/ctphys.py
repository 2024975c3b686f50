"""Fan-beam CT simulation: geometry, Siddon projector, dose noise and FBP.

Conventions. The source sits at ``dsr * (cos b, sin b)`` for view angle ``b``
and the flat detector is centred at ``-ddr * (cos b, sin b)`` with its bin
axis along ``(-sin b, cos b)``. Image row 0 is the top of the image
(largest y); column 0 is the left edge (smallest x). The grid is centred on
the rotation axis.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .protocol import Protocol

RAW_MAGIC = b"PFS1"
_RAW_HEADER = struct.Struct("<4sII4x")

# rays per chunk when building the projection matrix (memory bound)
_CHUNK_ELEMS = 4_000_000


class CTError(ValueError):
    pass


class InsufficientCoverage(CTError):
    pass


class GeometryMismatch(CTError):
    pass


@dataclass(frozen=True)
class FanBeamGeometry:
    nv: int
    ndb: int
    dbl: float
    dsr: float
    ddr: float
    image_size: int
    pixel_len: float

    def __post_init__(self):
        if self.image_size < 8:
            raise CTError("image_size must be >= 8")
        if self.dsr <= self.fov_radius:
            raise InsufficientCoverage("source lies inside the reconstruction circle")
        if self.max_ray_distance < self.fov_radius:
            raise InsufficientCoverage(
                f"fan reaches {self.max_ray_distance:.2f} mm from the axis but the "
                f"image circle has radius {self.fov_radius:.2f} mm")

    @property
    def view_angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.nv) / self.nv

    @property
    def detector_offsets(self) -> np.ndarray:
        return (np.arange(self.ndb) - (self.ndb - 1) / 2.0) * self.dbl

    @property
    def magnification(self) -> float:
        return (self.dsr + self.ddr) / self.dsr

    @property
    def fov_radius(self) -> float:
        """Radius of the circle through the image corners (mm)."""
        return self.image_size * self.pixel_len / np.sqrt(2.0)

    @property
    def max_ray_distance(self) -> float:
        """Distance from the rotation axis to the outermost bin-centre ray."""
        s = (self.ndb - 1) / 2.0 * self.dbl
        return self.dsr * s / np.hypot(self.dsr + self.ddr, s)

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.nv, self.ndb)

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.image_size, self.image_size)


@dataclass
class ImageGrid:
    data: np.ndarray
    pixel_len: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] != self.data.shape[1]:
            raise CTError(f"image must be square 2-D, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise CTError("image contains non-finite values")

    @property
    def size(self) -> int:
        return self.data.shape[0]


@dataclass
class Sinogram:
    data: np.ndarray
    geometry: FanBeamGeometry = field(repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != self.geometry.sino_shape:
            raise GeometryMismatch(
                f"sinogram shape {self.data.shape} != {self.geometry.sino_shape}")
        if not np.all(np.isfinite(self.data)):
            raise CTError("sinogram contains non-finite values")


@dataclass(frozen=True)
class NoiseConfig:
    photon_count: float
    electronic_variance: float = 10.0
    count_floor: float = 1.0

    def __post_init__(self):
        if not self.photon_count > 0:
            raise CTError("photon_count must be > 0")
        if self.electronic_variance < 0:
            raise CTError("electronic_variance must be >= 0")
        if not self.count_floor > 0:
            raise CTError("count_floor must be > 0")

    @classmethod
    def from_protocol(cls, p: Protocol, **kw) -> "NoiseConfig":
        return cls(photon_count=p.pn, **kw)


def derive_geometry(p: Protocol, image_size: int) -> FanBeamGeometry:
    return FanBeamGeometry(nv=p.nv, ndb=p.ndb, dbl=p.dbl, dsr=p.dsr, ddr=p.ddr,
                           image_size=int(image_size), pixel_len=p.pl)


# --------------------------------------------------------------------------
# forward projection
# --------------------------------------------------------------------------

def _ray_endpoints(geo: FanBeamGeometry):
    beta = geo.view_angles
    cb, sb = np.cos(beta), np.sin(beta)
    src = np.stack([geo.dsr * cb, geo.dsr * sb], axis=-1)            # (nv, 2)
    s = geo.detector_offsets
    det_x = -geo.ddr * cb[:, None] - s[None, :] * sb[:, None]         # (nv, ndb)
    det_y = -geo.ddr * sb[:, None] + s[None, :] * cb[:, None]
    sx = np.broadcast_to(src[:, None, 0], det_x.shape)
    sy = np.broadcast_to(src[:, None, 1], det_x.shape)
    return sx.ravel(), sy.ravel(), det_x.ravel(), det_y.ravel()


def _siddon_rows(sx, sy, dx, dy, n, pl):
    """Exact intersection lengths of rays S->D with an n x n pixel grid.

    Returns (ray_index, pixel_index, length) triplets for one chunk.
    """
    half = n * pl / 2.0
    planes = -half + pl * np.arange(n + 1)
    vx, vy = dx - sx, dy - sy
    with np.errstate(divide="ignore", invalid="ignore"):
        ax = (planes[None, :] - sx[:, None]) / vx[:, None]
        ay = (planes[None, :] - sy[:, None]) / vy[:, None]
    ax[~np.isfinite(ax)] = 0.0
    ay[~np.isfinite(ay)] = 0.0
    ends = np.zeros((len(sx), 2))
    ends[:, 1] = 1.0
    alpha = np.clip(np.concatenate([ends, ax, ay], axis=1), 0.0, 1.0)
    alpha.sort(axis=1)
    seg = np.diff(alpha, axis=1) * np.hypot(vx, vy)[:, None]
    mid = 0.5 * (alpha[:, 1:] + alpha[:, :-1])
    px = sx[:, None] + mid * vx[:, None]
    py = sy[:, None] + mid * vy[:, None]
    col = np.floor((px + half) / pl).astype(np.int64)
    row = np.floor((half - py) / pl).astype(np.int64)
    ok = (seg > 0) & (col >= 0) & (col < n) & (row >= 0) & (row < n)
    ray = np.broadcast_to(np.arange(len(sx))[:, None], seg.shape)
    return ray[ok], (row * n + col)[ok], seg[ok]


@functools.lru_cache(maxsize=6)
def system_matrix(geo: FanBeamGeometry) -> sp.csr_matrix:
    """Sparse (nv*ndb) x (n*n) matrix of Siddon intersection lengths."""
    n, pl = geo.image_size, geo.pixel_len
    sx, sy, dx, dy = _ray_endpoints(geo)
    # rays whose distance to the axis exceeds the corner radius miss the grid
    cross = np.abs(sx * dy - sy * dx) / np.hypot(dx - sx, dy - sy)
    hit = np.flatnonzero(cross <= geo.fov_radius * (1 + 1e-9))
    per_chunk = max(1, _CHUNK_ELEMS // (2 * n + 4))
    rows, cols, vals = [], [], []
    for start in range(0, len(hit), per_chunk):
        idx = hit[start:start + per_chunk]
        r, c, v = _siddon_rows(sx[idx], sy[idx], dx[idx], dy[idx], n, pl)
        rows.append(idx[r])
        cols.append(c)
        vals.append(v)
    mat = sp.csr_matrix(
        (np.concatenate(vals) if vals else np.zeros(0),
         (np.concatenate(rows) if rows else np.zeros(0, int),
          np.concatenate(cols) if cols else np.zeros(0, int))),
        shape=(geo.nv * geo.ndb, n * n))
    mat.sum_duplicates()
    return mat


def _check_image(img: ImageGrid, geo: FanBeamGeometry):
    if img.size != geo.image_size or not np.isclose(img.pixel_len, geo.pixel_len):
        raise GeometryMismatch(
            f"image {img.size}px @ {img.pixel_len} mm does not match geometry "
            f"{geo.image_size}px @ {geo.pixel_len} mm")


def forward_project(img: ImageGrid, geo: FanBeamGeometry) -> Sinogram:
    _check_image(img, geo)
    line = system_matrix(geo) @ img.data.ravel()
    return Sinogram(line.reshape(geo.sino_shape), geo)


# --------------------------------------------------------------------------
# noise
# --------------------------------------------------------------------------

def _view_rng(seed: int, view: int) -> np.random.Generator:
    # independent counter-based stream per (seed, view): results do not depend
    # on the order in which views are processed
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, view])))


def simulate_low_dose(clean: Sinogram, cfg: NoiseConfig, rng_seed: int) -> Sinogram:
    if np.any(clean.data < 0):
        raise CTError("clean sinogram must be non-negative")
    out = np.empty_like(clean.data)
    sigma = np.sqrt(cfg.electronic_variance)
    for v, row in enumerate(clean.data):
        rng = _view_rng(rng_seed, v)
        counts = rng.poisson(cfg.photon_count * np.exp(-row)).astype(np.float64)
        counts += rng.normal(0.0, sigma, size=row.shape) if sigma > 0 else 0.0
        out[v] = np.log(cfg.photon_count / np.maximum(counts, cfg.count_floor))
    return Sinogram(out, clean.geometry)


# --------------------------------------------------------------------------
# filtered backprojection
# --------------------------------------------------------------------------

def ramlak_kernel(n_taps: int, spacing: float) -> np.ndarray:
    """Discrete Ram-Lak kernel h[k] for k = -(n_taps-1) .. n_taps-1."""
    k = np.arange(-(n_taps - 1), n_taps)
    h = np.zeros(k.shape, dtype=np.float64)
    h[k == 0] = 1.0 / (4.0 * spacing ** 2)
    odd = (k % 2) != 0
    h[odd] = -1.0 / (np.pi * k[odd] * spacing) ** 2
    return h


@functools.lru_cache(maxsize=6)
def _filter_matrix(ndb: int, spacing: float) -> np.ndarray:
    h = ramlak_kernel(ndb, spacing)
    i = np.arange(ndb)
    # Toeplitz form of the linear (zero-extended) convolution
    return h[(i[:, None] - i[None, :]) + ndb - 1] * spacing


def fbp_reconstruct(sino: Sinogram, geo: FanBeamGeometry) -> ImageGrid:
    if sino.data.shape != geo.sino_shape:
        raise GeometryMismatch(f"sinogram {sino.data.shape} vs geometry {geo.sino_shape}")
    n, pl = geo.image_size, geo.pixel_len
    scale = geo.dsr / (geo.dsr + geo.ddr)
    s_virt = geo.detector_offsets * scale          # detector moved to the axis
    ds = geo.dbl * scale
    weighted = sino.data * (geo.dsr / np.sqrt(geo.dsr ** 2 + s_virt ** 2))[None, :]
    q = 0.5 * weighted @ _filter_matrix(geo.ndb, ds)

    coords = (np.arange(n) - (n - 1) / 2.0) * pl
    x = np.broadcast_to(coords[None, :], (n, n)).ravel()
    y = np.broadcast_to(-coords[:, None], (n, n)).ravel()
    image = np.zeros(n * n)
    beta = geo.view_angles
    step = max(1, 2_000_000 // (n * n))
    for v0 in range(0, geo.nv, step):
        b = beta[v0:v0 + step]
        cb, sb = np.cos(b)[:, None], np.sin(b)[:, None]
        depth = geo.dsr - (x[None, :] * cb + y[None, :] * sb)
        u = depth / geo.dsr
        s = geo.dsr * (-x[None, :] * sb + y[None, :] * cb) / depth
        pos = s / ds + (geo.ndb - 1) / 2.0
        i0 = np.floor(pos).astype(np.int64)
        w = pos - i0
        qv = q[v0:v0 + step]
        rows = np.arange(qv.shape[0])[:, None]
        lo_ok = (i0 >= 0) & (i0 < geo.ndb)
        hi_ok = (i0 + 1 >= 0) & (i0 + 1 < geo.ndb)
        val = np.where(lo_ok, qv[rows, np.clip(i0, 0, geo.ndb - 1)], 0.0) * (1 - w)
        val += np.where(hi_ok, qv[rows, np.clip(i0 + 1, 0, geo.ndb - 1)], 0.0) * w
        image += (val / u ** 2).sum(axis=0)
    image *= 2.0 * np.pi / geo.nv
    return ImageGrid(np.maximum(image.reshape(n, n), 0.0), pl)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def to_raw_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.ndim != 2:
        raise CTError("raw format stores 2-D arrays only")
    rows, cols = array.shape
    return _RAW_HEADER.pack(RAW_MAGIC, rows, cols) + array.astype("<f4").tobytes()


def from_raw_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < _RAW_HEADER.size:
        raise CTError("raw blob shorter than header")
    magic, rows, cols = _RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise CTError(f"bad magic {magic!r}")
    body = blob[_RAW_HEADER.size:]
    if len(body) != rows * cols * 4:
        raise CTError(f"expected {rows * cols * 4} payload bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)


def save_raw(path, array: np.ndarray) -> None:
    Path(path).write_bytes(to_raw_bytes(array))


def load_raw(path) -> np.ndarray:
    return from_raw_bytes(Path(path).read_bytes())


def save_pgm(path, array: np.ndarray, window: tuple[float, float] = (0.0, 1.0)) -> None:
    """8-bit binary PGM; values are mapped linearly from ``window`` to 0..255."""
    lo, hi = window
    if not hi > lo:
        raise CTError("window upper bound must exceed lower bound")
    array = np.asarray(array, dtype=np.float64)
    scaled = np.clip((array - lo) / (hi - lo), 0.0, 1.0)
    pixels = np.round(scaled * 255).astype(np.uint8)
    rows, cols = pixels.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode() + pixels.tobytes())
