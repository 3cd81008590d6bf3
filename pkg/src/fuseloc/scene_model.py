"""Scene-conditioned measurement error model.

A small convolutional network maps a rasterized range scan (binary occupancy
grid, ego-centered) to a 6-vector descriptor ``a`` of a lower-triangular
factor ``L``; the measurement information matrix is ``Q = L L^T``.  The
Cholesky parameterization keeps ``Q`` symmetric positive (semi)definite for
any descriptor with positive diagonal entries, which the network guarantees
by passing the three diagonal outputs through ``exp``.

Forward and reverse passes are written directly in numpy so the reverse-mode
sweep of the full fusion pipeline stays in one dependency-free formulation.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GridSpec",
    "SceneGrid",
    "rasterize",
    "DIAG_INDICES",
    "descriptor_to_lower",
    "descriptor_to_info",
    "info_grad_to_descriptor",
    "NetArchitecture",
    "NetParams",
    "param_slices",
    "init_params",
    "net_forward",
    "net_backward",
    "save_model",
    "load_model",
]


# --------------------------------------------------------------------------
# Occupancy grids


@dataclass(frozen=True, slots=True)
class GridSpec:
    """Geometry of an ego-centered raster: ``width x height`` cells of
    ``cell_size`` meters.  The vehicle sits in the cell containing the origin.
    """

    width: int = 50
    height: int = 50
    cell_size: float = 2.4

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("grid dimensions must be positive")
        if not (math.isfinite(self.cell_size) and self.cell_size > 0.0):
            raise ValueError("cell size must be positive and finite")

    @property
    def half_width_m(self) -> float:
        return 0.5 * self.width * self.cell_size

    @property
    def half_height_m(self) -> float:
        return 0.5 * self.height * self.cell_size


@dataclass(slots=True)
class SceneGrid:
    """Binary occupancy raster; ``values[row, col]`` with row along +y, col along +x."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.uint8)
        if values.shape != (self.spec.height, self.spec.width):
            raise ValueError(
                f"grid values shape {values.shape} does not match spec "
                f"({self.spec.height}, {self.spec.width})"
            )
        if not np.all((values == 0) | (values == 1)):
            raise ValueError("grid values must be 0 or 1")
        self.values = values


def rasterize(points: np.ndarray, spec: GridSpec = GridSpec()) -> SceneGrid:
    """Mark every cell containing at least one scan point.

    Parameters
    ----------
    points : np.ndarray
        Ego-frame points, shape ``(N, 2)`` in meters.  Points outside the
        grid extent are discarded.
    """
    values = np.zeros((spec.height, spec.width), dtype=np.uint8)
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if points.size:
        cols = np.floor((points[:, 0] + spec.half_width_m) / spec.cell_size).astype(int)
        rows = np.floor((points[:, 1] + spec.half_height_m) / spec.cell_size).astype(int)
        keep = (cols >= 0) & (cols < spec.width) & (rows >= 0) & (rows < spec.height)
        values[rows[keep], cols[keep]] = 1
    return SceneGrid(spec, values)


# --------------------------------------------------------------------------
# Cholesky descriptor

# Descriptor layout: (a11, a21, a22, a31, a32, a33); these three are the
# diagonal entries of L and must stay positive.
DIAG_INDICES = (0, 2, 5)


def descriptor_to_lower(desc: np.ndarray) -> np.ndarray:
    """Lower-triangular factor from its row-major packed entries."""
    desc = np.asarray(desc, dtype=float).reshape(6)
    if not np.all(np.isfinite(desc)):
        raise ValueError("descriptor must be finite")
    if desc[0] <= 0.0 or desc[2] <= 0.0 or desc[5] <= 0.0:
        raise ValueError("descriptor diagonal entries must be positive")
    return np.array(
        [
            [desc[0], 0.0, 0.0],
            [desc[1], desc[2], 0.0],
            [desc[3], desc[4], desc[5]],
        ]
    )


def descriptor_to_info(desc: np.ndarray) -> np.ndarray:
    """Information matrix ``L L^T`` of a descriptor; always symmetric PSD."""
    lower = descriptor_to_lower(desc)
    return lower @ lower.T


def info_grad_to_descriptor(desc: np.ndarray, grad_info: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``Q = L L^T`` back to the descriptor entries.

    ``grad_info`` need not be symmetric; the factorization symmetrizes it
    (``dQ = dL L^T + L dL^T`` makes only the symmetric part observable).
    """
    lower = descriptor_to_lower(desc)
    grad_lower = (np.asarray(grad_info, dtype=float) + np.asarray(grad_info, dtype=float).T) @ lower
    return np.array(
        [
            grad_lower[0, 0],
            grad_lower[1, 0],
            grad_lower[1, 1],
            grad_lower[2, 0],
            grad_lower[2, 1],
            grad_lower[2, 2],
        ]
    )


# --------------------------------------------------------------------------
# Network


@dataclass(frozen=True, slots=True)
class NetArchitecture:
    """Two valid-padded strided conv layers, one hidden dense layer, and a
    6-unit linear head whose diagonal outputs pass through ``exp``.
    """

    grid_height: int = 50
    grid_width: int = 50
    conv1_channels: int = 8
    conv1_kernel: int = 5
    conv1_stride: int = 2
    conv2_channels: int = 16
    conv2_kernel: int = 3
    conv2_stride: int = 2
    hidden_units: int = 64

    def __post_init__(self) -> None:
        for h, w, k, s in (
            (self.grid_height, self.grid_width, self.conv1_kernel, self.conv1_stride),
            self.conv1_shape + (self.conv2_kernel, self.conv2_stride),
        ):
            if h < k or w < k or s <= 0:
                raise ValueError("conv layer does not fit its input")

    @property
    def conv1_shape(self) -> tuple[int, int]:
        return (
            (self.grid_height - self.conv1_kernel) // self.conv1_stride + 1,
            (self.grid_width - self.conv1_kernel) // self.conv1_stride + 1,
        )

    @property
    def conv2_shape(self) -> tuple[int, int]:
        h1, w1 = self.conv1_shape
        return (
            (h1 - self.conv2_kernel) // self.conv2_stride + 1,
            (w1 - self.conv2_kernel) // self.conv2_stride + 1,
        )

    @property
    def flat_units(self) -> int:
        h2, w2 = self.conv2_shape
        return h2 * w2 * self.conv2_channels

    def meta_ints(self) -> tuple[int, ...]:
        return (
            self.grid_height,
            self.grid_width,
            self.conv1_channels,
            self.conv1_kernel,
            self.conv1_stride,
            self.conv2_channels,
            self.conv2_kernel,
            self.conv2_stride,
            self.hidden_units,
        )

    @classmethod
    def from_meta_ints(cls, meta: tuple[int, ...]) -> "NetArchitecture":
        if len(meta) != 9:
            raise ValueError(f"expected 9 architecture integers, got {len(meta)}")
        return cls(*meta)


def param_slices(arch: NetArchitecture) -> dict[str, tuple[slice, tuple[int, ...]]]:
    """Layout of the flat parameter vector: name -> (slice, shape), in order."""
    shapes = {
        "conv1_w": (arch.conv1_kernel**2, arch.conv1_channels),
        "conv1_b": (arch.conv1_channels,),
        "conv2_w": (arch.conv2_kernel**2 * arch.conv1_channels, arch.conv2_channels),
        "conv2_b": (arch.conv2_channels,),
        "dense_w": (arch.flat_units, arch.hidden_units),
        "dense_b": (arch.hidden_units,),
        "head_w": (arch.hidden_units, 6),
        "head_b": (6,),
    }
    layout = {}
    offset = 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        layout[name] = (slice(offset, offset + size), shape)
        offset += size
    return layout


def param_count(arch: NetArchitecture) -> int:
    last_slice, _ = list(param_slices(arch).values())[-1]
    return last_slice.stop


@dataclass(slots=True)
class NetParams:
    """Flat float64 parameter vector plus the architecture that interprets it."""

    arch: NetArchitecture
    theta: np.ndarray

    def __post_init__(self) -> None:
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1).copy()
        expected = param_count(self.arch)
        if self.theta.size != expected:
            raise ValueError(f"expected {expected} parameters, got {self.theta.size}")

    def views(self) -> dict[str, np.ndarray]:
        return {
            name: self.theta[sl].reshape(shape)
            for name, (sl, shape) in param_slices(self.arch).items()
        }


def init_params(
    arch: NetArchitecture = NetArchitecture(),
    seed: int = 0,
    nominal_sigma: float = 0.1,
) -> NetParams:
    """He-scaled random hidden layers and a zeroed head.

    With the head weights at zero the network output is its bias for every
    input, set so the initial information matrix is ``(nominal_sigma^2 I)^-1``:
    training starts from a plain isotropic fixed-covariance model.
    """
    if nominal_sigma <= 0.0:
        raise ValueError("nominal_sigma must be positive")
    rng = np.random.Generator(np.random.Philox(seed))
    theta = np.zeros(param_count(arch))
    params = NetParams(arch, theta)
    views = params.views()
    for name in ("conv1_w", "conv2_w", "dense_w"):
        w = views[name]
        w[...] = rng.standard_normal(w.shape) * math.sqrt(2.0 / w.shape[0])
    log_inv_sigma = math.log(1.0 / nominal_sigma)
    views["head_b"][...] = 0.0
    views["head_b"][list(DIAG_INDICES)] = log_inv_sigma
    return params


def _im2col(x: np.ndarray, kernel: int, stride: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Gather valid ``kernel x kernel`` windows of ``x`` (H, W, C) into rows."""
    height, width, channels = x.shape
    out_h = (height - kernel) // stride + 1
    out_w = (width - kernel) // stride + 1
    rows = (np.arange(out_h) * stride)[:, None, None, None] + np.arange(kernel)[None, None, :, None]
    cols = (np.arange(out_w) * stride)[None, :, None, None] + np.arange(kernel)[None, None, None, :]
    patches = x[rows, cols]  # (out_h, out_w, kernel, kernel, C)
    return patches.reshape(out_h * out_w, kernel * kernel * channels), (out_h, out_w)


def _col2im(grad_patches: np.ndarray, x_shape: tuple[int, int, int], kernel: int, stride: int) -> np.ndarray:
    """Scatter-add patch-row gradients back onto the input of :func:`_im2col`."""
    height, width, channels = x_shape
    out_h = (height - kernel) // stride + 1
    out_w = (width - kernel) // stride + 1
    grad_x = np.zeros(x_shape)
    view = grad_patches.reshape(out_h, out_w, kernel, kernel, channels)
    for di in range(kernel):
        for dj in range(kernel):
            grad_x[di : di + out_h * stride : stride, dj : dj + out_w * stride : stride, :] += view[
                :, :, di, dj, :
            ]
    return grad_x


@dataclass(slots=True)
class ForwardCache:
    """Activations retained by :func:`net_forward` for the reverse pass."""

    patches1: np.ndarray
    mask1: np.ndarray
    patches2: np.ndarray
    mask2: np.ndarray
    flat: np.ndarray
    mask3: np.ndarray
    hidden: np.ndarray
    descriptor: np.ndarray


def _check_finite(name: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite activation after {name}")


def net_forward(params: NetParams, grid: SceneGrid | np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Map an occupancy grid to an information-matrix descriptor.

    Returns the descriptor (diagonal entries already exponentiated, hence
    positive) and the cache consumed by :func:`net_backward`.
    """
    arch = params.arch
    values = grid.values if isinstance(grid, SceneGrid) else np.asarray(grid)
    if values.shape != (arch.grid_height, arch.grid_width):
        raise ValueError(
            f"grid shape {values.shape} does not match network input "
            f"({arch.grid_height}, {arch.grid_width})"
        )
    views = params.views()

    x0 = values.astype(np.float64).reshape(arch.grid_height, arch.grid_width, 1)
    patches1, (h1, w1) = _im2col(x0, arch.conv1_kernel, arch.conv1_stride)
    pre1 = patches1 @ views["conv1_w"] + views["conv1_b"]
    _check_finite("conv1", pre1)
    mask1 = pre1 > 0.0
    act1 = pre1 * mask1

    patches2, _ = _im2col(
        act1.reshape(h1, w1, arch.conv1_channels), arch.conv2_kernel, arch.conv2_stride
    )
    pre2 = patches2 @ views["conv2_w"] + views["conv2_b"]
    _check_finite("conv2", pre2)
    mask2 = pre2 > 0.0
    act2 = pre2 * mask2

    flat = act2.reshape(-1)
    pre3 = flat @ views["dense_w"] + views["dense_b"]
    _check_finite("dense", pre3)
    mask3 = pre3 > 0.0
    hidden = pre3 * mask3

    out = hidden @ views["head_w"] + views["head_b"]
    _check_finite("head", out)
    descriptor = out.copy()
    descriptor[list(DIAG_INDICES)] = np.exp(out[list(DIAG_INDICES)])
    _check_finite("descriptor", descriptor)

    cache = ForwardCache(patches1, mask1, patches2, mask2, flat, mask3, hidden, descriptor)
    return descriptor, cache


def net_backward(params: NetParams, cache: ForwardCache, grad_descriptor: np.ndarray) -> np.ndarray:
    """Gradient of a scalar w.r.t. the flat parameter vector.

    ``grad_descriptor`` is the gradient w.r.t. the forward pass output (after
    the ``exp`` head).  Returns an array matching ``params.theta``.
    """
    arch = params.arch
    views = params.views()
    diag = list(DIAG_INDICES)

    grad_out = np.asarray(grad_descriptor, dtype=float).reshape(6).copy()
    grad_out[diag] *= cache.descriptor[diag]

    grad = np.zeros_like(params.theta)
    grads = {
        name: grad[sl].reshape(shape) for name, (sl, shape) in param_slices(arch).items()
    }

    grads["head_w"][...] = np.outer(cache.hidden, grad_out)
    grads["head_b"][...] = grad_out
    grad_hidden = views["head_w"] @ grad_out

    grad_pre3 = grad_hidden * cache.mask3
    grads["dense_w"][...] = np.outer(cache.flat, grad_pre3)
    grads["dense_b"][...] = grad_pre3
    grad_flat = views["dense_w"] @ grad_pre3

    h2, w2 = arch.conv2_shape
    grad_act2 = grad_flat.reshape(h2 * w2, arch.conv2_channels)
    grad_pre2 = grad_act2 * cache.mask2
    grads["conv2_w"][...] = cache.patches2.T @ grad_pre2
    grads["conv2_b"][...] = grad_pre2.sum(axis=0)
    grad_patches2 = grad_pre2 @ views["conv2_w"].T

    h1, w1 = arch.conv1_shape
    grad_act1 = _col2im(
        grad_patches2, (h1, w1, arch.conv1_channels), arch.conv2_kernel, arch.conv2_stride
    ).reshape(h1 * w1, arch.conv1_channels)
    grad_pre1 = grad_act1 * cache.mask1
    grads["conv1_w"][...] = cache.patches1.T @ grad_pre1
    grads["conv1_b"][...] = grad_pre1.sum(axis=0)

    return grad


# --------------------------------------------------------------------------
# Model files

_MAGIC = b"FLOCNET1"
_VERSION = 1


def save_model(path, params: NetParams) -> None:
    """Write a model file: magic, format version, architecture, parameters.

    Parameters are stored as little-endian float64 in layer order, so a
    save/load round trip is bit-exact.
    """
    meta = params.arch.meta_ints()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(meta)))
        fh.write(struct.pack(f"<{len(meta)}q", *meta))
        fh.write(struct.pack("<Q", params.theta.size))
        fh.write(params.theta.astype("<f8").tobytes())


def load_model(path) -> NetParams:
    """Inverse of :func:`save_model`; validates header and parameter count."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise ValueError("not a model file (bad magic)")
    offset = len(_MAGIC)
    version, n_meta = struct.unpack_from("<II", blob, offset)
    offset += 8
    if version != _VERSION:
        raise ValueError(f"unsupported model format version {version}")
    meta = struct.unpack_from(f"<{n_meta}q", blob, offset)
    offset += 8 * n_meta
    arch = NetArchitecture.from_meta_ints(meta)
    (count,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    if count != param_count(arch):
        raise ValueError("parameter count does not match architecture")
    theta = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    if blob[offset + 8 * count :]:
        raise ValueError("trailing bytes after parameters")
    return NetParams(arch, theta.astype(np.float64))
