"""Grayscale image access: bilinear sampling, part-window warping and the
warp Jacobian used by the alignment solvers.

Images are 2-D float arrays indexed ``img[v, u]`` (row = vertical coordinate)
with intensities nominally in [0, 1]. Sampling outside the frame clamps to the
nearest edge pixel.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from cpalign.geometry import SimTransform, apply_transform, param_jacobian

__all__ = [
    "PartDomain",
    "image_gradient",
    "normalize_intensity",
    "read_pgm",
    "sample_bilinear",
    "warp_jacobian",
    "warp_part",
    "write_pgm",
    "write_ppm",
]

PathLike = Union[str, Path]


@dataclass(frozen=True)
class PartDomain:
    """Rectangular sampling window in the canonical frame.

    The window is an axis-aligned grid of ``width * height`` unit-spaced
    points centered on (center_u, center_v). ``grid()`` returns the points in
    raster order (one row of u values after another), which fixes the row
    order of part appearance vectors and dictionary matrices.
    """

    center_u: float
    center_v: float
    width: int
    height: int
    name: str = field(default="", compare=False)

    @property
    def omega(self) -> int:
        """Number of sample points (the part vector dimension)."""
        return self.width * self.height

    def grid(self) -> np.ndarray:
        return _domain_grid(
            float(self.center_u), float(self.center_v), int(self.width), int(self.height)
        )

    def box(self) -> tuple[float, float, float, float]:
        """Enclosing rectangle (x, y, w, h) for display purposes."""
        return (
            self.center_u - self.width / 2.0,
            self.center_v - self.height / 2.0,
            float(self.width),
            float(self.height),
        )

    def corners(self) -> np.ndarray:
        """The 4 corners of the display rectangle, counter-clockwise."""
        x, y, w, h = self.box()
        return np.array([[x, y], [x + w, y], [x + w, y + h], [x, y + h]])


@functools.lru_cache(maxsize=256)
def _domain_grid(cu: float, cv: float, width: int, height: int) -> np.ndarray:
    us = cu + (np.arange(width) - (width - 1) / 2.0)
    vs = cv + (np.arange(height) - (height - 1) / 2.0)
    uu, vv = np.meshgrid(us, vs)
    pts = np.stack([uu.ravel(), vv.ravel()], axis=1)
    pts.flags.writeable = False
    return pts


def sample_bilinear(img: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of ``img`` at (u, v) points, clamped to edge."""
    img = np.asarray(img, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    h, w = img.shape
    u = np.clip(pts[:, 0], 0.0, w - 1.0)
    v = np.clip(pts[:, 1], 0.0, h - 1.0)
    u0 = np.clip(np.floor(u).astype(int), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(v).astype(int), 0, max(h - 2, 0))
    fu = u - u0
    fv = v - v0
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    top = (1 - fu) * img[v0, u0] + fu * img[v0, u1]
    bottom = (1 - fu) * img[v1, u0] + fu * img[v1, u1]
    return (1 - fv) * top + fv * bottom


def image_gradient(img: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Interpolant gradient (d/du, d/dv) at continuous points.

    Inside each unit cell the bilinear surface has closed-form slopes; this is
    the small-step limit of central differences taken in warped coordinates.
    The clamped constant extension outside the frame has zero slope.
    """
    img = np.asarray(img, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    h, w = img.shape
    inside_u = (pts[:, 0] >= 0.0) & (pts[:, 0] <= w - 1.0)
    inside_v = (pts[:, 1] >= 0.0) & (pts[:, 1] <= h - 1.0)
    u = np.clip(pts[:, 0], 0.0, w - 1.0)
    v = np.clip(pts[:, 1], 0.0, h - 1.0)
    u0 = np.clip(np.floor(u).astype(int), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(v).astype(int), 0, max(h - 2, 0))
    fu = u - u0
    fv = v - v0
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    du = (1 - fv) * (img[v0, u1] - img[v0, u0]) + fv * (img[v1, u1] - img[v1, u0])
    dv = (1 - fu) * (img[v1, u0] - img[v0, u0]) + fu * (img[v1, u1] - img[v0, u1])
    return np.stack([du * inside_u, dv * inside_v], axis=1)


def warp_part(img: np.ndarray, t: SimTransform, dom: PartDomain) -> np.ndarray:
    """Sample ``img`` over the transformed part window.

    Returns the length-omega vector of intensities at t(p) for each canonical
    grid point p, in the domain's raster order.
    """
    return sample_bilinear(img, apply_transform(t, dom.grid()))


def warp_jacobian(
    img: np.ndarray, t: SimTransform, dom: PartDomain, step: float = 1e-4
) -> np.ndarray:
    """Derivative of warp_part with respect to the 4 transform parameters.

    Central differences of the sampled intensities are taken in warped
    coordinates along the analytic parameter directions of the similarity
    warp. For the piecewise-bilinear interpolant this equals the exact
    directional derivative away from cell boundaries and a symmetrized slope
    on them, which keeps the Jacobian stable when warped points land exactly
    on the pixel grid. Shape (omega, 4).
    """
    grid = dom.grid()
    params = t.as_array()
    jac = np.empty((grid.shape[0], 4))
    for k in range(4):
        plus, minus = params.copy(), params.copy()
        plus[k] += step
        minus[k] -= step
        hi = sample_bilinear(img, apply_transform(SimTransform.from_array(plus), grid))
        lo = sample_bilinear(img, apply_transform(SimTransform.from_array(minus), grid))
        jac[:, k] = (hi - lo) / (2.0 * step)
    return jac


def normalize_intensity(v: np.ndarray) -> np.ndarray:
    """Scale a part vector to unit Euclidean norm; near-zero input maps to 0."""
    v = np.asarray(v, dtype=float)
    norm = float(np.linalg.norm(v))
    if norm <= 1e-12:
        return np.zeros_like(v)
    return v / norm


def _parse_pnm_header(data: bytes, path: PathLike, magic: bytes) -> tuple[list[int], int]:
    if not data.startswith(magic):
        raise ValueError(f"not a binary {magic.decode()} file: {path}")
    fields: list[int] = []
    pos = len(magic)
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos] == ord("#"):
            while pos < len(data) and data[pos] != ord("\n"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"malformed header in {path}")
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise ValueError(f"malformed header in {path}") from None
    return fields, pos + 1  # payload starts after a single whitespace byte


def read_pgm(path: PathLike) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM file into a float image in [0, 1]."""
    data = Path(path).read_bytes()
    (width, height, maxval), offset = _parse_pnm_header(data, path, b"P5")
    if width <= 0 or height <= 0:
        raise ValueError(f"invalid dimensions {width}x{height} in {path}")
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval} in {path} (expected 255)")
    payload = data[offset : offset + width * height]
    if len(payload) < width * height:
        raise ValueError(
            f"truncated PGM payload in {path}: expected {width * height} bytes,"
            f" got {len(payload)}"
        )
    img = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return img.astype(float) / 255.0


def write_pgm(path: PathLike, img: np.ndarray) -> None:
    """Write a float image in [0, 1] as a binary 8-bit PGM file."""
    img = np.asarray(img, dtype=float)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    quantized = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    height, width = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode())
        fh.write(quantized.tobytes())


def write_ppm(path: PathLike, rgb: np.ndarray) -> None:
    """Write a float RGB image in [0, 1] (shape h x w x 3) as binary PPM."""
    rgb = np.asarray(rgb, dtype=float)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an h x w x 3 image, got shape {rgb.shape}")
    quantized = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    height, width = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode())
        fh.write(quantized.tobytes())
