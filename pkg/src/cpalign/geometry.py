"""2-D similarity transforms parameterized as (t_u, t_v, s, theta).

A transform maps a point p to ``exp(s) * R(theta) @ p + t`` where ``s`` is the
log scale and ``R`` rotates counter-clockwise. Points are (u, v) pairs with u
the horizontal (column) coordinate and v the vertical (row) coordinate.

Composition and inversion are carried out on the parameters directly so that
transform chains stay exactly in the similarity group; no matrix round trips
are involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "SimTransform",
    "TransformSet",
    "apply_transform",
    "compose",
    "compose_param_jacobian",
    "fit_similarity",
    "from_box",
    "invert",
    "mean_transform",
    "param_jacobian",
    "rotation",
]


def rotation(theta: float) -> np.ndarray:
    """Counter-clockwise 2x2 rotation matrix."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class SimTransform:
    """Similarity transform with translation, log scale and rotation angle."""

    t_u: float
    t_v: float
    s: float
    theta: float

    @classmethod
    def identity(cls) -> "SimTransform":
        return cls(0.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, params: Sequence[float]) -> "SimTransform":
        t_u, t_v, s, theta = (float(x) for x in params)
        return cls(t_u, t_v, s, theta)

    def as_array(self) -> np.ndarray:
        return np.array([self.t_u, self.t_v, self.s, self.theta])

    def linear(self) -> np.ndarray:
        """The 2x2 linear part exp(s) R(theta)."""
        return math.exp(self.s) * rotation(self.theta)

    def translation(self) -> np.ndarray:
        return np.array([self.t_u, self.t_v])


def apply_transform(t: SimTransform, points: np.ndarray) -> np.ndarray:
    """Apply ``t`` to one point of shape (2,) or a stack of shape (n, 2)."""
    p = np.asarray(points, dtype=float)
    return p @ t.linear().T + t.translation()


def compose(outer: SimTransform, inner: SimTransform) -> SimTransform:
    """The transform mapping p to outer(inner(p)).

    Scales and angles add; the inner translation is pushed through the outer
    linear part.
    """
    t = outer.linear() @ inner.translation() + outer.translation()
    return SimTransform(float(t[0]), float(t[1]), outer.s + inner.s, outer.theta + inner.theta)


def invert(t: SimTransform) -> SimTransform:
    """The transform undoing ``t``: compose(t, invert(t)) is the identity."""
    a_inv = math.exp(-t.s) * rotation(-t.theta)
    ti = -(a_inv @ t.translation())
    return SimTransform(float(ti[0]), float(ti[1]), -t.s, -t.theta)


def mean_transform(transforms: Iterable[SimTransform]) -> SimTransform:
    """Parameter-wise mean; the angle is averaged circularly.

    Translations and log scales average arithmetically. Angles are reduced via
    the mean resultant vector so sets straddling the pi branch cut average
    sensibly.
    """
    ts = list(transforms)
    if not ts:
        raise ValueError("empty transform set")
    params = np.stack([t.as_array() for t in ts])
    t_u, t_v, s = params[:, :3].mean(axis=0)
    theta = math.atan2(
        float(np.sin(params[:, 3]).mean()), float(np.cos(params[:, 3]).mean())
    )
    return SimTransform(float(t_u), float(t_v), float(s), theta)


def from_box(
    box: Sequence[float], canonical: Sequence[float]
) -> SimTransform:
    """Rotation-free transform sending the canonical frame rectangle to ``box``.

    Both rectangles are (x, y, width, height) with (x, y) the top-left corner.
    The scale is the geometric mean of the width and height ratios and the
    translation matches the rectangle centers.
    """
    bx, by, bw, bh = (float(v) for v in box)
    cx, cy, cw, ch = (float(v) for v in canonical)
    if bw <= 0 or bh <= 0 or cw <= 0 or ch <= 0:
        raise ValueError(f"degenerate box: {(bw, bh, cw, ch)}")
    s = 0.5 * (math.log(bw / cw) + math.log(bh / ch))
    scale = math.exp(s)
    box_center = np.array([bx + bw / 2.0, by + bh / 2.0])
    canon_center = np.array([cx + cw / 2.0, cy + ch / 2.0])
    t = box_center - scale * canon_center
    return SimTransform(float(t[0]), float(t[1]), s, 0.0)


def fit_similarity(source: np.ndarray, target: np.ndarray) -> SimTransform:
    """Least-squares similarity transform sending ``source`` points to ``target``.

    Points are (n, 2) arrays in matching order. Written as complex regression
    w = a z + b this is an ordinary linear fit, which restricts the linear
    part to positively oriented scaled rotations. A source set with no spread
    (one point, or coincident points) pins only the translation, so the fit
    falls back to s = theta = 0.
    """
    src = np.asarray(source, dtype=float).reshape(-1, 2)
    dst = np.asarray(target, dtype=float).reshape(-1, 2)
    if src.shape != dst.shape or src.shape[0] == 0:
        raise ValueError(
            f"point sets must be non-empty and match: {src.shape} vs {dst.shape}"
        )
    z = src[:, 0] + 1j * src[:, 1]
    w = dst[:, 0] + 1j * dst[:, 1]
    zc, wc = z.mean(), w.mean()
    spread = float(np.sum(np.abs(z - zc) ** 2))
    if spread <= 1e-12:
        shift = wc - zc
        return SimTransform(float(shift.real), float(shift.imag), 0.0, 0.0)
    a = complex(np.sum(np.conj(z - zc) * (w - wc)) / spread)
    if abs(a) <= 1e-12:
        raise ValueError("degenerate similarity fit: target points coincide")
    b = wc - a * zc
    return SimTransform(
        float(b.real), float(b.imag), math.log(abs(a)), math.atan2(a.imag, a.real)
    )


def param_jacobian(t: SimTransform, points: np.ndarray) -> np.ndarray:
    """Derivative of t(p) with respect to (t_u, t_v, s, theta).

    Returns an array of shape (n, 2, 4): for each point, the 2x2 identity in
    the translation columns, exp(s) R(theta) p in the scale column and
    exp(s) R'(theta) p in the angle column.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    n = p.shape[0]
    jac = np.zeros((n, 2, 4))
    jac[:, 0, 0] = 1.0
    jac[:, 1, 1] = 1.0
    a = t.linear()
    jac[:, :, 2] = p @ a.T
    c, s = math.cos(t.theta), math.sin(t.theta)
    dr = math.exp(t.s) * np.array([[-s, -c], [c, -s]])
    jac[:, :, 3] = p @ dr.T
    return jac


def compose_param_jacobian(outer: SimTransform) -> np.ndarray:
    """Derivative of compose(outer, inner) parameters w.r.t. inner parameters.

    Block diagonal: the inner translation is scaled and rotated by the outer
    linear part while log scale and angle pass through untouched.
    """
    jac = np.eye(4)
    jac[:2, :2] = outer.linear()
    return jac


class TransformSet:
    """Immutable ordered collection of per-part transforms."""

    __slots__ = ("_items",)

    def __init__(self, items: Iterable[SimTransform]):
        self._items = tuple(items)

    @classmethod
    def identity(cls, m: int) -> "TransformSet":
        return cls(SimTransform.identity() for _ in range(m))

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "TransformSet":
        mat = np.asarray(mat, dtype=float)
        if mat.ndim != 2 or mat.shape[0] != 4:
            raise ValueError(f"expected a 4 x m parameter matrix, got {mat.shape}")
        return cls(SimTransform.from_array(mat[:, i]) for i in range(mat.shape[1]))

    def as_matrix(self) -> np.ndarray:
        """Parameters as a 4 x m matrix, one column per part."""
        if not self._items:
            return np.zeros((4, 0))
        return np.stack([t.as_array() for t in self._items], axis=1)

    def replaced(self, index: int, t: SimTransform) -> "TransformSet":
        items = list(self._items)
        items[index] = t
        return TransformSet(items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, index: int) -> SimTransform:
        return self._items[index]

    def __iter__(self) -> Iterator[SimTransform]:
        return iter(self._items)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TransformSet):
            return NotImplemented
        return self._items == other._items

    def __hash__(self) -> int:
        return hash(self._items)

    def __repr__(self) -> str:
        return f"TransformSet({list(self._items)!r})"
