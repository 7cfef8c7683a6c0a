"""Part-based alignment of a probe image against a learned appearance model.

A model carries one low-rank dictionary per part plus a tree-structured
Gaussian over the per-part transforms. Alignment alternates two moves:

* ``part_step`` refines the per-part transforms. Each pass linearizes the
  normalized warped observation around the current transforms and runs an
  inexact augmented-Lagrangian solve of the sparse-error subproblem, with
  the part increments coupled through the shape tree.
* ``holistic_step`` re-splits each combined transform into a shared global
  component and a per-part remainder, choosing the split that minimizes the
  shape cost. The combined transforms are preserved exactly, so the data
  term is untouched; only the regularizer improves.

Transforms compose as zeta_i = compose(sigma, nu_i): the per-part transform
acts in the canonical frame, the global one maps into the probe frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from cpalign.geometry import (
    SimTransform,
    TransformSet,
    apply_transform,
    compose,
    compose_param_jacobian,
    fit_similarity,
    from_box,
    invert,
)
from scipy.ndimage import gaussian_filter

from cpalign.imgproc import (
    PartDomain,
    normalize_intensity,
    warp_jacobian,
    warp_part,
)
from cpalign.shapemodel import (
    DIM,
    TreeShapeModel,
    max_likelihood_parts,
    shape_cost,
)
from cpalign.solver import AlmSettings, BlockSystem, soft_threshold, solve_delta_system

__all__ = [
    "AlignmentResult",
    "CpaModel",
    "align",
    "holistic_step",
    "initialize",
    "linearize_parts",
    "part_step",
]

# ridge on the dictionary normal equations; keeps collinear columns solvable
_COEF_RIDGE = 1e-8

# blur applied to probe and dictionaries during the capture stage of align;
# widens the matching basins before the full-resolution refinement
_COARSE_BLUR = 1.5


@dataclass(eq=False)
class CpaModel:
    """Part domains, per-part dictionaries, and the tree shape model.

    ``lambda_hat`` and ``eta_hat`` are resolution-free weights; the effective
    per-part sparsity weight is lambda_hat / sqrt(pixels) and the effective
    shape weight is eta_hat * sum_i pixels_i ** -0.5, so rescaling the part
    windows does not silently rebalance the objective.
    """

    domains: tuple[PartDomain, ...]
    dictionaries: tuple[np.ndarray, ...]
    shape: TreeShapeModel
    lambda_hat: float = 1.0
    eta_hat: float = 0.02
    frame: tuple[int, int] = (60, 80)

    def __post_init__(self):
        self.domains = tuple(self.domains)
        self.dictionaries = tuple(
            np.asarray(d, dtype=float) for d in self.dictionaries
        )
        m = len(self.domains)
        if m == 0:
            raise ValueError("model needs at least one part")
        if len(self.dictionaries) != m or self.shape.tree.m != m:
            raise ValueError(
                f"part count mismatch: {m} domains, {len(self.dictionaries)} "
                f"dictionaries, shape tree of {self.shape.tree.m}"
            )
        for i, (dom, d) in enumerate(zip(self.domains, self.dictionaries)):
            if d.ndim != 2 or d.shape[0] != dom.omega:
                raise ValueError(
                    f"dictionary {i} must have {dom.omega} rows, got {d.shape}"
                )
            norms = np.linalg.norm(d, axis=0)
            if np.any((np.abs(norms - 1.0) > 1e-6) & (norms > 1e-12)):
                raise ValueError(f"dictionary {i} columns must be unit or zero")
        if self.lambda_hat <= 0:
            raise ValueError(f"lambda_hat must be positive, got {self.lambda_hat}")
        if self.eta_hat < 0:
            raise ValueError(f"eta_hat must be non-negative, got {self.eta_hat}")
        w, h = self.frame
        if int(w) <= 0 or int(h) <= 0:
            raise ValueError(f"bad frame size {self.frame}")
        self.frame = (int(w), int(h))

    @property
    def m(self) -> int:
        return len(self.domains)

    @property
    def lambdas(self) -> tuple[float, ...]:
        return tuple(
            self.lambda_hat / math.sqrt(dom.omega) for dom in self.domains
        )

    @property
    def eta(self) -> float:
        return self.eta_hat * sum(dom.omega ** -0.5 for dom in self.domains)


@dataclass(eq=False)
class AlignmentResult:
    sigma: SimTransform
    nu: TransformSet
    x: tuple[np.ndarray, ...]
    e: tuple[np.ndarray, ...]
    residual_l1: tuple[float, ...]
    converged: bool
    iterations: int
    objective_trace: tuple[float, ...]
    shape_nll: float

    def combined(self) -> TransformSet:
        """Per-part canonical-to-probe transforms."""
        return TransformSet(compose(self.sigma, t) for t in self.nu)


def initialize(
    y: np.ndarray,
    model: CpaModel,
    *,
    box: Optional[Sequence[float]] = None,
    landmarks: Optional[np.ndarray] = None,
) -> tuple[SimTransform, TransformSet]:
    """Starting transforms for a probe.

    With no hint the global transform is the identity and the parts sit at
    the shape mode. A box hint places the canonical frame rectangle inside
    the box. Landmark hints (one point per part, in part order) fit the
    global transform by least squares and start each part at the residual
    translation, so the part centers land exactly on the landmarks.
    """
    if box is not None and landmarks is not None:
        raise ValueError("give at most one of box and landmarks")
    if box is not None:
        w, h = model.frame
        sigma = from_box(box, (0.0, 0.0, float(w), float(h)))
        return sigma, max_likelihood_parts(model.shape)
    if landmarks is not None:
        pts = np.asarray(landmarks, dtype=float).reshape(-1, 2)
        if pts.shape[0] != model.m:
            raise ValueError(
                f"expected {model.m} landmarks, got {pts.shape[0]}"
            )
        centers = np.array(
            [(d.center_u, d.center_v) for d in model.domains]
        )
        sigma = fit_similarity(centers, pts)
        back = apply_transform(invert(sigma), pts) - centers
        nu = TransformSet(
            SimTransform(float(du), float(dv), 0.0, 0.0) for du, dv in back
        )
        return sigma, nu
    return SimTransform.identity(), max_likelihood_parts(model.shape)


def _warp_action_change(model, sigma_a, nu_a, sigma_b, nu_b):
    """Largest corner displacement between the two sets of combined warps.

    Raw parameter differences overstate change: inside a small window a
    rotation about the distant frame origin is nearly a translation, so the
    split can drift along that direction while the actual warps stand still.
    """
    worst = 0.0
    for i, dom in enumerate(model.domains):
        pts = dom.corners()
        a = apply_transform(compose(sigma_a, nu_a[i]), pts)
        b = apply_transform(compose(sigma_b, nu_b[i]), pts)
        worst = max(worst, float(np.abs(a - b).max()))
    return worst


def linearize_parts(
    y: np.ndarray,
    domains: Sequence[PartDomain],
    sigma: SimTransform,
    nu: TransformSet,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Normalized warped part observations and their transform Jacobians.

    Each part's crop is scaled to unit norm; the returned Jacobian is taken
    with respect to the part transform's parameters, with the chain rule
    applied through both the outer composition and the normalization.
    """
    outer_map = compose_param_jacobian(sigma)
    vhs, jacs = [], []
    for i, dom in enumerate(domains):
        zeta = compose(sigma, nu[i])
        v = warp_part(y, zeta, dom)
        nrm = float(np.linalg.norm(v))
        if not np.isfinite(nrm) or nrm <= 1e-12:
            raise ValueError(
                f"diverged: unusable warp for part {dom.name or i + 1}"
            )
        vh = v / nrm
        raw = warp_jacobian(y, zeta, dom) @ outer_map
        # chain rule through v / ||v||
        jac = (raw - np.outer(vh, vh @ raw)) / nrm
        if not np.all(np.isfinite(jac)):
            raise ValueError(
                f"diverged: non-finite jacobian for part {dom.name or i + 1}"
            )
        vhs.append(vh)
        jacs.append(jac)
    return vhs, jacs


def part_step(
    y: np.ndarray,
    model: CpaModel,
    sigma: SimTransform,
    nu: TransformSet,
    settings: AlmSettings,
) -> tuple[TransformSet, list[np.ndarray], list[np.ndarray]]:
    """Refine the per-part transforms at a fixed global transform.

    Runs up to ``settings.max_outer_iters`` linearizations. Each solves,
    inexactly by an augmented Lagrangian on the constraint
    vh_i + J_i dn_i = D_i x_i + e_i, the subproblem

        min sum_i [ lambda_i ||e_i||_1 ] + eta * g(nu + dn)

    over coefficients, sparse errors and the stacked increment dn. Multiplier
    state is restarted per linearization, and the pass ends early once an
    increment moves no window corner by more than ``settings.outer_tol``
    pixels. Returns the refined transforms with the final coefficients and
    sparse errors.
    """
    y = np.asarray(y, dtype=float)
    m = model.m
    lambdas = model.lambdas
    eta = model.eta
    xs = [np.zeros(d.shape[1]) for d in model.dictionaries]
    es = [np.zeros(dom.omega) for dom in model.domains]

    for _ in range(settings.max_outer_iters):
        vhs, jacs = linearize_parts(y, model.domains, sigma, nu)
        jtjs = [j.T @ j for j in jacs]
        grams = [
            d.T @ d + _COEF_RIDGE * np.eye(d.shape[1])
            for d in model.dictionaries
        ]
        beta = settings.beta0 or 1.25 / float(
            np.mean(np.abs(np.concatenate(vhs)))
        )
        gammas = [np.zeros_like(v) for v in vhs]
        delta = np.zeros((DIM, m))
        xs = [np.zeros(d.shape[1]) for d in model.dictionaries]
        es = [np.zeros_like(v) for v in vhs]
        nu_mat = nu.as_matrix()

        for _ in range(settings.max_inner_iters):
            q = np.empty((DIM, m))
            blocks = []
            for i in range(m):
                d_i = model.dictionaries[i]
                r = vhs[i] + gammas[i] / beta
                lin = r + jacs[i] @ delta[:, i]
                xs[i] = np.linalg.solve(grams[i], d_i.T @ (lin - es[i]))
                es[i] = soft_threshold(lin - d_i @ xs[i], lambdas[i] / beta)
                q[:, i] = beta * (jacs[i].T @ (d_i @ xs[i] + es[i] - r))
                block = beta * jtjs[i]
                if eta == 0.0 and float(np.trace(block)) < 1e-10:
                    # featureless window (flat texture or uniform occluder)
                    # with no shape term either: hold the part still instead
                    # of solving a singular system
                    block = np.eye(DIM)
                    q[:, i] = 0.0
                blocks.append(block)
            system = BlockSystem(blocks, q, model.shape, eta)
            delta = solve_delta_system(system, nu_mat)
            if not np.all(np.isfinite(delta)) or np.abs(delta).max() > 1e4:
                raise ValueError("diverged: transform increment blew up")
            gap = 0.0
            for i in range(m):
                h = vhs[i] + jacs[i] @ delta[:, i] - model.dictionaries[i] @ xs[i] - es[i]
                gammas[i] = gammas[i] + beta * h
                gap = max(gap, float(np.abs(h).max()))
            beta = min(settings.rho * beta, settings.beta_max)
            if gap <= settings.inner_tol:
                break

        prev = nu
        nu = TransformSet.from_matrix(nu_mat + delta)
        if _warp_action_change(model, sigma, prev, sigma, nu) <= settings.outer_tol:
            break
    return nu, xs, es


def _resplit(base_params, dsigma, zetas):
    sigma = SimTransform.from_array(base_params + dsigma)
    inv = invert(sigma)
    return sigma, [compose(inv, z) for z in zetas]


def _resplit_gradient(sigma, nus, shape):
    """Gradient and Gauss-Newton metric of g under the re-split map.

    Each per-part transform responds linearly (to first order) to a change
    of the global parameters; the 4x4 response blocks below are exact
    derivatives of the group operation compose(invert(sigma), zeta).
    """
    a = math.exp(-sigma.s)
    c, s = math.cos(sigma.theta), math.sin(sigma.theta)
    blocks = []
    for t in nus:
        blocks.append(np.array([
            [-a * c, -a * s, -t.t_u, t.t_v],
            [a * s, -a * c, -t.t_v, -t.t_u],
            [0.0, 0.0, -1.0, 0.0],
            [0.0, 0.0, 0.0, -1.0],
        ]))
    grad = np.zeros(DIM)
    metric = np.zeros((DIM, DIM))
    mat = np.stack([t.as_array() for t in nus], axis=1)
    for i in range(1, shape.tree.m + 1):
        parent = shape.tree.parent_of(i)
        edge = shape.edges[i - 1]
        if parent == 0:
            diff_block = blocks[i - 1]
            delta = mat[:, i - 1] - edge.mu
        else:
            diff_block = blocks[i - 1] - blocks[parent - 1]
            delta = mat[:, i - 1] - mat[:, parent - 1] - edge.mu
        grad += diff_block.T @ (edge.precision @ delta)
        metric += diff_block.T @ edge.precision @ diff_block
    return grad, metric


def holistic_step(
    sigma: SimTransform,
    nu: TransformSet,
    shape: TreeShapeModel,
    *,
    max_iters: int = 100,
    grad_tol: float = 1e-10,
) -> tuple[SimTransform, TransformSet]:
    """Move shared motion into the global transform.

    Minimizes the shape cost over a shift of the global parameters, with
    every combined transform held fixed (the per-part transforms are recomputed
    exactly from the group operation, so this is a pure reparameterization).
    Search directions come from the Gauss-Newton metric of the re-split map,
    safeguarded by Armijo backtracking (factor 0.5, slope 1e-4, at most 40
    halvings); a stalled line search returns the best point found so far.
    """
    zetas = [compose(sigma, t) for t in nu]
    base = sigma.as_array()
    dsigma = np.zeros(DIM)
    sigma_cur, nus_cur = sigma, list(nu)
    cost = shape_cost(np.stack([t.as_array() for t in nus_cur], axis=1), shape)

    for _ in range(max_iters):
        grad, metric = _resplit_gradient(sigma_cur, nus_cur, shape)
        if float(np.abs(grad).max()) <= grad_tol:
            break
        jitter = 1e-12 * (1.0 + float(np.trace(metric)))
        try:
            direction = -np.linalg.solve(metric + jitter * np.eye(DIM), grad)
        except np.linalg.LinAlgError:
            direction = -grad
        slope = float(grad @ direction)
        if slope >= 0.0:
            direction = -grad
            slope = -float(grad @ grad)
        step = 1.0
        accepted = False
        for _ in range(40):
            cand = dsigma + step * direction
            sigma_cand, nus_cand = _resplit(base, cand, zetas)
            cand_cost = shape_cost(
                np.stack([t.as_array() for t in nus_cand], axis=1), shape
            )
            if cand_cost <= cost + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        improvement = cost - cand_cost
        dsigma, sigma_cur, nus_cur, cost = cand, sigma_cand, nus_cand, cand_cost
        if improvement <= 1e-15 * (1.0 + abs(cost)):
            break
    return sigma_cur, TransformSet(nus_cur)


def _coarse_model(model: CpaModel) -> CpaModel:
    """Copy of the model with every dictionary column blurred."""
    dicts = []
    for dom, d in zip(model.domains, model.dictionaries):
        cols = []
        for k in range(d.shape[1]):
            col = d[:, k].reshape(dom.height, dom.width)
            cols.append(
                normalize_intensity(gaussian_filter(col, _COARSE_BLUR).ravel())
            )
        dicts.append(np.stack(cols, axis=1))
    return replace(model, dictionaries=tuple(dicts))


def align(
    y: np.ndarray,
    model: CpaModel,
    *,
    box: Optional[Sequence[float]] = None,
    landmarks: Optional[np.ndarray] = None,
    settings: Optional[AlmSettings] = None,
    alternations: int = 10,
) -> AlignmentResult:
    """Full alignment: alternate part refinement and the holistic re-split.

    A capture stage runs the first alternations against a blurred probe and
    blurred dictionary columns, widening every matching basin before the
    full-resolution refinement. Stops early once an alternation moves no
    part window corner by more than ``settings.outer_tol`` pixels. The
    objective trace records, per alternation, the weighted sparse-error l1
    mass plus the weighted shape cost.
    """
    if settings is None:
        settings = AlmSettings()
    if alternations < 1:
        raise ValueError(f"alternations must be at least 1, got {alternations}")
    y = np.asarray(y, dtype=float)
    sigma, nu = initialize(y, model, box=box, landmarks=landmarks)

    coarse = _coarse_model(model)
    y_coarse = gaussian_filter(y, _COARSE_BLUR)
    for _ in range(2):
        nu, _, _ = part_step(y_coarse, coarse, sigma, nu, settings)
        sigma, nu = holistic_step(sigma, nu, model.shape)

    lambdas = model.lambdas
    trace: list[float] = []
    xs: list[np.ndarray] = []
    es: list[np.ndarray] = []
    converged = False
    iterations = 0

    for iterations in range(1, alternations + 1):
        sigma_before, nu_before = sigma, nu
        nu, xs, es = part_step(y, model, sigma, nu, settings)
        trace.append(
            float(sum(lam * np.abs(e).sum() for lam, e in zip(lambdas, es)))
            + model.eta * shape_cost(nu, model.shape)
        )
        sigma, nu = holistic_step(sigma, nu, model.shape)
        change = _warp_action_change(model, sigma_before, nu_before, sigma, nu)
        if change <= settings.outer_tol:
            converged = True
            break

    return AlignmentResult(
        sigma=sigma,
        nu=nu,
        x=tuple(xs),
        e=tuple(es),
        residual_l1=tuple(float(np.abs(e).sum()) for e in es),
        converged=converged,
        iterations=iterations,
        objective_trace=tuple(trace),
        shape_nll=shape_cost(nu, model.shape),
    )
