"""Batch learning of part dictionaries and the tree shape model.

Training alternates three moves over a stack of registered images:

* a batch transform refinement, where each part's stacked, unit-normalized
  crops are split into a low-rank matrix plus a sparse error by an inexact
  augmented Lagrangian, and every image's transform increment solves the
  tree-coupled quadratic subproblem;
* a per-image re-split of global versus part motion, skipped when the
  global transforms come from trusted annotations;
* a conjugate-prior (or plain maximum-likelihood) refit of the edge
  Gaussians from the refined transform differences.

A mixture couples several such components through shared per-part
decompositions: the crop columns of every component possessing a part are
decomposed together, so low-rank structure is pooled across components
while each component keeps its own shape model and transforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from cpalign.align import CpaModel, holistic_step, linearize_parts
from cpalign.geometry import (
    SimTransform,
    TransformSet,
    apply_transform,
    compose,
    fit_similarity,
    invert,
)
from cpalign.imgproc import PartDomain, normalize_intensity, warp_part
from cpalign.shapemodel import (
    DIM,
    EdgeGaussian,
    TreeConfig,
    TreeShapeModel,
    learn_tree_config,
    map_estimate,
    ml_estimate,
    prior_from_gaussian,
    shape_cost,
)
from cpalign.solver import AlmSettings, BlockSystem, soft_threshold, solve_delta_system, svd_shrink

__all__ = [
    "DictionaryFit",
    "LearnSettings",
    "MixtureCpaModel",
    "MixtureSpec",
    "TrainingSet",
    "fit_dictionaries_fixed_shape",
    "learn_dictionaries",
    "learn_mixture",
    "learn_model",
]

# a part whose crop Jacobian carries less energy than this is treated as
# textureless during the unconstrained warm-up, where nothing else pins it
_FLAT_JTJ_TRACE = 1e-10


@dataclass(eq=False)
class TrainingSet:
    """Registered training images with starting transforms.

    ``init_sigma`` holds one global transform per image (typically fitted
    from annotated registration points) and ``init_nu`` one per-part
    transform set per image. With ``sigma_fixed`` the global transforms are
    treated as known throughout learning and only the part transforms move.
    """

    images: tuple[np.ndarray, ...]
    domains: tuple[PartDomain, ...]
    init_sigma: tuple[SimTransform, ...]
    init_nu: tuple[TransformSet, ...]
    sigma_fixed: bool = True
    frame: tuple[int, int] = (60, 80)

    def __post_init__(self):
        self.images = tuple(np.asarray(img, dtype=float) for img in self.images)
        self.domains = tuple(self.domains)
        self.init_sigma = tuple(self.init_sigma)
        self.init_nu = tuple(self.init_nu)
        if not self.images:
            raise ValueError("training set needs at least one image")
        if not self.domains:
            raise ValueError("training set needs at least one part")
        n = len(self.images)
        if len(self.init_sigma) != n or len(self.init_nu) != n:
            raise ValueError(
                f"transform counts must match {n} images: got "
                f"{len(self.init_sigma)} global, {len(self.init_nu)} part sets"
            )
        for k, img in enumerate(self.images):
            if img.ndim != 2:
                raise ValueError(f"image {k} must be 2-D, got shape {img.shape}")
        for k, nu in enumerate(self.init_nu):
            if len(nu) != len(self.domains):
                raise ValueError(
                    f"image {k} has {len(nu)} part transforms, expected "
                    f"{len(self.domains)}"
                )
        w, h = self.frame
        if int(w) <= 0 or int(h) <= 0:
            raise ValueError(f"bad frame size {self.frame}")
        self.frame = (int(w), int(h))

    @property
    def n(self) -> int:
        return len(self.images)

    @property
    def m(self) -> int:
        return len(self.domains)

    @classmethod
    def from_landmarks(
        cls,
        images: Sequence[np.ndarray],
        domains: Sequence[PartDomain],
        landmarks: np.ndarray,
        *,
        sigma_fixed: bool = True,
        frame: tuple[int, int] = (60, 80),
    ) -> "TrainingSet":
        """Build starting transforms from per-image part-center annotations.

        ``landmarks`` is (n, m, 2). Each image's global transform is the
        least-squares similarity sending the canonical part centers to its
        landmarks; the parts start at the residual translations, so every
        part center lands exactly on its annotation.
        """
        pts = np.asarray(landmarks, dtype=float)
        if pts.ndim != 3 or pts.shape[1:] != (len(domains), 2):
            raise ValueError(
                f"landmarks must be (n, {len(domains)}, 2), got {pts.shape}"
            )
        centers = np.array([(d.center_u, d.center_v) for d in domains])
        sigmas, nus = [], []
        for k in range(pts.shape[0]):
            sigma = fit_similarity(centers, pts[k])
            back = apply_transform(invert(sigma), pts[k]) - centers
            sigmas.append(sigma)
            nus.append(
                TransformSet(
                    SimTransform(float(du), float(dv), 0.0, 0.0) for du, dv in back
                )
            )
        return cls(
            images=tuple(images),
            domains=tuple(domains),
            init_sigma=tuple(sigmas),
            init_nu=tuple(nus),
            sigma_fixed=sigma_fixed,
            frame=frame,
        )


@dataclass(frozen=True)
class LearnSettings:
    """Knobs for batch learning.

    ``max_linearizations`` bounds the transform refinement of a standalone
    dictionary fit; inside model learning each outer round instead runs
    ``linearizations_per_round`` refinements between shape refits.
    """

    alm: AlmSettings = AlmSettings()
    lambda_hat: float = 1.0
    eta_hat: float = 0.02
    max_linearizations: int = 30
    linearizations_per_round: int = 2
    outer_rounds: int = 30
    outer_tol: float = 1e-4
    init_iterations: int = 5

    def __post_init__(self):
        if self.lambda_hat <= 0:
            raise ValueError(f"lambda_hat must be positive, got {self.lambda_hat}")
        if self.eta_hat < 0:
            raise ValueError(f"eta_hat must be non-negative, got {self.eta_hat}")
        if min(self.max_linearizations, self.linearizations_per_round) < 1:
            raise ValueError("linearization counts must be at least 1")
        if self.outer_rounds < 1:
            raise ValueError(f"outer_rounds must be at least 1, got {self.outer_rounds}")
        if self.outer_tol <= 0:
            raise ValueError(f"outer_tol must be positive, got {self.outer_tol}")
        if self.init_iterations < 0:
            raise ValueError(
                f"init_iterations must be non-negative, got {self.init_iterations}"
            )


@dataclass(eq=False)
class DictionaryFit:
    """Aligned dictionaries and the decomposition that produced them.

    ``dictionaries`` are the unit-normalized crops at the final transforms,
    one (pixels x images) matrix per part; ``low_rank`` and ``sparse`` are
    the matching decomposition iterates from the last solve.
    """

    dictionaries: tuple[np.ndarray, ...]
    low_rank: tuple[np.ndarray, ...]
    sparse: tuple[np.ndarray, ...]
    nu: tuple[TransformSet, ...]
    sigma: tuple[SimTransform, ...]
    objective_trace: tuple[float, ...]


@dataclass(frozen=True)
class MixtureSpec:
    """Component availability masks over the global part list."""

    availability: tuple[tuple[bool, ...], ...]

    def __post_init__(self):
        masks = tuple(tuple(bool(b) for b in mask) for mask in self.availability)
        object.__setattr__(self, "availability", masks)
        if not masks:
            raise ValueError("mixture needs at least one component")
        m = len(masks[0])
        if m == 0 or any(len(mask) != m for mask in masks):
            raise ValueError("availability masks must share one non-empty length")
        for idx, mask in enumerate(masks):
            if not any(mask):
                raise ValueError(f"component {idx} has no available parts")

    @property
    def c(self) -> int:
        return len(self.availability)

    @property
    def m(self) -> int:
        return len(self.availability[0])


@dataclass(eq=False)
class MixtureCpaModel:
    """One alignment model per component plus the part-availability masks."""

    components: tuple[CpaModel, ...]
    masks: tuple[tuple[bool, ...], ...]

    def __post_init__(self):
        self.components = tuple(self.components)
        self.masks = tuple(tuple(bool(b) for b in mask) for mask in self.masks)
        if len(self.components) != len(self.masks) or not self.components:
            raise ValueError("need one mask per component")
        for idx, (comp, mask) in enumerate(zip(self.components, self.masks)):
            if comp.m != sum(mask):
                raise ValueError(
                    f"component {idx} has {comp.m} parts but its mask selects "
                    f"{sum(mask)}"
                )

    @property
    def c(self) -> int:
        return len(self.components)


@dataclass(eq=False)
class _Component:
    """Mutable per-component training state inside the joint engine."""

    images: tuple[np.ndarray, ...]
    domains: tuple[PartDomain, ...]
    parts: tuple[int, ...]
    shape: TreeShapeModel
    eta: float
    sigma: list[SimTransform]
    nu: list[TransformSet]
    sigma_fixed: bool

    @property
    def n(self) -> int:
        return len(self.images)


def _component_eta(eta_hat: float, domains: Sequence[PartDomain]) -> float:
    return eta_hat * sum(dom.omega ** -0.5 for dom in domains)


def _trivial_shape(m: int) -> TreeShapeModel:
    edges = [EdgeGaussian(np.zeros(DIM), np.eye(DIM)) for _ in range(m)]
    return TreeShapeModel(TreeConfig((0,) * m), edges)


def _corner_shift(domains, sigma_a, nu_a, sigma_b, nu_b) -> float:
    worst = 0.0
    for i, dom in enumerate(domains):
        pts = dom.corners()
        a = apply_transform(compose(sigma_a, nu_a[i]), pts)
        b = apply_transform(compose(sigma_b, nu_b[i]), pts)
        worst = max(worst, float(np.abs(a - b).max()))
    return worst


def _stack_columns(comps: Sequence[_Component], part: int, values) -> np.ndarray:
    """Concatenate per-image vectors of every component owning ``part``."""
    cols = []
    for ci, comp in enumerate(comps):
        if part not in comp.parts:
            continue
        li = comp.parts.index(part)
        cols.extend(values[ci][k][li] for k in range(comp.n))
    return np.stack(cols, axis=1)


def _feasible_objective(
    comps: Sequence[_Component],
    lambdas: Sequence[float],
    owned: Sequence[int],
    low_rank: dict[int, np.ndarray],
) -> float:
    """Objective at the feasible point with the sparse term closing the gap."""
    total = 0.0
    crops = [
        [
            [
                normalize_intensity(
                    warp_part(comp.images[k], compose(comp.sigma[k], comp.nu[k][li]), dom)
                )
                for li, dom in enumerate(comp.domains)
            ]
            for k in range(comp.n)
        ]
        for comp in comps
    ]
    for part in owned:
        stacked = _stack_columns(comps, part, crops)
        gap = stacked - low_rank[part]
        total += float(np.linalg.norm(low_rank[part], "nuc"))
        total += lambdas[part] * float(np.abs(gap).sum())
    for comp in comps:
        if comp.eta > 0:
            total += comp.eta * sum(
                shape_cost(nu, comp.shape) for nu in comp.nu
            )
    return total


def _joint_pass(
    comps: Sequence[_Component],
    lambdas: Sequence[float],
    settings: LearnSettings,
    *,
    linearizations: int,
    trace: list[float],
) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Run linearized batch decompositions, mutating component transforms.

    Every linearization restarts the multiplier state, alternates the
    closed-form low-rank / sparse / increment updates until the constraint
    gap closes, applies the increments, then re-splits each image's global
    and part motion. Stops early once no part window corner moves by more
    than the outer tolerance. Returns the final decomposition per part.
    """
    alm = settings.alm
    owned = sorted({p for comp in comps for p in comp.parts})
    low_rank: dict[int, np.ndarray] = {}
    sparse: dict[int, np.ndarray] = {}

    for _ in range(linearizations):
        vhs, jacs, jtjs = [], [], []
        for comp in comps:
            comp_vh, comp_jac, comp_jtj = [], [], []
            for k in range(comp.n):
                vh, jac = linearize_parts(
                    comp.images[k], comp.domains, comp.sigma[k], comp.nu[k]
                )
                comp_vh.append(vh)
                comp_jac.append(jac)
                comp_jtj.append([j.T @ j for j in jac])
            vhs.append(comp_vh)
            jacs.append(comp_jac)
            jtjs.append(comp_jtj)

        stacked = {p: _stack_columns(comps, p, vhs) for p in owned}
        beta = alm.beta0 or 1.25 / float(
            np.mean(np.abs(np.concatenate([stacked[p].ravel() for p in owned])))
        )
        gammas = {p: np.zeros_like(stacked[p]) for p in owned}
        low_rank = {p: np.zeros_like(stacked[p]) for p in owned}
        sparse = {p: np.zeros_like(stacked[p]) for p in owned}
        deltas = [
            [np.zeros((DIM, len(comp.parts))) for _ in range(comp.n)]
            for comp in comps
        ]
        offsets = {}
        for p in owned:
            col, offs = 0, []
            for ci, comp in enumerate(comps):
                if p in comp.parts:
                    offs.append((ci, col))
                    col += comp.n
            offsets[p] = offs

        def jac_shift(p: int) -> np.ndarray:
            cols = []
            for ci, comp in enumerate(comps):
                if p not in comp.parts:
                    continue
                li = comp.parts.index(p)
                cols.extend(
                    jacs[ci][k][li] @ deltas[ci][k][:, li] for k in range(comp.n)
                )
            return np.stack(cols, axis=1)

        for _ in range(alm.max_inner_iters):
            refs = {}
            for p in owned:
                refs[p] = stacked[p] + gammas[p] / beta
                lin = refs[p] + jac_shift(p)
                low_rank[p] = svd_shrink(lin - sparse[p], 1.0 / beta)
                sparse[p] = soft_threshold(lin - low_rank[p], lambdas[p] / beta)
            for ci, comp in enumerate(comps):
                for k in range(comp.n):
                    blocks, q = [], np.empty((DIM, len(comp.parts)))
                    for li, p in enumerate(comp.parts):
                        col = next(off for cj, off in offsets[p] if cj == ci) + k
                        jac = jacs[ci][k][li]
                        resid = (
                            low_rank[p][:, col] + sparse[p][:, col] - refs[p][:, col]
                        )
                        block = beta * jtjs[ci][k][li]
                        if comp.eta == 0.0:
                            if float(np.trace(block)) < beta * _FLAT_JTJ_TRACE:
                                # textureless and unconstrained: hold still
                                block = np.eye(DIM)
                                q[:, li] = 0.0
                                blocks.append(block)
                                continue
                            block = block + 1e-9 * max(1.0, float(np.trace(block))) * np.eye(DIM)
                        q[:, li] = beta * (jac.T @ resid)
                        blocks.append(block)
                    system = BlockSystem(blocks, q, comp.shape, comp.eta)
                    delta = solve_delta_system(system, comp.nu[k].as_matrix())
                    if not np.all(np.isfinite(delta)) or np.abs(delta).max() > 1e4:
                        raise ValueError("diverged: transform increment blew up")
                    deltas[ci][k] = delta
            gap = 0.0
            for p in owned:
                h = stacked[p] + jac_shift(p) - low_rank[p] - sparse[p]
                gammas[p] = gammas[p] + beta * h
                gap = max(gap, float(np.abs(h).max()))
            beta = min(alm.rho * beta, alm.beta_max)
            if gap <= alm.inner_tol:
                break

        moved = 0.0
        for ci, comp in enumerate(comps):
            for k in range(comp.n):
                prev = comp.nu[k]
                comp.nu[k] = TransformSet.from_matrix(
                    prev.as_matrix() + deltas[ci][k]
                )
                moved = max(
                    moved,
                    _corner_shift(
                        comp.domains, comp.sigma[k], prev, comp.sigma[k], comp.nu[k]
                    ),
                )
            if not comp.sigma_fixed and comp.eta > 0:
                for k in range(comp.n):
                    comp.sigma[k], comp.nu[k] = holistic_step(
                        comp.sigma[k], comp.nu[k], comp.shape
                    )
        trace.append(_feasible_objective(comps, lambdas, owned, low_rank))
        if moved <= alm.outer_tol:
            break
    return low_rank, sparse


def _final_dictionaries(comp: _Component) -> tuple[np.ndarray, ...]:
    mats = []
    for li, dom in enumerate(comp.domains):
        cols = [
            normalize_intensity(
                warp_part(comp.images[k], compose(comp.sigma[k], comp.nu[k][li]), dom)
            )
            for k in range(comp.n)
        ]
        mats.append(np.stack(cols, axis=1))
    return tuple(mats)


def _make_component(ts: TrainingSet, shape: TreeShapeModel, eta: float) -> _Component:
    return _Component(
        images=ts.images,
        domains=ts.domains,
        parts=tuple(range(ts.m)),
        shape=shape,
        eta=eta,
        sigma=list(ts.init_sigma),
        nu=list(ts.init_nu),
        sigma_fixed=ts.sigma_fixed,
    )


def _run_guarded(fn, trace: list[float]):
    try:
        return fn()
    except ValueError as exc:
        if "diverged" not in str(exc):
            raise
        rounded = [round(v, 6) for v in trace]
        raise ValueError(f"{exc}; objective trace so far: {rounded}") from None


def learn_dictionaries(
    ts: TrainingSet,
    shape: TreeShapeModel,
    settings: Optional[LearnSettings] = None,
) -> DictionaryFit:
    """Align the training crops into low-rank part dictionaries, shape fixed.

    Alternates linearized batch decompositions of every part's stacked crops
    with per-image re-splits of global and part motion (the re-split is
    skipped when the training set declares its global transforms known).
    The returned dictionaries are the unit-normalized crops at the final
    transforms, one column per training image.
    """
    if settings is None:
        settings = LearnSettings()
    if ts.n < 2:
        raise ValueError(f"need at least 2 training images, got {ts.n}")
    if shape.tree.m != ts.m:
        raise ValueError(
            f"shape model covers {shape.tree.m} parts, training set has {ts.m}"
        )
    comp = _make_component(ts, shape, _component_eta(settings.eta_hat, ts.domains))
    lambdas = [settings.lambda_hat / math.sqrt(d.omega) for d in ts.domains]
    trace: list[float] = []
    low_rank, sparse = _run_guarded(
        lambda: _joint_pass(
            [comp],
            lambdas,
            settings,
            linearizations=settings.max_linearizations,
            trace=trace,
        ),
        trace,
    )
    return DictionaryFit(
        dictionaries=_final_dictionaries(comp),
        low_rank=tuple(low_rank[p] for p in range(ts.m)),
        sparse=tuple(sparse[p] for p in range(ts.m)),
        nu=tuple(comp.nu),
        sigma=tuple(comp.sigma),
        objective_trace=tuple(trace),
    )


def _warmup(comps: Sequence[_Component], lambdas, settings: LearnSettings, trace):
    """Unconstrained decomposition passes that diversify the part transforms."""
    if settings.init_iterations == 0:
        return
    saved = [(comp.shape, comp.eta, comp.sigma_fixed) for comp in comps]
    for comp in comps:
        comp.shape = _trivial_shape(len(comp.parts))
        comp.eta = 0.0
        comp.sigma_fixed = True
    warm = replace(settings, alm=replace(settings.alm, outer_tol=1e-12))
    _run_guarded(
        lambda: _joint_pass(
            comps,
            lambdas,
            warm,
            linearizations=settings.init_iterations,
            trace=trace,
        ),
        trace,
    )
    for comp, (shape, eta, fixed) in zip(comps, saved):
        comp.shape, comp.eta, comp.sigma_fixed = shape, eta, fixed


def _nu_stack(comp: _Component) -> np.ndarray:
    return np.stack([nu.as_matrix() for nu in comp.nu])


def _edge_samples(stack: np.ndarray, tree: TreeConfig, part: int) -> np.ndarray:
    parent = tree.parent_of(part)
    ref = 0.0 if parent == 0 else stack[:, :, parent - 1]
    return stack[:, :, part - 1] - ref


def _refit_edges(comp: _Component, priors) -> None:
    stack = _nu_stack(comp)
    edges = []
    for i in range(1, len(comp.parts) + 1):
        samples = _edge_samples(stack, comp.shape.tree, i)
        if priors is None:
            edges.append(ml_estimate(samples))
        else:
            edges.append(map_estimate(samples, priors[i - 1]))
    comp.shape = TreeShapeModel(comp.shape.tree, edges)


def _mean_log_cov_det(shape: TreeShapeModel) -> float:
    return float(np.mean([-edge.log_det_precision for edge in shape.edges]))


def _learn_multi(
    ts_list: Sequence[TrainingSet],
    masks: Sequence[tuple[bool, ...]],
    trees: Sequence[Optional[TreeConfig]],
    vartheta: float,
    settings: LearnSettings,
    history: Optional[dict],
) -> tuple[list[_Component], list[TreeShapeModel]]:
    """Shared engine behind model and mixture learning."""
    if vartheta < 0:
        raise ValueError(f"vartheta must be non-negative, got {vartheta}")
    base = ts_list[0]
    for idx, ts in enumerate(ts_list):
        if ts.n < 2:
            raise ValueError(
                f"component {idx} needs at least 2 training images, got {ts.n}"
            )
        if ts.domains != base.domains:
            raise ValueError("components must share one part table")
    lambdas = [settings.lambda_hat / math.sqrt(d.omega) for d in base.domains]

    comps = []
    for ts, mask in zip(ts_list, masks):
        parts = tuple(i for i, avail in enumerate(mask) if avail)
        domains = tuple(ts.domains[i] for i in parts)
        comps.append(
            _Component(
                images=ts.images,
                domains=domains,
                parts=parts,
                shape=_trivial_shape(len(parts)),
                eta=_component_eta(settings.eta_hat, domains),
                sigma=list(ts.init_sigma),
                nu=[
                    TransformSet(nu[i] for i in parts) for nu in ts.init_nu
                ],
                sigma_fixed=ts.sigma_fixed,
            )
        )

    trace: list[float] = []
    _warmup(comps, lambdas, settings, trace)

    priors_per_comp = []
    for comp, tree in zip(comps, trees):
        stack = _nu_stack(comp)
        spread = float(np.max(np.var(stack, axis=0))) if comp.n else 0.0
        if spread <= 1e-12:
            raise ValueError(
                "degenerate statistics: part transforms are identical across "
                "the training images; enable the warm-up iterations or "
                "diversify the initialization"
            )
        if tree is None:
            if vartheta * comp.n <= DIM:
                raise ValueError(
                    f"tree learning needs prior strength vartheta * n > {DIM}, "
                    f"got {vartheta * comp.n}; pass an explicit tree or raise "
                    "vartheta"
                )
            tree = learn_tree_config(stack, vartheta)
        edges = [
            ml_estimate(_edge_samples(stack, tree, i))
            for i in range(1, len(comp.parts) + 1)
        ]
        comp.shape = TreeShapeModel(tree, edges)
        if vartheta == 0.0:
            # ablation path: plain maximum-likelihood refits, no prior
            priors_per_comp.append(None)
        else:
            priors_per_comp.append(
                [prior_from_gaussian(e, vartheta, comp.n) for e in edges]
            )

    if history is not None:
        history.setdefault("mean_log_cov_det", []).append(
            [_mean_log_cov_det(comp.shape) for comp in comps]
        )

    for _ in range(settings.outer_rounds):
        before_nu = np.concatenate([_nu_stack(c).ravel() for c in comps])
        before_sigma = np.concatenate(
            [s.as_array() for c in comps for s in c.sigma]
        )
        _run_guarded(
            lambda: _joint_pass(
                comps,
                lambdas,
                settings,
                linearizations=settings.linearizations_per_round,
                trace=trace,
            ),
            trace,
        )
        for comp, priors in zip(comps, priors_per_comp):
            _refit_edges(comp, priors)
        if history is not None:
            history["mean_log_cov_det"].append(
                [_mean_log_cov_det(comp.shape) for comp in comps]
            )
        after_nu = np.concatenate([_nu_stack(c).ravel() for c in comps])
        after_sigma = np.concatenate(
            [s.as_array() for c in comps for s in c.sigma]
        )
        change = max(
            float(np.abs(after_nu - before_nu).max()),
            float(np.abs(after_sigma - before_sigma).max()),
        )
        if change <= settings.outer_tol:
            break

    if history is not None:
        history.setdefault("objective", []).extend(trace)
        history["transforms"] = [
            [(comp.sigma[k], comp.nu[k]) for k in range(comp.n)] for comp in comps
        ]
    return comps, [comp.shape for comp in comps]


def learn_model(
    ts: TrainingSet,
    tree: Optional[TreeConfig] = None,
    vartheta: float = 0.25,
    settings: Optional[LearnSettings] = None,
    history: Optional[dict] = None,
) -> CpaModel:
    """Learn part dictionaries jointly with the tree shape model.

    Runs a few unconstrained decomposition passes to diversify the part
    transforms, fits the edge Gaussians and seeds their conjugate priors
    with weight ``vartheta * n``, learns the tree when none is given, then
    alternates constrained dictionary fitting with posterior-mode shape
    refits until the transforms stop moving. With ``vartheta`` zero the
    shape refits fall back to plain maximum likelihood (no prior), which is
    the documented ablation of the collapse guard.

    Pass a dict as ``history`` to receive per-round shape-volume and
    objective traces plus the final per-image transforms.
    """
    if settings is None:
        settings = LearnSettings()
    comps, shapes = _learn_multi(
        [ts], [(True,) * ts.m], [tree], vartheta, settings, history
    )
    comp = comps[0]
    return CpaModel(
        domains=ts.domains,
        dictionaries=_final_dictionaries(comp),
        shape=shapes[0],
        lambda_hat=settings.lambda_hat,
        eta_hat=settings.eta_hat,
        frame=ts.frame,
    )


def learn_mixture(
    ts_list: Sequence[TrainingSet],
    spec: MixtureSpec,
    vartheta: float = 0.25,
    settings: Optional[LearnSettings] = None,
    history: Optional[dict] = None,
) -> MixtureCpaModel:
    """Learn one model per component with pooled per-part decompositions.

    Components share every part's low-rank/sparse split: the crop columns
    of all components possessing the part are decomposed together, so a
    single component never has to carry the part's appearance alone. Each
    component keeps its own images, transforms, tree, and edge Gaussians.
    """
    if settings is None:
        settings = LearnSettings()
    ts_list = list(ts_list)
    if len(ts_list) != spec.c:
        raise ValueError(
            f"expected {spec.c} component training sets, got {len(ts_list)}"
        )
    for idx, ts in enumerate(ts_list):
        if ts.m != spec.m:
            raise ValueError(
                f"component {idx} training set has {ts.m} parts, spec says {spec.m}"
            )
    comps, shapes = _learn_multi(
        ts_list, spec.availability, [None] * spec.c, vartheta, settings, history
    )
    models = []
    for ts, comp, shape in zip(ts_list, comps, shapes):
        models.append(
            CpaModel(
                domains=comp.domains,
                dictionaries=_final_dictionaries(comp),
                shape=shape,
                lambda_hat=settings.lambda_hat,
                eta_hat=settings.eta_hat,
                frame=ts.frame,
            )
        )
    return MixtureCpaModel(components=tuple(models), masks=spec.availability)


def fit_dictionaries_fixed_shape(
    gallery: TrainingSet,
    shape: TreeShapeModel,
    settings: Optional[LearnSettings] = None,
) -> CpaModel:
    """Fit dictionaries for a gallery under an already-learned shape model.

    The shape model is used as-is and never modified; only the gallery's
    part transforms (and, unless fixed, global transforms) are refined.
    """
    if settings is None:
        settings = LearnSettings()
    fit = learn_dictionaries(gallery, shape, settings)
    return CpaModel(
        domains=gallery.domains,
        dictionaries=fit.dictionaries,
        shape=shape,
        lambda_hat=settings.lambda_hat,
        eta_hat=settings.eta_hat,
        frame=gallery.frame,
    )
