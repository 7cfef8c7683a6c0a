"""Tree-structured Gaussian model over part transform parameters.

Parts 1..m hang off a root node 0 that represents the holistic frame. Each
tree edge carries a 4-D Gaussian on the difference between the child and
parent transform parameters; the root contributes a zero parameter vector.
The joint negative log density of a part constellation is ``shape_cost``.

Edge statistics are estimated either by maximum likelihood or as the mode of
a Gaussian-Wishart posterior whose strength is a fraction of the sample
count, which is what keeps repeated re-estimation during learning from
collapsing the variances. Tree topology is selected as the minimum-score
spanning arborescence over all directed part-to-part and root-to-part edges.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import networkx as nx
import numpy as np

from cpalign.geometry import TransformSet

__all__ = [
    "DIM",
    "EdgeGaussian",
    "GaussianWishartPrior",
    "TreeConfig",
    "TreeShapeModel",
    "edge_deltas",
    "edge_score",
    "learn_tree_config",
    "map_estimate",
    "max_likelihood_parts",
    "ml_estimate",
    "prior_from_gaussian",
    "shape_cost",
    "shape_cost_gradient",
]

DIM = 4  # transform parameters per part: (t_u, t_v, s, theta)

NuLike = Union[TransformSet, np.ndarray]


def _check_spd(mat: np.ndarray, what: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (DIM, DIM):
        raise ValueError(f"{what}: expected {DIM}x{DIM}, got {mat.shape}")
    atol = 1e-8 * max(1.0, float(np.abs(mat).max()))
    if not np.allclose(mat, mat.T, rtol=0.0, atol=atol):
        raise ValueError(f"{what}: not symmetric")
    sym = 0.5 * (mat + mat.T)
    try:
        np.linalg.cholesky(sym)
    except np.linalg.LinAlgError:
        raise ValueError(f"{what}: not positive definite") from None
    return sym


@dataclass(eq=False)
class EdgeGaussian:
    """Gaussian on a 4-D parameter difference, stored as mean and precision."""

    mu: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).reshape(DIM)
        self.precision = _check_spd(self.precision, "invalid precision")

    @property
    def log_det_precision(self) -> float:
        sign, logdet = np.linalg.slogdet(self.precision)
        return float(logdet)

    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.precision)


@functools.lru_cache(maxsize=256)
def _tree_structure(parent: tuple[int, ...]):
    m = len(parent)
    children: dict[int, list[int]] = {node: [] for node in range(m + 1)}
    for i, p in enumerate(parent, start=1):
        if not 0 <= p <= m or p == i:
            raise ValueError(f"invalid tree: parent of part {i} is {p}")
        children[p].append(i)
    order: list[int] = []
    stack = list(reversed(children[0]))
    while stack:
        node = stack.pop()
        order.append(node)
        stack.extend(reversed(children[node]))
    if len(order) != m:
        raise ValueError("invalid tree: not every part reaches the root")
    return {k: tuple(v) for k, v in children.items()}, tuple(order)


@dataclass(frozen=True)
class TreeConfig:
    """Part tree encoded as a parent array.

    ``parent[i - 1]`` is the parent node of part i, where node ids run over
    {0..m} with 0 the root. Construction validates that every part reaches
    the root and no cycles exist.
    """

    parent: tuple[int, ...]

    def __post_init__(self):
        parent = tuple(int(p) for p in self.parent)
        object.__setattr__(self, "parent", parent)
        _tree_structure(parent)

    @property
    def m(self) -> int:
        return len(self.parent)

    def parent_of(self, part: int) -> int:
        return self.parent[part - 1]

    def children(self, node: int) -> tuple[int, ...]:
        return _tree_structure(self.parent)[0][node]

    def topological_parts(self) -> tuple[int, ...]:
        """Part ids ordered so that parents precede their children."""
        return _tree_structure(self.parent)[1]


@dataclass(eq=False)
class TreeShapeModel:
    """Tree topology plus one edge Gaussian per part (indexed by part - 1)."""

    tree: TreeConfig
    edges: Sequence[EdgeGaussian]

    def __post_init__(self):
        self.edges = tuple(self.edges)
        if len(self.edges) != self.tree.m:
            raise ValueError(
                f"expected {self.tree.m} edge Gaussians, got {len(self.edges)}"
            )

    @property
    def m(self) -> int:
        return self.tree.m


def _as_nu_matrix(nu: NuLike, m: int | None = None) -> np.ndarray:
    mat = nu.as_matrix() if isinstance(nu, TransformSet) else np.asarray(nu, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != DIM:
        raise ValueError(f"expected a {DIM} x m parameter matrix, got {mat.shape}")
    if m is not None and mat.shape[1] != m:
        raise ValueError(f"expected {m} parts, got {mat.shape[1]}")
    return mat


def edge_deltas(nu: NuLike, tree: TreeConfig) -> np.ndarray:
    """Per-edge parameter differences child - parent, root treated as zero."""
    mat = _as_nu_matrix(nu, tree.m)
    deltas = np.empty_like(mat)
    for i in range(1, tree.m + 1):
        p = tree.parent_of(i)
        ref = 0.0 if p == 0 else mat[:, p - 1]
        deltas[:, i - 1] = mat[:, i - 1] - ref
    return deltas


def shape_cost(nu: NuLike, model: TreeShapeModel) -> float:
    """Joint negative log density of the constellation under the tree model."""
    deltas = edge_deltas(nu, model.tree)
    total = 0.5 * DIM * model.m * math.log(2 * math.pi)
    for i, edge in enumerate(model.edges):
        diff = deltas[:, i] - edge.mu
        total += 0.5 * float(diff @ edge.precision @ diff)
        total -= 0.5 * edge.log_det_precision
    return total


def shape_cost_gradient(nu: NuLike, model: TreeShapeModel) -> np.ndarray:
    """Gradient of shape_cost with respect to each part's parameters (4 x m).

    Each part feels its own edge plus, with opposite sign, the edges of its
    children.
    """
    deltas = edge_deltas(nu, model.tree)
    weighted = np.empty_like(deltas)
    for i, edge in enumerate(model.edges):
        weighted[:, i] = edge.precision @ (deltas[:, i] - edge.mu)
    grad = weighted.copy()
    for i in range(1, model.m + 1):
        for c in model.tree.children(i):
            grad[:, i - 1] -= weighted[:, c - 1]
    return grad


def max_likelihood_parts(model: TreeShapeModel) -> TransformSet:
    """The constellation maximizing the shape density: means accumulated
    root-to-leaf."""
    nu = np.zeros((DIM, model.m))
    for i in model.tree.topological_parts():
        p = model.tree.parent_of(i)
        ref = 0.0 if p == 0 else nu[:, p - 1]
        nu[:, i - 1] = ref + model.edges[i - 1].mu
    return TransformSet.from_matrix(nu)


def ml_estimate(samples: np.ndarray) -> EdgeGaussian:
    """Maximum-likelihood Gaussian fit of difference samples (n x 4).

    The population covariance gets a relative ridge of 1e-6 (absolute floor
    1e-10) before inversion so that degenerate sample sets still produce a
    valid precision.
    """
    samples = np.asarray(samples, dtype=float).reshape(-1, DIM)
    n = samples.shape[0]
    if n < 2:
        raise ValueError(f"insufficient samples: need at least 2, got {n}")
    mu = samples.mean(axis=0)
    diffs = samples - mu
    cov = diffs.T @ diffs / n
    ridge = max(1e-6 * float(np.trace(cov)) / DIM, 1e-10)
    cov = cov + ridge * np.eye(DIM)
    precision = np.linalg.inv(cov)
    return EdgeGaussian(mu, 0.5 * (precision + precision.T))


@dataclass(eq=False)
class GaussianWishartPrior:
    """Conjugate prior over a Gaussian's mean and precision.

    ``v0`` is the Wishart scale matrix: the precision mode of the prior alone
    is (r0 - d) v0.
    """

    u0: np.ndarray
    kappa0: float
    v0: np.ndarray
    r0: float

    def __post_init__(self):
        self.u0 = np.asarray(self.u0, dtype=float).reshape(DIM)
        self.kappa0 = float(self.kappa0)
        self.r0 = float(self.r0)
        if self.kappa0 <= 0:
            raise ValueError(f"kappa0 must be positive, got {self.kappa0}")
        if self.r0 <= DIM - 1:
            raise ValueError(f"r0 must exceed d - 1 = {DIM - 1}, got {self.r0}")
        self.v0 = _check_spd(self.v0, "invalid prior scale")


def prior_from_gaussian(
    g: EdgeGaussian, vartheta: float, n: int
) -> GaussianWishartPrior:
    """Prior centered on an existing Gaussian, worth ``vartheta * n`` samples.

    Seeded so that with zero observations the posterior mode reproduces ``g``
    exactly: u0 = mu, v0 = precision / (r0 - d), r0 = kappa0 = vartheta * n.
    """
    strength = float(vartheta) * int(n)
    # the mode-matching seed divides by (strength - d), so the Wishart bound
    # r0 > d - 1 tightens to strength > d here
    if strength <= DIM:
        raise ValueError(
            f"prior strength too small for d={DIM}: vartheta * n = {strength:g}"
            f" <= {DIM}"
        )
    v0 = g.precision / (strength - DIM)
    return GaussianWishartPrior(u0=g.mu.copy(), kappa0=strength, v0=v0, r0=strength)


def map_estimate(samples: np.ndarray, prior: GaussianWishartPrior) -> EdgeGaussian:
    """Posterior-mode Gaussian given difference samples and the prior.

    Closed form: the scale update adds the sample scatter and a mean-shift
    term to the inverted prior scale; the precision mode is
    (r0 + n - d) times the posterior scale.
    """
    samples = np.asarray(samples, dtype=float).reshape(-1, DIM)
    n = samples.shape[0]
    if n == 0:
        return EdgeGaussian(prior.u0.copy(), (prior.r0 - DIM) * prior.v0)
    mu_ml = samples.mean(axis=0)
    diffs = samples - mu_ml
    scatter = diffs.T @ diffs
    u_n = (prior.kappa0 * prior.u0 + n * mu_ml) / (prior.kappa0 + n)
    shift = mu_ml - prior.u0
    vn_inv = (
        np.linalg.inv(prior.v0)
        + scatter
        + (prior.kappa0 * n / (prior.kappa0 + n)) * np.outer(shift, shift)
    )
    v_n = np.linalg.inv(vn_inv)
    lam = (prior.r0 + n - DIM) * v_n
    return EdgeGaussian(u_n, 0.5 * (lam + lam.T))


def edge_score(deltas: np.ndarray, vartheta: float) -> float:
    """Negative log posterior of one candidate edge at its MAP parameters.

    The prior is seeded from the edge's own ML fit with strength vartheta * n.
    All terms depending on the fitted mean and precision are included; the
    Wishart normalizer, constant in them, is dropped.
    """
    deltas = np.asarray(deltas, dtype=float).reshape(-1, DIM)
    n = deltas.shape[0]
    prior = prior_from_gaussian(ml_estimate(deltas), vartheta, n)
    post = map_estimate(deltas, prior)
    diffs = deltas - post.mu
    logdet = post.log_det_precision
    # data likelihood
    score = n * (0.5 * DIM * math.log(2 * math.pi) - 0.5 * logdet)
    score += 0.5 * float(np.einsum("nd,de,ne->", diffs, post.precision, diffs))
    # Gaussian part of the prior on the mean
    shift = post.mu - prior.u0
    score += 0.5 * DIM * math.log(2 * math.pi) - 0.5 * DIM * math.log(prior.kappa0)
    score -= 0.5 * logdet
    score += 0.5 * prior.kappa0 * float(shift @ post.precision @ shift)
    # Wishart part on the precision, sans its normalizer
    score -= 0.5 * (prior.r0 - DIM - 1) * logdet
    score += 0.5 * float(np.trace(np.linalg.solve(prior.v0, post.precision)))
    return float(score)


def _as_sample_stack(nu_samples) -> np.ndarray:
    if isinstance(nu_samples, np.ndarray):
        stack = np.asarray(nu_samples, dtype=float)
    else:
        stack = np.stack([_as_nu_matrix(nu) for nu in nu_samples])
    if stack.ndim != 3 or stack.shape[1] != DIM:
        raise ValueError(
            f"expected samples shaped (n, {DIM}, m), got {stack.shape}"
        )
    return stack


def learn_tree_config(
    nu_samples: Union[np.ndarray, Iterable[TransformSet]], vartheta: float
) -> TreeConfig:
    """Select the tree by minimum spanning arborescence over edge scores.

    Candidate edges run from every node (root or part) into every part; each
    is scored on the difference samples it would model. Edmonds' algorithm
    over the complete candidate graph returns the minimizing tree, which is
    always rooted at node 0 since no edge enters it.
    """
    stack = _as_sample_stack(nu_samples)
    n, _, m = stack.shape
    if n < 2:
        raise ValueError(f"insufficient samples: need at least 2, got {n}")
    if m < 1:
        raise ValueError("at least one part is required")
    if m == 1:
        return TreeConfig((0,))
    graph = nx.DiGraph()
    graph.add_nodes_from(range(m + 1))
    for i in range(1, m + 1):
        for j in range(m + 1):
            if j == i:
                continue
            ref = 0.0 if j == 0 else stack[:, :, j - 1]
            deltas = stack[:, :, i - 1] - ref
            graph.add_edge(j, i, weight=edge_score(deltas, vartheta))
    arb = nx.minimum_spanning_arborescence(graph, attr="weight")
    parent = tuple(next(iter(arb.predecessors(i))) for i in range(1, m + 1))
    return TreeConfig(parent)
