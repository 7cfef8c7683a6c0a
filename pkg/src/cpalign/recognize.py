"""Part-voting recognition over a gallery of per-subject dictionaries.

A probe is aligned against every subject independently, subjects are
pruned by per-part residual rankings, and each surviving subject competes
part by part: probe and dictionaries are resampled to the pruned set's
mean part placement, a per-part classifier picks a label, and a plurality
vote with a residual tie-break decides the identity.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from cpalign.align import AlignmentResult, CpaModel, align
from cpalign.geometry import SimTransform, apply_transform, compose, invert
from cpalign.imgproc import (
    PartDomain,
    normalize_intensity,
    sample_bilinear,
    warp_part,
)
from cpalign.shapemodel import TreeShapeModel
from cpalign.solver import AlmSettings

__all__ = [
    "GalleryModel",
    "PruneResult",
    "RecognitionReport",
    "classify_part",
    "prune",
    "recognize",
    "subject_align",
    "vote",
]

CLASSIFIERS = ("ns", "src-lite")

# ridge weight for the joint least squares of "src-lite"; dictionary columns
# are unit vectors, so the Gram diagonal is 1 and this is a relative floor
_RIDGE = 1e-6


@dataclass(eq=False)
class GalleryModel:
    """Per-subject part dictionaries under one shared shape model.

    ``dictionaries[s][i]`` holds subject ``s``'s matrix for part ``i``;
    every subject shares the part table, the tree shape model, and the
    objective weights, so each subject is exactly one alignment model.
    """

    domains: tuple[PartDomain, ...]
    shape: TreeShapeModel
    labels: tuple[str, ...]
    dictionaries: tuple[tuple[np.ndarray, ...], ...]
    lambda_hat: float = 1.0
    eta_hat: float = 0.02
    frame: tuple[int, int] = (60, 80)

    def __post_init__(self):
        self.domains = tuple(self.domains)
        self.labels = tuple(str(lab) for lab in self.labels)
        self.dictionaries = tuple(tuple(mats) for mats in self.dictionaries)
        if not self.labels:
            raise ValueError("gallery needs at least one subject")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("subject labels must be unique")
        if len(self.dictionaries) != len(self.labels):
            raise ValueError(
                f"{len(self.labels)} labels but {len(self.dictionaries)} "
                "dictionary sets"
            )
        # building the per-subject models validates dictionary shapes too
        self._models = tuple(
            CpaModel(
                domains=self.domains,
                dictionaries=mats,
                shape=self.shape,
                lambda_hat=self.lambda_hat,
                eta_hat=self.eta_hat,
                frame=self.frame,
            )
            for mats in self.dictionaries
        )

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def m(self) -> int:
        return len(self.domains)

    def subject_model(self, label: str) -> CpaModel:
        """The single-subject alignment model for ``label``."""
        return self._models[self.index_of(label)]

    def index_of(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ValueError(f"unknown subject {label!r}") from None

    @classmethod
    def from_models(
        cls, items: Sequence[tuple[str, CpaModel]]
    ) -> "GalleryModel":
        """Assemble a gallery from labeled single-subject models.

        All models must share the part table, the frame, the shape model
        values, and the objective weights.
        """
        items = list(items)
        if not items:
            raise ValueError("gallery needs at least one subject")
        _, first = items[0]
        for label, model in items[1:]:
            same = (
                model.domains == first.domains
                and model.frame == first.frame
                and model.lambda_hat == first.lambda_hat
                and model.eta_hat == first.eta_hat
                and model.shape.tree.parent == first.shape.tree.parent
                and all(
                    np.array_equal(a.mu, b.mu)
                    and np.array_equal(a.precision, b.precision)
                    for a, b in zip(model.shape.edges, first.shape.edges)
                )
            )
            if not same:
                raise ValueError(
                    f"subject {label!r} does not share the gallery's part "
                    "table, frame, weights, and shape model"
                )
        return cls(
            domains=first.domains,
            shape=first.shape,
            labels=tuple(label for label, _ in items),
            dictionaries=tuple(model.dictionaries for _, model in items),
            lambda_hat=first.lambda_hat,
            eta_hat=first.eta_hat,
            frame=first.frame,
        )


@dataclass(eq=False)
class PruneResult:
    """Per-part residual rankings and the chosen union depth.

    ``orders[i]`` lists subject indices by ascending part-``i`` residual;
    ``depth_sets[j-1]`` is the union of every part's ``j`` best subjects;
    ``depth`` is the smallest ``j`` whose union reaches the target size
    (the subject count when the target is never reached). ``pruned`` is
    the surviving index set, ascending.
    """

    orders: tuple[tuple[int, ...], ...]
    depth_sets: tuple[tuple[int, ...], ...]
    depth: int
    pruned: tuple[int, ...]


@dataclass(eq=False)
class RecognitionReport:
    """Identity decision plus the evidence that produced it."""

    identity: str
    per_part_votes: tuple[str, ...]
    per_subject_residuals: np.ndarray
    labels: tuple[str, ...]
    pruned_set: tuple[str, ...]
    depth: int
    converged: tuple[bool, ...]
    method: str
    prune_target: int
    timings: dict[str, float]

    def as_json_dict(self) -> dict:
        """Plain-types view of the report for JSON serialization."""
        return {
            "identity": self.identity,
            "per_part_votes": list(self.per_part_votes),
            "per_subject_residuals": self.per_subject_residuals.tolist(),
            "labels": list(self.labels),
            "pruned_set": list(self.pruned_set),
            "depth": self.depth,
            "converged": list(self.converged),
            "method": self.method,
            "prune_target": self.prune_target,
            "timings": {k: float(v) for k, v in self.timings.items()},
        }


def subject_align(
    y: np.ndarray,
    gallery: GalleryModel,
    subject: str,
    settings: Optional[AlmSettings] = None,
    *,
    box: Optional[Sequence[float]] = None,
    landmarks: Optional[np.ndarray] = None,
    alternations: int = 10,
) -> AlignmentResult:
    """Align the probe against one subject's dictionaries."""
    return align(
        y,
        gallery.subject_model(subject),
        box=box,
        landmarks=landmarks,
        settings=settings,
        alternations=alternations,
    )


def prune(residuals: np.ndarray, target: int) -> PruneResult:
    """Survivor set from per-part residual rankings.

    Subjects are sorted per part by ascending residual; the depth-``j``
    set is the union of every part's ``j`` best. The chosen depth is the
    smallest one whose set reaches ``target`` subjects, so the survivor
    count never exceeds ``target`` by more than the final union step.
    """
    r = np.asarray(residuals, dtype=float)
    if r.ndim != 2 or r.shape[0] < 1 or r.shape[1] < 1:
        raise ValueError(f"residuals must be (subjects, parts), got {r.shape}")
    if target < 1:
        raise ValueError(f"target must be at least 1, got {target}")
    n = r.shape[0]
    orders = tuple(
        tuple(int(s) for s in np.argsort(r[:, i], kind="stable"))
        for i in range(r.shape[1])
    )
    depth_sets = []
    depth = n
    for j in range(1, n + 1):
        members = set()
        for order in orders:
            members.update(order[:j])
        depth_sets.append(tuple(sorted(members)))
        if len(members) >= target:
            depth = j
            break
    return PruneResult(
        orders=orders,
        depth_sets=tuple(depth_sets),
        depth=depth,
        pruned=depth_sets[-1],
    )


def _class_residuals(
    probe: np.ndarray,
    entries: Sequence[tuple[str, np.ndarray]],
    method: str,
) -> list[tuple[str, float]]:
    if not entries:
        raise ValueError("need at least one candidate dictionary")
    if method == "ns":
        out = []
        for label, mat in entries:
            coeff, *_ = np.linalg.lstsq(mat, probe, rcond=None)
            out.append((label, float(np.linalg.norm(probe - mat @ coeff))))
        return out
    if method == "src-lite":
        joint = np.hstack([mat for _, mat in entries])
        gram = joint.T @ joint + _RIDGE * np.eye(joint.shape[1])
        coeff = np.linalg.solve(gram, joint.T @ probe)
        out = []
        start = 0
        for label, mat in entries:
            stop = start + mat.shape[1]
            recon = mat @ coeff[start:stop]
            out.append((label, float(np.linalg.norm(probe - recon))))
            start = stop
        return out
    raise ValueError(f"unknown method {method!r}; expected one of {CLASSIFIERS}")


def classify_part(
    probe_part: np.ndarray,
    pruned: Sequence[tuple[str, np.ndarray]],
    method: str = "ns",
) -> str:
    """Label of the candidate whose dictionary reconstructs the part best.

    ``pruned`` pairs each surviving subject's label with its part
    dictionary, already resampled to the probe part's placement. "ns"
    scores each subject by its own least-squares residual; "src-lite"
    solves one ridge least squares over the concatenated dictionaries and
    scores each subject by its class-restricted reconstruction.
    """
    scores = _class_residuals(np.asarray(probe_part, dtype=float), pruned, method)
    return min(scores, key=lambda pair: pair[1])[0]


def vote(
    labels: Sequence[str], residuals: Optional[Sequence[float]] = None
) -> str:
    """Most frequent label; ties break by summed residual, then first seen."""
    labels = list(labels)
    if not labels:
        raise ValueError("need at least one part vote")
    if residuals is None:
        residuals = [0.0] * len(labels)
    if len(residuals) != len(labels):
        raise ValueError(
            f"{len(labels)} labels but {len(residuals)} residuals"
        )
    counts: dict[str, int] = {}
    sums: dict[str, float] = {}
    first: dict[str, int] = {}
    for idx, (label, res) in enumerate(zip(labels, residuals)):
        counts[label] = counts.get(label, 0) + 1
        sums[label] = sums.get(label, 0.0) + float(res)
        first.setdefault(label, idx)
    return min(
        counts, key=lambda lab: (-counts[lab], sums[lab], first[lab])
    )


def _resample_columns(
    mat: np.ndarray, dom: PartDomain, transform: SimTransform
) -> np.ndarray:
    """Resample dictionary columns at the transformed window points."""
    grid = dom.grid()
    local = apply_transform(transform, grid) - grid[0]
    cols = [
        normalize_intensity(
            sample_bilinear(col.reshape(dom.height, dom.width), local)
        )
        for col in mat.T
    ]
    return np.stack(cols, axis=1)


def _mean_transform(transforms: Sequence[SimTransform]) -> SimTransform:
    params = np.mean([t.as_array() for t in transforms], axis=0)
    return SimTransform(*(float(v) for v in params))


def recognize(
    y: np.ndarray,
    gallery: GalleryModel,
    prune_target: int = 20,
    method: str = "ns",
    settings: Optional[AlmSettings] = None,
    *,
    box: Optional[Sequence[float]] = None,
    landmarks: Optional[np.ndarray] = None,
    alternations: int = 10,
    threads: Optional[int] = None,
) -> RecognitionReport:
    """Identify the probe: align per subject, prune, classify parts, vote.

    After pruning, each part's surviving placements are averaged; the
    probe part is cropped at that mean placement and every survivor's
    dictionary is resampled from its own fitted placement onto the mean
    one, so classification compares intensities over a single window.
    ``threads`` caps the worker pool for the per-subject alignments, which
    are independent; the default runs them serially.
    """
    if method not in CLASSIFIERS:
        raise ValueError(f"unknown method {method!r}; expected one of {CLASSIFIERS}")
    y = np.asarray(y, dtype=float)
    started = time.perf_counter()

    def run(label: str) -> AlignmentResult:
        return subject_align(
            y,
            gallery,
            label,
            settings,
            box=box,
            landmarks=landmarks,
            alternations=alternations,
        )

    if threads is not None and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, gallery.labels))
    else:
        results = [run(label) for label in gallery.labels]
    aligned_at = time.perf_counter()

    residuals = np.array([res.residual_l1 for res in results])
    pruning = prune(residuals, prune_target)
    zetas = [res.combined() for res in results]

    votes, vote_residuals = [], []
    for i, dom in enumerate(gallery.domains):
        mean = _mean_transform([zetas[s][i] for s in pruning.pruned])
        probe_part = normalize_intensity(warp_part(y, mean, dom))
        entries = [
            (
                gallery.labels[s],
                _resample_columns(
                    gallery.dictionaries[s][i],
                    dom,
                    compose(invert(zetas[s][i]), mean),
                ),
            )
            for s in pruning.pruned
        ]
        scores = _class_residuals(probe_part, entries, method)
        label, residual = min(scores, key=lambda pair: pair[1])
        votes.append(label)
        vote_residuals.append(residual)
    identity = vote(votes, vote_residuals)
    finished = time.perf_counter()

    return RecognitionReport(
        identity=identity,
        per_part_votes=tuple(votes),
        per_subject_residuals=residuals,
        labels=gallery.labels,
        pruned_set=tuple(gallery.labels[s] for s in pruning.pruned),
        depth=pruning.depth,
        converged=tuple(res.converged for res in results),
        method=method,
        prune_target=prune_target,
        timings={
            "align_s": aligned_at - started,
            "classify_s": finished - aligned_at,
            "total_s": finished - started,
        },
    )
