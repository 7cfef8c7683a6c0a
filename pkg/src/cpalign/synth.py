"""Synthetic constellations for exercising the full pipeline.

Each subject is a smooth random appearance field over the canonical frame,
rendered under per-image global similarity perturbations, per-part
translation jitter, positive mixtures of illumination fields, and optional
square occlusion blocks. Because every image is rendered from known
transforms, alignment and recognition results can be scored against exact
ground truth without any external data.

Per subject, every image is the base field times a mixture of at most
``illum_modes`` fixed illumination fields, so each part's stacked crops
form a matrix of rank at most ``illum_modes`` before perturbation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter, shift as ndshift

from cpalign.align import CpaModel
from cpalign.geometry import (
    SimTransform,
    TransformSet,
    apply_transform,
    compose,
    invert,
)
from cpalign.imgproc import PartDomain, normalize_intensity, sample_bilinear, write_pgm
from cpalign.learn import TrainingSet
from cpalign.shapemodel import EdgeGaussian, TreeConfig, TreeShapeModel

__all__ = [
    "ProbeSample",
    "RecoveryMetrics",
    "SynthData",
    "SynthScenario",
    "batch_recovery_rms",
    "generate",
    "grid_constellation",
    "render_instance",
    "score_recovery",
    "subject_model",
    "write_scenario",
]

# dilation around a flat part's window so crops stay constant under the
# scenario's perturbations
_FLAT_MARGIN = 6.0

# the canonical appearance lives on a lattice this many times finer than the
# frame, so rendered images and dictionary crops discretize the same
# continuous field instead of compounding interpolation error
_SCALE = 2


def grid_constellation(
    m: int,
    *,
    frame: tuple[int, int] = (60, 80),
    part_width: int = 24,
    part_height: int = 16,
) -> tuple[PartDomain, ...]:
    """Pack ``m`` equal windows into the frame on a uniform grid.

    Windows fill row-major with equal gaps; raises when they cannot fit.
    """
    fw, fh = frame
    if m < 1:
        raise ValueError(f"need at least one part, got {m}")
    cols = min(m, fw // part_width)
    if cols < 1:
        raise ValueError(f"part width {part_width} exceeds frame width {fw}")
    rows = math.ceil(m / cols)
    if rows * part_height > fh:
        raise ValueError(
            f"{m} windows of {part_width}x{part_height} do not fit in {fw}x{fh}"
        )
    gap_u = (fw - cols * part_width) / (cols + 1)
    gap_v = (fh - rows * part_height) / (rows + 1)
    domains = []
    for i in range(m):
        r, c = divmod(i, cols)
        cu = gap_u * (c + 1) + part_width * c + (part_width - 1) / 2
        cv = gap_v * (r + 1) + part_height * r + (part_height - 1) / 2
        domains.append(
            PartDomain(cu, cv, part_width, part_height, name=f"part{i + 1}")
        )
    return tuple(domains)


def _bounds(dom: PartDomain) -> tuple[float, float, float, float]:
    x, y, w, h = dom.box()
    return x, y, x + w, y + h


def _boxes_overlap(a: PartDomain, b: PartDomain) -> bool:
    au0, av0, au1, av1 = _bounds(a)
    bu0, bv0, bu1, bv1 = _bounds(b)
    return au0 < bu1 and bu0 < au1 and av0 < bv1 and bv0 < av1


@dataclass(frozen=True)
class SynthScenario:
    """Full description of a reproducible synthetic experiment.

    ``translation_range`` / ``rotation_range`` / ``log_scale_range`` bound
    the per-image global perturbation (uniform draws), ``part_jitter`` the
    per-part translation jitter. The last ``flat_parts`` parts are painted
    textureless in every image, so nothing but the shape term can place
    them. A positive ``decoy_strength`` blends into every remaining part a
    faint replica of its own texture displaced by ``decoy_shift`` pixels in
    a part-specific direction; the replicas create look-alike alignment
    optima that are mutually inconsistent across parts. Training images
    and probes are perturbed; gallery images are clean canonical renders
    of each illumination mode.
    """

    seed: int = 0
    subjects: int = 1
    illum_modes: int = 1
    images_per_subject: Optional[int] = None
    probes_per_subject: int = 0
    translation_range: float = 0.0
    rotation_range: float = 0.0
    log_scale_range: float = 0.0
    part_jitter: float = 0.0
    occlusion_ratio: float = 0.0
    flat_parts: int = 0
    decoy_strength: float = 0.0
    decoy_shift: float = 2.5
    constellation: tuple[PartDomain, ...] = field(
        default_factory=lambda: grid_constellation(8)
    )
    frame: tuple[int, int] = (60, 80)

    def __post_init__(self):
        object.__setattr__(self, "constellation", tuple(self.constellation))
        object.__setattr__(
            self, "frame", (int(self.frame[0]), int(self.frame[1]))
        )
        if self.subjects < 1 or self.illum_modes < 1:
            raise ValueError("need at least one subject and one illumination mode")
        if self.images_per_subject is not None and (
            self.images_per_subject < self.illum_modes
        ):
            raise ValueError(
                "images_per_subject cannot be below illum_modes: "
                f"{self.images_per_subject} < {self.illum_modes}"
            )
        if self.probes_per_subject < 0:
            raise ValueError("probes_per_subject must be non-negative")
        for name in ("translation_range", "rotation_range", "log_scale_range", "part_jitter", "decoy_shift"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.decoy_strength < 1.0:
            raise ValueError(
                f"decoy_strength must be in [0, 1), got {self.decoy_strength}"
            )
        if not 0.0 <= self.occlusion_ratio <= 0.6:
            raise ValueError(
                f"occlusion_ratio must be in [0, 0.6], got {self.occlusion_ratio}"
            )
        if not self.constellation:
            raise ValueError("constellation needs at least one part")
        if not 0 <= self.flat_parts <= len(self.constellation):
            raise ValueError(
                f"flat_parts must be in [0, {len(self.constellation)}], "
                f"got {self.flat_parts}"
            )
        for a in range(len(self.constellation)):
            for b in range(a + 1, len(self.constellation)):
                if _boxes_overlap(self.constellation[a], self.constellation[b]):
                    raise ValueError(
                        f"part windows {a + 1} and {b + 1} overlap"
                    )

    @property
    def m(self) -> int:
        return len(self.constellation)

    @property
    def n_training(self) -> int:
        per = self.images_per_subject or self.illum_modes
        return per * self.subjects


@dataclass(eq=False)
class ProbeSample:
    """A rendered probe with its generating transforms."""

    image: np.ndarray
    subject: int
    sigma: SimTransform
    nu: TransformSet
    occluded: bool


@dataclass(eq=False)
class SynthData:
    """Everything ``generate`` produces for one scenario."""

    scenario: SynthScenario
    training: TrainingSet
    training_truth: tuple[TransformSet, ...]
    training_subject: tuple[int, ...]
    gallery: tuple[tuple[np.ndarray, ...], ...]
    probes: tuple[ProbeSample, ...]


@dataclass(frozen=True)
class RecoveryMetrics:
    """Gauge-fixed parameter errors between two sets of part warps."""

    translation_rms: float
    rotation_rms: float
    scale_rms: float


def _smooth_field(rng: np.random.Generator, frame, smooth: float) -> np.ndarray:
    # built on the fine lattice; ``smooth`` is measured in frame pixels
    fw, fh = frame
    img = gaussian_filter(
        rng.normal(size=(fh * _SCALE, fw * _SCALE)), smooth * _SCALE
    )
    img -= img.min()
    peak = img.max()
    if peak > 0:
        img /= peak
    return img


def _fine_region(dom: PartDomain, margin: float, frame) -> tuple[slice, slice]:
    """Index slices on the fine lattice covering a dilated part window."""
    fw, fh = frame
    u0, v0, u1, v1 = _bounds(dom)
    lo_u = max(int(math.floor((u0 - margin) * _SCALE)), 0)
    lo_v = max(int(math.floor((v0 - margin) * _SCALE)), 0)
    hi_u = min(int(math.ceil((u1 + margin) * _SCALE)) + 1, fw * _SCALE)
    hi_v = min(int(math.ceil((v1 + margin) * _SCALE)) + 1, fh * _SCALE)
    return np.s_[lo_v:hi_v], np.s_[lo_u:hi_u]


def _subject_appearance(rng, scenario) -> tuple[np.ndarray, list[np.ndarray]]:
    """Base field plus unit-mean illumination fields on the fine lattice."""
    fw, fh = scenario.frame
    # coarse structure for a wide attraction basin, fine detail for a sharp
    # optimum
    coarse = _smooth_field(rng, scenario.frame, 2.0)
    detail = _smooth_field(rng, scenario.frame, 0.8)
    base = 0.15 + 0.7 * (0.65 * coarse + 0.35 * detail)
    # equalize contrast inside each window so no part is left with a
    # shallow, trap-prone matching valley
    for i in range(scenario.m - scenario.flat_parts):
        region = _fine_region(scenario.constellation[i], 3.0, scenario.frame)
        patch = base[region]
        spread = float(patch.std())
        if spread > 1e-9:
            center = float(patch.mean())
            base[region] = np.clip(
                center + (patch - center) * (0.16 / spread), 0.02, 0.98
            )
    fields = [np.ones((fh * _SCALE, fw * _SCALE))]
    for _ in range(scenario.illum_modes - 1):
        tilt = _smooth_field(rng, scenario.frame, 8.0)
        fields.append(1.0 + 0.3 * (2.0 * tilt - 1.0))
    gamma = scenario.decoy_strength
    if gamma > 0:
        clean = base.copy()
        reach = _FLAT_MARGIN + scenario.decoy_shift
        for i in range(scenario.m - scenario.flat_parts):
            angle = rng.uniform(0.0, 2.0 * math.pi)
            du = scenario.decoy_shift * math.cos(angle) * _SCALE
            dv = scenario.decoy_shift * math.sin(angle) * _SCALE
            replica = ndshift(clean, (dv, du), order=1, mode="nearest")
            region = _fine_region(scenario.constellation[i], reach, scenario.frame)
            base[region] = (1 - gamma) * clean[region] + gamma * replica[region]
    for i in range(scenario.m - scenario.flat_parts, scenario.m):
        region = _fine_region(
            scenario.constellation[i], _FLAT_MARGIN, scenario.frame
        )
        base[region] = 0.55
        for f in fields:
            f[region] = 1.0
    return base, fields


def render_instance(
    appearance: np.ndarray,
    domains: Sequence[PartDomain],
    sigma: SimTransform,
    nu: TransformSet,
    frame: tuple[int, int],
    *,
    margin: float = 1.25,
) -> np.ndarray:
    """Render an appearance field under global and per-part motion.

    ``appearance`` lives on the fine lattice (``_SCALE`` samples per frame
    pixel). The background is the appearance pulled back through the
    global transform; inside each part's transformed window the appearance
    is pulled back through that part's combined transform instead, so
    crops taken at the generating transforms reproduce the canonical
    appearance. Each painted region is dilated by ``margin`` pixels so
    that crops taken near the generating transforms never straddle the
    part seam.
    """
    fw, fh = frame
    vg, ug = np.mgrid[0:fh, 0:fw].astype(float)
    pts = np.stack([ug.ravel(), vg.ravel()], axis=1)
    img = sample_bilinear(appearance, apply_transform(invert(sigma), pts) * _SCALE)
    for dom, part in zip(domains, nu):
        back = apply_transform(invert(compose(sigma, part)), pts)
        u0, v0, u1, v1 = _bounds(dom)
        inside = (
            (back[:, 0] >= u0 - margin)
            & (back[:, 0] <= u1 + margin)
            & (back[:, 1] >= v0 - margin)
            & (back[:, 1] <= v1 + margin)
        )
        img[inside] = sample_bilinear(appearance, back[inside] * _SCALE)
    return img.reshape(fh, fw)


def _draw_sigma(rng, scenario) -> SimTransform:
    # translation_range bounds the shift magnitude, so draw inside the disc;
    # rotation and scale pivot about the frame center so their ranges bound
    # part displacement instead of sweeping points far from the origin
    t = scenario.translation_range
    r = scenario.rotation_range
    s = scenario.log_scale_range
    while True:
        tu, tv = rng.uniform(-t, t, size=2)
        if math.hypot(tu, tv) <= t:
            break
    log_scale = float(rng.uniform(-s, s))
    theta = float(rng.uniform(-r, r))
    fw, fh = scenario.frame
    cu, cv = (fw - 1) / 2.0, (fh - 1) / 2.0
    growth = math.exp(log_scale)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    return SimTransform(
        float(cu + tu - growth * (cos_t * cu - sin_t * cv)),
        float(cv + tv - growth * (sin_t * cu + cos_t * cv)),
        log_scale,
        theta,
    )


def _draw_jitter(rng, scenario) -> TransformSet:
    # flat parts carry no jitter: their motion is unobservable, so the
    # canonical placement is the only meaningful truth for them
    j = scenario.part_jitter
    textured = scenario.m - scenario.flat_parts
    draws = rng.uniform(-j, j, size=(scenario.m, 2))
    draws[textured:] = 0.0
    if textured > 1:
        # center the textured jitters: a common component is global motion
        # by definition and belongs to the holistic transform
        draws[:textured] -= draws[:textured].mean(axis=0)
    out = [
        SimTransform(float(du), float(dv), 0.0, 0.0) for du, dv in draws
    ]
    return TransformSet(out)


def _occlude(rng, img: np.ndarray, ratio: float) -> np.ndarray:
    # draws are consumed even at ratio 0 so that scenarios differing only in
    # occlusion_ratio stay draw-for-draw comparable
    fh, fw = img.shape
    side = int(round(math.sqrt(ratio * fw * fh)))
    side = min(side, fw, fh)
    left = int(rng.integers(0, fw - side + 1))
    top = int(rng.integers(0, fh - side + 1))
    value = float(rng.uniform(0.0, 1.0))
    if side == 0:
        return img
    out = img.copy()
    out[top : top + side, left : left + side] = value
    return out


def generate(scenario: SynthScenario) -> SynthData:
    """Materialize a scenario: training set, clean gallery, probes.

    Deterministic for a fixed scenario: one generator seeded by
    ``scenario.seed`` drives every draw in a fixed order. Training images
    carry per-image global perturbations and part jitter with their truth
    recorded separately; the training set's own starting transforms assume
    the parts sit at their canonical spots, global motion known. Probes
    additionally mix illumination modes and may carry one occlusion block.
    """
    rng = np.random.default_rng(scenario.seed)
    domains = scenario.constellation
    per_subject = scenario.images_per_subject or scenario.illum_modes

    appearances = []
    for _ in range(scenario.subjects):
        appearances.append(_subject_appearance(rng, scenario))

    train_images, init_sigmas, truth, subject_of = [], [], [], []
    for s in range(scenario.subjects):
        base, fields = appearances[s]
        for j in range(per_subject):
            if j < scenario.illum_modes:
                appearance = base * fields[j]
            else:
                weights = rng.uniform(0.4, 1.0, size=scenario.illum_modes)
                mix = sum(w * f for w, f in zip(weights, fields))
                appearance = base * (mix / weights.sum())
            gain = float(rng.uniform(0.6, 1.0))
            sigma = _draw_sigma(rng, scenario)
            jitter = _draw_jitter(rng, scenario)
            train_images.append(
                gain * render_instance(appearance, domains, sigma, jitter, scenario.frame)
            )
            init_sigmas.append(sigma)
            truth.append(jitter)
            subject_of.append(s)

    # clean canonical renders: fine-lattice values at whole-pixel positions
    gallery = tuple(
        tuple(
            (appearances[s][0] * appearances[s][1][j])[::_SCALE, ::_SCALE]
            for j in range(scenario.illum_modes)
        )
        for s in range(scenario.subjects)
    )

    probes = []
    for s in range(scenario.subjects):
        base, fields = appearances[s]
        for _ in range(scenario.probes_per_subject):
            weights = rng.uniform(0.4, 1.0, size=scenario.illum_modes)
            mix = sum(w * f for w, f in zip(weights, fields))
            appearance = base * (mix / weights.sum())
            sigma = _draw_sigma(rng, scenario)
            jitter = _draw_jitter(rng, scenario)
            img = render_instance(appearance, domains, sigma, jitter, scenario.frame)
            img = _occlude(rng, img, scenario.occlusion_ratio)
            probes.append(
                ProbeSample(
                    image=img,
                    subject=s,
                    sigma=sigma,
                    nu=jitter,
                    occluded=scenario.occlusion_ratio > 0,
                )
            )

    m = scenario.m
    ts = TrainingSet(
        images=tuple(train_images),
        domains=domains,
        init_sigma=tuple(init_sigmas),
        init_nu=tuple(TransformSet.identity(m) for _ in train_images),
        sigma_fixed=True,
        frame=scenario.frame,
    )
    return SynthData(
        scenario=scenario,
        training=ts,
        training_truth=tuple(truth),
        training_subject=tuple(subject_of),
        gallery=gallery,
        probes=tuple(probes),
    )


def subject_model(
    data: SynthData,
    subject: int,
    *,
    shape: Optional[TreeShapeModel] = None,
    lambda_hat: float = 1.0,
    eta_hat: float = 0.02,
    column_blur: float = 0.41,
) -> CpaModel:
    """Alignment model for one subject from its clean gallery crops.

    With no shape model given, a default star tree is built whose edge
    variances match the scenario's jitter ranges (floored to stay valid)
    and pin rotation and scale tightly. ``column_blur`` smooths the
    dictionary columns to match the average interpolation blur a probe
    crop picks up when it is resampled at fractional positions; pass 0 to
    keep the crops exact (for span-membership oracles against canonical
    probes).
    """
    scenario = data.scenario
    domains = scenario.constellation
    dictionaries = []
    for dom in domains:
        cols = []
        for img in data.gallery[subject]:
            crop = sample_bilinear(img, dom.grid()).reshape(dom.height, dom.width)
            if column_blur > 0:
                crop = gaussian_filter(crop, column_blur)
            cols.append(normalize_intensity(crop.ravel()))
        dictionaries.append(np.stack(cols, axis=1))
    if shape is None:
        jitter_var = max(scenario.part_jitter**2, 0.25)
        cov = np.diag([jitter_var, jitter_var, 1e-4, 1e-4])
        shape = TreeShapeModel(
            TreeConfig((0,) * scenario.m),
            [
                EdgeGaussian(np.zeros(4), np.linalg.inv(cov))
                for _ in range(scenario.m)
            ],
        )
    return CpaModel(
        domains=domains,
        dictionaries=tuple(dictionaries),
        shape=shape,
        lambda_hat=lambda_hat,
        eta_hat=eta_hat,
        frame=scenario.frame,
    )


def _combined(sigma: SimTransform, nu: TransformSet) -> list[SimTransform]:
    return [compose(sigma, t) for t in nu]


def score_recovery(result, truth) -> RecoveryMetrics:
    """Parameter errors between estimated and true part warps, gauge-fixed.

    Both arguments provide ``sigma`` and ``nu`` attributes (an alignment
    result, a probe sample) or are (sigma, nu) pairs. Since only the
    combined per-part warps are identifiable, both sides are expressed
    relative to their own first part before comparing; the first part
    therefore scores zero by construction and the metrics average over the
    rest. A single-part model scores zero everywhere.
    """

    def unpack(obj):
        if hasattr(obj, "sigma") and hasattr(obj, "nu"):
            return obj.sigma, obj.nu
        sigma, nu = obj
        return sigma, nu

    sig_a, nu_a = unpack(result)
    sig_b, nu_b = unpack(truth)
    if len(nu_a) != len(nu_b):
        raise ValueError(f"part counts differ: {len(nu_a)} vs {len(nu_b)}")
    zeta_a = _combined(sig_a, nu_a)
    zeta_b = _combined(sig_b, nu_b)
    ref_a, ref_b = invert(zeta_a[0]), invert(zeta_b[0])
    sq_t, sq_r, sq_s = [], [], []
    for i in range(1, len(zeta_a)):
        rel_a = compose(ref_a, zeta_a[i])
        rel_b = compose(ref_b, zeta_b[i])
        sq_t.append((rel_a.t_u - rel_b.t_u) ** 2 + (rel_a.t_v - rel_b.t_v) ** 2)
        sq_r.append((rel_a.theta - rel_b.theta) ** 2)
        sq_s.append((rel_a.s - rel_b.s) ** 2)
    if not sq_t:
        return RecoveryMetrics(0.0, 0.0, 0.0)
    return RecoveryMetrics(
        translation_rms=float(np.sqrt(np.mean(sq_t))),
        rotation_rms=float(np.sqrt(np.mean(sq_r))),
        scale_rms=float(np.sqrt(np.mean(sq_s))),
    )


def batch_recovery_rms(data: SynthData, transforms) -> float:
    """Translation RMS of batch-aligned training transforms against truth.

    ``transforms`` pairs one global-plus-parts estimate with every training
    image, either (sigma, nu) tuples or objects with those attributes.
    Batch alignment determines each part's placement only up to one common
    warp across the whole stack, so the per-part mean displacement is
    removed before averaging: the result measures how consistently the
    images are registered to each other, in pixels at the part centers.
    """
    ts = data.training
    if len(transforms) != ts.n:
        raise ValueError(f"expected {ts.n} transform pairs, got {len(transforms)}")
    errs = np.zeros((ts.n, ts.m, 2))
    for k, est in enumerate(transforms):
        if hasattr(est, "sigma") and hasattr(est, "nu"):
            sigma, nu = est.sigma, est.nu
        else:
            sigma, nu = est
        truth_sigma = ts.init_sigma[k]
        for i, dom in enumerate(ts.domains):
            center = np.array([[dom.center_u, dom.center_v]])
            got = apply_transform(compose(sigma, nu[i]), center)
            want = apply_transform(
                compose(truth_sigma, data.training_truth[k][i]), center
            )
            errs[k, i] = (got - want)[0]
    errs -= errs.mean(axis=0, keepdims=True)
    return float(np.sqrt((errs**2).sum(axis=2).mean()))


def _transform_json(t: SimTransform) -> list[float]:
    return [float(v) for v in t.as_array()]


def write_scenario(data: SynthData, outdir) -> Path:
    """Write a generated scenario to disk: PGM images plus a manifest.

    The manifest records every image's path, subject, ground-truth
    transforms, and per-part landmark positions (the true part centers
    mapped into the image), so external tooling can rebuild training sets
    or score alignments from files alone.
    """
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    scenario = data.scenario
    domains = scenario.constellation
    centers = np.array([(d.center_u, d.center_v) for d in domains])

    def landmark_list(sigma, nu):
        pts = [
            apply_transform(compose(sigma, t), centers[i : i + 1])[0]
            for i, t in enumerate(nu)
        ]
        return [[float(u), float(v)] for u, v in pts]

    records = {"frame": list(scenario.frame), "parts": [], "training": [],
               "gallery": [], "probes": []}
    for dom in domains:
        records["parts"].append(
            {
                "name": dom.name,
                "center": [float(dom.center_u), float(dom.center_v)],
                "size": [int(dom.width), int(dom.height)],
            }
        )
    for k, img in enumerate(data.training.images):
        path = out / f"train_{k:03d}.pgm"
        write_pgm(path, np.clip(img, 0.0, 1.0))
        sigma = data.training.init_sigma[k]
        nu = data.training_truth[k]
        records["training"].append(
            {
                "path": path.name,
                "subject": data.training_subject[k],
                "sigma": _transform_json(sigma),
                "nu": [_transform_json(t) for t in nu],
                "landmarks": landmark_list(sigma, nu),
            }
        )
    for s, images in enumerate(data.gallery):
        for j, img in enumerate(images):
            path = out / f"gallery_s{s:02d}_m{j:02d}.pgm"
            write_pgm(path, np.clip(img, 0.0, 1.0))
            records["gallery"].append({"path": path.name, "subject": s, "mode": j})
    for k, probe in enumerate(data.probes):
        path = out / f"probe_{k:03d}.pgm"
        write_pgm(path, np.clip(probe.image, 0.0, 1.0))
        records["probes"].append(
            {
                "path": path.name,
                "subject": probe.subject,
                "sigma": _transform_json(probe.sigma),
                "nu": [_transform_json(t) for t in probe.nu],
                "landmarks": landmark_list(probe.sigma, probe.nu),
                "occluded": probe.occluded,
            }
        )
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(records, indent=2, sort_keys=True))
    return manifest
