"""Shared scene builders for solver-level tests.

Scenes are small synthetic constellations on the canonical frame: a smooth
base image with a distinct blob per part, dictionaries built from normalized
crops, and a mild tree shape model. Everything is deterministic given the rng.
"""

import numpy as np

from cpalign.align import CpaModel
from cpalign.geometry import SimTransform, TransformSet, apply_transform, invert
from cpalign.imgproc import PartDomain, normalize_intensity, sample_bilinear, warp_part
from cpalign.shapemodel import EdgeGaussian, TreeConfig, TreeShapeModel

FRAME = (60, 80)  # width, height


def textured_image(rng, width=60, height=80, smooth=2.0, detail=0.0):
    """Smooth random field with rich gradients everywhere.

    ``detail`` mixes in a finer field (fixed 1.2 px scale) so the coarse
    structure sets a wide alignment basin while the optimum stays sharp.
    """
    from scipy.ndimage import gaussian_filter

    img = gaussian_filter(rng.normal(size=(height, width)), smooth)
    if detail > 0:
        img = img / np.abs(img).max()
        fine = gaussian_filter(rng.normal(size=(height, width)), 1.2)
        img = img + detail * fine / np.abs(fine).max()
    img = img - img.min()
    return 0.1 + 0.8 * img / img.max()


def window_action_gap(zeta_est, zeta_true, dom):
    """Largest displacement between the two warps over the part window."""
    pts = np.vstack([dom.corners(), [[dom.center_u, dom.center_v]]])
    return float(
        np.abs(
            apply_transform(zeta_est, pts) - apply_transform(zeta_true, pts)
        ).max()
    )


def blob_image(centers, sigmas, amps, width=60, height=80, floor=0.1):
    v, u = np.mgrid[0:height, 0:width].astype(float)
    img = floor + 0.05 * (u / width) + 0.04 * (v / height)
    for (cu, cv), sig, amp in zip(centers, sigmas, amps):
        img += amp * np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * sig**2))
    return np.clip(img, 0.0, 1.0)


def default_domains():
    return (
        PartDomain(16.0, 22.0, 14, 12, name="a"),
        PartDomain(44.0, 22.0, 14, 12, name="b"),
        PartDomain(30.0, 52.0, 16, 14, name="c"),
    )


def star_shape_model(m, jitter_var=1.0, angle_var=0.01):
    cov = np.diag([jitter_var, jitter_var, angle_var, angle_var])
    edge = lambda: EdgeGaussian(np.zeros(4), np.linalg.inv(cov))
    return TreeShapeModel(TreeConfig((0,) * m), [edge() for _ in range(m)])


def make_scene(rng, n_columns=3, smooth=1.5):
    """Base image + model whose dictionaries are crops of lighting variants."""
    domains = default_domains()
    base = textured_image(rng, smooth=smooth)
    h, w = base.shape
    v, u = np.mgrid[0:h, 0:w].astype(float)
    tilts = [np.ones_like(base)]
    tilts.append(1.0 + 0.4 * (u - w / 2) / w)
    tilts.append(1.0 + 0.4 * (v - h / 2) / h)
    while len(tilts) < n_columns:
        tilts.append(1.0 + 0.2 * rng.normal() * (u - w / 2) / w)
    dictionaries = []
    for dom in domains:
        cols = [
            normalize_intensity(warp_part(base * tilt, SimTransform.identity(), dom))
            for tilt in tilts[:n_columns]
        ]
        dictionaries.append(np.stack(cols, axis=1))
    shape = star_shape_model(len(domains))
    model = CpaModel(
        domains=domains,
        dictionaries=tuple(dictionaries),
        shape=shape,
        lambda_hat=1.0,
        eta_hat=0.02,
        frame=FRAME,
    )
    return base, model


def render_probe(base, sigma_gt, width=60, height=80):
    """Probe whose content sits at sigma_gt relative to the canonical frame."""
    v, u = np.mgrid[0:height, 0:width].astype(float)
    pts = np.stack([u.ravel(), v.ravel()], axis=1)
    back = apply_transform(invert(sigma_gt), pts)
    return sample_bilinear(base, back).reshape(height, width)
