"""Synthetic brain-tumour cases with exactly known geometry.

Each case is a head ellipsoid of two healthy tissue classes containing a
nested lesion: necrotic core (label 1) inside an enhancing rim (label 4)
inside an oedema shell (label 2).  Tissue contrast loosely mimics MR:
oedema is bright on FLAIR and T2, the rim enhances on T1ce, the core is
dark on T1/T1ce.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ParameterError
from .preprocessing.case import VolumeCase

MIN_EXTENT = 48

# relative mean intensity per tissue: healthy_a, healthy_b, oedema, rim, core
_CONTRAST = np.array([
    [0.90, 1.10, 2.00, 1.50, 1.20],  # flair
    [1.10, 0.90, 0.80, 0.90, 0.50],  # t1
    [1.10, 0.90, 0.85, 2.20, 0.55],  # t1ce
    [0.90, 1.10, 1.80, 1.40, 2.10],  # t2
])
_SCALE = np.array([400.0, 600.0, 700.0, 500.0])
_NOISE = 0.03
CORE_RADIUS = 0.38
RIM_RADIUS = 0.60
TEXTURE_SIGMA = 1.2


def _smooth_noise(rng, shape, sigma) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def quadratic_field(extents, rng, amplitude: float = 0.25) -> np.ndarray:
    """Smooth positive multiplicative field ``exp(q(z, y, x))`` with ``q`` quadratic."""
    grids = np.meshgrid(*(np.linspace(-1, 1, n) for n in extents), indexing="ij")
    terms = [g for g in grids] + [a * b for i, a in enumerate(grids) for b in grids[i:]]
    coef = rng.uniform(-1.0, 1.0, len(terms)) * amplitude / 2
    return np.exp(sum(c * t for c, t in zip(coef, terms)))


def make_phantom(seed: int, index: int = 0, extents=(64, 64, 64), bias_field: bool = False,
                 noise: float = _NOISE) -> VolumeCase:
    extents = tuple(int(e) for e in extents)
    if len(extents) != 3 or min(extents) < MIN_EXTENT:
        raise ParameterError(f"phantom extents must be >= {MIN_EXTENT} per axis, got {extents}")
    rng = np.random.default_rng([seed, index])
    ext = np.asarray(extents, dtype=float)
    zz = np.meshgrid(*(np.arange(n, dtype=float) for n in extents), indexing="ij")

    head_c = (ext - 1) / 2
    head_r = 0.42 * ext * rng.uniform(0.95, 1.05, 3)
    head = sum(((g - c) / r) ** 2 for g, c, r in zip(zz, head_c, head_r)) <= 1.0

    r_oedema = rng.uniform(0.17, 0.22) * ext.min() * rng.uniform(0.85, 1.15, 3)
    # keep the whole lesion comfortably inside the head
    slack = np.maximum(head_r - r_oedema * 1.2, 1.0) * 0.45
    t_c = head_c + rng.uniform(-1, 1, 3) * slack
    rho = np.sqrt(sum(((g - c) / r) ** 2 for g, c, r in zip(zz, t_c, r_oedema)))
    rho = rho * (1.0 + 0.06 * _smooth_noise(rng, extents, 3.0))

    labels = np.zeros(extents, dtype=np.uint8)
    labels[rho <= 1.0] = 2
    labels[rho <= RIM_RADIUS] = 4
    labels[rho <= CORE_RADIUS] = 1
    labels[~head] = 0

    tissue = np.where(_smooth_noise(rng, extents, TEXTURE_SIGMA) > 0, 0, 1)
    tissue[labels == 2] = 2
    tissue[labels == 4] = 3
    tissue[labels == 1] = 4

    images = np.zeros((4,) + extents, dtype=np.float32)
    # separate stream: biased and unbiased phantoms share everything but the field
    field = quadratic_field(extents, np.random.default_rng([seed, index, 1])) if bias_field else None
    for m in range(4):
        mean = _CONTRAST[m][tissue]
        vol = mean * (1.0 + noise * rng.standard_normal(extents))
        vol = np.maximum(vol, 0.05) * _SCALE[m]
        if field is not None:
            vol = vol * field
        images[m][head] = vol[head]
    return VolumeCase(images, labels, (1.0, 1.0, 1.0), f"phantom_{seed}_{index:03d}")


def phantom_generate(seed: int, count: int, extents=(64, 64, 64), bias_field: bool = False,
                     start: int = 0) -> list[VolumeCase]:
    """``count`` deterministic phantoms; case ``i`` depends only on ``(seed, start + i)``."""
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    return [make_phantom(seed, start + i, extents, bias_field) for i in range(count)]
