"""Intensity normalisation: z-scoring, landmark standardisation, bias correction.

Three pipeline versions are supported::

    v1_zscore          z-score
    v2_bfc_zscore      z-score . bias correction
    v3_bfc_pwl_zscore  z-score . piecewise-linear landmarks . bias correction

The estimator classes follow the scikit-learn transformer protocol
(``fit``/``transform``/``get_params``) but operate on :class:`VolumeCase`
objects instead of feature matrices.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.mixture import GaussianMixture
from sklearn.utils.validation import check_is_fitted

from ..errors import ConfigError, DataError, ParameterError, UsageError
from .case import MODALITIES, VolumeCase, brain_mask

PERCENTILES = (1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 99)
VERSIONS = ("v1_zscore", "v2_bfc_zscore", "v3_bfc_pwl_zscore")
BIAS_MODES = ("polynomial", "external", "none")


def zscore_normalize(case: VolumeCase, mask: np.ndarray | None = None) -> VolumeCase:
    """Standardise each modality to mean 0 / std 1 inside ``mask``; zero outside."""
    mask = brain_mask(case) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataError(f"{case.case_id}: empty mask")
    out = np.zeros(case.images.shape, dtype=np.float32)
    for i, name in enumerate(MODALITIES):
        vals = case.images[i][mask].astype(np.float64)
        mu, sigma = vals.mean(), vals.std()
        if not sigma > 0:
            raise DataError(f"{case.case_id}: modality {name!r} has zero variance inside the mask")
        out[i][mask] = (vals - mu) / sigma
    return case.with_images(out)


def _landmarks(values: np.ndarray, percentiles, what: str) -> np.ndarray:
    marks = np.percentile(values.astype(np.float64), percentiles)
    if marks[0] == marks[-1]:
        raise DataError(f"{what}: degenerate histogram (p{percentiles[0]} == p{percentiles[-1]})")
    return marks


@dataclass
class LandmarkModel:
    """Standard-scale landmark intensities per modality."""

    landmarks: dict[str, np.ndarray]
    percentiles: tuple[int, ...] = PERCENTILES

    def to_json(self) -> dict[str, list[float]]:
        return {m: [float(v) for v in self.landmarks[m]] for m in MODALITIES}

    @classmethod
    def from_json(cls, payload: dict) -> "LandmarkModel":
        if set(payload) != set(MODALITIES):
            raise ConfigError(f"landmark model must list modalities {MODALITIES}, got {sorted(payload)}")
        marks = {m: np.asarray(payload[m], dtype=np.float64) for m in MODALITIES}
        if any(v.shape != (len(PERCENTILES),) for v in marks.values()):
            raise ConfigError(f"each landmark array needs {len(PERCENTILES)} values")
        return cls(marks)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "LandmarkModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def nyul_train(cases, percentiles=PERCENTILES, masks=None) -> LandmarkModel:
    """Average, over cases, of landmarks after mapping ``[p_first, p_last]`` to ``[0, 100]``."""
    cases = list(cases)
    if len(cases) < 2:
        raise UsageError(f"landmark training needs at least 2 cases, got {len(cases)}")
    masks = [None] * len(cases) if masks is None else list(masks)
    sums = {m: np.zeros(len(percentiles)) for m in MODALITIES}
    for case, mask in zip(cases, masks):
        mask = brain_mask(case) if mask is None else mask
        for i, name in enumerate(MODALITIES):
            marks = _landmarks(case.images[i][mask], percentiles, f"{case.case_id}/{name}")
            sums[name] += (marks - marks[0]) / (marks[-1] - marks[0]) * 100.0
    return LandmarkModel({m: s / len(cases) for m, s in sums.items()}, tuple(percentiles))


def piecewise_linear(x: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Map knots ``src`` onto ``dst``; beyond the ends the terminal slopes continue."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    overall = (dst[-1] - dst[0]) / (src[-1] - src[0])

    def slope(a, b):
        return (dst[b] - dst[a]) / (src[b] - src[a]) if src[b] > src[a] else overall

    x = np.asarray(x, dtype=np.float64)
    y = np.interp(x, src, dst)
    y = np.where(x < src[0], dst[0] + (x - src[0]) * slope(0, 1), y)
    return np.where(x > src[-1], dst[-1] + (x - src[-1]) * slope(-2, -1), y)


def case_landmarks(case: VolumeCase, percentiles=PERCENTILES, mask=None) -> dict[str, np.ndarray]:
    mask = brain_mask(case) if mask is None else mask
    return {name: _landmarks(case.images[i][mask], percentiles, f"{case.case_id}/{name}")
            for i, name in enumerate(MODALITIES)}


def nyul_apply(case: VolumeCase, model: LandmarkModel | None, mask=None) -> VolumeCase:
    """Send each modality's landmarks onto the standard scale (inside the mask)."""
    if model is None:
        raise UsageError("piecewise-linear normalisation needs a trained landmark model")
    mask = brain_mask(case) if mask is None else mask
    src = case_landmarks(case, model.percentiles, mask)
    out = case.images.astype(np.float64, copy=True)
    for i, name in enumerate(MODALITIES):
        out[i][mask] = piecewise_linear(out[i][mask], src[name], model.landmarks[name])
    return case.with_images(out)


def _monomials(degree: int) -> list[tuple[int, int, int]]:
    return [p for p in itertools.product(range(degree + 1), repeat=3) if sum(p) <= degree]


def _design(coords: np.ndarray, powers) -> np.ndarray:
    return np.stack([coords[0] ** a * coords[1] ** b * coords[2] ** c for a, b, c in powers], axis=1)


def _tissue_mixture(k: int, seed: int) -> GaussianMixture:
    return GaussianMixture(k, covariance_type="spherical", reg_covar=1e-6, max_iter=50,
                           random_state=seed, warm_start=True)


def polynomial_bias_correct(case: VolumeCase, degree: int = 3, mask=None,
                            tissue_classes: int = 5, iterations: int = 10,
                            max_fit_voxels: int = 50_000) -> VolumeCase:
    """Divide out a smooth multiplicative field fitted to log-intensities.

    ``log(I)`` inside the mask is modelled as a degree-``degree`` polynomial in
    normalised (z, y, x) coordinates plus a tissue term drawn from a 1-D
    Gaussian mixture.  Mixture and field are re-estimated alternately; the
    field step is a weighted least-squares fit of the log-intensity minus the
    posterior-expected tissue mean.  The corrected modality is rescaled to keep
    its in-mask mean.
    """
    if degree not in (2, 3):
        raise ParameterError(f"bias-field polynomial degree must be 2 or 3, got {degree}")
    mask = brain_mask(case) if mask is None else mask
    grids = np.meshgrid(*(np.linspace(-1.0, 1.0, n) for n in case.extents), indexing="ij")
    powers = _monomials(degree)
    out = case.images.astype(np.float64, copy=True)
    for i, name in enumerate(MODALITIES):
        img = out[i]
        fit_mask = mask & (img > 0)
        n = int(fit_mask.sum())
        if n < len(powers) + tissue_classes:
            raise DataError(f"{case.case_id}/{name}: too few positive voxels for bias fitting")
        A = _design(np.stack([g[fit_mask] for g in grids]), powers)
        y = np.log(img[fit_mask])
        stride = max(1, n // max_fit_voxels)
        gmm = _tissue_mixture(tissue_classes, i)
        log_field = np.zeros_like(y)
        for _ in range(iterations):
            z = (y - log_field)[:, None]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                gmm.fit(z[::stride])
            resp = gmm.predict_proba(z)
            precision = 1.0 / gmm.covariances_
            weight = resp @ precision
            tissue = (resp * precision) @ gmm.means_[:, 0] / weight
            sw = np.sqrt(weight)
            coef, _, rank, _ = np.linalg.lstsq(A * sw[:, None], (y - tissue) * sw, rcond=None)
            if rank < len(powers):
                raise DataError(f"{case.case_id}/{name}: singular normal equations in bias fit")
            log_field = A @ coef
        live = mask & (img != 0)
        field = np.exp(_design(np.stack([g[live] for g in grids]), powers) @ coef)
        before = img[mask].mean()
        img[live] = img[live] / field
        after = img[mask].mean()
        if after != 0:
            img[mask] *= before / after
    return case.with_images(out)


@dataclass
class NormalizationSpec:
    version: str = "v1_zscore"
    bias_correction: str = "polynomial"
    degree: int = 3
    landmarks: LandmarkModel | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.version not in VERSIONS:
            raise ConfigError(f"unknown normalisation version {self.version!r}; choose from {VERSIONS}")
        if self.bias_correction not in BIAS_MODES:
            raise ConfigError(f"unknown bias correction {self.bias_correction!r}; choose from {BIAS_MODES}")

    def to_json(self) -> dict:
        return {"version": self.version, "bias_correction": self.bias_correction,
                "degree": self.degree,
                "landmarks": self.landmarks.to_json() if self.landmarks is not None else None}

    @classmethod
    def from_json(cls, payload: dict) -> "NormalizationSpec":
        marks = payload.get("landmarks")
        return cls(payload["version"], payload.get("bias_correction", "polynomial"),
                   int(payload.get("degree", 3)),
                   LandmarkModel.from_json(marks) if marks else None)


def bias_correct(case: VolumeCase, spec: NormalizationSpec) -> VolumeCase:
    if spec.bias_correction == "polynomial":
        return polynomial_bias_correct(case, spec.degree)
    return case


def apply_normalization(case: VolumeCase, spec: NormalizationSpec) -> VolumeCase:
    """Run the pipeline selected by ``spec.version`` on one case."""
    mask = brain_mask(case)
    if spec.version == "v1_zscore":
        return zscore_normalize(case, mask)
    corrected = bias_correct(case, spec)
    if spec.version == "v3_bfc_pwl_zscore":
        corrected = nyul_apply(corrected, spec.landmarks, mask)
    return zscore_normalize(corrected, mask)


def _map_cases(fn, X):
    if isinstance(X, VolumeCase):
        return fn(X)
    return [fn(c) for c in X]


class ZScoreNormalizer(TransformerMixin, BaseEstimator):
    """Per-case, per-modality standardisation inside the brain mask."""

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def transform(self, X):
        return _map_cases(zscore_normalize, X)


class BiasFieldCorrector(TransformerMixin, BaseEstimator):
    def __init__(self, degree: int = 3):
        self.degree = degree

    def fit(self, X=None, y=None):
        if self.degree not in (2, 3):
            raise ParameterError(f"degree must be 2 or 3, got {self.degree}")
        self.fitted_ = True
        return self

    def transform(self, X):
        return _map_cases(lambda c: polynomial_bias_correct(c, self.degree), X)


class LandmarkStandardizer(TransformerMixin, BaseEstimator):
    """Piecewise-linear histogram standardisation learnt from a set of cases."""

    def __init__(self, percentiles=PERCENTILES):
        self.percentiles = percentiles

    def fit(self, X, y=None):
        self.model_ = nyul_train(X, tuple(self.percentiles))
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return _map_cases(lambda c: nyul_apply(c, self.model_), X)


class IntensityNormalizer(TransformerMixin, BaseEstimator):
    """One of the three normalisation pipelines, as a fit/transform estimator."""

    def __init__(self, version: str = "v1_zscore", bias_correction: str = "polynomial",
                 degree: int = 3):
        self.version = version
        self.bias_correction = bias_correction
        self.degree = degree

    def fit(self, X=None, y=None):
        spec = NormalizationSpec(self.version, self.bias_correction, self.degree)
        if self.version == "v3_bfc_pwl_zscore":
            if X is None:
                raise UsageError("v3 normalisation must be fitted on training cases")
            spec.landmarks = nyul_train([bias_correct(c, spec) for c in X])
        self.spec_ = spec
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        return _map_cases(lambda c: apply_normalization(c, self.spec_), X)

    @classmethod
    def from_spec(cls, spec: NormalizationSpec) -> "IntensityNormalizer":
        est = cls(spec.version, spec.bias_correction, spec.degree)
        est.spec_ = spec
        return est
