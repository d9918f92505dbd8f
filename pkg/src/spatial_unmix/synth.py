"""Synthetic benchmark scenes: Potts label map, class-wise abundances, mixing, noise."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import GenerationError, InfeasibleMomentsError, InvalidArgumentError
from .model import AbundanceMatrix, EndmemberMatrix, ImageCube
from .potts import LabelField, NeighborhoodOrder, sample_field
from .streams import Tag, stream

log = logging.getLogger(__name__)

TABLE1_MEANS = [[0.6, 0.3, 0.1], [0.3, 0.5, 0.2], [0.3, 0.2, 0.5]]
TABLE1_VARIANCE = 5e-3

MAX_CORRELATION = 0.95
MAX_CONDITION = 1e4
PROBE_ATTEMPTS = 10_000
MIN_ACCEPTANCE = 1e-3
BUMP_HEIGHT = (0.01, 0.06)


@dataclass
class SceneSpec:
    """Parameters of a synthetic scene.

    ``endmember_source`` is either a path to an endmember CSV or ``None``
    for procedural spectra drawn with ``endmember_seed``.
    """

    width: int = 25
    height: int = 25
    n_classes: int = 3
    n_endmembers: int = 3
    n_bands: int = 413
    beta: float = 1.1
    class_means: list = field(default_factory=lambda: [list(r) for r in TABLE1_MEANS])
    class_vars: list = field(default_factory=lambda: [[TABLE1_VARIANCE] * 3 for _ in range(3)])
    noise_variance: float = 1e-3
    seed: int = 1
    endmember_source: str | None = None
    endmember_seed: int | None = None
    sweeps: int = 200

    def __post_init__(self):
        means = np.asarray(self.class_means, dtype=float)
        variances = np.asarray(self.class_vars, dtype=float)
        shape = (self.n_classes, self.n_endmembers)
        if means.shape != shape or variances.shape != shape:
            raise InvalidArgumentError(f"class moments must have shape {shape}")
        if np.any(means <= 0) or not np.allclose(means.sum(axis=1), 1.0, atol=1e-9):
            raise InvalidArgumentError("each class mean must lie on the open simplex")
        if np.any(variances <= 0):
            raise InvalidArgumentError("class variances must be positive")
        if not self.noise_variance > 0:
            raise InvalidArgumentError("noise variance must be positive")

    @classmethod
    def from_json(cls, path) -> "SceneSpec":
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Scene:
    cube: ImageCube
    abundances: AbundanceMatrix
    labels: LabelField
    endmembers: EndmemberMatrix
    snr_db: float


def procedural_endmembers(n_bands: int, n_endmembers: int, seed: int = 0) -> EndmemberMatrix:
    """Smooth synthetic reflectance spectra.

    Each spectrum is a positive, gently sloped baseline plus 3 to 6
    Gaussian absorption/reflection bumps, scaled so its peak equals 1.
    Draws are repeated until every pair of spectra has correlation below
    0.95 and ``M^T M`` has condition number below 1e4.
    """
    L, R = n_bands, n_endmembers
    if L < R:
        raise InvalidArgumentError(f"need at least as many bands as endmembers ({L} < {R})")
    x = np.linspace(0.0, 1.0, L)
    for attempt in range(100):
        rng = stream(seed, attempt, Tag.ENDMEMBERS)
        M = np.empty((L, R))
        for r in range(R):
            level = rng.uniform(0.3, 0.6)
            spectrum = level + rng.uniform(-0.1, 0.1) * (x - 0.5)
            for _ in range(rng.integers(3, 7)):
                center = rng.uniform(0.0, 1.0)
                width = rng.uniform(0.02, 0.12)
                height = rng.uniform(*BUMP_HEIGHT) * rng.choice([-1.0, 1.0])
                spectrum = spectrum + height * np.exp(-0.5 * ((x - center) / width) ** 2)
            M[:, r] = np.maximum(spectrum, 1e-3)
        M /= M.max(axis=0)
        corr = np.corrcoef(M.T)
        off = corr[~np.eye(R, dtype=bool)]
        if np.all(off < MAX_CORRELATION) and np.linalg.cond(M.T @ M) < MAX_CONDITION:
            names = [f"endmember_{r + 1}" for r in range(R)]
            return EndmemberMatrix(M, names)
    raise GenerationError("could not draw well-separated endmembers in 100 attempts")


def sample_class_abundances(means, variances, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` abundance vectors with the given mean and per-component variance.

    A Gaussian vector with independent components of variance
    ``variances * R / (R - 1)`` is centered (its mean across components is
    subtracted) and added to ``means``.  The result sums to one exactly and,
    when all variances of the class are equal, each component has exactly
    the requested variance.  Draws are rejected unless every component lies
    in (0, 1).  Returns an ``(R, n)`` array.
    """
    means = np.asarray(means, dtype=float)
    R = means.size
    sd = np.sqrt(np.asarray(variances, dtype=float) * R / (R - 1))
    accepted = []
    total = 0
    attempts = 0
    batch = PROBE_ATTEMPTS
    while attempts == 0 or total < n:
        g = rng.normal(0.0, sd, size=(batch, R))
        draws = means + g - g.mean(axis=1, keepdims=True)
        ok = np.all((draws > 0) & (draws < 1), axis=1)
        if attempts == 0 and ok.mean() < MIN_ACCEPTANCE:
            raise InfeasibleMomentsError(
                f"rejection acceptance {ok.mean():.2e} below {MIN_ACCEPTANCE:g} "
                f"for mean {means.tolist()}"
            )
        attempts += batch
        accepted.append(draws[ok])
        total += int(ok.sum())
    return np.concatenate(accepted)[:n].T


def load_endmembers(spec: SceneSpec) -> EndmemberMatrix:
    if spec.endmember_source is not None:
        from .formats import read_endmembers

        M = read_endmembers(spec.endmember_source)
        if M.spectra.shape != (spec.n_bands, spec.n_endmembers):
            raise InvalidArgumentError(
                f"endmember file has shape {M.spectra.shape}, scene expects "
                f"({spec.n_bands}, {spec.n_endmembers})"
            )
        return M
    seed = spec.seed if spec.endmember_seed is None else spec.endmember_seed
    return procedural_endmembers(spec.n_bands, spec.n_endmembers, seed)


def snr_db(clean: np.ndarray, noise_variance: float) -> float:
    """``10 log10(mean ||M a||^2 / (L sigma^2))`` for ``(P, L)`` clean spectra."""
    L = clean.shape[1]
    return float(10 * np.log10(np.mean(np.sum(clean**2, axis=1)) / (L * noise_variance)))


def generate_scene(spec: SceneSpec) -> Scene:
    M = load_endmembers(spec)
    labels = sample_field(
        spec.n_classes, spec.beta, spec.width, spec.height,
        NeighborhoodOrder.FIRST, sweeps=spec.sweeps, seed=spec.seed,
    )
    P = spec.width * spec.height
    R = spec.n_endmembers
    A = np.empty((R, P))
    means = np.asarray(spec.class_means, dtype=float)
    variances = np.asarray(spec.class_vars, dtype=float)
    for k in range(spec.n_classes):
        idx = np.flatnonzero(labels.labels == k)
        rng = stream(spec.seed, k, Tag.SCENE_ABUNDANCES)
        A[:, idx] = sample_class_abundances(means[k], variances[k], idx.size, rng)
    clean = (M.spectra @ A).T
    noise = stream(spec.seed, 0, Tag.SCENE_NOISE).normal(
        0.0, np.sqrt(spec.noise_variance), size=clean.shape
    )
    snr = snr_db(clean, spec.noise_variance)
    log.info("generated %dx%d scene, SNR %.2f dB", spec.width, spec.height, snr)
    cube = ImageCube(spec.width, spec.height, clean + noise)
    return Scene(cube, AbundanceMatrix(A), labels, M, snr)
