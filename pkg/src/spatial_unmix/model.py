"""Linear mixing model: domain types, softmax reparametrization, likelihood.

Pixels are stored row-major by pixel: an image of ``height`` rows and
``width`` columns has ``P = width * height`` pixels and pixel index
``p = row * width + col``.  Spectra are rows of the ``(P, L)`` data matrix;
endmember signatures are columns of the ``(L, R)`` matrix ``M``; abundances
and logistic coefficients are ``(R, P)`` matrices (one column per pixel).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

# softmax may underflow to exactly zero; logarithms of abundances use this floor
ABUNDANCE_FLOOR = 1e-300

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class ImageCube:
    """Observed hyperspectral image, ``data`` has shape ``(P, L)``."""

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.width < 1 or self.height < 1:
            raise InvalidArgumentError("image dimensions must be positive")
        if self.data.ndim != 2 or self.data.shape[0] != self.width * self.height:
            raise InvalidArgumentError(
                f"data must have shape (width*height, bands) = "
                f"({self.width * self.height}, L), got {self.data.shape}"
            )
        if self.data.shape[1] < 1:
            raise InvalidArgumentError("cube needs at least one band")
        if not np.all(np.isfinite(self.data)):
            raise InvalidArgumentError("cube contains non-finite values")

    @property
    def bands(self) -> int:
        return self.data.shape[1]

    @property
    def n_pixels(self) -> int:
        return self.data.shape[0]


@dataclass
class EndmemberMatrix:
    """Known endmember signatures, ``spectra`` has shape ``(L, R)``."""

    spectra: np.ndarray
    names: list[str] | None = None

    def __post_init__(self):
        self.spectra = np.asarray(self.spectra, dtype=float)
        if self.spectra.ndim != 2:
            raise InvalidArgumentError("endmember matrix must be 2-D (L, R)")
        L, R = self.spectra.shape
        if R < 2:
            raise InvalidArgumentError(f"need at least 2 endmembers, got {R}")
        if not np.all(np.isfinite(self.spectra)):
            raise InvalidArgumentError("endmember matrix contains non-finite values")
        for i in range(R):
            for j in range(i + 1, R):
                if np.array_equal(self.spectra[:, i], self.spectra[:, j]):
                    raise InvalidArgumentError(f"endmembers {i} and {j} are identical")
        if self.names is not None and len(self.names) != R:
            raise InvalidArgumentError("one name per endmember required")

    @property
    def n_bands(self) -> int:
        return self.spectra.shape[0]

    @property
    def n_endmembers(self) -> int:
        return self.spectra.shape[1]


@dataclass
class AbundanceMatrix:
    """Per-pixel abundances, ``values`` has shape ``(R, P)``.

    Columns lie on the simplex.  Estimators built on the softmax produce
    strictly positive entries; FCLS may return exact zeros.
    """

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise InvalidArgumentError("abundance matrix must be 2-D (R, P)")
        if np.any(self.values < 0):
            raise InvalidArgumentError("abundances must be nonnegative")
        if not np.allclose(self.values.sum(axis=0), 1.0, rtol=0, atol=1e-12):
            raise InvalidArgumentError("abundance columns must sum to one")


@dataclass
class LogisticState:
    """Logistic coefficients ``coeffs`` of shape ``(R, P)``."""

    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.ndim != 2:
            raise InvalidArgumentError("coefficients must be 2-D (R, P)")
        if not np.all(np.isfinite(self.coeffs)):
            raise InvalidArgumentError("logistic coefficients must be finite")

    def abundances(self) -> AbundanceMatrix:
        return AbundanceMatrix(softmax_abundances(self.coeffs))


@dataclass
class NoiseModel:
    variance: float = field(default=1.0)

    def __post_init__(self):
        if not (self.variance > 0 and np.isfinite(self.variance)):
            raise InvalidArgumentError("noise variance must be positive and finite")


def softmax_abundances(coeffs):
    """Map logistic coefficients to abundances on the open simplex.

    Works on a single ``(R,)`` vector or column-wise on an ``(R, P)`` matrix.
    The column maximum is subtracted before exponentiation so magnitudes
    of several hundred do not overflow.
    """
    c = np.asarray(coeffs, dtype=float)
    if not np.all(np.isfinite(c)):
        raise InvalidArgumentError("logistic coefficients must be finite")
    e = np.exp(c - c.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def logistic_from_abundances(abundances, floor=1e-3):
    """Inverse of the softmax up to an additive constant per column.

    Entries below ``floor`` (including exact FCLS zeros) are lifted to it.
    """
    a = np.asarray(abundances, dtype=float)
    return np.log(np.maximum(a, floor))


def forward(M, a):
    """Noise-free mixture ``M @ a`` for one abundance vector or an ``(R, P)`` matrix."""
    M = _spectra(M)
    a = np.asarray(a, dtype=float)
    if a.shape[0] != M.shape[1]:
        raise InvalidArgumentError(
            f"abundance length {a.shape[0]} does not match {M.shape[1]} endmembers"
        )
    return M @ a


def log_likelihood_pixel(y, c, s2, M) -> float:
    """Gaussian log-density of one spectrum, normalizing constant included.

    ``-(L/2) log(2 pi s2) - ||y - M softmax(c)||^2 / (2 s2)``
    """
    if not s2 > 0:
        raise InvalidArgumentError(f"noise variance must be positive, got {s2}")
    M = _spectra(M)
    y = np.asarray(y, dtype=float)
    if y.shape != (M.shape[0],):
        raise InvalidArgumentError(f"spectrum length {y.shape} does not match L={M.shape[0]}")
    resid = y - forward(M, softmax_abundances(c))
    L = y.shape[0]
    return float(-0.5 * L * (_LOG_2PI + np.log(s2)) - resid @ resid / (2.0 * s2))


def log_likelihood_image(Y, C, s2, M) -> float:
    """Sum of per-pixel log-likelihoods (independent noise across pixels)."""
    if not s2 > 0:
        raise InvalidArgumentError(f"noise variance must be positive, got {s2}")
    M = _spectra(M)
    data = Y.data if isinstance(Y, ImageCube) else np.asarray(Y, dtype=float)
    coeffs = C.coeffs if isinstance(C, LogisticState) else np.asarray(C, dtype=float)
    if data.shape[1] != M.shape[0] or coeffs.shape != (M.shape[1], data.shape[0]):
        raise InvalidArgumentError("image, coefficients and endmembers disagree in shape")
    resid = data - (M @ softmax_abundances(coeffs)).T
    P, L = data.shape
    return float(-0.5 * L * P * (_LOG_2PI + np.log(s2)) - np.sum(resid**2) / (2.0 * s2))


def _spectra(M) -> np.ndarray:
    return M.spectra if isinstance(M, EndmemberMatrix) else np.asarray(M, dtype=float)
