"""Hybrid Metropolis-within-Gibbs sampler for spatially constrained unmixing.

One iteration updates, in order: the label field (checkerboard Gibbs
sweep), the logistic coefficients (componentwise random-walk
Metropolis-Hastings), the noise variance, the class means and variances of
the logistic coefficients, and the two global hyperparameters.

Labels are 0-based throughout.
"""

from __future__ import annotations

import io
import logging
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.cluster.vq import kmeans2

from .baseline import fcls_unmix_image
from .errors import EmptyClassError, InvalidArgumentError, InvalidStateError, NumericError
from .model import AbundanceMatrix, EndmemberMatrix, ImageCube, logistic_from_abundances, softmax_abundances
from .potts import LabelField, NeighborhoodOrder, draw_categorical, neighbor_counts, neighbors, scan_colors
from .streams import Tag, inverse_gamma, stream

log = logging.getLogger(__name__)

# fixed hyperprior constants: s2 ~ IG(NU, delta), sigma2_rk ~ IG(XI, GAMMA)
NU = 1.0
XI = 1.0
GAMMA = 5.0
DEGENERATE_SCALE = 1e-12
# Reading of the Gamma(1, 1/s2) conditional of delta: "rate" gives mean s2,
# "scale" gives mean 1/s2.
DELTA_GAMMA_CONVENTION = "rate"
INIT_LABELS = ("kmeans", "uniform")
KMEANS_RESTARTS = 10


@dataclass
class ClassHyperParams:
    """Per-class logistic means ``psi`` and variances ``sigma2``, both ``(K, R)``."""

    psi: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=float)
        self.sigma2 = np.asarray(self.sigma2, dtype=float)
        if self.psi.shape != self.sigma2.shape:
            raise InvalidArgumentError("psi and sigma2 must have the same shape")
        if np.any(self.sigma2 <= 0):
            raise InvalidStateError("class variances must be positive")


@dataclass
class Hyperprior:
    """Priors on the two top-level hyperparameters.

    With all four constants zero these are the Jeffreys priors
    ``f(v2) ~ 1/v2`` and ``f(delta) ~ 1/delta``.  Positive values give the
    proper priors ``v2 ~ IG(v2_shape, v2_scale)`` and
    ``delta ~ Gamma(delta_shape, rate=delta_rate)``, which are needed to
    simulate from the prior.
    """

    v2_shape: float = 0.0
    v2_scale: float = 0.0
    delta_shape: float = 0.0
    delta_rate: float = 0.0

    @property
    def proper(self) -> bool:
        return min(self.v2_shape, self.v2_scale, self.delta_shape, self.delta_rate) > 0


@dataclass
class ChainState:
    labels: np.ndarray  # (P,)
    coeffs: np.ndarray  # (R, P)
    s2: float
    psi: np.ndarray  # (K, R)
    sigma2: np.ndarray  # (K, R)
    v2: float
    delta: float

    def copy(self) -> "ChainState":
        return ChainState(
            self.labels.copy(), self.coeffs.copy(), self.s2,
            self.psi.copy(), self.sigma2.copy(), self.v2, self.delta,
        )

    @property
    def hyper(self) -> ClassHyperParams:
        return ClassHyperParams(self.psi, self.sigma2)


@dataclass
class ChainConfig:
    n_mc: int = 5000
    n_burn: int = 500
    beta: float = 1.1
    n_classes: int = 3
    seed: int = 0
    proposal_sd: np.ndarray | None = None  # None: derived from the initial state
    adapt: bool = True
    target_accept: tuple = (0.15, 0.5)
    adapt_interval: int = 50
    order: NeighborhoodOrder = NeighborhoodOrder.FIRST
    threads: int = 1
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    hyperprior: Hyperprior = field(default_factory=Hyperprior)
    init_labels: str = "kmeans"  # or "uniform"
    label_warmup: int = 100  # leading burn-in iterations with labels held fixed

    def __post_init__(self):
        self.order = NeighborhoodOrder.parse(self.order)
        if self.init_labels not in INIT_LABELS:
            raise InvalidArgumentError(f"init_labels must be one of {INIT_LABELS}, got {self.init_labels!r}")
        if not 0 <= self.n_burn < self.n_mc:
            raise InvalidArgumentError(f"need 0 <= n_burn < n_mc, got {self.n_burn}, {self.n_mc}")
        if self.n_classes < 1:
            raise InvalidArgumentError("need at least one class")
        if self.beta < 0:
            raise InvalidArgumentError("granularity coefficient must be nonnegative")
        if self.threads < 1:
            raise InvalidArgumentError("threads must be >= 1")
        if self.proposal_sd is not None:
            self.proposal_sd = np.asarray(self.proposal_sd, dtype=float)
            if np.any(self.proposal_sd <= 0):
                raise InvalidArgumentError("proposal standard deviations must be positive")
        if self.label_warmup < 0:
            raise InvalidArgumentError("label_warmup must be nonnegative")
        self.label_warmup = min(self.label_warmup, self.n_burn)
        if self.checkpoint_every and not self.checkpoint_path:
            raise InvalidArgumentError("checkpoint_every requires checkpoint_path")


class UnmixingProblem:
    """Observed image and endmembers with the Gram quantities the sampler reuses.

    ``||y_p - M a||^2 = y_p.y_p - 2 a.(M^T y_p) + a^T (M^T M) a`` is evaluated
    from ``yy``, ``B = M^T Y^T`` and ``G = M^T M`` so each proposal costs
    ``O(R^2)`` per pixel instead of ``O(L R)``.
    """

    def __init__(self, Y, M, width=None, height=None):
        if isinstance(Y, ImageCube):
            width, height = Y.width, Y.height
            Y = Y.data
        self.Y = np.asarray(Y, dtype=float)
        self.M = M.spectra if isinstance(M, EndmemberMatrix) else np.asarray(M, dtype=float)
        P, L = self.Y.shape
        if self.M.shape[0] != L:
            raise InvalidArgumentError(f"cube has {L} bands, endmembers have {self.M.shape[0]}")
        if width is None:
            width, height = P, 1
        if width * height != P:
            raise InvalidArgumentError("geometry does not match pixel count")
        self.width, self.height = width, height
        self.G = self.M.T @ self.M
        self.B = self.M.T @ self.Y.T
        self.yy = np.einsum("pl,pl->p", self.Y, self.Y)

    @property
    def n_pixels(self) -> int:
        return self.Y.shape[0]

    @property
    def n_bands(self) -> int:
        return self.Y.shape[1]

    @property
    def n_endmembers(self) -> int:
        return self.M.shape[1]

    def sq_residuals(self, A: np.ndarray, idx=None) -> np.ndarray:
        """``||y_p - M a_p||^2`` for the columns of ``A`` (pixels ``idx``)."""
        B = self.B if idx is None else self.B[:, idx]
        yy = self.yy if idx is None else self.yy[idx]
        r = yy - 2.0 * np.einsum("rp,rp->p", A, B) + np.einsum("rp,rp->p", A, self.G @ A)
        return np.maximum(r, 0.0)


def _blocks(idx: np.ndarray, threads: int) -> list[np.ndarray]:
    return [b for b in np.array_split(idx, threads) if b.size]


def _run_blocks(fn, idx, threads):
    if threads == 1:
        fn(idx)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(fn, _blocks(idx, threads)))


# --------------------------------------------------------------------------
# labels


def _class_log_density(coeffs: np.ndarray, psi: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
    """``log N(c_p; psi_k, diag sigma2_k)`` up to a constant, shape ``(K, n)``."""
    if np.any(sigma2 <= 0):
        raise InvalidStateError("class variances must be positive")
    d = coeffs[None, :, :] - psi[:, :, None]
    return -0.5 * np.sum(np.log(sigma2), axis=1)[:, None] - 0.5 * np.sum(
        d * d / sigma2[:, :, None], axis=1
    )


def label_conditional_probs(p, field: LabelField, c_p, hyper: ClassHyperParams, beta, order=NeighborhoodOrder.FIRST):
    """Full conditional of the label of pixel ``p``.

    Component ``k`` is proportional to ``exp(beta * n_k) |Sigma_k|^(-1/2)
    exp(-(c_p - psi_k)^T Sigma_k^(-1) (c_p - psi_k) / 2)`` with ``n_k`` the
    number of neighbors currently in class ``k``.
    """
    K = hyper.psi.shape[0]
    counts = np.zeros(K)
    for q in neighbors(p, field.width, field.height, order):
        counts[field.labels[q]] += 1
    c = np.asarray(c_p, dtype=float).reshape(-1, 1)
    logw = beta * counts + _class_log_density(c, hyper.psi, hyper.sigma2)[:, 0]
    w = np.exp(logw - logw.max())
    return w / w.sum()


def sweep_labels(state: ChainState, beta, width, height, rng, order=NeighborhoodOrder.FIRST, threads=1):
    """Redraw every label once, one checkerboard color at a time."""
    K = state.psi.shape[0]
    P = width * height
    labels = state.labels.copy()
    u = rng.random(P)
    loglik = _class_log_density(state.coeffs, state.psi, state.sigma2)
    for idx in scan_colors(width, height, order):
        counts = neighbor_counts(labels.reshape(height, width), K, order).reshape(K, P)

        def update(block):
            labels[block] = draw_categorical(beta * counts[:, block] + loglik[:, block], u[block])

        _run_blocks(update, idx, threads)
    return labels


# --------------------------------------------------------------------------
# logistic coefficients


def mh_update_coefficients(state: ChainState, problem: UnmixingProblem, proposal_sd, rng, threads=1, iteration=None):
    """Componentwise random-walk Metropolis-Hastings scan of all coefficients.

    For each endmember ``r`` every pixel proposes ``c_rp + N(0, u_r^2)``;
    pixels are conditionally independent given the hyperparameters, so one
    coordinate is updated for all pixels at once.

    Returns the new ``(R, P)`` coefficients and an ``(R, P)`` boolean array
    of accepted moves.
    """
    R, P = state.coeffs.shape
    proposal_sd = np.asarray(proposal_sd, dtype=float)
    steps = rng.standard_normal((R, P)) * proposal_sd[:, None]
    log_u = np.log(rng.random((R, P)))
    coeffs = state.coeffs.copy()
    accepted = np.zeros((R, P), dtype=bool)
    psi = state.psi[state.labels].T  # (R, P)
    sigma2 = state.sigma2[state.labels].T
    s2 = state.s2

    def scan(block):
        c = coeffs[:, block]
        ssr = problem.sq_residuals(softmax_abundances(c), block)
        for r in range(R):
            prop = c.copy()
            prop[r] += steps[r, block]
            ssr_new = problem.sq_residuals(softmax_abundances(prop), block)
            mu, var = psi[r, block], sigma2[r, block]
            # degenerate variances surface as NumericError below, not as warnings
            with np.errstate(divide="ignore", invalid="ignore"):
                log_ratio = (
                    -(ssr_new - ssr) / (2.0 * s2)
                    - ((prop[r] - mu) ** 2 - (c[r] - mu) ** 2) / (2.0 * var)
                )
            bad = ~np.isfinite(log_ratio)
            if bad.any():
                pixel = int(block[np.flatnonzero(bad)[0]])
                raise NumericError(
                    f"non-finite log-target at iteration {iteration}, pixel {pixel}, "
                    f"step coefficient[{r}]"
                )
            ok = log_u[r, block] < log_ratio
            c[r, ok] = prop[r, ok]
            ssr = np.where(ok, ssr_new, ssr)
            accepted[r, block] = ok
        coeffs[:, block] = c

    _run_blocks(scan, np.arange(P), threads)
    return coeffs, accepted


# --------------------------------------------------------------------------
# variances and hyperparameters


def noise_posterior(state: ChainState, problem: UnmixingProblem) -> tuple[float, float]:
    """Shape and scale of the inverse-gamma conditional of the noise variance."""
    ssr = problem.sq_residuals(softmax_abundances(state.coeffs)).sum()
    shape = problem.n_bands * problem.n_pixels / 2.0 + NU
    return shape, state.delta + ssr / 2.0


def sample_noise_variance(state: ChainState, problem: UnmixingProblem, rng) -> float:
    shape, scale = noise_posterior(state, problem)
    return float(inverse_gamma(rng, shape, scale))


def _class_sums(state: ChainState):
    K = state.psi.shape[0]
    onehot = state.labels[None, :] == np.arange(K)[:, None]  # (K, P)
    n = onehot.sum(axis=1).astype(float)
    sums = onehot.astype(float) @ state.coeffs.T  # (K, R)
    return n, sums, onehot


def class_means_posterior(state: ChainState):
    """Mean and variance ``(K, R)`` of the Gaussian conditional of ``psi``."""
    n, sums, _ = _class_sums(state)
    denom = state.sigma2 + state.v2 * n[:, None]
    return state.v2 * sums / denom, state.v2 * state.sigma2 / denom


def sample_class_means(state: ChainState, rng) -> np.ndarray:
    mean, var = class_means_posterior(state)
    return mean + np.sqrt(var) * rng.standard_normal(mean.shape)


def class_variances_posterior(state: ChainState):
    """Shape and scale ``(K, R)`` of the inverse-gamma conditional of ``sigma2``."""
    n, _, onehot = _class_sums(state)
    dev = state.coeffs.T[None, :, :] - state.psi[:, None, :]  # (K, P, R)
    ss = np.einsum("kp,kpr->kr", onehot.astype(float), dev * dev)
    shape = np.broadcast_to(n[:, None] / 2.0 + XI, ss.shape)
    return shape, GAMMA + ss / 2.0


def sample_class_variances(state: ChainState, rng) -> np.ndarray:
    shape, scale = class_variances_posterior(state)
    return inverse_gamma(rng, shape, scale)


def sample_global_hyper(state: ChainState, rng, hyperprior: Hyperprior | None = None):
    """Draw ``(v2, delta)`` and report whether the degenerate branch was taken.

    ``v2 ~ IG(RK/2, sum(psi^2)/2)`` and ``delta ~ Gamma(shape=1, rate=1/s2)``
    (mean ``s2``) under the default Jeffreys hyperpriors.
    """
    hp = hyperprior or Hyperprior()
    K, R = state.psi.shape
    shape = R * K / 2.0 + hp.v2_shape
    scale = 0.5 * float(np.sum(state.psi**2)) + hp.v2_scale
    degenerate = scale <= 0.0
    if degenerate:
        scale = DEGENERATE_SCALE
    v2 = float(inverse_gamma(rng, shape, scale))
    if DELTA_GAMMA_CONVENTION == "rate":
        rate = 1.0 / state.s2 + hp.delta_rate
    else:
        rate = state.s2 + hp.delta_rate
    delta = float(rng.gamma(NU + hp.delta_shape, 1.0 / rate))
    return v2, delta, degenerate


# --------------------------------------------------------------------------
# chain driver


@dataclass
class PosteriorSamples:
    """Post-burn-in draws of one chain."""

    width: int
    height: int
    n_classes: int
    labels: np.ndarray  # (N, P)
    coeffs: np.ndarray  # (N, R, P)
    s2: np.ndarray  # (N,)
    psi: np.ndarray  # (N, K, R)
    sigma2: np.ndarray  # (N, K, R)
    v2: np.ndarray  # (N,)
    delta: np.ndarray  # (N,)
    accept_counts: np.ndarray  # (R, P) accepted moves after burn-in
    proposal_sd: np.ndarray  # (R,) frozen step sizes
    n_iterations: int = 0
    degenerate_v2: int = 0

    @property
    def n_draws(self) -> int:
        return self.labels.shape[0]

    @property
    def acceptance_rates(self) -> np.ndarray:
        """Per-endmember acceptance rate over all pixels and kept iterations."""
        if self.n_draws == 0:
            return np.zeros(self.accept_counts.shape[0])
        return self.accept_counts.sum(axis=1) / (self.n_draws * self.accept_counts.shape[1])

    def save(self, path) -> None:
        """Write an ``.npz`` archive whose bytes depend only on the draws.

        Entries carry a fixed timestamp so identical chains give identical files.
        """
        arrays = {
            "geometry": np.array([self.width, self.height, self.n_classes, self.n_iterations, self.degenerate_v2]),
            "labels": self.labels, "coeffs": self.coeffs, "s2": self.s2, "psi": self.psi,
            "sigma2": self.sigma2, "v2": self.v2, "delta": self.delta,
            "accept_counts": self.accept_counts, "proposal_sd": self.proposal_sd,
        }
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            for name, arr in arrays.items():
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
                info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
                info.compress_type = zipfile.ZIP_DEFLATED
                zf.writestr(info, buf.getvalue())

    @classmethod
    def load(cls, path) -> "PosteriorSamples":
        with np.load(path) as f:
            w, h, K, n_it, degen = (int(v) for v in f["geometry"])
            return cls(
                w, h, K, f["labels"], f["coeffs"], f["s2"], f["psi"], f["sigma2"],
                f["v2"], f["delta"], f["accept_counts"], f["proposal_sd"], n_it, degen,
            )


def _kmeans_labels(A: np.ndarray, K: int, rng, restarts: int = KMEANS_RESTARTS) -> np.ndarray:
    """Lowest-distortion k-means++ clustering of the columns of ``A``."""
    X = A.T
    best, best_labels = np.inf, None
    for _ in range(restarts):
        centers, labels = kmeans2(X, K, minit="++", seed=rng)
        distortion = np.sum((X - centers[labels]) ** 2)
        if distortion < best:
            best, best_labels = distortion, labels
    return best_labels.astype(np.int64)


def initial_state(problem: UnmixingProblem, config: ChainConfig) -> ChainState:
    """Data-driven starting point.

    Coefficients invert the FCLS abundances (zeros lifted to 1e-3).
    Labels are either k-means clusters of the FCLS abundances (default) or
    uniform draws.  A uniform start can leave the chain in a mode where two
    classes share one label and another label is empty, which burn-in does
    not always escape.  The noise variance is the FCLS residual variance;
    class means and variances are per-class statistics of the coefficients.
    """
    K = config.n_classes
    P, R = problem.n_pixels, problem.n_endmembers
    rng = stream(config.seed, 0, Tag.CHAIN_INIT)
    A = fcls_unmix_image(problem.Y, problem.M).values
    if config.init_labels == "kmeans" and 1 < K < P:
        labels = _kmeans_labels(A, K, rng)
    else:
        labels = rng.integers(0, K, size=P)
    coeffs = logistic_from_abundances(A)
    coeffs -= coeffs.mean(axis=0, keepdims=True)
    s2 = float(max(problem.sq_residuals(A).sum() / (P * problem.n_bands), 1e-12))
    psi = np.empty((K, R))
    sigma2 = np.empty((K, R))
    overall_mean = coeffs.mean(axis=1)
    overall_var = coeffs.var(axis=1) if P > 1 else np.ones(R)
    for k in range(K):
        members = coeffs[:, labels == k]
        if members.shape[1] >= 2:
            psi[k] = members.mean(axis=1)
            sigma2[k] = members.var(axis=1)
        else:
            psi[k] = overall_mean
            sigma2[k] = overall_var
    sigma2 = np.maximum(sigma2, 1e-2)
    return ChainState(labels, coeffs, s2, psi, sigma2, v2=10.0, delta=s2)


def default_proposal_sd(state: ChainState, problem: UnmixingProblem) -> np.ndarray:
    """Random-walk scales from the conditional curvature at ``state``.

    For coordinate ``r`` the log-target curvature at pixel ``p`` is roughly
    ``||M da/dc_r||^2 / s2 + 1 / sigma2``; the scale is ``2.4`` times the
    median conditional standard deviation.
    """
    A = softmax_abundances(state.coeffs)
    R = A.shape[0]
    sd = np.empty(R)
    sigma2 = state.sigma2[state.labels].T
    for r in range(R):
        J = -A * A[r]  # da/dc_r = a_r (e_r - a)
        J[r] += A[r]
        curv = np.einsum("rp,rp->p", J, problem.G @ J) / state.s2 + 1.0 / sigma2[r]
        sd[r] = 2.4 * np.median(1.0 / np.sqrt(curv))
    return sd


def gibbs_iteration(state, problem, config, proposal_sd, iteration):
    """One full sweep of the hybrid sampler; returns the new state and MH acceptances.

    The label sweep is skipped while ``iteration <= config.label_warmup``.
    """
    seed = config.seed
    new = state.copy()
    if iteration > config.label_warmup:
        new.labels = sweep_labels(
            new, config.beta, problem.width, problem.height,
            stream(seed, iteration, Tag.LABELS), config.order, config.threads,
        )
    new.coeffs, accepted = mh_update_coefficients(
        new, problem, proposal_sd, stream(seed, iteration, Tag.COEFFS),
        config.threads, iteration,
    )
    new.s2 = sample_noise_variance(new, problem, stream(seed, iteration, Tag.NOISE))
    new.psi = sample_class_means(new, stream(seed, iteration, Tag.MEANS))
    new.sigma2 = sample_class_variances(new, stream(seed, iteration, Tag.VARIANCES))
    new.v2, new.delta, degenerate = sample_global_hyper(
        new, stream(seed, iteration, Tag.GLOBAL), config.hyperprior
    )
    _check_scalars(new, iteration)
    return new, accepted, degenerate


def _check_scalars(state: ChainState, iteration):
    for name in ("s2", "v2", "delta"):
        v = getattr(state, name)
        if not (np.isfinite(v) and v > 0):
            raise NumericError(f"invalid {name}={v} at iteration {iteration}, step {name}")
    for name in ("psi", "sigma2"):
        if not np.all(np.isfinite(getattr(state, name))):
            raise NumericError(f"non-finite {name} at iteration {iteration}, step {name}")
    if np.any(state.sigma2 <= 0):
        raise NumericError(f"nonpositive sigma2 at iteration {iteration}, step sigma2")


@dataclass
class _Progress:
    """Mutable chain bookkeeping that a checkpoint has to carry."""

    iteration: int
    state: ChainState
    proposal_sd: np.ndarray
    window_accepts: np.ndarray
    window_tries: int
    accept_counts: np.ndarray
    degenerate: int
    n_stored: int


def run_chain(Y, M, config: ChainConfig, resume_from=None) -> PosteriorSamples:
    """Run the hybrid Gibbs sampler and keep the post-burn-in draws.

    During burn-in with ``config.adapt`` set, every ``adapt_interval``
    iterations each proposal scale ``u_r`` is multiplied by 1.1 when the
    window acceptance rate is above the target range and by 0.9 when it
    is below; scales are frozen afterwards.
    """
    from . import checkpoint

    problem = Y if isinstance(Y, UnmixingProblem) else UnmixingProblem(Y, M)
    P, R, K = problem.n_pixels, problem.n_endmembers, config.n_classes
    n_keep = config.n_mc - config.n_burn
    store = {
        "labels": np.empty((n_keep, P), dtype=np.int16 if K < 2**15 else np.int64),
        "coeffs": np.empty((n_keep, R, P)),
        "s2": np.empty(n_keep),
        "psi": np.empty((n_keep, K, R)),
        "sigma2": np.empty((n_keep, K, R)),
        "v2": np.empty(n_keep),
        "delta": np.empty(n_keep),
    }

    if resume_from is not None:
        prog = checkpoint.read_checkpoint(resume_from, store, (P, R, K))
    else:
        state = initial_state(problem, config)
        sd = config.proposal_sd if config.proposal_sd is not None else default_proposal_sd(state, problem)
        if sd.shape != (R,):
            raise InvalidArgumentError(f"proposal_sd must have length R={R}")
        prog = _Progress(0, state, np.array(sd, dtype=float), np.zeros(R), 0, np.zeros((R, P), dtype=np.int64), 0, 0)

    lo, hi = config.target_accept
    while prog.iteration < config.n_mc:
        it = prog.iteration + 1
        prog.state, accepted, degenerate = gibbs_iteration(prog.state, problem, config, prog.proposal_sd, it)
        prog.degenerate += int(degenerate)
        if it <= config.n_burn:
            if config.adapt:
                prog.window_accepts += accepted.sum(axis=1)
                prog.window_tries += P
                if it % config.adapt_interval == 0:
                    rate = prog.window_accepts / prog.window_tries
                    prog.proposal_sd = np.where(
                        rate > hi, prog.proposal_sd * 1.1,
                        np.where(rate < lo, prog.proposal_sd * 0.9, prog.proposal_sd),
                    )
                    log.debug("iteration %d acceptance %s -> sd %s", it, rate, prog.proposal_sd)
                    prog.window_accepts[:] = 0
                    prog.window_tries = 0
        else:
            i = prog.n_stored
            s = prog.state
            store["labels"][i] = s.labels
            store["coeffs"][i] = s.coeffs
            store["s2"][i] = s.s2
            store["psi"][i] = s.psi
            store["sigma2"][i] = s.sigma2
            store["v2"][i] = s.v2
            store["delta"][i] = s.delta
            prog.accept_counts += accepted
            prog.n_stored += 1
        prog.iteration = it
        if config.checkpoint_every and it % config.checkpoint_every == 0 and it < config.n_mc:
            checkpoint.write_checkpoint(config.checkpoint_path, prog, store)

    if prog.degenerate:
        log.warning("v2 conditional was degenerate in %d iterations", prog.degenerate)
    return PosteriorSamples(
        problem.width, problem.height, K,
        store["labels"], store["coeffs"], store["s2"], store["psi"], store["sigma2"],
        store["v2"], store["delta"], prog.accept_counts, prog.proposal_sd,
        n_iterations=config.n_mc, degenerate_v2=prog.degenerate,
    )


# --------------------------------------------------------------------------
# estimators


def _require_draws(samples: PosteriorSamples):
    if samples.n_draws == 0:
        raise InvalidStateError("chain holds no stored draws")


def estimate_map_labels(samples: PosteriorSamples) -> LabelField:
    """Per-pixel mode of the label draws; ties go to the smallest label."""
    _require_draws(samples)
    K = samples.n_classes
    counts = np.stack([(samples.labels == k).sum(axis=0) for k in range(K)])
    return LabelField(samples.width, samples.height, np.argmax(counts, axis=0), K)


def estimate_mmse_abundances(samples: PosteriorSamples, z_map: LabelField | None = None) -> AbundanceMatrix:
    """Posterior-mean abundances, each pixel averaged over the draws where its
    label equals the marginal MAP label."""
    _require_draws(samples)
    if z_map is None:
        z_map = estimate_map_labels(samples)
    A = np.stack([softmax_abundances(c) for c in samples.coeffs])  # (N, R, P)
    match = (samples.labels == z_map.labels[None, :]).astype(float)  # (N, P)
    n = match.sum(axis=0)
    est = np.einsum("np,nrp->rp", match, A) / np.where(n > 0, n, 1.0)
    if np.any(n == 0):
        fallback = A.mean(axis=0)
        est[:, n == 0] = fallback[:, n == 0]
    return AbundanceMatrix(est / est.sum(axis=0, keepdims=True))


@dataclass
class ClassAbundancePosterior:
    """Posterior cloud of the class abundance mean ``mu_k``."""

    cloud: np.ndarray  # (m, R), one row per draw in which the class is occupied
    counts: np.ndarray  # (R, bins)
    edges: np.ndarray  # (R, bins + 1)
    mean: np.ndarray  # (R,)

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:, 1:] + self.edges[:, :-1])


def class_abundance_posterior(samples: PosteriorSamples, k: int, bins: int = 30) -> ClassAbundancePosterior:
    _require_draws(samples)
    means = []
    for labels, coeffs in zip(samples.labels, samples.coeffs):
        members = labels == k
        if not members.any():
            continue
        means.append(softmax_abundances(coeffs[:, members]).mean(axis=1))
    if not means:
        raise EmptyClassError(f"class {k} is empty in every stored draw")
    cloud = np.array(means)
    R = cloud.shape[1]
    counts = np.empty((R, bins), dtype=np.int64)
    edges = np.empty((R, bins + 1))
    for r in range(R):
        lo, hi = cloud[:, r].min(), cloud[:, r].max()
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5e-3, hi + 0.5e-3
        counts[r], edges[r] = np.histogram(cloud[:, r], bins=bins, range=(lo, hi))
    return ClassAbundancePosterior(cloud, counts, edges, cloud.mean(axis=0))
