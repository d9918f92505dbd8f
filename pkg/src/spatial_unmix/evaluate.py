"""Scoring of unmixing results and a light-weight chain health report."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InvalidArgumentError
from .model import AbundanceMatrix
from .potts import LabelField

log = logging.getLogger(__name__)

EXHAUSTIVE_MAX_CLASSES = 8
SHIFT_THRESHOLD = 0.10


def _values(a) -> np.ndarray:
    return a.values if isinstance(a, AbundanceMatrix) else np.asarray(a, dtype=float)


def global_mse(estimated, truth) -> np.ndarray:
    """Per-endmember mean squared abundance error over all pixels, shape ``(R,)``."""
    est, tru = _values(estimated), _values(truth)
    if est.shape != tru.shape:
        raise InvalidArgumentError(f"abundance shapes differ: {est.shape} vs {tru.shape}")
    return np.mean((est - tru) ** 2, axis=1)


def _confusion(z_hat: np.ndarray, z_true: np.ndarray, K: int) -> np.ndarray:
    conf = np.zeros((K, K), dtype=np.int64)
    np.add.at(conf, (z_hat, z_true), 1)
    return conf


def classification_accuracy(z_hat: LabelField, z_true: LabelField) -> tuple[float, np.ndarray]:
    """Best pixel agreement over relabelings of ``z_hat``.

    Returns ``(accuracy, perm)`` where estimated class ``k`` corresponds to
    true class ``perm[k]``.  All ``K!`` permutations are tried for
    ``K <= 8``; above that the optimal assignment is found with the
    Hungarian algorithm and a warning is logged.
    """
    if (z_hat.width, z_hat.height) != (z_true.width, z_true.height):
        raise InvalidArgumentError(
            f"label maps differ in size: {z_hat.width}x{z_hat.height} vs {z_true.width}x{z_true.height}"
        )
    if z_hat.n_classes != z_true.n_classes:
        raise InvalidArgumentError(f"class counts differ: {z_hat.n_classes} vs {z_true.n_classes}")
    K = z_true.n_classes
    P = z_true.labels.size
    conf = _confusion(z_hat.labels, z_true.labels, K)
    if K <= EXHAUSTIVE_MAX_CLASSES:
        best_hits, best = -1, None
        for perm in itertools.permutations(range(K)):
            hits = conf[np.arange(K), perm].sum()
            if hits > best_hits:
                best_hits, best = hits, perm
        perm = np.array(best)
    else:
        log.warning("K=%d above %d: using assignment matching instead of exhaustive search",
                    K, EXHAUSTIVE_MAX_CLASSES)
        _, perm = linear_sum_assignment(-conf)
        best_hits = conf[np.arange(K), perm].sum()
    return float(best_hits / P) if P else 1.0, perm


def class_moments(abundances, labels: LabelField) -> tuple[np.ndarray, np.ndarray]:
    """Empirical per-class abundance means and variances, each ``(K, R)``.

    Rows of empty classes are NaN.
    """
    A = _values(abundances)
    if A.shape[1] != labels.labels.size:
        raise InvalidArgumentError(f"{A.shape[1]} abundance columns for {labels.labels.size} labels")
    K, R = labels.n_classes, A.shape[0]
    means = np.full((K, R), np.nan)
    variances = np.full((K, R), np.nan)
    for k in range(K):
        members = A[:, labels.labels == k]
        if members.shape[1]:
            means[k] = members.mean(axis=1)
            variances[k] = members.var(axis=1)
    return means, variances


# --------------------------------------------------------------------------
# chain diagnostics


@dataclass
class TraceSummary:
    name: str
    first_mean: float
    second_mean: float
    first_var: float
    second_var: float
    shift: float  # |second - first| / |first|
    flagged: bool
    degenerate: bool


@dataclass
class ChainReport:
    n_draws: int
    acceptance: list
    acceptance_in_target: list
    target: tuple
    traces: list = field(default_factory=list)
    s2: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def flagged(self) -> list[str]:
        return [t.name for t in self.traces if t.flagged]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)

    def to_text(self) -> str:
        lo, hi = self.target
        lines = [f"stored draws: {self.n_draws}", f"MH acceptance (target {lo:g}..{hi:g}):"]
        for r, (rate, ok) in enumerate(zip(self.acceptance, self.acceptance_in_target)):
            lines.append(f"  u_{r + 1}: {rate:.3f}{'' if ok else '  OUT OF RANGE'}")
        s = self.s2
        lines.append(
            f"noise variance s2: mean {s['mean']:.4g} sd {s['sd']:.3g} "
            f"range [{s['min']:.4g}, {s['max']:.4g}]"
        )
        lines.append(f"two-half mean shifts above {SHIFT_THRESHOLD:.0%}:")
        flagged = [t for t in self.traces if t.flagged]
        for t in flagged:
            lines.append(f"  {t.name}: {t.first_mean:.4g} -> {t.second_mean:.4g} ({t.shift:.1%})")
        if not flagged:
            lines.append("  none")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


def trace_summary(name: str, trace, threshold: float = SHIFT_THRESHOLD) -> TraceSummary:
    """Compare the first and second halves of a scalar trace."""
    x = np.asarray(trace, dtype=float)
    half = x.size // 2
    a, b = x[:half], x[half:]
    m1, m2 = float(a.mean()), float(b.mean())
    degenerate = bool(np.all(x == x[0]))
    if degenerate or m1 == m2:
        shift = 0.0
    elif m1 == 0.0:
        shift = float("inf")
    else:
        shift = abs(m2 - m1) / abs(m1)
    flagged = (not degenerate) and shift > threshold
    return TraceSummary(name, m1, m2, float(a.var()), float(b.var()), shift, flagged, degenerate)


def chain_report(samples, target=(0.15, 0.5), threshold: float = SHIFT_THRESHOLD) -> ChainReport:
    """Acceptance rates, two-half trace comparisons and an ``s2`` summary."""
    n = samples.n_draws
    if n < 2:
        raise InvalidArgumentError(f"chain report needs at least 2 stored draws, got {n}")
    lo, hi = target
    rates = [float(r) for r in samples.acceptance_rates]
    in_target = [bool(lo <= r <= hi) for r in rates]

    scalars = {"s2": samples.s2, "v2": samples.v2, "delta": samples.delta}
    K, R = samples.psi.shape[1:]
    for k in range(K):
        for r in range(R):
            scalars[f"psi[{k},{r}]"] = samples.psi[:, k, r]
            scalars[f"sigma2[{k},{r}]"] = samples.sigma2[:, k, r]
    traces = [trace_summary(name, t, threshold) for name, t in scalars.items()]

    notes = [f"degenerate trace: {t.name} is constant" for t in traces if t.degenerate]
    if samples.degenerate_v2:
        notes.append(f"v2 conditional was degenerate in {samples.degenerate_v2} iterations")
    notes.extend(
        f"acceptance of u_{r + 1} = {rate:.3f} outside [{lo:g}, {hi:g}]"
        for r, (rate, ok) in enumerate(zip(rates, in_target)) if not ok
    )
    s2 = np.asarray(samples.s2, dtype=float)
    q05, q50, q95 = np.quantile(s2, [0.05, 0.5, 0.95])
    s2_summary = {
        "mean": float(s2.mean()), "sd": float(s2.std()), "min": float(s2.min()),
        "max": float(s2.max()), "q05": float(q05), "median": float(q50), "q95": float(q95),
    }
    return ChainReport(n, rates, in_target, tuple(target), traces, s2_summary, notes)
