"""Random binary-perceptron feasibility instances and desk-scale experiments.

An instance with matrix G (m x n), margin kappa is feasible when some sign
vector sigma in {-1, +1}^n has (G sigma)_i / sqrt(n) >= kappa for every row.
Equality counts as satisfied.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .quadrature import ParameterError

MAX_EXHAUSTIVE_N = 30
_NAIVE_CHUNK = 1 << 14


class CapacityError(ValueError):
    """The requested exhaustive search is too large."""


def constraint_count(n: int, alpha: float) -> int:
    """m = round(alpha n), with halves rounded up."""
    return int(math.floor(alpha * n + 0.5))


def row_stream(seed: int, trial: int, row: int) -> np.random.Generator:
    """Independent generator for one matrix row, keyed by (seed, trial, row)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(trial, row))))


def gaussian_rows(seed: int, trial: int, m: int, n: int) -> np.ndarray:
    """Rows 0..m-1 of the trial's matrix; a row never depends on m."""
    out = np.empty((m, n))
    for i in range(m):
        out[i] = row_stream(seed, trial, i).standard_normal(n)
    return out


@dataclass(frozen=True)
class AbpInstance:
    n: int
    m: int
    kappa: float
    G: np.ndarray
    seed: int
    trial: int = 0

    def __post_init__(self) -> None:
        if self.n < 1 or self.m < 1:
            raise ParameterError(f"need n >= 1 and m >= 1, got n={self.n}, m={self.m}")
        G = np.array(self.G, dtype=float)
        if G.shape != (self.m, self.n):
            raise ParameterError(f"matrix has shape {G.shape}, expected {(self.m, self.n)}")
        if not np.all(np.isfinite(G)):
            raise ParameterError("matrix entries must be finite")
        G.setflags(write=False)
        object.__setattr__(self, "G", G)

    @property
    def threshold(self) -> float:
        """Bound on the unscaled products G sigma."""
        return self.kappa * math.sqrt(self.n)

    def margin(self, sigma: Sequence[int]) -> float:
        """min_i (G sigma)_i / sqrt(n) - kappa, by direct multiplication."""
        s = np.asarray(sigma, dtype=float)
        return float(np.min(self.G @ s)) / math.sqrt(self.n) - self.kappa

    def satisfied_by(self, sigma: Sequence[int]) -> bool:
        s = np.asarray(sigma, dtype=float)
        if s.shape != (self.n,) or not np.all(np.abs(s) == 1.0):
            raise ParameterError("sigma must be a vector of +-1 of length n")
        return bool(np.all(self.G @ s >= self.threshold))

    def with_rows(self, order: Sequence[int]) -> "AbpInstance":
        """Same instance with constraint rows taken in ``order``."""
        idx = np.asarray(order, dtype=int)
        return AbpInstance(self.n, idx.size, self.kappa, self.G[idx], self.seed, self.trial)


@dataclass(frozen=True)
class FeasibilityReport:
    """Outcome of a feasibility search.

    ``margin`` is taken at the witness when one was found and otherwise is the
    best worst-row margin among the vectors visited.  ``proven`` tells whether
    an infeasible answer is certain (exhaustive search) or only "not found".
    """

    feasible: bool
    witness: Optional[tuple[int, ...]]
    margin: float
    candidates_checked: int
    proven: bool = True
    method: str = "gray"

    @property
    def status(self) -> str:
        if self.feasible:
            return "feasible"
        return "infeasible" if self.proven else "not_found"

    def as_dict(self) -> dict:
        return {
            "feasible": self.feasible,
            "status": self.status,
            "witness": list(self.witness) if self.witness is not None else None,
            "margin": self.margin,
            "candidates_checked": self.candidates_checked,
            "method": self.method,
        }


def generate_instance(n: int, alpha: float, kappa: float, seed: int, trial: int = 0) -> AbpInstance:
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    if not alpha > 0.0 or alpha * n < 1.0:
        raise ParameterError(f"need alpha > 0 and alpha*n >= 1, got alpha={alpha}, n={n}")
    if not 0 <= seed < 2**64:
        raise ParameterError("seed must be a 64-bit unsigned integer")
    if not math.isfinite(kappa):
        raise ParameterError("kappa must be finite")
    m = constraint_count(n, alpha)
    return AbpInstance(n, m, float(kappa), gaussian_rows(seed, trial, m, n), seed, trial)


def gray_state(step: int) -> int:
    """Bit mask of the -1 entries after ``step`` Gray-code flips."""
    return step ^ (step >> 1)


def sign_vector(state: int, n: int) -> tuple[int, ...]:
    return tuple(-1 if (state >> j) & 1 else 1 for j in range(n))


def _check_size(n: int) -> None:
    if n > MAX_EXHAUSTIVE_N:
        raise CapacityError(f"exhaustive search is limited to n <= {MAX_EXHAUSTIVE_N}, got n={n}")


def _scan(instance: AbpInstance, stop_at_witness: bool = True):
    cols = np.ascontiguousarray(instance.G.T)
    return kernels.gray_scan(cols, instance.threshold, stop_at_witness)


def exhaustive_feasible(instance: AbpInstance) -> FeasibilityReport:
    """Exact decision by a Gray-code walk over all 2^n sign vectors."""
    _check_size(instance.n)
    witness, _, _, best_min, checked, _ = _scan(instance)
    if witness < 0:
        margin = best_min / math.sqrt(instance.n) - instance.kappa
        return FeasibilityReport(False, None, margin, int(checked))
    sigma = sign_vector(gray_state(int(witness)), instance.n)
    if not instance.satisfied_by(sigma):
        # the incremental sums disagree with the direct product on a tie;
        # settle the instance with direct products throughout
        return naive_feasible(instance)
    return FeasibilityReport(True, sigma, instance.margin(sigma), int(checked))


def naive_feasible(instance: AbpInstance) -> FeasibilityReport:
    """Reference decision: every sign vector multiplied out directly."""
    n = instance.n
    _check_size(n)
    thr = instance.threshold
    bits = np.arange(n)
    best = -math.inf
    checked = 0
    for start in range(0, 1 << n, _NAIVE_CHUNK):
        codes = np.arange(start, min(start + _NAIVE_CHUNK, 1 << n), dtype=np.int64)
        S = 1.0 - 2.0 * ((codes[:, None] >> bits) & 1)
        low = (S @ instance.G.T).min(axis=1)
        hit = np.flatnonzero(low >= thr)
        if hit.size:
            sigma = tuple(int(v) for v in S[hit[0]])
            return FeasibilityReport(True, sigma, instance.margin(sigma), checked + int(hit[0]) + 1,
                                     method="naive")
        best = max(best, float(low.max()))
        checked += codes.size
    return FeasibilityReport(False, None, best / math.sqrt(n) - instance.kappa, checked, method="naive")


@dataclass(frozen=True)
class CurvePoint:
    alpha: float
    m: int
    probability: float
    stderr: float
    feasible: int
    trials: int

    def as_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "m": self.m,
            "probability": self.probability,
            "stderr": self.stderr,
            "feasible": self.feasible,
            "trials": self.trials,
        }


def feasible_prefix(n: int, m_max: int, kappa: float, seed: int, trial: int) -> int:
    """Largest k <= m_max such that the first k rows of the trial's matrix are jointly feasible."""
    _check_size(n)
    cols = np.ascontiguousarray(gaussian_rows(seed, trial, m_max, n).T)
    witness, best_prefix, _, _, _, _ = kernels.gray_scan(cols, kappa * math.sqrt(n), True)
    return m_max if witness >= 0 else int(best_prefix)


def _local_prefix(n: int, ms: Sequence[int], kappa: float, seed: int, trial: int,
                  restarts: int, max_flips: Optional[int]) -> int:
    # largest grid size whose prefix local search solves; smaller ones inherit the witness
    G = gaussian_rows(seed, trial, max(ms), n)
    search_seed = int(np.random.SeedSequence(seed, spawn_key=(trial, 1 << 31)).generate_state(1)[0])
    for m in sorted(set(ms), reverse=True):
        inst = AbpInstance(n, m, kappa, G[:m], seed, trial)
        if local_search(inst, restarts, max_flips, search_seed).feasible:
            return m
    return 0


def satisfiability_curve(n: int, alphas: Sequence[float], trials: int, kappa: float = 0.0,
                         seed: int = 0, *, search: str = "exhaustive", restarts: int = 50,
                         max_flips: Optional[int] = None) -> list[CurvePoint]:
    """Empirical feasibility probability at each density.

    Every density uses the same matrices: the instance at a density keeps the
    first m rows of the trial's matrix, so per trial feasibility can only be
    lost as the density grows.  With ``search="exhaustive"`` one walk per trial
    serves the whole grid.  ``search="local"`` counts an instance as feasible
    when local search finds a witness, which can undercount.
    """
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    if search not in ("exhaustive", "local"):
        raise ParameterError(f"unknown search mode {search!r}")
    alphas = [float(a) for a in alphas]
    if not alphas:
        return []
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    ms = [constraint_count(n, a) for a in alphas]
    if min(ms) < 1:
        raise ParameterError("every density must give at least one constraint")
    if search == "exhaustive":
        _check_size(n)
        m_max = max(ms)
        prefixes = np.array([feasible_prefix(n, m_max, kappa, seed, t) for t in range(trials)])
    else:
        prefixes = np.array([
            _local_prefix(n, ms, kappa, seed, t, restarts, max_flips) for t in range(trials)
        ])
    out = []
    for a, m in zip(alphas, ms):
        k = int(np.count_nonzero(prefixes >= m))
        p = k / trials
        out.append(CurvePoint(a, m, p, math.sqrt(p * (1.0 - p) / trials), k, trials))
    return out


def half_crossing(curve: Sequence[CurvePoint]) -> Optional[float]:
    """Density where the curve first falls through 1/2, by linear interpolation."""
    pts = sorted(curve, key=lambda c: c.alpha)
    for a, b in zip(pts, pts[1:]):
        if a.probability >= 0.5 > b.probability:
            t = (a.probability - 0.5) / (a.probability - b.probability)
            return a.alpha + t * (b.alpha - a.alpha)
    return None


def _energy(y: np.ndarray, thr: float) -> float:
    v = np.maximum(thr - y, 0.0)
    return float(v @ v)


def local_search(instance: AbpInstance, restarts: int = 50, max_flips: Optional[int] = None,
                 seed: int = 0, max_sideways: Optional[int] = None) -> FeasibilityReport:
    """Greedy single-flip descent on sum_i max(kappa - (G sigma)_i / sqrt(n), 0)^2.

    Each restart begins from a uniform random sign vector and repeatedly takes
    the flip with the lowest resulting energy while that does not raise it;
    runs of equal-energy (sideways) moves are capped at ``max_sideways``.
    A failure to find a witness proves nothing, so such reports carry
    ``proven=False``.
    """
    if restarts < 1:
        raise ParameterError("restarts must be >= 1")
    n = instance.n
    if max_flips is None:
        max_flips = 10 * n
    if max_sideways is None:
        max_sideways = n
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    G = instance.G
    scale = 1.0 / n
    thr = instance.threshold
    best_low = -math.inf
    visited = 0
    for _ in range(restarts):
        sigma = rng.choice(np.array([-1.0, 1.0]), size=n)
        y = G @ sigma
        energy = _energy(y, thr) * scale
        sideways = 0
        visited += 1
        best_low = max(best_low, float(y.min()))
        for _ in range(max_flips):
            if energy == 0.0:
                break
            # products after flipping each coordinate, one column per flip
            Y = y[:, None] - 2.0 * G * sigma
            E = np.square(np.maximum(thr - Y, 0.0)).sum(axis=0) * scale
            j = int(np.argmin(E))
            if E[j] > energy:
                break
            if E[j] == energy:
                sideways += 1
                if sideways > max_sideways:
                    break
                ties = np.flatnonzero(E == energy)
                j = int(rng.choice(ties))
            else:
                sideways = 0
            sigma[j] = -sigma[j]
            y = Y[:, j].copy()
            energy = float(E[j])
            visited += 1
            best_low = max(best_low, float(y.min()))
        if energy == 0.0:
            witness = tuple(int(v) for v in sigma)
            if instance.satisfied_by(witness):
                return FeasibilityReport(True, witness, instance.margin(witness), visited,
                                         proven=True, method="local")
    margin = best_low / math.sqrt(n) - instance.kappa
    return FeasibilityReport(False, None, margin, visited, proven=False, method="local")
