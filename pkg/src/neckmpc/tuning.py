"""Offline weight tuning: multi-objective genetic search over the ten cost
weights, minimizing all twelve response objectives at once.

A standard elitist non-dominated-sorting loop (binary tournament on rank and
crowding, simulated-binary crossover, polynomial mutation, bound clipping)
maintains a cumulative archive of mutually non-dominated evaluations and a
full append-only sample trace for the downstream sensitivity analysis.
"""

from __future__ import annotations

import csv
import multiprocessing
from dataclasses import dataclass, field

import numpy as np

from .analysis import FEVAL_NAMES, FevalVector, DEFAULT_PENALTY
from .mpc import WeightVector

N_WEIGHTS = 10
N_OBJECTIVES = 12

WEIGHT_KEYS = tuple(WeightVector.EFFORT_KEYS) + tuple(WeightVector.CONFLICT_KEYS)


@dataclass
class GaConfig:
    population: int = 32
    generations: int = 20
    crossover_prob: float = 0.9
    crossover_eta: float = 15.0
    mutation_prob: float = 0.1
    mutation_eta: float = 20.0
    lower_bounds: np.ndarray = field(default_factory=lambda: np.full(N_WEIGHTS, 0.1))
    upper_bounds: np.ndarray = field(default_factory=lambda: np.full(N_WEIGHTS, 100.0))
    seed: int = 0
    parallel_width: int = 1

    def __post_init__(self):
        self.lower_bounds = np.asarray(self.lower_bounds, dtype=float)
        self.upper_bounds = np.asarray(self.upper_bounds, dtype=float)
        if self.lower_bounds.shape != (N_WEIGHTS,) or self.upper_bounds.shape != (N_WEIGHTS,):
            raise ValueError(f"bounds must hold {N_WEIGHTS} entries")
        if np.any(self.lower_bounds >= self.upper_bounds):
            raise ValueError("lower bounds must be strictly below upper bounds")
        if self.population < 4 or self.population % 2:
            raise ValueError("population must be even and at least 4")
        if self.generations < 0:
            raise ValueError("generations must be non-negative")
        if self.parallel_width < 1:
            raise ValueError("parallel_width must be at least 1")


@dataclass
class EvaluationSample:
    weights: np.ndarray
    fevals: np.ndarray
    generation: int


@dataclass
class ParetoArchive:
    """Mutually non-dominated (weights, objectives) pairs."""

    entries: list[EvaluationSample] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def insert(self, sample: EvaluationSample) -> bool:
        """Add if non-dominated; evict entries the newcomer dominates."""
        for e in self.entries:
            if dominates(e.fevals, sample.fevals) or np.array_equal(e.fevals, sample.fevals):
                return False
        self.entries = [e for e in self.entries if not dominates(sample.fevals, e.fevals)]
        self.entries.append(sample)
        return True

    def objectives(self) -> np.ndarray:
        return np.array([e.fevals for e in self.entries])


def dominates(a: np.ndarray, b: np.ndarray) -> bool:
    """True iff ``a`` is no worse everywhere and strictly better somewhere."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return bool(np.all(a <= b) and np.any(a < b))


def non_dominated_filter(points: np.ndarray) -> np.ndarray:
    """Indices of the non-dominated rows (brute-force pairwise scan)."""
    points = np.asarray(points, dtype=float)
    keep = []
    for i in range(len(points)):
        dominated = False
        for j in range(len(points)):
            if i != j and dominates(points[j], points[i]):
                dominated = True
                break
        if not dominated:
            keep.append(i)
    return np.array(keep, dtype=int)


def _fast_non_dominated_sort(F: np.ndarray) -> list[np.ndarray]:
    n = len(F)
    S = [[] for _ in range(n)]
    counts = np.zeros(n, dtype=int)
    fronts = [[]]
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if dominates(F[i], F[j]):
                S[i].append(j)
            elif dominates(F[j], F[i]):
                counts[i] += 1
        if counts[i] == 0:
            fronts[0].append(i)
    k = 0
    while fronts[k]:
        nxt = []
        for i in fronts[k]:
            for j in S[i]:
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(j)
        fronts.append(nxt)
        k += 1
    return [np.array(f, dtype=int) for f in fronts[:-1]]


def _crowding_distance(F: np.ndarray) -> np.ndarray:
    n, m = F.shape
    dist = np.zeros(n)
    if n <= 2:
        return np.full(n, np.inf)
    for k in range(m):
        order = np.argsort(F[:, k], kind="stable")
        lo, hi = F[order[0], k], F[order[-1], k]
        dist[order[0]] = dist[order[-1]] = np.inf
        if hi - lo <= 0:
            continue
        for r in range(1, n - 1):
            dist[order[r]] += (F[order[r + 1], k] - F[order[r - 1], k]) / (hi - lo)
    return dist


def _sbx_crossover(p1, p2, lo, hi, eta, rng):
    c1, c2 = p1.copy(), p2.copy()
    for i in range(len(p1)):
        if rng.random() < 0.5 and abs(p1[i] - p2[i]) > 1e-14:
            u = rng.random()
            beta = (2 * u) ** (1 / (eta + 1)) if u <= 0.5 \
                else (1 / (2 * (1 - u))) ** (1 / (eta + 1))
            c1[i] = 0.5 * ((1 + beta) * p1[i] + (1 - beta) * p2[i])
            c2[i] = 0.5 * ((1 - beta) * p1[i] + (1 + beta) * p2[i])
    return np.clip(c1, lo, hi), np.clip(c2, lo, hi)


def _polynomial_mutation(x, lo, hi, prob, eta, rng):
    out = x.copy()
    for i in range(len(x)):
        if rng.random() < prob:
            u = rng.random()
            if u < 0.5:
                delta = (2 * u) ** (1 / (eta + 1)) - 1
            else:
                delta = 1 - (2 * (1 - u)) ** (1 / (eta + 1))
            out[i] = x[i] + delta * (hi[i] - lo[i])
    return np.clip(out, lo, hi)


def _tournament(ranks, crowd, rng):
    i, j = rng.integers(0, len(ranks), 2)
    if ranks[i] < ranks[j]:
        return i
    if ranks[j] < ranks[i]:
        return j
    return i if crowd[i] >= crowd[j] else j


def _evaluate_many(evaluator, candidates, width, penalty):
    """Ordered evaluation of a candidate batch, optionally across processes."""
    guarded = _PoolEval(evaluator, penalty)
    if width <= 1 or len(candidates) == 1:
        return [guarded(w) for w in candidates]
    with multiprocessing.Pool(processes=width) as pool:
        return pool.map(guarded, [np.asarray(w) for w in candidates])


class _PoolEval:
    """Picklable evaluation wrapper for worker processes."""

    def __init__(self, evaluator, penalty):
        self.evaluator = evaluator
        self.penalty = penalty

    def __call__(self, w):
        try:
            fv = self.evaluator(WeightVector.from_array(w))
            vals = fv.values if isinstance(fv, FevalVector) else np.asarray(fv, dtype=float)
            if vals.shape != (N_OBJECTIVES,) or not np.all(np.isfinite(vals)):
                return np.full(N_OBJECTIVES, self.penalty)
            return vals
        except Exception:
            return np.full(N_OBJECTIVES, self.penalty)


def run_ga(cfg: GaConfig, evaluator, resume_samples: list[EvaluationSample] | None = None,
           penalty: float = DEFAULT_PENALTY) -> tuple[ParetoArchive, list[EvaluationSample]]:
    """Elitist non-dominated-sorting search over the weight box.

    ``evaluator`` maps a :class:`WeightVector` to a :class:`FevalVector` and
    must be deterministic; failures score the penalty vector but stay in the
    sample trace.  Deterministic per seed; candidate evaluations may run
    concurrently up to ``cfg.parallel_width`` with results gathered in
    candidate order.
    """
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.lower_bounds, cfg.upper_bounds
    archive = ParetoArchive()
    samples: list[EvaluationSample] = []
    gen0 = 0

    if resume_samples:
        samples = list(resume_samples)
        for s in samples:
            archive.insert(s)
        gen0 = max(s.generation for s in samples) + 1
        last = [s for s in samples if s.generation == gen0 - 1]
        pop = np.array([s.weights for s in last][: cfg.population])
        while len(pop) < cfg.population:
            pop = np.vstack([pop, rng.uniform(lo, hi)])
        F = np.array([s.fevals for s in last][: cfg.population])
        while len(F) < len(pop):
            F = np.vstack([F, np.full(N_OBJECTIVES, penalty)])
    else:
        pop = rng.uniform(lo, hi, size=(cfg.population, N_WEIGHTS))
        F = np.array(_evaluate_many(evaluator, pop, cfg.parallel_width, penalty))
        for w, f in zip(pop, F):
            s = EvaluationSample(w.copy(), f.copy(), gen0)
            samples.append(s)
            archive.insert(s)
        gen0 += 1

    for gen in range(gen0, gen0 + cfg.generations):
        fronts = _fast_non_dominated_sort(F)
        ranks = np.empty(len(F), dtype=int)
        crowd = np.empty(len(F))
        for r, front in enumerate(fronts):
            ranks[front] = r
            crowd[front] = _crowding_distance(F[front])
        children = []
        while len(children) < cfg.population:
            a = _tournament(ranks, crowd, rng)
            b = _tournament(ranks, crowd, rng)
            if rng.random() < cfg.crossover_prob:
                c1, c2 = _sbx_crossover(pop[a], pop[b], lo, hi, cfg.crossover_eta, rng)
            else:
                c1, c2 = pop[a].copy(), pop[b].copy()
            children.append(_polynomial_mutation(c1, lo, hi, cfg.mutation_prob,
                                                 cfg.mutation_eta, rng))
            if len(children) < cfg.population:
                children.append(_polynomial_mutation(c2, lo, hi, cfg.mutation_prob,
                                                     cfg.mutation_eta, rng))
        children = np.array(children)
        Fc = np.array(_evaluate_many(evaluator, children, cfg.parallel_width, penalty))
        for w, f in zip(children, Fc):
            s = EvaluationSample(w.copy(), f.copy(), gen)
            samples.append(s)
            archive.insert(s)
        # elitist environmental selection on the combined pool
        allpop = np.vstack([pop, children])
        allF = np.vstack([F, Fc])
        fronts = _fast_non_dominated_sort(allF)
        chosen = []
        for front in fronts:
            if len(chosen) + len(front) <= cfg.population:
                chosen.extend(front.tolist())
            else:
                cd = _crowding_distance(allF[front])
                order = front[np.argsort(-cd, kind="stable")]
                chosen.extend(order[: cfg.population - len(chosen)].tolist())
                break
        idx = np.array(chosen, dtype=int)
        pop = allpop[idx]
        F = allF[idx]
    return archive, samples


def select_knee(archive: ParetoArchive) -> EvaluationSample:
    """Entry closest (normalized L2) to the per-objective minima."""
    if len(archive) == 0:
        raise ValueError("archive is empty")
    F = archive.objectives()
    lo = F.min(axis=0)
    span = F.max(axis=0) - lo
    span[span <= 0] = 1.0
    d = np.sqrt(np.sum(((F - lo) / span) ** 2, axis=1))
    return archive.entries[int(np.argmin(d))]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_SAMPLE_COLUMNS = ["generation"] + [f"w_{k}" for k in WEIGHT_KEYS] \
    + [f"feval_{n}" for n in FEVAL_NAMES]


def write_samples_csv(samples: list[EvaluationSample], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(_SAMPLE_COLUMNS)
        for s in samples:
            w.writerow([s.generation] + [repr(float(v)) for v in s.weights]
                       + [repr(float(v)) for v in s.fevals])


def read_samples_csv(path) -> list[EvaluationSample]:
    samples = []
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        if header != _SAMPLE_COLUMNS:
            raise ValueError(f"unexpected sample columns in {path}")
        for lineno, row in enumerate(r, start=2):
            try:
                gen = int(float(row[0]))
                vals = [float(v) for v in row[1:]]
            except (ValueError, IndexError):
                raise ValueError(f"malformed sample row at {path}:{lineno}") from None
            if len(vals) != N_WEIGHTS + N_OBJECTIVES:
                raise ValueError(f"malformed sample row at {path}:{lineno}")
            samples.append(EvaluationSample(
                np.array(vals[:N_WEIGHTS]), np.array(vals[N_WEIGHTS:]), gen))
    return samples


def write_archive_csv(archive: ParetoArchive, path) -> None:
    write_samples_csv(archive.entries, path)
