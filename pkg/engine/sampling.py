"""
Constant-time discrete sampling: Vose alias tables, weight-proportional edge
sampling and the two negative-sampling noise models.
"""
import logging
import threading
from dataclasses import dataclass

import numpy as np

from models import ValidationError

logger = logging.getLogger(__name__)

UNIGRAM_POWER = 0.75
MAX_REDRAWS = 100


def make_rng(seed):
    """Seeded PCG64 generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True, eq=False)
class AliasTable:
    prob: np.ndarray
    alias: np.ndarray

    @property
    def n(self):
        return len(self.prob)

    def masses(self):
        """Exact distribution encoded by the table."""
        n = self.n
        masses = self.prob / n
        np.add.at(masses, self.alias, (1.0 - self.prob) / n)
        return masses

    def draw(self, rng, size=None):
        """Vectorised draws: a uniform column, then a biased coin."""
        k = rng.integers(0, self.n, size=size)
        coin = rng.random(size=size)
        return np.where(coin < self.prob[k], k, self.alias[k])


def build_alias(weights):
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 1 or len(weights) == 0:
        raise ValidationError("Alias table needs a non-empty 1-d weight vector")
    if np.isnan(weights).any() or (weights < 0).any():
        raise ValidationError("Alias weights must be non-negative numbers")
    total = weights.sum()
    if total <= 0:
        raise ValidationError("Alias weights are all zero")

    n = len(weights)
    scaled = weights * (n / total)
    prob = np.ones(n, dtype=np.float64)
    alias = np.arange(n, dtype=np.int64)

    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        lo = small.pop()
        hi = large.pop()
        prob[lo] = scaled[lo]
        alias[lo] = hi
        scaled[hi] = (scaled[hi] + scaled[lo]) - 1.0
        if scaled[hi] < 1.0:
            small.append(hi)
        else:
            large.append(hi)
    # leftovers carry mass 1 up to rounding
    return AliasTable(prob, alias)


def sample(table, rng):
    """One draw: two random numbers and one comparison."""
    k = int(rng.integers(0, table.n))
    return k if rng.random() < table.prob[k] else int(table.alias[k])


def edge_sampler(g):
    if g.n_edges == 0:
        raise ValidationError(f"Cannot sample edges from empty graph {g.name}")
    return build_alias(g.weight)


class NoiseModel:
    """Distribution q(.|j) over context vertices."""

    mode = None

    def __init__(self, g):
        self.graph = g

    @property
    def n_context(self):
        return self.graph.n_context

    def table_for(self, j):
        raise NotImplementedError

    def distribution(self, j):
        return self.table_for(j).masses()

    def draw(self, j, size, rng):
        return self.table_for(j).draw(rng, size)

    def draw_many(self, targets, m, rng):
        """Negatives for each target, shape (len(targets), m)."""
        raise NotImplementedError


class UnigramNoise(NoiseModel):
    mode = "unigram"

    def __init__(self, g):
        super().__init__(g)
        masses = np.power(g.degree_context, UNIGRAM_POWER)
        if masses.sum() <= 0:
            raise ValidationError(f"All context degrees of {g.name} are zero")
        self.table = build_alias(masses)

    def table_for(self, j):
        return self.table

    def draw_many(self, targets, m, rng):
        return self.table.draw(rng, (len(targets), m))


class ConditionalNoise(NoiseModel):
    """
    Target-aware noise: contexts already tied to j lose mass in proportion to
    the share of their degree spent on j, scaled by their category prior.
    A target adjacent to every context can end up with no mass at all and
    falls back to unigram noise.
    """

    mode = "conditional"

    def __init__(self, g, prior, cat_of):
        super().__init__(g)
        if len(cat_of) != g.n_context:
            raise ValidationError(
                f"cat_of covers {len(cat_of)} contexts, graph {g.name} has {g.n_context}"
            )
        # Pr(cat) is 1 for contexts that are not POIs
        self.p_context = np.array(
            [1.0 if c is None else prior[c] for c in cat_of], dtype=np.float64
        )
        self._tables = {}
        self._lock = threading.Lock()
        self._unigram = None

    def masses(self, j):
        """Unnormalised q(.|j)."""
        g = self.graph
        masses = np.ones(g.n_context, dtype=np.float64)
        contexts, weights = g.target_adjacency(j)
        masses[contexts] = 1.0 - (weights / g.degree_context[contexts]) * self.p_context[contexts]
        return np.clip(masses, 0.0, None)

    def _build(self, j):
        masses = self.masses(j)
        if masses.sum() > 0:
            return build_alias(masses)
        # non-neighbours keep mass 1, so zero total means j touches every context
        logger.warning(f"{self.graph.name}: target {j} touches every context, using unigram noise")
        if self._unigram is None:
            self._unigram = UnigramNoise(self.graph)
        return self._unigram.table

    def table_for(self, j):
        j = int(j)
        table = self._tables.get(j)
        if table is None:
            with self._lock:
                table = self._tables.get(j)
                if table is None:
                    table = self._build(j)
                    self._tables[j] = table
        return table

    def draw_many(self, targets, m, rng):
        targets = np.asarray(targets)
        out = np.empty((len(targets), m), dtype=np.int64)
        for j in np.unique(targets):
            rows = np.flatnonzero(targets == j)
            out[rows] = self.table_for(j).draw(rng, (len(rows), m))
        return out


def unigram_noise(g):
    return UnigramNoise(g)


def conditional_noise(g, prior, cat_of):
    return ConditionalNoise(g, prior, cat_of)


def reject_positives(noise, negatives, positives, targets, rng):
    """
    Redraw negatives equal to the positive context of their edge.

    Slots still colliding after MAX_REDRAWS rounds are marked -1 (skipped).
    """
    negatives = np.array(negatives, copy=True)
    positives = np.asarray(positives).reshape(-1, 1)
    targets = np.asarray(targets)
    for _ in range(MAX_REDRAWS):
        rows, cols = np.nonzero(negatives == positives)
        if len(rows) == 0:
            return negatives
        redrawn = noise.draw_many(targets[rows], 1, rng)[:, 0]
        negatives[rows, cols] = redrawn
    negatives[negatives == positives] = -1
    return negatives


def connected_negative_rate(g, noise, draws, rng):
    """Fraction of sampled negatives that are in fact adjacent to their target."""
    edges = edge_sampler(g).draw(rng, draws)
    targets = g.target[edges]
    negatives = noise.draw_many(targets, 1, rng)[:, 0]
    keys = negatives * g.n_target + targets
    pos = np.searchsorted(g.edge_keys, keys)
    pos = np.minimum(pos, len(g.edge_keys) - 1)
    return float(np.mean(g.edge_keys[pos] == keys))
