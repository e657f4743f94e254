"""Episode sampling: N-way K-shot tasks, abstain injection, domain batches.

Randomness discipline: every sampling call takes an :class:`RngStream`,
a (master seed, path) pair mapped through a counter-based bit generator.
Distinct paths give statistically independent, individually reproducible
streams, so evaluation order and parallelism cannot change what any one
episode contains.

Episode draw protocol (fixed; tests rely on it verbatim):

1. draw N relation names without replacement from the sorted name list;
2. per selected relation, in drawn order, draw K+Q instance indices without
   replacement -- first K are support, last Q are query candidates;
3. if alpha > 0, mark query slots as abstain ("none of the above", NOTA):
   one Bernoulli(alpha) draw per slot by default, or a uniform choice of
   exactly round(alpha*N*Q) slots in exact-count mode;
4. each marked slot's candidate is replaced by an instance from outside the
   episode's relations: first a uniform outside relation, then a uniform
   instance within it.

With alpha == 0 steps 3-4 consume no randomness at all, so the draw
sequence is identical to a sampler with no abstain path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .corpus import NOTA_ID, EncodedInstance

__all__ = [
    "EpisodeError",
    "RngStream",
    "PHASE_TRAIN",
    "PHASE_EVAL",
    "PHASE_VALID",
    "PHASE_INIT",
    "PHASE_AUG",
    "PHASE_MEASURE",
    "EpisodeConfig",
    "Episode",
    "DomainBatch",
    "sample_episode",
    "sample_nota_support",
    "sample_domain_batch",
]


class EpisodeError(Exception):
    """Sampling preconditions violated (too few relations or instances)."""


# fixed path constants so independent parts of a run never share a stream
PHASE_TRAIN = 0
PHASE_EVAL = 1
PHASE_VALID = 2
PHASE_INIT = 3
PHASE_AUG = 4
PHASE_MEASURE = 5


class RngStream:
    """Reproducible randomness addressed by (master seed, integer path).

    ``child(*idx)`` extends the path; ``generator()`` materializes a fresh
    generator for this address.  Same address, same draws -- regardless of
    what any other stream did.
    """

    __slots__ = ("master_seed", "path")

    def __init__(self, master_seed: int, path: tuple[int, ...] = ()):
        self.master_seed = int(master_seed)
        self.path = tuple(int(p) for p in path)

    def child(self, *idx: int) -> "RngStream":
        return RngStream(self.master_seed, self.path + tuple(int(i) for i in idx))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.master_seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.master_seed}, path={self.path})"


@dataclass(frozen=True)
class EpisodeConfig:
    """Task shape: N ways, K shots, Q queries per way, abstain rate alpha.

    ``exact_count`` switches abstain injection from per-slot Bernoulli to
    exactly round(alpha*N*Q) slots per episode (variance-controlled mode;
    alpha*N*Q should be integral there or the realized rate is biased).
    """

    n_way: int
    k_shot: int
    q_queries: int
    alpha: float = 0.0
    exact_count: bool = False

    def __post_init__(self):
        if self.n_way < 2:
            raise EpisodeError(f"n_way must be >= 2, got {self.n_way}")
        if self.k_shot < 1:
            raise EpisodeError(f"k_shot must be >= 1, got {self.k_shot}")
        if self.q_queries < 1:
            raise EpisodeError(f"q_queries must be >= 1, got {self.q_queries}")
        if not 0.0 <= self.alpha <= 1.0:
            raise EpisodeError(f"alpha must be in [0, 1], got {self.alpha}")

    @property
    def total_queries(self) -> int:
        return self.n_way * self.q_queries


@dataclass(frozen=True)
class Episode:
    """One sampled task.

    ``support[r]`` holds the K instances of way r; ``labels[i]`` is a way
    index in [0, N) or ``NOTA_ID`` when query i's true relation is outside
    the episode.  Relations are identified by name to stay meaningful across
    corpora with different id spaces.
    """

    relation_names: tuple[str, ...]
    support: tuple[tuple[EncodedInstance, ...], ...]
    queries: tuple[EncodedInstance, ...]
    labels: tuple[int, ...]

    @property
    def n_way(self) -> int:
        return len(self.relation_names)


@dataclass(frozen=True)
class DomainBatch:
    """Balanced instances from two corpora for domain discrimination."""

    source: tuple[EncodedInstance, ...]
    target: tuple[EncodedInstance, ...]

    @property
    def labels(self) -> tuple[int, ...]:
        return (0,) * len(self.source) + (1,) * len(self.target)


Dataset = Mapping[str, Sequence[EncodedInstance]]


def sample_episode(dataset: Dataset, cfg: EpisodeConfig,
                   rng: RngStream) -> Episode:
    """Draw one episode per the protocol in the module docstring."""
    names = sorted(dataset)
    if len(names) < cfg.n_way:
        raise EpisodeError(
            f"need {cfg.n_way} relations, dataset has {len(names)}")
    if cfg.alpha > 0 and len(names) <= cfg.n_way:
        raise EpisodeError("no NOTA source relations: every relation is "
                           "inside the episode")
    g = rng.generator()
    chosen = [names[int(i)] for i in
              g.choice(len(names), size=cfg.n_way, replace=False)]

    support: list[tuple[EncodedInstance, ...]] = []
    candidates: list[list[EncodedInstance]] = []
    need = cfg.k_shot + cfg.q_queries
    for rel in chosen:
        insts = dataset[rel]
        if len(insts) < need:
            raise EpisodeError(
                f"relation {rel!r} has {len(insts)} instances, "
                f"needs {need} (K + Q)")
        idx = g.choice(len(insts), size=need, replace=False)
        support.append(tuple(insts[int(i)] for i in idx[:cfg.k_shot]))
        candidates.append([insts[int(i)] for i in idx[cfg.k_shot:]])

    total = cfg.total_queries
    if cfg.alpha == 0.0:
        flags = np.zeros(total, dtype=bool)
    elif cfg.exact_count:
        n_nota = total - int(np.ceil((1.0 - cfg.alpha) * total))
        flags = np.zeros(total, dtype=bool)
        if n_nota > 0:
            flags[g.choice(total, size=n_nota, replace=False)] = True
    else:
        flags = g.random(total) < cfg.alpha

    outside = [n for n in names if n not in chosen]
    queries: list[EncodedInstance] = []
    labels: list[int] = []
    for r in range(cfg.n_way):
        for j in range(cfg.q_queries):
            slot = r * cfg.q_queries + j
            if flags[slot]:
                rel = outside[int(g.integers(len(outside)))]
                insts = dataset[rel]
                queries.append(insts[int(g.integers(len(insts)))])
                labels.append(NOTA_ID)
            else:
                queries.append(candidates[r][j])
                labels.append(r)
    return Episode(tuple(chosen), tuple(support), tuple(queries), tuple(labels))


def sample_nota_support(train_dataset: Dataset, excluded: set[str], k_shot: int,
                        rng: RngStream) -> tuple[EncodedInstance, ...]:
    """K instances for the abstain way: uniform outside relation, then
    uniform instance within it, independently per shot."""
    outside = [n for n in sorted(train_dataset) if n not in excluded]
    if not outside:
        raise EpisodeError("no relations outside the excluded set")
    g = rng.generator()
    picks = []
    for _ in range(k_shot):
        rel = outside[int(g.integers(len(outside)))]
        insts = train_dataset[rel]
        picks.append(insts[int(g.integers(len(insts)))])
    return tuple(picks)


def _flatten(corpus: Dataset) -> list[EncodedInstance]:
    return [inst for rel in sorted(corpus) for inst in corpus[rel]]


def sample_domain_batch(source_corpus: Dataset, target_corpus: Dataset,
                        half_size: int, rng: RngStream) -> DomainBatch:
    """half_size instances without replacement from each corpus."""
    if half_size < 1:
        raise EpisodeError(f"half_size must be >= 1, got {half_size}")
    src, tgt = _flatten(source_corpus), _flatten(target_corpus)
    for side, pool in (("source", src), ("target", tgt)):
        if len(pool) < half_size:
            raise EpisodeError(
                f"{side} corpus has {len(pool)} instances < half_size {half_size}")
    g = rng.generator()
    si = g.choice(len(src), size=half_size, replace=False)
    ti = g.choice(len(tgt), size=half_size, replace=False)
    return DomainBatch(tuple(src[int(i)] for i in si),
                       tuple(tgt[int(i)] for i in ti))
