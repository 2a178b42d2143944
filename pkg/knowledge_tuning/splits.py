"""Seeded shuffling, 7:1:2 splitting and the few-shot / unseen-entity experiment subsets."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterator, List, Sequence, Tuple, TypeVar

from .errors import DataError
from .kb_store import normalize

T = TypeVar("T")

MASK64 = (1 << 64) - 1
DEFAULT_FEW_SHOT_SIZES = tuple(range(100, 801, 100))
DEFAULT_ENTITY_FRACTIONS = (0.0005, 0.001, 0.01, 0.05, 0.1, 0.2, 0.4, 0.6)
MIN_SPLIT_SIZE = 10


class SplitMix64:
    """64-bit SplitMix generator; pinned so shuffles reproduce across languages."""

    def __init__(self, seed: int) -> None:
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def __iter__(self) -> Iterator[int]:
        while True:
            yield self.next()


def seeded_shuffle(items: Sequence[T], seed: int) -> List[T]:
    """Fisher-Yates from the last position down, j = next() mod (i + 1)."""
    out = list(items)
    rng = SplitMix64(seed)
    for i in range(len(out) - 1, 0, -1):
        j = rng.next() % (i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def _exact(value: float) -> Fraction:
    return Fraction(value).limit_denominator(1_000_000)


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 42
    ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)

    def __post_init__(self) -> None:
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise DataError(f"Split ratios must be three positive numbers, got {self.ratios}")
        if sum(_exact(r) for r in self.ratios) != 1:
            raise DataError(f"Split ratios must sum to 1, got {self.ratios}")

    def sizes(self, n: int) -> Tuple[int, int, int]:
        train_share, valid_share, _ = (_exact(r) for r in self.ratios)
        first_cut = math.floor(train_share * n)
        second_cut = math.floor((train_share + valid_share) * n)
        return first_cut, second_cut - first_cut, n - second_cut


def split(dataset: Sequence[T], spec: SplitSpec = SplitSpec()) -> Tuple[List[T], List[T], List[T]]:
    n = len(dataset)
    if n < MIN_SPLIT_SIZE:
        raise DataError(f"Dataset too small to split: {n} < {MIN_SPLIT_SIZE}")
    shuffled = seeded_shuffle(dataset, spec.seed)
    n_train, n_valid, _ = spec.sizes(n)
    return shuffled[:n_train], shuffled[n_train : n_train + n_valid], shuffled[n_train + n_valid :]


def few_shot_subsets(
    pool: Sequence[T],
    sizes: Sequence[int] = DEFAULT_FEW_SHOT_SIZES,
    seed: int = 42,
) -> List[List[T]]:
    """Prefixes of one seeded shuffle, so every larger subset contains the smaller ones."""
    if not sizes:
        return []
    if min(sizes) < 1:
        raise DataError(f"Few-shot sizes must be positive, got {list(sizes)}")
    if max(sizes) > len(pool):
        raise DataError(f"Few-shot size {max(sizes)} exceeds pool of {len(pool)} instances")
    shuffled = seeded_shuffle(pool, seed)
    return [shuffled[:size] for size in sizes]


@dataclass(frozen=True)
class EntitySplit:
    fraction: float
    entities: Tuple[str, ...]
    train: Tuple[T, ...]


def unseen_entity_splits(
    dataset: Sequence[T],
    fractions: Sequence[float] = DEFAULT_ENTITY_FRACTIONS,
    seed: int = 42,
) -> Tuple[List[EntitySplit], List[T]]:
    """Training sets drawn from the first ceil(f * E) entities of one seeded entity shuffle.

    The test set is the whole dataset and is the same for every fraction.
    """
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise DataError(f"Entity fraction {f} outside (0, 1]")

    # grouping is on the normalized key; splits report the first-seen spelling
    names: Dict[str, str] = {}
    for inst in dataset:
        entity = getattr(inst, "entity")
        names.setdefault(normalize(entity), entity)
    order = seeded_shuffle(sorted(names), seed)
    splits: List[EntitySplit] = []
    for f in fractions:
        count = math.ceil(_exact(f) * len(order))
        chosen = set(order[:count])
        train = tuple(inst for inst in dataset if normalize(getattr(inst, "entity")) in chosen)
        entities = tuple(sorted(names[key] for key in chosen))
        splits.append(EntitySplit(fraction=f, entities=entities, train=train))
    return splits, list(dataset)


def sample_without_replacement(items: Sequence[T], n: int, seed: int) -> List[T]:
    if n < 0 or n > len(items):
        raise DataError(f"Cannot sample {n} items from {len(items)}")
    return seeded_shuffle(items, seed)[:n]
