"""Jigsaw label space: tile permutations chosen for large pairwise Hamming distance.

The set is grown greedily from the identity.  Each step adds the candidate
whose minimum Hamming distance to the already selected permutations is
largest; ties go to the larger mean distance, then to the lexicographically
smaller permutation.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import _accel
from ._accel import njit

DEFAULT_POOL_SIZE = 100_000
EXHAUSTIVE_LIMIT = 6


class PermutationSetError(ValueError):
    pass


@dataclass(frozen=True)
class PermutationSet:
    n_elements: int
    perms: tuple[tuple[int, ...], ...]
    min_hamming: int
    mean_hamming: Fraction

    def __len__(self) -> int:
        return len(self.perms)

    def __getitem__(self, index: int) -> tuple[int, ...]:
        return self.perms[index]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.perms, dtype=np.int64)

    def index(self, perm) -> int:
        return self.perms.index(tuple(int(v) for v in perm))

    @classmethod
    def from_perms(cls, perms, n_elements: int | None = None) -> "PermutationSet":
        perms = tuple(tuple(int(v) for v in p) for p in perms)
        if not perms:
            raise PermutationSetError("permutation set is empty")
        n = len(perms[0]) if n_elements is None else n_elements
        for i, p in enumerate(perms):
            if sorted(p) != list(range(n)):
                raise PermutationSetError(f"perms[{i}] = {list(p)} is not a bijection of 0..{n - 1}")
        if len(set(perms)) != len(perms):
            raise PermutationSetError("permutation set contains duplicates")
        min_h, mean_h = set_statistics(perms)
        return cls(n, perms, min_h, mean_h)


def hamming(p, q) -> int:
    """Number of positions where ``p`` and ``q`` differ."""
    if len(p) != len(q):
        raise ValueError(f"length mismatch: {len(p)} vs {len(q)}")
    return sum(1 for a, b in zip(p, q) if a != b)


def set_statistics(perms) -> tuple[int, Fraction]:
    """Minimum and mean pairwise Hamming distance of a set of permutations."""
    arr = np.asarray(perms, dtype=np.int64)
    if len(arr) < 2:
        return 0, Fraction(0)
    dist = (arr[:, None, :] != arr[None, :, :]).sum(-1)
    iu = np.triu_indices(len(arr), k=1)
    pairs = dist[iu]
    return int(pairs.min()), Fraction(int(pairs.sum()), len(pairs))


# -- greedy kernels ---------------------------------------------------------
# ``pool`` rows are sorted lexicographically, so "lowest row index" is the
# lexicographic tie-break.


@njit(cache=True)
def _greedy_numba(pool, first, count):
    n_cand, n = pool.shape
    min_d = np.full(n_cand, n + 1, dtype=np.int64)
    sum_d = np.zeros(n_cand, dtype=np.int64)
    chosen = np.empty(count, dtype=np.int64)
    current = first.copy()
    for step in range(count):
        best = -1
        best_min = -1
        best_sum = -1
        for c in range(n_cand):
            d = 0
            for j in range(n):
                if pool[c, j] != current[j]:
                    d += 1
            if d < min_d[c]:
                min_d[c] = d
            sum_d[c] += d
            m = min_d[c]
            if m > best_min or (m == best_min and sum_d[c] > best_sum):
                best = c
                best_min = m
                best_sum = sum_d[c]
        chosen[step] = best
        for j in range(n):
            current[j] = pool[best, j]
    return chosen


def _greedy_numpy(pool, first, count):
    n_cand, n = pool.shape
    min_d = np.full(n_cand, n + 1, dtype=np.int64)
    sum_d = np.zeros(n_cand, dtype=np.int64)
    chosen = np.empty(count, dtype=np.int64)
    current = first
    for step in range(count):
        d = (pool != current).sum(axis=1)
        np.minimum(min_d, d, out=min_d)
        sum_d += d
        best_min = min_d.max()
        tied = np.flatnonzero(min_d == best_min)
        best = tied[np.argmax(sum_d[tied])]
        chosen[step] = best
        current = pool[best]
    return chosen


def greedy_select(pool: np.ndarray, first: np.ndarray, count: int, use_numba: bool | None = None) -> np.ndarray:
    """Indices into ``pool`` of ``count`` greedily chosen permutations after ``first``."""
    if use_numba is None:
        use_numba = _accel.USE_NUMBA
    pool = np.ascontiguousarray(pool, dtype=np.int8)
    first = np.ascontiguousarray(first, dtype=np.int8)
    if count == 0:
        return np.empty(0, dtype=np.int64)
    if use_numba and _accel.HAS_NUMBA:
        return _greedy_numba(pool, first, count)
    return _greedy_numpy(pool, first, count)


def candidate_pool(n_elements: int, exhaustive: bool, pool_size: int = DEFAULT_POOL_SIZE, seed: int = 0) -> np.ndarray:
    """Lexicographically sorted candidate permutations, identity excluded."""
    if exhaustive:
        pool = np.array(list(itertools.permutations(range(n_elements))), dtype=np.int8)
    else:
        rng = np.random.default_rng(seed)
        keys = rng.random((pool_size, n_elements))
        pool = np.unique(np.argsort(keys, axis=1).astype(np.int8), axis=0)
    identity = np.arange(n_elements, dtype=np.int8)
    return pool[(pool != identity).any(axis=1)]


def generate_permutation_set(
    n_elements: int = 9,
    set_size: int = 35,
    *,
    exhaustive: bool | None = None,
    pool_size: int = DEFAULT_POOL_SIZE,
    seed: int = 0,
    use_numba: bool | None = None,
) -> PermutationSet:
    """Greedy max-min Hamming permutation set starting from the identity.

    For ``n_elements`` up to 6 every permutation is a candidate.  Above that a
    seeded uniform sample of ``pool_size`` permutations is drawn once and the
    greedy search runs over it; ``exhaustive=True`` forces full enumeration.
    """
    if n_elements < 1:
        raise PermutationSetError("n_elements must be >= 1")
    if set_size < 1:
        raise PermutationSetError("set_size must be >= 1")
    if set_size > math.factorial(n_elements):
        raise PermutationSetError(f"set_size {set_size} exceeds {n_elements}! = {math.factorial(n_elements)}")
    if exhaustive is None:
        exhaustive = n_elements <= EXHAUSTIVE_LIMIT
    pool = candidate_pool(n_elements, exhaustive, pool_size, seed)
    if set_size - 1 > len(pool):
        raise PermutationSetError(
            f"candidate pool has {len(pool)} permutations, need {set_size - 1}; raise pool_size or use exhaustive mode"
        )
    identity = np.arange(n_elements, dtype=np.int8)
    chosen = greedy_select(pool, identity, set_size - 1, use_numba=use_numba)
    perms = [tuple(range(n_elements))] + [tuple(int(v) for v in pool[i]) for i in chosen]
    min_h, mean_h = set_statistics(perms)
    return PermutationSet(n_elements, tuple(perms), min_h, mean_h)


# -- persistence ------------------------------------------------------------


def save_permutation_set(perm_set: PermutationSet, path) -> Path:
    # One permutation per line keeps load errors line-addressable.
    rows = ",\n".join("    " + json.dumps(list(p)) for p in perm_set.perms)
    text = (
        "{\n"
        f'  "n": {perm_set.n_elements},\n'
        f'  "min_hamming": {perm_set.min_hamming},\n'
        '  "perms": [\n'
        f"{rows}\n"
        "  ]\n"
        "}\n"
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _line_of_row(text: str, row: int) -> int | None:
    """Best-effort line number of the ``row``-th entry of the perms array."""
    start = text.find('"perms"')
    if start < 0:
        return None
    depth = 0
    seen = -1
    for pos in range(text.index("[", start), len(text)):
        ch = text[pos]
        if ch == "[":
            depth += 1
            if depth == 2:
                seen += 1
                if seen == row:
                    return text.count("\n", 0, pos) + 1
        elif ch == "]":
            depth -= 1
            if depth == 0:
                break
    return None


def load_permutation_set(path) -> PermutationSet:
    path = Path(path)
    text = path.read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PermutationSetError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict) or not {"n", "perms", "min_hamming"} <= raw.keys():
        raise PermutationSetError(f"{path}: expected an object with keys n, perms, min_hamming")
    n = raw["n"]
    perms = raw["perms"]
    if not isinstance(n, int) or n < 1 or not isinstance(perms, list) or not perms:
        raise PermutationSetError(f"{path}: 'n' must be a positive int and 'perms' a non-empty list")
    for i, row in enumerate(perms):
        ok = isinstance(row, list) and all(isinstance(v, int) for v in row) and sorted(row) == list(range(n))
        if not ok:
            line = _line_of_row(text, i)
            where = f"{path}:{line}" if line is not None else str(path)
            raise PermutationSetError(f"{where}: perms[{i}] = {row!r} is not a bijection of 0..{n - 1}")
    try:
        perm_set = PermutationSet.from_perms(perms, n)
    except PermutationSetError as exc:
        raise PermutationSetError(f"{path}: {exc}") from exc
    if perm_set.min_hamming != raw["min_hamming"]:
        raise PermutationSetError(
            f"{path}: stored min_hamming {raw['min_hamming']} != recomputed {perm_set.min_hamming}"
        )
    return perm_set
