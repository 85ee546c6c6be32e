"""Exhaustive mining of maximal constant-column biclusters.

A bicluster here is a user set U and item set I such that every user in U
rated every item in I and, per item, all those ratings are identical (the
item's pattern value). Mining is exact: each cell becomes an (item, value)
symbol, a user becomes a transaction of symbols, and the maximal biclusters
are exactly the closed symbol sets paired with their full supporting user
sets. Enumeration is depth-first with prefix-preserving closure extensions,
which visits every closed set exactly once and is deterministic.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binom

from .data import RatingMatrix

SOLUTION_HEADER = "# bicf-biclusters v1"

DEFAULT_MAX_BICLUSTERS = 500_000
DEFAULT_MAX_BRANCHING = 1_000_000


@dataclass(frozen=True, eq=False)
class Bicluster:
    """A (user set, item set) subspace with one expected rating per item.

    users and items are sorted dense indices; values[j] is the rating shared
    by every user on items[j].
    """

    users: np.ndarray
    items: np.ndarray
    values: np.ndarray

    @property
    def pattern(self) -> dict:
        """Item index -> expected rating."""
        return {int(i): float(v) for i, v in zip(self.items, self.values)}

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def area(self) -> int:
        return len(self.users) * len(self.items)

    def key(self):
        return (tuple(int(i) for i in self.items),
                tuple(float(v) for v in self.values),
                tuple(int(u) for u in self.users))

    def __eq__(self, other):
        return isinstance(other, Bicluster) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def contains(self, other: "Bicluster") -> bool:
        """True when other's users and items are both subsets of ours."""
        return (_is_subset(other.users, self.users)
                and _is_subset(other.items, self.items))


@dataclass
class BiclusterSet:
    """An ordered collection of biclusters plus the settings that produced it."""

    biclusters: list
    provenance: list = field(default_factory=list)
    truncated: bool = False

    def __len__(self):
        return len(self.biclusters)

    def __iter__(self):
        return iter(self.biclusters)

    def __getitem__(self, k):
        return self.biclusters[k]

    def item_union(self) -> np.ndarray:
        if not self.biclusters:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate([b.items for b in self.biclusters]))


def _is_subset(small: np.ndarray, big: np.ndarray) -> bool:
    if len(small) > len(big):
        return False
    pos = np.searchsorted(big, small)
    if np.any(pos >= len(big)):
        return False
    return bool(np.all(big[pos] == small))


def _sort_key(b: Bicluster):
    return (-b.area, tuple(b.items), tuple(b.users))


def _canonical_order(biclusters) -> list:
    return sorted(biclusters, key=_sort_key)


def _ranges_concat(starts, lengths):
    """Concatenate arange(s, s+l) for each (s, l) pair, fully vectorized."""
    total = int(lengths.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    offsets = np.repeat(np.cumsum(lengths) - lengths, lengths)
    return np.arange(total, dtype=np.int64) - offsets + np.repeat(starts, lengths)


class _Node:
    """One closed pattern plus its projected transaction database.

    The database holds only symbols that are still extendable below this
    node: frequency >= min_rows among the node's users and strictly less
    than the node's user count (symbols present in every user are part of
    the pattern already).
    """

    __slots__ = ("pattern", "users", "indptr", "syms", "uniq", "bounds",
                 "rows_sorted", "cand_idx", "next_cand")

    def __init__(self, pattern, users, indptr, syms, core):
        self.pattern = pattern
        self.users = users
        self.indptr = indptr
        self.syms = syms
        rows = np.repeat(np.arange(len(users)), np.diff(indptr))
        order = np.argsort(syms, kind="stable")
        syms_sorted = syms[order]
        self.rows_sorted = rows[order]
        self.uniq, starts = np.unique(syms_sorted, return_index=True)
        self.bounds = np.append(starts, len(syms_sorted))
        self.cand_idx = np.flatnonzero(self.uniq > core)
        self.next_cand = 0


def _enumerate_closed(matrix, min_cols, min_rows, max_biclusters, max_branching):
    """Depth-first closed-pattern enumeration over (item, value) symbols."""
    n_users = matrix.n_users
    if n_users == 0 or matrix.n_ratings == 0 or min_rows > n_users:
        return [], False

    # Symbol encoding is item-major so symbol order ties break on the value.
    values = np.unique(matrix.csr.data)
    n_vals = len(values)
    n_syms = matrix.n_items * n_vals
    cell_users = np.repeat(np.arange(n_users), np.diff(matrix.csr.indptr))
    sym_of_cell = (matrix.csr.indices.astype(np.int64) * n_vals
                   + np.searchsorted(values, matrix.csr.data))

    freqs = np.bincount(sym_of_cell, minlength=n_syms)
    root_pattern = np.flatnonzero(freqs == n_users)
    alive = (freqs >= min_rows) & (freqs < n_users)
    keep = alive[sym_of_cell]
    db_rows = cell_users[keep]
    db_syms = sym_of_cell[keep]
    order = np.lexsort((db_syms, db_rows))
    db_rows, db_syms = db_rows[order], db_syms[order]
    indptr = np.zeros(n_users + 1, dtype=np.int64)
    np.add.at(indptr, db_rows + 1, 1)
    np.cumsum(indptr, out=indptr)

    results = []
    truncated = False

    def emit(pattern_syms, users):
        results.append(Bicluster(
            users=np.asarray(users, dtype=np.int64),
            items=(pattern_syms // n_vals).astype(np.int64),
            values=values[pattern_syms % n_vals],
        ))

    if len(root_pattern) >= min_cols:
        emit(root_pattern, np.arange(n_users))

    root = _Node(root_pattern, np.arange(n_users, dtype=np.int64),
                 indptr, db_syms, core=-1)
    if len(root.cand_idx) > max_branching:
        truncated = True
        root.cand_idx = root.cand_idx[:max_branching]
    stack = [root]

    while stack:
        if len(results) >= max_biclusters:
            truncated = True
            break
        node = stack[-1]
        if node.next_cand >= len(node.cand_idx):
            stack.pop()
            continue
        idx = node.cand_idx[node.next_cand]
        node.next_cand += 1

        e = node.uniq[idx]
        tid = node.rows_sorted[node.bounds[idx]:node.bounds[idx + 1]]
        # Project the database onto the rows supporting e.
        starts = node.indptr[tid]
        lengths = node.indptr[tid + 1] - starts
        gather = _ranges_concat(starts, lengths)
        child_syms_raw = node.syms[gather]
        counts = np.bincount(child_syms_raw, minlength=n_syms)
        full = np.flatnonzero(counts == len(tid))
        # Prefix-preserving test: the closure may not add symbols before e,
        # otherwise this closed set is generated from a different branch.
        if full[0] != e:
            continue
        child_pattern = np.union1d(node.pattern, full)
        child_users = node.users[tid]
        if len(child_pattern) >= min_cols:
            emit(child_pattern, child_users)
            if len(results) >= max_biclusters:
                truncated = True
                break
        child_counts = counts[child_syms_raw]
        keep_mask = (child_counts >= min_rows) & (child_counts < len(tid))
        if not np.any(keep_mask):
            continue
        kept_syms = child_syms_raw[keep_mask]
        child_rows = np.repeat(np.arange(len(tid)), lengths)[keep_mask]
        child_indptr = np.zeros(len(tid) + 1, dtype=np.int64)
        np.cumsum(np.bincount(child_rows, minlength=len(tid)), out=child_indptr[1:])
        child = _Node(child_pattern, child_users, child_indptr, kept_syms, core=e)
        if len(child.cand_idx) > max_branching:
            truncated = True
            child.cand_idx = child.cand_idx[:max_branching]
        if len(child.cand_idx):
            stack.append(child)

    return results, truncated


def mine(matrix: RatingMatrix, min_cols: int, min_rows: int = 2,
         max_biclusters: int = DEFAULT_MAX_BICLUSTERS,
         max_branching: int = DEFAULT_MAX_BRANCHING) -> BiclusterSet:
    """All maximal constant-column biclusters with >= min_cols items and
    >= min_rows users.

    Output order is (area descending, item set lexicographic, user set
    lexicographic). Hitting max_biclusters or max_branching sets the
    truncated flag on the result; it is never silent.
    """
    sets = mine_multi(matrix, [min_cols], min_rows, max_biclusters, max_branching)
    return sets[int(min_cols)]


def mine_multi(matrix: RatingMatrix, min_cols_list, min_rows: int = 2,
               max_biclusters: int = DEFAULT_MAX_BICLUSTERS,
               max_branching: int = DEFAULT_MAX_BRANCHING) -> dict:
    """Mine once and slice per setting.

    Because the miner is exact, the solution for a larger min_cols is the
    size-filtered solution of a smaller one, so a single enumeration at
    min(min_cols_list) serves every setting. Returns {min_cols: BiclusterSet}.
    """
    min_cols_list = sorted(set(int(c) for c in min_cols_list))
    if not min_cols_list:
        raise ValueError("min_cols_list must be non-empty")
    if min_cols_list[0] < 1 or min_rows < 1:
        raise ValueError("min_cols and min_rows must be >= 1")
    raw, truncated = _enumerate_closed(
        matrix, min_cols_list[0], min_rows, max_biclusters, max_branching
    )
    ordered = _canonical_order(raw)
    out = {}
    for c in min_cols_list:
        members = [b for b in ordered if b.n_items >= c]
        out[c] = BiclusterSet(
            members,
            provenance=[{"min_cols": c, "min_rows": min_rows}],
            truncated=truncated,
        )
    return out


def aggregate(solutions) -> BiclusterSet:
    """Union several solutions; drop duplicates and contained biclusters.

    All inputs must refer to the same matrix indexing. Provenance is the
    concatenation of the inputs' provenance.
    """
    merged = []
    seen = set()
    provenance = []
    truncated = False
    for sol in solutions:
        provenance.extend(sol.provenance)
        truncated = truncated or sol.truncated
        for b in sol:
            k = b.key()
            if k not in seen:
                seen.add(k)
                merged.append(b)
    kept = _drop_contained(merged)
    return BiclusterSet(_canonical_order(kept), provenance=provenance,
                        truncated=truncated)


def _drop_contained(biclusters) -> list:
    """Remove any bicluster strictly contained in another."""
    if not biclusters:
        return []
    # Containment candidates share every item, so intersect per-item member
    # lists instead of scanning all pairs.
    by_item = {}
    for idx, b in enumerate(biclusters):
        for i in b.items:
            by_item.setdefault(int(i), []).append(idx)
    kept = []
    for idx, b in enumerate(biclusters):
        candidates = None
        for i in b.items:
            ids = by_item[int(i)]
            candidates = set(ids) if candidates is None else candidates & set(ids)
            if not candidates:
                break
        contained = False
        for j in candidates or ():
            if j == idx:
                continue
            other = biclusters[j]
            if other.contains(b) and not b.contains(other):
                contained = True
                break
        if not contained:
            kept.append(b)
    return kept


def pattern_value_frequencies(matrix: RatingMatrix) -> dict:
    """Empirical fraction of ALL users rating item i with value v.

    Returns {(item, value): fraction}; absent keys mean fraction 0.
    """
    out = {}
    for i in range(matrix.n_items):
        _, vals = matrix.users_of(i)
        uniq, counts = np.unique(vals, return_counts=True)
        for v, c in zip(uniq, counts):
            out[(i, float(v))] = c / matrix.n_users
    return out


def bicluster_pvalue(b: Bicluster, matrix: RatingMatrix, freqs=None) -> float:
    """Upper binomial tail P[X >= |U|] with X ~ Binomial(n_users, q).

    q is the chance a random user exhibits the whole pattern under an
    independence null: the product over pattern items of the empirical
    fraction of users rating that item at the pattern value.
    """
    if freqs is None:
        freqs = pattern_value_frequencies(matrix)
    q = 1.0
    for i, v in zip(b.items, b.values):
        q *= freqs.get((int(i), float(v)), 0.0)
    return float(binom.sf(b.n_users - 1, matrix.n_users, q))


def significance_filter(bicluster_set: BiclusterSet, matrix: RatingMatrix,
                        alpha: float) -> BiclusterSet:
    """Keep biclusters whose null-model tail probability is <= alpha."""
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    freqs = pattern_value_frequencies(matrix)
    kept = [b for b in bicluster_set
            if bicluster_pvalue(b, matrix, freqs) <= alpha]
    return BiclusterSet(kept,
                        provenance=bicluster_set.provenance
                        + [{"significance_alpha": alpha}],
                        truncated=bicluster_set.truncated)


def mine_aggregate(matrix: RatingMatrix, min_cols_list, min_rows: int = 2,
                   significance_alpha=None,
                   max_biclusters: int = DEFAULT_MAX_BICLUSTERS,
                   max_branching: int = DEFAULT_MAX_BRANCHING) -> BiclusterSet:
    """The standard mining pipeline: per-setting solutions, aggregated,
    optionally significance-filtered."""
    per_setting = mine_multi(matrix, min_cols_list, min_rows,
                             max_biclusters, max_branching)
    combined = aggregate([per_setting[c] for c in sorted(per_setting)])
    if significance_alpha is not None:
        combined = significance_filter(combined, matrix, significance_alpha)
    return combined


def save_biclusters(bicluster_set: BiclusterSet, matrix: RatingMatrix, path) -> None:
    """Write a solution file (external ids, one bicluster per line).

    Line format: comma-separated user ids TAB item ids TAB pattern values.
    Round-trips losslessly through load_biclusters with the same matrix.
    """
    with open(path, "wt", encoding="ascii") as fh:
        fh.write(f"{SOLUTION_HEADER}\n")
        prov = "; ".join(
            " ".join(f"{k}={v}" for k, v in sorted(p.items()))
            for p in bicluster_set.provenance
        )
        fh.write(f"# provenance: {prov}\n")
        fh.write(f"# truncated: {str(bicluster_set.truncated).lower()}\n")
        fh.write(f"# count: {len(bicluster_set)}\n")
        for b in bicluster_set:
            users = ",".join(str(int(matrix.user_ids[u])) for u in b.users)
            items = ",".join(str(int(matrix.item_ids[i])) for i in b.items)
            vals = ",".join(repr(float(v)) for v in b.values)
            fh.write(f"{users}\t{items}\t{vals}\n")


def load_biclusters(path, matrix: RatingMatrix) -> BiclusterSet:
    """Read a solution file produced here or by an external miner.

    External user/item ids are mapped onto the matrix's dense indices; ids
    unknown to the matrix are an error since the pipeline could not use them.
    """
    biclusters = []
    provenance = []
    truncated = False
    with open(path, "rt", encoding="ascii") as fh:
        header = fh.readline().rstrip("\n")
        if header != SOLUTION_HEADER:
            raise ValueError(f"unrecognized solution header {header!r}")
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# provenance:"):
                    text = line[len("# provenance:"):].strip()
                    for part in filter(None, (p.strip() for p in text.split(";"))):
                        entry = {}
                        for kv in part.split():
                            key, _, val = kv.partition("=")
                            entry[key] = _parse_scalar(val)
                        provenance.append(entry)
                elif line.startswith("# truncated:"):
                    truncated = line.split(":", 1)[1].strip() == "true"
                continue
            user_s, item_s, val_s = line.split("\t")
            users = np.sort([matrix.user_index[int(x)] for x in user_s.split(",")])
            items = np.array([matrix.item_index[int(x)] for x in item_s.split(",")],
                             dtype=np.int64)
            vals = np.array([float(x) for x in val_s.split(",")], dtype=np.float64)
            order = np.argsort(items)
            biclusters.append(Bicluster(
                users=users.astype(np.int64),
                items=items[order],
                values=vals[order],
            ))
    return BiclusterSet(biclusters, provenance=provenance, truncated=truncated)


def _parse_scalar(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def cache_path(cache_dir, matrix_hash: str, min_cols_list, min_rows: int,
               significance_alpha=None) -> str:
    cols = "-".join(str(c) for c in sorted(set(int(c) for c in min_cols_list)))
    alpha = "none" if significance_alpha is None else repr(significance_alpha)
    name = f"biclusters_{matrix_hash[:16]}_c{cols}_r{min_rows}_a{alpha}.txt"
    return os.path.join(cache_dir, name)
