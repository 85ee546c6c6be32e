"""Independent reference implementations used to pin expected test values.

Everything here is deliberately brute force and shares no code with the
library paths it checks.
"""

import itertools
import math
from fractions import Fraction

import numpy as np


def brute_force_biclusters(dense, min_cols, min_rows):
    """All maximal constant-column biclusters by subset enumeration.

    `dense` is a users x items array with np.nan for missing ratings.
    Enumerates every user subset of size >= min_rows, collects the items on
    which the subset agrees exactly, and keeps the maximal (user set,
    item set) pairs. Returns a set of (users tuple, items tuple, values
    tuple) keys.
    """
    n_users, n_items = dense.shape
    candidates = set()
    for size in range(min_rows, n_users + 1):
        for subset in itertools.combinations(range(n_users), size):
            items = []
            values = []
            for i in range(n_items):
                col = [dense[u, i] for u in subset]
                if any(math.isnan(v) for v in col):
                    continue
                if all(v == col[0] for v in col):
                    items.append(i)
                    values.append(col[0])
            if len(items) >= min_cols:
                candidates.add((subset, tuple(items), tuple(values)))
    maximal = set()
    for cand in candidates:
        users_a, items_a = set(cand[0]), set(cand[1])
        contained = False
        for other in candidates:
            if other == cand:
                continue
            if users_a <= set(other[0]) and items_a <= set(other[1]):
                if set(other[0]) != users_a or set(other[1]) != items_a:
                    contained = True
                    break
        if not contained:
            maximal.add(cand)
    return maximal


def bicluster_set_keys(bicluster_set):
    """Canonical (users, items, values) keys of a mined BiclusterSet."""
    return {
        (tuple(int(u) for u in b.users),
         tuple(int(i) for i in b.items),
         tuple(float(v) for v in b.values))
        for b in bicluster_set
    }


def random_partial_matrix(rng, n_users, n_items, density, r_min=1, r_max=5):
    """Dense array with np.nan holes, plus the equivalent triples."""
    dense = np.full((n_users, n_items), np.nan)
    triples = []
    for u in range(n_users):
        for i in range(n_items):
            if rng.random() < density:
                r = int(rng.integers(r_min, r_max + 1))
                dense[u, i] = r
                triples.append((u + 1, i + 1, float(r)))
    return dense, triples


def exact_binomial_tail(k, n, q):
    """P[X >= k] for X ~ Binomial(n, q), computed in exact rational arithmetic."""
    q = Fraction(q).limit_denominator(10**12)
    total = Fraction(0)
    for j in range(k, n + 1):
        total += math.comb(n, j) * q**j * (1 - q)**(n - j)
    return float(total)


def pairwise_similarity_oracle(dense, mode, min_support=1):
    """Double-loop mean-centered cosine over co-rated cells.

    dense: users x items with np.nan for missing. In item mode the centering
    mean is still the rating user's mean (adjusted cosine). Means are taken
    over each entity's full rating vector.
    """
    n_users, n_items = dense.shape
    user_means = np.array([np.nanmean(dense[u]) if not np.all(np.isnan(dense[u]))
                           else 0.0 for u in range(n_users)])
    if mode == "user":
        n = n_users
    else:
        n = n_items
    sim = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            if a == b:
                sim[a, b] = 1.0
                continue
            num = d_a = d_b = 0.0
            count = 0
            if mode == "user":
                for i in range(n_items):
                    ra, rb = dense[a, i], dense[b, i]
                    if math.isnan(ra) or math.isnan(rb):
                        continue
                    xa, xb = ra - user_means[a], rb - user_means[b]
                    num += xa * xb
                    d_a += xa * xa
                    d_b += xb * xb
                    count += 1
            else:
                for u in range(n_users):
                    ra, rb = dense[u, a], dense[u, b]
                    if math.isnan(ra) or math.isnan(rb):
                        continue
                    xa, xb = ra - user_means[u], rb - user_means[u]
                    num += xa * xb
                    d_a += xa * xa
                    d_b += xb * xb
                    count += 1
            if count < min_support or d_a == 0 or d_b == 0:
                sim[a, b] = 0.0
            else:
                sim[a, b] = num / (math.sqrt(d_a) * math.sqrt(d_b))
    return sim


def metrics_oracle(records, catalog_size):
    """Counting/arithmetic reference for the evaluation metrics.

    records: list of (user, item, truth, prediction-or-None).
    Returns (mae, rmse, prediction_coverage, item_coverage); mae/rmse are
    None when nothing was predicted.
    """
    errors = [abs(p - t) for _, _, t, p in records if p is not None]
    sq = [(p - t) ** 2 for _, _, t, p in records if p is not None]
    n_pred = len(errors)
    mae = sum(errors) / n_pred if n_pred else None
    rmse = math.sqrt(sum(sq) / n_pred) if n_pred else None
    pred_cov = 100.0 * n_pred / len(records) if records else 0.0
    items_predicted = {i for _, i, _, p in records if p is not None}
    item_cov = 100.0 * len(items_predicted) / catalog_size if catalog_size else 0.0
    return mae, rmse, pred_cov, item_cov
