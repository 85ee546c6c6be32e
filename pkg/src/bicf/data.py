"""Rating data handling: MovieLens-format parsing, sparse rating matrices,
and cross-validation folds.

External ids (the integers appearing in the raw files) are kept distinct from
dense indices (0..n-1, assigned in order of first appearance). Everything
downstream works on dense indices; only the parsing/reporting boundary deals
in external ids.
"""

from __future__ import annotations

import hashlib
import io
import os
import urllib.request
import zipfile
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

ML100K_URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
# md5 published alongside the dataset
ML100K_MD5 = "0e33842e24a9c977be4e0107933c0723"

RATINGS_CACHE_HEADER = "# bicf-ratings v1"


class RatingFormatError(ValueError):
    """Raised for malformed input records; carries the 1-based line number."""

    def __init__(self, message, line_no=None):
        super().__init__(message if line_no is None else f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class RatingDataset:
    """A set of (user_id, item_id, rating) triples on an ordinal scale.

    Invariants: no duplicate (user_id, item_id) pair, and every rating lies
    in [r_min, r_max].
    """

    triples: tuple
    r_min: int = 1
    r_max: int = 5

    def __post_init__(self):
        seen = set()
        for u, i, r in self.triples:
            if (u, i) in seen:
                raise RatingFormatError(f"duplicate rating for user {u}, item {i}")
            seen.add((u, i))
            if not (self.r_min <= r <= self.r_max):
                raise RatingFormatError(
                    f"rating {r} for user {u}, item {i} outside scale "
                    f"[{self.r_min}, {self.r_max}]"
                )

    def __len__(self):
        return len(self.triples)

    def content_hash(self) -> str:
        """Stable sha256 over the canonical serialization (used for caching)."""
        buf = io.StringIO()
        _write_ratings(self, buf)
        return hashlib.sha256(buf.getvalue().encode()).hexdigest()


@dataclass(frozen=True)
class FoldSplit:
    train: RatingDataset
    test: RatingDataset
    fold_id: int


def parse_ratings(source, r_min=1, r_max=5) -> RatingDataset:
    """Parse MovieLens-style tab-separated ratings.

    Each record is ``user<TAB>item<TAB>rating<TAB>timestamp`` on its own line
    (LF or CRLF). The timestamp is validated as an integer and discarded.

    `source` may be a path, a text stream, or a byte stream.
    """
    close = False
    if isinstance(source, (str, os.PathLike)):
        fh = open(source, "rt", encoding="ascii", newline=None)
        close = True
    elif isinstance(source, (bytes, bytearray)):
        fh = io.StringIO(source.decode("ascii"))
    elif hasattr(source, "read"):
        data = source.read()
        fh = io.StringIO(data.decode("ascii") if isinstance(data, bytes) else data)
    else:
        raise TypeError(f"cannot read ratings from {type(source)!r}")

    triples = []
    seen = set()
    try:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise RatingFormatError(
                    f"expected 4 tab-separated fields, got {len(parts)}", line_no
                )
            try:
                u = int(parts[0])
                i = int(parts[1])
                r = float(parts[2])
                int(parts[3])  # timestamp: validated, discarded
            except ValueError:
                raise RatingFormatError(f"non-numeric field in {parts!r}", line_no)
            if not (r_min <= r <= r_max):
                raise RatingFormatError(
                    f"rating {r} outside scale [{r_min}, {r_max}]", line_no
                )
            if (u, i) in seen:
                raise RatingFormatError(f"duplicate rating for user {u}, item {i}", line_no)
            seen.add((u, i))
            triples.append((u, i, r))
    finally:
        if close:
            fh.close()
    return RatingDataset(tuple(triples), r_min=r_min, r_max=r_max)


def _write_ratings(dataset: RatingDataset, fh) -> None:
    fh.write(f"{RATINGS_CACHE_HEADER}\n")
    fh.write(f"# scale {dataset.r_min} {dataset.r_max}\n")
    for u, i, r in dataset.triples:
        fh.write(f"{u}\t{i}\t{r!r}\n")


def save_ratings(dataset: RatingDataset, path) -> None:
    """Write the self-describing cache serialization (round-trips losslessly)."""
    with open(path, "wt", encoding="ascii") as fh:
        _write_ratings(dataset, fh)


def load_ratings(path) -> RatingDataset:
    with open(path, "rt", encoding="ascii") as fh:
        header = fh.readline().rstrip("\n")
        if header != RATINGS_CACHE_HEADER:
            raise RatingFormatError(f"unrecognized ratings cache header {header!r}", 1)
        scale = fh.readline().split()
        if len(scale) != 4 or scale[:2] != ["#", "scale"]:
            raise RatingFormatError("missing scale line", 2)
        r_min, r_max = int(scale[2]), int(scale[3])
        triples = []
        for line_no, line in enumerate(fh, start=3):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise RatingFormatError("expected 3 fields", line_no)
            triples.append((int(parts[0]), int(parts[1]), float(parts[2])))
    return RatingDataset(tuple(triples), r_min=r_min, r_max=r_max)


class RatingMatrix:
    """Immutable sparse user-item rating matrix with both row and column views.

    Dense indices are assigned by first appearance in the source triples, so
    construction is deterministic. Stored values are float64; a stored 0.0 is
    a real rating (all access goes through the index arrays, never through
    zero-is-missing semantics).
    """

    def __init__(self, user_ids, item_ids, rows, cols, ratings, r_min, r_max):
        self.user_ids = np.asarray(user_ids, dtype=np.int64)
        self.item_ids = np.asarray(item_ids, dtype=np.int64)
        self.n_users = len(self.user_ids)
        self.n_items = len(self.item_ids)
        self.user_index = {int(u): k for k, u in enumerate(self.user_ids)}
        self.item_index = {int(i): k for k, i in enumerate(self.item_ids)}
        self.r_min = r_min
        self.r_max = r_max

        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        ratings = np.asarray(ratings, dtype=np.float64)
        shape = (self.n_users, max(self.n_items, 0))
        self.csr = sp.csr_matrix((ratings, (rows, cols)), shape=shape)
        self.csr.sort_indices()
        self.csc = self.csr.tocsc()
        self.csc.sort_indices()

        self.n_ratings = len(ratings)
        user_sums = np.bincount(rows, weights=ratings, minlength=self.n_users)
        item_sums = np.bincount(cols, weights=ratings, minlength=self.n_items)
        self.user_counts = np.bincount(rows, minlength=self.n_users)
        self.item_counts = np.bincount(cols, minlength=self.n_items)
        self.global_mean = float(ratings.mean()) if self.n_ratings else 0.0
        with np.errstate(invalid="ignore"):
            self.user_means = np.where(
                self.user_counts > 0, user_sums / np.maximum(self.user_counts, 1),
                self.global_mean,
            )
            self.item_means = np.where(
                self.item_counts > 0, item_sums / np.maximum(self.item_counts, 1),
                self.global_mean,
            )

    @property
    def sparsity(self) -> float:
        cells = self.n_users * self.n_items
        return 1.0 - self.n_ratings / cells if cells else 0.0

    def items_of(self, u):
        """(item dense indices, ratings) for user u, sorted by item index."""
        lo, hi = self.csr.indptr[u], self.csr.indptr[u + 1]
        return self.csr.indices[lo:hi], self.csr.data[lo:hi]

    def users_of(self, i):
        """(user dense indices, ratings) for item i, sorted by user index."""
        lo, hi = self.csc.indptr[i], self.csc.indptr[i + 1]
        return self.csc.indices[lo:hi], self.csc.data[lo:hi]

    def triples(self):
        """Yield (external user id, external item id, rating) for every cell."""
        for u in range(self.n_users):
            items, vals = self.items_of(u)
            ext_u = int(self.user_ids[u])
            for i, r in zip(items, vals):
                yield ext_u, int(self.item_ids[i]), float(r)

    def submatrix(self, user_dense, item_dense) -> "RatingMatrix":
        """Restriction to the given dense index sets.

        The result's external ids are this matrix's dense indices, so the
        caller can map back. All cells of this matrix falling on the cross
        product are carried over; nothing else.
        """
        user_dense = np.asarray(user_dense, dtype=np.int64)
        item_dense = np.asarray(item_dense, dtype=np.int64)
        sub = self.csr[user_dense][:, item_dense].tocoo()
        return RatingMatrix(
            user_dense, item_dense, sub.row, sub.col, sub.data,
            self.r_min, self.r_max,
        )


def build_matrix(dataset: RatingDataset) -> RatingMatrix:
    """Index a dataset into a RatingMatrix (first-appearance dense order)."""
    if len(dataset) == 0:
        raise ValueError("cannot build a matrix from an empty dataset")
    user_ids, item_ids = [], []
    user_index, item_index = {}, {}
    rows = np.empty(len(dataset), dtype=np.int64)
    cols = np.empty(len(dataset), dtype=np.int64)
    vals = np.empty(len(dataset), dtype=np.float64)
    for k, (u, i, r) in enumerate(dataset.triples):
        if u not in user_index:
            user_index[u] = len(user_ids)
            user_ids.append(u)
        if i not in item_index:
            item_index[i] = len(item_ids)
            item_ids.append(i)
        rows[k] = user_index[u]
        cols[k] = item_index[i]
        vals[k] = r
    return RatingMatrix(user_ids, item_ids, rows, cols, vals,
                        dataset.r_min, dataset.r_max)


def split_folds(dataset: RatingDataset, k_folds: int, seed: int):
    """Partition into k random folds, reproducible from the seed.

    Each fold's test set holds ~1/k of the ratings; train/test are disjoint
    by (user, item) key and together cover the dataset.
    """
    n = len(dataset)
    if k_folds < 2:
        raise ValueError(f"k_folds must be >= 2, got {k_folds}")
    if k_folds > n:
        raise ValueError(f"k_folds={k_folds} larger than dataset size {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    base, extra = divmod(n, k_folds)
    folds = []
    start = 0
    for fold_id in range(k_folds):
        size = base + (1 if fold_id < extra else 0)
        test_idx = np.sort(perm[start:start + size])
        start += size
        mask = np.zeros(n, dtype=bool)
        mask[test_idx] = True
        test = tuple(dataset.triples[j] for j in test_idx)
        train = tuple(t for j, t in enumerate(dataset.triples) if not mask[j])
        folds.append(FoldSplit(
            train=RatingDataset(train, dataset.r_min, dataset.r_max),
            test=RatingDataset(test, dataset.r_min, dataset.r_max),
            fold_id=fold_id,
        ))
    return folds


def load_canonical_folds(directory, k_folds=5, r_min=1, r_max=5):
    """Load pre-split uN.base/uN.test fold files from a dataset directory."""
    folds = []
    for fold_id in range(1, k_folds + 1):
        base = os.path.join(directory, f"u{fold_id}.base")
        test = os.path.join(directory, f"u{fold_id}.test")
        if not (os.path.exists(base) and os.path.exists(test)):
            raise FileNotFoundError(f"missing canonical fold files {base} / {test}")
        folds.append(FoldSplit(
            train=parse_ratings(base, r_min, r_max),
            test=parse_ratings(test, r_min, r_max),
            fold_id=fold_id - 1,
        ))
    return folds


def has_canonical_folds(directory, k_folds=5) -> bool:
    return all(
        os.path.exists(os.path.join(directory, f"u{j}.base"))
        and os.path.exists(os.path.join(directory, f"u{j}.test"))
        for j in range(1, k_folds + 1)
    )


def resolve_folds(path, k_folds, seed, r_min=1, r_max=5):
    """Produce folds from a dataset path.

    A directory with uN.base/uN.test files yields the canonical pre-splits
    verbatim; otherwise the ratings file (u.data inside a directory, or the
    path itself) is parsed and split from the seed. Returns (folds, protocol)
    where protocol names which path was taken.
    """
    if os.path.isdir(path) and has_canonical_folds(path, k_folds):
        return load_canonical_folds(path, k_folds, r_min, r_max), "canonical-presplit"
    source = os.path.join(path, "u.data") if os.path.isdir(path) else path
    dataset = (load_ratings(source)
               if _looks_like_cache(source) else parse_ratings(source, r_min, r_max))
    return split_folds(dataset, k_folds, seed), "seeded-split"


def _looks_like_cache(path) -> bool:
    try:
        with open(path, "rt", encoding="ascii") as fh:
            return fh.readline().rstrip("\n") == RATINGS_CACHE_HEADER
    except (OSError, UnicodeDecodeError):
        return False


def fetch_ml100k(dest_dir, url=ML100K_URL, md5=ML100K_MD5, verify=True) -> str:
    """Download and extract the MovieLens-100k archive into dest_dir.

    Returns the extracted ml-100k directory. The archive checksum is pinned;
    pass verify=False only if you know the upstream file changed.
    """
    os.makedirs(dest_dir, exist_ok=True)
    target = os.path.join(dest_dir, "ml-100k")
    if os.path.exists(os.path.join(target, "u.data")):
        return target
    zip_path = os.path.join(dest_dir, "ml-100k.zip")
    if not os.path.exists(zip_path):
        with urllib.request.urlopen(url) as resp, open(zip_path, "wb") as out:
            out.write(resp.read())
    if verify:
        digest = hashlib.md5(open(zip_path, "rb").read()).hexdigest()
        if digest != md5:
            raise IOError(
                f"checksum mismatch for {zip_path}: got {digest}, expected {md5}"
            )
    with zipfile.ZipFile(zip_path) as zf:
        zf.extractall(dest_dir)
    if not os.path.exists(os.path.join(target, "u.data")):
        raise IOError(f"archive did not contain ml-100k/u.data under {dest_dir}")
    return target
