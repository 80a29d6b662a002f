"""Dataset model, file ingestion, splitting, bipartite graphs, and the
synthetic benchmark generator.

File formats
------------
ratings file     one ``user_id<TAB>item_id`` per line (a third column, if
                 present, is ignored); implicit feedback, values are 1.
social file      one ``user_id<TAB>user_id`` per line, undirected (both
                 directions are inserted); self-loops are dropped.
feature files    first line ``count<TAB>dim``, then one row of ``dim``
                 space-separated decimals per entity id, in id order.
generator config key=value lines (``#`` comments allowed); unknown keys
                 are rejected. Keys: communities, users_per_community,
                 items_per_community, within_prob, cross_prob,
                 interaction_prob, feature_noise, user_feature_dim,
                 item_feature_dim, seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from .errors import ContractError, IngestionError
from .sparse import SparseMatrix

log = logging.getLogger(__name__)

RATINGS_FILE = "ratings.tsv"
SOCIAL_FILE = "social.tsv"
USER_FEATURES_FILE = "user_features.txt"
ITEM_FEATURES_FILE = "item_features.txt"


@dataclass
class Dataset:
    """Users, items, features, social graph, and observed interactions."""

    n_users: int
    n_items: int
    user_features: np.ndarray   # (N, K1)
    item_features: np.ndarray   # (M, K2)
    social: SparseMatrix        # N x N, symmetric, zero diagonal
    interactions: SparseMatrix  # N x M, values all 1

    def validate(self) -> None:
        assert self.user_features.shape[0] == self.n_users
        assert self.item_features.shape[0] == self.n_items
        assert self.user_features.shape[1] >= 1 and self.item_features.shape[1] >= 1
        assert np.isfinite(self.user_features).all() and np.isfinite(self.item_features).all()
        assert self.social.rows == self.social.cols == self.n_users
        assert self.interactions.rows == self.n_users and self.interactions.cols == self.n_items
        assert np.all(self.interactions.data == 1.0)
        for u in range(self.n_users):
            assert u not in self.social.row_items(u), "social diagonal must be zero"
        self.social.validate()
        self.interactions.validate()

    def user_items(self, u: int) -> np.ndarray:
        """All observed item ids for one user, ascending."""
        return self.interactions.row_items(u)

    def interaction_pairs(self) -> np.ndarray:
        return self.interactions.to_pairs()


@dataclass
class DatasetSplit:
    """Disjoint train/validation/test interaction lists covering all pairs."""

    train: np.ndarray       # (k, 2) user, item
    validation: np.ndarray
    test: np.ndarray
    seed: int

    def part(self, name: str) -> np.ndarray:
        if name not in ("train", "validation", "test"):
            raise ContractError(f"unknown split part {name!r}")
        return getattr(self, name)


@dataclass
class BipartiteInteractions:
    """Positive and sampled-negative user-item matrices with their degrees."""

    pos: SparseMatrix           # N x M train positives
    neg: SparseMatrix           # N x M current epoch negatives
    user_pos_degree: np.ndarray  # (N,)
    item_pos_degree: np.ndarray  # (M,)
    item_neg_degree: np.ndarray  # (M,)

    @property
    def zero_pos_users(self) -> np.ndarray:
        return np.flatnonzero(self.user_pos_degree == 0)

    @property
    def zero_pos_items(self) -> np.ndarray:
        return np.flatnonzero(self.item_pos_degree == 0)

    @property
    def zero_neg_items(self) -> np.ndarray:
        return np.flatnonzero(self.item_neg_degree == 0)


def pairs_by_user(pairs: np.ndarray, n_users: int) -> list[np.ndarray]:
    """Group (user, item) pairs into per-user ascending item-id arrays."""
    out = [np.empty(0, dtype=np.int64) for _ in range(n_users)]
    if len(pairs) == 0:
        return out
    pairs = np.asarray(pairs, dtype=np.int64)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs = pairs[order]
    users, starts = np.unique(pairs[:, 0], return_index=True)
    bounds = np.append(starts, len(pairs))
    for u, a, b in zip(users, bounds[:-1], bounds[1:]):
        out[u] = pairs[a:b, 1].copy()
    return out


# ---------------------------------------------------------------------------
# Ingestion


def _read_lines(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IngestionError(path, 0, f"cannot read file: {exc}") from exc
    if not any(line.strip() for line in lines):
        raise IngestionError(path, 0, "file is empty")
    return lines

def _parse_id(token, limit, path, line_no, what):
    try:
        value = int(token)
    except ValueError:
        raise IngestionError(path, line_no, f"{what} id {token!r} is not an integer")
    if not 0 <= value < limit:
        raise IngestionError(path, line_no, f"{what} id {value} out of range [0, {limit})")
    return value


def _load_features(path):
    lines = _read_lines(path)
    header = lines[0].split("\t")
    if len(header) != 2:
        raise IngestionError(path, 1, "header must be 'count<TAB>dim'")
    try:
        count, dim = int(header[0]), int(header[1])
    except ValueError:
        raise IngestionError(path, 1, "header must hold two integers")
    if count < 1 or dim < 1:
        raise IngestionError(path, 1, "count and dim must be positive")
    if len(lines) - 1 < count:
        raise IngestionError(path, len(lines), f"expected {count} feature rows")
    out = np.empty((count, dim))
    for i in range(count):
        row = lines[1 + i].split()
        if len(row) != dim:
            raise IngestionError(path, 2 + i, f"expected {dim} values, got {len(row)}")
        try:
            out[i] = [float(tok) for tok in row]
        except ValueError:
            raise IngestionError(path, 2 + i, "non-numeric feature value")
    if not np.isfinite(out).all():
        raise IngestionError(path, 0, "features must be finite")
    return out


def load_dataset(ratings_path, social_path, user_features_path, item_features_path) -> Dataset:
    """Read the four dataset files and return a validated :class:`Dataset`.

    Duplicate edges are collapsed; social self-loops are dropped (with a
    logged count). Out-of-range ids raise :class:`IngestionError` with the
    offending line number.
    """
    user_features = _load_features(user_features_path)
    item_features = _load_features(item_features_path)
    n_users, n_items = user_features.shape[0], item_features.shape[0]

    r_users, r_items = [], []
    for line_no, line in enumerate(_read_lines(ratings_path), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) < 2:
            raise IngestionError(ratings_path, line_no, "expected 'user<TAB>item'")
        r_users.append(_parse_id(cols[0], n_users, ratings_path, line_no, "user"))
        r_items.append(_parse_id(cols[1], n_items, ratings_path, line_no, "item"))
    interactions = SparseMatrix.from_pairs(n_users, n_items, r_users, r_items, 1.0)

    s_a, s_b, self_loops = [], [], 0
    for line_no, line in enumerate(_read_lines(social_path), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) < 2:
            raise IngestionError(social_path, line_no, "expected 'user<TAB>user'")
        a = _parse_id(cols[0], n_users, social_path, line_no, "user")
        b = _parse_id(cols[1], n_users, social_path, line_no, "user")
        if a == b:
            self_loops += 1
            continue
        s_a.extend((a, b))
        s_b.extend((b, a))
    if self_loops:
        log.warning("dropped %d social self-loop(s) from %s", self_loops, social_path)
    social = SparseMatrix.from_pairs(n_users, n_users, s_a, s_b, 1.0)

    dataset = Dataset(n_users, n_items, user_features, item_features, social, interactions)
    dataset.validate()
    return dataset


def load_dataset_dir(directory) -> Dataset:
    from pathlib import Path

    d = Path(directory)
    return load_dataset(d / RATINGS_FILE, d / SOCIAL_FILE,
                        d / USER_FEATURES_FILE, d / ITEM_FEATURES_FILE)


def save_dataset(dataset: Dataset, directory) -> None:
    """Write the four dataset files; a reload reproduces identical matrices."""
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    pairs = dataset.interaction_pairs()
    with open(d / RATINGS_FILE, "w", encoding="utf-8") as fh:
        for u, i in pairs:
            fh.write(f"{u}\t{i}\n")
    with open(d / SOCIAL_FILE, "w", encoding="utf-8") as fh:
        for u, v in dataset.social.to_pairs():
            if u < v:  # undirected; the loader inserts both directions
                fh.write(f"{u}\t{v}\n")
    for path, mat in ((d / USER_FEATURES_FILE, dataset.user_features),
                      (d / ITEM_FEATURES_FILE, dataset.item_features)):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{mat.shape[0]}\t{mat.shape[1]}\n")
            for row in mat:
                fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")


# ---------------------------------------------------------------------------
# Splitting


def split_dataset(dataset: Dataset, seed: int) -> DatasetSplit:
    """Seeded uniform 8:1:1 split over interactions.

    Validation and test sizes are round(n / 10) each, so every part is
    within one interaction of the exact ratio.
    """
    pairs = dataset.interaction_pairs()
    n = len(pairs)
    if n < 10:
        raise ContractError(f"need at least 10 interactions to split, have {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = int(round(n / 10.0))
    n_test = int(round(n / 10.0))
    n_train = n - n_val - n_test
    shuffled = pairs[perm]
    return DatasetSplit(
        train=shuffled[:n_train],
        validation=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Bipartite construction


def build_bipartite(positive_pairs, negative_pairs, n_users: int,
                    n_items: int) -> BipartiteInteractions:
    """Assemble the positive/negative interaction matrices and their degrees.

    Positive and negative supports must be disjoint.
    """
    pos = SparseMatrix.from_pairs(n_users, n_items,
                                  np.asarray(positive_pairs).reshape(-1, 2)[:, 0],
                                  np.asarray(positive_pairs).reshape(-1, 2)[:, 1], 1.0)
    negative_pairs = np.asarray(negative_pairs, dtype=np.int64).reshape(-1, 2)
    neg = SparseMatrix.from_pairs(n_users, n_items, negative_pairs[:, 0],
                                  negative_pairs[:, 1], 1.0)
    pos_keys = pos.to_pairs() @ np.array([n_items, 1], dtype=np.int64)
    neg_keys = neg.to_pairs() @ np.array([n_items, 1], dtype=np.int64)
    overlap = np.intersect1d(pos_keys, neg_keys)
    if overlap.size:
        u, i = divmod(int(overlap[0]), n_items)
        raise ContractError(f"positive and negative supports overlap, e.g. ({u}, {i})")
    return BipartiteInteractions(
        pos=pos,
        neg=neg,
        user_pos_degree=pos.row_sums(),
        item_pos_degree=pos.col_sums(),
        item_neg_degree=neg.col_sums(),
    )


# ---------------------------------------------------------------------------
# Synthetic generator


@dataclass
class SynthConfig:
    """Planted-community benchmark: social links concentrate within a
    community and users interact mostly with their community's item block."""

    communities: int = 4
    users_per_community: int = 50
    items_per_community: int = 60
    within_prob: float = 0.10       # social edge prob., same community
    cross_prob: float = 0.01        # social edge prob. across; also damps cross interactions
    interaction_prob: float = 0.30  # mean within-block interaction prob.
    feature_noise: float = 0.3      # scale of the per-entity feature offset
    user_feature_dim: int = 8
    item_feature_dim: int = 8
    seed: int = 0

    def validate(self) -> None:
        if min(self.communities, self.users_per_community, self.items_per_community) < 1:
            raise ContractError("community and size counts must be >= 1")
        for name in ("within_prob", "cross_prob", "interaction_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")
        if min(self.user_feature_dim, self.item_feature_dim) < 1:
            raise ContractError("feature dims must be >= 1")


def load_synth_config(path) -> SynthConfig:
    from .config import parse_kv_file

    raw = parse_kv_file(path)
    known = {f.name: f.type for f in fields(SynthConfig)}
    cfg = SynthConfig()
    for key, value in raw.items():
        if key not in known:
            from .errors import ConfigError

            raise ConfigError(f"unknown generator config key {key!r}")
        current = getattr(cfg, key)
        setattr(cfg, key, type(current)(value))
    cfg.validate()
    return cfg


# Appetite for an item falls off exponentially in the (observable) latent
# misalignment between user and item; base ** gain keeps probabilities in
# [0, 1] and makes interaction_prob=1 give the complete block.
_AFFINITY_GAIN = 2.5


def synth_generate(config: SynthConfig) -> Dataset:
    """Generate a dataset with planted social and interest structure.

    Same-community users link with ``within_prob`` (``cross_prob`` across
    communities). Features are community centroids plus a per-entity latent
    offset scaled by ``feature_noise``; a user's within-block interaction
    probability is ``interaction_prob ** exp(-gain * cos(latents))``, so the
    held-out positives are predictable from the observed features. Cross
    -block interactions are damped by ``cross_prob``.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    C, upc, ipc = config.communities, config.users_per_community, config.items_per_community
    n_users, n_items = C * upc, C * ipc
    k1, k2 = config.user_feature_dim, config.item_feature_dim
    u_comm = np.repeat(np.arange(C), upc)
    i_comm = np.repeat(np.arange(C), ipc)

    user_centroids = rng.normal(size=(C, k1))
    item_centroids = rng.normal(size=(C, k2))
    user_latent = rng.normal(size=(n_users, k1))
    item_latent = rng.normal(size=(n_items, k2))
    user_features = user_centroids[u_comm] + config.feature_noise * user_latent
    item_features = item_centroids[i_comm] + config.feature_noise * item_latent

    same_user = u_comm[:, None] == u_comm[None, :]
    link_prob = np.where(same_user, config.within_prob, config.cross_prob)
    upper = np.triu(rng.random((n_users, n_users)) < link_prob, k=1)
    adj = upper | upper.T
    social = SparseMatrix.from_dense(adj.astype(np.float64))

    q = min(k1, k2)
    xu = user_latent[:, :q]
    yi = item_latent[:, :q]
    norms = np.linalg.norm(xu, axis=1, keepdims=True) * np.linalg.norm(yi, axis=1)[None, :]
    affinity = (xu @ yi.T) / np.maximum(norms, 1e-12)
    gain = np.exp(-_AFFINITY_GAIN * affinity)
    same_block = u_comm[:, None] == i_comm[None, :]
    base = np.where(same_block, config.interaction_prob,
                    config.interaction_prob * config.cross_prob)
    with np.errstate(divide="ignore"):
        prob = np.where(base > 0.0, base ** gain, 0.0)
    observed = rng.random((n_users, n_items)) < prob
    interactions = SparseMatrix.from_dense(observed.astype(np.float64))

    dataset = Dataset(n_users, n_items, user_features, item_features, social, interactions)
    dataset.validate()
    return dataset


def community_labels(config: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """(user, item) community ids matching :func:`synth_generate`'s layout."""
    u = np.repeat(np.arange(config.communities), config.users_per_community)
    i = np.repeat(np.arange(config.communities), config.items_per_community)
    return u, i
