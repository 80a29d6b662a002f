"""Negative sampling: fixed, per-epoch static, dynamic hard-negative, and
generative (interpolated fake embedding) strategies.

Discrete negatives are always drawn from a user's unobserved items, so they
never collide with train, validation, or test interactions. Per-user draws
are seeded by (seed, epoch, user), which makes every sample set reproducible
and order-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Layer, Parameter, Tensor, make_mlp, mlp_forward, mlp_parameters, mul, add, scale_rows
from .data import Dataset, DatasetSplit, pairs_by_user
from .errors import ContractError, ConfigError

SAMPLER_KINDS = ("fixed", "static", "dynamic", "generative")


@dataclass
class SamplerConfig:
    kind: str = "static"
    n_neg: int = 8               # discrete negatives per user per epoch
    pool_size: int = 5           # unobserved items pooled into each fake offset
    beta_param: float = 1.0      # alpha ~ Beta(b, b)
    dynamic_multiplier: int = 10  # candidate pool = multiplier * n_neg
    anchor: str = "post"         # anchor fakes at post- or pre-propagation item rows

    def validate(self) -> None:
        if self.kind not in SAMPLER_KINDS:
            raise ConfigError(f"unknown sampler kind {self.kind!r}")
        if self.n_neg < 1 or self.pool_size < 1 or self.dynamic_multiplier < 1:
            raise ConfigError("n_neg, pool_size and dynamic_multiplier must be >= 1")
        if self.beta_param <= 0:
            raise ConfigError("beta_param must be positive")
        if self.anchor not in ("post", "pre"):
            raise ConfigError(f"anchor must be 'post' or 'pre', got {self.anchor!r}")


@dataclass
class GeneratorParams:
    """Two-layer sigmoid MLP g: d -> d used to transform anchor embeddings."""

    layers: list[Layer]

    def parameters(self) -> list[Parameter]:
        return mlp_parameters(self.layers)


def init_generator(dim: int, rng) -> GeneratorParams:
    return GeneratorParams(layers=make_mlp([dim, dim, dim], rng, "generator",
                                           final_activation="sigmoid"))


@dataclass
class NegativeSampleSet:
    """One epoch's negatives: discrete item ids plus fake-sample recipes.

    Fakes are stored as recipes (anchor item, pool items, alpha) rather than
    materialized vectors so the embeddings can be rebuilt on the training
    tape and stay differentiable end to end.
    """

    epoch: int
    items: list[np.ndarray]        # per-user discrete negative ids
    fake_users: np.ndarray         # (F,)
    fake_anchors: np.ndarray       # (F,) anchor positive item ids
    fake_alphas: np.ndarray        # (F,)
    fake_pools: np.ndarray         # (F, pool_size)
    shortfall_users: list[int] = field(default_factory=list)

    @property
    def n_fakes(self) -> int:
        return len(self.fake_users)

    def pairs(self) -> np.ndarray:
        """Discrete (user, item) pairs, user-major."""
        chunks = [np.column_stack([np.full(len(ids), u, dtype=np.int64), ids])
                  for u, ids in enumerate(self.items) if len(ids)]
        if not chunks:
            return np.empty((0, 2), dtype=np.int64)
        return np.concatenate(chunks, axis=0)


def _user_rng(seed: int, epoch: int, user: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, user])


def uniform_sample(n_items: int, observed: np.ndarray, n: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Draw n distinct unobserved items uniformly without replacement.

    Returns (items, shortfall); when fewer than n unobserved items exist,
    all of them are returned and shortfall is True.
    """
    unobserved = np.setdiff1d(np.arange(n_items, dtype=np.int64), observed,
                              assume_unique=False)
    if len(unobserved) <= n:
        return unobserved, len(unobserved) < n
    return rng.choice(unobserved, size=n, replace=False), False


def sample_alpha(beta_param: float, rng: np.random.Generator) -> float:
    """One mixing weight from the symmetric Beta(b, b) distribution."""
    if beta_param <= 0:
        raise ContractError("beta_param must be positive")
    return float(rng.beta(beta_param, beta_param))


def pool(embeddings) -> np.ndarray:
    """Arithmetic-mean pooling of a nonempty stack of equal-length vectors."""
    arr = np.asarray(embeddings, dtype=np.float64)
    if arr.size == 0:
        raise ContractError("pool requires at least one embedding")
    return arr.reshape(len(arr), -1).mean(axis=0)


def generate_fake(anchor, pooled, alpha: float, generator: GeneratorParams) -> Tensor:
    """One interpolated fake embedding: alpha * g(anchor) + (1 - alpha) * pooled."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError("alpha must lie in [0, 1]")
    anchor_t = anchor if isinstance(anchor, Tensor) else Tensor(np.atleast_2d(anchor))
    pooled_t = pooled if isinstance(pooled, Tensor) else Tensor(np.atleast_2d(pooled))
    transformed = mlp_forward(generator.layers, anchor_t)
    return add(mul(transformed, alpha), mul(pooled_t, 1.0 - alpha))


def generate_fake_batch(anchors: Tensor, pooled: Tensor, alphas: np.ndarray,
                        generator: GeneratorParams) -> tuple[Tensor, Tensor]:
    """Row-wise fakes for a batch; returns (fakes, transformed anchors)."""
    alphas = np.asarray(alphas, dtype=np.float64)
    transformed = mlp_forward(generator.layers, anchors)
    fakes = add(scale_rows(transformed, alphas), scale_rows(pooled, 1.0 - alphas))
    return fakes, transformed


def static_resample(dataset: Dataset, config: SamplerConfig, epoch: int,
                    seed: int) -> NegativeSampleSet:
    """Fresh per-user uniform draw each epoch; kind='fixed' reuses epoch 0."""
    effective_epoch = 0 if config.kind == "fixed" else epoch
    items, shortfall = [], []
    for u in range(dataset.n_users):
        rng = _user_rng(seed, effective_epoch, u)
        drawn, short = uniform_sample(dataset.n_items, dataset.user_items(u),
                                      config.n_neg, rng)
        items.append(np.sort(drawn))
        if short:
            shortfall.append(u)
    empty = np.empty(0, dtype=np.int64)
    return NegativeSampleSet(epoch=epoch, items=items, fake_users=empty,
                             fake_anchors=empty, fake_alphas=np.empty(0),
                             fake_pools=np.empty((0, config.pool_size), dtype=np.int64),
                             shortfall_users=shortfall)


def dynamic_resample(dataset: Dataset, user_reprs: np.ndarray, item_reprs: np.ndarray,
                     config: SamplerConfig, epoch: int, seed: int) -> NegativeSampleSet:
    """Top-scored candidates from a uniform pool of unobserved items.

    The pool holds dynamic_multiplier * n_neg candidates per user; the n_neg
    highest-scoring ones are kept, ties broken by smaller item id.
    """
    items, shortfall = [], []
    for u in range(dataset.n_users):
        rng = _user_rng(seed, epoch, u)
        candidates, short = uniform_sample(
            dataset.n_items, dataset.user_items(u),
            config.dynamic_multiplier * config.n_neg, rng)
        scores = item_reprs[candidates] @ user_reprs[u]
        order = np.lexsort((candidates, -scores))
        items.append(np.sort(candidates[order[:config.n_neg]]))
        if len(items[-1]) < config.n_neg:
            shortfall.append(u)
    empty = np.empty(0, dtype=np.int64)
    return NegativeSampleSet(epoch=epoch, items=items, fake_users=empty,
                             fake_anchors=empty, fake_alphas=np.empty(0),
                             fake_pools=np.empty((0, config.pool_size), dtype=np.int64),
                             shortfall_users=shortfall)


def assemble_negatives(dataset: Dataset, split: DatasetSplit,
                       snapshot: tuple[np.ndarray, np.ndarray] | None,
                       config: SamplerConfig, epoch: int, seed: int) -> NegativeSampleSet:
    """Build the epoch's negative sample set for the configured strategy.

    The generative kind stacks fake-sample recipes on top of the static
    draw: one fake per (user, train positive), anchored at that positive and
    offset by the mean of pool_size fresh uniform unobserved items. Dynamic
    sampling scores candidates with the provided (user, item) representation
    snapshot.
    """
    config.validate()
    if config.kind == "dynamic":
        if snapshot is None:
            raise ContractError("dynamic sampling needs a model snapshot")
        return dynamic_resample(dataset, snapshot[0], snapshot[1], config, epoch, seed)
    if config.kind in ("fixed", "static"):
        return static_resample(dataset, config, epoch, seed)

    # generative: static discrete part, then per-positive fake recipes drawn
    # from the same per-user stream (so the discrete part matches static).
    train_items = pairs_by_user(split.train, dataset.n_users)
    items, shortfall = [], []
    fake_users, fake_anchors, fake_alphas, fake_pools = [], [], [], []
    for u in range(dataset.n_users):
        rng = _user_rng(seed, epoch, u)
        observed = dataset.user_items(u)
        drawn, short = uniform_sample(dataset.n_items, observed, config.n_neg, rng)
        items.append(np.sort(drawn))
        if short:
            shortfall.append(u)
        for anchor in train_items[u]:
            pool_ids, _ = uniform_sample(dataset.n_items, observed,
                                         config.pool_size, rng)
            if len(pool_ids) == 0:
                continue
            if len(pool_ids) < config.pool_size:
                pool_ids = np.resize(pool_ids, config.pool_size)
            fake_users.append(u)
            fake_anchors.append(int(anchor))
            fake_alphas.append(sample_alpha(config.beta_param, rng))
            fake_pools.append(np.sort(pool_ids))
    return NegativeSampleSet(
        epoch=epoch, items=items,
        fake_users=np.asarray(fake_users, dtype=np.int64),
        fake_anchors=np.asarray(fake_anchors, dtype=np.int64),
        fake_alphas=np.asarray(fake_alphas, dtype=np.float64),
        fake_pools=(np.asarray(fake_pools, dtype=np.int64)
                    if fake_pools else np.empty((0, config.pool_size), dtype=np.int64)),
        shortfall_users=shortfall,
    )


def dump_sample_set(path, sample_set: NegativeSampleSet) -> None:
    """Audit dump: discrete 'user<TAB>item' lines, then per-user fake counts."""
    counts = np.bincount(sample_set.fake_users,
                         minlength=len(sample_set.items)) if sample_set.n_fakes else None
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in sample_set.pairs():
            fh.write(f"{u}\t{i}\n")
        if counts is not None:
            for u, c in enumerate(counts):
                if c:
                    fh.write(f"fakes\t{u}\t{c}\n")


def load_discrete_negatives(path, n_users: int) -> list[np.ndarray]:
    """Read back the discrete pairs of a dump (fake-count lines are skipped)."""
    per_user: list[list[int]] = [[] for _ in range(n_users)]
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            cols = line.strip().split("\t")
            if not cols or cols[0] == "fakes" or len(cols) < 2:
                continue
            per_user[int(cols[0])].append(int(cols[1]))
    return [np.asarray(sorted(ids), dtype=np.int64) for ids in per_user]
