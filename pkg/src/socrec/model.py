"""The recommendation model: projected features plus Gaussian-prior free
embeddings, linear L-level social aggregation, interest propagation over the
positive/negative bipartite graph, and inner-product scoring.

Aggregation is a plain per-level neighbor sum (optionally with the node's own
representation retained); there is no nonlinearity between levels. Interest
propagation mean-normalizes each neighborhood by its degree and keeps a
residual connection; zero-degree rows contribute nothing from the
corresponding term.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import (Layer, Parameter, Tensor, add, make_mlp, mlp_forward,
                       mlp_parameters, scale_rows, spmm)
from .data import BipartiteInteractions, Dataset
from .errors import ConfigError, ContractError, DimensionError
from .sampling import GeneratorParams, init_generator
from .sparse import SparseMatrix

PRIOR_KINDS = ("gaussian", "uniform", "none")
AGGREGATION_KINDS = ("plain", "gcn")


@dataclass
class ModelConfig:
    dim: int = 16
    levels: int = 2
    prior_std: float = 0.1
    prior_kind: str = "gaussian"
    self_loop: bool = True
    aggregation: str = "plain"
    user_proj_depth: int = 1   # feature projection MLPs end without activation
    item_proj_depth: int = 1
    pos_prop_depth: int = 1    # propagation MLPs end with a sigmoid
    neg_prop_depth: int = 1

    def validate(self) -> None:
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if self.levels < 0:
            raise ConfigError("levels must be >= 0")
        if self.prior_std <= 0:
            raise ConfigError("prior_std must be positive")
        if self.prior_kind not in PRIOR_KINDS:
            raise ConfigError(f"unknown prior kind {self.prior_kind!r}")
        if self.aggregation not in AGGREGATION_KINDS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if min(self.user_proj_depth, self.item_proj_depth,
               self.pos_prop_depth, self.neg_prop_depth) < 1:
            raise ConfigError("MLP depths must be >= 1")


@dataclass
class PriorEmbeddings:
    user: Parameter  # (N, d)
    item: Parameter  # (M, d)
    std: float


def init_priors(n_users: int, n_items: int, dim: int, std: float, seed) -> PriorEmbeddings:
    """Seeded i.i.d. Gaussian free embeddings with mean 0 and the given std."""
    if std <= 0:
        raise ContractError("prior std must be positive")
    rng = np.random.default_rng(seed)
    return PriorEmbeddings(
        user=Parameter(rng.normal(0.0, std, size=(n_users, dim)), "prior.user"),
        item=Parameter(rng.normal(0.0, std, size=(n_items, dim)), "prior.item"),
        std=std,
    )


def _init_priors_kind(kind: str, n_users, n_items, dim, std, seed) -> PriorEmbeddings:
    if kind == "gaussian":
        return init_priors(n_users, n_items, dim, std, seed)
    if kind == "uniform":
        # matches the Gaussian variance: Uniform(-std*sqrt(3), std*sqrt(3))
        rng = np.random.default_rng(seed)
        half = std * np.sqrt(3.0)
        return PriorEmbeddings(
            user=Parameter(rng.uniform(-half, half, size=(n_users, dim)), "prior.user"),
            item=Parameter(rng.uniform(-half, half, size=(n_items, dim)), "prior.item"),
            std=std,
        )
    return PriorEmbeddings(
        user=Parameter(np.zeros((n_users, dim)), "prior.user"),
        item=Parameter(np.zeros((n_items, dim)), "prior.item"),
        std=std,
    )


@dataclass
class ModelParams:
    """All learnable tensors, including the fake-sample generator."""

    config: ModelConfig
    user_proj: list[Layer]
    item_proj: list[Layer]
    pos_prop: list[Layer]
    neg_prop: list[Layer]
    priors: PriorEmbeddings
    generator: GeneratorParams

    def parameters(self) -> list[Parameter]:
        """Every optimizable Parameter exactly once; with prior_kind='none'
        the (all-zero) priors stay out of the optimizer."""
        out: list[Parameter] = []
        for layers in (self.user_proj, self.item_proj, self.pos_prop, self.neg_prop):
            out.extend(mlp_parameters(layers))
        if self.config.prior_kind != "none":
            out.extend([self.priors.user, self.priors.item])
        out.extend(self.generator.parameters())
        names = [p.name for p in out]
        if len(set(names)) != len(names):
            raise ContractError("duplicate parameter registration")
        return out


def init_params(config: ModelConfig, n_users: int, n_items: int,
                k1: int, k2: int, seed: int) -> ModelParams:
    config.validate()
    d = config.dim
    streams = [np.random.default_rng([seed, tag]) for tag in range(6)]
    return ModelParams(
        config=config,
        user_proj=make_mlp([k1] + [d] * config.user_proj_depth, streams[0],
                           "user_proj", final_activation="none"),
        item_proj=make_mlp([k2] + [d] * config.item_proj_depth, streams[1],
                           "item_proj", final_activation="none"),
        pos_prop=make_mlp([d] * (config.pos_prop_depth + 1), streams[2],
                          "pos_prop", final_activation="sigmoid"),
        neg_prop=make_mlp([d] * (config.neg_prop_depth + 1), streams[3],
                          "neg_prop", final_activation="sigmoid"),
        priors=_init_priors_kind(config.prior_kind, n_users, n_items, d,
                                 config.prior_std, [seed, 4]),
        generator=init_generator(d, streams[5]),
    )


def hidden_reps(user_features, item_features, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Project raw features and add the free embeddings."""
    h_user = add(mlp_forward(params.user_proj, user_features), params.priors.user)
    h_item = add(mlp_forward(params.item_proj, item_features), params.priors.item)
    return h_user, h_item


def _gcn_normalized(social: SparseMatrix) -> SparseMatrix:
    """Symmetrically degree-normalized adjacency with self-loops added."""
    n = social.rows
    pairs = social.to_pairs()
    rows = np.concatenate([pairs[:, 0], np.arange(n)])
    cols = np.concatenate([pairs[:, 1], np.arange(n)])
    deg = social.row_sums() + 1.0
    inv_sqrt = 1.0 / np.sqrt(deg)
    vals = inv_sqrt[rows] * inv_sqrt[cols]
    return SparseMatrix.from_pairs(n, n, rows, cols, vals)


def social_aggregate(social: SparseMatrix, h_users: Tensor, levels: int,
                     self_loop: bool = True, aggregation: str = "plain") -> Tensor:
    """L levels of linear feature aggregation over the social graph.

    plain: h <- A h (+ h when self_loop). gcn: h <- norm(A + I) h, where the
    normalization is symmetric inverse-sqrt-degree. levels=0 is the identity.
    """
    if levels < 0:
        raise ContractError("levels must be >= 0")
    h = h_users
    if aggregation == "gcn":
        norm = _gcn_normalized(social)
        for _ in range(levels):
            h = spmm(norm, h)
        return h
    for _ in range(levels):
        h = add(spmm(social, h), h) if self_loop else spmm(social, h)
    return h


def _mean_rows(matrix: SparseMatrix, h: Tensor, degrees: np.ndarray) -> Tensor:
    inv = np.where(degrees > 0, 1.0 / np.maximum(degrees, 1.0), 0.0)
    return scale_rows(spmm(matrix, h), inv)


def interest_propagate(bipartite: BipartiteInteractions, h_users_agg: Tensor,
                       h_items: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Mix user and item representations across the bipartite graph.

    Users receive the mean of their positive items' representations plus a
    residual. Items receive two MLP-transformed mean aggregates of their
    positive/negative users plus a residual; rows with zero degree get a
    zero contribution from the corresponding term (the MLP output is masked,
    not fed zeros).
    """
    user_out = add(_mean_rows(bipartite.pos, h_items, bipartite.user_pos_degree),
                   h_users_agg)

    pos_mean = _mean_rows(bipartite.pos.transpose(), h_users_agg, bipartite.item_pos_degree)
    pos_term = scale_rows(mlp_forward(params.pos_prop, pos_mean),
                          (bipartite.item_pos_degree > 0).astype(np.float64))
    neg_mean = _mean_rows(bipartite.neg.transpose(), h_users_agg, bipartite.item_neg_degree)
    neg_term = scale_rows(mlp_forward(params.neg_prop, neg_mean),
                          (bipartite.item_neg_degree > 0).astype(np.float64))
    item_out = add(add(pos_term, neg_term), h_items)
    return user_out, item_out


def forward(dataset: Dataset, bipartite: BipartiteInteractions,
            params: ModelParams, return_hidden: bool = False):
    """Full forward pass on one tape: hidden reps -> aggregation -> propagation.

    Returns (user_out, item_out); with return_hidden also the pre-propagation
    (aggregated user, item) hidden tensors, for callers that anchor fake
    samples before propagation.
    """
    cfg = params.config
    h_user, h_item = hidden_reps(dataset.user_features, dataset.item_features, params)
    h_agg = social_aggregate(dataset.social, h_user, cfg.levels,
                             self_loop=cfg.self_loop, aggregation=cfg.aggregation)
    user_out, item_out = interest_propagate(bipartite, h_agg, h_item, params)
    if return_hidden:
        return user_out, item_out, h_agg, h_item
    return user_out, item_out


def predict(user_reprs: np.ndarray, item_reprs: np.ndarray, pairs) -> np.ndarray:
    """Inner-product scores for (user, item) pairs."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs[:, 0].max() >= len(user_reprs)
                       or pairs[:, 1].max() >= len(item_reprs)):
        raise DimensionError("pair index out of range")
    return np.einsum("ij,ij->i", user_reprs[pairs[:, 0]], item_reprs[pairs[:, 1]])


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout (all little-endian):
#   magic            8 bytes  b"SRECCKP1"
#   version          uint32   currently 1
#   n_users          uint32
#   n_items          uint32
#   dim              uint32
#   levels           uint32
#   prior_std        float64
#   n_blocks         uint32
#   per block: name_len uint32, name utf-8, rows uint32, cols uint32,
#              rows*cols float64 values in row-major order.

CHECKPOINT_MAGIC = b"SRECCKP1"
CHECKPOINT_VERSION = 1


@dataclass
class CheckpointMeta:
    n_users: int
    n_items: int
    dim: int
    levels: int
    prior_std: float


def save_checkpoint(path, meta: CheckpointMeta, blocks: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIIII", CHECKPOINT_VERSION, meta.n_users,
                             meta.n_items, meta.dim, meta.levels))
        fh.write(struct.pack("<d", meta.prior_std))
        fh.write(struct.pack("<I", len(blocks)))
        for name in sorted(blocks):
            arr = np.ascontiguousarray(blocks[name], dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[CheckpointMeta, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(f"not a checkpoint file (magic {magic!r})")
        version, n_users, n_items, dim, levels = struct.unpack("<IIIII", fh.read(20))
        if version != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        (prior_std,) = struct.unpack("<d", fh.read(8))
        (n_blocks,) = struct.unpack("<I", fh.read(4))
        blocks = {}
        for _ in range(n_blocks):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            rows, cols = struct.unpack("<II", fh.read(8))
            data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8")
            blocks[name] = data.reshape(rows, cols).astype(np.float64)
    return CheckpointMeta(n_users, n_items, dim, levels, prior_std), blocks


def params_to_blocks(params: ModelParams) -> dict[str, np.ndarray]:
    return {p.name: p.value.copy() for p in params.parameters()}


def params_from_blocks(config: ModelConfig, n_users: int, n_items: int,
                       k1: int, k2: int, blocks: dict[str, np.ndarray]) -> ModelParams:
    """Rebuild ModelParams with the stored values (shapes must agree)."""
    params = init_params(replace(config), n_users, n_items, k1, k2, seed=0)
    registered = {p.name: p for p in params.parameters()}
    missing = sorted(set(registered) - set(blocks))
    if missing:
        raise ContractError(f"checkpoint is missing parameter blocks: {missing}")
    for name, param in registered.items():
        stored = blocks[name]
        if stored.shape != param.value.shape:
            raise DimensionError(
                f"block {name!r} has shape {stored.shape}, expected {param.value.shape}")
        param.value[...] = stored
    return params
