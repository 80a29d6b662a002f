"""Matrix-factorization baseline with a social regularizer.

The loss is 0.5 * sum of squared residuals over observed interactions, plus
a social term (average-based or individual-based) weighted by beta/2 and
Frobenius penalties on both factor matrices. Neighbor weights are the cosine
similarity of interaction rows; users with no neighbors or zero similarity
mass simply contribute nothing to the social term.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (AdamState, Parameter, Tensor, adam_step, backward,
                       gather_rows, mul, rowwise_sum, scale_rows, spmm,
                       total_sum, zero_grads, finite_diff_check)
from .data import Dataset, DatasetSplit
from .errors import ConfigError, ContractError, TrainingError
from .evaluation import RankingProtocol, evaluate, inner_product_scorer
from .sparse import SparseMatrix
from .training import TrainingConfig, TrainReport

REGULARIZER_KINDS = ("average", "individual")


@dataclass
class MFConfig:
    dim: int = 16
    social_weight: float = 0.1      # beta
    l2_user: float = 0.01           # lambda_1
    l2_item: float = 0.01           # lambda_2
    regularizer: str = "average"
    similarity: str = "cosine"

    def validate(self) -> None:
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if min(self.social_weight, self.l2_user, self.l2_item) < 0:
            raise ConfigError("regularization coefficients must be >= 0")
        if self.regularizer not in REGULARIZER_KINDS:
            raise ConfigError(f"unknown regularizer {self.regularizer!r}")
        if self.similarity != "cosine":
            raise ConfigError(f"unknown similarity {self.similarity!r}")


@dataclass
class MFParams:
    config: MFConfig
    user: Parameter  # (N, k)
    item: Parameter  # (M, k)

    def parameters(self) -> list[Parameter]:
        return [self.user, self.item]


def init_mf(config: MFConfig, n_users: int, n_items: int, seed: int) -> MFParams:
    config.validate()
    rng = np.random.default_rng(seed)
    return MFParams(
        config=config,
        user=Parameter(rng.normal(0.0, 0.1, size=(n_users, config.dim)), "mf.user"),
        item=Parameter(rng.normal(0.0, 0.1, size=(n_items, config.dim)), "mf.item"),
    )


def similarity(i: int, j: int, interactions: SparseMatrix) -> float:
    """Cosine similarity of two users' interaction rows; 0 if either is empty."""
    a = interactions.row_items(i)
    b = interactions.row_items(j)
    if len(a) == 0 or len(b) == 0:
        return 0.0
    common = np.intersect1d(a, b, assume_unique=True)
    return len(common) / np.sqrt(len(a) * len(b))


@dataclass
class SocialRegContext:
    """Precomputed neighbor structure for the social regularizer."""

    kind: str
    # individual: directed social edges with their similarity weights
    edge_src: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    edge_dst: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    edge_sim: np.ndarray = field(default_factory=lambda: np.empty(0))
    # average: row-normalized neighbor-weight matrix and the active-row mask
    weights: SparseMatrix | None = None
    active: np.ndarray = field(default_factory=lambda: np.empty(0))

    @classmethod
    def build(cls, dataset: Dataset, kind: str) -> "SocialRegContext":
        if kind not in REGULARIZER_KINDS:
            raise ConfigError(f"unknown regularizer {kind!r}")
        pairs = dataset.social.to_pairs()
        sims = np.array([similarity(int(u), int(v), dataset.interactions)
                         for u, v in pairs])
        if kind == "individual":
            return cls(kind=kind, edge_src=pairs[:, 0], edge_dst=pairs[:, 1],
                       edge_sim=sims)
        # average-based: weights are max(sim, 0) normalized per row
        clipped = np.maximum(sims, 0.0)
        mass = np.zeros(dataset.n_users)
        np.add.at(mass, pairs[:, 0], clipped)
        keep = clipped > 0.0
        norm_vals = clipped[keep] / mass[pairs[:, 0][keep]]
        weights = SparseMatrix.from_pairs(dataset.n_users, dataset.n_users,
                                          pairs[:, 0][keep], pairs[:, 1][keep],
                                          norm_vals)
        return cls(kind=kind, weights=weights,
                   active=(mass > 0.0).astype(np.float64))


def social_reg(user_factors: Tensor, context: SocialRegContext) -> Tensor:
    """Social regularizer value on the tape.

    average:    sum_i ||u_i - sum_j w_ij u_j||^2 over users with positive
                similarity mass.
    individual: sum over directed social edges of sim(i, j) * ||u_i - u_j||^2.
    """
    if context.kind == "individual":
        if len(context.edge_src) == 0:
            return Tensor(np.zeros((1, 1)))
        diff = gather_rows(user_factors, context.edge_src) + \
            mul(gather_rows(user_factors, context.edge_dst), -1.0)
        per_edge = rowwise_sum(mul(diff, diff))
        return total_sum(scale_rows(per_edge, context.edge_sim))
    if context.weights is None or context.weights.nnz == 0:
        return Tensor(np.zeros((1, 1)))
    mean = spmm(context.weights, user_factors)
    diff = user_factors + mul(mean, -1.0)
    per_user = rowwise_sum(mul(diff, diff))
    return total_sum(scale_rows(per_user, context.active))


def mf_loss(params: MFParams, observed_pairs: np.ndarray,
            context: SocialRegContext) -> Tensor:
    """0.5 * residuals^2 + (beta/2) * social + (l2/2) * Frobenius terms."""
    cfg = params.config
    observed_pairs = np.asarray(observed_pairs, dtype=np.int64).reshape(-1, 2)
    u_rows = gather_rows(params.user, observed_pairs[:, 0])
    i_rows = gather_rows(params.item, observed_pairs[:, 1])
    scores = rowwise_sum(mul(u_rows, i_rows))
    residual = np.ones((len(observed_pairs), 1)) + mul(scores, -1.0)
    loss = mul(total_sum(mul(residual, residual)), 0.5)
    if cfg.social_weight > 0:
        loss = loss + mul(social_reg(params.user, context), cfg.social_weight / 2.0)
    if cfg.l2_user > 0:
        loss = loss + mul(total_sum(mul(params.user, params.user)), cfg.l2_user / 2.0)
    if cfg.l2_item > 0:
        loss = loss + mul(total_sum(mul(params.item, params.item)), cfg.l2_item / 2.0)
    return loss


def mf_fit(dataset: Dataset, split: DatasetSplit, params: MFParams,
           train_cfg: TrainingConfig, protocol: RankingProtocol,
           run_dir=None) -> tuple[MFParams, TrainReport]:
    """Full-batch Adam on the train split with early stopping on NDCG@10."""
    train_cfg.validate()
    protocol.validate()
    if 10 not in tuple(protocol.k_list):
        raise ConfigError("early stopping needs K=10 in the protocol k_list")
    context = SocialRegContext.build(dataset, params.config.regularizer)
    opt_state = AdamState()
    all_params = params.parameters()
    report = TrainReport(sampler_kind="none", seed=train_cfg.seed, neg_ratio=0.0,
                         loss_scaling="full-batch, 0.5*sum")
    best_ndcg = -np.inf
    best_values: dict[str, np.ndarray] = {}
    stale = 0
    for epoch in range(train_cfg.max_epochs):
        started = time.perf_counter()
        loss = mf_loss(params, split.train, context)
        value = float(loss.value[0, 0])
        if not np.isfinite(value):
            raise TrainingError(f"non-finite baseline loss at epoch {epoch}")
        if train_cfg.learning_rate > 0:
            zero_grads(all_params)
            backward(loss)
            adam_step(all_params, opt_state, train_cfg.learning_rate,
                      weight_decay=0.0)
        val = evaluate(inner_product_scorer(params.user.value, params.item.value),
                       dataset, split, "validation", protocol, model_id="mf")
        report.epochs.append({
            "epoch": epoch, "loss": value,
            "val_hr": {str(k): v for k, v in val.hr.items()},
            "val_ndcg": {str(k): v for k, v in val.ndcg.items()},
            "seconds": time.perf_counter() - started,
        })
        if val.ndcg[10] > best_ndcg:
            best_ndcg = val.ndcg[10]
            report.best_epoch = epoch
            report.best_val_hr = dict(val.hr)
            report.best_val_ndcg = dict(val.ndcg)
            best_values = {p.name: p.value.copy() for p in all_params}
            stale = 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                break
    for p in all_params:
        p.value[...] = best_values[p.name]

    if run_dir is not None:
        from pathlib import Path

        from .model import CheckpointMeta, save_checkpoint
        from .training import CHECKPOINT_FILE, REPORT_FILE

        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        meta = CheckpointMeta(dataset.n_users, dataset.n_items,
                              params.config.dim, 0, 0.0)
        save_checkpoint(run_dir / CHECKPOINT_FILE, meta,
                        {p.name: p.value.copy() for p in all_params})
        with open(run_dir / REPORT_FILE, "w", encoding="utf-8") as fh:
            fh.write(report.to_jsonl())
    return params, report


def mf_gradient_check(dataset: Dataset, split: DatasetSplit, params: MFParams,
                      h: float = 1e-5):
    """Finite-difference check of the full baseline loss."""
    context = SocialRegContext.build(dataset, params.config.regularizer)
    return finite_diff_check(lambda: mf_loss(params, split.train, context),
                             params.parameters(), h=h)
