"""Squared-error training loop: per-epoch negative assembly, seeded batch
shuffling, reverse-mode gradients, Adam with coupled weight decay, and early
stopping on validation NDCG@10.

The objective per batch is the summed squared residual over positive and
negative (user, item) pairs, with fake negatives scored against their
generated embeddings. The optimizer consumes the sum scaled by 1/batch_size
(recorded in the report as ``loss_scaling``); epoch losses are reported as
plain sums.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (AdamState, Tensor, adam_step, backward, concat_rows,
                       gather_rows, group_mean, mul, rowwise_sum, total_sum,
                       zero_grads)
from .data import Dataset, DatasetSplit, BipartiteInteractions, build_bipartite
from .errors import ConfigError, ContractError, TrainingError
from .evaluation import RankingProtocol, evaluate, inner_product_scorer
from .model import ModelParams, CheckpointMeta, forward, params_to_blocks, save_checkpoint
from .sampling import (NegativeSampleSet, SamplerConfig, assemble_negatives,
                       dump_sample_set, generate_fake_batch)

_SHUFFLE_TAG = 9001

CHECKPOINT_FILE = "checkpoint.bin"
REPORT_FILE = "train_report.jsonl"
NEGATIVES_FILE = "best_negatives.tsv"


@dataclass
class TrainingConfig:
    learning_rate: float = 0.001
    batch_size: int = 200
    weight_decay: float = 0.001
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0

    def validate(self) -> None:
        # learning_rate 0 is allowed as an explicit no-update run
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


@dataclass
class TrainingBatch:
    """Discrete (user, item, target) triples plus fake-sample recipes."""

    users: np.ndarray
    items: np.ndarray
    targets: np.ndarray
    fake_users: np.ndarray
    fake_anchors: np.ndarray
    fake_alphas: np.ndarray
    fake_pools: np.ndarray

    @property
    def size(self) -> int:
        return len(self.users) + len(self.fake_users)


@dataclass
class TrainReport:
    sampler_kind: str
    seed: int
    neg_ratio: float
    loss_scaling: str = "sum/batch_size"
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_hr: dict = field(default_factory=dict)
    best_val_ndcg: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"record": "meta", "sampler_kind": self.sampler_kind,
                             "seed": self.seed, "neg_ratio": self.neg_ratio,
                             "loss_scaling": self.loss_scaling}, sort_keys=True)]
        for entry in self.epochs:
            lines.append(json.dumps({"record": "epoch", **entry}, sort_keys=True))
        lines.append(json.dumps({"record": "best", "best_epoch": self.best_epoch,
                                 "val_hr": {str(k): v for k, v in self.best_val_hr.items()},
                                 "val_ndcg": {str(k): v for k, v in self.best_val_ndcg.items()}},
                                sort_keys=True))
        return "\n".join(lines) + "\n"


def load_report_best_epoch(path) -> int:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            record = json.loads(line)
            if record.get("record") == "best":
                return int(record["best_epoch"])
    raise ContractError(f"no best-epoch record in {path}")


def mse_loss(scores: Tensor, targets) -> Tensor:
    """Summed squared error between scores and targets (no averaging)."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    if targets.shape != scores.value.shape:
        raise ContractError(
            f"scores {scores.value.shape} and targets {targets.shape} differ")
    residual = targets + mul(scores, -1.0)
    return total_sum(mul(residual, residual))


def build_batches(split: DatasetSplit, sample_set: NegativeSampleSet,
                  batch_size: int, rng: np.random.Generator) -> list[TrainingBatch]:
    """Shuffle positives, discrete negatives and fakes together, then cut."""
    neg_pairs = sample_set.pairs()
    disc_users = np.concatenate([split.train[:, 0], neg_pairs[:, 0]])
    disc_items = np.concatenate([split.train[:, 1], neg_pairs[:, 1]])
    disc_targets = np.concatenate([np.ones(len(split.train)),
                                   np.zeros(len(neg_pairs))])
    n_disc = len(disc_users)
    total = n_disc + sample_set.n_fakes
    order = rng.permutation(total)
    batches = []
    for start in range(0, total, batch_size):
        chunk = order[start:start + batch_size]
        disc_sel = chunk[chunk < n_disc]
        fake_sel = chunk[chunk >= n_disc] - n_disc
        batches.append(TrainingBatch(
            users=disc_users[disc_sel], items=disc_items[disc_sel],
            targets=disc_targets[disc_sel],
            fake_users=sample_set.fake_users[fake_sel],
            fake_anchors=sample_set.fake_anchors[fake_sel],
            fake_alphas=sample_set.fake_alphas[fake_sel],
            fake_pools=sample_set.fake_pools[fake_sel],
        ))
    return batches


def full_batch(split: DatasetSplit, sample_set: NegativeSampleSet) -> TrainingBatch:
    """Every positive, discrete negative, and fake in one unshuffled batch."""
    neg_pairs = sample_set.pairs()
    return TrainingBatch(
        users=np.concatenate([split.train[:, 0], neg_pairs[:, 0]]),
        items=np.concatenate([split.train[:, 1], neg_pairs[:, 1]]),
        targets=np.concatenate([np.ones(len(split.train)), np.zeros(len(neg_pairs))]),
        fake_users=sample_set.fake_users,
        fake_anchors=sample_set.fake_anchors,
        fake_alphas=sample_set.fake_alphas,
        fake_pools=sample_set.fake_pools,
    )


def batch_loss(dataset: Dataset, bipartite: BipartiteInteractions,
               params: ModelParams, batch: TrainingBatch,
               anchor: str = "post") -> tuple[Tensor, dict]:
    """Summed squared error of one batch on a fresh tape.

    Discrete pairs score as <user_out[u], item_out[i]> against their 0/1
    target; fakes score as <user_out[u], z> with target 0, where z is the
    interpolated embedding built from this tape's item representations
    (post-propagation by default, pre-propagation when anchor='pre').
    """
    user_out, item_out, _, h_item = forward(dataset, bipartite, params,
                                            return_hidden=True)
    anchor_src = item_out if anchor == "post" else h_item
    score_parts, target_parts = [], []
    aux: dict = {}
    if len(batch.users):
        u_rows = gather_rows(user_out, batch.users)
        i_rows = gather_rows(item_out, batch.items)
        score_parts.append(rowwise_sum(mul(u_rows, i_rows)))
        target_parts.append(batch.targets)
    if len(batch.fake_users):
        pool_size = batch.fake_pools.shape[1]
        anchors = gather_rows(anchor_src, batch.fake_anchors)
        pooled = group_mean(gather_rows(anchor_src, batch.fake_pools.reshape(-1)),
                            pool_size)
        fakes, transformed = generate_fake_batch(anchors, pooled,
                                                 batch.fake_alphas, params.generator)
        fake_user_rows = gather_rows(user_out, batch.fake_users)
        score_parts.append(rowwise_sum(mul(fake_user_rows, fakes)))
        target_parts.append(np.zeros(len(batch.fake_users)))
        aux["generator_norm"] = float(
            np.linalg.norm(transformed.value, axis=1).mean())
    if not score_parts:
        raise ContractError("empty batch")
    scores = score_parts[0]
    if len(score_parts) == 2:
        scores = concat_rows(score_parts[0], score_parts[1])
    return mse_loss(scores, np.concatenate(target_parts)), aux


@dataclass
class EpochOutcome:
    loss: float
    bipartite: BipartiteInteractions
    sample_set: NegativeSampleSet
    generator_norm: float | None


def train_epoch(dataset: Dataset, split: DatasetSplit, params: ModelParams,
                opt_state: AdamState, sampler_cfg: SamplerConfig,
                train_cfg: TrainingConfig, epoch: int,
                snapshot: tuple[np.ndarray, np.ndarray] | None) -> EpochOutcome:
    """One pass over the epoch's shuffled positive/negative triples.

    Returns the summed epoch loss together with the bipartite graph and
    sample set used, so evaluation can run against the same structures.
    """
    sample_set = assemble_negatives(dataset, split, snapshot, sampler_cfg,
                                    epoch, train_cfg.seed)
    bipartite = build_bipartite(split.train, sample_set.pairs(),
                                dataset.n_users, dataset.n_items)
    rng = np.random.default_rng([train_cfg.seed, epoch, _SHUFFLE_TAG])
    batches = build_batches(split, sample_set, train_cfg.batch_size, rng)
    all_params = params.parameters()
    epoch_loss = 0.0
    gen_norms = []
    for index, batch in enumerate(batches):
        loss_sum, aux = batch_loss(dataset, bipartite, params, batch,
                                   anchor=sampler_cfg.anchor)
        value = float(loss_sum.value[0, 0])
        if not np.isfinite(value):
            raise TrainingError(
                f"non-finite training loss at epoch {epoch}, batch {index}")
        epoch_loss += value
        if "generator_norm" in aux:
            gen_norms.append(aux["generator_norm"])
        if train_cfg.learning_rate > 0:
            step_loss = mul(loss_sum, 1.0 / batch.size)
            zero_grads(all_params)
            backward(step_loss)
            adam_step(all_params, opt_state, train_cfg.learning_rate,
                      train_cfg.weight_decay)
    gen_norm = float(np.mean(gen_norms)) if gen_norms else None
    return EpochOutcome(epoch_loss, bipartite, sample_set, gen_norm)


@dataclass
class FitResult:
    params: ModelParams
    report: TrainReport
    best_sample_set: NegativeSampleSet


def fit(dataset: Dataset, split: DatasetSplit, params: ModelParams,
        sampler_cfg: SamplerConfig, train_cfg: TrainingConfig,
        protocol: RankingProtocol, run_dir=None,
        model_id: str = "nemo") -> FitResult:
    """Train up to max_epochs with early stopping on validation NDCG@10.

    Keeps the parameter values of the best validation epoch and restores
    them before returning. With a run_dir, writes checkpoint.bin,
    train_report.jsonl and best_negatives.tsv there.
    """
    train_cfg.validate()
    sampler_cfg.validate()
    protocol.validate()
    if 10 not in tuple(protocol.k_list):
        raise ConfigError("early stopping needs K=10 in the protocol k_list")

    opt_state = AdamState()
    empty = np.empty((0, 2), dtype=np.int64)
    boot = build_bipartite(split.train, empty, dataset.n_users, dataset.n_items)
    u0, i0 = forward(dataset, boot, params)
    snapshot = (u0.value, i0.value)

    report = TrainReport(
        sampler_kind=sampler_cfg.kind, seed=train_cfg.seed,
        neg_ratio=sampler_cfg.n_neg * dataset.n_users / max(len(split.train), 1))
    best_ndcg = -np.inf
    best_values: dict[str, np.ndarray] = {}
    best_sample_set = None
    stale = 0
    for epoch in range(train_cfg.max_epochs):
        started = time.perf_counter()
        outcome = train_epoch(dataset, split, params, opt_state, sampler_cfg,
                              train_cfg, epoch, snapshot)
        u_t, i_t = forward(dataset, outcome.bipartite, params)
        snapshot = (u_t.value, i_t.value)
        val = evaluate(inner_product_scorer(*snapshot), dataset, split,
                       "validation", protocol, model_id=model_id)
        entry = {
            "epoch": epoch,
            "loss": outcome.loss,
            "val_hr": {str(k): v for k, v in val.hr.items()},
            "val_ndcg": {str(k): v for k, v in val.ndcg.items()},
            "seconds": time.perf_counter() - started,
        }
        if outcome.generator_norm is not None:
            entry["generator_norm"] = outcome.generator_norm
        report.epochs.append(entry)
        if val.ndcg[10] > best_ndcg:
            best_ndcg = val.ndcg[10]
            report.best_epoch = epoch
            report.best_val_hr = dict(val.hr)
            report.best_val_ndcg = dict(val.ndcg)
            best_values = {p.name: p.value.copy() for p in params.parameters()}
            best_sample_set = outcome.sample_set
            stale = 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                break

    for p in params.parameters():
        p.value[...] = best_values[p.name]

    if run_dir is not None:
        from pathlib import Path

        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        meta = CheckpointMeta(dataset.n_users, dataset.n_items,
                              params.config.dim, params.config.levels,
                              params.config.prior_std)
        save_checkpoint(run_dir / CHECKPOINT_FILE, meta, params_to_blocks(params))
        with open(run_dir / REPORT_FILE, "w", encoding="utf-8") as fh:
            fh.write(report.to_jsonl())
        dump_sample_set(run_dir / NEGATIVES_FILE, best_sample_set)
    return FitResult(params=params, report=report, best_sample_set=best_sample_set)
