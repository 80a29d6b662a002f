"""Ranking-protocol evaluation: per-user candidate lists built from held-out
items plus sampled unrated items, scored and reduced to HR@K and NDCG@K.

HR@K for one user is |held-out items in the top K| / |held-out items|; NDCG@K
uses binary gains 1/log2(position + 1) normalized by the ideal placement of
min(|held-out|, K) items. Both are averaged over users with at least one
held-out item. Candidate negatives are fixed per (protocol seed, user) and
exclude every observed interaction of the user across all split parts, so a
held-out item can never leak into the sampled negatives.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, DatasetSplit, pairs_by_user
from .errors import ConfigError, ContractError


@dataclass
class RankingProtocol:
    n_negatives: int = 1000
    k_list: tuple = (5, 10, 15)
    seed: int = 0

    def validate(self) -> None:
        if self.n_negatives < 1:
            raise ConfigError("n_negatives must be >= 1")
        ks = tuple(self.k_list)
        if not ks or any(k < 1 for k in ks) or list(ks) != sorted(set(ks)):
            raise ConfigError("k_list must be positive and strictly ascending")


@dataclass
class MetricsReport:
    hr: dict            # K -> value in [0, 1]
    ndcg: dict          # K -> value in [0, 1]
    users_evaluated: int
    seed: int
    model_id: str
    shortfall_users: int = 0  # users with fewer than n_negatives unrated items

    def to_json(self) -> str:
        payload = {
            "model_id": self.model_id,
            "seed": self.seed,
            "users_evaluated": self.users_evaluated,
            "shortfall_users": self.shortfall_users,
            "hr": {str(k): v for k, v in self.hr.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def to_tsv(self) -> str:
        lines = ["K\thr\tndcg"]
        for k in self.hr:
            lines.append(f"{k}\t{self.hr[k]:.10f}\t{self.ndcg[k]:.10f}")
        return "\n".join(lines) + "\n"


def rank_candidates(score_fn, user: int, held_out: np.ndarray, observed: np.ndarray,
                    n_items: int, protocol: RankingProtocol) -> tuple[np.ndarray, bool]:
    """Ordered candidate ids for one user: held-out items plus sampled
    unrated negatives, descending score, ties broken by ascending item id.

    Returns (ranked ids, shortfall flag); the flag is set when fewer than
    n_negatives unrated items exist and all of them were used.
    """
    held_out = np.asarray(held_out, dtype=np.int64)
    if held_out.size == 0:
        raise ContractError("rank_candidates requires at least one held-out item")
    unrated = np.setdiff1d(np.arange(n_items, dtype=np.int64), observed)
    shortfall = len(unrated) < protocol.n_negatives
    if shortfall:
        negatives = unrated
    else:
        rng = np.random.default_rng([protocol.seed, user])
        negatives = rng.choice(unrated, size=protocol.n_negatives, replace=False)
    candidates = np.concatenate([held_out, negatives])
    scores = np.asarray(score_fn(user, candidates), dtype=np.float64)
    order = np.lexsort((candidates, -scores))
    return candidates[order], shortfall


def hr_at_k(ranked: np.ndarray, held_out, k: int) -> float:
    """Fraction of the user's held-out items appearing in the top k."""
    if k < 1:
        raise ContractError("k must be >= 1")
    relevant = set(int(i) for i in held_out)
    hits = sum(1 for i in ranked[:k] if int(i) in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked: np.ndarray, held_out, k: int) -> float:
    """Positionally discounted gain in the top k over the ideal placement."""
    if k < 1:
        raise ContractError("k must be >= 1")
    relevant = set(int(i) for i in held_out)
    dcg = 0.0
    for pos, item in enumerate(ranked[:k], start=1):
        if int(item) in relevant:
            dcg += 1.0 / math.log2(pos + 1)
    ideal = sum(1.0 / math.log2(pos + 1)
                for pos in range(1, min(len(relevant), k) + 1))
    return dcg / ideal


def evaluate(score_fn, dataset: Dataset, split: DatasetSplit, part: str,
             protocol: RankingProtocol, model_id: str = "model") -> MetricsReport:
    """Metrics per K averaged over users with >= 1 held-out item in ``part``.

    ``score_fn(user, item_ids) -> scores`` is evaluated on each user's
    candidate list; results are deterministic for a fixed protocol seed.
    """
    protocol.validate()
    pairs = split.part(part)
    if len(pairs) == 0:
        raise ContractError(f"split part {part!r} is empty")
    held_by_user = pairs_by_user(pairs, dataset.n_users)
    ks = tuple(protocol.k_list)
    hr_sums = {k: 0.0 for k in ks}
    ndcg_sums = {k: 0.0 for k in ks}
    n_eval = 0
    n_short = 0
    for u in range(dataset.n_users):
        held = held_by_user[u]
        if len(held) == 0:
            continue
        ranked, short = rank_candidates(score_fn, u, held, dataset.user_items(u),
                                        dataset.n_items, protocol)
        n_short += bool(short)
        for k in ks:
            hr_sums[k] += hr_at_k(ranked, held, k)
            ndcg_sums[k] += ndcg_at_k(ranked, held, k)
        n_eval += 1
    if n_eval == 0:
        raise ContractError(f"no user has a held-out item in part {part!r}")
    return MetricsReport(
        hr={k: hr_sums[k] / n_eval for k in ks},
        ndcg={k: ndcg_sums[k] / n_eval for k in ks},
        users_evaluated=n_eval,
        seed=protocol.seed,
        model_id=model_id,
        shortfall_users=n_short,
    )


def inner_product_scorer(user_reprs: np.ndarray, item_reprs: np.ndarray):
    """Score function over fixed representation matrices."""

    def score_fn(user, item_ids):
        return item_reprs[np.asarray(item_ids, dtype=np.int64)] @ user_reprs[user]

    return score_fn


@dataclass
class AggregateReport:
    """Mean and population std of metrics across per-seed reports."""

    model_id: str
    seeds: list
    mean_hr: dict = field(default_factory=dict)
    std_hr: dict = field(default_factory=dict)
    mean_ndcg: dict = field(default_factory=dict)
    std_ndcg: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "model_id": self.model_id,
            "seeds": list(self.seeds),
            "hr_mean": {str(k): v for k, v in self.mean_hr.items()},
            "hr_std": {str(k): v for k, v in self.std_hr.items()},
            "ndcg_mean": {str(k): v for k, v in self.mean_ndcg.items()},
            "ndcg_std": {str(k): v for k, v in self.std_ndcg.items()},
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def to_tsv(self) -> str:
        lines = ["K\thr_mean\thr_std\tndcg_mean\tndcg_std"]
        for k in self.mean_hr:
            lines.append(f"{k}\t{self.mean_hr[k]:.10f}\t{self.std_hr[k]:.10f}"
                         f"\t{self.mean_ndcg[k]:.10f}\t{self.std_ndcg[k]:.10f}")
        return "\n".join(lines) + "\n"


def aggregate_reports(reports: list[MetricsReport]) -> AggregateReport:
    if not reports:
        raise ContractError("nothing to aggregate")
    ks = list(reports[0].hr)
    out = AggregateReport(model_id=reports[0].model_id,
                          seeds=[r.seed for r in reports])
    for k in ks:
        hr = np.array([r.hr[k] for r in reports])
        nd = np.array([r.ndcg[k] for r in reports])
        out.mean_hr[k] = float(hr.mean())
        out.std_hr[k] = float(hr.std())
        out.mean_ndcg[k] = float(nd.mean())
        out.std_ndcg[k] = float(nd.std())
    return out
