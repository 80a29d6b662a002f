"""Per-axis ablation grid: prior kind, sampler kind, aggregation depth, and
aggregation style, each swept around a base configuration and averaged over
seeds. Runs that share a configuration are executed once and reused."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, build_bipartite, split_dataset
from .evaluation import (MetricsReport, RankingProtocol, evaluate,
                         inner_product_scorer)
from .errors import ConfigError
from .model import ModelConfig, forward, init_params
from .sampling import SamplerConfig
from .training import FitResult, TrainingConfig, fit

AXIS_VARIANTS = {
    "prior": ["gaussian", "uniform", "none"],
    "sampler": ["fixed", "static", "generative"],
    "depth": [0, 1, 2, 3, 4, 5, 6],
    "aggregation": ["plain", "gcn"],
}


@dataclass
class AblationOutcome:
    axis: str
    variant: str
    seed: int
    best_val_ndcg10: float
    test_report: MetricsReport


def test_metrics_for(dataset: Dataset, split, result: FitResult,
                     protocol: RankingProtocol, model_id: str) -> MetricsReport:
    """Test-part metrics of a fitted model, scored with the best epoch's
    bipartite graph (train positives plus that epoch's negatives)."""
    bipartite = build_bipartite(split.train, result.best_sample_set.pairs(),
                                dataset.n_users, dataset.n_items)
    user_out, item_out = forward(dataset, bipartite, result.params)
    return evaluate(inner_product_scorer(user_out.value, item_out.value),
                    dataset, split, "test", protocol, model_id=model_id)


def run_single(dataset: Dataset, seed: int, model_cfg: ModelConfig,
               sampler_cfg: SamplerConfig, train_cfg: TrainingConfig,
               protocol: RankingProtocol,
               model_id: str = "nemo") -> tuple[float, MetricsReport, FitResult]:
    """One seeded train/evaluate cycle; the seed drives the split, the
    parameter init, the sampler, and the ranking protocol."""
    split = split_dataset(dataset, seed)
    params = init_params(model_cfg, dataset.n_users, dataset.n_items,
                         dataset.user_features.shape[1],
                         dataset.item_features.shape[1], seed)
    result = fit(dataset, split, params,
                 replace(sampler_cfg),
                 replace(train_cfg, seed=seed),
                 replace(protocol, seed=seed),
                 model_id=model_id)
    report = test_metrics_for(dataset, split, result,
                              replace(protocol, seed=seed), model_id)
    return result.report.best_val_ndcg[10], report, result


def _variant_configs(axis: str, variant, model_cfg: ModelConfig,
                     sampler_cfg: SamplerConfig):
    if axis == "prior":
        return replace(model_cfg, prior_kind=str(variant)), sampler_cfg
    if axis == "sampler":
        return model_cfg, replace(sampler_cfg, kind=str(variant))
    if axis == "depth":
        return replace(model_cfg, levels=int(variant)), sampler_cfg
    if axis == "aggregation":
        return replace(model_cfg, aggregation=str(variant)), sampler_cfg
    raise ConfigError(f"unknown ablation axis {axis!r}")


def _cache_key(seed: int, model_cfg: ModelConfig, sampler_cfg: SamplerConfig):
    return (seed, model_cfg.prior_kind, sampler_cfg.kind, model_cfg.levels,
            model_cfg.aggregation)


def run_axes(dataset: Dataset, seeds, model_cfg: ModelConfig,
             sampler_cfg: SamplerConfig, train_cfg: TrainingConfig,
             protocol: RankingProtocol, axes: dict | None = None,
             progress=None) -> list[AblationOutcome]:
    """Sweep each requested axis around the base configuration."""
    axes = dict(AXIS_VARIANTS) if axes is None else axes
    cache: dict = {}
    outcomes = []
    for axis, variants in axes.items():
        for variant in variants:
            m_cfg, s_cfg = _variant_configs(axis, variant, model_cfg, sampler_cfg)
            for seed in seeds:
                key = _cache_key(seed, m_cfg, s_cfg)
                if key not in cache:
                    if progress:
                        progress(f"run axis={axis} variant={variant} seed={seed}")
                    best_val, test_report, _ = run_single(
                        dataset, seed, m_cfg, s_cfg, train_cfg, protocol)
                    cache[key] = (best_val, test_report)
                best_val, test_report = cache[key]
                outcomes.append(AblationOutcome(axis, str(variant), seed,
                                                best_val, test_report))
    return outcomes


def axis_table(outcomes: list[AblationOutcome], axis: str, k_list) -> str:
    """One TSV per axis: test HR@K / NDCG@K means plus validation NDCG@10."""
    rows = [o for o in outcomes if o.axis == axis]
    variants = list(dict.fromkeys(o.variant for o in rows))
    header = (["variant"]
              + [f"hr@{k}" for k in k_list]
              + [f"ndcg@{k}" for k in k_list]
              + ["val_ndcg@10_mean", "val_ndcg@10_std", "seeds"])
    lines = ["\t".join(header)]
    for variant in variants:
        group = [o for o in rows if o.variant == variant]
        cells = [variant]
        for k in k_list:
            cells.append(f"{np.mean([o.test_report.hr[k] for o in group]):.6f}")
        for k in k_list:
            cells.append(f"{np.mean([o.test_report.ndcg[k] for o in group]):.6f}")
        vals = np.array([o.best_val_ndcg10 for o in group])
        cells.extend([f"{vals.mean():.6f}", f"{vals.std():.6f}", str(len(group))])
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def write_tables(out_dir, outcomes: list[AblationOutcome], k_list) -> list[str]:
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for axis in dict.fromkeys(o.axis for o in outcomes):
        path = out_dir / f"ablation_{axis}.tsv"
        path.write_text(axis_table(outcomes, axis, k_list), encoding="utf-8")
        written.append(str(path))
    log_path = out_dir / "runs.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        for o in outcomes:
            fh.write(json.dumps({
                "axis": o.axis, "variant": o.variant, "seed": o.seed,
                "val_ndcg10": o.best_val_ndcg10,
                "test_hr": {str(k): v for k, v in o.test_report.hr.items()},
                "test_ndcg": {str(k): v for k, v in o.test_report.ndcg.items()},
            }, sort_keys=True) + "\n")
    written.append(str(log_path))
    return written
