"""Command-line entry point.

Commands: synth, train, eval, ablate, gradcheck. Each accepts --config (a
key=value file) with flag overrides taking precedence; unknown config keys
are rejected before any compute. Outputs land in timestamped run directories
under --out, so re-running never mutates a completed run.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import ablation
from .baseline_mf import MFConfig, init_mf, mf_fit, mf_gradient_check
from .config import parse_bool, parse_int_list, parse_kv_file
from .data import (Dataset, SynthConfig, build_bipartite, load_dataset_dir,
                   load_synth_config, save_dataset, split_dataset, synth_generate)
from .errors import ConfigError, SocrecError
from .evaluation import (RankingProtocol, aggregate_reports, evaluate,
                         inner_product_scorer)
from .model import (ModelConfig, forward, init_params, load_checkpoint,
                    params_from_blocks)
from .sampling import SamplerConfig, load_discrete_negatives, assemble_negatives
from .training import (NEGATIVES_FILE, REPORT_FILE, TrainingConfig, fit,
                       full_batch, batch_loss, load_report_best_epoch)
from .autodiff import finite_diff_check


@dataclass
class RunConfig:
    """Flat run configuration; every key can come from file or flag."""

    model: str = "nemo"
    data: str = ""
    out: str = "runs"
    seed: list = field(default_factory=lambda: [0])
    # model
    dim: int = 16
    levels: int = 2
    prior: str = "gaussian"
    prior_std: float = 0.1
    self_loop: bool = True
    aggregation: str = "plain"
    user_proj_depth: int = 1
    item_proj_depth: int = 1
    pos_prop_depth: int = 1
    neg_prop_depth: int = 1
    # sampler
    sampler: str = "static"
    n_neg: int = 8
    pool_size: int = 5
    beta_param: float = 1.0
    dynamic_multiplier: int = 10
    anchor: str = "post"
    # training
    lr: float = 0.001
    batch_size: int = 200
    weight_decay: float = 0.001
    max_epochs: int = 100
    patience: int = 10
    # baseline
    reg: str = "average"
    mf_beta: float = 0.1
    mf_l2_user: float = 0.01
    mf_l2_item: float = 0.01
    # evaluation protocol
    eval_negatives: int = 1000
    k_list: list = field(default_factory=lambda: [5, 10, 15])

    def model_config(self) -> ModelConfig:
        return ModelConfig(dim=self.dim, levels=self.levels,
                           prior_std=self.prior_std, prior_kind=self.prior,
                           self_loop=self.self_loop, aggregation=self.aggregation,
                           user_proj_depth=self.user_proj_depth,
                           item_proj_depth=self.item_proj_depth,
                           pos_prop_depth=self.pos_prop_depth,
                           neg_prop_depth=self.neg_prop_depth)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(kind=self.sampler, n_neg=self.n_neg,
                             pool_size=self.pool_size, beta_param=self.beta_param,
                             dynamic_multiplier=self.dynamic_multiplier,
                             anchor=self.anchor)

    def training_config(self, seed: int) -> TrainingConfig:
        return TrainingConfig(learning_rate=self.lr, batch_size=self.batch_size,
                              weight_decay=self.weight_decay,
                              max_epochs=self.max_epochs, patience=self.patience,
                              seed=seed)

    def protocol(self, seed: int) -> RankingProtocol:
        return RankingProtocol(n_negatives=self.eval_negatives,
                               k_list=tuple(self.k_list), seed=seed)

    def mf_config(self) -> MFConfig:
        return MFConfig(dim=self.dim, social_weight=self.mf_beta,
                        l2_user=self.mf_l2_user, l2_item=self.mf_l2_item,
                        regularizer=self.reg)

    def validate(self) -> None:
        if self.model not in ("nemo", "mf"):
            raise ConfigError(f"model must be 'nemo' or 'mf', got {self.model!r}")
        if not self.seed:
            raise ConfigError("at least one seed is required")
        self.model_config().validate()
        self.sampler_config().validate()
        self.training_config(self.seed[0]).validate()
        self.protocol(self.seed[0]).validate()
        self.mf_config().validate()

    def dump_kv(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"


_PARSERS = {
    "seed": parse_int_list,
    "k_list": parse_int_list,
    "self_loop": parse_bool,
}


def build_run_config(config_path=None, overrides=None) -> RunConfig:
    cfg = RunConfig()
    known = {f.name: f for f in fields(RunConfig)}
    merged = {}
    if config_path:
        merged.update(parse_kv_file(config_path))
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    for key, value in merged.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _PARSERS:
            setattr(cfg, key, _PARSERS[key](value) if isinstance(value, str) else value)
        else:
            current = getattr(cfg, key)
            caster = type(current)
            try:
                setattr(cfg, key, caster(value))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    cfg.validate()
    return cfg


def _make_run_dir(out: str, name: str) -> Path:
    base = Path(out)
    base.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    candidate = base / f"{name}-{stamp}"
    counter = 0
    while candidate.exists():
        counter += 1
        candidate = base / f"{name}-{stamp}-{counter}"
    candidate.mkdir()
    return candidate


def _write_metrics(run_dir: Path, report) -> None:
    (run_dir / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    (run_dir / "metrics.tsv").write_text(report.to_tsv(), encoding="utf-8")


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    if args.config:
        synth_cfg = load_synth_config(args.config)
    else:
        synth_cfg = SynthConfig()
    for name in ("communities", "users_per_community", "items_per_community",
                 "within_prob", "cross_prob", "interaction_prob",
                 "feature_noise", "user_feature_dim", "item_feature_dim", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(synth_cfg, name, value)
    synth_cfg.validate()
    dataset = synth_generate(synth_cfg)
    out = Path(args.out)
    save_dataset(dataset, out)
    print(f"wrote dataset to {out}: {dataset.n_users} users, "
          f"{dataset.n_items} items, {dataset.interactions.nnz} interactions, "
          f"{dataset.social.nnz // 2} social edges")
    return 0


# ---------------------------------------------------------------------------
# train


def _train_one_seed(dataset: Dataset, cfg: RunConfig, seed: int) -> Path:
    split = split_dataset(dataset, seed)
    protocol = cfg.protocol(seed)
    if cfg.model == "mf":
        run_dir = _make_run_dir(cfg.out, f"train-mf-{cfg.reg}-s{seed}")
        params = init_mf(cfg.mf_config(), dataset.n_users, dataset.n_items, seed)
        params, report = mf_fit(dataset, split, params, cfg.training_config(seed),
                                protocol, run_dir=run_dir)
        test = evaluate(inner_product_scorer(params.user.value, params.item.value),
                        dataset, split, "test", protocol, model_id=f"mf-{cfg.reg}")
    else:
        run_dir = _make_run_dir(cfg.out, f"train-nemo-{cfg.sampler}-s{seed}")
        params = init_params(cfg.model_config(), dataset.n_users, dataset.n_items,
                             dataset.user_features.shape[1],
                             dataset.item_features.shape[1], seed)
        result = fit(dataset, split, params, cfg.sampler_config(),
                     cfg.training_config(seed), protocol, run_dir=run_dir,
                     model_id=f"nemo-{cfg.sampler}")
        test = ablation.test_metrics_for(dataset, split, result, protocol,
                                         model_id=f"nemo-{cfg.sampler}")
        report = result.report
    _write_metrics(run_dir, test)
    (run_dir / "config.txt").write_text(cfg.dump_kv(), encoding="utf-8")
    best = report.best_val_ndcg.get(10, float("nan"))
    print(f"seed {seed}: best epoch {report.best_epoch}, "
          f"val NDCG@10 {best:.4f}, test NDCG@10 {test.ndcg[10]:.4f} -> {run_dir}")
    return run_dir


def cmd_train(args) -> int:
    cfg = build_run_config(args.config, _overrides_from(args))
    if not cfg.data:
        raise ConfigError("train needs --data (or data= in the config file)")
    dataset = load_dataset_dir(cfg.data)
    for seed in cfg.seed:
        _train_one_seed(dataset, cfg, seed)
    return 0


# ---------------------------------------------------------------------------
# eval


def _nemo_scorer_from_checkpoint(checkpoint_path: Path, dataset: Dataset,
                                 cfg: RunConfig, meta, blocks):
    params = params_from_blocks(cfg.model_config(), dataset.n_users,
                                dataset.n_items, dataset.user_features.shape[1],
                                dataset.item_features.shape[1], blocks)
    sibling_negs = checkpoint_path.parent / NEGATIVES_FILE
    sibling_report = checkpoint_path.parent / REPORT_FILE
    if sibling_negs.exists():
        items = load_discrete_negatives(sibling_negs, dataset.n_users)
        neg_pairs = np.concatenate(
            [np.column_stack([np.full(len(ids), u), ids])
             for u, ids in enumerate(items) if len(ids)], axis=0) \
            if any(len(ids) for ids in items) else np.empty((0, 2), dtype=np.int64)
        train_seed = None
        if sibling_report.exists():
            import json

            with open(sibling_report, encoding="utf-8") as fh:
                train_seed = json.loads(fh.readline())["seed"]
    elif sibling_report.exists():
        import json

        with open(sibling_report, encoding="utf-8") as fh:
            train_seed = json.loads(fh.readline())["seed"]
        best_epoch = load_report_best_epoch(sibling_report)
        sampler_cfg = cfg.sampler_config()
        if sampler_cfg.kind == "dynamic":
            raise ConfigError("dynamic runs need the best_negatives.tsv dump "
                              "next to the checkpoint to be re-evaluated")
        split = split_dataset(dataset, train_seed)
        sample_set = assemble_negatives(dataset, split, None, sampler_cfg,
                                        best_epoch, train_seed)
        neg_pairs = sample_set.pairs()
    else:
        raise ConfigError(f"no {NEGATIVES_FILE} or {REPORT_FILE} next to "
                          f"{checkpoint_path}; cannot rebuild the bipartite graph")
    split_seed = train_seed if train_seed is not None else cfg.seed[0]
    split = split_dataset(dataset, split_seed)
    bipartite = build_bipartite(split.train, neg_pairs, dataset.n_users,
                                dataset.n_items)
    user_out, item_out = forward(dataset, bipartite, params)
    return inner_product_scorer(user_out.value, item_out.value), split


def cmd_eval(args) -> int:
    cfg = build_run_config(args.config, _overrides_from(args))
    if not cfg.data:
        raise ConfigError("eval needs --data (or data= in the config file)")
    checkpoint_path = Path(args.checkpoint)
    dataset = load_dataset_dir(cfg.data)
    meta, blocks = load_checkpoint(checkpoint_path)
    if (meta.n_users, meta.n_items) != (dataset.n_users, dataset.n_items):
        raise ConfigError(
            f"checkpoint is for {meta.n_users} users x {meta.n_items} items, "
            f"dataset has {dataset.n_users} x {dataset.n_items}")
    is_mf = "mf.user" in blocks
    if is_mf:
        scorer = inner_product_scorer(blocks["mf.user"], blocks["mf.item"])
        model_id = "mf"
        split = split_dataset(dataset, cfg.seed[0])
    else:
        if meta.dim != cfg.dim or meta.levels != cfg.levels:
            raise ConfigError(
                f"checkpoint has dim={meta.dim}, levels={meta.levels}; "
                f"config asks for dim={cfg.dim}, levels={cfg.levels}")
        scorer, split = _nemo_scorer_from_checkpoint(checkpoint_path, dataset,
                                                     cfg, meta, blocks)
        model_id = "nemo"
    run_dir = _make_run_dir(cfg.out, f"eval-{model_id}")
    reports = [evaluate(scorer, dataset, split, args.split, cfg.protocol(s),
                        model_id=model_id) for s in cfg.seed]
    if len(reports) == 1:
        _write_metrics(run_dir, reports[0])
        print(f"NDCG@10 {reports[0].ndcg[10]:.4f} -> {run_dir}")
    else:
        agg = aggregate_reports(reports)
        (run_dir / "metrics.json").write_text(agg.to_json(), encoding="utf-8")
        (run_dir / "metrics.tsv").write_text(agg.to_tsv(), encoding="utf-8")
        print(f"mean NDCG@10 {agg.mean_ndcg[10]:.4f} "
              f"± {agg.std_ndcg[10]:.4f} -> {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args) -> int:
    cfg = build_run_config(args.config, _overrides_from(args))
    if cfg.data:
        dataset = load_dataset_dir(cfg.data)
    else:
        synth_cfg = SynthConfig(seed=args.dataset_seed)
        dataset = synth_generate(synth_cfg)
        save_dataset(dataset, Path(cfg.out) / "synth-data")
    axes = {}
    requested = (args.axes or "prior,sampler,depth,aggregation").split(",")
    for axis in requested:
        axis = axis.strip()
        if axis not in ablation.AXIS_VARIANTS:
            raise ConfigError(f"unknown ablation axis {axis!r}")
        if axis == "depth" and args.l_sweep:
            axes[axis] = parse_int_list(args.l_sweep)
        else:
            axes[axis] = ablation.AXIS_VARIANTS[axis]
    outcomes = ablation.run_axes(dataset, cfg.seed, cfg.model_config(),
                                 cfg.sampler_config(),
                                 cfg.training_config(cfg.seed[0]),
                                 cfg.protocol(cfg.seed[0]), axes,
                                 progress=lambda msg: print(msg, flush=True))
    run_dir = _make_run_dir(cfg.out, "ablate")
    for path in ablation.write_tables(run_dir, outcomes, tuple(cfg.k_list)):
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def _gradcheck_dataset(seed: int, users: int, items: int) -> Dataset:
    return synth_generate(SynthConfig(
        communities=2, users_per_community=users // 2,
        items_per_community=items // 2, within_prob=0.3, cross_prob=0.05,
        interaction_prob=0.35, feature_noise=0.3, user_feature_dim=6,
        item_feature_dim=6, seed=seed))


def run_gradcheck(seeds, h: float = 1e-5, tolerance: float = 1e-4,
                  printer=print) -> bool:
    """Finite-difference verification of both models on small seeded
    instances; returns True when every seed passes the tolerance."""
    ok = True
    for seed in seeds:
        dataset = _gradcheck_dataset(seed, users=20, items=30)
        split = split_dataset(dataset, seed)
        model_cfg = ModelConfig(dim=8, levels=2)
        params = init_params(model_cfg, dataset.n_users, dataset.n_items,
                             dataset.user_features.shape[1],
                             dataset.item_features.shape[1], seed)
        sampler_cfg = SamplerConfig(kind="generative", n_neg=4, pool_size=3)
        sample_set = assemble_negatives(dataset, split, None, sampler_cfg, 0, seed)
        bipartite = build_bipartite(split.train, sample_set.pairs(),
                                    dataset.n_users, dataset.n_items)
        batch = full_batch(split, sample_set)
        report = finite_diff_check(
            lambda: batch_loss(dataset, bipartite, params, batch)[0],
            params.parameters(), h=h)
        passed = report.max_rel_error <= tolerance
        ok &= passed
        printer(f"[{'PASS' if passed else 'FAIL'}] nemo seed={seed} "
                f"max_rel_err={report.max_rel_error:.3e} "
                f"worst={report.worst_param}{report.worst_index}")

        mf_dataset = _gradcheck_dataset(seed + 1000, users=10, items=12)
        mf_split = split_dataset(mf_dataset, seed)
        mf_params = init_mf(MFConfig(dim=4, regularizer="individual"),
                            mf_dataset.n_users, mf_dataset.n_items, seed)
        mf_report = mf_gradient_check(mf_dataset, mf_split, mf_params, h=h)
        passed = mf_report.max_rel_error <= tolerance
        ok &= passed
        printer(f"[{'PASS' if passed else 'FAIL'}] mf seed={seed} "
                f"max_rel_err={mf_report.max_rel_error:.3e} "
                f"worst={mf_report.worst_param}{mf_report.worst_index}")
    return ok


def cmd_gradcheck(args) -> int:
    seeds = parse_int_list(args.seed) if isinstance(args.seed, str) else args.seed
    ok = run_gradcheck(seeds, h=args.h, tolerance=args.tolerance)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument plumbing

_OVERRIDE_KEYS = [f.name for f in fields(RunConfig)]


def _overrides_from(args) -> dict:
    out = {}
    for key in _OVERRIDE_KEYS:
        if hasattr(args, key):
            out[key] = getattr(args, key)
    return out


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="key=value config file")
    parser.add_argument("--seed", dest="seed", default=None,
                        help="comma-separated seed list")
    parser.add_argument("--out", dest="out", default=None, help="output directory")
    parser.add_argument("--data", dest="data", default=None, help="dataset directory")
    parser.add_argument("--model", dest="model", default=None,
                        choices=["nemo", "mf"])
    parser.add_argument("--sampler", dest="sampler", default=None,
                        choices=["fixed", "static", "dynamic", "generative"])
    parser.add_argument("--reg", dest="reg", default=None,
                        choices=["average", "individual"])
    for key, kind in [("dim", int), ("levels", int), ("prior_std", float),
                      ("n_neg", int), ("pool_size", int), ("beta_param", float),
                      ("dynamic_multiplier", int), ("lr", float),
                      ("batch_size", int), ("weight_decay", float),
                      ("max_epochs", int), ("patience", int),
                      ("eval_negatives", int), ("mf_beta", float),
                      ("mf_l2_user", float), ("mf_l2_item", float)]:
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind,
                            default=None)
    parser.add_argument("--prior", dest="prior", default=None,
                        choices=["gaussian", "uniform", "none"])
    parser.add_argument("--aggregation", dest="aggregation", default=None,
                        choices=["plain", "gcn"])
    parser.add_argument("--anchor", dest="anchor", default=None,
                        choices=["post", "pre"])
    parser.add_argument("--k-list", dest="k_list", default=None,
                        help="comma-separated K values")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="socrec",
        description="Social recommendation engine: train, evaluate, and ablate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--config", default=None)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=None)
    for key, kind in [("communities", int), ("users_per_community", int),
                      ("items_per_community", int), ("within_prob", float),
                      ("cross_prob", float), ("interaction_prob", float),
                      ("feature_noise", float), ("user_feature_dim", int),
                      ("item_feature_dim", int)]:
        p_synth.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind,
                             default=None)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train a model")
    _add_run_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_run_flags(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", default="test",
                        choices=["test", "validation"])
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="run the ablation grid")
    _add_run_flags(p_ablate)
    p_ablate.add_argument("--axes", default=None,
                          help="comma list from prior,sampler,depth,aggregation")
    p_ablate.add_argument("--l-sweep", default=None,
                          help="comma-separated depths for the depth axis")
    p_ablate.add_argument("--dataset-seed", type=int, default=0)
    p_ablate.set_defaults(func=cmd_ablate)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p_grad.add_argument("--seed", default="0,1,2,3,4")
    p_grad.add_argument("--h", type=float, default=1e-5)
    p_grad.add_argument("--tolerance", type=float, default=1e-4)
    p_grad.set_defaults(func=cmd_gradcheck)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SocrecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
