"""Command line entry point: ``ddn <subcommand> [flags]``.

Every flag mirrors a ``RunConfig`` field.  ``--config FILE`` loads a YAML
mapping of the same fields; flags given on the command line win over the
file.  Outputs go to ``--output-dir`` (default ``$DDN_OUTPUT_ROOT/<command>``
or ``runs/<command>``), which always receives the ``run_config.yaml`` that
produced it.  Logs go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import bandit, evaluation as ev, sim
from .dataset import Catalog, build_pool, manifest_path, read_pool, split_targets, write_pool
from .errors import ConfigError, DataError, DDNError
from .network import DDNModel, ModelConfig, TrainingSet, load_checkpoint, read_checkpoint_header

log = logging.getLogger("ddn")

OUTPUT_ROOT_ENV = "DDN_OUTPUT_ROOT"
COMMANDS = ("gen-scenario", "build-dataset", "train", "report", "simulate", "search", "inspect-checkpoint")
MODEL_FIELDS = ("k", "dropout", "mc_passes", "lr", "batch_size", "token_dim", "cat_dim", "target_hidden",
                "context_hidden", "fusion_hidden", "noise_mu_source")


@dataclass
class RunConfig:
    command: str = ""
    output_dir: str | None = None
    seed: int = 0
    jobs: int = 1
    log_level: str = "INFO"
    # inputs
    scenario: str | None = None
    dataset: str | None = None
    checkpoint: list = field(default_factory=list)
    # dataset construction
    history_days: int = 30
    calibration: str = "true"
    # model
    model_kind: str = "DDN"
    k: int = 3
    dropout: float = 0.25
    mc_passes: int = 30
    lr: float = 1e-3
    batch_size: int = 256
    token_dim: int = 16
    cat_dim: int = 8
    target_hidden: list = field(default_factory=lambda: [64, 32])
    context_hidden: list = field(default_factory=lambda: [64, 32])
    fusion_hidden: int = 32
    noise_mu_source: str = "model"
    # training / evaluation
    epochs: int = 10
    val_fraction: float = 0.2
    n_buckets: int = 10
    inject_days: int = 10
    inject_impressions: int = 2000
    # closed loop
    model_kinds: list = field(default_factory=lambda: ["DDN"])
    seeds: list = field(default_factory=lambda: [0])
    a_values: list = field(default_factory=list)
    epsilon: float = 0.1
    a: float = 0.5
    sigma_sources: list = field(default_factory=lambda: ["data", "model"])
    explore_impression_threshold: int = 2000
    days: int = 90
    retrain_every: int = 5
    retrain_steps: int = 200
    warmup_days: int = 14
    initial_epochs: int = 5
    summary_start_day: int = 30
    # search
    trials: int = 20
    search_epochs: int = 5

    def model_config(self, base: ModelConfig) -> ModelConfig:
        over = {f: getattr(self, f) for f in MODEL_FIELDS}
        over["k"] = 1 if self.model_kind == "REG" else self.k
        return replace(base, seed=self.seed, **over).validate()

    def strategy(self, a: float | None = None) -> bandit.StrategyConfig:
        return bandit.StrategyConfig(self.epsilon, self.a if a is None else a, tuple(self.sigma_sources),
                                     self.explore_impression_threshold)

    def experiment(self, seed: int) -> sim.ExperimentConfig:
        return sim.ExperimentConfig(days=self.days, retrain_every=self.retrain_every, warmup_days=self.warmup_days,
                                    initial_epochs=self.initial_epochs, retrain_steps=self.retrain_steps,
                                    model_seed=seed, sim_seed=seed, mc_passes=self.mc_passes).validate()

    def to_dict(self) -> dict:
        return asdict(self)


FIELD_TYPES = {f.name: f for f in fields(RunConfig)}


def _list_items(name):
    if name in ("target_hidden", "context_hidden", "seeds"):
        return int
    if name == "a_values":
        return float
    return str


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddn", description="Deep density network recommender toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        p = sub.add_parser(cmd)
        p.add_argument("--config", default=None, help="YAML file with RunConfig fields")
        for name, f in FIELD_TYPES.items():
            if name == "command":
                continue
            flag = "--" + name.replace("_", "-")
            default = RunConfig().__getattribute__(name)
            if isinstance(default, list):
                p.add_argument(flag, nargs="+", type=_list_items(name), default=argparse.SUPPRESS)
            elif isinstance(default, bool):
                p.add_argument(flag, type=lambda s: s.lower() in ("1", "true", "yes"), default=argparse.SUPPRESS)
            elif isinstance(default, int):
                p.add_argument(flag, type=int, default=argparse.SUPPRESS)
            elif isinstance(default, float):
                p.add_argument(flag, type=float, default=argparse.SUPPRESS)
            else:
                p.add_argument(flag, type=str, default=argparse.SUPPRESS)
    return parser


def resolve_config(argv) -> RunConfig:
    args = vars(build_parser().parse_args(argv))
    values = {}
    cfg_path = args.pop("config", None)
    if cfg_path:
        path = Path(cfg_path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            loaded = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        unknown = set(loaded) - set(FIELD_TYPES)
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        values.update(loaded)
    values.update(args)
    if isinstance(values.get("checkpoint"), str):
        values["checkpoint"] = [values["checkpoint"]]
    cfg = RunConfig(**values)
    if cfg.output_dir is None:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        cfg.output_dir = str(root / cfg.command)
    if cfg.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    if cfg.model_kind not in ("REG", "MDN", "DDN"):
        raise ConfigError(f"unknown model kind {cfg.model_kind!r}")
    if cfg.calibration not in ("true", "empirical"):
        raise ConfigError("calibration must be 'true' or 'empirical'")
    return cfg


def write_run_config(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "run_config.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return path


def _need(path, what, err=DataError) -> Path:
    if not path:
        raise err(f"--{what} is required")
    path = Path(path)
    if not path.exists():
        raise err(f"{what} {path} does not exist")
    return path


def _scenario(cfg: RunConfig) -> sim.SimScenario:
    if cfg.scenario:
        return sim.load_scenario(_need(cfg.scenario, "scenario", ConfigError))
    return sim.standard_scenario(cfg.seed)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_gen_scenario(cfg: RunConfig) -> Path:
    path = sim.save_scenario(_scenario(cfg), Path(cfg.output_dir) / "scenario.yaml")
    log.info("wrote %s", path)
    return path


def _base_model_config(vocab: dict) -> ModelConfig:
    try:
        return ModelConfig(token_vocab=vocab["token_vocab"], target_cat_sizes=tuple(vocab["target_cat_sizes"]),
                           n_target_reals=vocab["n_target_reals"], context_cat_sizes=tuple(vocab["context_cat_sizes"]),
                           n_context_reals=vocab["n_context_reals"])
    except KeyError as exc:
        raise DataError(f"dataset manifest lacks vocabulary entry {exc}") from exc


def cmd_build_dataset(cfg: RunConfig) -> Path:
    scenario = _scenario(cfg)
    market = sim.generate_scenario(scenario)
    logs = sim.legacy_history(market, cfg.history_days, start_day=-cfg.history_days)
    catalog = market.catalog()
    if cfg.calibration == "empirical":
        imps = np.zeros(scenario.n_publishers)
        clicks = np.zeros(scenario.n_publishers)
        for dl in logs:
            np.add.at(imps, dl.context_ids, dl.impressions)
            np.add.at(clicks, dl.context_ids, dl.clicks)
        est = np.where(imps > 0, (clicks + 0.5) / (imps + 1.0), market.baselines)
        # clean labels move onto the estimated baseline as well
        shift = np.log(market.baselines / est)
        clean = {k: v + float(shift[k[1]]) for k, v in catalog.clean_labels.items()}
        catalog = Catalog(catalog.targets, catalog.contexts, {p: float(b) for p, b in enumerate(est)}, clean)
    pool = build_pool(logs, catalog)
    mc = scenario.model_config()
    vocab = {"token_vocab": mc.token_vocab, "target_cat_sizes": list(mc.target_cat_sizes),
             "n_target_reals": mc.n_target_reals, "context_cat_sizes": list(mc.context_cat_sizes),
             "n_context_reals": mc.n_context_reals}
    path = write_pool(pool, Path(cfg.output_dir) / "dataset.jsonl", vocab, cfg.seed)
    log.info("wrote %d samples to %s", len(pool), path)
    return path


def _load_dataset(cfg: RunConfig):
    path = _need(cfg.dataset, "dataset")
    pool = read_pool(path)
    if not pool:
        raise DataError(f"dataset {path} is empty")
    mpath = manifest_path(path)
    if not mpath.exists():
        raise DataError(f"dataset {path} has no manifest")
    manifest = json.loads(mpath.read_text())
    return pool, _base_model_config(manifest.get("vocab_sizes", {}))


def _train_model(mcfg: ModelConfig, kind: str, data: TrainingSet, epochs: int):
    model = DDNModel(mcfg)
    curve = model.fit(data, kind, epochs)
    return model, curve


def cmd_train(cfg: RunConfig) -> Path:
    pool, base = _load_dataset(cfg)
    mcfg = cfg.model_config(base)
    data = ev.EvalSet.from_samples(pool, mcfg)
    val = split_targets(data.target_ids, cfg.val_fraction, cfg.seed)
    train = data.take(np.flatnonzero(~val))
    model, curve = _train_model(mcfg, cfg.model_kind, train.training_set(), cfg.epochs)
    out = Path(cfg.output_dir)
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(curve):
            w.writerow([i + 1, repr(float(v))])
    meta = {"model_kind": cfg.model_kind, "epochs": cfg.epochs, "val_fraction": cfg.val_fraction,
            "split_seed": cfg.seed, "final_loss": float(curve[-1]) if curve else None}
    path = model.save(out / "model.ckpt", meta)
    log.info("trained %s for %d epochs; checkpoint %s", cfg.model_kind, cfg.epochs, path)
    return path


VOCAB_FIELDS = ("token_vocab", "target_cat_sizes", "n_target_reals", "context_cat_sizes", "n_context_reals")
NOISE_POOLS = (("high_noise", lambda r: r < 500), ("low_noise", lambda r: r >= 5000))


def cmd_report(cfg: RunConfig) -> list[Path]:
    if not cfg.checkpoint:
        raise DataError("--checkpoint is required")
    pool, base = _load_dataset(cfg)
    out = Path(cfg.output_dir)
    fig3, fig5, table2, fig6 = [], [], [], []
    for ck in cfg.checkpoint:
        path = _need(ck, "checkpoint")
        model, meta = load_checkpoint(path)
        mcfg = model.config
        for f in VOCAB_FIELDS:
            if getattr(mcfg, f) != getattr(base, f):
                raise ConfigError(f"checkpoint {path} does not match the dataset: {f} "
                                  f"{getattr(mcfg, f)} != {getattr(base, f)}")
        kind = meta.get("model_kind", "DDN")
        split_seed = meta.get("split_seed", cfg.seed)
        data = ev.EvalSet.from_samples(pool, mcfg)
        val = split_targets(data.target_ids, meta.get("val_fraction", cfg.val_fraction), split_seed)
        train, held = data.take(np.flatnonzero(~val)), data.take(np.flatnonzero(val))
        fig3.append((kind, split_seed, ev.uncertainty_vs_r_report(model, train, cfg.n_buckets)))
        _, first = np.unique(train.target_ids, return_index=True)
        kde = ev.fit_kde(model.descriptors(train.features.targets.take(first)))
        fig5.append((split_seed, ev.model_uncertainty_vs_pdf_report(model, kde, held, cfg.n_buckets,
                                                                     seed=cfg.seed)))
        if held.clean_y is not None:
            for name, pick in NOISE_POOLS:
                m = pick(held.r)
                if m.any():
                    table2.append((split_seed, name, kind, ev.mse_eval(model, held.features.take(np.flatnonzero(m)),
                                                                      held.clean_y[m])))
        if cfg.scenario:
            fig6.append(_fig6(cfg, model, train, kind, meta.get("epochs", cfg.epochs)))
    paths = [ev.write_fig3(out / "fig3.csv", fig3), ev.write_fig5(out / "fig5.csv", fig5)]
    paths.append(_write_rows(out / "table2.csv", ["seed", "pool", "model_kind", "mse"], table2))
    mse = {(s, pool, kind): v for s, pool, kind, v in table2}
    paired = [(s, pool, v, mse[(s, pool, "DDN")]) for (s, pool, kind), v in mse.items()
              if kind == "MDN" and (s, pool, "DDN") in mse]
    if paired:
        paths.append(ev.write_table2(out / "table2_paired.csv", paired))
    if fig6:
        paths.append(ev.write_fig6(out / "fig6.csv", fig6))
    log.info("wrote %s", ", ".join(str(p) for p in paths))
    return paths


def _as_cfg(v):
    return tuple(v) if isinstance(v, list) else v


def _fig6(cfg, model, train, kind, epochs):
    """Retrain with one target of the never-shown cluster added."""
    scenario = _scenario(cfg)
    market = sim.generate_scenario(scenario)
    sim.legacy_history(market, cfg.history_days, start_day=-cfg.history_days)
    cluster = sim.unexplored_targets(market)
    if len(cluster) < 2:
        raise DataError("scenario has no unexplored cluster with at least two targets")
    inj = sim.injected_records(market, int(cluster[0]), model.config, cfg.inject_days, cfg.inject_impressions, cfg.seed)
    members = sim.grid_eval_set(market, cluster[1:], model.config)

    def fit(data):
        return _train_model(model.config, kind, data, epochs)[0]

    delta = ev.retrain_delta_report(fit, train.training_set(), inj, members.features, seed=cfg.seed)
    return cfg.seed, members.target_ids, delta


def _write_rows(path, header, rows) -> Path:
    return ev._write(path, header, rows)


def _sim_job(args):
    scenario_dict, kind, label, strat, exp = args
    scenario = sim.SimScenario.from_dict(scenario_dict)
    return sim.run_experiment(scenario, kind, strat, exp, label=label)


def cmd_simulate(cfg: RunConfig) -> Path:
    scenario = _scenario(cfg)
    out = Path(cfg.output_dir)
    sweep = [float(a) for a in cfg.a_values]
    jobs = []
    for seed in cfg.seeds:
        exp = cfg.experiment(int(seed))
        for kind in cfg.model_kinds:
            if kind not in ("REG", "MDN", "DDN"):
                raise ConfigError(f"unknown model kind {kind!r}")
            for a in (sweep or [None]):
                label = kind if a is None else f"{kind}/a={a:g}"
                jobs.append((scenario.to_dict(), kind, label, cfg.strategy(a), exp))
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_sim_job, jobs))
    else:
        results = [_sim_job(j) for j in jobs]
    path = ev.write_metrics(out / "metrics.csv", results)
    summary = []
    for (_, kind, label, strat, _), res in zip(jobs, results):
        s = slice(cfg.summary_start_day if cfg.summary_start_day < cfg.days else 0, None)
        summary.append((label, res.seed, strat.a, _mean(res.metric("rpm")[s]),
                        _mean(res.metric("target_throughput")[s]), _mean(res.metric("advertiser_throughput")[s]),
                        _mean(res.metric("val_mse")[s])))
    _write_rows(out / "summary.csv", ["model_kind", "seed", "a", "rpm", "target_throughput",
                                      "advertiser_throughput", "val_mse"], summary)
    if sweep:
        ev.write_table4(out / "table4.csv", [(kind, row[2], row[1], row[3], row[4], row[5])
                                                    for (_, kind, *_), row in zip(jobs, summary)])
    log.info("wrote %s (%d runs)", path, len(results))
    return path


def _mean(x):
    x = np.asarray(x, dtype=float)
    return float(np.nanmean(x)) if len(x) and not np.all(np.isnan(x)) else float("nan")


SEARCH_SPACE = {
    "k": [1, 2, 3, 4, 5],
    "dropout": (0.05, 0.5),
    "lr": (3e-4, 3e-3),
    "token_dim": [8, 16, 32],
    "fusion_hidden": [16, 32, 64],
    "hidden": [(32, 16), (64, 32), (128, 32)],
}


def sample_trial(rng: np.random.Generator) -> dict:
    h = SEARCH_SPACE["hidden"][rng.integers(len(SEARCH_SPACE["hidden"]))]
    lo, hi = SEARCH_SPACE["lr"]
    return {
        "k": int(rng.choice(SEARCH_SPACE["k"])),
        "dropout": float(rng.uniform(*SEARCH_SPACE["dropout"])),
        "lr": float(np.exp(rng.uniform(np.log(lo), np.log(hi)))),
        "token_dim": int(rng.choice(SEARCH_SPACE["token_dim"])),
        "fusion_hidden": int(rng.choice(SEARCH_SPACE["fusion_hidden"])),
        "target_hidden": list(h),
        "context_hidden": list(h),
    }


def _search_job(args):
    trial, cfg_dict, base_dict, train, held = args
    cfg = RunConfig(**cfg_dict)
    mcfg = replace(cfg.model_config(ModelConfig.from_dict(base_dict)), **{k: _as_cfg(v) for k, v in trial.items()})
    mcfg.validate()
    model, _ = _train_model(mcfg, cfg.model_kind, train.training_set(), cfg.search_epochs)
    target = held.clean_y if held.clean_y is not None else held.y
    return ev.mse_eval(model, held.features, target)


def cmd_search(cfg: RunConfig) -> Path:
    pool, base = _load_dataset(cfg)
    mcfg = cfg.model_config(base)
    data = ev.EvalSet.from_samples(pool, mcfg)
    val = split_targets(data.target_ids, cfg.val_fraction, cfg.seed)
    train, held = data.take(np.flatnonzero(~val)), data.take(np.flatnonzero(val))
    rng = np.random.default_rng([cfg.seed, 0x5EA])
    trials = [sample_trial(rng) for _ in range(cfg.trials)]
    args = [(t, cfg.to_dict(), base.to_dict(), train, held) for t in trials]
    if cfg.jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            scores = list(ex.map(_search_job, args))
    else:
        scores = [_search_job(a) for a in args]
    out = Path(cfg.output_dir)
    tdir = out / "trials"
    tdir.mkdir(parents=True, exist_ok=True)
    for i, (t, s) in enumerate(zip(trials, scores)):
        (tdir / f"trial_{i:04d}.yaml").write_text(yaml.safe_dump({"trial": i, "params": t, "val_mse": s},
                                                                 sort_keys=True))
    order = sorted(range(len(trials)), key=lambda i: (scores[i], i))
    keys = sorted(trials[0]) if trials else []
    rows = [(rank + 1, i, scores[i], *[json.dumps(trials[i][k]) for k in keys]) for rank, i in enumerate(order)]
    path = _write_rows(out / "trials.csv", ["rank", "trial", "val_mse", *keys], rows)
    log.info("ranked %d trials into %s", len(trials), path)
    return path


def cmd_inspect_checkpoint(cfg: RunConfig) -> Path:
    if not cfg.checkpoint:
        raise DataError("--checkpoint is required")
    header, start = read_checkpoint_header(_need(cfg.checkpoint[0], "checkpoint"))
    summary = {
        "format_version": header["format_version"],
        "config": header["config"],
        "metadata": header["metadata"],
        "n_params": int(sum(e["count"] for e in header["params"])),
        "tensors": {e["name"]: e["shape"] for e in header["params"]},
    }
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    path = Path(cfg.output_dir) / "checkpoint.json"
    path.write_text(text)
    sys.stdout.write(text)
    return path


HANDLERS = {
    "gen-scenario": cmd_gen_scenario,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "report": cmd_report,
    "simulate": cmd_simulate,
    "search": cmd_search,
    "inspect-checkpoint": cmd_inspect_checkpoint,
}


def main(argv=None) -> int:
    try:
        cfg = resolve_config(sys.argv[1:] if argv is None else argv)
    except DDNError as exc:
        print(f"ddn: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except TypeError as exc:
        print(f"ddn: error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    logging.basicConfig(level=getattr(logging, cfg.log_level.upper(), logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        write_run_config(cfg)
        HANDLERS[cfg.command](cfg)
    except DDNError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except (OSError, MemoryError) as exc:
        log.error("runtime failure: %s", exc)
        return 6
    return 0


if __name__ == "__main__":
    sys.exit(main())
