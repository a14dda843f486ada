"""Command-line experiment runner with CSV and PGM artifacts.

Subcommands: ``generate`` (soft-bag files from IDX images), ``train``
(seeded runs with history/results/summary CSVs), ``count`` (exact
parameter and FLOP accounting), ``sweep`` (head-count comparison),
``heatmap`` (per-head attention export).

Configs are flat ``section.key = value`` text files; unknown keys are
rejected and numeric ranges checked at parse time.  A canonical copy of
the parsed config is written next to the run artifacts, and all output
files are byte-reproducible for a fixed config and seed.

Exit codes: 0 success, 2 configuration or input error, 3 numerical
failure during training.
"""

from __future__ import annotations

import argparse
import multiprocessing
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bags as bags_mod
from .bags import BagFormatError, IdxError, SoftBagConfig
from .metrics import format_mean_std
from .models import (
    ModelConfig,
    attention_weights,
    flops,
    param_count,
)
from .training import (
    METRIC_NAMES,
    DivergenceError,
    TrainConfig,
    evaluate,
    sweep_heads,
    train,
)

DATA_DIR_ENV = "MADMIL_DATA_DIR"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    """Bad configuration file or missing input."""


# -- config file ----------------------------------------------------------

_DATASET_KEYS = {
    "dataset.kind": str,
    "dataset.data_dir": str,
    "dataset.train_images": str,
    "dataset.train_labels": str,
    "dataset.test_images": str,
    "dataset.test_labels": str,
    "dataset.p_pos": float,
    "dataset.p_neg": float,
    "dataset.bag_size": int,
    "dataset.n_train": int,
    "dataset.n_val": int,
    "dataset.n_test": int,
    "dataset.key_digit": int,
    "dataset.seed": int,
    "dataset.train_manifest": str,
    "dataset.val_manifest": str,
    "dataset.test_manifest": str,
}
_MODEL_KEYS = {
    "model.aggregator": str,
    "model.input_dim": int,
    "model.embed_dim": int,
    "model.classes": int,
    "model.heads": int,
    "model.attention_hidden": int,
}
_TRAINING_KEYS = {
    "training.epochs": int,
    "training.learning_rate": float,
    "training.weight_decay": float,
    "training.seeds": int,
    "training.shuffle": bool,
}
_OTHER_KEYS = {
    "count.instances": int,
    "sweep.heads": str,
    "heatmap.split": str,
    "heatmap.bags": str,
    "heatmap.count": int,
    "output.dir": str,
}
_SCHEMA = {**_DATASET_KEYS, **_MODEL_KEYS, **_TRAINING_KEYS, **_OTHER_KEYS}


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment line."""
    config = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in config:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        config[key] = value
    return config


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def _convert(key: str, raw: str):
    kind = _SCHEMA[key]
    if kind is bool:
        if raw.lower() in ("true", "false"):
            return raw.lower() == "true"
        raise ConfigError(f"{key}: expected true or false, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


def _get(config, key, default=None, required=False):
    if key in config:
        return _convert(key, config[key])
    if required:
        raise ConfigError(f"missing required key {key!r}")
    return default


def _require(config, *keys):
    missing = [k for k in keys if k not in config]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(sorted(missing))}")


# -- builders --------------------------------------------------------------


def _soft_bag_config(config) -> SoftBagConfig:
    _require(config, "dataset.p_pos", "dataset.p_neg")
    try:
        return SoftBagConfig(
            p_pos=_get(config, "dataset.p_pos", required=True),
            p_neg=_get(config, "dataset.p_neg", required=True),
            bag_size=_get(config, "dataset.bag_size", 20),
            n_train=_get(config, "dataset.n_train", 50),
            n_val=_get(config, "dataset.n_val", 100),
            n_test=_get(config, "dataset.n_test", 900),
            key_digit=_get(config, "dataset.key_digit", 8),
            seed=_get(config, "dataset.seed", 0),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None


def _idx_paths(config) -> dict:
    root = Path(_get(config, "dataset.data_dir", os.environ.get(DATA_DIR_ENV, ".")))
    names = {
        "train_images": _get(config, "dataset.train_images", "train-images-idx3-ubyte"),
        "train_labels": _get(config, "dataset.train_labels", "train-labels-idx1-ubyte"),
        "test_images": _get(config, "dataset.test_images", "t10k-images-idx3-ubyte"),
        "test_labels": _get(config, "dataset.test_labels", "t10k-labels-idx1-ubyte"),
    }
    paths = {}
    for role, name in names.items():
        p = Path(name)
        paths[role] = p if p.is_absolute() else root / name
        if not paths[role].is_file():
            raise ConfigError(f"missing IDX file for {role}: {paths[role]}")
    return paths


def _load_soft_splits(config) -> bags_mod.BagSplits:
    paths = _idx_paths(config)
    soft = _soft_bag_config(config)
    try:
        return bags_mod.make_soft_bags(
            soft,
            bags_mod.load_idx_images(paths["train_images"]),
            bags_mod.load_idx_labels(paths["train_labels"]),
            bags_mod.load_idx_images(paths["test_images"]),
            bags_mod.load_idx_labels(paths["test_labels"]),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None


def _load_feature_splits(config) -> bags_mod.BagSplits:
    _require(config, "dataset.train_manifest", "dataset.val_manifest",
             "dataset.test_manifest")
    return bags_mod.BagSplits(
        train=bags_mod.load_feature_bags(_get(config, "dataset.train_manifest", required=True)),
        val=bags_mod.load_feature_bags(_get(config, "dataset.val_manifest", required=True)),
        test=bags_mod.load_feature_bags(_get(config, "dataset.test_manifest", required=True)),
    )


def _load_splits(config) -> bags_mod.BagSplits:
    kind = _get(config, "dataset.kind", required=True)
    if kind == "soft_bags":
        return _load_soft_splits(config)
    if kind == "feature_bags":
        return _load_feature_splits(config)
    raise ConfigError(f"dataset.kind must be soft_bags or feature_bags, got {kind!r}")


def _model_config(config) -> ModelConfig:
    _require(config, "model.aggregator", "model.input_dim", "model.embed_dim",
             "model.classes")
    try:
        return ModelConfig(
            input_dim=_get(config, "model.input_dim", required=True),
            embed_dim=_get(config, "model.embed_dim", required=True),
            classes=_get(config, "model.classes", required=True),
            aggregator=_get(config, "model.aggregator", required=True),
            heads=_get(config, "model.heads", 1),
            attention_hidden=_get(config, "model.attention_hidden", 256),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None


def _train_config(config) -> tuple[TrainConfig, int]:
    _require(config, "training.epochs", "training.learning_rate",
             "training.weight_decay")
    n_seeds = _get(config, "training.seeds", 1)
    if n_seeds < 1:
        raise ConfigError(f"training.seeds must be >= 1, got {n_seeds}")
    try:
        base = TrainConfig(
            epochs=_get(config, "training.epochs", required=True),
            learning_rate=_get(config, "training.learning_rate", required=True),
            weight_decay=_get(config, "training.weight_decay", required=True),
            shuffle=_get(config, "training.shuffle", True),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None
    return base, n_seeds


# -- artifact writers -------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(cell) for cell in row) + "\n")


def _write_config_copy(config: dict, out_dir: Path) -> None:
    lines = [f"{key} = {config[key]}" for key in sorted(config)]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 portable graymap."""
    image = np.asarray(image, dtype=np.uint8)
    height, width = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def attention_montage(bag: bags_mod.Bag, weights: np.ndarray, side: int) -> np.ndarray:
    """Tile the bag's images in a row, each dimmed by its attention weight
    relative to the head's strongest instance."""
    scale = weights / weights.max()
    tiles = []
    for row, s in zip(bag.x, scale):
        img = np.clip(row.reshape(side, side), 0.0, 1.0) * 255.0 * s
        tiles.append(np.round(img).astype(np.uint8))
    return np.concatenate(tiles, axis=1)


def format_kilo(value: int) -> str:
    return f"{value / 1e3:.1f} K"


def format_mega(value: int) -> str:
    return f"{value / 1e6:.1f} M"


# -- commands ----------------------------------------------------------------


def _out_dir(args, config) -> Path:
    target = args.out or _get(config, "output.dir")
    if target is None:
        raise ConfigError("no output directory: set output.dir or pass --out")
    out = Path(target)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args, config)
    kind = _get(config, "dataset.kind", required=True)
    if kind != "soft_bags":
        raise ConfigError("generate requires dataset.kind = soft_bags")
    splits = _load_soft_splits(config)
    for name, bag_list in (("train", splits.train), ("val", splits.val),
                           ("test", splits.test)):
        bags_mod.write_feature_bags(bag_list, out / name, "manifest.csv")
        print(f"{name}: {len(bag_list)} bags -> {out / name}")
    _write_config_copy(config, out)
    return EXIT_OK


def _run_one_seed(seed: int):
    model_config, train_config, splits = _WORKER_CONTEXT
    run = train(model_config, replace(train_config, seed=seed), splits.train, splits.val)
    _, run.test_metrics = evaluate(model_config, run.best_params, splits.test)
    return seed, run


_WORKER_CONTEXT = None


def _train_seeds(model_config, train_config, splits, seeds, jobs):
    global _WORKER_CONTEXT
    _WORKER_CONTEXT = (model_config, train_config, splits)
    try:
        if jobs > 1:
            with multiprocessing.Pool(min(jobs, len(seeds))) as pool:
                results = pool.map(_run_one_seed, seeds)
        else:
            results = [_run_one_seed(seed) for seed in seeds]
    finally:
        _WORKER_CONTEXT = None
    return sorted(results, key=lambda pair: pair[0])


def cmd_train(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args, config)
    splits = _load_splits(config)
    model_config = _model_config(config)
    train_config, n_seeds = _train_config(config)
    seeds = [args.seed] if args.seed is not None else list(range(n_seeds))
    results = _train_seeds(model_config, train_config, splits, seeds, args.jobs)

    history_rows = []
    result_rows = []
    for seed, run in results:
        for stat in run.history:
            history_rows.append([seed, stat.epoch, stat.train_loss, stat.val_loss])
        result_rows.append([
            seed,
            run.test_metrics["auc"],
            run.test_metrics["f1"],
            run.test_metrics["accuracy"],
            run.best_epoch,
        ])
    write_csv(out / "history.csv", ["seed", "epoch", "train_loss", "val_loss"],
              history_rows)
    write_csv(out / "results.csv", ["seed", "auc", "f1", "accuracy", "best_epoch"],
              result_rows)
    summary_rows = []
    from .metrics import mean_std

    for name in METRIC_NAMES:
        mean, std = mean_std([run.test_metrics[name] for _, run in results])
        summary_rows.append([name, mean, std])
        print(f"{name}: {format_mean_std(mean, std)}")
    write_csv(out / "summary.csv", ["metric", "mean", "std"], summary_rows)
    _write_config_copy(config, out)
    return EXIT_OK


def cmd_count(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args, config)
    model_config = _model_config(config)
    n = _get(config, "count.instances", 120)
    params = param_count(model_config)
    cost = flops(model_config, n)
    print(f"parameters: {params} ({format_kilo(params)})")
    print(f"flops @ N={n}: {cost} ({format_mega(cost)})")
    write_csv(
        out / "accounting.csv",
        ["aggregator", "input_dim", "embed_dim", "heads", "classes",
         "n_instances", "params", "params_display", "flops", "flops_display"],
        [[model_config.aggregator, model_config.input_dim, model_config.embed_dim,
          model_config.heads, model_config.classes, n,
          params, format_kilo(params), cost, format_mega(cost)]],
    )
    _write_config_copy(config, out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args, config)
    splits = _load_splits(config)
    model_config = _model_config(config)
    train_config, n_seeds = _train_config(config)
    heads_text = _get(config, "sweep.heads", required=True)
    try:
        head_counts = [int(part) for part in heads_text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"sweep.heads: expected comma-separated integers, got {heads_text!r}") from None
    if not head_counts:
        raise ConfigError("sweep.heads is empty")
    try:
        result = sweep_heads(model_config, head_counts, train_config, splits,
                             n_seeds=n_seeds)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    rows = [
        [e.heads, e.mean_val_loss, e.mean_auc, e.mean_f1, e.params, e.flops]
        for e in result.entries
    ]
    write_csv(out / "sweep.csv",
              ["M", "mean_val_loss", "mean_auc", "mean_f1", "params", "flops"], rows)
    _write_config_copy(config, out)
    print(f"selected M = {result.selected_heads}")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args, config)
    model_config = _model_config(config)
    if not model_config.is_attention:
        raise ConfigError(f"no attention weights: aggregator is {model_config.aggregator}")
    splits = _load_splits(config)
    train_config, _ = _train_config(config)
    seed = args.seed if args.seed is not None else train_config.seed
    run = train(model_config, replace(train_config, seed=seed), splits.train, splits.val)

    split_name = _get(config, "heatmap.split", "test")
    pools = {"train": splits.train, "val": splits.val, "test": splits.test}
    if split_name not in pools:
        raise ConfigError(f"heatmap.split must be train, val or test, got {split_name!r}")
    pool = pools[split_name]
    wanted = _get(config, "heatmap.bags")
    if wanted:
        ids = [part.strip() for part in wanted.split(",") if part.strip()]
        by_id = {bag.bag_id: bag for bag in pool}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise ConfigError(f"unknown bag ids in heatmap.bags: {', '.join(missing)}")
        selected = [by_id[i] for i in ids]
    else:
        selected = pool[: _get(config, "heatmap.count", 1)]

    rows = []
    side = int(np.sqrt(model_config.input_dim))
    is_image = side * side == model_config.input_dim and model_config.input_dim == 784
    for bag in selected:
        weights = attention_weights(model_config, run.best_params, bag.x)
        for head in range(weights.shape[1]):
            for instance_id, weight in zip(bag.instance_ids, weights[:, head]):
                rows.append([bag.bag_id, instance_id, head + 1, weight])
            if is_image:
                montage = attention_montage(bag, weights[:, head], side)
                write_pgm(out / f"{bag.bag_id}_head{head + 1}.pgm", montage)
    write_csv(out / "attention.csv", ["bag_id", "instance_id", "head", "weight"], rows)
    _write_config_copy(config, out)
    print(f"exported attention for {len(selected)} bags x {model_config.heads} heads")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="madmil",
        description="Multiple-instance-learning lab: soft-bag generation, "
                    "training, accounting, head sweeps, attention export.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "generate": ("write soft-bag feature files from IDX images", cmd_generate),
        "train": ("train seeded runs and write history/results/summary CSVs", cmd_train),
        "count": ("print exact parameter and FLOP counts", cmd_count),
        "sweep": ("compare head counts by validation loss", cmd_sweep),
        "heatmap": ("export per-head attention weights and PGM montages", cmd_heatmap),
    }
    for name, (help_text, handler) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to a key=value config file")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--jobs", type=int, default=1, help="parallel seed jobs")
        p.add_argument("--seed", type=int, help="run a single specific seed")
        p.set_defaults(handler=handler)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.handler(args)
    except (ConfigError, IdxError, BagFormatError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
