"""Command line entry point: ``ycbcr-adv <subcommand> --config FILE [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 missing artifact.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .harness import (
    ConfigError,
    ExperimentConfig,
    MissingArtifactError,
    ReportBundle,
    attack_budget,
    attack_configs,
    emit_report,
    load_experiment_data,
    load_models,
    make_subset_index,
    run_experiment,
    schema_text,
)

EXIT_OK, EXIT_CONFIG, EXIT_MISSING = 0, 2, 3

log = logging.getLogger("ycbcr_adv")


def _load_config(args) -> ExperimentConfig:
    overrides = {"seed": args.seed, "output_dir": args.out, "device": args.device}
    if args.config:
        return ExperimentConfig.from_file(args.config, **overrides)
    return ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})


def _out(cfg) -> Path:
    p = Path(cfg.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_train_classifier(cfg: ExperimentConfig, args):
    from .data import load_dataset
    from .models import TrainRecipe, save_classifier, train_classifier

    kwargs = dict(n_train=cfg.shapes_train, n_test=cfg.shapes_test) if cfg.dataset == "shapes10" else {}
    try:
        ds = load_dataset(cfg.dataset, root=cfg.dataset_root, seed=cfg.dataset_seed, **kwargs)
    except FileNotFoundError as exc:
        raise MissingArtifactError(str(exc)) from exc
    summary = {}
    for name in cfg.models:
        recipe = TrainRecipe(
            epochs=cfg.epochs, learning_rate=cfg.learning_rate, batch_size=cfg.batch_size, seed=cfg.seed, dataset=cfg.dataset
        )
        model = train_classifier(name, recipe, ds, log=log.info)
        save_classifier(model, cfg.models_path / name)
        summary[name] = {k: model.metadata[k] for k in ("train_acc", "test_acc", "epochs", "seed")}
        summary[name]["checksum"] = model.checksum()
        log.info("%s: test accuracy %.4f", name, model.metadata["test_acc"])
    (_out(cfg) / "train_classifier.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def cmd_make_subsets(cfg: ExperimentConfig, args):
    from .data import load_dataset
    from .models import load_classifier

    kwargs = dict(n_train=cfg.shapes_train, n_test=cfg.shapes_test) if cfg.dataset == "shapes10" else {}
    ds = load_dataset(cfg.dataset, root=cfg.dataset_root, seed=cfg.dataset_seed, **kwargs)
    x, y = ds.split(cfg.split)
    model = None
    if cfg.subset_mode != "random":
        path = cfg.models_path / cfg.subset_model
        if not path.with_suffix(".pt").exists():
            raise MissingArtifactError(f"{path}.pt needed to rank images")
        model = load_classifier(path)
    try:
        subsets = make_subset_index(
            cfg.split, cfg.subset_k, cfg.subset_size, cfg.seed, cfg.subset_mode, model=model, images=x, labels=y,
            out_dir=_out(cfg) / "subsets",
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for s in subsets:
        print(f"{s.name}: {len(s.indices)} indices")


def cmd_attack(cfg: ExperimentConfig, args):
    from .attacks import run_attack

    models = load_models(cfg)
    _, x, y = load_experiment_data(cfg)
    rows = []
    for name, model in models.items():
        for a in attack_configs(cfg):
            r = run_attack(model, x, y, a)
            rows.append(
                [name, a.label, f"{attack_budget(a):g}", f"{100 * r.success_rate:.1f}",
                 f"{r.linf_norm.mean():.6f}", f"{r.l2_norm.mean():.6f}", str(len(y))]
            )
            log.info("%s %s %g: success %.1f%%", name, a.label, attack_budget(a), 100 * r.success_rate)
    path = _out(cfg) / "attacks.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "attack", "budget", "success_rate", "mean_linf", "mean_l2", "n_images"])
        w.writerows(rows)


def cmd_analyze_channels(cfg: ExperimentConfig, args):
    from .channel_analysis import channel_allocation_report, write_channel_csv

    models = load_models(cfg)
    _, x, y = load_experiment_data(cfg)
    report = channel_allocation_report(models, attack_configs(cfg), x, y)
    write_channel_csv(report, _out(cfg) / "channels.csv")


def cmd_train_defense(cfg: ExperimentConfig, args):
    from .data import load_dataset
    from .models import load_classifier
    from .resupnet import DefenseRecipe, DefenseSpec, build_defense, train_defense

    path = cfg.models_path / cfg.defense_victim
    if not path.with_suffix(".pt").exists():
        raise MissingArtifactError(f"victim/backbone checkpoint {path}.pt not found")
    victim = load_classifier(path)
    kwargs = dict(n_train=cfg.shapes_train, n_test=cfg.shapes_test) if cfg.dataset == "shapes10" else {}
    ds = load_dataset(cfg.dataset, root=cfg.dataset_root, seed=cfg.dataset_seed, **kwargs)
    net = build_defense(DefenseSpec(backbone=victim, noise_std=cfg.noise_std, seed=cfg.seed))
    recipe = DefenseRecipe(
        epochs=cfg.defense_epochs,
        learning_rate=cfg.defense_lr,
        batch_size=cfg.defense_batch_size,
        seed=cfg.seed,
        train_images=cfg.defense_train_images,
        pgd_iters=cfg.defense_pgd_iters,
    )
    ckpt = train_defense(net, ds, victim, recipe, log=log.info)
    target = Path(cfg.defense) if cfg.defense else _out(cfg) / "defense" / "resupnet"
    ckpt.save(target)
    print(f"saved defense checkpoint to {target}")


def cmd_evaluate(cfg: ExperimentConfig, args):
    bundle = run_experiment(cfg)
    for p in emit_report(bundle, _out(cfg)):
        print(f"wrote {p}")


def cmd_report(cfg: ExperimentConfig, args):
    src = Path(args.input) if args.input else Path(cfg.output_dir) / "accuracy.json"
    if not src.exists():
        raise MissingArtifactError(f"report input {src} not found (run evaluate)")
    bundle = ReportBundle.from_json(src.read_text())
    emit_report(bundle, _out(cfg), formats=args.format)
    print(bundle.to_csv(), end="")


def cmd_schema(cfg, args):
    print(schema_text(), end="")


COMMANDS = {
    "train-classifier": cmd_train_classifier,
    "train-defense": cmd_train_defense,
    "attack": cmd_attack,
    "analyze-channels": cmd_analyze_channels,
    "make-subsets": cmd_make_subsets,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "schema": cmd_schema,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ycbcr-adv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file (see `ycbcr-adv schema`)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory (overrides output_dir)")
        p.add_argument("--device", default=None)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "report":
            p.add_argument("--input", default=None, help="accuracy JSON to re-emit")
            p.add_argument("--format", nargs="+", default=["csv", "json"], choices=["csv", "json"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        cfg = _load_config(args)
        torch.manual_seed(cfg.seed)
        np.random.seed(cfg.seed)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
