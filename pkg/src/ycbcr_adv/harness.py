"""Experiment configuration, dataset subsets, accuracy sweeps and report files."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .attacks import AttackConfig, AttackKind, perturb
from .data import load_dataset
from .models import ClassifierHandle, batched_logits, load_classifier, predict_batch, to_nchw

ACCURACY_CSV_HEADER = ("model", "defense", "attack", "budget", "top1", "top5", "n_images")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (CLI exit code 2)."""


class MissingArtifactError(FileNotFoundError):
    """A referenced checkpoint or index file does not exist (CLI exit code 3)."""


# --- configuration ---------------------------------------------------------------


def _list(kind):
    def parse(text):
        text = text.strip()
        return [kind(t.strip()) for t in text.split(",") if t.strip()] if text else []

    parse.__name__ = f"list[{kind.__name__}]"
    return parse


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_str(text):
    return text.strip() or None


# key -> (parser, default, description). This table is the published schema.
CONFIG_SCHEMA = {
    "dataset": (str, "shapes10", "dataset name: shapes10 (synthetic) or cifar10"),
    "dataset_root": (_opt_str, None, "directory holding cifar-10-batches-py (cifar10 only)"),
    "shapes_train": (int, 20000, "synthetic training images"),
    "shapes_test": (int, 2000, "synthetic test images"),
    "dataset_seed": (int, 0, "seed of the synthetic dataset generator"),
    "split": (str, "test", "split the experiment draws images from"),
    "subset": (_opt_str, None, "subset index file; when unset the first subset_size images are used"),
    "subset_size": (int, 1000, "images per subset"),
    "subset_k": (int, 1, "number of disjoint subsets for make-subsets"),
    "subset_mode": (str, "random", "random | best | worst"),
    "subset_model": (str, "resnet_mini", "model that ranks images for best/worst subsets"),
    "models": (_list(str), ["resnet_mini", "vgg_mini"], "architectures to train or evaluate"),
    "model_dir": (_opt_str, None, "classifier checkpoint directory (default <output_dir>/models)"),
    "epochs": (int, 8, "classifier training epochs"),
    "learning_rate": (float, 0.05, "classifier peak learning rate"),
    "batch_size": (int, 128, "classifier batch size"),
    "attacks": (_list(str), ["fgsm", "pgd"], "any of fgsm, bim, illc, pgd, ddn, fgsm_y, pgd_y"),
    "epsilons": (_list(float), [0.01, 0.02, 0.04], "L-infinity budgets (UNIT scale)"),
    "ddn_iters": (_list(int), [20, 40, 60], "DDN iteration counts"),
    "pgd_iters": (int, 40, "PGD/BIM/ILLC iterations"),
    "pgd_alpha_ratio": (float, 0.1, "PGD/BIM/ILLC step size as a fraction of epsilon"),
    "ddn_gamma": (float, 0.05, "DDN norm adjustment factor"),
    "y_alpha": (float, 1e-4, "step size of the Y-channel attacks"),
    "defense": (_opt_str, None, "defense checkpoint path (without suffix)"),
    "defense_victim": (str, "resnet_mini", "model attacked while training the defense; also the backbone"),
    "defense_epochs": (int, 5, "defense training epochs"),
    "defense_lr": (float, 1e-4, "defense Adam learning rate"),
    "defense_batch_size": (int, 64, "defense batch size"),
    "defense_train_images": (int, 10000, "training images used per defense epoch"),
    "defense_pgd_iters": (int, 10, "PGD iterations when generating defense training data"),
    "noise_std": (float, 0.02, "std of the Gaussian noise added to Y (UNIT scale)"),
    "metrics": (_list(str), ["top1", "top5"], "reported metrics"),
    "seed": (int, 0, "master seed"),
    "output_dir": (str, "runs/default", "where reports and artifacts are written"),
    "device": (str, "cpu", "torch device name"),
}


@dataclass
class ExperimentConfig:
    dataset: str = "shapes10"
    dataset_root: str | None = None
    shapes_train: int = 20000
    shapes_test: int = 2000
    dataset_seed: int = 0
    split: str = "test"
    subset: str | None = None
    subset_size: int = 1000
    subset_k: int = 1
    subset_mode: str = "random"
    subset_model: str = "resnet_mini"
    models: list = field(default_factory=lambda: ["resnet_mini", "vgg_mini"])
    model_dir: str | None = None
    epochs: int = 8
    learning_rate: float = 0.05
    batch_size: int = 128
    attacks: list = field(default_factory=lambda: ["fgsm", "pgd"])
    epsilons: list = field(default_factory=lambda: [0.01, 0.02, 0.04])
    ddn_iters: list = field(default_factory=lambda: [20, 40, 60])
    pgd_iters: int = 40
    pgd_alpha_ratio: float = 0.1
    ddn_gamma: float = 0.05
    y_alpha: float = 1e-4
    defense: str | None = None
    defense_victim: str = "resnet_mini"
    defense_epochs: int = 5
    defense_lr: float = 1e-4
    defense_batch_size: int = 64
    defense_train_images: int = 10000
    defense_pgd_iters: int = 10
    noise_std: float = 0.02
    metrics: list = field(default_factory=lambda: ["top1", "top5"])
    seed: int = 0
    output_dir: str = "runs/default"
    device: str = "cpu"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.dataset not in ("shapes10", "cifar10"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.split not in ("train", "test"):
            raise ConfigError(f"unknown split {self.split!r}")
        if self.subset_mode not in ("random", "best", "worst"):
            raise ConfigError(f"unknown subset_mode {self.subset_mode!r}")
        bad = [a for a in self.attacks if a not in ATTACK_NAMES]
        if bad:
            raise ConfigError(f"unknown attacks {bad}")
        if any(e < 0 for e in self.epsilons):
            raise ConfigError("epsilons must be >= 0")
        if any(m not in ("top1", "top5") for m in self.metrics):
            raise ConfigError("metrics must be top1 and/or top5")
        for name in ("subset_size", "subset_k", "pgd_iters", "batch_size", "defense_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        try:
            dev = torch.device(self.device)
        except RuntimeError as exc:
            raise ConfigError(f"bad device {self.device!r}") from exc
        if dev.type != "cpu":
            raise ConfigError(f"device {self.device!r} is not supported by this build (cpu only)")

    @property
    def models_path(self) -> Path:
        return Path(self.model_dir) if self.model_dir else Path(self.output_dir) / "models"

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {'' if value is None else value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ExperimentConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            parser = CONFIG_SCHEMA[key][0]
            try:
                values[key] = parser(value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        return cls.from_text(path.read_text(), **overrides)


def schema_text() -> str:
    """Human-readable schema of the config format."""
    out = ["# key = value, one per line; '#' starts a comment; lists are comma separated"]
    for key, (parser, default, desc) in CONFIG_SCHEMA.items():
        if isinstance(default, list):
            default = ",".join(str(v) for v in default)
        out.append(f"# {key} ({getattr(parser, '__name__', 'str')}): {desc}")
        out.append(f"{key} = {'' if default is None else default}")
    return "\n".join(out) + "\n"


# --- attacks from config ---------------------------------------------------------

ATTACK_NAMES = ("fgsm", "bim", "illc", "pgd", "ddn", "fgsm_y", "pgd_y")


def attack_configs(cfg: ExperimentConfig) -> list[AttackConfig]:
    """Expand the attack x budget grid. DDN budgets are iteration counts."""
    out = []
    for name in cfg.attacks:
        if name == "ddn":
            out += [AttackConfig.ddn(n, ddn_gamma=cfg.ddn_gamma, seed=cfg.seed) for n in cfg.ddn_iters]
            continue
        for eps in cfg.epsilons:
            if eps == 0:
                continue
            if name in ("bim", "illc", "pgd"):
                maker = getattr(AttackConfig, name)
                out.append(maker(eps, alpha=eps * cfg.pgd_alpha_ratio, n_iters=cfg.pgd_iters, seed=cfg.seed))
            elif name in ("fgsm_y", "pgd_y"):
                out.append(getattr(AttackConfig, name)(eps, alpha=cfg.y_alpha, seed=cfg.seed))
            else:
                out.append(AttackConfig.fgsm(eps))
    return out


def attack_budget(a: AttackConfig) -> float:
    return float(a.resolved().n_iters) if a.kind is AttackKind.DDN else float(a.epsilon)


# --- subsets -----------------------------------------------------------------------


@dataclass
class SubsetIndex:
    name: str
    indices: np.ndarray
    parent_split: str
    seed: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if len(np.unique(idx)) != len(idx):
            raise ValueError("subset indices must be unique")
        self.indices = np.sort(idx)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        body = "\n".join(str(int(i)) for i in self.indices)
        path.write_text(f"name={self.name}\nparent_split={self.parent_split}\nseed={self.seed}\n{body}\n")
        return path

    @classmethod
    def read(cls, path) -> "SubsetIndex":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"subset index {path} not found")
        lines = path.read_text().splitlines()
        head = dict(line.split("=", 1) for line in lines[:3])
        idx = [int(s) for s in lines[3:] if s.strip()]
        return cls(head["name"], np.array(idx, dtype=np.int64), head["parent_split"], int(head["seed"]))

    def disjoint_from(self, other: "SubsetIndex") -> bool:
        return len(np.intersect1d(self.indices, other.indices)) == 0


def make_subset_index(
    parent_split: str,
    k_subsets: int,
    size: int,
    seed: int,
    mode: str = "random",
    model: ClassifierHandle | None = None,
    images: np.ndarray | None = None,
    labels: np.ndarray | None = None,
    n_parent: int | None = None,
    out_dir=None,
    prefix: str = "subset",
) -> list[SubsetIndex]:
    """Draw ``k_subsets`` mutually exclusive index sets of ``size`` images.

    ``random`` needs only the parent size. ``best`` ranks images by the
    model's probability for the true label (misclassified images last);
    ``worst`` uses the reverse order. Ranked selections are dealt out in rank
    order, so subset 1 is the most extreme.
    """
    mode = mode.lower()
    if n_parent is None:
        if images is None:
            raise ValueError("need images or n_parent")
        n_parent = len(images)
    if k_subsets * size > n_parent:
        raise ValueError(f"{k_subsets} x {size} images requested from a split of {n_parent}")
    if mode == "random":
        order = np.random.default_rng(seed).permutation(n_parent)
    elif mode in ("best", "worst"):
        if model is None or images is None or labels is None:
            raise ValueError(f"{mode} subsets need a model, images and labels")
        pred, probs = predict_batch(model, images)
        labels = np.asarray(labels)
        conf = probs[np.arange(len(labels)), labels]
        # correct predictions rank above any misclassification
        score = conf + (pred == labels).astype(np.float64)
        # stable tiebreak by a seeded permutation
        tiebreak = np.random.default_rng(seed).permutation(n_parent)
        order = np.lexsort((tiebreak, -score if mode == "best" else score))
    else:
        raise ValueError(f"unknown subset mode {mode!r}")
    subsets = []
    for i in range(k_subsets):
        name = f"{prefix}_{mode}_{i + 1}"
        s = SubsetIndex(name, order[i * size : (i + 1) * size], parent_split, seed)
        if out_dir is not None:
            s.write(Path(out_dir) / f"{name}.idx")
        subsets.append(s)
    return subsets


# --- experiments ------------------------------------------------------------------


@dataclass
class AccuracyRow:
    model: str
    defense: str
    attack: str
    budget: float
    top1: float
    top5: float
    n_images: int

    def as_list(self) -> list[str]:
        return [
            self.model,
            self.defense,
            self.attack,
            f"{self.budget:g}",
            f"{self.top1:.1f}",
            f"{self.top5:.1f}",
            str(self.n_images),
        ]


@dataclass
class ReportBundle:
    rows: list
    config: dict
    version: str = __version__

    def to_json(self) -> str:
        payload = {
            "version": self.version,
            "config": self.config,
            "schema": list(ACCURACY_CSV_HEADER),
            "rows": [dict(zip(ACCURACY_CSV_HEADER, r.as_list())) for r in self.rows],
        }
        for r in payload["rows"]:
            r["budget"] = float(r["budget"])
            r["top1"], r["top5"] = float(r["top1"]), float(r["top5"])
            r["n_images"] = int(r["n_images"])
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ReportBundle":
        d = json.loads(text)
        rows = [AccuracyRow(**{k: r[k] for k in ACCURACY_CSV_HEADER}) for r in d["rows"]]
        return cls(rows, d["config"], d["version"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ACCURACY_CSV_HEADER)
        w.writerows(r.as_list() for r in self.rows)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, config: dict | None = None, version: str = __version__) -> "ReportBundle":
        reader = csv.reader(io.StringIO(text))
        header = tuple(next(reader))
        if header != ACCURACY_CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        rows = [
            AccuracyRow(m, d, a, float(b), float(t1), float(t5), int(n)) for m, d, a, b, t1, t5, n in reader
        ]
        return cls(rows, config or {}, version)

    def find(self, model, defense, attack, budget) -> AccuracyRow:
        for r in self.rows:
            if (r.model, r.defense, r.attack) == (model, defense, attack) and np.isclose(r.budget, budget):
                return r
        raise KeyError((model, defense, attack, budget))


def topk_accuracy(logits: torch.Tensor, labels: torch.Tensor, k: int) -> float:
    k = min(k, logits.shape[1])
    top = logits.topk(k, dim=1).indices
    return float((top == labels.view(-1, 1)).any(dim=1).double().mean()) * 100.0


def load_experiment_data(cfg: ExperimentConfig):
    """Images and labels selected by ``cfg`` (split + optional subset file)."""
    kwargs = {}
    if cfg.dataset == "shapes10":
        kwargs = dict(n_train=cfg.shapes_train, n_test=cfg.shapes_test)
    try:
        ds = load_dataset(cfg.dataset, root=cfg.dataset_root, seed=cfg.dataset_seed, **kwargs)
    except FileNotFoundError as exc:
        raise MissingArtifactError(str(exc)) from exc
    x, y = ds.split(cfg.split)
    if cfg.subset:
        sub = SubsetIndex.read(cfg.subset)
        if sub.parent_split != cfg.split:
            raise ConfigError(f"subset {sub.name} indexes split {sub.parent_split!r}, config uses {cfg.split!r}")
        if sub.indices.max(initial=-1) >= len(x):
            raise ConfigError(f"subset {sub.name} indexes beyond the split size")
        return ds, x[sub.indices], y[sub.indices]
    n = min(cfg.subset_size, len(x))
    return ds, x[:n], y[:n]


def load_models(cfg: ExperimentConfig) -> dict:
    models = {}
    for name in cfg.models:
        path = cfg.models_path / name
        if not path.with_suffix(".pt").exists():
            raise MissingArtifactError(f"classifier checkpoint {path}.pt not found (run train-classifier)")
        models[name] = load_classifier(path)
    return models


def load_defense(cfg: ExperimentConfig, models: dict | None = None):
    from .resupnet import DefenseCheckpoint

    if not cfg.defense:
        return None
    path = Path(cfg.defense)
    if not path.with_suffix(".pt").exists():
        raise MissingArtifactError(f"defense checkpoint {path}.pt not found (run train-defense)")
    backbone = (models or {}).get(cfg.defense_victim)
    if backbone is None:
        bpath = cfg.models_path / cfg.defense_victim
        if not bpath.with_suffix(".pt").exists():
            raise MissingArtifactError(f"backbone checkpoint {bpath}.pt not found")
        backbone = load_classifier(bpath)
    return DefenseCheckpoint.load(path, backbone).net


def evaluate_accuracy(
    models: dict,
    attacks: list,
    images: np.ndarray,
    labels: np.ndarray,
    defense=None,
    seed: int = 0,
) -> list[AccuracyRow]:
    """Top-1/top-5 accuracy (percent) per model x (clean + attacks) x defense mode.

    Adversarials are crafted against the undefended model; the defense (if
    any) is then applied in front of the same model.
    """
    from .resupnet import defend_t

    x = to_nchw(images)
    y = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    modes = ["none"] + (["resupnet"] if defense is not None else [])
    rows = []
    for name, model in models.items():
        inputs = [("clean", 0.0, x)]
        for a in attacks:
            goal = y
            if a.targeted:
                from .attacks import least_likely_labels

                goal = least_likely_labels(model, x)
            inputs.append((a.label, attack_budget(a), perturb(model, x, goal, a, chunk=500)[0]))
        for mode in modes:
            for attack, budget, xa in inputs:
                xin = defend_t(defense, xa, seed) if mode == "resupnet" else xa
                logits = batched_logits(model, xin)
                rows.append(
                    AccuracyRow(
                        name,
                        mode,
                        attack,
                        budget,
                        round(topk_accuracy(logits, y, 1), 1),
                        round(topk_accuracy(logits, y, 5), 1),
                        len(y),
                    )
                )
    return rows


def run_experiment(cfg: ExperimentConfig) -> ReportBundle:
    torch.manual_seed(cfg.seed)
    models = load_models(cfg)
    defense = load_defense(cfg, models)
    _, x, y = load_experiment_data(cfg)
    rows = evaluate_accuracy(models, attack_configs(cfg), x, y, defense=defense, seed=cfg.seed)
    return ReportBundle(rows, cfg.to_dict())


def _atomic_write(path: Path, text: str):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def emit_report(bundle: ReportBundle, out_dir, formats=("csv", "json"), stem: str = "accuracy") -> list[Path]:
    """Write the bundle as ``<stem>.csv`` and/or ``<stem>.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"output directory {out_dir} is not writable")
    rendered = {}
    for fmt in formats:
        fmt = fmt.lower()
        if fmt == "csv":
            rendered[out_dir / f"{stem}.csv"] = bundle.to_csv()
        elif fmt == "json":
            rendered[out_dir / f"{stem}.json"] = bundle.to_json()
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    for path, text in rendered.items():
        _atomic_write(path, text)
    return list(rendered)
