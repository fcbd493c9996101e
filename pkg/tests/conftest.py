"""Shared fixtures. Trained classifiers and the defense checkpoint are cached
under ``.artifact_cache/`` keyed by everything that determines them, so only
the first acceptance run pays for training."""

import hashlib
import json
from pathlib import Path

import pytest

from ycbcr_adv.data import load_dataset
from ycbcr_adv.models import TrainRecipe, load_classifier, save_classifier, train_classifier

CACHE = Path(__file__).resolve().parent.parent / ".artifact_cache"
ACCEPTANCE_ARCHS = ("resnet_mini", "vgg_mini", "densenet_mini")

_criteria: list[str] = []


def record_criterion(number, title, passed, detail=""):
    line = f"CRITERION {number} [{'PASS' if passed else 'FAIL'}] {title}" + (f" :: {detail}" if detail else "")
    _criteria.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criteria, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


def _data_key(ds) -> str:
    h = hashlib.sha256()
    for a in (ds.x_train[:500], ds.x_train[-500:], ds.y_train, ds.x_test[:200], ds.y_test):
        h.update(a.tobytes())
    return h.hexdigest()


def _key(ds, *parts) -> str:
    blob = json.dumps([_data_key(ds), *parts], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@pytest.fixture(scope="session")
def shapes():
    return load_dataset("shapes10")


@pytest.fixture(scope="session")
def recipe():
    return TrainRecipe()


@pytest.fixture(scope="session")
def trained_models(shapes, recipe):
    models = {}
    for arch in ACCEPTANCE_ARCHS:
        path = CACHE / f"{arch}-{_key(shapes, arch, recipe)}"
        if path.with_suffix(".pt").exists():
            models[arch] = load_classifier(path)
        else:
            models[arch] = train_classifier(arch, recipe, shapes)
            save_classifier(models[arch], path)
    return models


@pytest.fixture(scope="session")
def trained_defense(shapes, trained_models):
    from ycbcr_adv.resupnet import DefenseCheckpoint, DefenseRecipe, DefenseSpec, build_defense, train_defense

    victim = trained_models["resnet_mini"]
    recipe = DefenseRecipe()
    path = CACHE / f"resupnet-{_key(shapes, victim.checksum(), recipe)}"
    if path.with_suffix(".pt").exists():
        return DefenseCheckpoint.load(path, victim)
    net = build_defense(DefenseSpec(backbone=victim))
    ckpt = train_defense(net, shapes, victim, recipe)
    ckpt.save(path)
    return ckpt
