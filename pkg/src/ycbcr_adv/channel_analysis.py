"""Where does an attack put its perturbation? Per-channel accounting in RGB and YCbCr."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .attacks import AttackConfig, AttackKind, run_attack
from .colorspace import ColorSpace, ImageBatch, Scale, per_channel_l2, rgb_to_ycbcr

CHANNEL_CSV_HEADER = (
    "model",
    "attack",
    "budget",
    "space",
    "ch1_mean_l2",
    "ch2_mean_l2",
    "ch3_mean_l2",
    "ratio_y_cb",
    "ratio_y_cr",
    "n_images",
)


@dataclass
class ChannelRow:
    model: str
    attack: str
    budget: float
    space: ColorSpace
    mean_l2: tuple
    n_images: int
    dominance: float | None = None

    @property
    def ratio_y_over_cb(self) -> float | None:
        return _ratio(self.mean_l2[0], self.mean_l2[1]) if self.space is ColorSpace.YCBCR else None

    @property
    def ratio_y_over_cr(self) -> float | None:
        return _ratio(self.mean_l2[0], self.mean_l2[2]) if self.space is ColorSpace.YCBCR else None


@dataclass
class ChannelDeltaReport:
    rows: list = field(default_factory=list)

    def get(self, model: str, attack: str, budget: float, space: ColorSpace) -> ChannelRow:
        for r in self.rows:
            if (r.model, r.attack, r.space) == (model, attack, space) and math.isclose(r.budget, budget):
                return r
        raise KeyError((model, attack, budget, space))


@dataclass(frozen=True)
class Dominance:
    fraction: float
    n_images: int
    all_zero: bool = False

    def __float__(self):
        return self.fraction


# channel norms below this (BYTE scale) are float round-off, not perturbation
ZERO_TOL = 1e-9


def _ratio(num, den):
    return float(num / den) if den > ZERO_TOL else None


def per_image_deltas(clean: np.ndarray, adv: np.ndarray) -> dict:
    """Per-image per-channel L2 (BYTE scale) in both spaces, as N x 3 arrays."""
    a = ImageBatch(np.asarray(clean, dtype=np.float64), ColorSpace.RGB, Scale.UNIT)
    b = ImageBatch(np.asarray(adv, dtype=np.float64), ColorSpace.RGB, Scale.UNIT)
    return {
        ColorSpace.RGB: per_channel_l2(a, b, per_image=True).per_channel_l2,
        ColorSpace.YCBCR: per_channel_l2(rgb_to_ycbcr(a), rgb_to_ycbcr(b), per_image=True).per_channel_l2,
    }


def dominance_fraction(clean_batch, adv_batch) -> Dominance:
    """Fraction of images whose Y-channel L2 strictly exceeds both chroma L2 values.

    If no image changed at all the fraction is reported as 0 with ``all_zero`` set.
    """
    clean = clean_batch.data if isinstance(clean_batch, ImageBatch) else np.asarray(clean_batch)
    adv = adv_batch.data if isinstance(adv_batch, ImageBatch) else np.asarray(adv_batch)
    if clean.shape != adv.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {adv.shape}")
    if len(clean) == 0:
        raise ValueError("dominance_fraction needs at least one image")
    d = per_image_deltas(clean, adv)[ColorSpace.YCBCR]
    if not np.any(d > ZERO_TOL):
        return Dominance(0.0, len(d), all_zero=True)
    wins = (d[:, 0] > d[:, 1]) & (d[:, 0] > d[:, 2])
    return Dominance(float(wins.mean()), len(d))


AttackFn = Callable[[object, np.ndarray, np.ndarray], np.ndarray]


def _budget_of(cfg: AttackConfig) -> float:
    return float(cfg.resolved().n_iters) if cfg.kind is AttackKind.DDN else float(cfg.epsilon)


def channel_allocation_report(
    models: dict,
    attacks: Sequence,
    images: np.ndarray,
    labels: np.ndarray,
) -> ChannelDeltaReport:
    """Attack every model with every config and average the per-image channel deltas.

    ``attacks`` holds :class:`AttackConfig` objects or ``(name, budget, fn)``
    triples where ``fn(model, images, labels)`` returns adversarial images;
    the latter is handy for synthetic perturbations. Failed attacks still
    contribute their deltas.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("channel_allocation_report needs a non-empty dataset")
    report = ChannelDeltaReport()
    for model_name, model in models.items():
        for spec in attacks:
            if isinstance(spec, AttackConfig):
                name, budget = spec.label, _budget_of(spec)
                adv = run_attack(model, images, labels, spec).adversarial.data
            else:
                name, budget, fn = spec
                adv = np.asarray(fn(model, images, labels))
            deltas = per_image_deltas(images, adv)
            dom = float(dominance_fraction(images, adv))
            for space in (ColorSpace.RGB, ColorSpace.YCBCR):
                means = tuple(float(v) for v in deltas[space].mean(axis=0))
                report.rows.append(
                    ChannelRow(
                        model_name,
                        name,
                        float(budget),
                        space,
                        means,
                        len(images),
                        dominance=dom if space is ColorSpace.YCBCR else None,
                    )
                )
    return report


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def report_rows(report: ChannelDeltaReport) -> Iterable[list]:
    for r in report.rows:
        yield [
            r.model,
            r.attack,
            f"{r.budget:g}",
            r.space.value,
            *(_fmt(v) for v in r.mean_l2),
            _fmt(r.ratio_y_over_cb),
            _fmt(r.ratio_y_over_cr),
            str(r.n_images),
        ]


def write_channel_csv(report: ChannelDeltaReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CHANNEL_CSV_HEADER)
        w.writerows(report_rows(report))
    return path
