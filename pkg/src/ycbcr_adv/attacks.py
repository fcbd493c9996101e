"""White-box gradient attacks: FGSM, BIM/ILLC/PGD, DDN and the Y-channel variants.

All budgets are on UNIT scale pixels. The public functions take NHWC numpy
arrays (or RGB/UNIT :class:`ImageBatch`) and return an :class:`AttackResult`;
:func:`perturb` is the tensor-level entry point used by training loops.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch

from .colorspace import ColorSpace, ImageBatch, Scale, luma_bounds_t, luma_t
from .models import ClassifierHandle, batched_logits, loss_gradient_t, to_nchw, to_nhwc

Y_ATTACK_ALPHA = 1e-4
Y_ATTACK_MAX_ITERS = 200


class AttackKind(enum.Enum):
    FGSM = "fgsm"
    ITERATIVE = "iterative"
    DDN = "ddn"
    FGSM_Y = "fgsm_y"
    PGD_Y = "pgd_y"


@dataclass(frozen=True)
class AttackConfig:
    kind: AttackKind
    epsilon: float = 0.0
    alpha: float | None = None
    n_iters: int | None = None
    targeted: bool = False
    random_init: bool = False
    project_linf: bool = True
    ddn_gamma: float = 0.05
    ddn_init_norm: float = 1.0
    seed: int = 0
    name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.n_iters is not None and self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")

    # presets -------------------------------------------------------------
    @classmethod
    def fgsm(cls, epsilon, **kw):
        return cls(AttackKind.FGSM, epsilon, name="fgsm", **kw)

    @classmethod
    def bim(cls, epsilon, alpha=None, n_iters=None, **kw):
        return cls(AttackKind.ITERATIVE, epsilon, alpha, n_iters, name="bim", **kw)

    @classmethod
    def illc(cls, epsilon, alpha=None, n_iters=None, **kw):
        return cls(AttackKind.ITERATIVE, epsilon, alpha, n_iters, targeted=True, name="illc", **kw)

    @classmethod
    def pgd(cls, epsilon, alpha=None, n_iters=None, **kw):
        return cls(AttackKind.ITERATIVE, epsilon, alpha, n_iters, random_init=True, name="pgd", **kw)

    @classmethod
    def ddn(cls, n_iters=40, **kw):
        return cls(AttackKind.DDN, 0.0, n_iters=n_iters, name="ddn", **kw)

    @classmethod
    def fgsm_y(cls, epsilon, **kw):
        return cls(AttackKind.FGSM_Y, epsilon, name="fgsm_y", **kw)

    @classmethod
    def pgd_y(cls, epsilon, **kw):
        return cls(AttackKind.PGD_Y, epsilon, random_init=True, name="pgd_y", **kw)

    @property
    def label(self) -> str:
        return self.name or self.kind.value

    def resolved(self) -> "AttackConfig":
        """Fill in the kind-specific defaults for ``alpha`` and ``n_iters``."""
        kind, alpha, n = self.kind, self.alpha, self.n_iters
        if kind is AttackKind.FGSM:
            alpha, n = (self.epsilon or None), 1
        elif kind is AttackKind.ITERATIVE:
            alpha = alpha if alpha is not None else self.epsilon / 10
            n = n or 40
        elif kind is AttackKind.DDN:
            alpha = alpha if alpha is not None else 1.0
            n = n or 40
        else:
            alpha = alpha if alpha is not None else Y_ATTACK_ALPHA
            n = n or min(math.ceil(self.epsilon / alpha - 1e-9), Y_ATTACK_MAX_ITERS)
        return replace(self, alpha=alpha, n_iters=max(int(n), 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)


@dataclass
class AttackResult:
    adversarial: ImageBatch
    success: np.ndarray
    linf_norm: np.ndarray
    l2_norm: np.ndarray
    iterations_used: np.ndarray
    config: AttackConfig
    targets: np.ndarray | None = None

    @property
    def success_rate(self) -> float:
        return float(self.success.mean()) if len(self.success) else 0.0


def _generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def _uniform_like(x: torch.Tensor, bound: float, gen: torch.Generator) -> torch.Tensor:
    return (torch.rand(x.shape, generator=gen, dtype=x.dtype) * 2 - 1) * bound


def least_likely_labels(model: ClassifierHandle, x: torch.Tensor) -> torch.Tensor:
    return batched_logits(model, x).argmin(dim=1)


# --- tensor-level attacks ----------------------------------------------------------


def fgsm_t(model, x, y, cfg: AttackConfig):
    sign = -1.0 if cfg.targeted else 1.0
    grad, _ = loss_gradient_t(model, x, y)
    x_adv = (x + sign * cfg.epsilon * grad.sign()).clamp(0.0, 1.0)
    return x_adv, torch.ones(len(x), dtype=torch.long)


def iterative_t(model, x, y, cfg: AttackConfig):
    """BIM (plain), ILLC (``targeted`` with least-likely targets) or PGD (``random_init``)."""
    eps, alpha = cfg.epsilon, cfg.alpha
    sign = -1.0 if cfg.targeted else 1.0
    x_adv = x.clone()
    if cfg.random_init:
        x_adv = (x + _uniform_like(x, eps, _generator(cfg.seed))).clamp(0.0, 1.0)
    lo, hi = x - eps, x + eps
    for _ in range(cfg.n_iters):
        grad, _ = loss_gradient_t(model, x_adv, y)
        x_adv = x_adv + sign * alpha * grad.sign()
        if cfg.project_linf:
            x_adv = torch.minimum(torch.maximum(x_adv, lo), hi)
        x_adv = x_adv.clamp(0.0, 1.0)
    return x_adv.detach(), torch.full((len(x),), cfg.n_iters, dtype=torch.long)


def _is_adv(logits, y, targeted):
    pred = logits.argmax(dim=1)
    return pred == y if targeted else pred != y


def ddn_t(model, x, y, cfg: AttackConfig):
    """Decoupled direction and norm L2 attack.

    The direction is a normalized-gradient step with a cosine-annealed step
    size; the norm of the perturbation is then set to a per-image budget that
    shrinks by ``(1 - gamma)`` while the iterate is adversarial and grows by
    ``(1 + gamma)`` while it is not. The smallest adversarial seen is returned;
    images never fooled come back unperturbed.
    """
    n = len(x)
    flat = lambda t: t.reshape(n, -1)  # noqa: E731
    gamma, steps = cfg.ddn_gamma, cfg.n_iters
    multiplier = -1.0 if cfg.targeted else 1.0
    delta = torch.zeros_like(x)
    norm = torch.full((n,), float(cfg.ddn_init_norm), dtype=x.dtype)
    worst_norm = flat(torch.maximum(x, 1 - x)).norm(dim=1)
    best_l2 = worst_norm.clone()
    best_delta = torch.zeros_like(x)
    found = torch.zeros(n, dtype=torch.bool)
    first_hit = torch.full((n,), steps, dtype=torch.long)
    gen = _generator(cfg.seed)
    for i in range(steps):
        step = 0.01 + (cfg.alpha - 0.01) * (1 + math.cos(math.pi * i / steps)) / 2
        l2 = flat(delta).norm(dim=1)
        grad, logits = loss_gradient_t(model, x + delta, y)
        is_adv = _is_adv(logits, y, cfg.targeted)
        better = is_adv & (l2 < best_l2)
        first_hit = torch.where(is_adv & ~found, torch.full_like(first_hit, i), first_hit)
        found |= is_adv
        best_l2 = torch.where(better, l2, best_l2)
        best_delta[better] = delta[better]

        grad = multiplier * grad
        gnorm = flat(grad).norm(dim=1)
        zero = gnorm == 0
        if zero.any():
            grad[zero] = torch.randn(grad[zero].shape, generator=gen, dtype=grad.dtype)
            gnorm = flat(grad).norm(dim=1)
        delta = delta + step * grad / gnorm.view(-1, 1, 1, 1)

        norm = norm * (1 - (2 * is_adv.to(x.dtype) - 1) * gamma)
        norm = torch.minimum(norm, worst_norm)
        dnorm = flat(delta).norm(dim=1).clamp_min(1e-12)
        delta = delta * (norm / dnorm).view(-1, 1, 1, 1)
        delta = (x + delta).clamp(0.0, 1.0) - x
    return (x + best_delta).detach(), first_hit


def y_channel_t(model, x, y, cfg: AttackConfig):
    """Sign-gradient steps of size ``alpha`` of which only the luma change is kept.

    Every iterate has the form ``x + dy * (1, 1, 1)``, i.e. the Cb/Cr channels of
    the clean image, with ``|dy| <= epsilon`` and RGB inside [0, 1]. Images stop
    being updated as soon as they are misclassified.
    """
    eps, alpha = cfg.epsilon, cfg.alpha
    if eps <= 0:
        raise ValueError("Y-channel attacks need epsilon > 0")
    sign = -1.0 if cfg.targeted else 1.0
    pgd = cfg.kind is AttackKind.PGD_Y
    y_clean = luma_t(x) / 255.0
    lo_valid, hi_valid = luma_bounds_t(x)
    lo_eps, hi_eps = x - eps, x + eps

    def keep_luma(candidate, i):
        dy = luma_t(candidate) / 255.0 - y_clean[i]
        dy = dy.clamp(-eps, eps)
        return x[i] + torch.maximum(torch.minimum(dy, hi_valid[i]), lo_valid[i])

    everyone = torch.arange(len(x))
    x_adv = x.clone()
    if pgd:
        x_adv = keep_luma((x + _uniform_like(x, eps, _generator(cfg.seed))).clamp(0.0, 1.0), everyone)
    used = torch.zeros(len(x), dtype=torch.long)
    active = everyone
    for _ in range(cfg.n_iters):
        # only images that are not yet misclassified are stepped (and differentiated)
        grad, logits = loss_gradient_t(model, x_adv[active], y[active])
        keep = ~_is_adv(logits, y[active], cfg.targeted)
        active, grad = active[keep], grad[keep]
        if len(active) == 0:
            break
        cand = (x_adv[active] + sign * alpha * grad.sign()).clamp(0.0, 1.0)
        if pgd:
            cand = torch.minimum(torch.maximum(cand, lo_eps[active]), hi_eps[active])
        x_adv[active] = keep_luma(cand, active)
        used[active] += 1
    return x_adv.detach(), used


_DISPATCH = {
    AttackKind.FGSM: fgsm_t,
    AttackKind.ITERATIVE: iterative_t,
    AttackKind.DDN: ddn_t,
    AttackKind.FGSM_Y: y_channel_t,
    AttackKind.PGD_Y: y_channel_t,
}


def perturb(model: ClassifierHandle, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig, chunk: int = 0):
    """Run ``cfg`` on an NCHW tensor. Returns ``(x_adv, iterations_used)``.

    ``y`` holds true labels, or targets when ``cfg.targeted``. With ``chunk``
    the batch is processed in slices (results do not depend on the slicing
    except through random initialisation, which is seeded per slice index).
    """
    cfg = cfg.resolved()
    fn = _DISPATCH[cfg.kind]
    if not chunk or len(x) <= chunk:
        return fn(model, x, y, cfg)
    outs, used = [], []
    for k, i in enumerate(range(0, len(x), chunk)):
        sub = replace(cfg, seed=cfg.seed + k) if k else cfg
        a, u = fn(model, x[i : i + chunk], y[i : i + chunk], sub)
        outs.append(a)
        used.append(u)
    return torch.cat(outs), torch.cat(used)


# --- numpy-level API ---------------------------------------------------------------


def _as_array(batch) -> np.ndarray:
    if isinstance(batch, ImageBatch):
        if batch.space is not ColorSpace.RGB or batch.scale is not Scale.UNIT:
            raise ValueError("attacks need an RGB/UNIT batch")
        return batch.data
    return np.asarray(batch)


def run_attack(model: ClassifierHandle, batch, labels, cfg: AttackConfig, targets=None, chunk: int = 500) -> AttackResult:
    """Attack a batch and package the outcome.

    For targeted configs, ``targets`` defaults to the least-likely class of the
    clean image (fixed across iterations).
    """
    x_np = _as_array(batch)
    x = to_nchw(x_np)
    if x_np.dtype == np.float64:
        x = x.double()
    labels = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    if cfg.targeted:
        if targets is None:
            if model is None:
                raise ValueError("targeted attack needs targets or a model to derive least-likely labels")
            targets = least_likely_labels(model, x)
        goal = torch.as_tensor(np.asarray(targets, dtype=np.int64))
    else:
        goal = labels
    x_adv, used = perturb(model, x, goal, cfg, chunk=chunk)
    pred = batched_logits(model, x_adv).argmax(dim=1)
    success = (pred == goal) if cfg.targeted else (pred != labels)
    diff = (x_adv - x).reshape(len(x), -1)
    adv = to_nhwc(x_adv)
    return AttackResult(
        adversarial=ImageBatch(adv, ColorSpace.RGB, Scale.UNIT),
        success=success.numpy(),
        linf_norm=diff.abs().amax(dim=1).numpy() if len(x) else np.zeros(0),
        l2_norm=diff.norm(dim=1).numpy(),
        iterations_used=used.numpy(),
        config=cfg.resolved(),
        targets=goal.numpy() if cfg.targeted else None,
    )


def _checked(cfg: AttackConfig, *kinds):
    if cfg.kind not in kinds:
        raise ValueError(f"config kind {cfg.kind.value} not accepted here")


def fgsm(model, batch, labels, cfg: AttackConfig) -> AttackResult:
    _checked(cfg, AttackKind.FGSM)
    return run_attack(model, batch, labels, cfg)


def iterative_attack(model, batch, labels_or_targets, cfg: AttackConfig, labels=None) -> AttackResult:
    """BIM/ILLC/PGD. For targeted configs ``labels_or_targets`` are targets
    (``None`` means least-likely) and ``labels`` are the true labels."""
    _checked(cfg, AttackKind.ITERATIVE)
    if cfg.targeted:
        if labels is None:
            labels = batched_logits(model, to_nchw(_as_array(batch))).argmax(1).numpy()
        return run_attack(model, batch, labels, cfg, targets=labels_or_targets)
    return run_attack(model, batch, labels_or_targets, cfg)


def ddn(model, batch, labels, cfg: AttackConfig) -> AttackResult:
    _checked(cfg, AttackKind.DDN)
    return run_attack(model, batch, labels, cfg)


def y_channel_attack(model, batch, labels, cfg: AttackConfig) -> AttackResult:
    _checked(cfg, AttackKind.FGSM_Y, AttackKind.PGD_Y)
    if cfg.epsilon <= 0:
        raise ValueError("Y-channel attacks need epsilon > 0")
    return run_attack(model, batch, labels, cfg)
