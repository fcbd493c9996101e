"""ResUpNet: Y-channel restoration with skip features from a frozen residual backbone.

Data path for an RGB image x in [0, 1]:

    Y, Cb, Cr = ycbcr(x)
    Y' = Y + noise                      (Gaussian, train and eval)
    taps = backbone stages at strides 2, 4, 8, 16 (seen on the noisy image)
    h = taps[3]
    h = up(h); h = up(cat(h, taps[2])); h = up(cat(h, taps[1])); h = up(cat(h, taps[0]))
    s = conv(Y')                        (full resolution Y stream)
    Y_out = Y' + head(res(cat(h, s)))
    output = rgb(Y_out, Cb, Cr)

where ``up`` is residual block -> conv -> pixel shuffle x2. There is no
bottleneck: the decoder starts from the deepest tap.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attacks import AttackConfig, perturb
from .colorspace import ColorSpace, ImageBatch, Scale, luma_bounds_t, luma_t
from .models import Arch, ClassifierHandle, state_checksum, to_nchw, to_nhwc

CHECKPOINT_VERSION = "resupnet-v1"
N_TAPS = 4


class ResidualBlock(nn.Module):
    """conv-BN-ReLU-conv-BN plus identity (or 1x1 projection), then ReLU."""

    def __init__(self, cin, cout):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, 1, 1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, 1, 1, bias=False),
            nn.BatchNorm2d(cout),
        )
        self.skip = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1, bias=False)

    def forward(self, x):
        return F.relu(self.body(x) + self.skip(x))


class UpsampleBlock(nn.Module):
    def __init__(self, cin, cout, factor=2):
        super().__init__()
        self.res = ResidualBlock(cin, cin)
        self.expand = nn.Conv2d(cin, cout * factor**2, 3, 1, 1)
        self.shuffle = nn.PixelShuffle(factor)

    def forward(self, x):
        return F.relu(self.shuffle(self.expand(self.res(x))))


@dataclass
class DefenseSpec:
    """Architecture description. ``backbone`` must be a RESNET_MINI handle."""

    backbone: ClassifierHandle | None = field(default=None, repr=False)
    tap_stages: tuple = (0, 1, 2, 3)
    noise_std: float = 0.02
    up_blocks: tuple = ((128, 64), (128, 32), (64, 16), (32, 16))
    upscale_factor_per_block: int = 2
    stream_channels: int = 16
    seed: int = 0

    def describe(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "backbone"}
        d["tap_stages"] = list(self.tap_stages)
        d["up_blocks"] = [list(b) for b in self.up_blocks]
        if self.backbone is not None:
            d["backbone_arch"] = self.backbone.arch.value
            d["backbone_checksum"] = self.backbone.checksum()
        return d


class DefenseError(RuntimeError):
    pass


class ResUpDecoder(nn.Module):
    def __init__(self, spec: DefenseSpec):
        super().__init__()
        f = spec.upscale_factor_per_block
        self.blocks = nn.ModuleList([UpsampleBlock(cin, cout, f) for cin, cout in spec.up_blocks])
        self.y_stream = nn.Sequential(nn.Conv2d(1, spec.stream_channels, 3, 1, 1), nn.ReLU(inplace=True))
        merged = spec.up_blocks[-1][1] + spec.stream_channels
        self.merge = ResidualBlock(merged, merged)
        self.head = nn.Conv2d(merged, 1, 3, 1, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, taps, y_noisy):
        h = taps[-1]
        for i, block in enumerate(self.blocks):
            if i > 0:
                h = torch.cat([h, taps[-1 - i]], dim=1)
            h = block(h)
        h = torch.cat([h, self.y_stream(y_noisy)], dim=1)
        return y_noisy + self.head(self.merge(h))


class DefenseNetwork:
    """Frozen backbone + trainable decoder. Call :func:`defend_batch` to use it."""

    def __init__(self, spec: DefenseSpec, decoder: ResUpDecoder):
        self.spec = spec
        self.backbone = spec.backbone
        self.decoder = decoder
        self.trained = False
        self.metadata: dict = {}

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.decoder.parameters())

    def checksum(self) -> str:
        return state_checksum(self.decoder)

    def taps(self, x):
        feats = self.backbone.module.stage_features(x)
        return [feats[i] for i in self.spec.tap_stages]


def build_defense(spec: DefenseSpec) -> DefenseNetwork:
    bb = spec.backbone
    if bb is None or bb.arch is not Arch.RESNET_MINI or not hasattr(bb.module, "stage_features"):
        raise DefenseError("the defense needs a RESNET_MINI backbone")
    if len(spec.tap_stages) != N_TAPS:
        raise DefenseError(f"exactly {N_TAPS} backbone taps are required")
    if len(spec.up_blocks) != len(spec.tap_stages):
        raise DefenseError("one upsample block per tap is required")
    f = spec.upscale_factor_per_block
    h, w = bb.input_shape[:2]
    with torch.no_grad():
        feats = bb.module.stage_features(torch.zeros(1, 3, h, w))
    if max(spec.tap_stages) >= len(feats):
        raise DefenseError("tap stage index out of range")
    taps = [feats[i] for i in spec.tap_stages]
    # tap k must sit at stride f**(k+1) so the decoder lands back on full resolution
    for k, t in enumerate(taps):
        if t.shape[-2:] != (h // f ** (k + 1), w // f ** (k + 1)):
            raise DefenseError(
                f"tap {k} has spatial size {tuple(t.shape[-2:])}, expected stride {f ** (k + 1)}"
                " to match the upsample block count"
            )
    expected_in = [taps[-1].shape[1]] + [
        spec.up_blocks[i - 1][1] + taps[-1 - i].shape[1] for i in range(1, len(taps))
    ]
    for (cin, _), e in zip(spec.up_blocks, expected_in):
        if cin != e:
            raise DefenseError(f"up block expects {cin} input channels but would receive {e}")
    torch.manual_seed(spec.seed)
    return DefenseNetwork(spec, ResUpDecoder(spec))


def _noise(shape, std, gen):
    return torch.randn(shape, generator=gen) * std


def restore_t(net: DefenseNetwork, x: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Differentiable core: RGB batch + Y noise (UNIT, N x 1 x H x W) -> defended RGB."""
    y = luma_t(x) / 255.0
    x_noisy = x + noise  # same chroma, noisy luma
    with torch.no_grad():
        taps = net.taps(x_noisy)
    y_out = net.decoder(taps, y + noise)
    lo, hi = luma_bounds_t(x)
    dy = torch.maximum(torch.minimum(y_out - y, hi), lo)
    return (x + dy).clamp(0.0, 1.0)


@torch.no_grad()
def defend_t(net: DefenseNetwork, x: torch.Tensor, seed: int = 0, chunk: int = 500) -> torch.Tensor:
    if not net.trained:
        raise DefenseError("defense network has not been trained or loaded")
    net.decoder.eval()
    gen = torch.Generator().manual_seed(int(seed))
    noise = _noise((len(x), 1, *x.shape[2:]), net.spec.noise_std, gen)
    xf = x.float()
    out = torch.cat([restore_t(net, xf[i : i + chunk], noise[i : i + chunk]) for i in range(0, len(x), chunk)])
    return out.to(x.dtype)


def defend_batch(net: DefenseNetwork, batch, seed: int = 0) -> ImageBatch:
    """Restore the Y channel of an RGB/UNIT batch; Cb/Cr pass through untouched."""
    if isinstance(batch, ImageBatch):
        if batch.space is not ColorSpace.RGB or batch.scale is not Scale.UNIT:
            raise ValueError("defend_batch expects an RGB/UNIT batch")
        batch = batch.data
    out = defend_t(net, to_nchw(batch), seed)
    return ImageBatch(to_nhwc(out), ColorSpace.RGB, Scale.UNIT)


class DefendedClassifier(ClassifierHandle):
    """Classifier handle whose logits pass through the defense first (fixed noise seed)."""

    def __init__(self, model: ClassifierHandle, net: DefenseNetwork, seed: int = 0):
        super().__init__(model.arch, model.module, model.n_classes, model.input_shape, dict(model.metadata))
        self.net, self.seed = net, seed

    def logits(self, x):
        return self.module(defend_t(self.net, x, self.seed))


@dataclass
class DefenseRecipe:
    epochs: int = 5
    learning_rate: float = 1e-4
    batch_size: int = 64
    seed: int = 0
    eps_max: float = 0.05
    train_images: int = 10000
    pgd_iters: int = 10
    val_images: int = 256
    val_epsilon: float = 0.02


def sample_training_attack(rng: random.Random, eps_max: float = 0.05, pgd_iters: int = 10, seed: int = 0):
    """Draw one batch's attack: FGSM or PGD with equal odds, epsilon ~ U[0, eps_max]."""
    eps = rng.uniform(0.0, eps_max)
    if rng.random() < 0.5:
        return AttackConfig.fgsm(eps)
    alpha = 2.5 * eps / pgd_iters if eps > 0 else None
    return AttackConfig.pgd(eps, alpha=alpha, n_iters=pgd_iters, seed=seed)


def _adversarial(victim, x, y, cfg):
    if cfg.epsilon == 0:
        return x
    return perturb(victim, x, y, cfg)[0]


def y_mse(net: DefenseNetwork, x_in: torch.Tensor, x_clean: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the defended Y and the clean Y (UNIT scale)."""
    out = restore_t(net, x_in, noise)
    return F.mse_loss(luma_t(out) / 255.0, luma_t(x_clean) / 255.0)


def train_defense(net: DefenseNetwork, dataset, victim: ClassifierHandle, recipe: DefenseRecipe, log=None):
    """Train the decoder to map attacked images back to clean luma. Returns a :class:`DefenseCheckpoint`."""
    if tuple(victim.input_shape) != tuple(net.backbone.input_shape):
        raise DefenseError("victim and backbone disagree on input size")
    x_all, y_all = dataset.split("train")
    x_test, y_test = dataset.split("test")
    if len(x_all) == 0:
        raise DefenseError("empty training set")
    torch.manual_seed(recipe.seed)
    rng = random.Random(recipe.seed)
    gen = torch.Generator().manual_seed(recipe.seed)
    n_train = min(recipe.train_images, len(x_all))
    xt = to_nchw(x_all[:n_train])
    yt = torch.as_tensor(np.asarray(y_all[:n_train], dtype=np.int64))

    # fixed held-out adversarial batch: half FGSM, half PGD at the validation epsilon
    nv = min(recipe.val_images, len(x_test))
    xv = to_nchw(x_test[:nv])
    yv = torch.as_tensor(np.asarray(y_test[:nv], dtype=np.int64))
    half = nv // 2
    xv_adv = torch.cat(
        [
            perturb(victim, xv[:half], yv[:half], AttackConfig.fgsm(recipe.val_epsilon))[0],
            perturb(victim, xv[half:], yv[half:], AttackConfig.pgd(recipe.val_epsilon, seed=recipe.seed))[0],
        ]
    )
    v_noise = _noise((nv, 1, *xv.shape[2:]), net.spec.noise_std, torch.Generator().manual_seed(recipe.seed + 1))

    def validate():
        net.decoder.eval()
        with torch.no_grad():
            return float(y_mse(net, xv_adv, xv, v_noise))

    opt = torch.optim.Adam(net.decoder.parameters(), lr=recipe.learning_rate)
    backbone_before = state_checksum(net.backbone.module)
    val_curve, loss_curve, mix = [validate()], [], {"fgsm": 0, "pgd": 0}
    eps_seen = []
    steps = math.ceil(n_train / recipe.batch_size)
    for epoch in range(recipe.epochs):
        perm = torch.randperm(n_train, generator=gen)
        running = 0.0
        for i in range(steps):
            idx = perm[i * recipe.batch_size : (i + 1) * recipe.batch_size]
            xb, yb = xt[idx], yt[idx]
            cfg = sample_training_attack(rng, recipe.eps_max, recipe.pgd_iters, seed=recipe.seed * 100003 + i)
            mix[cfg.label] += 1
            eps_seen.append(cfg.epsilon)
            xa = _adversarial(victim, xb, yb, cfg)
            net.decoder.train()
            noise = _noise((len(xb), 1, *xb.shape[2:]), net.spec.noise_std, gen)
            loss = y_mse(net, xa, xb, noise)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += loss.item()
        loss_curve.append(running / steps)
        val_curve.append(validate())
        if log:
            log(f"[defense] epoch {epoch + 1}/{recipe.epochs} train_mse={loss_curve[-1]:.3e} val_mse={val_curve[-1]:.3e}")
    if state_checksum(net.backbone.module) != backbone_before:  # pragma: no cover - invariant
        raise DefenseError("backbone parameters changed during defense training")
    net.decoder.eval()
    net.trained = True
    net.metadata = {
        "epochs": recipe.epochs,
        "recipe": asdict(recipe),
        "loss_curve": loss_curve,
        "val_curve": val_curve,
        "attack_mix": mix,
        "epsilon_range": [min(eps_seen, default=0.0), max(eps_seen, default=0.0)],
    }
    return DefenseCheckpoint(net)


@dataclass
class DefenseCheckpoint:
    net: DefenseNetwork

    @property
    def metadata(self) -> dict:
        return self.net.metadata

    def checksum(self) -> str:
        return self.net.checksum()

    def save(self, path) -> Path:
        path = Path(path).with_suffix("")
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.net.decoder.state_dict(), path.with_suffix(".pt"))
        meta = {
            "version": CHECKPOINT_VERSION,
            "spec": self.net.spec.describe(),
            "metadata": self.net.metadata,
            "checksum": self.checksum(),
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path, backbone: ClassifierHandle) -> "DefenseCheckpoint":
        path = Path(path).with_suffix("")
        if not path.with_suffix(".pt").exists() or not path.with_suffix(".json").exists():
            raise FileNotFoundError(f"defense checkpoint {path}.pt/.json not found")
        meta = json.loads(path.with_suffix(".json").read_text())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise DefenseError(f"unsupported checkpoint version {meta.get('version')!r}")
        s = meta["spec"]
        if s.get("backbone_checksum") not in (None, backbone.checksum()):
            raise DefenseError("checkpoint was trained on a different backbone")
        spec = DefenseSpec(
            backbone=backbone,
            tap_stages=tuple(s["tap_stages"]),
            noise_std=s["noise_std"],
            up_blocks=tuple(tuple(b) for b in s["up_blocks"]),
            upscale_factor_per_block=s["upscale_factor_per_block"],
            stream_channels=s["stream_channels"],
            seed=s["seed"],
        )
        net = build_defense(spec)
        net.decoder.load_state_dict(torch.load(path.with_suffix(".pt"), weights_only=True))
        net.decoder.eval()
        net.trained = True
        net.metadata = meta["metadata"]
        return cls(net)
