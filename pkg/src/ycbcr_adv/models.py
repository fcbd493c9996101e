"""Desk-scale image classifiers with input-gradient access.

Every network takes NCHW RGB input in [0, 1] and normalizes internally, so
attack budgets are always expressed on raw pixels.
"""

from __future__ import annotations

import enum
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .colorspace import ColorSpace, ColorSpaceError, ImageBatch, Scale


class Arch(enum.Enum):
    VGG_MINI = "vgg_mini"
    RESNET_MINI = "resnet_mini"
    DENSENET_MINI = "densenet_mini"
    CUSTOM = "custom"


class Normalize(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


def conv_bn(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class VGGMini(nn.Module):
    """Plain conv stack: three pairs of 3x3 convs, each pair followed by max pooling."""

    def __init__(self, n_classes=10, widths=(16, 32, 64), mean=(0.5,) * 3, std=(0.25,) * 3):
        super().__init__()
        self.norm = Normalize(mean, std)
        layers, cin = [], 3
        for w in widths:
            layers += [conv_bn(cin, w), conv_bn(w, w), nn.MaxPool2d(2)]
            cin = w
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, n_classes)

    def forward(self, x):
        h = self.features(self.norm(x))
        return self.fc(F.adaptive_avg_pool2d(h, 1).flatten(1))


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetMini(nn.Module):
    """Residual classifier with four stride-2 stages.

    ``stage_features`` exposes the four stage outputs (strides 2, 4, 8, 16),
    which the restoration network taps as skip connections.
    """

    def __init__(self, n_classes=10, widths=(16, 32, 64, 128), mean=(0.5,) * 3, std=(0.25,) * 3):
        super().__init__()
        self.norm = Normalize(mean, std)
        self.stem = conv_bn(3, widths[0])
        stages, cin = [], widths[0]
        for w in widths:
            stages.append(nn.Sequential(BasicBlock(cin, w, stride=2), BasicBlock(w, w)))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.widths = tuple(widths)
        self.fc = nn.Linear(cin, n_classes)

    def stage_features(self, x):
        h = self.stem(self.norm(x))
        feats = []
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats

    def forward(self, x):
        h = self.stage_features(x)[-1]
        return self.fc(F.adaptive_avg_pool2d(h, 1).flatten(1))


class DenseBlock(nn.Module):
    def __init__(self, cin, growth, n_layers):
        super().__init__()
        self.layers = nn.ModuleList()
        for i in range(n_layers):
            c = cin + i * growth
            self.layers.append(
                nn.Sequential(nn.BatchNorm2d(c), nn.ReLU(inplace=True), nn.Conv2d(c, growth, 3, 1, 1, bias=False))
            )
        self.out_channels = cin + n_layers * growth

    def forward(self, x):
        feats = [x]
        for layer in self.layers:
            feats.append(layer(torch.cat(feats, 1)))
        return torch.cat(feats, 1)


class DenseNetMini(nn.Module):
    """Stride-2 stem, then three dense blocks joined by 1x1-conv + average-pool transitions."""

    def __init__(self, n_classes=10, growth=12, n_layers=3, mean=(0.5,) * 3, std=(0.25,) * 3):
        super().__init__()
        self.norm = Normalize(mean, std)
        self.stem = nn.Conv2d(3, 2 * growth, 3, 2, 1, bias=False)
        blocks, c = [], 2 * growth
        for i in range(3):
            block = DenseBlock(c, growth, n_layers)
            blocks.append(block)
            c = block.out_channels
            if i < 2:
                blocks.append(
                    nn.Sequential(
                        nn.BatchNorm2d(c), nn.ReLU(inplace=True), nn.Conv2d(c, c // 2, 1, bias=False), nn.AvgPool2d(2)
                    )
                )
                c //= 2
        self.blocks = nn.Sequential(*blocks)
        self.bn = nn.BatchNorm2d(c)
        self.fc = nn.Linear(c, n_classes)

    def forward(self, x):
        h = self.blocks(self.stem(self.norm(x)))
        h = F.relu(self.bn(h))
        return self.fc(F.adaptive_avg_pool2d(h, 1).flatten(1))


_BUILDERS = {Arch.VGG_MINI: VGGMini, Arch.RESNET_MINI: ResNetMini, Arch.DENSENET_MINI: DenseNetMini}


def build_network(arch: Arch | str, n_classes: int = 10, mean=(0.5,) * 3, std=(0.25,) * 3) -> nn.Module:
    arch = Arch(arch)
    if arch not in _BUILDERS:
        raise ValueError(f"cannot build {arch}")
    return _BUILDERS[arch](n_classes=n_classes, mean=mean, std=std)


@dataclass
class TrainRecipe:
    epochs: int = 8
    learning_rate: float = 0.05
    batch_size: int = 128
    seed: int = 0
    weight_decay: float = 5e-4
    dataset: str = "shapes10"
    train_split: str = "train"
    test_split: str = "test"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ClassifierHandle:
    """A classifier plus its metadata. The wrapped module is kept in eval mode."""

    arch: Arch
    module: nn.Module
    n_classes: int
    input_shape: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)

    @classmethod
    def from_module(cls, module: nn.Module, n_classes: int, input_shape: tuple, arch=Arch.CUSTOM, **metadata):
        return cls(Arch(arch), module, n_classes, tuple(input_shape), dict(metadata))

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """Raw logits for an NCHW UNIT tensor.

        The input is cast to the weights' dtype, so float64 attack iterates work
        with float32 models (gradients come back in float64).
        """
        p = next(self.module.parameters(), None)
        if p is not None and x.dtype != p.dtype:
            x = x.to(p.dtype)
        return self.module(x)

    def checksum(self) -> str:
        return state_checksum(self.module)


def state_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def to_nchw(x: np.ndarray) -> torch.Tensor:
    """NHWC array to NCHW tensor; float64 stays float64, anything else becomes float32."""
    x = np.asarray(x)
    dtype = np.float64 if x.dtype == np.float64 else np.float32
    return torch.from_numpy(np.ascontiguousarray(x.astype(dtype, copy=False).transpose(0, 3, 1, 2)))


def to_nhwc(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().numpy().transpose(0, 2, 3, 1)


def _check_rgb_unit(model: ClassifierHandle, batch) -> np.ndarray:
    if isinstance(batch, ImageBatch):
        if batch.space is not ColorSpace.RGB or batch.scale is not Scale.UNIT:
            raise ColorSpaceError("classifier input must be an RGB/UNIT batch")
        batch = batch.data
    batch = np.asarray(batch)
    if tuple(batch.shape[1:]) != tuple(model.input_shape):
        raise ValueError(f"expected images of shape {model.input_shape}, got {batch.shape[1:]}")
    return batch


@torch.no_grad()
def batched_logits(model: ClassifierHandle, x: torch.Tensor, chunk: int = 500) -> torch.Tensor:
    return torch.cat([model.logits(x[i : i + chunk]) for i in range(0, len(x), chunk)])


def predict_batch(model: ClassifierHandle, batch) -> tuple[np.ndarray, np.ndarray]:
    """Labels and softmax probabilities for an RGB/UNIT batch."""
    x = to_nchw(_check_rgb_unit(model, batch))
    probs = torch.softmax(batched_logits(model, x).double(), dim=1).numpy()
    return probs.argmax(axis=1), probs


def loss_gradient_t(model: ClassifierHandle, x: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Gradient of the summed cross-entropy w.r.t. ``x`` and the logits at ``x``.

    Summing (not averaging) keeps each image's gradient independent of batch size.
    """
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        logits = model.logits(x)
        loss = F.cross_entropy(logits, labels, reduction="sum")
        (grad,) = torch.autograd.grad(loss, x)
    return grad, logits.detach()


def input_gradient(model: ClassifierHandle, batch, labels, targeted: bool = False) -> np.ndarray:
    """Gradient of the cross-entropy loss w.r.t. the input pixels, NHWC.

    ``labels`` are the true labels, or the target labels when ``targeted``; the
    returned value is the plain loss gradient either way, and targeted callers
    descend it.
    """
    x = _check_rgb_unit(model, batch)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise ValueError("need exactly one label per image")
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise ValueError(f"labels must lie in [0, {model.n_classes})")
    xt = to_nchw(x)
    if x.dtype == np.float64:
        xt = xt.double()
    grad, _ = loss_gradient_t(model, xt, torch.from_numpy(labels))
    return to_nhwc(grad)


def accuracy(model: ClassifierHandle, x: np.ndarray, y: np.ndarray) -> float:
    pred, _ = predict_batch(model, x)
    return float((pred == np.asarray(y)).mean())


def _augment(xb: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    # random horizontal flip + up to 2px translation with reflection padding
    n = xb.shape[0]
    flip = torch.rand(n, generator=gen) < 0.5
    xb = torch.where(flip.view(-1, 1, 1, 1), xb.flip(3), xb)
    padded = F.pad(xb, (2, 2, 2, 2), mode="reflect")
    dx, dy = torch.randint(0, 5, (2,), generator=gen).tolist()
    return padded[:, :, dy : dy + xb.shape[2], dx : dx + xb.shape[3]]


def train_classifier(arch: Arch | str, recipe: TrainRecipe, dataset, log=None) -> ClassifierHandle:
    """Train ``arch`` on ``dataset`` (a :class:`~ycbcr_adv.data.Dataset`) with SGD + one-cycle schedule."""
    x_train, y_train = dataset.split(recipe.train_split)
    x_test, y_test = dataset.split(recipe.test_split)
    if len(x_train) == 0:
        raise ValueError("cannot train on an empty dataset")
    torch.manual_seed(recipe.seed)
    gen = torch.Generator().manual_seed(recipe.seed)
    mean = tuple(float(m) for m in x_train.reshape(-1, 3).mean(0))
    std = tuple(float(s) for s in x_train.reshape(-1, 3).std(0))
    net = build_network(arch, dataset.n_classes, mean=mean, std=std)
    xt, yt = to_nchw(x_train), torch.from_numpy(np.asarray(y_train, dtype=np.int64))
    steps_per_epoch = int(np.ceil(len(xt) / recipe.batch_size))
    if recipe.epochs > 0:
        opt = torch.optim.SGD(
            net.parameters(), lr=recipe.learning_rate, momentum=0.9, nesterov=True, weight_decay=recipe.weight_decay
        )
        total_steps = recipe.epochs * steps_per_epoch
        # one-cycle needs at least two warm-up steps; tiny runs keep a constant rate
        if total_steps >= 8:
            sched = torch.optim.lr_scheduler.OneCycleLR(
                opt, max_lr=recipe.learning_rate, total_steps=total_steps, pct_start=0.25
            )
        else:
            sched = torch.optim.lr_scheduler.ConstantLR(opt, factor=1.0)
    history = []
    for epoch in range(recipe.epochs):
        net.train()
        perm = torch.randperm(len(xt), generator=gen)
        total, correct, loss_sum = 0, 0, 0.0
        for i in range(steps_per_epoch):
            idx = perm[i * recipe.batch_size : (i + 1) * recipe.batch_size]
            xb, yb = _augment(xt[idx], gen), yt[idx]
            logits = net(xb)
            loss = F.cross_entropy(logits, yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            loss_sum += loss.item() * len(idx)
            correct += (logits.argmax(1) == yb).sum().item()
            total += len(idx)
        history.append({"epoch": epoch + 1, "loss": loss_sum / total, "train_acc_running": correct / total})
        if log:
            log(f"[{Arch(arch).value}] epoch {epoch + 1}/{recipe.epochs} loss={loss_sum / total:.4f} acc={correct / total:.4f}")
    handle = ClassifierHandle(Arch(arch), net, dataset.n_classes, dataset.input_shape)
    handle.metadata.update(
        arch=Arch(arch).value,
        seed=recipe.seed,
        epochs=recipe.epochs,
        recipe=asdict(recipe),
        dataset=dataset.name,
        train_acc=accuracy(handle, x_train[:5000], y_train[:5000]),
        test_acc=accuracy(handle, x_test, y_test),
        history=history,
    )
    return handle


def save_classifier(model: ClassifierHandle, path: str | Path) -> Path:
    """Write ``<path>.pt`` (state dict) and ``<path>.json`` (metadata sidecar)."""
    path = Path(path).with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.module.state_dict(), path.with_suffix(".pt"))
    meta = dict(model.metadata)
    meta.update(
        arch=model.arch.value,
        n_classes=model.n_classes,
        input_shape=list(model.input_shape),
        norm_mean=model.module.norm.mean.flatten().tolist(),
        norm_std=model.module.norm.std.flatten().tolist(),
        checksum=model.checksum(),
    )
    meta.setdefault("created_at", time.strftime("%Y-%m-%dT%H:%M:%S"))
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_classifier(path: str | Path) -> ClassifierHandle:
    path = Path(path).with_suffix("")
    if not path.with_suffix(".pt").exists() or not path.with_suffix(".json").exists():
        raise FileNotFoundError(f"classifier checkpoint {path}.pt/.json not found")
    meta = json.loads(path.with_suffix(".json").read_text())
    net = build_network(meta["arch"], meta["n_classes"], mean=meta["norm_mean"], std=meta["norm_std"])
    net.load_state_dict(torch.load(path.with_suffix(".pt"), weights_only=True))
    return ClassifierHandle(Arch(meta["arch"]), net, meta["n_classes"], tuple(meta["input_shape"]), meta)
