"""Desk-scale classifiers: scale-equivariant stacks and a plain-CNN control.

Architecture shared by all variants: three 7x7 convolution blocks with
ReLU and 2x2 max pooling, then a two-layer dense head.  The "vector"
variant keeps the scale axis through all three blocks and projects it away
once before the head; the "scalar" variant projects after every block, so
each block lifts a plane signal again.  The "cnn" control replaces the
scale convolutions with plain ones at widths rescaled to match the vector
parameter count.

No batch norm and no dropout: the models stay small enough to train on a
CPU in minutes and the scale structure stays analysable.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .basis import BasisSpec, SteerableBasis, build_basis
from .container import load_tensors, save_tensors
from .group import DEFAULT_BASE, ScaleGrid
from .tensorops import PAD_ZERO


@dataclass(frozen=True)
class ClassifierConfig:
    variant: str = "vector"  # vector | scalar | cnn
    widths: tuple = (16, 32, 48)
    n_scales: int = 4
    base: float = DEFAULT_BASE
    k_s: int = 1
    n_basis: int = 6
    sigma0: float = 1.5
    filter_size: int = 7
    hidden: int = 256
    classes: int = 10
    padding_mode: str = PAD_ZERO
    head_pool: str = "window"  # window | global
    resolution: int = 28
    precision: str = "f32"  # f32 | f64

    def __post_init__(self):
        if self.variant not in ("vector", "scalar", "cnn"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.head_pool not in ("window", "global"):
            raise ValueError(f"unknown head_pool {self.head_pool!r}")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if len(self.widths) != 3:
            raise ValueError("expected three block widths")
        if self.variant == "scalar" and self.k_s != 1:
            raise ValueError("scalar variant re-lifts plane signals; scale interaction needs vector")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


def _head_features(cfg: ClassifierConfig) -> int:
    if cfg.head_pool == "global":
        return cfg.widths[2]
    spatial = cfg.resolution
    for _ in range(3):  # one 2x2 pool per block
        spatial //= 2
    return cfg.widths[2] * spatial * spatial


class Classifier:
    """Parameter container plus forward pass; training lives in train()."""

    def __init__(self, cfg: ClassifierConfig, seed: int = 0):
        self.cfg = cfg
        self.norm_mean = 0.0
        self.norm_std = 1.0
        self.basis: SteerableBasis | None = None
        if cfg.variant != "cnn":
            spec = BasisSpec(cfg.n_basis, cfg.filter_size, ScaleGrid(cfg.base, cfg.n_scales), cfg.sigma0)
            self.basis = build_basis(spec)
        rng = np.random.default_rng((seed, 0xC1A55))
        dt = cfg.dtype
        c1, c2, c3 = cfg.widths
        p: dict[str, ad.Node] = {}
        if cfg.variant == "cnn":
            v = cfg.filter_size
            p["conv1.w"] = ad.leaf(ad.uniform_fan_in(rng, (c1, 1, v, v), 1 * v * v, dt))
            p["conv2.w"] = ad.leaf(ad.uniform_fan_in(rng, (c2, c1, v, v), c1 * v * v, dt))
            p["conv3.w"] = ad.leaf(ad.uniform_fan_in(rng, (c3, c2, v, v), c2 * v * v, dt))
        else:
            nb = cfg.n_basis
            k2 = cfg.k_s if cfg.variant == "vector" else 1
            p["conv1.w"] = ad.leaf(ad.uniform_fan_in(rng, (c1, 1, 1, nb), 1 * nb, dt))
            p["conv2.w"] = ad.leaf(ad.uniform_fan_in(rng, (c2, c1, k2, nb), c1 * k2 * nb, dt))
            p["conv3.w"] = ad.leaf(ad.uniform_fan_in(rng, (c3, c2, k2, nb), c2 * k2 * nb, dt))
        for i, c in enumerate((c1, c2, c3), start=1):
            p[f"conv{i}.b"] = ad.leaf(np.zeros(c, dtype=dt))
        feats = _head_features(cfg)
        p["fc1.w"] = ad.leaf(ad.uniform_fan_in(rng, (feats, cfg.hidden), feats, dt))
        p["fc1.b"] = ad.leaf(np.zeros(cfg.hidden, dtype=dt))
        p["fc2.w"] = ad.leaf(ad.uniform_fan_in(rng, (cfg.hidden, cfg.classes), cfg.hidden, dt))
        p["fc2.b"] = ad.leaf(np.zeros(cfg.classes, dtype=dt))
        self.params = p

    def param_nodes(self):
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def _block(self, x: ad.Node, index: int, lifted: bool) -> ad.Node:
        cfg = self.cfg
        w = self.params[f"conv{index}.w"]
        b = self.params[f"conv{index}.b"]
        if cfg.variant == "cnn":
            x = ad.conv2d(x, w, cfg.padding_mode)
            x = ad.add_channel_bias(x, b)
        elif not lifted:
            x = ad.scale_conv_th(x, w, b, self.basis, cfg.padding_mode)
        else:
            x = ad.scale_conv_hh(x, w, b, self.basis, cfg.padding_mode)
        x = ad.relu(x)
        if cfg.variant == "scalar":
            x = ad.max_axis(x, 2)  # project the scale axis away after every block
        if cfg.variant == "vector" and index == 3:
            x = ad.max_axis(x, 2)  # single projection before the head
        return x

    def forward(self, images: np.ndarray) -> ad.Node:
        cfg = self.cfg
        xval = (images.astype(cfg.dtype) / 255.0 - self.norm_mean) / self.norm_std
        x = ad.constant(xval.astype(cfg.dtype))
        for index in (1, 2, 3):
            lifted = cfg.variant == "vector" and index > 1
            x = self._block(x, index, lifted)
            last = index == 3
            if cfg.head_pool == "window" or not last:
                x = ad.max_pool2d(x, 2)
        if cfg.head_pool == "global":
            x = ad.max_axis(x, -1)
            x = ad.max_axis(x, -1)
        n = x.value.shape[0]
        x = ad.reshape(x, (n, -1))
        x = ad.add_row_bias(ad.matmul(x, self.params["fc1.w"]), self.params["fc1.b"])
        x = ad.relu(x)
        return ad.add_row_bias(ad.matmul(x, self.params["fc2.w"]), self.params["fc2.b"])

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: node.value.copy() for name, node in self.params.items()}
        state["norm.mean"] = np.array([self.norm_mean], dtype="<f8")
        state["norm.std"] = np.array([self.norm_std], dtype="<f8")
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, node in self.params.items():
            value = state[name].astype(node.value.dtype)
            if value.shape != node.value.shape:
                raise ValueError(f"{name}: stored shape {value.shape} != model shape {node.value.shape}")
            node.value = value
        self.norm_mean = float(state["norm.mean"][0])
        self.norm_std = float(state["norm.std"][0])


def matched_cnn_config(cfg: ClassifierConfig) -> ClassifierConfig:
    """CNN control widths rescaled so parameter counts match the vector model."""
    target = Classifier(replace(cfg, variant="vector")).param_count()

    def cnn_params(widths):
        c1, c2, c3 = widths
        v = cfg.filter_size
        conv = c1 * 1 * v * v + c2 * c1 * v * v + c3 * c2 * v * v + c1 + c2 + c3
        probe = replace(cfg, variant="cnn", widths=(c1, c2, c3))
        feats = _head_features(probe)
        head = feats * cfg.hidden + cfg.hidden + cfg.hidden * cfg.classes + cfg.classes
        return conv + head

    best = None
    for rho in np.linspace(0.2, 1.2, 401):
        widths = tuple(max(1, int(round(w * rho))) for w in cfg.widths)
        gap = abs(cnn_params(widths) - target)
        if best is None or gap < best[0]:
            best = (gap, widths)
    return replace(cfg, variant="cnn", widths=best[1])


@dataclass
class TrainConfig:
    epochs: int = 20
    batch: int = 128
    lr: float = 0.01
    decay_epochs: tuple = (20, 40)
    decay_factor: float = 0.1
    optimizer: str = "adam"  # adam | sgd
    momentum: float = 0.9
    nesterov: bool = False
    weight_decay: float = 0.0
    seed: int = 0
    log: list = field(default_factory=list)


def evaluate(model: Classifier, images: np.ndarray, labels: np.ndarray, batch: int = 256):
    """Mean loss and accuracy over one split."""
    total_loss = 0.0
    correct = 0
    for lo in range(0, len(images), batch):
        hi = min(lo + batch, len(images))
        logits = model.forward(images[lo:hi])
        loss = ad.softmax_cross_entropy(logits, labels[lo:hi])
        total_loss += float(loss.value) * (hi - lo)
        correct += int((logits.value.argmax(axis=1) == labels[lo:hi]).sum())
    n = len(images)
    return total_loss / n, correct / n


def train(model: Classifier, dataset, tcfg: TrainConfig):
    """Train on the dataset's train split; returns per-epoch metric rows.

    Rows are dicts with epoch, split, loss, accuracy, lr, wall_seconds, and
    the run is deterministic given (config, seed, thread count).
    """
    x_train, y_train = dataset.split("train")
    x_val, y_val = dataset.split("val")
    flat = x_train.astype(np.float64) / 255.0
    model.norm_mean = float(flat.mean())
    model.norm_std = float(flat.std()) or 1.0

    params = model.param_nodes()
    if tcfg.optimizer == "adam":
        opt = ad.Adam(params, tcfg.lr, weight_decay=tcfg.weight_decay)
    elif tcfg.optimizer == "sgd":
        opt = ad.SGD(params, tcfg.lr, momentum=tcfg.momentum, nesterov=tcfg.nesterov,
                     weight_decay=tcfg.weight_decay)
    else:
        raise ValueError(f"unknown optimizer {tcfg.optimizer!r}")

    rows = []
    start = time.perf_counter()
    n = len(x_train)
    for epoch in range(tcfg.epochs):
        opt.lr = ad.step_decay_lr(tcfg.lr, epoch, tcfg.decay_epochs, tcfg.decay_factor)
        order = np.random.default_rng((tcfg.seed, epoch)).permutation(n)
        epoch_loss = 0.0
        epoch_hits = 0
        for lo in range(0, n, tcfg.batch):
            idx = order[lo : lo + tcfg.batch]
            logits = model.forward(x_train[idx])
            loss = ad.softmax_cross_entropy(logits, y_train[idx])
            ad.zero_grads(params)
            ad.backward(loss, params)
            opt.step()
            epoch_loss += float(loss.value) * len(idx)
            epoch_hits += int((logits.value.argmax(axis=1) == y_train[idx]).sum())
        rows.append({
            "epoch": epoch, "split": "train", "loss": epoch_loss / n,
            "accuracy": epoch_hits / n, "lr": opt.lr,
            "wall_seconds": time.perf_counter() - start,
        })
        val_loss, val_acc = evaluate(model, x_val, y_val)
        rows.append({
            "epoch": epoch, "split": "val", "loss": val_loss, "accuracy": val_acc,
            "lr": opt.lr, "wall_seconds": time.perf_counter() - start,
        })
    return rows


METRICS_HEADER = "epoch,split,loss,accuracy,lr,wall_seconds"


def metrics_csv(rows) -> str:
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(f"{r['epoch']},{r['split']},{r['loss']:.6f},{r['accuracy']:.6f},"
                     f"{r['lr']:.6g},{r['wall_seconds']:.3f}")
    return "\n".join(lines) + "\n"


_CONFIG_SCALARS = ("n_scales", "k_s", "n_basis", "filter_size", "hidden", "classes", "resolution")


def save_classifier(path, model: Classifier) -> None:
    tensors = {"state." + k: v for k, v in model.state_dict().items()}
    cfg = model.cfg
    tensors["cfg.variant"] = np.frombuffer(cfg.variant.encode().ljust(8, b"\0"), dtype="u1").copy()
    tensors["cfg.widths"] = np.array(cfg.widths, dtype="<i8")
    tensors["cfg.scalars"] = np.array([getattr(cfg, k) for k in _CONFIG_SCALARS], dtype="<i8")
    tensors["cfg.floats"] = np.array([cfg.base, cfg.sigma0], dtype="<f8")
    tensors["cfg.padding"] = np.frombuffer(cfg.padding_mode.encode().ljust(8, b"\0"), dtype="u1").copy()
    tensors["cfg.head_pool"] = np.frombuffer(cfg.head_pool.encode().ljust(8, b"\0"), dtype="u1").copy()
    tensors["cfg.precision"] = np.frombuffer(cfg.precision.encode().ljust(8, b"\0"), dtype="u1").copy()
    save_tensors(path, tensors)


def load_classifier(path) -> Classifier:
    t = load_tensors(path)

    def text(name):
        return bytes(t[name]).rstrip(b"\0").decode()

    scalars = dict(zip(_CONFIG_SCALARS, (int(x) for x in t["cfg.scalars"])))
    cfg = ClassifierConfig(
        variant=text("cfg.variant"),
        widths=tuple(int(w) for w in t["cfg.widths"]),
        base=float(t["cfg.floats"][0]),
        sigma0=float(t["cfg.floats"][1]),
        padding_mode=text("cfg.padding"),
        head_pool=text("cfg.head_pool"),
        precision=text("cfg.precision"),
        **scalars,
    )
    model = Classifier(cfg)
    model.load_state({k[len("state."):]: v for k, v in t.items() if k.startswith("state.")})
    return model
