"""Small CNN grade classifier with freeze-then-unfreeze fine-tuning and LoRA.

The backbone is four conv stages (3x3 conv, instance norm, ReLU, 2x2 max
pool) followed by global average pooling; the head is dense-ReLU-dense to
five logits.  Backbone stages are the unit of freezing: ``stage0`` is the
first layer and ``stage3`` the last.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .imaging import GrayImage
from .nngraph import Adam, ShapeError, Tape, Tensor, load_checkpoint, ops, save_checkpoint

log = logging.getLogger(__name__)

N_CLASSES = 5
PAPER_UNFREEZE_LAST = 15  # layer count quoted for the full-scale backbones


class ConfigurationError(ValueError):
    pass


class TrainingError(ValueError):
    pass


@dataclass
class LoraAdapter:
    """Low-rank update ``scale * B @ A`` added to a frozen dense weight."""

    A: Tensor
    B: Tensor
    rank: int
    scale: float
    base_was_frozen: bool = False

    def parameter_count(self) -> int:
        return self.A.data.size + self.B.data.size


@dataclass(frozen=True)
class FreezePolicy:
    unfreeze_last_k: int = 1


@dataclass(frozen=True)
class TrainProtocol:
    stage1_epochs: int = 3
    stage2_epochs: int = 7
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be at least 1")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigurationError("epoch counts must be non-negative")


class Classifier:
    def __init__(self, input_size: int = 32, channels: Sequence[int] = (16, 32, 64, 128), hidden: int = 64,
                 n_classes: int = N_CLASSES, seed: int = 0, dtype=np.float32):
        if input_size % (2 ** len(channels)):
            raise ConfigurationError(f"input_size {input_size} must be divisible by {2 ** len(channels)}")
        self.input_size = input_size
        self.channels = tuple(channels)
        self.hidden = hidden
        self.n_classes = n_classes
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()
        self.lora: dict[str, LoraAdapter] = {}
        self.head_frozen = False
        rng = np.random.default_rng(seed)
        cin = 1
        for i, cout in enumerate(self.channels):
            self._add(f"stage{i}.conv.w", rng.normal(0, np.sqrt(2.0 / (9 * cin)), (cout, cin, 3, 3)))
            self._add(f"stage{i}.norm.gamma", np.ones(cout))
            self._add(f"stage{i}.norm.beta", np.zeros(cout))
            cin = cout
        self.reset_head(seed)

    # -- structure -----------------------------------------------------------

    def _add(self, name: str, value) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)

    def reset_head(self, seed: int = 0) -> None:
        rng = np.random.default_rng([seed, 7])
        feat = self.channels[-1]
        self._add("head.fc1.w", rng.normal(0, np.sqrt(2.0 / feat), (self.hidden, feat)))
        self._add("head.fc1.b", np.zeros(self.hidden))
        self._add("head.fc2.w", rng.normal(0, np.sqrt(1.0 / self.hidden), (self.n_classes, self.hidden)))
        self._add("head.fc2.b", np.zeros(self.n_classes))

    @property
    def backbone_layers(self) -> list[str]:
        return [f"stage{i}" for i in range(len(self.channels))]

    @property
    def layers(self) -> list[str]:
        return self.backbone_layers + ["head.fc1", "head.fc2"]

    def layer_params(self, layer: str) -> list[str]:
        return [k for k in self.params if k.startswith(layer + ".")]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values()) + sum(a.parameter_count() for a in self.lora.values())

    def trainable(self) -> dict[str, Tensor]:
        out = {k: p for k, p in self.params.items() if k not in self.frozen}
        for layer, ad in self.lora.items():
            out[f"lora.{layer}.A"] = ad.A
            out[f"lora.{layer}.B"] = ad.B
        return out

    def set_frozen(self, names: Iterable[str]) -> None:
        self.frozen = set(names)
        for k, p in self.params.items():
            p.requires_grad = k not in self.frozen

    # -- forward ---------------------------------------------------------------

    def _dense(self, layer: str, h: Tensor) -> Tensor:
        out = ops.dense(h, self.params[f"{layer}.w"], self.params[f"{layer}.b"])
        ad = self.lora.get(layer)
        if ad is not None:
            low = ops.dense(ops.dense(h, ad.A), ad.B)
            out = ops.add(out, ops.scale(low, ad.scale))
        return out

    def activation(self, x: Tensor, layer: int) -> Tensor:
        """Post-ReLU, pre-pool feature map of backbone stage ``layer``."""
        if not 0 <= layer < len(self.channels):
            raise ConfigurationError(f"layer index {layer} outside 0..{len(self.channels) - 1}")
        h = x
        for i in range(layer + 1):
            if i:
                h = ops.max_pool2d(h, 2)
            p = self.params
            h = ops.conv2d(h, p[f"stage{i}.conv.w"], pad=1)
            h = ops.relu(ops.instance_norm(h, p[f"stage{i}.norm.gamma"], p[f"stage{i}.norm.beta"]))
        return h

    def logits_from(self, layer: int, act: Tensor) -> Tensor:
        """Finish the forward pass from a stage ``layer`` activation."""
        h = ops.max_pool2d(act, 2)
        for i in range(layer + 1, len(self.channels)):
            p = self.params
            h = ops.conv2d(h, p[f"stage{i}.conv.w"], pad=1)
            h = ops.max_pool2d(ops.relu(ops.instance_norm(h, p[f"stage{i}.norm.gamma"], p[f"stage{i}.norm.beta"])), 2)
        h = ops.global_avg_pool(h)
        h = ops.relu(self._dense("head.fc1", h))
        return self._dense("head.fc2", h)

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1:] != (1, self.input_size, self.input_size):
            raise ShapeError(f"classifier expects (N, 1, {self.input_size}, {self.input_size}), got {x.shape}")
        last = len(self.channels) - 1
        return self.logits_from(last, self.activation(x, last))

    def prepare(self, images) -> np.ndarray:
        """Stack GrayImages (or an (N, H, W) array) into centred network input."""
        if isinstance(images, np.ndarray):
            arr = images
        else:
            arr = np.stack([im.pixels if isinstance(im, GrayImage) else np.asarray(im) for im in images])
        if arr.ndim == 3:
            arr = arr[:, None]
        return (arr - 0.5).astype(self.dtype)

    def predict_proba(self, images, batch_size: int = 64) -> np.ndarray:
        x = self.prepare(images)
        out = [ops.softmax(self.forward(Tensor(x[i:i + batch_size])).data.astype(np.float64))
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.n_classes))

    # -- persistence -------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.params.items()}
        for layer, ad in self.lora.items():
            state[f"lora.{layer}.A"] = ad.A.data.copy()
            state[f"lora.{layer}.B"] = ad.B.data.copy()
            state[f"lora.{layer}.scale"] = np.array([ad.scale], dtype=np.float64)
        state["meta.config"] = np.array([self.input_size, self.hidden, self.n_classes, *self.channels], dtype=np.int64)
        return state

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    @classmethod
    def load(cls, path) -> "Classifier":
        state = load_checkpoint(path)
        if "meta.config" not in state:
            raise ConfigurationError(f"{path} is not a classifier checkpoint")
        size, hidden, n_classes, *channels = (int(v) for v in state.pop("meta.config"))
        model = cls(size, channels, hidden, n_classes, dtype=state["head.fc2.w"].dtype)
        for k in list(model.params):
            if k not in state:
                raise ConfigurationError(f"{path}: missing parameter {k}")
            model.params[k].data = state.pop(k)
        layers = {k[len("lora."):].rsplit(".", 1)[0] for k in state if k.startswith("lora.")}
        for layer in sorted(layers):
            A, B = state[f"lora.{layer}.A"], state[f"lora.{layer}.B"]
            model.lora[layer] = LoraAdapter(Tensor(A, requires_grad=True), Tensor(B, requires_grad=True),
                                            A.shape[0], float(state[f"lora.{layer}.scale"][0]))
            model.frozen |= set(model.layer_params(layer))
        model.set_frozen(model.frozen)
        return model


def predict(model: Classifier, img: GrayImage) -> np.ndarray:
    """Class probabilities for one image at the model's input size."""
    if img.width != model.input_size or img.height != model.input_size:
        raise ShapeError(f"image is {img.width}x{img.height}, model expects {model.input_size}x{model.input_size}")
    return model.predict_proba([img])[0]


def layer_checksums(model: Classifier) -> dict[str, str]:
    """sha256 of each layer's parameter bytes, for freeze audits."""
    out = {}
    for layer in model.layers:
        h = hashlib.sha256()
        for k in model.layer_params(layer):
            h.update(model.params[k].data.tobytes())
        out[layer] = h.hexdigest()
    return out


# -- LoRA ---------------------------------------------------------------------

def apply_lora(model: Classifier, layers: Iterable[str] = ("head.fc1",), rank: int = 16,
               alpha: float | None = None, seed: int = 0) -> Classifier:
    """Attach zero-initialized low-rank adapters to dense layers, freezing their base weights."""
    rng = np.random.default_rng([seed, 11])
    for layer in layers:
        wname = f"{layer}.w"
        if not layer.startswith("head.") or wname not in model.params:
            raise ConfigurationError(f"LoRA targets dense layers only; {layer!r} is not one")
        if layer in model.lora:
            raise ConfigurationError(f"{layer} already has an adapter")
        m, n = model.params[wname].shape
        if not 1 <= rank <= min(m, n):
            raise ConfigurationError(f"rank {rank} invalid for {m}x{n} weight (max {min(m, n)})")
        bound = 1.0 / np.sqrt(n)
        A = Tensor(rng.uniform(-bound, bound, (rank, n)).astype(model.dtype), requires_grad=True, name=f"{layer}.lora.A")
        B = Tensor(np.zeros((m, rank), dtype=model.dtype), requires_grad=True, name=f"{layer}.lora.B")
        scale = (rank if alpha is None else alpha) / rank
        names = model.layer_params(layer)
        was_frozen = all(k in model.frozen for k in names)
        model.lora[layer] = LoraAdapter(A, B, rank, scale, was_frozen)
        model.set_frozen(model.frozen | set(names))
    return model


def merge_lora(model: Classifier) -> Classifier:
    """Fold every adapter into its base weight and drop it."""
    frozen = set(model.frozen)
    for layer, ad in list(model.lora.items()):
        w = model.params[f"{layer}.w"]
        merged = w.data.astype(np.float64) + ad.scale * (ad.B.data.astype(np.float64) @ ad.A.data.astype(np.float64))
        w.data = merged.astype(model.dtype)
        if not ad.base_was_frozen:
            frozen -= set(model.layer_params(layer))
        del model.lora[layer]
    model.set_frozen(frozen)
    return model


# -- training -----------------------------------------------------------------

def _fit(model: Classifier, images, labels, epochs: int, batch_size: int, lr: float, seed) -> list[float]:
    params = model.trainable()
    if not params:
        raise ConfigurationError("every parameter is frozen; nothing to train")
    x = model.prepare(images)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise TrainingError("cannot train on an empty dataset")
    if len(x) != len(y):
        raise TrainingError(f"{len(x)} images but {len(y)} labels")
    rng = np.random.default_rng(seed)
    opt = Adam(params, lr=lr)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            with Tape() as tape:
                loss = ops.softmax_cross_entropy(model.forward(Tensor(x[idx])), y[idx])
            tape.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / len(x))
        log.info("epoch %d/%d loss %.4f", epoch + 1, epochs, history[-1])
    return history


def pretrain_backbone(images, labels, epochs: int = 4, batch_size: int = 16, lr: float = 1e-3,
                      seed: int = 0, input_size: int | None = None, **model_kwargs) -> tuple[Classifier, list[float]]:
    """Train a whole classifier on a proxy task; its backbone seeds later fine-tuning."""
    if len(images) == 0:
        raise TrainingError("cannot pretrain on an empty dataset")
    size = input_size or (images[0].width if isinstance(images[0], GrayImage) else np.asarray(images).shape[-1])
    model = Classifier(size, seed=seed, **model_kwargs)
    history = _fit(model, images, labels, epochs, batch_size, lr, [seed, 0])
    return model, history


def transfer(pretrained: Classifier, seed: int = 0) -> Classifier:
    """Copy the backbone into a new model with a freshly initialized head."""
    model = Classifier(pretrained.input_size, pretrained.channels, pretrained.hidden,
                       pretrained.n_classes, seed=seed, dtype=pretrained.dtype)
    for k, p in pretrained.params.items():
        if k.startswith("stage"):
            model.params[k].data = p.data.copy()
    return model


def freeze_backbone(model: Classifier, policy: FreezePolicy) -> int:
    """Freeze all backbone stages except the last ``k``; returns the k actually used."""
    n = len(model.backbone_layers)
    k = policy.unfreeze_last_k
    if k < 0:
        raise ConfigurationError("unfreeze_last_k must be non-negative")
    if k > n:
        log.warning("unfreeze_last_k=%d exceeds the %d backbone layers; clamping", k, n)
        k = n
    frozen = {name for layer in model.backbone_layers[: n - k] for name in model.layer_params(layer)}
    for layer in model.lora:
        frozen |= set(model.layer_params(layer))
    if model.head_frozen:
        frozen |= {k for k in model.params if k.startswith("head.")}
    model.set_frozen(frozen)
    return k


def train_stage1(model: Classifier, images, labels, protocol: TrainProtocol = TrainProtocol()) -> list[float]:
    """Feature-extraction phase: backbone frozen, head (and adapters) trained."""
    freeze_backbone(model, FreezePolicy(0))
    return _fit(model, images, labels, protocol.stage1_epochs, protocol.batch_size, protocol.lr,
                [protocol.seed, 1])


def train_stage2(model: Classifier, images, labels, protocol: TrainProtocol = TrainProtocol(),
                 policy: FreezePolicy = FreezePolicy()) -> list[float]:
    """Fine-tuning phase: the last ``k`` backbone stages join the head."""
    freeze_backbone(model, policy)
    return _fit(model, images, labels, protocol.stage2_epochs, protocol.batch_size, protocol.lr,
                [protocol.seed, 2])


def fine_tune(model: Classifier, images, labels, protocol: TrainProtocol = TrainProtocol(),
              policy: FreezePolicy = FreezePolicy()) -> dict[str, list[float]]:
    return {
        "stage1": train_stage1(model, images, labels, protocol),
        "stage2": train_stage2(model, images, labels, protocol, policy),
    }


def accuracy(model: Classifier, images, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float((model.predict_proba(images).argmax(axis=1) == labels).mean())
