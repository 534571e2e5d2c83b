"""Batch-normalized MLP classifier: feature extractor plus linear head.

The extractor is a stack of (affine -> batch norm -> relu) blocks ending in a
d-dimensional feature; the head is a bias-free C x d matrix whose rows act as
class templates. Three forward modes:

  pretrain  batch statistics, running stats updated with momentum 0.1
  adapt     batch statistics only, running stats untouched (needs B >= 2)
  frozen    running statistics, independent of batch composition

After source pretraining the running stats are never mutated again.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import EPS_BN, Tensor

CHECKPOINT_VERSION = 1

MODES = ("pretrain", "adapt", "frozen")

# trainable scopes at test time; the head is never trainable
SCOPE_BN_AFFINE = "bn-affine"
SCOPE_FULL_EXTRACTOR = "full-extractor"


class PretrainDivergence(RuntimeError):
    """Raised when the pretraining loss goes non-finite."""

    def __init__(self, epoch: int):
        super().__init__(f"pretraining diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass
class ModelConfig:
    input_dim: int = 256
    hidden: tuple = (128, 128)
    feature_dim: int = 64
    num_classes: int = 10

    def widths(self):
        return list(self.hidden) + [self.feature_dim]

    def validate(self):
        if self.input_dim < 1 or self.feature_dim < 1 or any(w < 1 for w in self.hidden):
            raise ValueError("layer widths must be positive")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")


@dataclass
class _Block:
    w: Tensor
    b: Tensor
    gamma: Tensor
    beta: Tensor
    run_mean: np.ndarray
    run_var: np.ndarray


@dataclass
class Model:
    config: ModelConfig
    blocks: list = field(default_factory=list)
    head: Tensor = None

    # -- parameter access -----------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, blk in enumerate(self.blocks):
            out[f"blocks.{i}.w"] = blk.w
            out[f"blocks.{i}.b"] = blk.b
            out[f"blocks.{i}.gamma"] = blk.gamma
            out[f"blocks.{i}.beta"] = blk.beta
        out["head.w"] = self.head
        return out

    def trainable_names(self, scope: str) -> list[str]:
        if scope == SCOPE_BN_AFFINE:
            keep = ("gamma", "beta")
        elif scope == SCOPE_FULL_EXTRACTOR:
            keep = ("w", "b", "gamma", "beta")
        else:
            raise ValueError(f"unknown scope {scope!r}")
        return [n for n in self.named_parameters() if n != "head.w" and n.split(".")[-1] in keep]

    def trainable_parameters(self, scope: str) -> dict[str, Tensor]:
        params = self.named_parameters()
        return {n: params[n] for n in self.trainable_names(scope)}

    # -- forward ---------------------------------------------------------------

    def forward(self, x: np.ndarray, mode: str) -> tuple[Tensor, Tensor]:
        """Run a batch through the network; returns (features, logits) graph nodes."""
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ValueError(f"expected batch of shape (B, {self.config.input_dim})")
        if mode == "adapt" and x.shape[0] < 2:
            raise ValueError("adapt mode needs B >= 2 (batch variance is degenerate)")

        h = nm.constant(x)
        for blk in self.blocks:
            pre = nm.linear(h, blk.w) + blk.b
            if mode == "frozen":
                mean = nm.constant(blk.run_mean)
                var = nm.constant(blk.run_var)
                xhat = (pre - mean) / nm.sqrt(var + EPS_BN)
            else:
                mean = pre.mean(axis=0)
                cen = pre - mean
                var = (cen * cen).mean(axis=0)  # biased, matching the adapt path
                xhat = cen / nm.sqrt(var + EPS_BN)
                if mode == "pretrain":
                    blk.run_mean = 0.9 * blk.run_mean + 0.1 * mean.value
                    blk.run_var = 0.9 * blk.run_var + 0.1 * var.value
            h = nm.relu(blk.gamma * xhat + blk.beta)
        return h, nm.linear(h, self.head)

    def predict(self, x: np.ndarray, mode: str = "frozen"):
        """Labels and confidences without keeping the graph."""
        _, logits = self.forward(x, mode)
        probs = nm.softmax(logits.value, axis=1)
        return probs.argmax(axis=1), probs.max(axis=1)

    # -- persistence -------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {n: t.value for n, t in self.named_parameters().items()}
        for i, blk in enumerate(self.blocks):
            out[f"blocks.{i}.run_mean"] = blk.run_mean
            out[f"blocks.{i}.run_var"] = blk.run_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for n, t in self.named_parameters().items():
            t.value = np.array(arrays[n], dtype=np.float64)
        for i, blk in enumerate(self.blocks):
            blk.run_mean = np.array(arrays[f"blocks.{i}.run_mean"], dtype=np.float64)
            blk.run_var = np.array(arrays[f"blocks.{i}.run_var"], dtype=np.float64)

    def save(self, path):
        meta = {
            "version": CHECKPOINT_VERSION,
            "input_dim": self.config.input_dim,
            "hidden": list(self.config.hidden),
            "feature_dim": self.config.feature_dim,
            "num_classes": self.config.num_classes,
        }
        np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                 **self.state_arrays())

    def clone(self) -> "Model":
        m = Model(config=self.config)
        m.blocks = [
            _Block(
                w=Tensor(blk.w.value.copy()),
                b=Tensor(blk.b.value.copy()),
                gamma=Tensor(blk.gamma.value.copy()),
                beta=Tensor(blk.beta.value.copy()),
                run_mean=blk.run_mean.copy(),
                run_var=blk.run_var.copy(),
            )
            for blk in self.blocks
        ]
        m.head = Tensor(self.head.value.copy())
        return m


def load_model(path) -> Model:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        cfg = ModelConfig(
            input_dim=meta["input_dim"],
            hidden=tuple(meta["hidden"]),
            feature_dim=meta["feature_dim"],
            num_classes=meta["num_classes"],
        )
        m = init_model(cfg, seed=0)
        m.load_state_arrays({k: data[k] for k in data.files if k != "__meta__"})
    return m


def init_model(config: ModelConfig, seed: int) -> Model:
    """He-initialized weights, identity batch norm, running stats (0, 1)."""
    config.validate()
    rng = np.random.default_rng(seed)
    m = Model(config=config)
    fan_in = config.input_dim
    for width in config.widths():
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(width, fan_in))
        m.blocks.append(
            _Block(
                w=Tensor(w),
                b=Tensor(np.zeros(width)),
                gamma=Tensor(np.ones(width)),
                beta=Tensor(np.zeros(width)),
                run_mean=np.zeros(width),
                run_var=np.ones(width),
            )
        )
        fan_in = width
    m.head = Tensor(rng.normal(0.0, 1.0 / np.sqrt(config.feature_dim),
                               size=(config.num_classes, config.feature_dim)))
    return m


def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Negative log-likelihood, optionally label-smoothed to temper confidence."""
    logp = nm.log_softmax(logits)
    nll = -nm.gather_rows(logp, labels).mean()
    if smoothing <= 0.0:
        return nll
    uniform = -logp.mean(axis=1).mean()
    return nll * (1.0 - smoothing) + uniform * smoothing


def pretrain_source(model: Model, x: np.ndarray, y: np.ndarray, epochs: int,
                    lr: float, seed: int, batch_size: int = 64,
                    momentum: float = 0.9, feature_scale: float | None = 1.0,
                    label_smoothing: float = 0.0) -> Model:
    """Cross-entropy SGD on the labeled source set; trains every parameter.

    Afterwards the feature space is rescaled so the mean training-feature norm
    equals ``feature_scale`` (None skips this). The rescaling multiplies the
    last block's affine by c and the head by 1/c, which leaves every logit
    unchanged (relu is positively homogeneous) but pins the scale that the
    prototype losses operate on.
    """
    from .engine import SGDMomentum  # deferred: engine imports this module

    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    params = list(model.named_parameters().values())
    opt = SGDMomentum(params, lr=lr, momentum=momentum)
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x) - batch_size + 1, batch_size):
            idx = order[start:start + batch_size]
            _, logits = model.forward(x[idx], mode="pretrain")
            loss = cross_entropy(logits, y[idx], smoothing=label_smoothing)
            if not np.isfinite(loss.value):
                raise PretrainDivergence(epoch)
            opt.step(nm.gradients(loss, params))
    if epochs > 0 and feature_scale is not None:
        calibrate_feature_scale(model, x, target=feature_scale)
    return model


def calibrate_feature_scale(model: Model, x: np.ndarray, target: float = 1.0,
                            batch_size: int = 256) -> float:
    """Rescale so the mean frozen-stats feature norm over ``x`` equals ``target``."""
    norms = []
    for start in range(0, len(x), batch_size):
        f, _ = model.forward(x[start:start + batch_size], mode="frozen")
        norms.append(np.linalg.norm(f.value, axis=1))
    mean_norm = float(np.concatenate(norms).mean())
    if not np.isfinite(mean_norm) or mean_norm <= 0.0:
        raise ValueError(f"degenerate feature scale {mean_norm}; cannot calibrate")
    c = target / mean_norm
    last = model.blocks[-1]
    last.gamma.value = last.gamma.value * c
    last.beta.value = last.beta.value * c
    model.head.value = model.head.value / c
    return c


def evaluate_accuracy(model: Model, x: np.ndarray, y: np.ndarray,
                      mode: str = "frozen", batch_size: int = 256) -> float:
    correct = 0
    for start in range(0, len(x), batch_size):
        preds, _ = model.predict(x[start:start + batch_size], mode=mode)
        correct += int((preds == y[start:start + batch_size]).sum())
    return 100.0 * correct / len(x)
