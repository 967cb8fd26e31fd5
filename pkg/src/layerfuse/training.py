"""Classifier head, optimizer, training loop, and the layer sweep."""

import concurrent.futures
from dataclasses import dataclass, replace

import numpy as np

from .bank import DataError
from .fusion import BaselineSystem, FusionSystem, LayerPair, build_fusion_system
from .seeding import STREAM_BATCHES, STREAM_HEAD, rng_stream
from .tensor import DimensionError, Tensor, _accumulate, backward, conv1x1, mean_pool_tokens, parameter


@dataclass
class TrainConfig:
    """Optimizer and schedule settings for one training run.

    The defaults are sized for the synthetic desk-scale tasks; see
    ``full_scale_config`` for the preset used when fine-tuning on top of a
    full pretrained encoder.
    """

    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("beta1 and beta2 must lie in [0, 1)")

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, doc):
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**doc)


def full_scale_config(**overrides):
    """Preset for fine-tuning behind a full pretrained encoder (lr 2e-5)."""
    return replace(TrainConfig(learning_rate=2e-5), **overrides)


@dataclass
class ClassifierHead:
    """Linear sentence classifier over pooled fused embeddings."""

    weight: Tensor
    bias: Tensor

    def logits(self, features):
        return conv1x1(features, self.weight, self.bias)

    def parameters(self):
        return {"head.weight": self.weight, "head.bias": self.bias}


def init_head(channels, classes, seed=0):
    """Deterministic head init: N(0, 1/channels) weights, zero bias."""
    if channels < 1 or classes < 2:
        raise ValueError("head needs at least one channel and two classes")
    rng = rng_stream(seed, STREAM_HEAD)
    weight = rng.normal(0.0, np.sqrt(1.0 / channels), (channels, classes))
    return ClassifierHead(weight=parameter(weight), bias=parameter([0.0] * classes))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels."""
    data = logits.data
    if data.ndim == 3 and data.shape[1] == 1:
        flat = data[:, 0, :]
    elif data.ndim == 2:
        flat = data
    else:
        raise DimensionError(f"logits must be (B, K) or (B, 1, K), got {data.shape}")
    labels = np.asarray(labels)
    count, classes = flat.shape
    if labels.shape != (count,):
        raise DataError(f"{count} logit rows but {labels.shape} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"labels must lie in [0, {classes}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    shifted = flat - flat.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(count)
    out = Tensor(np.asarray(-log_probs[rows, labels].mean()))
    out._parents = (logits,)
    probs = np.exp(log_probs)

    def _bw(g):
        grad = probs.copy()
        grad[rows, labels] -= 1.0
        grad *= float(g) / count
        _accumulate(logits, grad.reshape(data.shape))

    out._backward = _bw
    return out


class AdamW:
    """Adam moments with decoupled weight decay.

    Update: theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta.
    """

    def __init__(self, params, config):
        self._params = dict(params)
        self._config = config
        self._m = {name: np.zeros_like(p.data) for name, p in self._params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in self._params.items()}
        self._steps = 0

    def step(self):
        cfg = self._config
        self._steps += 1
        correct1 = 1.0 - cfg.beta1 ** self._steps
        correct2 = 1.0 - cfg.beta2 ** self._steps
        for name, p in self._params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            self._m[name] = cfg.beta1 * self._m[name] + (1.0 - cfg.beta1) * grad
            self._v[name] = cfg.beta2 * self._v[name] + (1.0 - cfg.beta2) * grad * grad
            step = (self._m[name] / correct1) / (np.sqrt(self._v[name] / correct2) + cfg.eps)
            p.data = (
                p.data
                - cfg.learning_rate * step
                - cfg.learning_rate * cfg.weight_decay * p.data
            )


def _batch_loss(system, head, bank, rows, training):
    fused = system.fused_batch(bank, rows, training=training)
    features = mean_pool_tokens(fused)
    return softmax_cross_entropy(head.logits(features), bank.labels[rows])


def train(system, head, bank, cfg):
    """Minimize softmax cross-entropy on the bank's train split.

    Batches are reshuffled each epoch from a seed-derived stream, the last
    partial batch is kept, and normalization runs in training mode.  A
    split size of 1 modulo the batch size therefore fails on the pooled
    branch (single-sample batch statistics are rejected by design).
    Returns the per-epoch mean loss curve; parameters are updated in place.
    """
    train_rows = bank.split_indices("train")
    if train_rows.size == 0:
        raise DataError("bank has no sentences in the train split")
    if isinstance(system, FusionSystem):
        bank.layer(system.pair.lower)
        bank.layer(system.pair.upper)
    params = {**system.parameters(), **head.parameters()}
    optimizer = AdamW(params, cfg)
    order = rng_stream(cfg.seed, STREAM_BATCHES)
    curve = []
    for _ in range(cfg.epochs):
        permuted = train_rows[order.permutation(train_rows.size)]
        total = 0.0
        for start in range(0, permuted.size, cfg.batch_size):
            rows = permuted[start : start + cfg.batch_size]
            loss = _batch_loss(system, head, bank, rows, training=True)
            backward(loss)
            optimizer.step()
            total += float(loss.data) * rows.size
        curve.append(total / permuted.size)
    return curve


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    micro_f1: float
    count: int


def classification_metrics(predictions, labels):
    """Accuracy plus micro-F1 from per-class counts pooled over all classes."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise DataError(
            f"predictions and labels must be equal-length and non-empty, got "
            f"{predictions.shape} vs {labels.shape}"
        )
    true_pos = false_pos = false_neg = 0
    for cls in np.unique(np.concatenate([predictions, labels])):
        true_pos += int(np.sum((predictions == cls) & (labels == cls)))
        false_pos += int(np.sum((predictions == cls) & (labels != cls)))
        false_neg += int(np.sum((predictions != cls) & (labels == cls)))
    micro_f1 = 2.0 * true_pos / (2.0 * true_pos + false_pos + false_neg)
    accuracy = float(np.mean(predictions == labels))
    return Metrics(accuracy=accuracy, micro_f1=micro_f1, count=int(labels.size))


def evaluate(system, head, bank, split="test"):
    """Accuracy and micro-F1 on one split, with normalization in eval mode."""
    rows = bank.split_indices(split)
    if rows.size == 0:
        raise DataError(f"bank has no sentences in the {split!r} split")
    fused = system.fused_batch(bank, rows, training=False)
    features = mean_pool_tokens(fused)
    logits = head.logits(features).data.reshape(rows.size, -1)
    predictions = logits.argmax(axis=1)
    return classification_metrics(predictions, bank.labels[rows])


@dataclass(frozen=True)
class SweepRow:
    """Metrics for one configuration: the baseline or one fused lower layer."""

    config: str
    lower: object
    source_accuracy: float
    source_f1: float
    target_accuracy: float
    target_f1: float


@dataclass
class SweepReport:
    upper: int
    variant: str
    mode: str
    seed: int
    rows: list


def _sweep_task(task):
    source, target, lower, upper, variant, mode, cfg = task
    channels = source.shape[2]
    if lower is None:
        system = BaselineSystem(upper=upper)
    else:
        system = build_fusion_system(
            LayerPair(lower, upper), channels, variant=variant, mode=mode, seed=cfg.seed
        )
    head = init_head(channels, source.num_classes, seed=cfg.seed)
    train(system, head, source, cfg)
    on_source = evaluate(system, head, source, "test")
    on_target = evaluate(system, head, target, "test")
    return SweepRow(
        config=system.config_id(),
        lower=lower,
        source_accuracy=on_source.accuracy,
        source_f1=on_source.micro_f1,
        target_accuracy=on_target.accuracy,
        target_f1=on_target.micro_f1,
    )


def layer_sweep(source, target, layers, cfg, variant="full", mode="sigmoid", upper=None, jobs=1):
    """Train and evaluate the baseline plus one fused system per lower layer.

    Every row shares the same seed protocol, so the row fusing the upper
    layer with itself reproduces the baseline exactly.  Rows are independent;
    ``jobs`` > 1 computes them in worker processes with identical results.
    """
    if upper is None:
        upper = source.n_layers
    if source.shape != target.shape or source.n_layers != target.n_layers:
        raise DataError(
            f"source and target banks differ: {source.n_layers} layers of "
            f"{source.shape} vs {target.n_layers} of {target.shape}"
        )
    wanted = sorted(set(int(x) for x in layers))
    for layer in wanted:
        if not 1 <= layer <= upper:
            raise DataError(f"sweep layer {layer} outside 1..{upper}")
    tasks = [(source, target, None, upper, variant, mode, cfg)]
    tasks += [(source, target, layer, upper, variant, mode, cfg) for layer in wanted]
    if jobs <= 1:
        rows = [_sweep_task(task) for task in tasks]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_task, tasks))
    return SweepReport(upper=upper, variant=variant, mode=mode, seed=cfg.seed, rows=rows)
