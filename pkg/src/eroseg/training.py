"""Clean and adversarial training with plain fixed-rate gradient descent.

Adversarial training minimises, batch by batch,

    mean CE(f(x), y) + lambda_balance * mean CE(f(x_adv), y)

where ``x_adv`` comes from running the inner attack against the current
parameters. The adversarial batch is treated as a constant input once
generated: no gradient flows through the attack itself.
"""

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from . import numerics as nx
from .attacks import AttackConfig, AttackTrace, get_attack, mean_cross_entropy
from .data import Prng
from .errors import TrainingError, ValidationError
from .model import forward, init_model, predict_labels

SHUFFLE_STREAM = 0x5EED5EED


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.1
    seed: int = 0
    lambda_balance: float = 1.0
    attack: str = "eroseg"
    inner: AttackConfig = field(default_factory=lambda: AttackConfig(iters=3, alpha=2 / 255))

    def validate(self):
        if self.lambda_balance < 0:
            raise ValidationError(f"lambda_balance={self.lambda_balance} must be >= 0")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size={self.batch_size} must be >= 1")
        if self.epochs < 0:
            raise ValidationError(f"epochs={self.epochs} must be >= 0")
        if not self.lr > 0:
            raise ValidationError(f"lr={self.lr} must be > 0")
        self.inner.validate()
        get_attack(self.attack)
        return self

    def digest(self):
        return hashlib.sha256(repr(sorted(asdict(self).items())).encode()).hexdigest()


@dataclass
class EpochStats:
    epoch: int
    clean_loss: float
    adv_loss: float
    clean_miou: float
    robust_miou: float

    def csv(self):
        return ",".join([str(self.epoch)] + [repr(float(v)) for v in
                        (self.clean_loss, self.adv_loss, self.clean_miou, self.robust_miou)])


METRICS_HEADER = "epoch,clean_loss,adv_loss,clean_miou,robust_miou"


def adv_objective(clean_loss, adv_loss, lambda_balance):
    """``clean + lambda_balance * adv``; works on floats and scalar Tensors."""
    if isinstance(clean_loss, nx.Tensor) or isinstance(adv_loss, nx.Tensor):
        return nx.add(clean_loss, nx.scale(adv_loss, lambda_balance))
    return clean_loss + lambda_balance * adv_loss


def shuffled_order(rng, n):
    """Fisher-Yates permutation of range(n) driven by ``rng``."""
    order = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        order[i], order[j] = order[j], order[i]
    return np.array(order, dtype=np.intp)


def sgd_step(model, lr):
    for p in model.parameters():
        if p.grad is not None:
            p.data -= lr * p.grad


def _fit(dataset, cfg, adversarial, on_batch=None):
    cfg.validate()
    model = init_model(cfg.seed, dataset.num_classes)
    model.meta = {"epochs": cfg.epochs, "config_hash": cfg.digest()}
    shuffle = Prng(cfg.seed ^ SHUFFLE_STREAM)
    attack = get_attack(cfg.attack)
    c = dataset.num_classes
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffled_order(shuffle, len(dataset))
        clean_sum = adv_sum = 0.0
        cm_clean = np.zeros((c, c), dtype=np.int64)
        cm_adv = np.zeros((c, c), dtype=np.int64)
        for b, (xb, yb) in enumerate(dataset.batches(cfg.batch_size, order)):
            model.zero_grad()
            logits = forward(model, xb)
            clean = mean_cross_entropy(logits, yb)
            cm_clean += metrics.accumulate(logits.data.argmax(axis=1), yb, c)
            if adversarial:
                x_adv, _ = attack(model, xb, yb, cfg.inner.replace(seed=cfg.inner.seed + step))
                adv_logits = forward(model, x_adv)
                adv = mean_cross_entropy(adv_logits, yb)
                cm_adv += metrics.accumulate(adv_logits.data.argmax(axis=1), yb, c)
                loss = adv_objective(clean, adv, cfg.lambda_balance)
                adv_sum += adv.item() * len(yb)
            else:
                loss = clean
            if not math.isfinite(loss.item()):
                raise TrainingError(epoch, b, loss.item())
            loss.backward()
            if on_batch is not None:
                on_batch(model, x_adv if adversarial else None, xb)
            sgd_step(model, cfg.lr)
            clean_sum += clean.item() * len(yb)
            step += 1
        n = len(dataset)
        history.append(EpochStats(
            epoch,
            clean_sum / n,
            adv_sum / n if adversarial else math.nan,
            metrics.miou(cm_clean),
            metrics.miou(cm_adv) if adversarial else math.nan,
        ))
    for p in model.parameters():
        p.zero_grad()
    return model, history


def train_clean(dataset, cfg, on_batch=None):
    """Minimise mean per-pixel CE. Returns ``(model, per-epoch stats)``."""
    return _fit(dataset, cfg, adversarial=False, on_batch=on_batch)


def adv_train(dataset, cfg, on_batch=None):
    """Adversarial training with ``cfg.attack`` as the inner maximiser.

    ``on_batch(model, x_adv, x_clean)`` sees each adversarial batch after the
    backward pass and before the parameter update.
    """
    return _fit(dataset, cfg, adversarial=True, on_batch=on_batch)


def dataset_loss(model, dataset, batch_size=64):
    total = 0.0
    for xb, yb in dataset.batches(batch_size):
        total += mean_cross_entropy(forward(model, xb, grad_params=False), yb).item() * len(yb)
    return total / len(dataset)


def clean_confusion(model, dataset, batch_size=64):
    c = model.num_classes
    cm = np.zeros((c, c), dtype=np.int64)
    for xb, yb in dataset.batches(batch_size):
        cm += metrics.accumulate(predict_labels(model, xb), yb, c)
    return cm


def evaluate_clean(model, dataset, batch_size=64):
    return metrics.miou(clean_confusion(model, dataset, batch_size))


def evaluate_under_attack(model, dataset, cfg, attack="eroseg", batch_size=64, keep_images=False):
    """mIoU on attacked inputs over the whole dataset, plus the merged trace.

    Returns ``(miou, trace)``, or ``(miou, trace, adversarial_images)`` with
    ``keep_images``. Each batch uses attack seed ``cfg.seed + batch_index``.
    """
    if model.num_classes != dataset.num_classes:
        raise ValidationError(
            f"checkpoint has {model.num_classes} classes, dataset has {dataset.num_classes}"
        )
    run = get_attack(attack)
    c = model.num_classes
    cm = np.zeros((c, c), dtype=np.int64)
    traces, adv_batches = [], []
    for b, (xb, yb) in enumerate(dataset.batches(batch_size)):
        x_adv, trace = run(model, xb, yb, cfg.replace(seed=cfg.seed + b))
        cm += metrics.accumulate(predict_labels(model, x_adv), yb, c)
        traces.append(trace)
        if keep_images:
            adv_batches.append(x_adv)
    result = (metrics.miou(cm), AttackTrace.merge(traces))
    if keep_images:
        return result + (np.concatenate(adv_batches) if adv_batches else dataset.images[:0],)
    return result


def write_metrics_csv(history, path):
    with open(path, "w", newline="\n") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in history:
            fh.write(row.csv() + "\n")
