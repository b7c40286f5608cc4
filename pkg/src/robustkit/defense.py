"""Training-time objectives and the training loop.

Covers natural cross-entropy training plus the three cheap hardening
knobs -- label smoothing (alpha), logit squeezing (beta), Gaussian noise
augmentation (sigma) -- and adversarially-mixed training where the loss
is kappa * L(x) + (1 - kappa) * L(x_adv) with x_adv crafted against the
current network snapshot.  All knobs compose: the `combined` regime
permits any mixture, the narrower regimes exist so configs fail loudly
when a knob that should be off is set.

The squeezing term is the unsquared Frobenius norm of the mini-batch
logits (beta * ||Z||_F); pass squeeze_squared for the ||Z||_F^2 variant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import attack as attack_mod
from . import nn
from .data import BatchStream, Dataset, gaussian_augment
from .rng import TAG_SHUFFLE, derived_rng

REGIMES = ("natural", "label_smooth", "logit_squeeze", "adversarial", "combined")


# ---------------------------------------------------------------------------
# Loss constructions
# ---------------------------------------------------------------------------

def smooth_labels(y_hot, alpha, n_classes):
    """One-warm targets: y_hot - alpha * (y_hot - 1/n_classes).

    Accepts a single one-hot vector or a batch of rows; alpha=0 returns
    the hard labels, alpha=1 the uniform distribution.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    y = np.asarray(y_hot, dtype=np.float64)
    if y.shape[-1] != n_classes:
        raise ValueError(f"expected {n_classes} classes, got vector length {y.shape[-1]}")
    rows = y.reshape(-1, n_classes)
    if not (np.isin(rows, (0.0, 1.0)).all() and (rows.sum(axis=1) == 1.0).all()):
        raise ValueError("y_hot must be one-hot")
    return y - alpha * (y - 1.0 / n_classes)


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def smooth_targets(labels, alpha, n_classes):
    """One-warm target rows for integer labels."""
    return smooth_labels(one_hot(labels, n_classes), alpha, n_classes)


def cross_entropy(logits, target):
    """Mean batch cross-entropy against target distributions.

    Returns (loss, d loss / d logits).  The gradient is
    (softmax(logits) - target) / batch_size.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits[None, :]
        target = target[None, :]
    if not np.isfinite(logits).all():
        raise nn.NonFiniteError("non-finite logits in cross_entropy")
    if np.abs(target.sum(axis=1) - 1.0).max() > 1e-9:
        raise ValueError("target rows must sum to 1")
    b = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = float(-(target * log_p).sum() / b)
    grad = (np.exp(log_p) - target) / b
    return loss, grad


def logit_squeeze_penalty(logits, beta, squared=False):
    """beta * ||Z||_F over the whole mini-batch of logits.

    Returns (penalty, d penalty / d logits); the gradient at ||Z||_F = 0
    is defined as zero.  `squared` switches to beta * ||Z||_F^2.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    z = np.asarray(logits, dtype=np.float64)
    norm = float(np.sqrt((z * z).sum()))
    if squared:
        return beta * norm * norm, 2.0 * beta * z
    if norm == 0.0:
        return 0.0, np.zeros_like(z)
    return beta * norm, beta * z / norm


def cw_loss(logits, y):
    """Margin loss max_{c != y} z_c - z_y; negative iff correctly classified.

    Accepts a single logit vector with an int label, or a (B, C) batch
    with a label array; the gradient is +1 at the maximizing wrong class
    (ties to the lowest index), -1 at the label.
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    if zb.shape[1] < 2:
        raise ValueError("cw_loss needs at least 2 classes")
    labels = np.broadcast_to(np.asarray(y, dtype=np.int64), (zb.shape[0],))
    losses = nn.cw_per_example(zb, labels)
    grad = nn.loss_grad_seed(zb, ("cw", labels))
    if single:
        return float(losses[0]), grad[0]
    return losses, grad


def adversarial_objective(net, batch, labels, kappa, attack_cfg, targets=None):
    """Eq-style mixed objective: kappa * L(x) + (1 - kappa) * L(x_adv).

    x_adv is crafted with `attack_cfg` against the current network; the
    gradient flows through the two loss terms only, never through the
    attack construction.  kappa=1 skips the attack entirely and is
    bitwise-identical to natural training.  Returns (loss, param grads).
    """
    if not 0.0 <= kappa <= 1.0:
        raise ValueError(f"kappa must be in [0, 1], got {kappa}")
    labels = np.asarray(labels, dtype=np.int64)
    if targets is None:
        targets = one_hot(labels, net.n_classes)
    trace = nn.forward(net, batch)
    clean_loss, clean_dl = cross_entropy(trace.logits, targets)
    if kappa == 1.0:
        return clean_loss, nn.param_gradients(net, trace, clean_dl)
    x_adv = attack_mod.run_attack(net, batch, labels, attack_cfg)
    if not np.isfinite(x_adv).all():
        raise nn.NonFiniteError("attack produced non-finite adversarial examples")
    adv_trace = nn.forward(net, x_adv)
    adv_loss, adv_dl = cross_entropy(adv_trace.logits, targets)
    loss = kappa * clean_loss + (1.0 - kappa) * adv_loss
    grads = nn.param_gradients(net, trace, kappa * clean_dl)
    adv_grads = nn.param_gradients(net, adv_trace, (1.0 - kappa) * adv_dl)
    for g, ga in zip(grads, adv_grads):
        for name in g:
            g[name] += ga[name]
    return loss, grads


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    regime: str = "natural"
    arch: str = "cnn"
    alpha: float = 0.0
    beta: float = 0.0
    sigma: float = 0.0
    kappa: float = 0.5
    iterations: int = 1000
    batch_size: int = 50
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    attack: "attack_mod.AttackConfig | None" = None
    squeeze_squared: bool = False
    clip_augmentation: bool = False
    log_every: int = 100

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.beta < 0 or self.sigma < 0:
            raise ValueError("beta and sigma must be non-negative")
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError(f"kappa must be in [0, 1], got {self.kappa}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if self.regime == "adversarial" and self.attack is None:
            raise ValueError("adversarial regime requires an inner attack config")
        forbidden = {
            "natural": ("alpha", "beta"),
            "label_smooth": ("beta",),
            "logit_squeeze": ("alpha",),
            "adversarial": ("alpha", "beta"),
            "combined": (),
        }[self.regime]
        for name in forbidden:
            if getattr(self, name) != 0.0:
                raise ValueError(f"regime {self.regime!r} requires {name}=0")
        if self.regime in ("natural", "label_smooth", "logit_squeeze") and self.attack is not None:
            raise ValueError(f"regime {self.regime!r} does not take an inner attack")

    def to_kv(self):
        """Flat key=value lines (sorted), inner attack keys dotted."""
        lines = []
        for key, value in sorted(asdict(self).items()):
            if key == "attack":
                continue
            lines.append(f"{key}={value}")
        if self.attack is not None:
            for key, value in sorted(asdict(self.attack).items()):
                lines.append(f"attack.{key}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text):
        pairs = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {raw!r}")
            key, value = line.split("=", 1)
            pairs[key.strip()] = value.strip()
        return cls.from_pairs(pairs)

    @classmethod
    def from_pairs(cls, pairs):
        def conv(value, like):
            if isinstance(like, bool):
                return value in ("1", "true", "True")
            return type(like)(value)

        base = cls()
        kwargs = {}
        attack_kwargs = {}
        for key, value in pairs.items():
            if key.startswith("attack."):
                attack_kwargs[key[len("attack."):]] = value
            else:
                if not hasattr(base, key):
                    raise ValueError(f"unknown config key {key!r}")
                kwargs[key] = conv(value, getattr(base, key))
        if attack_kwargs:
            kwargs["attack"] = attack_mod.AttackConfig.from_pairs(attack_kwargs)
        return cls(**kwargs)


@dataclass
class TrainLog:
    """Per-interval training records, sorted by iteration."""

    records: list = field(default_factory=list)

    COLUMNS = ("iteration", "loss", "accuracy", "mean_abs_logit", "mean_logit_gap")

    def append(self, **kwargs):
        self.records.append({k: kwargs[k] for k in self.COLUMNS})

    def final(self):
        return self.records[-1]

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write(",".join(self.COLUMNS) + "\n")
            for rec in self.records:
                f.write(f"{rec['iteration']},{rec['loss']!r},{rec['accuracy']!r},"
                        f"{rec['mean_abs_logit']!r},{rec['mean_logit_gap']!r}\n")


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _learning_rate(base, iteration, total):
    """Piecewise-constant schedule: x0.1 at 50% and 75% of the budget."""
    lr = base
    if iteration >= math.floor(0.75 * total):
        return lr * 0.01
    if iteration >= math.floor(0.5 * total):
        return lr * 0.1
    return lr


def train(config: TrainConfig, dataset: Dataset, seed=None):
    """Run the configured regime; returns (network, train log).

    Deterministic given (config, dataset, seed): batch order, noise, and
    any attack randomness all derive from the seed.  Raises
    NonFiniteError naming the iteration if the loss diverges.
    """
    seed = config.seed if seed is None else seed
    net = nn.make_network(config.arch, dataset.image_shape, dataset.n_classes, seed)
    stream = BatchStream(dataset, config.batch_size, derived_rng(seed, TAG_SHUFFLE).integers(2**63))
    opt = nn.SGD(config.lr, config.momentum, config.weight_decay)
    log = TrainLog()
    n_c = dataset.n_classes
    mixing = config.attack is not None and config.kappa < 1.0

    for it in range(1, config.iterations + 1):
        x, y = stream.next_batch()
        if config.sigma > 0:
            x = gaussian_augment(x, config.sigma, seed, call_index=it,
                                 clip=config.clip_augmentation)
        targets = smooth_targets(y, config.alpha, n_c) if config.alpha > 0 else one_hot(y, n_c)

        try:
            trace = nn.forward(net, x)
            loss, dlogits = cross_entropy(trace.logits, targets)
            if config.beta > 0:
                pen, dpen = logit_squeeze_penalty(trace.logits, config.beta,
                                                  config.squeeze_squared)
                loss += pen
                dlogits = dlogits + dpen
            if mixing:
                kappa = config.kappa
                x_adv = attack_mod.run_attack(net, x, y, config.attack)
                adv_trace = nn.forward(net, x_adv)
                adv_loss, adv_dl = cross_entropy(adv_trace.logits, targets)
                loss = kappa * loss + (1.0 - kappa) * adv_loss
                grads = nn.param_gradients(net, trace, kappa * dlogits)
                adv_grads = nn.param_gradients(net, adv_trace, (1.0 - kappa) * adv_dl)
                for g, ga in zip(grads, adv_grads):
                    for name in g:
                        g[name] += ga[name]
            else:
                grads = nn.param_gradients(net, trace, dlogits)
        except nn.NonFiniteError as e:
            raise nn.NonFiniteError(f"training diverged at iteration {it}: {e}") from None
        if not np.isfinite(loss):
            raise nn.NonFiniteError(f"training diverged at iteration {it}: loss={loss}")

        opt.lr = _learning_rate(config.lr, it, config.iterations)
        opt.step(net, grads)

        if it % config.log_every == 0 or it == config.iterations:
            z = trace.logits
            idx = np.arange(len(y))
            gap = z[idx, y] - z[idx, nn.runner_up_classes(z, y)]
            log.append(iteration=it, loss=float(loss),
                       accuracy=float((z.argmax(axis=1) == y).mean()),
                       mean_abs_logit=float(np.abs(z).mean()),
                       mean_logit_gap=float(gap.mean()))
    return net, log
