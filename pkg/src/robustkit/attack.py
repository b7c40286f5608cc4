"""White-box and black-box adversarial example generation.

FGSM and PGD share one signed-ascent step primitive, so PGD with a
single full-size step is bitwise-identical to FGSM by construction.  PGD
starts from the clean image (plus an optional uniform init), projects
every iterate into the epsilon ball first and the valid pixel range
second, and returns the best candidate seen across all steps and
restarts.  "Best" prefers any candidate that flips the label, then the
highest attack loss, with ties resolved toward the earlier restart --
this makes accuracy exactly non-increasing under nested restart sets.

Randomness is keyed per (base seed, example index, restart index), so
per-example attacks are reproducible regardless of batching and safe to
parallelize.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from .rng import TAG_ATTACK_INIT, derived_rng

FAMILIES = ("fgsm", "pgd", "linearized")
LOSS_KINDS = ("xent", "cw")


@dataclass
class AttackConfig:
    family: str = "pgd"
    loss_kind: str = "xent"
    epsilon: float = 0.3
    steps: int = 40
    step_size: float = 0.01
    random_init: bool = True
    restarts: int = 1
    clip_to_valid: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown attack loss {self.loss_kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.family == "fgsm":
            # FGSM is the one-step special case: no init, full-size step.
            self.steps = 1
            self.step_size = self.epsilon
            if self.random_init:
                raise ValueError("fgsm does not take a random init")
            if self.restarts != 1:
                raise ValueError("fgsm does not take restarts")
        if self.family == "pgd":
            if self.steps < 1:
                raise ValueError("pgd needs steps >= 1")
            if self.step_size <= 0 and self.epsilon > 0:
                raise ValueError("pgd needs a positive step size")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if self.restarts >= 2 and not self.random_init:
            raise ValueError("multiple restarts require random_init")

    @classmethod
    def from_pairs(cls, pairs):
        base = cls()
        kwargs = {}
        for key, value in pairs.items():
            if not hasattr(base, key):
                raise ValueError(f"unknown attack config key {key!r}")
            like = getattr(base, key)
            kwargs[key] = (value in ("1", "true", "True")) if isinstance(like, bool) \
                else type(like)(value)
        return cls(**kwargs)

    def to_pairs(self):
        return {k: v for k, v in asdict(self).items()}


# ---------------------------------------------------------------------------
# Core step and per-example losses
# ---------------------------------------------------------------------------

def signed_step(x0, xt, grad, step_size, epsilon, clip_to_valid):
    """One ascent step with projection: epsilon ball first, pixel box second."""
    xn = xt + step_size * np.sign(grad)
    delta = np.clip(xn - x0, -epsilon, epsilon)
    xn = x0 + delta
    if clip_to_valid:
        xn = np.clip(xn, 0.0, 1.0)
    return xn


def attack_losses(logits, labels, loss_kind):
    """Per-example attack loss (unscaled by batch size)."""
    if loss_kind == "xent":
        return nn.xent_per_example(logits, labels)
    return nn.cw_per_example(logits, labels)


def _loss_grad(net, x, labels, loss_kind):
    """(per-example losses, predictions, input gradient) at x."""
    trace = nn.forward(net, x)
    losses = attack_losses(trace.logits, labels, loss_kind)
    if not np.isfinite(losses).all():
        raise nn.NonFiniteError("non-finite attack loss")
    dlogits = nn.loss_grad_seed(trace.logits, (loss_kind, labels))
    _, dx = nn._backprop(net, trace, dlogits)
    return losses, trace.logits.argmax(axis=1), dx.reshape(x.shape)


def _eval_candidates(net, x, labels, loss_kind):
    trace = nn.forward(net, x)
    losses = attack_losses(trace.logits, labels, loss_kind)
    if not np.isfinite(losses).all():
        raise nn.NonFiniteError("non-finite attack loss")
    return losses, trace.logits.argmax(axis=1)


class _Best:
    """Per-example best candidate: flips first, then loss, then earliest."""

    def __init__(self, x0, labels):
        self.x = x0.copy()
        self.loss = np.full(len(labels), -np.inf)
        self.flipped = np.zeros(len(labels), dtype=bool)
        self.labels = labels

    def consider(self, x, losses, preds):
        flips = preds != self.labels
        better = (flips & ~self.flipped) | ((flips == self.flipped) & (losses > self.loss))
        if better.any():
            self.x[better] = x[better]
            self.loss[better] = losses[better]
            self.flipped[better] = flips[better]


# ---------------------------------------------------------------------------
# Attacks
# ---------------------------------------------------------------------------

def fgsm(net, x, y, cfg: AttackConfig):
    """x + epsilon * sign(grad of the attack loss), then pixel clipping."""
    if cfg.family != "fgsm":
        raise ValueError("config family must be fgsm")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    _, _, g = _loss_grad(net, x, y, cfg.loss_kind)
    return signed_step(x, x, g, cfg.epsilon, cfg.epsilon, cfg.clip_to_valid)


def _init_noise(cfg, n, dim, index_offset, restart):
    noise = np.empty((n, dim))
    for i in range(n):
        rng = derived_rng(cfg.seed, TAG_ATTACK_INIT, index_offset + i, restart)
        noise[i] = rng.uniform(-cfg.epsilon, cfg.epsilon, size=dim)
    return noise


def pgd(net, x, y, cfg: AttackConfig, index_offset=0):
    """Iterated signed ascent inside the epsilon ball around x.

    Starts at x (plus a uniform(-eps, eps) draw when random_init), takes
    `steps` signed steps of `step_size`, projecting each iterate into the
    ball and, when clip_to_valid, into [0, 1].  Returns the best post-step
    candidate over all steps and restarts.  `index_offset` shifts the
    per-example seed index so chunked evaluation reproduces unchunked.
    """
    if cfg.family not in ("pgd", "fgsm"):
        raise ValueError("config family must be pgd or fgsm")
    x0 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    best = _Best(x0, y)
    for restart in range(cfg.restarts):
        if cfg.random_init:
            xt = x0 + _init_noise(cfg, len(x0), x0.shape[1], index_offset, restart)
            if cfg.clip_to_valid:
                xt = np.clip(xt, 0.0, 1.0)
        else:
            xt = x0
        for _ in range(cfg.steps):
            losses, preds, g = _loss_grad(net, xt, y, cfg.loss_kind)
            if xt is not x0:
                best.consider(xt, losses, preds)
            xt = signed_step(x0, xt, g, cfg.step_size, cfg.epsilon, cfg.clip_to_valid)
        losses, preds = _eval_candidates(net, xt, y, cfg.loss_kind)
        best.consider(xt, losses, preds)
    return best.x


def restart_curve(net, x, y, cfg: AttackConfig, max_restarts, index_offset=0):
    """Accuracy after each nested restart count 1..max_restarts.

    Restart r reuses the per-(example, restart) seeds of the r-restart
    attack, so the curve is exactly the nested-seed-set accuracy sequence
    and is non-increasing by the best-candidate construction.
    """
    if not cfg.random_init:
        raise ValueError("restart_curve needs a random-init attack config")
    x0 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    accuracies = []
    best = _Best(x0, y)
    for restart in range(max_restarts):
        xt = x0 + _init_noise(cfg, len(x0), x0.shape[1], index_offset, restart)
        if cfg.clip_to_valid:
            xt = np.clip(xt, 0.0, 1.0)
        for _ in range(cfg.steps):
            losses, preds, g = _loss_grad(net, xt, y, cfg.loss_kind)
            best.consider(xt, losses, preds)
            xt = signed_step(x0, xt, g, cfg.step_size, cfg.epsilon, cfg.clip_to_valid)
        losses, preds = _eval_candidates(net, xt, y, cfg.loss_kind)
        best.consider(xt, losses, preds)
        adv_preds = nn.forward(net, best.x).logits.argmax(axis=1)
        accuracies.append(float((adv_preds == y).mean()))
    return accuracies


def linearized_attack(net, x, y, ybar, eps):
    """Two-class linearized step: x - eps * sign(grad z_y - grad z_ybar).

    An analysis probe, deliberately left unclipped.  `y` and `ybar` may
    be scalars or per-example arrays; ybar must differ from y everywhere.
    """
    x = np.asarray(x, dtype=np.float64)
    b = len(x)
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (b,))
    ybar = np.broadcast_to(np.asarray(ybar, dtype=np.int64), (b,))
    if (y == ybar).any():
        raise ValueError("ybar must differ from y")
    trace = nn.forward(net, x)
    dlogits = np.zeros_like(trace.logits)
    idx = np.arange(b)
    dlogits[idx, y] = 1.0
    dlogits[idx, ybar] = -1.0
    _, dx = nn._backprop(net, trace, dlogits)
    return x - eps * np.sign(dx.reshape(x.shape))


def _linearized_all_targets(net, x, y, eps):
    """Best linearized candidate over every wrong class (flips preferred)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n_c = net.n_classes
    best = _Best(x, y)
    for target in range(n_c):
        valid = y != target
        if not valid.any():
            continue
        # Rows with y == target get a stand-in target; their candidate is
        # re-scored with a real loss when the sweep reaches that class.
        ybar = np.where(valid, target, (y + 1) % n_c)
        cand = linearized_attack(net, x, y, ybar, eps)
        losses, preds = _eval_candidates(net, cand, y, "cw")
        losses = np.where(valid, losses, -np.inf)
        best.consider(cand, losses, preds)
    return best.x


def run_attack(net, x, y, cfg: AttackConfig, index_offset=0):
    """Dispatch on the config's family; returns adversarial examples."""
    if cfg.family == "fgsm":
        return fgsm(net, x, y, cfg)
    if cfg.family == "pgd":
        return pgd(net, x, y, cfg, index_offset=index_offset)
    return _linearized_all_targets(net, x, y, cfg.epsilon)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    """Accuracy plus per-example outcome rows."""

    accuracy: float
    clean_accuracy: float
    records: np.ndarray  # structured: index, true, clean_pred, adv_pred, loss, linf

    COLUMNS = ("index", "true_label", "clean_pred", "adv_pred", "achieved_loss", "linf_norm")

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write(",".join(self.COLUMNS) + "\n")
            for rec in self.records:
                f.write(f"{rec['index']},{rec['true_label']},{rec['clean_pred']},"
                        f"{rec['adv_pred']},{rec['achieved_loss']!r},{rec['linf_norm']!r}\n")


_RECORD_DTYPE = np.dtype([
    ("index", np.int64), ("true_label", np.int64), ("clean_pred", np.int64),
    ("adv_pred", np.int64), ("achieved_loss", np.float64), ("linf_norm", np.float64),
])


def evaluate(net, dataset, attack_cfg: AttackConfig | None = None,
             count=None, chunk=500, surrogate=None) -> EvalResult:
    """Clean or attacked accuracy with per-example outcomes.

    With no attack config this is plain clean accuracy.  With one, the
    attack is crafted against `surrogate` when given (black-box transfer)
    and against `net` itself otherwise, and accuracy is measured on `net`.
    """
    crafting_net = surrogate if surrogate is not None else net
    if surrogate is not None:
        if surrogate.input_shape != net.input_shape or surrogate.n_classes != net.n_classes:
            raise nn.ShapeError("surrogate and target networks are incompatible")
    n = len(dataset) if count is None else min(count, len(dataset))
    images, labels = dataset.images[:n], dataset.labels[:n]
    records = np.empty(n, dtype=_RECORD_DTYPE)
    correct = 0
    clean_correct = 0
    for start in range(0, n, chunk):
        x = images[start:start + chunk]
        y = labels[start:start + chunk]
        clean_logits = nn.forward(net, x).logits
        clean_pred = clean_logits.argmax(axis=1)
        if attack_cfg is None:
            adv_pred = clean_pred
            losses = nn.xent_per_example(clean_logits, y)
            x_adv = x
        else:
            x_adv = run_attack(crafting_net, x, y, attack_cfg, index_offset=start)
            adv_logits = nn.forward(net, x_adv).logits
            adv_pred = adv_logits.argmax(axis=1)
            losses = attack_losses(adv_logits, y, attack_cfg.loss_kind)
        sl = slice(start, start + len(y))
        records["index"][sl] = np.arange(start, start + len(y))
        records["true_label"][sl] = y
        records["clean_pred"][sl] = clean_pred
        records["adv_pred"][sl] = adv_pred
        records["achieved_loss"][sl] = losses
        records["linf_norm"][sl] = np.abs(x_adv - x).max(axis=1) if attack_cfg is not None else 0.0
        correct += int((adv_pred == y).sum())
        clean_correct += int((clean_pred == y).sum())
    return EvalResult(accuracy=correct / n, clean_accuracy=clean_correct / n, records=records)


def transfer_eval(source_net, target_net, dataset, attack_cfg: AttackConfig,
                  count=None, chunk=500) -> EvalResult:
    """Black-box: craft on source_net, measure accuracy on target_net."""
    return evaluate(target_net, dataset, attack_cfg, count=count, chunk=chunk,
                    surrogate=source_net)
