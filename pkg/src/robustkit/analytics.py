"""Linearized robustness analytics.

The central quantity is the per-example linearized flip radius: for every
wrong class, the ratio of the logit gap z_y - z_c to the l1 gradient gap
||grad_x z_y - grad_x z_c||_1, minimized over wrong classes.  Correctly
classified examples get a positive radius, ties get zero, misclassified
examples get a non-positive value, and a vanishing denominator with a
positive gap yields +inf (the gradient-coherence limit).

Also here: predicted accuracy (fraction with radius strictly above a
given epsilon), per-class gradient cosines, the histogram suite behind
the diagnostic figures, and per-neuron activation accounting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .attack import AttackConfig, evaluate

DENOM_FLOOR = 1e-12


def per_class_input_gradients(net, x):
    """Input gradients of every logit: shape (n_classes, batch, dim)."""
    x = np.asarray(x, dtype=np.float64)
    trace = nn.forward(net, x)
    b, n_c = trace.logits.shape
    grads = np.empty((n_c, b, x.reshape(b, -1).shape[1]))
    for c in range(n_c):
        seed = np.zeros_like(trace.logits)
        seed[:, c] = 1.0
        _, dx = nn._backprop(net, trace, seed)
        grads[c] = dx.reshape(b, -1)
    return grads, trace.logits


def epsilon_l_batch(net, x, y):
    """Linearized flip radii for a batch.

    Returns (radii (B,), ratios (B, n_classes)); the label column of the
    ratio matrix is NaN since only wrong classes are meaningful.
    """
    y = np.asarray(y, dtype=np.int64)
    grads, logits = per_class_input_gradients(net, x)
    b, n_c = logits.shape
    idx = np.arange(b)
    gy = grads[y, idx]                      # (B, D)
    num = logits[idx, y][:, None] - logits  # (B, C)
    den = np.abs(grads - gy[None]).sum(axis=2).T  # (B, C)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = num / den
    tiny = den < DENOM_FLOOR
    ratios[tiny & (num > 0)] = np.inf
    ratios[tiny & (num < 0)] = -np.inf
    ratios[tiny & (num == 0)] = 0.0
    masked = ratios.copy()
    masked[idx, y] = np.inf
    radii = masked.min(axis=1)
    ratios[idx, y] = np.nan
    return radii, ratios


def epsilon_L(net, x, y):
    """Single-example radius: (eps_L, per-class ratios)."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    radii, ratios = epsilon_l_batch(net, x, [int(y)])
    return float(radii[0]), ratios[0]


def predicted_accuracy(net, dataset, epsilon, count=None, chunk=500):
    """Fraction of examples whose linearized radius strictly exceeds epsilon."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    n = len(dataset) if count is None else min(count, len(dataset))
    above = 0
    for start in range(0, n, chunk):
        radii, _ = epsilon_l_batch(net, dataset.images[start:start + n][:chunk],
                                   dataset.labels[start:start + chunk + start][:chunk])
        above += int((radii > epsilon).sum())
    return above / n


def gradient_coherence(net, x, y, ybar):
    """Cosine between the input gradients of logits y and ybar."""
    if int(y) == int(ybar):
        raise ValueError("ybar must differ from y")
    grads, _ = per_class_input_gradients(net, np.asarray(x, dtype=np.float64).reshape(1, -1))
    return float(_cosines(grads[int(y)], grads[int(ybar)])[0])


def _cosines(a, b):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    out = np.zeros(len(a))
    ok = (na >= DENOM_FLOOR) & (nb >= DENOM_FLOOR)
    out[ok] = (a[ok] * b[ok]).sum(axis=1) / (na[ok] * nb[ok])
    return out


# ---------------------------------------------------------------------------
# Histograms
# ---------------------------------------------------------------------------

@dataclass
class Histogram:
    """Uniform-bin histogram with explicit out-of-range accounting."""

    edges: np.ndarray
    counts: np.ndarray
    underflow: int
    overflow: int

    @property
    def total(self):
        return int(self.counts.sum()) + self.underflow + self.overflow

    def mean(self):
        """Mean of the in-range sample approximated by bin centers."""
        centers = (self.edges[:-1] + self.edges[1:]) / 2.0
        n = self.counts.sum()
        return float((centers * self.counts).sum() / n) if n else float("nan")

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("bin_left,bin_right,count\n")
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                f.write(f"{lo!r},{hi!r},{int(c)}\n")

    def meta(self):
        return {"low": float(self.edges[0]), "high": float(self.edges[-1]),
                "bins": len(self.counts), "underflow": self.underflow,
                "overflow": self.overflow, "total": self.total}


def build_histogram(values, bins=100, hist_range=None) -> Histogram:
    """100-uniform-bin histogram over [min, max] of the finite sample.

    Infinite values land in the underflow/overflow counters; an explicit
    `hist_range` overrides the automatic span.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if np.isnan(values).any():
        raise ValueError("histogram input contains NaN")
    finite = values[np.isfinite(values)]
    if hist_range is None:
        if len(finite) == 0:
            hist_range = (0.0, 1.0)
        else:
            lo, hi = float(finite.min()), float(finite.max())
            if lo == hi:
                lo, hi = lo - 0.5, hi + 0.5
            hist_range = (lo, hi)
    lo, hi = hist_range
    underflow = int((values < lo).sum())
    overflow = int((values > hi).sum())
    in_range = values[(values >= lo) & (values <= hi)]
    counts, edges = np.histogram(in_range, bins=bins, range=(lo, hi))
    return Histogram(edges=edges, counts=counts, underflow=underflow, overflow=overflow)


def distribution_suite(net, dataset, eps_for_hist=0.3, count=None, bins=100, chunk=500):
    """The diagnostic histogram set.

    Keys: logit_gap (runner-up), logit_gap_all_pairs, grad_gap, eps_l,
    cosine, abs_logit, grad_l1.  The eps_l histogram's upper edge is
    capped at 10 * eps_for_hist so a few near-infinite radii cannot
    flatten the plot; capped values are counted as overflow.
    """
    n = len(dataset) if count is None else min(count, len(dataset))
    parts = {k: [] for k in ("logit_gap", "logit_gap_all", "grad_gap", "eps_l",
                             "cosine", "abs_logit", "grad_l1")}
    for start in range(0, n, chunk):
        x = dataset.images[start:start + chunk][:n - start]
        y = dataset.labels[start:start + chunk][:n - start]
        grads, logits = per_class_input_gradients(net, x)
        b, n_c = logits.shape
        idx = np.arange(b)
        radii, _ = epsilon_l_batch(net, x, y)
        ru = nn.runner_up_classes(logits, y)
        gy = grads[y, idx]
        gru = grads[ru, idx]
        parts["logit_gap"].append(logits[idx, y] - logits[idx, ru])
        gaps_all = logits[idx, y][:, None] - logits
        keep = np.ones_like(gaps_all, dtype=bool)
        keep[idx, y] = False
        parts["logit_gap_all"].append(gaps_all[keep])
        parts["grad_gap"].append(np.abs(gy - gru).sum(axis=1))
        parts["eps_l"].append(radii)
        parts["cosine"].append(_cosines(gy, gru))
        parts["abs_logit"].append(np.abs(logits).ravel())
        parts["grad_l1"].append(np.abs(grads).sum(axis=2).ravel())
    merged = {k: np.concatenate(v) for k, v in parts.items()}
    hists = {}
    for key, vals in merged.items():
        rng = None
        if key == "eps_l" and eps_for_hist > 0:
            finite = vals[np.isfinite(vals)]
            if len(finite):
                hi = min(float(finite.max()), 10.0 * eps_for_hist)
                rng = (min(float(finite.min()), hi), hi)
        hists[key] = build_histogram(vals, bins=bins, hist_range=rng)
    return hists


# ---------------------------------------------------------------------------
# Activation accounting
# ---------------------------------------------------------------------------

def activation_profile(net, dataset, layer="penultimate", inactive_threshold=1e-3,
                       count=None, chunk=1000):
    """Cumulative |activation| per neuron and the count of inactive ones.

    A neuron is inactive iff its cumulative magnitude is strictly below
    inactive_threshold * (max over neurons); a network whose activations
    are all zero has every neuron inactive.
    """
    if layer not in ("penultimate", "logits"):
        raise ValueError(f"unknown layer {layer!r}")
    n = len(dataset) if count is None else min(count, len(dataset))
    cum = None
    for start in range(0, n, chunk):
        x = dataset.images[start:start + chunk][:n - start]
        trace = nn.forward(net, x)
        act = trace.penultimate if layer == "penultimate" else trace.logits
        act = np.abs(act.reshape(len(x), -1)).sum(axis=0)
        cum = act if cum is None else cum + act
    peak = cum.max()
    if peak == 0.0:
        inactive = len(cum)
    else:
        inactive = int((cum < inactive_threshold * peak).sum())
    return cum, inactive


# ---------------------------------------------------------------------------
# Robustness report
# ---------------------------------------------------------------------------

@dataclass
class RobustnessReport:
    """Per-example linearized quantities plus summary accuracies."""

    epsilon: float
    eps_l: np.ndarray
    logit_gap: np.ndarray
    grad_gap_l1: np.ndarray
    cosine: np.ndarray
    runner_up: np.ndarray
    summary: dict = field(default_factory=dict)

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.summary, f, sort_keys=True, indent=2)
            f.write("\n")

    def per_example_csv(self, path):
        with open(path, "w") as f:
            f.write("index,eps_L,logit_gap,grad_gap_l1,cosine,runner_up_class\n")
            for i in range(len(self.eps_l)):
                f.write(f"{i},{self.eps_l[i]!r},{self.logit_gap[i]!r},"
                        f"{self.grad_gap_l1[i]!r},{self.cosine[i]!r},{self.runner_up[i]}\n")


def robustness_report(net, dataset, epsilon, count=None, chunk=500,
                      empirical_fgsm=True, attack_seed=0) -> RobustnessReport:
    """Predicted-vs-empirical robustness at one epsilon.

    Predicted accuracy counts examples with linearized radius > epsilon;
    the empirical columns run one-step sign attacks on the cross-entropy
    and margin losses at the same epsilon.
    """
    n = len(dataset) if count is None else min(count, len(dataset))
    eps_l = []
    gaps = []
    dens = []
    coss = []
    rus = []
    for start in range(0, n, chunk):
        x = dataset.images[start:start + chunk][:n - start]
        y = dataset.labels[start:start + chunk][:n - start]
        grads, logits = per_class_input_gradients(net, x)
        idx = np.arange(len(y))
        radii, _ = epsilon_l_batch(net, x, y)
        ru = nn.runner_up_classes(logits, y)
        gy, gru = grads[y, idx], grads[ru, idx]
        eps_l.append(radii)
        gaps.append(logits[idx, y] - logits[idx, ru])
        dens.append(np.abs(gy - gru).sum(axis=1))
        coss.append(_cosines(gy, gru))
        rus.append(ru)
    eps_l = np.concatenate(eps_l)
    report = RobustnessReport(
        epsilon=float(epsilon),
        eps_l=eps_l,
        logit_gap=np.concatenate(gaps),
        grad_gap_l1=np.concatenate(dens),
        cosine=np.concatenate(coss),
        runner_up=np.concatenate(rus),
    )
    clean = evaluate(net, dataset, count=n)
    summary = {
        "n": n,
        "epsilon": float(epsilon),
        "predicted_accuracy": float((eps_l > epsilon).mean()),
        "clean_accuracy": clean.accuracy,
        "mean_logit_gap": float(report.logit_gap.mean()),
        "mean_grad_gap_l1": float(report.grad_gap_l1.mean()),
        "mean_cosine": float(report.cosine.mean()),
        "median_eps_l": float(np.median(eps_l[np.isfinite(eps_l)]))
        if np.isfinite(eps_l).any() else None,
    }
    if empirical_fgsm:
        for kind in ("xent", "cw"):
            cfg = AttackConfig(family="fgsm", loss_kind=kind, epsilon=float(epsilon),
                               random_init=False, seed=attack_seed)
            summary[f"empirical_fgsm_{kind}"] = evaluate(net, dataset, cfg, count=n).accuracy
    report.summary = summary
    return report
