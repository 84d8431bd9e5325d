"""Continuous mask variables, relaxed stochastic gates, and the sparsity penalty.

Each structured unit (filter, neuron, hidden unit) owns a continuous
``score``. A scaled hard sigmoid ``min(max(bandwidth*score + 0.5, 0), 1)``
relaxes the keep/prune decision into a probability; a Bernoulli gate is
sampled from it once per training iteration. As the bandwidth grows the
relaxation sharpens toward the sign of the score: once the probability
saturates at exactly 0 or 1 the unit is permanently pruned or kept,
because the sampled gate becomes deterministic and every gradient path
through the unit vanishes.
"""

from __future__ import annotations

import numpy as np

from . import autodiff
from .autodiff import Tensor

__all__ = [
    "MaskSet",
    "hard_sigmoid",
    "hard_sigmoid_grad",
    "sample_gates",
    "sparsity_penalty",
    "gate_factor",
    "extract_final_mask",
]


def _check_bandwidth(bandwidth):
    bandwidth = np.asarray(bandwidth, dtype=np.float64)
    if np.any(bandwidth <= 0.0):
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    return bandwidth


def hard_sigmoid(bandwidth, score):
    """min(max(bandwidth*score + 0.5, 0), 1); scalars or same-length arrays."""
    bandwidth = _check_bandwidth(bandwidth)
    score = np.asarray(score, dtype=np.float64)
    out = np.minimum(np.maximum(bandwidth * score + 0.5, 0.0), 1.0)
    return float(out) if out.ndim == 0 else out


def hard_sigmoid_grad(bandwidth, score):
    """Derivative w.r.t. score: the bandwidth strictly inside the linear
    region, else 0. The exact boundary points return 0."""
    bandwidth = _check_bandwidth(bandwidth)
    score = np.asarray(score, dtype=np.float64)
    lin = bandwidth * score + 0.5
    out = np.where((lin > 0.0) & (lin < 1.0), bandwidth, 0.0)
    return float(out) if out.ndim == 0 else out


class MaskSet:
    """Per-structure mask state for one layer.

    ``score`` is a trainable autodiff leaf (one entry per structured
    unit), initialized to exactly 0 so every unit starts at keep
    probability 0.5. ``bandwidth`` holds per-unit bandwidths (kept equal
    across units under the global scheduler), ``sample_counts`` the
    per-unit active-sample counters, and ``gate`` the last sampled 0/1
    gate vector.
    """

    def __init__(self, n_units, bandwidth_init=1.0, counter_start=1):
        if n_units < 1:
            raise ValueError(f"mask needs at least one unit, got {n_units}")
        if bandwidth_init <= 0.0:
            raise ValueError(f"initial bandwidth must be positive, got {bandwidth_init}")
        self.score = Tensor(np.zeros(n_units), requires_grad=True)
        self.bandwidth = np.full(n_units, float(bandwidth_init))
        self.sample_counts = np.full(n_units, int(counter_start), dtype=np.int64)
        self.gate = np.ones(n_units)

    def __len__(self):
        return self.score.size

    def keep_probs(self):
        """Current per-unit keep probabilities."""
        return hard_sigmoid(self.bandwidth, self.score.data)

    def keep_probs_op(self):
        """Keep probabilities as a graph node differentiable w.r.t. score."""
        probs = self.keep_probs()
        slope = hard_sigmoid_grad(self.bandwidth, self.score.data)
        return autodiff.apply_op(
            "hard_sigmoid", (self.score,), probs, lambda g: (g * slope,)
        )


def sample_gates(mask, rng):
    """Draw gate[i] ~ Bernoulli(keep_prob[i]) independently.

    Stores the gates on the mask and returns (gate, idx) where idx lists
    the active positions. ``rng`` must be a seeded numpy Generator.
    """
    probs = mask.keep_probs()
    gate = (rng.random(len(mask)) < probs).astype(np.float64)
    mask.gate = gate
    idx = np.flatnonzero(gate)
    return gate, idx


def sparsity_penalty(masks):
    """Sum of keep probabilities over every unit of every mask.

    The values are nonnegative, so this is the plain l1 norm of the
    relaxed masks; the trade-off multiplier is applied by the caller. The
    penalty does not depend on the sampled gates.
    """
    total = None
    for mask in masks:
        term = autodiff.sum_all(mask.keep_probs_op())
        total = term if total is None else autodiff.add(total, term)
    if total is None:
        return Tensor(np.asarray(0.0))
    return total


def gate_factor(mask):
    """Per-unit factor keep_prob * gate used to scale the layer output.

    Differentiable w.r.t. score with gradient gate * hard_sigmoid_grad,
    so units sampled inactive this iteration receive exactly zero loss
    gradient.
    """
    return autodiff.mul(mask.keep_probs_op(), Tensor(mask.gate))


def extract_final_mask(mask):
    """Deterministic binary mask: keep unit i iff score[i] > 0.

    Ties at score == 0 are pruned; a keep probability of 0.5 is no
    evidence the unit earned its place.
    """
    return (mask.score.data > 0.0).astype(np.float64)
