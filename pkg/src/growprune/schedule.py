"""Bandwidth schedulers that anneal the gate relaxation toward discreteness.

Both rules share the same curve,
``min(bandwidth_init * (1 + rate*n)^power, bandwidth_max)``. The global
scheduler feeds it the shared iteration counter; the structure-wise
scheduler feeds each unit its own count of iterations in which its gate
was sampled active, so frequently kept units harden first while rarely
sampled ones stay soft enough to grow back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SchedulerConfig",
    "SchedulerState",
    "global_bandwidth",
    "structurewise_bandwidth",
    "record_sampled",
    "maybe_update",
]

MODES = ("global", "structure_wise")


@dataclass
class SchedulerConfig:
    rate: float = 0.0005
    power: float = 0.7
    bandwidth_init: float = 1.0
    bandwidth_max: float = 100.0
    update_interval: int = 1
    mode: str = "structure_wise"
    counter_start: int = 1

    def __post_init__(self):
        if self.rate < 0.0:
            raise ValueError(f"rate must be nonnegative, got {self.rate}")
        if self.power <= 0.0:
            raise ValueError(f"power must be positive, got {self.power}")
        if self.bandwidth_init <= 0.0:
            raise ValueError(
                f"initial bandwidth must be positive, got {self.bandwidth_init}"
            )
        if self.bandwidth_init > self.bandwidth_max:
            raise ValueError(
                f"initial bandwidth ({self.bandwidth_init}) exceeds the cap "
                f"({self.bandwidth_max})"
            )
        if self.update_interval < 1:
            raise ValueError(
                f"update interval must be >= 1, got {self.update_interval}"
            )
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.counter_start not in (0, 1):
            raise ValueError(f"counter_start must be 0 or 1, got {self.counter_start}")


class SchedulerState:
    """Global iteration counter plus the masks whose per-unit counters it drives."""

    def __init__(self, masks):
        self.masks = list(masks)
        self.n_iters = 0


def global_bandwidth(cfg, n_iters):
    """Shared bandwidth after ``n_iters`` training iterations."""
    if n_iters < 0:
        raise ValueError(f"iteration counter must be nonnegative, got {n_iters}")
    return min(cfg.bandwidth_init * (1.0 + cfg.rate * n_iters) ** cfg.power, cfg.bandwidth_max)


def structurewise_bandwidth(cfg, mask):
    """Per-unit bandwidths from the mask's active-sample counters.

    Writes the updated vector back onto the mask and returns it.
    """
    counts = mask.sample_counts.astype(np.float64)
    bandwidth = np.minimum(
        cfg.bandwidth_init * (1.0 + cfg.rate * counts) ** cfg.power, cfg.bandwidth_max
    )
    mask.bandwidth = bandwidth
    return bandwidth


def record_sampled(state, idx_sets):
    """Advance counters after one training iteration.

    ``idx_sets`` holds, for each mask in state order, the active index
    set returned by gate sampling; exactly those per-unit counters
    increase by one. The global iteration counter increases regardless.
    """
    if len(idx_sets) != len(state.masks):
        raise ValueError(
            f"expected {len(state.masks)} index sets, got {len(idx_sets)}"
        )
    for mask, idx in zip(state.masks, idx_sets):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(mask)):
            raise IndexError(f"gate index out of range for mask of {len(mask)} units")
        mask.sample_counts[idx] += 1
    state.n_iters += 1


def maybe_update(state, cfg, masks, r):
    """Apply the configured bandwidth rule when iteration ``r`` hits the interval."""
    if r % cfg.update_interval != 0:
        return
    if cfg.mode == "global":
        bandwidth = global_bandwidth(cfg, state.n_iters)
        for mask in masks:
            mask.bandwidth = np.full(len(mask), bandwidth)
    else:
        for mask in masks:
            structurewise_bandwidth(cfg, mask)
