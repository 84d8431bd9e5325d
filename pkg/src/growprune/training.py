"""Joint SGD training of layer weights and mask scores.

Each iteration samples a minibatch, resamples every mask's Bernoulli
gates, runs the gated forward pass, adds the weighted sparsity penalty to
the task loss, backpropagates once, and steps two optimizers: plain
momentum SGD for weights, and a mask optimizer that additionally freezes
the velocity of units whose keep probability has saturated at exactly 0
or 1, so saturated scores are bit-unchanged for the rest of the run.
Runs are bit-reproducible given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .masks import sparsity_penalty
from .schedule import SchedulerConfig, SchedulerState, maybe_update, record_sampled

__all__ = [
    "TrainConfig",
    "TrainTrace",
    "TrainingDiverged",
    "sgd_step",
    "SgdOptimizer",
    "MaskOptimizer",
    "Trainer",
    "train_run",
    "evaluate",
    "retrain_from_scratch",
]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    penalty_weight: float = 0.01
    lr_weights: float = 0.05
    lr_masks: float = 0.1
    momentum_weights: float = 0.9
    momentum_masks: float = 0.9
    weight_decay: float = 1e-4
    mask_weight_decay: float = 0.0  # masks never decay; kept explicit
    epochs: int = 1
    batch_size: int = 32
    lr_schedule: tuple = ()  # ((epoch, divisor), ...)
    seed: int = 0
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)

    def __post_init__(self):
        if self.penalty_weight < 0.0:
            raise ValueError(f"penalty weight must be nonnegative, got {self.penalty_weight}")
        if self.mask_weight_decay != 0.0:
            raise ValueError("mask scores must not carry weight decay")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr_weights <= 0.0 or self.lr_masks <= 0.0:
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight decay must be nonnegative, got {self.weight_decay}")


@dataclass
class TraceRecord:
    iteration: int
    epoch: int
    loss: float
    penalty: float
    active_counts: dict
    active_macs_per_layer: list
    active_macs: int
    bandwidth_min: float
    bandwidth_mean: float
    bandwidth_max: float


class TrainTrace:
    """Append-only per-iteration log of the run."""

    def __init__(self):
        self.records = []

    def append(self, record):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def active_macs_series(self):
        return np.array([r.active_macs for r in self.records], dtype=np.float64)


def sgd_step(param, grad, velocity, lr, momentum, weight_decay):
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.

    Updates ``param`` and ``velocity`` in place and returns ``param``.
    """
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ValueError(
            f"shape mismatch in sgd_step: param {param.shape}, grad {grad.shape}, "
            f"velocity {velocity.shape}"
        )
    velocity *= momentum
    velocity += grad
    if weight_decay:
        velocity += weight_decay * param
    param -= lr * velocity
    return param


class SgdOptimizer:
    """Momentum SGD over named tensors, with a shared learning-rate scale."""

    def __init__(self, named_params, lr, momentum, weight_decay):
        self.named_params = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_scale = 1.0
        self.velocities = {
            name: np.zeros_like(t.data) for name, t in self.named_params
        }

    def zero_grad(self):
        for _, t in self.named_params:
            t.zero_grad()

    def step(self):
        lr = self.lr * self.lr_scale
        for name, t in self.named_params:
            sgd_step(t.data, t.grad, self.velocities[name], lr, self.momentum, self.weight_decay)


class MaskOptimizer(SgdOptimizer):
    """SGD for mask scores: zero decay, and velocities of saturated units
    are cleared so a score in a saturated region never moves again."""

    def __init__(self, named_scores, masks, lr, momentum):
        super().__init__(named_scores, lr, momentum, weight_decay=0.0)
        self.masks = list(masks)

    def step(self):
        lr = self.lr * self.lr_scale
        for (name, t), mask in zip(self.named_params, self.masks):
            probs = mask.keep_probs()
            saturated = (probs == 0.0) | (probs == 1.0)
            vel = self.velocities[name]
            vel *= self.momentum
            vel += t.grad
            vel[saturated] = 0.0
            t.data -= lr * vel


def _classification_loss(model, inputs, targets, gates):
    logits = model.forward(Tensor(inputs), gates)
    return ad.softmax_cross_entropy(logits, targets), logits


def _sequence_loss(model, inputs, targets, gates):
    outputs, _, _ = model.forward_sequence(inputs, gates)
    n_steps = len(outputs)
    loss = None
    for t, logits in enumerate(outputs):
        step = ad.smul(ad.softmax_cross_entropy(logits, targets[t]), 1.0 / n_steps)
        loss = step if loss is None else ad.add(loss, step)
    return loss, outputs


class Trainer:
    """Holds everything a run needs so it can be checkpointed and resumed."""

    def __init__(self, model, data, cfg):
        self.model = model
        self.data = data
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.w_opt = SgdOptimizer(
            model.parameters(), cfg.lr_weights, cfg.momentum_weights, cfg.weight_decay
        )
        self.s_opt = MaskOptimizer(
            model.mask_parameters(), model.masks(), cfg.lr_masks, cfg.momentum_masks
        )
        self.sched_state = SchedulerState(model.masks())
        self.epochs_done = 0
        self.trace = TrainTrace()

    def _apply_lr_schedule(self, epoch):
        for at_epoch, divisor in self.cfg.lr_schedule:
            if epoch == at_epoch:
                self.w_opt.lr_scale /= divisor
                self.s_opt.lr_scale /= divisor

    def _iteration(self, inputs, targets):
        model, cfg = self.model, self.cfg
        masks = model.masks()
        graph = Graph()
        with graph:
            idx_sets = model.sample_gates(self.rng)
            gates = model.training_gates() if masks else {}
            if model.is_sequence:
                task_loss, _ = _sequence_loss(model, inputs, targets, gates)
            else:
                task_loss, _ = _classification_loss(model, inputs, targets, gates)
            if masks:
                penalty = sparsity_penalty(masks)
                total = ad.add(task_loss, ad.smul(penalty, cfg.penalty_weight))
            else:
                penalty = None
                total = task_loss
        loss_val = float(task_loss.data)
        penalty_val = float(penalty.data) if penalty is not None else 0.0
        if not np.isfinite(loss_val + penalty_val):
            raise TrainingDiverged(
                f"non-finite objective at iteration {self.sched_state.n_iters + 1}: "
                f"loss={loss_val}, penalty={penalty_val}"
            )
        self.w_opt.zero_grad()
        self.s_opt.zero_grad()
        ad.backward(graph, total)
        self.w_opt.step()
        if masks:
            self.s_opt.step()
            record_sampled(self.sched_state, idx_sets)
            maybe_update(self.sched_state, cfg.scheduler, masks, self.sched_state.n_iters)
        else:
            self.sched_state.n_iters += 1
        return loss_val, penalty_val

    def _record(self, epoch, loss_val, penalty_val):
        model = self.model
        counts = model.sampled_active_counts()
        per_layer, total = model.macs_by_layer(counts)
        masks = model.masks()
        if masks:
            bands = np.concatenate([m.bandwidth for m in masks])
            bmin, bmean, bmax = float(bands.min()), float(bands.mean()), float(bands.max())
        else:
            bmin = bmean = bmax = 0.0
        rec = TraceRecord(
            iteration=self.sched_state.n_iters,
            epoch=epoch,
            loss=loss_val,
            penalty=penalty_val,
            active_counts=counts,
            active_macs_per_layer=per_layer,
            active_macs=total,
            bandwidth_min=bmin,
            bandwidth_mean=bmean,
            bandwidth_max=bmax,
        )
        self.trace.append(rec)
        return rec

    def run_epoch(self, metrics_cb=None, log_every=50):
        """Train one epoch. ``metrics_cb(record, metric)`` fires every
        ``log_every`` iterations (metric None) and once at epoch end with
        the deterministic validation metric."""
        data, cfg = self.data, self.cfg
        if data.train_count == 0:
            raise ValueError("training dataset is empty")
        epoch = self.epochs_done
        self._apply_lr_schedule(epoch)
        order = self.rng.permutation(data.train_count)
        for start in range(0, data.train_count, cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            inputs, targets = data.train_batch(batch_idx)
            loss_val, penalty_val = self._iteration(inputs, targets)
            rec = self._record(epoch, loss_val, penalty_val)
            if metrics_cb is not None and rec.iteration % log_every == 0:
                metrics_cb(rec, None)
        self.epochs_done += 1
        if metrics_cb is not None:
            metric = evaluate(self.model, data, mode="deterministic", split="val")
            metrics_cb(self.trace.records[-1], metric)

    def run(self, metrics_cb=None, log_every=50):
        """Train the remaining epochs; returns the trace."""
        while self.epochs_done < self.cfg.epochs:
            self.run_epoch(metrics_cb=metrics_cb, log_every=log_every)
        return self.trace


def train_run(model, data, cfg, metrics_cb=None, log_every=50):
    """Run the full schedule on a fresh trainer; returns (model, trace)."""
    trainer = Trainer(model, data, cfg)
    trainer.run(metrics_cb=metrics_cb, log_every=log_every)
    return model, trainer.trace


def evaluate(model, data, mode="deterministic", split="val", rng=None, batch_size=256):
    """Accuracy (classification) or perplexity (sequence models) on a split.

    Deterministic mode gates every masked layer with its extracted final
    mask; stochastic mode resamples gates per batch and needs ``rng``.
    """
    if mode not in ("deterministic", "stochastic"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if mode == "stochastic" and rng is None:
        raise ValueError("stochastic evaluation needs an rng")
    batches = list(data.eval_batches(split, batch_size))
    if not batches:
        raise ValueError(f"evaluation split {split!r} is empty")

    def gates_for_batch():
        if not model.masks():
            return {}
        if mode == "deterministic":
            return model.deterministic_gates()
        model.sample_gates(rng)
        return {
            i: Tensor(layer.mask.keep_probs() * layer.mask.gate)
            for i, layer in model.masked_layers()
        }

    if model.is_sequence:
        total_nll = 0.0
        total_tokens = 0
        for inputs, targets in batches:
            outputs, _, _ = model.forward_sequence(inputs, gates_for_batch())
            for t, logits in enumerate(outputs):
                nll = ad.softmax_cross_entropy(logits, targets[t])
                total_nll += float(nll.data) * targets.shape[1]
                total_tokens += targets.shape[1]
        return float(np.exp(total_nll / total_tokens))

    correct = 0
    total = 0
    for inputs, targets in batches:
        logits = model.forward(Tensor(inputs), gates_for_batch())
        pred = np.argmax(logits.data, axis=1)
        correct += int(np.sum(pred == targets))
        total += len(targets)
    return correct / total


def retrain_from_scratch(report, data, cfg):
    """Rebuild the pruned architecture with fresh weights and train it plain.

    ``report`` is the accounting report of a finished run; the compact
    layer widths are taken from it, masks are disabled, and the same
    budget is applied. Returns (model, final metric).
    """
    from .network import build_network

    specs = []
    for layer_spec in report.layer_specs:
        spec = dict(layer_spec)
        if spec.get("masked"):
            kept = spec["kept_units"]
            if kept == 0:
                raise ValueError(
                    f"architecture has a layer with zero kept units: {spec}"
                )
            spec["out"] = kept
        spec["masked"] = False
        spec.pop("kept_units", None)
        spec.pop("kept_indices", None)
        specs.append(spec)
    rng = np.random.default_rng(cfg.seed)
    model = build_network(specs, report.input_shape, rng)
    train_run(model, data, cfg)
    metric = evaluate(model, data, mode="deterministic", split="val")
    return model, metric
