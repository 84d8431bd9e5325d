"""Final-architecture extraction, equivalence checking, cost accounting,
and checkpoint serialization.

The network is treated as a strict chain: removing a unit also removes
the matching input slice of the next layer (flatten expands a removed
channel to its block of spatial positions). Checkpoints are a
self-describing binary: magic ``GPCK``, a little-endian uint32 format
version, a little-endian uint64 header length, a canonical JSON header,
then the named arrays as little-endian float64, in header order. Files
are written atomically via a temp file and rename. See docs/FORMATS.md.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .layers import Flatten, MaskedConv2d, MaskedDense, MaskedLstm
from .masks import extract_final_mask
from .network import Network, build_network

__all__ = [
    "ArchitectureReport",
    "DegenerateNetworkError",
    "CheckpointError",
    "prune_model",
    "equivalence_check",
    "account",
    "save_checkpoint",
    "load_checkpoint",
    "write_report",
    "load_report",
]

CHECKPOINT_MAGIC = b"GPCK"
CHECKPOINT_VERSION = 1


class DegenerateNetworkError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class ArchitectureReport:
    """Retained structure, parameter and MAC accounting for one model."""

    input_shape: tuple
    layer_specs: list
    params_dense: int
    params_retained: int
    params_ratio: float
    macs_dense: int
    macs_retained: int
    macs_ratio: float
    train_macs_trace: list = field(default_factory=list)
    final_metric: float | None = None

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "layer_specs": self.layer_specs,
            "params_dense": self.params_dense,
            "params_retained": self.params_retained,
            "params_ratio": self.params_ratio,
            "macs_dense": self.macs_dense,
            "macs_retained": self.macs_retained,
            "macs_ratio": self.macs_ratio,
            "train_macs_trace": list(self.train_macs_trace),
            "final_metric": self.final_metric,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_shape=tuple(d["input_shape"]),
            layer_specs=d["layer_specs"],
            params_dense=d["params_dense"],
            params_retained=d["params_retained"],
            params_ratio=d["params_ratio"],
            macs_dense=d["macs_dense"],
            macs_retained=d["macs_retained"],
            macs_ratio=d["macs_ratio"],
            train_macs_trace=d.get("train_macs_trace", []),
            final_metric=d.get("final_metric"),
        )


def _kept_indices(layer):
    n = len(layer.mask) if layer.mask is not None else None
    if layer.mask is None:
        return None
    return np.flatnonzero(extract_final_mask(layer.mask))


def _connectivity_token(layer):
    token = getattr(layer, "connectivity_spec", None)
    if token is not None:
        return token
    return None if layer.connectivity is None else "custom"


def _structure_spec(layer):
    if isinstance(layer, Flatten):
        return {"kind": "flatten"}
    if isinstance(layer, MaskedConv2d):
        return {
            "kind": "conv",
            "out": layer.out_channels,
            "kernel": layer.kernel_size,
            "stride": layer.stride,
            "pad": layer.pad,
            "activation": layer.activation,
            "masked": layer.mask is not None,
        }
    if isinstance(layer, MaskedDense):
        return {
            "kind": "dense",
            "out": layer.d_out,
            "activation": layer.activation,
            "connectivity": _connectivity_token(layer),
            "masked": layer.mask is not None,
        }
    if isinstance(layer, MaskedLstm):
        return {"kind": "lstm", "out": layer.n_hidden, "masked": layer.mask is not None}
    raise TypeError(f"unknown layer {layer!r}")


# ---------------------------------------------------------------------------
# pruning


def prune_model(model):
    """Physically remove pruned units; returns a mask-free compact network.

    Raises DegenerateNetworkError if any masked layer keeps zero units.
    """
    new_layers = []
    in_idx = None  # retained input feature indices; None means all
    for i, layer in enumerate(model.layers):
        in_shape = model.layer_input_shape(i)
        if isinstance(layer, Flatten):
            if in_idx is not None:
                c, h, w = in_shape
                positions = h * w
                in_idx = np.concatenate(
                    [ch * positions + np.arange(positions) for ch in in_idx]
                ).astype(np.int64)
            new_layers.append(Flatten())
            continue
        if isinstance(layer, MaskedConv2d):
            kept = _kept_indices(layer)
            if kept is None:
                kept = np.arange(layer.out_channels)
            elif kept.size == 0:
                raise DegenerateNetworkError(f"layer {i} (conv) keeps no filters")
            cols = in_idx if in_idx is not None else np.arange(layer.in_channels)
            compact = MaskedConv2d(
                len(cols),
                len(kept),
                layer.kernel_size,
                stride=layer.stride,
                pad=layer.pad,
                activation=layer.activation,
            )
            compact.kernels = Tensor(
                layer.kernels.data[np.ix_(kept, cols)].copy(), requires_grad=True
            )
            compact.bias = Tensor(layer.bias.data[kept].copy(), requires_grad=True)
            new_layers.append(compact)
            in_idx = kept
            continue
        if isinstance(layer, MaskedDense):
            kept = _kept_indices(layer)
            if kept is None:
                kept = np.arange(layer.d_out)
            elif kept.size == 0:
                raise DegenerateNetworkError(f"layer {i} (dense) keeps no units")
            cols = in_idx if in_idx is not None else np.arange(layer.d_in)
            compact = MaskedDense(len(cols), len(kept), activation=layer.activation)
            compact.weight = Tensor(
                layer.weight.data[np.ix_(kept, cols)].copy(), requires_grad=True
            )
            compact.bias = Tensor(layer.bias.data[kept].copy(), requires_grad=True)
            if layer.connectivity is not None:
                compact.connectivity = layer.connectivity[np.ix_(kept, cols)].copy()
            new_layers.append(compact)
            in_idx = kept
            continue
        if isinstance(layer, MaskedLstm):
            kept = _kept_indices(layer)
            if kept is None:
                kept = np.arange(layer.n_hidden)
            elif kept.size == 0:
                raise DegenerateNetworkError(f"layer {i} (lstm) keeps no hidden units")
            cols = in_idx if in_idx is not None else np.arange(layer.d_in)
            compact = MaskedLstm(len(cols), len(kept))
            for name in ("f", "i", "o", "c"):
                w = getattr(layer, f"W_{name}").data
                u = getattr(layer, f"U_{name}").data
                b = getattr(layer, f"b_{name}").data
                setattr(compact, f"W_{name}", Tensor(w[np.ix_(kept, cols)].copy(), requires_grad=True))
                setattr(compact, f"U_{name}", Tensor(u[np.ix_(kept, kept)].copy(), requires_grad=True))
                setattr(compact, f"b_{name}", Tensor(b[kept].copy(), requires_grad=True))
            new_layers.append(compact)
            in_idx = kept
            continue
        raise TypeError(f"cannot prune layer {layer!r}")
    return Network(new_layers, model.input_shape)


def equivalence_check(full_model, compact_model, probes):
    """Max absolute output deviation between the deterministically masked
    full model and the compact model over the probe inputs."""
    gates = full_model.deterministic_gates()
    max_dev = 0.0
    for probe in probes:
        if full_model.is_sequence:
            full_out, _, _ = full_model.forward_sequence(probe, gates)
            compact_out, _, _ = compact_model.forward_sequence(probe)
            a = np.stack([t.data for t in full_out])
            b = np.stack([t.data for t in compact_out])
        else:
            a = full_model.forward(Tensor(np.asarray(probe)), gates).data
            b = compact_model.forward(Tensor(np.asarray(probe))).data
        if a.shape != b.shape:
            raise ValueError(
                f"output shapes differ: full {a.shape} vs compact {b.shape}"
            )
        max_dev = max(max_dev, float(np.max(np.abs(a - b))))
    return max_dev


# ---------------------------------------------------------------------------
# accounting


def _dense_pattern_count(connectivity, rows, cols):
    if connectivity is None:
        return len(rows) * len(cols)
    return int(np.count_nonzero(connectivity[np.ix_(rows, cols)]))


def account(model, trace=None, final_metric=None):
    """Parameter and MAC accounting of the model's extracted architecture.

    Parameter counts enumerate retained weights after cross-layer
    propagation; the MAC ratio divides the active count at the final
    masks by the all-units-active count.
    """
    layer_specs = []
    params_dense = 0
    params_kept = 0
    in_full = None
    in_kept = None
    for i, layer in enumerate(model.layers):
        in_shape = model.layer_input_shape(i)
        spec = _structure_spec(layer)
        if isinstance(layer, Flatten):
            c, h, w = in_shape
            if in_full is not None:
                in_full = in_full * h * w
                in_kept = in_kept * h * w
            layer_specs.append(spec)
            continue
        if isinstance(layer, MaskedConv2d):
            kept_idx = _kept_indices(layer)
            n_kept = layer.out_channels if kept_idx is None else int(kept_idx.size)
            cin_full = layer.in_channels if in_full is None else in_full
            cin_kept = layer.in_channels if in_kept is None else in_kept
            k2 = layer.kernel_size**2
            params_dense += layer.out_channels * layer.in_channels * k2 + layer.out_channels
            params_kept += n_kept * cin_kept * k2 + n_kept
            in_full, in_kept = layer.out_channels, n_kept
        elif isinstance(layer, MaskedDense):
            kept_idx = _kept_indices(layer)
            rows = np.arange(layer.d_out) if kept_idx is None else kept_idx
            n_kept = len(rows)
            cols_full = np.arange(layer.d_in)
            cols_kept = cols_full if in_kept is None else _account_cols(model, i)
            params_dense += (
                _dense_pattern_count(layer.connectivity, np.arange(layer.d_out), cols_full)
                + layer.d_out
            )
            params_kept += _dense_pattern_count(layer.connectivity, rows, cols_kept) + n_kept
            in_full, in_kept = layer.d_out, n_kept
        elif isinstance(layer, MaskedLstm):
            kept_idx = _kept_indices(layer)
            n_kept = layer.n_hidden if kept_idx is None else int(kept_idx.size)
            d_full = layer.d_in if in_full is None else in_full
            d_kept = layer.d_in if in_kept is None else in_kept
            params_dense += 4 * (layer.n_hidden * d_full + layer.n_hidden**2 + layer.n_hidden)
            params_kept += 4 * (n_kept * d_kept + n_kept**2 + n_kept)
            in_full, in_kept = layer.n_hidden, n_kept
        if kept_idx is not None:
            spec["kept_units"] = int(kept_idx.size)
            spec["kept_indices"] = [int(v) for v in kept_idx]
        else:
            spec["kept_units"] = spec["out"]
        layer_specs.append(spec)

    macs_dense = model.dense_macs()
    _, macs_kept = model.macs_by_layer(model.final_active_counts())
    report = ArchitectureReport(
        input_shape=model.input_shape,
        layer_specs=layer_specs,
        params_dense=int(params_dense),
        params_retained=int(params_kept),
        params_ratio=params_kept / params_dense if params_dense else 1.0,
        macs_dense=int(macs_dense),
        macs_retained=int(macs_kept),
        macs_ratio=macs_kept / macs_dense if macs_dense else 1.0,
        train_macs_trace=[r.active_macs for r in trace.records] if trace is not None else [],
        final_metric=final_metric,
    )
    return report


def _account_cols(model, layer_index):
    """Retained input column indices for a dense layer, derived by walking
    the chain the same way prune_model does (needed only for connectivity
    pattern counting)."""
    in_idx = None
    for i, layer in enumerate(model.layers):
        if i == layer_index:
            break
        in_shape = model.layer_input_shape(i)
        if isinstance(layer, Flatten):
            if in_idx is not None:
                c, h, w = in_shape
                positions = h * w
                in_idx = np.concatenate(
                    [ch * positions + np.arange(positions) for ch in in_idx]
                ).astype(np.int64)
            continue
        kept = _kept_indices(layer)
        if kept is None:
            kept = np.arange(_out_units(layer))
        in_idx = kept
    if in_idx is None:
        return np.arange(model.layers[layer_index].d_in)
    return in_idx


def _out_units(layer):
    if isinstance(layer, MaskedConv2d):
        return layer.out_channels
    if isinstance(layer, MaskedDense):
        return layer.d_out
    if isinstance(layer, MaskedLstm):
        return layer.n_hidden
    raise TypeError(f"layer {layer!r} has no units")


# ---------------------------------------------------------------------------
# reports on disk


def write_report(report, out_dir):
    """Emit report.json (machine-readable) and report.txt (table)."""
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, "report.json")
    txt_path = os.path.join(out_dir, "report.txt")
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    lines = [
        f"{'layer':<10}{'kind':<10}{'units':>8}{'kept':>8}",
        "-" * 36,
    ]
    for i, spec in enumerate(report.layer_specs):
        if spec["kind"] == "flatten":
            continue
        lines.append(
            f"{'layer' + str(i):<10}{spec['kind']:<10}{spec['out']:>8}{spec['kept_units']:>8}"
        )
    lines.append("-" * 36)
    lines.append(
        f"params: {report.params_retained}/{report.params_dense} "
        f"({100.0 * report.params_ratio:.1f}%)"
    )
    lines.append(
        f"macs:   {report.macs_retained}/{report.macs_dense} "
        f"({100.0 * report.macs_ratio:.1f}%)"
    )
    if report.final_metric is not None:
        lines.append(f"final metric: {report.final_metric:.6f}")
    with open(txt_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return json_path, txt_path


def load_report(path):
    with open(path, encoding="utf-8") as f:
        return ArchitectureReport.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# checkpoints


def _model_arrays(model):
    arrays = []
    for name, tensor in model.parameters():
        arrays.append((name, tensor.data))
    for i, layer in model.masked_layers():
        mask = layer.mask
        arrays.append((f"layer{i}.mask.score", mask.score.data))
        arrays.append((f"layer{i}.mask.bandwidth", mask.bandwidth))
        arrays.append((f"layer{i}.mask.sample_counts", mask.sample_counts.astype(np.float64)))
        arrays.append((f"layer{i}.mask.gate", mask.gate))
    for i, layer in enumerate(model.layers):
        if isinstance(layer, MaskedDense) and layer.connectivity is not None:
            arrays.append((f"layer{i}.connectivity", layer.connectivity))
    return arrays


def save_checkpoint(path, model, trainer=None):
    """Serialize the model (and, if given, full trainer state) atomically."""
    arrays = _model_arrays(model)
    train_header = None
    if trainer is not None:
        from dataclasses import asdict

        for name in sorted(trainer.w_opt.velocities):
            arrays.append((f"vel_w.{name}", trainer.w_opt.velocities[name]))
        for name in sorted(trainer.s_opt.velocities):
            arrays.append((f"vel_s.{name}", trainer.s_opt.velocities[name]))
        cfg_dict = asdict(trainer.cfg)
        cfg_dict["lr_schedule"] = [list(pair) for pair in trainer.cfg.lr_schedule]
        train_header = {
            "epochs_done": trainer.epochs_done,
            "n_iters": trainer.sched_state.n_iters,
            "lr_scale_w": trainer.w_opt.lr_scale,
            "lr_scale_s": trainer.s_opt.lr_scale,
            "rng_state": trainer.rng.bit_generator.state,
            "cfg": cfg_dict,
        }
    header = {
        "format_version": CHECKPOINT_VERSION,
        "input_shape": list(model.input_shape),
        "layers": [_structure_spec(layer) for layer in model.layers],
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "train": train_header,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", CHECKPOINT_VERSION))
            f.write(struct.pack("<Q", len(header_bytes)))
            f.write(header_bytes)
            for _, arr in arrays:
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise
    return path


def load_checkpoint(path, data=None):
    """Rebuild a model (and trainer, when training state is present and a
    dataset is supplied) from a checkpoint file.

    Returns (model, trainer_or_None). Raises CheckpointError on bad magic,
    version mismatch, or truncation; nothing is partially constructed.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    (header_len,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc

    offset = 16 + header_len
    values = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated payload at array {entry['name']}")
        values[entry["name"]] = np.frombuffer(
            blob, dtype="<f8", count=count, offset=offset
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after payload")

    specs = []
    for spec in header["layers"]:
        spec = dict(spec)
        spec.pop("connectivity", None)  # wiring restored from the payload below
        specs.append(spec)
    model = build_network(specs, header["input_shape"], np.random.default_rng(0))
    for name, tensor in model.parameters():
        if name not in values:
            raise CheckpointError(f"{path}: missing array {name}")
        tensor.data = values[name]
        tensor.grad = np.zeros_like(tensor.data)
    for i, layer in model.masked_layers():
        mask = layer.mask
        mask.score.data = values[f"layer{i}.mask.score"]
        mask.score.grad = np.zeros_like(mask.score.data)
        mask.bandwidth = values[f"layer{i}.mask.bandwidth"]
        mask.sample_counts = values[f"layer{i}.mask.sample_counts"].astype(np.int64)
        mask.gate = values[f"layer{i}.mask.gate"]
    for i, layer in enumerate(model.layers):
        key = f"layer{i}.connectivity"
        if key in values and isinstance(layer, MaskedDense):
            layer.connectivity = values[key]

    trainer = None
    train_header = header.get("train")
    if train_header is not None and data is not None:
        from .schedule import SchedulerConfig
        from .training import TrainConfig, Trainer

        cfg_dict = dict(train_header["cfg"])
        sched = SchedulerConfig(**cfg_dict.pop("scheduler"))
        cfg_dict["lr_schedule"] = tuple(tuple(p) for p in cfg_dict["lr_schedule"])
        cfg = TrainConfig(scheduler=sched, **cfg_dict)
        trainer = Trainer(model, data, cfg)
        trainer.epochs_done = train_header["epochs_done"]
        trainer.sched_state.n_iters = train_header["n_iters"]
        trainer.w_opt.lr_scale = train_header["lr_scale_w"]
        trainer.s_opt.lr_scale = train_header["lr_scale_s"]
        trainer.rng.bit_generator.state = train_header["rng_state"]
        for name in trainer.w_opt.velocities:
            trainer.w_opt.velocities[name] = values[f"vel_w.{name}"]
        for name in trainer.s_opt.velocities:
            trainer.s_opt.velocities[name] = values[f"vel_s.{name}"]
    return model, trainer
