"""Chain container for masked layers.

A network is a strict chain (no branching). It owns the cross-layer
coupling for cost accounting: a layer's active input count is the
upstream layer's active output count, with flatten expanding channels by
their spatial positions and a per-step multiplier for layers applied
after an LSTM.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .layers import Flatten, MaskedConv2d, MaskedDense, MaskedLstm
from .masks import extract_final_mask, gate_factor

__all__ = ["Network", "build_network"]


def _connectivity_matrix(token, d_out, d_in):
    if token is None:
        return None
    if token == "diagonal":
        if d_out != d_in:
            raise ValueError(
                f"diagonal connectivity needs square wiring, got {d_out}x{d_in}"
            )
        return np.eye(d_out, d_in)
    if isinstance(token, dict) and "identity_rows" in token:
        rows = token["identity_rows"]
        return np.eye(d_in)[np.asarray(rows, dtype=np.int64)]
    raise ValueError(f"unknown connectivity spec {token!r}")


def build_network(specs, input_shape, rng, bandwidth_init=1.0, counter_start=1):
    """Construct a chain from layer-spec dicts, inferring input widths.

    Spec keys: kind (conv/dense/lstm/flatten), out, and per kind: kernel,
    stride, pad for conv; activation for conv/dense; connectivity for
    dense; masked for any unit-bearing layer.
    """
    layers = []
    cur = tuple(int(v) for v in input_shape)
    for spec in specs:
        kind = spec["kind"]
        masked = bool(spec.get("masked", False))
        if kind == "flatten":
            layer = Flatten()
            cur = layer.out_shape(cur)
        elif kind == "conv":
            if len(cur) != 3:
                raise ValueError(f"conv layer needs (C,H,W) input, got {cur}")
            layer = MaskedConv2d(
                cur[0],
                spec["out"],
                spec["kernel"],
                stride=spec.get("stride", 1),
                pad=spec.get("pad", 0),
                rng=rng,
                masked=masked,
                activation=spec.get("activation", "none"),
                bandwidth_init=bandwidth_init,
                counter_start=counter_start,
            )
            cur = layer.out_shape(cur)
        elif kind == "dense":
            if len(cur) != 1:
                raise ValueError(f"dense layer needs flat input, got {cur}")
            conn = _connectivity_matrix(spec.get("connectivity"), spec["out"], cur[0])
            layer = MaskedDense(
                cur[0],
                spec["out"],
                rng=rng,
                masked=masked,
                activation=spec.get("activation", "none"),
                connectivity=conn,
                bandwidth_init=bandwidth_init,
                counter_start=counter_start,
            )
            layer.connectivity_spec = spec.get("connectivity")
            cur = layer.out_shape(cur)
        elif kind == "lstm":
            if len(cur) != 2:
                raise ValueError(f"lstm layer needs (T, d) input, got {cur}")
            layer = MaskedLstm(
                cur[1],
                spec["out"],
                rng=rng,
                masked=masked,
                bandwidth_init=bandwidth_init,
                counter_start=counter_start,
            )
            cur = (layer.n_hidden,)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        layers.append(layer)
    return Network(layers, input_shape)


class Network:
    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for i, layer in enumerate(self.layers):
            if isinstance(layer, MaskedLstm) and i != 0:
                raise ValueError("an LSTM is only supported as the first layer")
        self._in_shapes = self._compute_shapes()

    def _compute_shapes(self):
        shapes = []
        cur = self.input_shape
        for layer in self.layers:
            shapes.append(cur)
            if isinstance(layer, MaskedLstm):
                layer.out_shape(cur)
                cur = (layer.n_hidden,)  # downstream head runs per step
            else:
                cur = layer.out_shape(cur)
        return shapes

    @property
    def is_sequence(self):
        return isinstance(self.layers[0], MaskedLstm)

    def layer_input_shape(self, i):
        return self._in_shapes[i]

    def output_width(self):
        last = self.layers[-1]
        if isinstance(last, MaskedDense):
            return last.d_out
        raise ValueError("network must end in a dense layer to have an output width")

    # -- mask plumbing ------------------------------------------------------

    def masked_layers(self):
        return [(i, layer) for i, layer in enumerate(self.layers) if layer.mask is not None]

    def masks(self):
        return [layer.mask for _, layer in self.masked_layers()]

    def sample_gates(self, rng):
        """Resample every mask's gates; returns the per-mask active index sets."""
        from .masks import sample_gates

        idx_sets = []
        for _, layer in self.masked_layers():
            _, idx = sample_gates(layer.mask, rng)
            idx_sets.append(idx)
        return idx_sets

    def training_gates(self):
        """Differentiable sigma*q gate tensors keyed by layer index."""
        return {i: gate_factor(layer.mask) for i, layer in self.masked_layers()}

    def deterministic_gates(self):
        """Constant sign(s) gate tensors keyed by layer index."""
        return {i: Tensor(extract_final_mask(layer.mask)) for i, layer in self.masked_layers()}

    # -- forward ------------------------------------------------------------

    def forward(self, x, gates=None):
        if self.is_sequence:
            raise ValueError("sequence networks are driven via forward_sequence")
        gates = gates or {}
        y = x if isinstance(x, Tensor) else Tensor(x)
        for i, layer in enumerate(self.layers):
            y = layer.forward(y, gates.get(i))
        return y

    def forward_sequence(self, x_seq, gates=None, h0=None, c0=None):
        """Per-step outputs of an LSTM-headed chain over [time, batch, d_in]."""
        if not self.is_sequence:
            raise ValueError("not a sequence network")
        gates = gates or {}
        lstm = self.layers[0]
        h_seq, h_t, c_t = lstm.forward(x_seq, h0=h0, c0=c0, gate=gates.get(0))
        outputs = []
        for h in h_seq:
            y = h
            for i, layer in enumerate(self.layers[1:], start=1):
                y = layer.forward(y, gates.get(i))
            outputs.append(y)
        return outputs, h_t, c_t

    # -- parameters ---------------------------------------------------------

    def parameters(self):
        items = []
        for i, layer in enumerate(self.layers):
            for name, tensor in layer.param_items():
                items.append((f"layer{i}.{name}", tensor))
        return items

    def mask_parameters(self):
        return [(f"layer{i}.mask.s", layer.mask.s) for i, layer in self.masked_layers()]

    # -- cost accounting ----------------------------------------------------

    def macs_by_layer(self, active_out=None):
        """Per-sample MAC count per layer given active output-unit counts.

        ``active_out`` maps layer index to the number of active units;
        missing entries mean all units. Active input counts are threaded
        down the chain. Returns (per_layer list, total).
        """
        active_out = active_out or {}
        per_layer = []
        in_shape = self.input_shape
        act_in = None  # None means the full input width
        steps = 1
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Flatten):
                c, h, w = in_shape
                if act_in is not None:
                    act_in = act_in * h * w
                per_layer.append(0)
                in_shape = layer.out_shape(in_shape)
                continue
            if isinstance(layer, MaskedLstm):
                n_act = active_out.get(i, layer.n_hidden)
                t, d = in_shape
                in_act = d if act_in is None else act_in
                macs = t * (4 * (n_act * in_act + n_act * n_act) + 3 * n_act)
                per_layer.append(macs)
                steps = t
                act_in = n_act
                in_shape = (layer.n_hidden,)
                continue
            if isinstance(layer, MaskedConv2d):
                n_act = active_out.get(i, layer.out_channels)
                c, h, w = in_shape
                in_act = c if act_in is None else act_in
                _, h_out, w_out = layer.out_shape(in_shape)
                per_layer.append(layer.kernel_size**2 * in_act * n_act * h_out * w_out)
                act_in = n_act
                in_shape = layer.out_shape(in_shape)
                continue
            if isinstance(layer, MaskedDense):
                n_act = active_out.get(i, layer.d_out)
                in_act = in_shape[0] if act_in is None else act_in
                per_layer.append(in_act * n_act * steps)
                act_in = n_act
                in_shape = layer.out_shape(in_shape)
                continue
            raise TypeError(f"unsupported layer {layer!r}")
        return per_layer, int(sum(per_layer))

    def dense_macs(self):
        """MACs with every unit active."""
        _, total = self.macs_by_layer()
        return total

    def sampled_active_counts(self):
        """Active output-unit counts from the last sampled gates."""
        return {
            i: int(np.count_nonzero(layer.mask.gate)) for i, layer in self.masked_layers()
        }

    def final_active_counts(self):
        """Active output-unit counts under the deterministic sign(s) mask."""
        return {
            i: int(np.count_nonzero(extract_final_mask(layer.mask)))
            for i, layer in self.masked_layers()
        }
