"""Maskable structured layers: dense, 2-D convolution, and LSTM.

Every masked layer owns a MaskSet with one entry per structured unit
(output neuron, filter, or hidden unit). Gating is applied on the output
side for dense/conv layers: unit i's activation is multiplied by its gate
factor, so a zero gate makes the unit's output exactly zero and starves
its parameters of gradient. The LSTM applies the gate to each unit's
pre-activation pathway in all four gates and to the emitted hidden state;
with zero initial state this forces h and c of a pruned unit to exact
zeros at every timestep and zeroes the gradient of its weight rows and
recurrent columns, which is the functional content of masking the weight
matrices themselves (and coincides with it exactly for binary masks).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masks import MaskSet

__all__ = [
    "MaskedDense",
    "MaskedConv2d",
    "MaskedLstm",
    "Flatten",
    "active_flops",
]

_ACTIVATIONS = ("none", "relu", "tanh")


def _uniform(rng, shape, fan_in):
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _activate(y, activation):
    if activation == "relu":
        return ad.relu(y)
    if activation == "tanh":
        return ad.tanh(y)
    return y


def _check_activation(activation):
    if activation not in _ACTIVATIONS:
        raise ValueError(f"activation must be one of {_ACTIVATIONS}, got {activation!r}")


class Flatten:
    """Collapse [N, C, H, W] feature maps to [N, C*H*W] rows."""

    kind = "flatten"
    mask = None

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, gate=None):
        n = x.shape[0]
        return ad.reshape(x, (n, -1))

    def param_items(self):
        return []


class MaskedDense:
    """Affine layer whose output neurons are the structured units.

    ``connectivity`` optionally fixes a binary wiring pattern on the
    weight matrix (e.g. one input feature per unit); entries outside the
    pattern stay exactly zero and receive no gradient.
    """

    kind = "dense"

    def __init__(
        self,
        d_in,
        d_out,
        rng=None,
        masked=False,
        activation="none",
        connectivity=None,
        bandwidth_init=1.0,
        counter_start=1,
    ):
        _check_activation(activation)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in = int(d_in)
        self.d_out = int(d_out)
        self.activation = activation
        self.weight = Tensor(_uniform(rng, (d_out, d_in), d_in), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)
        if connectivity is not None:
            connectivity = np.asarray(connectivity, dtype=np.float64)
            if connectivity.shape != (d_out, d_in):
                raise ValueError(
                    f"connectivity shape {connectivity.shape} != weight shape {(d_out, d_in)}"
                )
            self.weight.data *= connectivity
        self.connectivity = connectivity
        self.mask = (
            MaskSet(d_out, bandwidth_init=bandwidth_init, counter_start=counter_start)
            if masked
            else None
        )

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.d_in:
            raise ValueError(f"dense layer expects ({self.d_in},) input, got {in_shape}")
        return (self.d_out,)

    def forward(self, x, gate=None):
        if x.shape[-1] != self.d_in:
            raise ValueError(
                f"dense input has {x.shape[-1]} features, layer expects {self.d_in}"
            )
        w = self.weight
        if self.connectivity is not None:
            w = ad.mul(w, Tensor(self.connectivity))
        y = ad.add(ad.matmul(x, ad.transpose(w)), self.bias)
        y = _activate(y, self.activation)
        if gate is not None:
            y = ad.mul(y, gate)
        return y

    def param_items(self):
        return [("weight", self.weight), ("bias", self.bias)]


class MaskedConv2d:
    """2-D convolution whose output filters are the structured units."""

    kind = "conv"

    def __init__(
        self,
        in_channels,
        out_channels,
        kernel_size,
        stride=1,
        pad=0,
        rng=None,
        masked=False,
        activation="none",
        bandwidth_init=1.0,
        counter_start=1,
    ):
        _check_activation(activation)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.pad = int(pad)
        self.activation = activation
        fan_in = in_channels * kernel_size * kernel_size
        self.kernels = Tensor(
            _uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        self.mask = (
            MaskSet(out_channels, bandwidth_init=bandwidth_init, counter_start=counter_start)
            if masked
            else None
        )

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ValueError(
                f"conv layer expects {self.in_channels} input channels, got {c}"
            )
        k, s, p = self.kernel_size, self.stride, self.pad
        return (self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def forward(self, x, gate=None):
        y = ad.conv2d(x, self.kernels, stride=self.stride, pad=self.pad)
        y = ad.channel_bias(y, self.bias)
        y = _activate(y, self.activation)
        if gate is not None:
            y = ad.channel_scale(y, gate)
        return y

    def param_items(self):
        return [("kernels", self.kernels), ("bias", self.bias)]


class MaskedLstm:
    """Single LSTM cell unrolled over time; hidden units are the structured
    units and one mask entry gates a unit identically in all four gates."""

    kind = "lstm"

    def __init__(
        self, d_in, n_hidden, rng=None, masked=False, bandwidth_init=1.0, counter_start=1
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in = int(d_in)
        self.n_hidden = int(n_hidden)
        h = self.n_hidden
        for name in ("f", "i", "o", "c"):
            setattr(
                self, f"W_{name}", Tensor(_uniform(rng, (h, d_in), h), requires_grad=True)
            )
            setattr(self, f"U_{name}", Tensor(_uniform(rng, (h, h), h), requires_grad=True))
            setattr(self, f"b_{name}", Tensor(np.zeros(h), requires_grad=True))
        self.mask = (
            MaskSet(h, bandwidth_init=bandwidth_init, counter_start=counter_start)
            if masked
            else None
        )

    def out_shape(self, in_shape):
        t, d = in_shape
        if d != self.d_in:
            raise ValueError(f"lstm expects {self.d_in} input features, got {d}")
        return (t, self.n_hidden)

    def _gate_preact(self, name, x_t, h_prev, gate):
        w = getattr(self, f"W_{name}")
        u = getattr(self, f"U_{name}")
        b = getattr(self, f"b_{name}")
        pre = ad.add(
            ad.add(ad.matmul(x_t, ad.transpose(w)), ad.matmul(h_prev, ad.transpose(u))), b
        )
        if gate is not None:
            pre = ad.mul(pre, gate)
        return pre

    def forward(self, x_seq, h0=None, c0=None, gate=None):
        """Run the recurrence over [time, batch, d_in] input.

        Returns (h_seq, h_T, c_T) where h_seq is the list of per-step
        hidden-state tensors, graph-connected for backprop through time.
        """
        seq_is_tensor = isinstance(x_seq, Tensor)
        data = x_seq.data if seq_is_tensor else np.asarray(x_seq, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != self.d_in:
            raise ValueError(
                f"x_seq must be [time, batch, {self.d_in}], got {data.shape}"
            )
        n_steps, batch = data.shape[0], data.shape[1]
        h = h0 if h0 is not None else Tensor(np.zeros((batch, self.n_hidden)))
        c = c0 if c0 is not None else Tensor(np.zeros((batch, self.n_hidden)))
        if h.shape != (batch, self.n_hidden) or c.shape != (batch, self.n_hidden):
            raise ValueError(
                f"state shapes {h.shape}/{c.shape} != ({batch}, {self.n_hidden})"
            )
        h_seq = []
        for t in range(n_steps):
            x_t = ad.select_step(x_seq, t) if seq_is_tensor else Tensor(data[t])
            f_t = ad.sigmoid(self._gate_preact("f", x_t, h, gate))
            i_t = ad.sigmoid(self._gate_preact("i", x_t, h, gate))
            o_t = ad.sigmoid(self._gate_preact("o", x_t, h, gate))
            c_tilde = ad.tanh(self._gate_preact("c", x_t, h, gate))
            c = ad.add(ad.mul(f_t, c), ad.mul(i_t, c_tilde))
            h = ad.mul(o_t, ad.tanh(c))
            if gate is not None:
                h = ad.mul(h, gate)
            h_seq.append(h)
        return h_seq, h, c

    def param_items(self):
        items = []
        for name in ("f", "i", "o", "c"):
            items.append((f"W_{name}", getattr(self, f"W_{name}")))
            items.append((f"U_{name}", getattr(self, f"U_{name}")))
            items.append((f"b_{name}", getattr(self, f"b_{name}")))
        return items


def active_flops(layer, gates, input_shape, active_in=None):
    """Multiply-accumulate count for one layer at the given binary gates.

    ``input_shape`` is the per-sample input shape ((C,H,W) for conv,
    (d_in,) for dense, (T,d_in) for LSTM). ``active_in`` is the upstream
    active input count; defaults to the full input width. Gates of None
    mean every unit active.
    """
    if gates is None:
        n_active = _unit_count(layer)
    else:
        gates = np.asarray(gates)
        if gates.size != _unit_count(layer):
            raise ValueError(
                f"gate vector length {gates.size} != unit count {_unit_count(layer)}"
            )
        n_active = int(np.count_nonzero(gates))
    if isinstance(layer, MaskedConv2d):
        c, h, w = input_shape
        in_act = c if active_in is None else int(active_in)
        _, h_out, w_out = layer.out_shape((c, h, w))
        return layer.kernel_size**2 * in_act * n_active * h_out * w_out
    if isinstance(layer, MaskedDense):
        in_act = input_shape[0] if active_in is None else int(active_in)
        return in_act * n_active
    if isinstance(layer, MaskedLstm):
        t, d = input_shape
        in_act = d if active_in is None else int(active_in)
        per_step = 4 * (n_active * in_act + n_active * n_active) + 3 * n_active
        return t * per_step
    raise TypeError(f"no MAC model for layer {layer!r}")


def _unit_count(layer):
    if isinstance(layer, MaskedConv2d):
        return layer.out_channels
    if isinstance(layer, MaskedDense):
        return layer.d_out
    if isinstance(layer, MaskedLstm):
        return layer.n_hidden
    raise TypeError(f"layer {layer!r} has no structured units")
