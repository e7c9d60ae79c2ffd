"""Time-distributed layer semantics, activations and the bidirectional
peephole-free convolutional LSTM.

A slice sequence is a plain list of [C,H,W] tensors.  ``time_distributed``
maps one parameter set over every element; the CLSTM blocks unroll strictly
in sequence order with zero initial states.  Gates use the piecewise-linear
hard sigmoid clamp(0.2x + 0.5, 0, 1); candidate and output transforms use
tanh.  There are no cell-to-gate (peephole) weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat0, conv2d, elementwise, slice_channels


# -- activations ------------------------------------------------------------


def elu(x):
    """Exponential linear unit, alpha = 1."""
    return elementwise(
        x,
        lambda d: np.where(d > 0, d, np.expm1(d)),
        lambda d, y: np.where(d > 0, np.asarray(1.0, dtype=d.dtype), np.exp(d)),
        "elu",
    )


def hard_sigmoid(x):
    """Piecewise-linear sigmoid clamp(0.2x + 0.5, 0, 1)."""
    return elementwise(
        x,
        lambda d: np.clip(0.2 * d + 0.5, 0.0, 1.0).astype(d.dtype),
        lambda d, y: np.where((d > -2.5) & (d < 2.5), np.asarray(0.2, dtype=d.dtype), np.asarray(0.0, dtype=d.dtype)),
        "hard_sigmoid",
    )


def tanh(x):
    return elementwise(x, np.tanh, lambda d, y: 1.0 - y * y, "tanh")


def sigmoid(x):
    def fwd(d):
        # split by sign for numerical stability
        out = np.empty_like(d)
        pos = d >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        e = np.exp(d[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    return elementwise(x, fwd, lambda d, y: y * (1.0 - y), "sigmoid")


# -- time-distributed wrapper -------------------------------------------------


def time_distributed(layer, sequence):
    """Apply one layer (shared parameters) to every element of the sequence."""
    if len(sequence) == 0:
        raise ValueError("time_distributed: empty sequence")
    shape0 = sequence[0].shape
    for t, el in enumerate(sequence):
        if el.shape != shape0:
            raise ValueError(
                f"time_distributed: element {t} has shape {el.shape}, expected {shape0}"
            )
    return [layer(el) for el in sequence]


# -- convolutional LSTM -------------------------------------------------------

_GATES = ("i", "f", "c", "o")


@dataclass
class ConvLSTMCellParams:
    """Weights of one CLSTM direction: four input kernels [C_hid,C_in,3,3],
    four recurrent kernels [C_hid,C_hid,3,3] and four biases [C_hid]."""

    w_xi: Tensor
    w_xf: Tensor
    w_xc: Tensor
    w_xo: Tensor
    w_hi: Tensor
    w_hf: Tensor
    w_hc: Tensor
    w_ho: Tensor
    b_i: Tensor
    b_f: Tensor
    b_c: Tensor
    b_o: Tensor

    @classmethod
    def zeros(cls, in_channels, hidden_channels, kernel_size=3, dtype=np.float32):
        k = kernel_size
        mk = lambda shape: Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
        kw = {}
        for g in _GATES:
            kw[f"w_x{g}"] = mk((hidden_channels, in_channels, k, k))
            kw[f"w_h{g}"] = mk((hidden_channels, hidden_channels, k, k))
            kw[f"b_{g}"] = mk((hidden_channels,))
        return cls(**kw)

    @property
    def hidden_channels(self):
        return self.w_hi.shape[0]

    @property
    def in_channels(self):
        return self.w_xi.shape[1]

    def named_tensors(self):
        for g in _GATES:
            yield f"w_x{g}", getattr(self, f"w_x{g}")
        for g in _GATES:
            yield f"w_h{g}", getattr(self, f"w_h{g}")
        for g in _GATES:
            yield f"b_{g}", getattr(self, f"b_{g}")


def _gate_stacks(cell):
    """Per-gate kernels and biases stacked along the output-channel axis, so
    one convolution per source computes all four gate pre-activations."""
    kx = concat0((cell.w_xi, cell.w_xf, cell.w_xc, cell.w_xo))
    kh = concat0((cell.w_hi, cell.w_hf, cell.w_hc, cell.w_ho))
    b = concat0((cell.b_i, cell.b_f, cell.b_c, cell.b_o))
    return kx, kh, b


def _step(kx, kh, b, c_hid, x_t, h_prev, c_prev):
    pre = conv2d(x_t, kx, b) + conv2d(h_prev, kh)
    i = hard_sigmoid(slice_channels(pre, 0, c_hid))
    f = hard_sigmoid(slice_channels(pre, c_hid, 2 * c_hid))
    g = tanh(slice_channels(pre, 2 * c_hid, 3 * c_hid))
    o = hard_sigmoid(slice_channels(pre, 3 * c_hid, 4 * c_hid))
    c_t = f * c_prev + i * g
    h_t = o * tanh(c_t)
    return h_t, c_t


def clstm_step(cell, x_t, h_prev, c_prev):
    """One CLSTM update; all convolutions use same zero padding.

    i = hardsig(W_xi*x + W_hi*h + b_i)
    f = hardsig(W_xf*x + W_hf*h + b_f)
    c = f . c_prev + i . tanh(W_xc*x + W_hc*h + b_c)
    o = hardsig(W_xo*x + W_ho*h + b_o)
    h = o . tanh(c)
    """
    kx, kh, b = _gate_stacks(cell)
    return _step(kx, kh, b, cell.hidden_channels, x_t, h_prev, c_prev)


def clstm_unroll(cell, sequence):
    """Run one direction over the sequence from zero states; returns all h_t."""
    if len(sequence) == 0:
        raise ValueError("clstm_unroll: empty sequence")
    c_hid = cell.hidden_channels
    h, w = sequence[0].shape[1], sequence[0].shape[2]
    dtype = sequence[0].dtype
    h_t = Tensor(np.zeros((c_hid, h, w), dtype=dtype))
    c_t = Tensor(np.zeros((c_hid, h, w), dtype=dtype))
    kx, kh, b = _gate_stacks(cell)
    outputs = []
    for x_t in sequence:
        h_t, c_t = _step(kx, kh, b, c_hid, x_t, h_t, c_t)
        outputs.append(h_t)
    return outputs


@dataclass
class BidirectionalCLSTM:
    """Forward and backward CLSTM cells of identical shape.

    mode "sequence": one output per element, out[t] = h_fwd[t] + h_bwd[t]
    (the backward pass consumes the reversed sequence and its outputs are
    re-reversed before summation).  mode "collapse": a single output, the
    sum of the two directions' final states.
    """

    forward_cell: ConvLSTMCellParams
    backward_cell: ConvLSTMCellParams
    mode: str = "sequence"

    def __post_init__(self):
        if self.mode not in ("sequence", "collapse"):
            raise ValueError(f"BidirectionalCLSTM: unknown mode {self.mode!r}")

    def named_tensors(self):
        for name, t in self.forward_cell.named_tensors():
            yield f"fwd.{name}", t
        for name, t in self.backward_cell.named_tensors():
            yield f"bwd.{name}", t


def bidirectional_clstm(block, sequence):
    """Run both directions over the sequence and merge by summation.

    Returns a list of per-element tensors in sequence mode, or a single
    tensor in collapse mode.
    """
    if len(sequence) == 0:
        raise ValueError("bidirectional_clstm: empty sequence")
    h_fwd = clstm_unroll(block.forward_cell, sequence)
    h_bwd_rev = clstm_unroll(block.backward_cell, sequence[::-1])
    if block.mode == "collapse":
        return h_fwd[-1] + h_bwd_rev[-1]
    h_bwd = h_bwd_rev[::-1]
    return [a + b for a, b in zip(h_fwd, h_bwd)]
