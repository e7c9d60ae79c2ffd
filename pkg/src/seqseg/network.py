"""The slab segmentation network: a U-Net-like stack of time-distributed 2D
layers with bidirectional convolutional LSTM blocks, plus parameter
initialization, checkpoint I/O and activation export.

Layer names follow the published architecture table verbatim (including its
numbering gaps: there is no conv_3, conv_6, conv_9, conv_10, conv_13 or
conv_16) so tests and the feature-export tool can reference rows directly.
The table lists conv_7 with 256 input channels although pool_2 emits 128;
the build wires conv_7 with 128 input channels, the only consistent option.

Variants:
  full             the complete architecture
  single-slice-2d  identical graph fed with length-1 sequences (o forced to 1)
  aggregation-2d   first CLSTM removed, second replaced by a sum over the
                   sequence axis
  unidirectional   both CLSTM blocks forward-only
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, ConfigMismatchError
from .layers import (
    BidirectionalCLSTM,
    ConvLSTMCellParams,
    bidirectional_clstm,
    clstm_unroll,
    elu,
    sigmoid,
    time_distributed,
)
from .tensor import (
    Tensor,
    aligned_copy,
    concat_channels,
    conv2d,
    maxpool2x2,
    no_grad,
    upsample2x2,
)

VARIANTS = ("full", "single-slice-2d", "aggregation-2d", "unidirectional")
CAPACITY_DIVISORS = (1, 2, 4, 8)


@dataclass
class NetworkConfig:
    o: int = 3
    resolution: int = 128
    base_features: int = 64
    capacity_divisor: int = 1
    variant: str = "full"
    class_count: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.variant == "single-slice-2d":
            self.o = 1
        if self.o < 1 or self.o % 2 == 0:
            raise ValueError(f"sequence length o must be odd and positive, got {self.o}")
        if self.resolution < 8 or self.resolution % 8 != 0:
            raise ValueError(
                f"resolution must be a positive multiple of 8 (three pooling stages), "
                f"got {self.resolution}"
            )
        if self.capacity_divisor not in CAPACITY_DIVISORS:
            raise ValueError(
                f"capacity divisor must be one of {CAPACITY_DIVISORS}, got {self.capacity_divisor}"
            )
        if self.base_features % self.capacity_divisor != 0:
            raise ValueError(
                f"base features {self.base_features} not divisible by "
                f"capacity divisor {self.capacity_divisor}"
            )
        if self.class_count < 1:
            raise ValueError(f"class count must be positive, got {self.class_count}")

    def as_dict(self):
        return {
            "variant": self.variant,
            "o": self.o,
            "resolution": self.resolution,
            "base_features": self.base_features,
            "capacity_divisor": self.capacity_divisor,
            "class_count": self.class_count,
        }


def _grouped_param_shapes(cfg):
    """Ordered {layer: {tensor: shape}} for every learnable layer."""
    f = cfg.base_features // cfg.capacity_divisor
    f2, f4, f8 = 2 * f, 4 * f, 8 * f
    agg = cfg.variant == "aggregation-2d"

    def conv(c_in, c_out, k=3):
        return {"kernel": (c_out, c_in, k, k), "bias": (c_out,)}

    def clstm_cells(c_in, c_hid):
        cell = {}
        for g in ("i", "f", "c", "o"):
            cell[f"w_x{g}"] = (c_hid, c_in, 3, 3)
        for g in ("i", "f", "c", "o"):
            cell[f"w_h{g}"] = (c_hid, c_hid, 3, 3)
        for g in ("i", "f", "c", "o"):
            cell[f"b_{g}"] = (c_hid,)
        if cfg.variant == "unidirectional":
            return {f"fwd.{k}": v for k, v in cell.items()}
        both = {f"fwd.{k}": v for k, v in cell.items()}
        both.update({f"bwd.{k}": v for k, v in cell.items()})
        return both

    groups = {
        "conv_1": conv(1, f),
        "conv_2": conv(f, f),
        "conv_4": conv(f, f2),
        "conv_5": conv(f2, f2),
        "conv_7": conv(f2, f4),  # table lists 256 in-channels; pool_2 emits 128
        "conv_8": conv(f4, f4),
    }
    if not agg:
        groups["bidir_1"] = clstm_cells(f4, f8)
    # without bidir_1 the expansion receives pool_3's channel count
    up1_channels = f4 if agg else f8
    groups.update(
        {
            "conv_11": conv(up1_channels + f4, f4),
            "conv_12": conv(f4, f4),
            "conv_14": conv(f4 + f2, f2),
            "conv_15": conv(f2, f2),
            "conv_17": conv(f2 + f, f),
        }
    )
    if not agg:
        groups["bidir_2"] = clstm_cells(f, f)
    groups["conv_18"] = conv(f, cfg.class_count, k=1)
    return groups


class Network:
    """Built network: configuration plus named parameter tensors.

    Parameters are grouped per layer; ``named_params()`` yields flat
    dotted names in a fixed construction order, which checkpointing, Adam
    state and the seeded initializer all share.
    """

    def __init__(self, config, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = {}
        for layer, tensors in _grouped_param_shapes(config).items():
            self.params[layer] = {
                name: Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)
                for name, shape in tensors.items()
            }

    # -- parameter access ---------------------------------------------------

    def named_params(self):
        for layer, tensors in self.params.items():
            for name, t in tensors.items():
                yield f"{layer}.{name}", t

    def num_params(self):
        return sum(t.size for _, t in self.named_params())

    def zero_grad(self):
        for _, t in self.named_params():
            t.grad = None

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.named_params()}

    def load_state(self, state):
        for name, t in self.named_params():
            if name not in state:
                raise ValueError(f"missing parameter {name!r} in state")
            if state[name].shape != t.data.shape:
                raise ValueError(
                    f"parameter {name!r}: shape {state[name].shape} != {t.data.shape}"
                )
            t.data = aligned_copy(state[name].astype(self.dtype, copy=False))

    def _cell(self, layer, direction):
        group = self.params[layer]
        kw = {k.split(".", 1)[1]: v for k, v in group.items() if k.startswith(direction)}
        return ConvLSTMCellParams(**kw)

    def _bidir(self, layer, mode):
        return BidirectionalCLSTM(self._cell(layer, "fwd"), self._cell(layer, "bwd"), mode)

    # -- initialization -------------------------------------------------------

    def init(self, seed):
        """Glorot-uniform weights, orthogonal recurrent kernels, zero biases."""
        rng = np.random.Generator(np.random.PCG64(seed))
        for name, t in self.named_params():
            leaf = name.rsplit(".", 1)[1]
            if leaf.startswith("b"):
                fresh = np.zeros(t.shape, dtype=self.dtype)
            elif leaf.startswith("w_h"):
                c_hid = t.shape[0]
                flat = _orthogonal(rng, c_hid, int(np.prod(t.shape[1:])))
                fresh = flat.reshape(t.shape).astype(self.dtype)
            else:
                c_out, c_in = t.shape[0], t.shape[1]
                k = int(np.prod(t.shape[2:])) if t.ndim == 4 else 1
                fresh = _glorot_uniform(rng, t.shape, c_in * k, c_out * k).astype(self.dtype)
            t.data = aligned_copy(fresh)
        return self

    # -- forward ----------------------------------------------------------------

    def forward_sequence(self, xs, capture=None):
        """Forward one spatial context given as a list of o [1,R,R] tensors.

        Returns the [class_count,R,R] probability map.  When ``capture`` is a
        dict, every layer's output sequence is stored in it by layer name.
        """
        cfg = self.config
        if len(xs) != cfg.o:
            raise ValueError(f"expected {cfg.o} sequence elements, got {len(xs)}")
        for t, x in enumerate(xs):
            if x.shape != (1, cfg.resolution, cfg.resolution):
                raise ValueError(
                    f"element {t}: shape {x.shape}, expected (1, {cfg.resolution}, {cfg.resolution})"
                )

        acts = capture if capture is not None else {}

        def store(name, seq):
            acts[name] = seq
            return seq

        def conv_layer(name, activation=elu):
            kernel = self.params[name]["kernel"]
            bias = self.params[name]["bias"]
            if activation is None:
                return lambda x: conv2d(x, kernel, bias)
            return lambda x: activation(conv2d(x, kernel, bias))

        # contraction
        s = store("conv_1", time_distributed(conv_layer("conv_1"), xs))
        skip3 = store("conv_2", time_distributed(conv_layer("conv_2"), s))
        s = store("pool_1", time_distributed(maxpool2x2, skip3))
        s = store("conv_4", time_distributed(conv_layer("conv_4"), s))
        skip2 = store("conv_5", time_distributed(conv_layer("conv_5"), s))
        s = store("pool_2", time_distributed(maxpool2x2, skip2))
        s = store("conv_7", time_distributed(conv_layer("conv_7"), s))
        skip1 = store("conv_8", time_distributed(conv_layer("conv_8"), s))
        s = store("pool_3", time_distributed(maxpool2x2, skip1))

        # sequence block between contraction and expansion
        if cfg.variant == "aggregation-2d":
            pass  # first CLSTM removed; features pass through unchanged
        elif cfg.variant == "unidirectional":
            s = store("bidir_1", clstm_unroll(self._cell("bidir_1", "fwd"), s))
        else:
            s = store("bidir_1", bidirectional_clstm(self._bidir("bidir_1", "sequence"), s))

        # expansion with skip concatenations
        s = store("up_1", time_distributed(upsample2x2, s))
        s = store("concat_1", [concat_channels(a, b) for a, b in zip(skip1, s)])
        s = store("conv_11", time_distributed(conv_layer("conv_11"), s))
        s = store("conv_12", time_distributed(conv_layer("conv_12"), s))
        s = store("up_2", time_distributed(upsample2x2, s))
        s = store("concat_2", [concat_channels(a, b) for a, b in zip(skip2, s)])
        s = store("conv_14", time_distributed(conv_layer("conv_14"), s))
        s = store("conv_15", time_distributed(conv_layer("conv_15"), s))
        s = store("up_3", time_distributed(upsample2x2, s))
        s = store("concat_3", [concat_channels(a, b) for a, b in zip(skip3, s)])
        s = store("conv_17", time_distributed(conv_layer("conv_17"), s))

        # collapse the sequence into a single feature map
        if cfg.variant == "aggregation-2d":
            agg = s[0]
            for el in s[1:]:
                agg = agg + el
            merged = agg
            store("aggregate", [merged])
        elif cfg.variant == "unidirectional":
            merged = clstm_unroll(self._cell("bidir_2", "fwd"), s)[-1]
            store("bidir_2", [merged])
        else:
            merged = bidirectional_clstm(self._bidir("bidir_2", "collapse"), s)
            store("bidir_2", [merged])

        out = sigmoid(conv2d(merged, self.params["conv_18"]["kernel"], self.params["conv_18"]["bias"]))
        store("conv_18", [out])
        return out

    def forward(self, batch):
        """Segment a batch of spatial contexts, shape [B,o,1,R,R] -> [B,class,R,R].

        Inference-only convenience: runs without tape recording.
        """
        batch = np.asarray(batch)
        cfg = self.config
        if batch.ndim != 5 or batch.shape[1:] != (cfg.o, 1, cfg.resolution, cfg.resolution):
            raise ValueError(
                f"batch shape {batch.shape} incompatible with config "
                f"(B, {cfg.o}, 1, {cfg.resolution}, {cfg.resolution})"
            )
        out = np.empty(
            (batch.shape[0], cfg.class_count, cfg.resolution, cfg.resolution), dtype=self.dtype
        )
        with no_grad():
            for b in range(batch.shape[0]):
                xs = [Tensor(batch[b, t].astype(self.dtype, copy=False)) for t in range(cfg.o)]
                out[b] = self.forward_sequence(xs).data
        return out

    def predict_context(self, slices, ctx=None):
        """Probability map [R,R] for one context given as [o,R,R] slices."""
        slices = np.asarray(slices, dtype=self.dtype)
        return self.forward(slices[None, :, None])[0, 0]

    # -- activation export --------------------------------------------------------

    def activation_layer_names(self):
        agg = self.config.variant == "aggregation-2d"
        names = ["conv_1", "conv_2", "pool_1", "conv_4", "conv_5", "pool_2",
                 "conv_7", "conv_8", "pool_3"]
        if not agg:
            names.append("bidir_1")
        names += ["up_1", "concat_1", "conv_11", "conv_12", "up_2", "concat_2",
                  "conv_14", "conv_15", "up_3", "concat_3", "conv_17"]
        names.append("aggregate" if agg else "bidir_2")
        names.append("conv_18")
        return names

    def export_activations(self, context, layer_name):
        """Per-element feature maps of one layer, min-max normalized per map.

        context: array [o,1,R,R].  Returns a list (one entry per sequence
        element reaching that layer) of float32 arrays [C,H,W] in [0,1].
        """
        valid = self.activation_layer_names()
        if layer_name not in valid:
            raise ValueError(f"unknown layer {layer_name!r}; valid layers: {', '.join(valid)}")
        context = np.asarray(context, dtype=self.dtype)
        acts = {}
        with no_grad():
            xs = [Tensor(context[t]) for t in range(self.config.o)]
            self.forward_sequence(xs, capture=acts)
        out = []
        for el in acts[layer_name]:
            maps = el.data.astype(np.float32, copy=True)
            lo = maps.min(axis=(1, 2), keepdims=True)
            hi = maps.max(axis=(1, 2), keepdims=True)
            span = hi - lo
            span[span == 0] = 1.0
            out.append((maps - lo) / span)
        return out


def _glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _orthogonal(rng, rows, cols):
    """Matrix [rows, cols] with orthonormal rows (requires rows <= cols)."""
    if rows > cols:
        raise ValueError(f"orthogonal init needs rows <= cols, got {rows}x{cols}")
    a = rng.standard_normal((cols, rows))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q.T


# -- checkpoint I/O ------------------------------------------------------------

_CHECKPOINT_MAGIC = "seqseg-checkpoint 1"
_DTYPE_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def save_checkpoint(net, path):
    """Write config plus all parameter tensors.

    Format: a UTF-8 manifest (magic line, config key=value lines, one
    ``tensor name dtype shape offset`` line per parameter, an ``end`` line)
    followed by the raw little-endian payloads at the listed offsets.
    """
    lines = [_CHECKPOINT_MAGIC]
    for key, val in net.config.as_dict().items():
        lines.append(f"{key}={val}")
    payload = io.BytesIO()
    for name, t in net.named_params():
        tag = "f32" if t.data.dtype == np.float32 else "f64"
        raw = np.ascontiguousarray(t.data).astype(_DTYPE_TAGS[tag], copy=False).tobytes()
        shape = ",".join(str(d) for d in t.shape)
        lines.append(f"tensor {name} {tag} {shape} {payload.tell()}")
        payload.write(raw)
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        fh.write(payload.getvalue())


def read_checkpoint_manifest(path):
    """Parse the manifest: returns (config, tensor entries, payload bytes)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        head, _, rest = blob.partition(b"\nend\n")
        if not rest and not blob.endswith(b"\nend\n"):
            raise CheckpointError(f"{path}: missing manifest terminator")
        lines = head.decode("utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: manifest is not valid UTF-8") from exc
    if not lines or lines[0] != _CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    cfg_kw = {}
    entries = []
    for line in lines[1:]:
        if line.startswith("tensor "):
            try:
                _, name, tag, shape_s, offset_s = line.split(" ")
                shape = tuple(int(d) for d in shape_s.split(","))
                entries.append((name, tag, shape, int(offset_s)))
            except (ValueError, KeyError) as exc:
                raise CheckpointError(f"{path}: bad tensor line {line!r}") from exc
        elif "=" in line:
            key, _, val = line.partition("=")
            cfg_kw[key] = val
    try:
        config = NetworkConfig(
            o=int(cfg_kw["o"]),
            resolution=int(cfg_kw["resolution"]),
            base_features=int(cfg_kw["base_features"]),
            capacity_divisor=int(cfg_kw["capacity_divisor"]),
            variant=cfg_kw["variant"],
            class_count=int(cfg_kw["class_count"]),
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad or missing config in manifest") from exc
    return config, entries, rest


def load_checkpoint(path, expect=None):
    """Load a checkpoint; verify against ``expect`` (a NetworkConfig) if given."""
    config, entries, payload = read_checkpoint_manifest(path)
    if expect is not None and expect.as_dict() != config.as_dict():
        diffs = [
            f"{k}: file={v} expected={expect.as_dict()[k]}"
            for k, v in config.as_dict().items()
            if expect.as_dict()[k] != v
        ]
        raise ConfigMismatchError(f"{path}: config mismatch ({'; '.join(diffs)})")
    net = Network(config, dtype=_DTYPE_TAGS[entries[0][1]] if entries else np.float32)
    state = {}
    for name, tag, shape, offset in entries:
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"{path}: unknown dtype tag {tag!r}")
        dt = _DTYPE_TAGS[tag]
        nbytes = int(np.prod(shape)) * dt.itemsize
        chunk = payload[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated payload for tensor {name!r}")
        state[name] = np.frombuffer(chunk, dtype=dt).reshape(shape)
    expected_names = [n for n, _ in net.named_params()]
    if sorted(state) != sorted(expected_names):
        raise CheckpointError(f"{path}: tensor set does not match config")
    net.load_state(state)
    return net
