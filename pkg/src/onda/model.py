"""Architecture descriptors, the embedding network, and checkpoint files."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import (ParamLayout, ParamVector, ShapeError, Tensor, avg_pool2d,
                       batch_norm, conv2d, depthwise_conv2d, global_avg_pool, linear,
                       relu, no_grad)

FAMILIES = ("ResNetMini", "DSCNNMini")
PRODUCERS = ("conv", "depthwise", "pointwise", "head")
KINDS = PRODUCERS + ("res_start", "res_end", "pool")


class SpecError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid ArchSpec: " + "; ".join(self.violations))


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int | None = None
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    prunable: bool = True
    group_id: str | None = None
    bn: bool = False
    relu: bool = False
    bias: bool = True

    @property
    def padding(self) -> tuple[int, int]:
        if self.kind == "pool":
            return (0, 0)
        return (self.kernel[0] // 2, self.kernel[1] // 2)


@dataclass(frozen=True)
class LayerGeometry:
    in_channels: int
    in_hw: tuple[int, int]
    out_channels: int
    out_hw: tuple[int, int]


@dataclass(frozen=True)
class ArchSpec:
    family: str
    blocks: tuple[LayerSpec, ...]
    embedding_dim: int
    input_shape: tuple[int, int, int] = (1, 40, 49)

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))

    # -- structure -------------------------------------------------------
    def violations(self) -> list[str]:
        out = []
        if self.family not in FAMILIES:
            out.append(f"unknown family {self.family!r}")
        if self.embedding_dim < 1:
            out.append("embedding_dim must be >= 1")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            out.append(f"input_shape must be three positive extents, got {self.input_shape}")
            return out
        heads = [i for i, l in enumerate(self.blocks) if l.kind == "head"]
        if len(heads) != 1 or heads[0] != len(self.blocks) - 1:
            out.append("exactly one head layer is required, in last position")
        c, (h, w) = self.input_shape[0], self.input_shape[1:]
        skip: int | None = None
        producer = None
        groups: dict[str, int] = {}
        for i, l in enumerate(self.blocks):
            if l.kind not in KINDS:
                out.append(f"layer {i}: unknown kind {l.kind!r}")
                continue
            if l.kind in PRODUCERS:
                if l.out_channels is None or l.out_channels < 1:
                    out.append(f"layer {i}: out_channels must be >= 1")
                    continue
                if l.kind == "depthwise" and l.out_channels != c:
                    out.append(f"layer {i}: depthwise out_channels {l.out_channels} != input channels {c}")
                if l.kind == "pointwise" and tuple(l.kernel) != (1, 1):
                    out.append(f"layer {i}: pointwise kernel must be 1x1")
                if l.kind == "head":
                    if l.prunable:
                        out.append(f"layer {i}: head layer cannot be prunable")
                    if l.out_channels != self.embedding_dim:
                        out.append(f"layer {i}: head width {l.out_channels} != embedding_dim {self.embedding_dim}")
                    if l.group_id is not None:
                        out.append(f"layer {i}: head layer cannot carry a group_id")
                if l.group_id is not None:
                    if groups.setdefault(l.group_id, l.out_channels) != l.out_channels:
                        out.append(f"group {l.group_id!r}: members disagree on out_channels")
            if l.kind in ("conv", "depthwise", "pointwise", "pool"):
                kh, kw = l.kernel
                ph, pw = l.padding
                if kh < 1 or kw < 1 or l.stride < 1:
                    out.append(f"layer {i}: kernel and stride must be positive")
                    continue
                h, w = (h + 2 * ph - kh) // l.stride + 1, (w + 2 * pw - kw) // l.stride + 1
                if h < 1 or w < 1:
                    out.append(f"layer {i}: spatial extent collapses to {h}x{w}")
                    return out
            if l.kind == "res_start":
                if skip is not None:
                    out.append(f"layer {i}: nested residual blocks are not supported")
                skip = c
                skip_producer = producer
            elif l.kind == "res_end":
                if skip is None:
                    out.append(f"layer {i}: residual end without start")
                elif skip != c:
                    out.append(f"layer {i}: residual add of {skip} and {c} channels")
                elif skip_producer is None:
                    out.append(f"layer {i}: residual skip must come from a layer output")
                else:
                    a, b = self.blocks[skip_producer].group_id, self.blocks[producer].group_id
                    if a is None or a != b:
                        out.append(f"layer {i}: residual junction must tie layers {skip_producer} "
                                   f"and {producer} with one group_id")
                skip = None
            if l.kind in PRODUCERS:
                c = l.out_channels
                producer = i
        if skip is not None:
            out.append("residual block left open")
        return out

    def validate(self) -> "ArchSpec":
        v = self.violations()
        if v:
            raise SpecError(v)
        return self

    def geometry(self) -> list[LayerGeometry | None]:
        """Channel and spatial extents per layer (None for markers)."""
        c, hw = self.input_shape[0], tuple(self.input_shape[1:])
        out = []
        for l in self.blocks:
            if l.kind in ("res_start", "res_end"):
                out.append(LayerGeometry(c, hw, c, hw))
                continue
            if l.kind == "head":
                out.append(LayerGeometry(c, hw, l.out_channels, (1, 1)))
                c = l.out_channels
                continue
            kh, kw = l.kernel
            ph, pw = l.padding
            ohw = ((hw[0] + 2 * ph - kh) // l.stride + 1, (hw[1] + 2 * pw - kw) // l.stride + 1)
            oc = c if l.kind == "pool" else l.out_channels
            out.append(LayerGeometry(c, hw, oc, ohw))
            c, hw = oc, ohw
        return out

    def producers(self) -> list[int]:
        return [i for i, l in enumerate(self.blocks) if l.kind in PRODUCERS]

    def channels(self) -> dict[int, int]:
        return {i: self.blocks[i].out_channels for i in self.producers()}

    def with_channels(self, channels: dict[int, int]) -> "ArchSpec":
        blocks = list(self.blocks)
        for i, n in channels.items():
            blocks[i] = replace(blocks[i], out_channels=int(n))
        return replace(self, blocks=tuple(blocks))

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return {"family": self.family, "embedding_dim": self.embedding_dim,
                "input_shape": list(self.input_shape),
                "blocks": [{**asdict(l), "kernel": list(l.kernel)} for l in self.blocks]}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        blocks = tuple(LayerSpec(**{**b, "kernel": tuple(b.get("kernel", (1, 1)))}) for b in d["blocks"])
        return cls(d["family"], blocks, int(d["embedding_dim"]), tuple(d["input_shape"]))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- presets

def resnet_mini(width: int = 16, embedding_dim: int = 32,
                input_shape=(1, 40, 49)) -> ArchSpec:
    """Six 3x3 convolutions in two residual stages (width, 2*width)."""
    w2 = 2 * width
    conv = lambda o, **kw: LayerSpec("conv", o, (3, 3), bn=True, **kw)
    blocks = (
        conv(width, stride=2, relu=True, group_id="s1"),
        LayerSpec("pool", kernel=(2, 2), stride=2),
        LayerSpec("res_start"),
        conv(width, relu=True),
        conv(width, group_id="s1"),
        LayerSpec("res_end", relu=True),
        conv(w2, stride=2, relu=True, group_id="s2"),
        LayerSpec("res_start"),
        conv(w2, relu=True),
        conv(w2, group_id="s2"),
        LayerSpec("res_end", relu=True),
        LayerSpec("head", embedding_dim, prunable=False),
    )
    return ArchSpec("ResNetMini", blocks, embedding_dim, tuple(input_shape))


def dscnn_mini(width: int = 32, embedding_dim: int = 32,
               input_shape=(1, 40, 49)) -> ArchSpec:
    """Strided stem convolution and pooling, then four depthwise-separable blocks."""
    blocks = [LayerSpec("conv", width, (3, 3), stride=2, bn=True, relu=True),
              LayerSpec("pool", kernel=(2, 2), stride=2)]
    widths, strides = (width, 2 * width, 2 * width, 2 * width), (1, 2, 1, 1)
    c = width
    for o, s in zip(widths, strides):
        blocks.append(LayerSpec("depthwise", c, (3, 3), stride=s, bn=True, relu=True))
        blocks.append(LayerSpec("pointwise", o, (1, 1), bn=True, relu=True))
        c = o
    blocks.append(LayerSpec("head", embedding_dim, prunable=False))
    return ArchSpec("DSCNNMini", tuple(blocks), embedding_dim, tuple(input_shape))


PRESETS = {"ResNetMini": resnet_mini, "DSCNNMini": dscnn_mini}


def preset(name: str, **kwargs) -> ArchSpec:
    try:
        return PRESETS[name](**kwargs)
    except KeyError:
        raise SpecError([f"unknown preset {name!r}; choose from {sorted(PRESETS)}"]) from None


# ---------------------------------------------------------------- parameters

def param_shapes(spec: ArchSpec) -> list[tuple]:
    """(name, shape, layer, role) for every trainable tensor, in storage order."""
    out = []
    for i, (l, g) in enumerate(zip(spec.blocks, spec.geometry())):
        if l.kind not in PRODUCERS:
            continue
        kh, kw = l.kernel
        if l.kind == "depthwise":
            wshape = (g.out_channels, 1, kh, kw)
        elif l.kind == "head":
            wshape = (g.out_channels, g.in_channels)
        else:
            wshape = (g.out_channels, g.in_channels, kh, kw)
        out.append((f"L{i}.weight", wshape, i, "weight"))
        if l.bias or l.kind == "head":
            out.append((f"L{i}.bias", (g.out_channels,), i, "bias"))
        if l.bn and l.kind != "head":
            out.append((f"L{i}.bn_gamma", (g.out_channels,), i, "bn_gamma"))
            out.append((f"L{i}.bn_beta", (g.out_channels,), i, "bn_beta"))
    return out


def layout_for(spec: ArchSpec) -> ParamLayout:
    return ParamLayout(param_shapes(spec))


@dataclass
class EmbeddingModel:
    spec: ArchSpec
    params: ParamVector
    bn_stats: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    seed: int | None = None

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.spec, self.params.copy(),
                              {k: (m.copy(), v.copy()) for k, (m, v) in self.bn_stats.items()},
                              self.seed)

    def digest(self) -> str:
        h = hashlib.sha256(self.spec.digest().encode())
        h.update(np.ascontiguousarray(self.params.values).tobytes())
        return h.hexdigest()[:16]

    @property
    def embedding_dim(self) -> int:
        return self.spec.embedding_dim


def build(spec: ArchSpec, seed: int = 0, dtype=np.float64) -> EmbeddingModel:
    """Instantiate `spec` with He-uniform kernels, zero biases and identity BN."""
    spec.validate()
    layout = layout_for(spec)
    rng = np.random.default_rng(seed)
    arrays = {}
    for e in layout.entries:
        if e.role == "weight":
            fan_in = int(np.prod(e.shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            arrays[e.name] = rng.uniform(-bound, bound, size=e.shape)
        elif e.role == "bn_gamma":
            arrays[e.name] = np.ones(e.shape)
        else:
            arrays[e.name] = np.zeros(e.shape)
    params = ParamVector.flatten(arrays, layout)
    params.values = params.values.astype(dtype)
    stats = {i: (np.zeros(l.out_channels), np.ones(l.out_channels))
             for i, l in enumerate(spec.blocks) if l.bn and l.kind != "head"}
    return EmbeddingModel(spec, params, stats, seed)


# ---------------------------------------------------------------- forward

def forward(model: EmbeddingModel, theta: Tensor, x, *, train: bool = False,
            masks: dict[int, np.ndarray] | None = None,
            stats_out: dict | None = None) -> Tensor:
    """Embeddings (N, d) as a differentiable function of the flat parameters.

    train=True normalises with batch statistics and writes them to `stats_out`;
    otherwise the model's running statistics are used as constants. `masks`
    multiplies a layer's output channels by the given 0/1 vector.
    """
    spec = model.spec
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise ShapeError("embed", x.shape, spec.input_shape, detail="input does not match spec.input_shape")
    p = model.params.layout.tensors(theta)
    h, skip = x, None
    for i, l in enumerate(spec.blocks):
        k = l.kind
        if k == "pool":
            h = avg_pool2d(h, l.kernel, l.stride)
            continue
        if k == "res_start":
            skip = h
            continue
        if k == "res_end":
            h = h + skip
            skip = None
            if l.relu:
                h = relu(h)
            continue
        w, b = p[f"L{i}.weight"], p.get(f"L{i}.bias")
        if k == "head":
            h = linear(global_avg_pool(h), w, b)
        else:
            if k == "depthwise":
                h = depthwise_conv2d(h, w, b, l.stride, l.padding)
            else:
                h = conv2d(h, w, b, l.stride, l.padding)
            if l.bn:
                gamma, beta = p[f"L{i}.bn_gamma"], p[f"L{i}.bn_beta"]
                if train:
                    h, batch_stats = batch_norm(h, gamma, beta)
                    if stats_out is not None:
                        stats_out[i] = batch_stats
                else:
                    m, v = model.bn_stats[i]
                    h, _ = batch_norm(h, gamma, beta, m, v)
            if l.relu:
                h = relu(h)
        if masks is not None and i in masks:
            shape = (1, -1) + (1,) * (h.ndim - 2)
            h = h * Tensor(np.asarray(masks[i], dtype=float).reshape(shape))
    return h


def embed(model: EmbeddingModel, x, batch_size: int = 256, masks=None) -> np.ndarray:
    """Evaluate f_theta on a batch (or a single input) with frozen BN statistics."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != model.spec.input_shape:
        raise ShapeError("embed", x.shape, model.spec.input_shape,
                         detail="input does not match spec.input_shape")
    theta = Tensor(model.params.values)
    dtype = model.params.values.dtype
    with no_grad():
        chunks = [forward(model, theta, x[s:s + batch_size].astype(dtype, copy=False), masks=masks).data
                  for s in range(0, len(x), batch_size)]
    z = np.concatenate(chunks) if chunks else np.zeros((0, model.embedding_dim), dtype=dtype)
    return z[0] if single else z


# ---------------------------------------------------------------- costs

def _spec_of(obj) -> ArchSpec:
    return obj.spec if isinstance(obj, EmbeddingModel) else obj


def param_count(obj) -> int:
    return sum(int(np.prod(shape)) for _, shape, *_ in param_shapes(_spec_of(obj)))


def layer_macs(spec: ArchSpec) -> list[int]:
    out = []
    for l, g in zip(spec.blocks, spec.geometry()):
        kh, kw = l.kernel
        positions = g.out_hw[0] * g.out_hw[1]
        if l.kind in ("conv", "pointwise"):
            out.append(g.out_channels * g.in_channels * kh * kw * positions)
        elif l.kind == "depthwise":
            out.append(g.out_channels * kh * kw * positions)
        elif l.kind == "head":
            out.append(g.out_channels * g.in_channels)
        else:
            out.append(0)
    return out


def mac_count(obj) -> int:
    """Multiply-accumulates of one forward pass on a single input."""
    return sum(layer_macs(_spec_of(obj)))


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"ONDACKPT"
CKPT_VERSION = 1


def save_checkpoint(model: EmbeddingModel, path) -> Path:
    """Write magic, uint64 header length, UTF-8 JSON header, raw little-endian payload."""
    path = Path(path)
    dtype = np.dtype(model.params.values.dtype).newbyteorder("<")
    bn_layers = sorted(model.bn_stats)
    header = {"format": "onda-checkpoint", "version": CKPT_VERSION,
              "spec": model.spec.to_dict(), "dtype": dtype.str, "seed": model.seed,
              "n_params": len(model.params), "bn_layers": bn_layers}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [np.asarray(model.params.values, dtype=dtype).tobytes()]
    for i in bn_layers:
        m, v = model.bn_stats[i]
        parts += [np.asarray(m, dtype="<f8").tobytes(), np.asarray(v, dtype="<f8").tobytes()]
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(parts))
    return path


def read_framed(raw: bytes, magic: bytes, what: str) -> tuple[dict, bytes]:
    """Split a magic + length-prefixed JSON header + payload blob."""
    n0 = len(magic) + 8
    if len(raw) < n0 or raw[:len(magic)] != magic:
        raise CheckpointError(f"not a {what} file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[len(magic):n0])
    if n0 + hlen > len(raw):
        raise CheckpointError(f"{what} header length {hlen} exceeds file size {len(raw)}")
    try:
        header = json.loads(raw[n0:n0 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt {what} header: {e}") from None
    return header, raw[n0 + hlen:]


def load_checkpoint(path) -> EmbeddingModel:
    header, payload = read_framed(Path(path).read_bytes(), CKPT_MAGIC, "checkpoint")
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    try:
        spec = ArchSpec.from_dict(header["spec"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"malformed spec in header: {e}") from None
    v = spec.violations()
    if v:
        raise CheckpointError("checkpoint spec invalid: " + "; ".join(v))
    layout = layout_for(spec)
    dtype = np.dtype(header["dtype"])
    n = int(header["n_params"])
    if n != layout.size:
        raise CheckpointError(f"header declares {n} params, spec implies {layout.size}")
    bn_layers = [int(i) for i in header["bn_layers"]]
    widths = {i: spec.blocks[i].out_channels for i in bn_layers}
    need = n * dtype.itemsize + sum(16 * widths[i] for i in bn_layers)
    if len(payload) != need:
        raise CheckpointError(f"payload is {len(payload)} bytes, expected {need}")
    values = np.frombuffer(payload, dtype=dtype, count=n).astype(dtype.newbyteorder("="))
    off = n * dtype.itemsize
    stats = {}
    for i in bn_layers:
        c = widths[i]
        m = np.frombuffer(payload, "<f8", c, off).astype(np.float64)
        v_ = np.frombuffer(payload, "<f8", c, off + 8 * c).astype(np.float64)
        stats[i] = (m, v_)
        off += 16 * c
    return EmbeddingModel(spec, ParamVector(values, layout), stats, header.get("seed"))
