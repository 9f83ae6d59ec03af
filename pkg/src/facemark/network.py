"""Backbone and auxiliary landmark networks.

The backbone follows the fixed stage table below (MobileNet-style blocks:
expand 1x1 -> depthwise 3x3 -> linear project 1x1, identity skip when the
stride is 1 and channel counts match), then a multi-scale head that flattens
and concatenates three maps (14^2 x 16, 7^2 x 32, 1^2 x 128 at width 1.0)
into one full connection producing 2N interleaved x,y coordinates. The
auxiliary net consumes the 28^2-resolution feature map and regresses
yaw/pitch/roll in radians; only its input width follows the multiplier.

Operator conventions the tables leave open: batch norm after every
convolution, ReLU6 activations, linear projections inside bottlenecks,
linear final full connections (the intermediate auxiliary FC keeps its
activation, no norm on any FC), padding 1 for 3x3 convs, valid padding for
the spatial-collapse convolutions. Channels scale by the width multiplier
rounded to the nearest multiple of 8 with a floor of 8. All arithmetic is
32-bit.

Tensors cross this module's public surface in batch x height x width x
channel layout (numpy in, numpy out; torch in, torch out).
"""
from __future__ import annotations

import io
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import DataError, NonFiniteError, ShapeMismatchError

# (kind, expansion t, out channels c, repeat n, first stride s)
BACKBONE_TABLE = (
    ("conv", None, 64, 1, 2),
    ("dwconv", None, 64, 1, 1),
    ("bottleneck", 2, 64, 5, 2),
    ("bottleneck", 2, 128, 1, 2),
    ("bottleneck", 4, 128, 6, 1),
    ("bottleneck", 2, 16, 1, 1),
)
HEAD_S1_CHANNELS = 32
HEAD_S2_CHANNELS = 128
AUX_TAP_STAGE = 2  # output of the first bottleneck sequence (28^2 map)

CHECKPOINT_MAGIC = b"FMRK"
CHECKPOINT_VERSION = 1


def scaled_channels(c: int, alpha: float) -> int:
    """Nearest multiple of 8, floored at 8."""
    return max(8, int(round(c * alpha / 8.0)) * 8)


@dataclass(frozen=True)
class BackboneConfig:
    width_multiplier: float = 1.0
    num_landmarks: int = 68
    input_size: int = 112
    stage_table: tuple = BACKBONE_TABLE
    head_mode: str = "s1_s2_s3"  # or "alt": (s2_in, s3_in, s3_in)

    def __post_init__(self):
        if not (0 < self.width_multiplier <= 1):
            raise ValueError("width_multiplier must lie in (0, 1]")
        if self.num_landmarks < 1:
            raise ValueError("num_landmarks must be positive")
        if self.head_mode not in ("s1_s2_s3", "alt"):
            raise ValueError(f"unknown head_mode {self.head_mode!r}")
        for row in self.stage_table:
            kind, t, c, n, s = row
            if kind not in ("conv", "dwconv", "bottleneck"):
                raise ValueError(f"unknown stage kind {kind!r}")
            if s not in (1, 2) or n < 1 or c < 1:
                raise ValueError(f"bad stage row {row}")

    def channels(self, c: int) -> int:
        return scaled_channels(c, self.width_multiplier)

    @property
    def output_width(self) -> int:
        return 2 * self.num_landmarks


class ConvBNAct(nn.Module):
    def __init__(self, cin, cout, kernel, stride, groups=1, pad=None, act=True):
        super().__init__()
        if pad is None:
            pad = kernel // 2
        self.conv = nn.Conv2d(cin, cout, kernel, stride, pad, groups=groups, bias=False)
        self.bn = nn.BatchNorm2d(cout)
        self.act = nn.ReLU6(inplace=True) if act else None

    def forward(self, x):
        x = self.bn(self.conv(x))
        return self.act(x) if self.act is not None else x


class Bottleneck(nn.Module):
    """Inverted residual: expand -> depthwise -> linear project."""

    def __init__(self, cin, cout, expansion, stride):
        super().__init__()
        hidden = cin * expansion
        self.expand = ConvBNAct(cin, hidden, 1, 1)
        self.depthwise = ConvBNAct(hidden, hidden, 3, stride, groups=hidden)
        self.project = ConvBNAct(hidden, cout, 1, 1, act=False)
        self.use_residual = stride == 1 and cin == cout

    def forward(self, x):
        y = self.project(self.depthwise(self.expand(x)))
        return x + y if self.use_residual else y


class BackboneNet(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        stages = []
        cin = 3
        size = config.input_size
        for kind, t, c, n, s in config.stage_table:
            cout = ch(c)
            if kind == "conv":
                stages.append(ConvBNAct(cin, cout, 3, s))
                size //= s
            elif kind == "dwconv":
                if cin != cout:
                    raise ValueError("depthwise stage cannot change channel count")
                stages.append(ConvBNAct(cin, cout, 3, s, groups=cin))
                size //= s
            else:
                blocks = []
                for i in range(n):
                    stride = s if i == 0 else 1
                    blocks.append(Bottleneck(cin if i == 0 else cout, cout, t, stride))
                stages.append(nn.Sequential(*blocks))
                size //= s
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.s1_size = size
        self.s1_channels = cin
        self.head_s1 = ConvBNAct(cin, ch(HEAD_S1_CHANNELS), 3, 2)
        s2_size = size // 2
        self.s2_size = s2_size
        self.head_s2 = ConvBNAct(
            ch(HEAD_S1_CHANNELS), ch(HEAD_S2_CHANNELS), s2_size, 1, pad=0
        )
        if config.head_mode == "s1_s2_s3":
            width = (
                size * size * cin
                + s2_size * s2_size * ch(HEAD_S1_CHANNELS)
                + ch(HEAD_S2_CHANNELS)
            )
        else:
            width = s2_size * s2_size * ch(HEAD_S1_CHANNELS) + 2 * ch(HEAD_S2_CHANNELS)
        self.fc = nn.Linear(width, config.output_width)

    def multiscale_features(self, s1_in, s1_out, s2_out):
        """The single place that fixes which three maps the head concatenates."""
        if self.config.head_mode == "s1_s2_s3":
            parts = (s1_in, s1_out, s2_out)
        else:
            parts = (s1_out, s2_out, s2_out)
        return torch.cat([p.flatten(1) for p in parts], dim=1)

    def forward(self, x, trace=None):
        tap = None
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if trace is not None:
                trace.append((f"stage{i}", tuple(x.shape[1:])))
            if i == AUX_TAP_STAGE:
                tap = x
        s1_in = x
        s1_out = self.head_s1(s1_in)
        s2_out = self.head_s2(s1_out)
        if trace is not None:
            trace.append(("head_s1", tuple(s1_out.shape[1:])))
            trace.append(("head_s2", tuple(s2_out.shape[1:])))
        feats = self.multiscale_features(s1_in, s1_out, s2_out)
        if trace is not None:
            trace.append(("head_concat", tuple(feats.shape[1:])))
        landmarks = self.fc(feats)
        if trace is not None:
            trace.append(("fc", tuple(landmarks.shape[1:])))
        return landmarks, tap


class AuxiliaryNet(nn.Module):
    """Euler-angle branch (widths fixed; only the input adapts to the backbone)."""

    def __init__(self, alpha: float, tap_size: int = 28):
        super().__init__()
        cin = scaled_channels(64, alpha)
        self.tap_channels = cin
        self.tap_size = tap_size
        self.conv1 = ConvBNAct(cin, 128, 3, 2)
        self.conv2 = ConvBNAct(128, 128, 3, 1)
        self.conv3 = ConvBNAct(128, 32, 3, 2)
        self.conv4 = ConvBNAct(32, 128, tap_size // 4, 1, pad=0)
        self.fc1 = nn.Linear(128, 32)
        self.act = nn.ReLU6(inplace=True)
        self.fc2 = nn.Linear(32, 3)

    def forward(self, x, trace=None):
        for i, layer in enumerate((self.conv1, self.conv2, self.conv3, self.conv4)):
            x = layer(x)
            if trace is not None:
                trace.append((f"aux_conv{i + 1}", tuple(x.shape[1:])))
        x = self.act(self.fc1(x.flatten(1)))
        angles = self.fc2(x)
        if trace is not None:
            trace.append(("aux_fc1", (32,)))
            trace.append(("aux_fc2", tuple(angles.shape[1:])))
        return angles


# ---------------------------------------------------------------------------
# parameter stores
# ---------------------------------------------------------------------------

class ParamStore:
    """Named float32 tensors (weights, biases, normalization statistics) for
    one network, bound to the module that owns them."""

    def __init__(self, module: nn.Module, kind: str, meta: dict):
        self.module = module
        self.kind = kind
        self.meta = dict(meta)
        self._forward_ctx = None

    @property
    def entries(self) -> "OrderedDict[str, torch.Tensor]":
        out = OrderedDict()
        for name, p in self.module.named_parameters():
            out[f"{self.kind}.{name}"] = p
        for name, b in self.module.named_buffers():
            if b.dtype == torch.float32:
                out[f"{self.kind}.{name}"] = b
        return out

    def parameter_entries(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict(
            (f"{self.kind}.{n}", p) for n, p in self.module.named_parameters()
        )

    def names(self) -> list[str]:
        return list(self.entries)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.entries[name]

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            (n, t.detach().numpy().astype(np.float32, copy=True))
            for n, t in self.entries.items()
        )

    def load_state_arrays(self, arrays: dict) -> None:
        entries = self.entries
        if set(arrays) != set(entries):
            missing = set(entries) - set(arrays)
            extra = set(arrays) - set(entries)
            raise DataError(f"entry mismatch: missing {missing}, extra {extra}")
        with torch.no_grad():
            for name, tensor in entries.items():
                arr = np.asarray(arrays[name], dtype=np.float32)
                if tuple(arr.shape) != tuple(tensor.shape):
                    raise ShapeMismatchError(
                        f"{name}: stored {arr.shape} vs model {tuple(tensor.shape)}"
                    )
                tensor.copy_(torch.from_numpy(arr))


class GradientStore:
    """Gradients keyed by the same names as the trainable parameters."""

    def __init__(self, entries: "OrderedDict[str, torch.Tensor]"):
        self.entries = entries

    def names(self) -> list[str]:
        return list(self.entries)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.entries[name]


def _init_parameters(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.dim() >= 2:
                fan_in = int(np.prod(p.shape[1:]))
                p.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
            elif name.endswith("bias"):
                p.zero_()
            else:  # batch-norm scale
                p.fill_(1.0)


def build_backbone(config: BackboneConfig, seed: int) -> ParamStore:
    module = BackboneNet(config)
    _init_parameters(module, seed)
    meta = {
        "alpha": config.width_multiplier,
        "num_landmarks": config.num_landmarks,
        "input_size": config.input_size,
        "head_mode": config.head_mode,
    }
    return ParamStore(module, "backbone", meta)


def build_auxiliary(alpha: float, seed: int, tap_size: int = 28) -> ParamStore:
    if not (0 < alpha <= 1):
        raise ValueError("width multiplier must lie in (0, 1]")
    module = AuxiliaryNet(alpha, tap_size)
    _init_parameters(module, seed)
    meta = {"alpha": alpha, "num_landmarks": 0, "input_size": tap_size}
    return ParamStore(module, "auxiliary", meta)


@dataclass
class BackboneOutput:
    landmarks: object  # (B, 2N), interleaved x,y
    aux_tap: object    # (B, H, W, C) feature map feeding the auxiliary net


def _to_nchw(x, expect_hw=None, expect_c=3, what="input"):
    is_numpy = isinstance(x, np.ndarray)
    t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)) if is_numpy else x
    if t.dim() != 4 or t.shape[3] != expect_c or (
        expect_hw is not None and (t.shape[1] != expect_hw or t.shape[2] != expect_hw)
    ):
        raise ShapeMismatchError(
            f"{what} must be (B, {expect_hw}, {expect_hw}, {expect_c}), "
            f"got {tuple(t.shape)}"
        )
    t = t.permute(0, 3, 1, 2).contiguous().to(torch.float32)
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"{what} contains non-finite values")
    return t, is_numpy


def _locate_nonfinite(module, x) -> str:
    offenders = []

    def hook(mod, inputs, output):
        if not offenders and isinstance(output, torch.Tensor):
            if not torch.isfinite(output).all():
                offenders.append(type(mod).__name__)

    handles = [m.register_forward_hook(hook) for m in module.modules()]
    try:
        with torch.no_grad():
            module(x)
    finally:
        for h in handles:
            h.remove()
    return offenders[0] if offenders else "output"


def forward_backbone(params: ParamStore, images, mode: str = "eval", trace=None):
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    size = params.meta["input_size"]
    x, is_numpy = _to_nchw(images, expect_hw=size, expect_c=3, what="backbone input")
    module = params.module
    module.train(mode == "train")
    if mode == "eval":
        with torch.no_grad():
            landmarks, tap = module(x, trace=trace)
    else:
        landmarks, tap = module(x, trace=trace)
        params._forward_ctx = {"landmarks": landmarks, "aux_tap": tap}
    if not bool(torch.isfinite(landmarks).all()) or not bool(torch.isfinite(tap).all()):
        layer = _locate_nonfinite(module, x)
        raise NonFiniteError(f"non-finite intermediate in backbone layer {layer}")
    tap_nhwc = tap.permute(0, 2, 3, 1)
    if is_numpy:
        return BackboneOutput(
            landmarks.detach().numpy().copy(), tap_nhwc.detach().numpy().copy()
        )
    return BackboneOutput(landmarks, tap_nhwc)


def forward_auxiliary(params: ParamStore, aux_tap, mode: str = "eval", trace=None):
    module = params.module
    x, is_numpy = _to_nchw(
        aux_tap,
        expect_hw=module.tap_size,
        expect_c=module.tap_channels,
        what="auxiliary tap",
    )
    module.train(mode == "train")
    if mode == "eval":
        with torch.no_grad():
            angles = module(x, trace=trace)
    else:
        angles = module(x, trace=trace)
        params._forward_ctx = {"angles": angles}
    if not bool(torch.isfinite(angles).all()):
        layer = _locate_nonfinite(module, x)
        raise NonFiniteError(f"non-finite intermediate in auxiliary layer {layer}")
    return angles.detach().numpy().copy() if is_numpy else angles


def backward(params: ParamStore, output_grads: dict) -> GradientStore:
    """Gradients of (sum of grad-weighted outputs) for every trainable parameter.

    Requires a preceding train-mode forward on this store. `output_grads`
    maps output names ("landmarks", "aux_tap" for the backbone; "angles" for
    the auxiliary net) to arrays shaped like those outputs; aux_tap grads are
    accepted in either layout.
    """
    ctx = params._forward_ctx
    if ctx is None:
        raise RuntimeError("backward requires a prior train-mode forward pass")
    params._forward_ctx = None
    terms = []
    for name, grad in output_grads.items():
        if name not in ctx:
            raise KeyError(f"unknown output {name!r}; available: {sorted(ctx)}")
        out = ctx[name]
        g = torch.as_tensor(np.asarray(grad, dtype=np.float32))
        if name == "aux_tap" and g.shape != out.shape and g.dim() == 4:
            g = g.permute(0, 3, 1, 2).contiguous()  # NHWC grads for an NCHW tap
        if g.shape != out.shape:
            raise ShapeMismatchError(
                f"gradient for {name} has shape {tuple(g.shape)}, "
                f"output is {tuple(out.shape)}"
            )
        terms.append((out * g).sum())
    proxy = torch.stack(terms).sum()
    named = list(params.parameter_entries().items())
    grads = torch.autograd.grad(
        proxy, [p for _, p in named], allow_unused=True, retain_graph=False
    )
    entries = OrderedDict()
    for (name, p), g in zip(named, grads):
        entries[name] = torch.zeros_like(p) if g is None else g
    return GradientStore(entries)


@dataclass
class JointForward:
    """Train-mode pass through backbone and auxiliary in one graph."""

    landmarks: np.ndarray  # (B, 2N) float32
    angles: np.ndarray     # (B, 3) float32
    backward: object       # callable(d_landmarks, d_angles) -> OrderedDict[name, tensor]


def forward_joint_train(backbone_ps: ParamStore, aux_ps: ParamStore, images) -> JointForward:
    size = backbone_ps.meta["input_size"]
    x, _ = _to_nchw(images, expect_hw=size, expect_c=3, what="backbone input")
    backbone_ps.module.train(True)
    aux_ps.module.train(True)
    lm, tap = backbone_ps.module(x)
    ang = aux_ps.module(tap)
    if not bool(torch.isfinite(lm).all()) or not bool(torch.isfinite(ang).all()):
        layer = _locate_nonfinite(backbone_ps.module, x)
        raise NonFiniteError(f"non-finite intermediate near layer {layer}")

    named = list(backbone_ps.parameter_entries().items()) + list(
        aux_ps.parameter_entries().items()
    )

    def backward_fn(d_landmarks, d_angles):
        gl = torch.as_tensor(np.asarray(d_landmarks, dtype=np.float32))
        ga = torch.as_tensor(np.asarray(d_angles, dtype=np.float32))
        proxy = (lm * gl).sum() + (ang * ga).sum()
        grads = torch.autograd.grad(
            proxy, [p for _, p in named], allow_unused=True
        )
        return OrderedDict(
            (n, torch.zeros_like(p) if g is None else g)
            for (n, p), g in zip(named, grads)
        )

    return JointForward(
        landmarks=lm.detach().numpy().copy(),
        angles=ang.detach().numpy().copy(),
        backward=backward_fn,
    )


def parameter_count(params) -> int:
    """Total stored values, normalization statistics included."""
    entries = params.entries if hasattr(params, "entries") else params
    return int(sum(int(np.prod(t.shape)) for t in dict(entries).values()))


# ---------------------------------------------------------------------------
# checkpoint container (External Interface; byte layout documented in README)
# ---------------------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def write_container(path, kind: str, meta: dict, entries: dict) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<f", float(meta.get("alpha", 0.0))))
    buf.write(struct.pack("<I", int(meta.get("num_landmarks", 0))))
    buf.write(_pack_str(str(meta.get("scheme", ""))))
    buf.write(_pack_str(kind))
    buf.write(struct.pack("<I", len(entries)))
    for name, value in entries.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        buf.write(_pack_str(name))
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def container_size(kind: str, meta: dict, entries: dict) -> int:
    """Exact byte size write_container will produce."""
    size = 4 + 4 + 4 + 4
    size += 4 + len(str(meta.get("scheme", "")).encode("utf-8"))
    size += 4 + len(kind.encode("utf-8"))
    size += 4
    for name, value in entries.items():
        shape = np.shape(value)
        size += 4 + len(name.encode("utf-8")) + 4 + 4 * len(shape)
        size += 4 * int(np.prod(shape)) if shape else 4
    return size


def read_container(path):
    with open(path, "rb") as fh:
        data = fh.read()
    view = io.BytesIO(data)

    def read_exact(n):
        raw = view.read(n)
        if len(raw) != n:
            raise DataError(f"truncated checkpoint {path}")
        return raw

    def read_str():
        (n,) = struct.unpack("<I", read_exact(4))
        return read_exact(n).decode("utf-8")

    if read_exact(4) != CHECKPOINT_MAGIC:
        raise DataError(f"not a facemark checkpoint: {path}")
    (version,) = struct.unpack("<I", read_exact(4))
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version} in {path}")
    (alpha,) = struct.unpack("<f", read_exact(4))
    (num_landmarks,) = struct.unpack("<I", read_exact(4))
    scheme = read_str()
    kind = read_str()
    (count,) = struct.unpack("<I", read_exact(4))
    entries = OrderedDict()
    for _ in range(count):
        name = read_str()
        (rank,) = struct.unpack("<I", read_exact(4))
        shape = struct.unpack(f"<{rank}I", read_exact(4 * rank)) if rank else ()
        n_values = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(read_exact(4 * n_values), dtype="<f4").reshape(shape)
        entries[name] = arr.copy()
    meta = {"alpha": alpha, "num_landmarks": num_landmarks, "scheme": scheme}
    return kind, meta, entries


def save_params(params: ParamStore, path, scheme: str = "") -> None:
    meta = {
        "alpha": params.meta.get("alpha", 0.0),
        "num_landmarks": params.meta.get("num_landmarks", 0),
        "scheme": scheme or params.meta.get("scheme", ""),
    }
    write_container(path, params.kind, meta, params.state_arrays())


def serialized_size(params: ParamStore, scheme: str = "") -> int:
    meta = {"scheme": scheme or params.meta.get("scheme", "")}
    return container_size(params.kind, meta, params.state_arrays())


def load_params(path, config: BackboneConfig | None = None) -> ParamStore:
    kind, meta, entries = read_container(path)
    if kind == "backbone":
        cfg = config or BackboneConfig(
            width_multiplier=round(meta["alpha"], 6) or 1.0,
            num_landmarks=meta["num_landmarks"],
        )
        store = build_backbone(cfg, seed=0)
    elif kind == "auxiliary":
        store = build_auxiliary(round(meta["alpha"], 6) or 1.0, seed=0)
    else:
        raise DataError(f"container {path} holds {kind!r}, not network parameters")
    store.meta["scheme"] = meta.get("scheme", "")
    store.load_state_arrays(entries)
    return store
