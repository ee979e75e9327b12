"""Hybrid convolution / relative-attention backbone.

Layout: a two-conv stem (S0) followed by four stages S1..S4, each starting with
a stride-2 block. ``C`` stages stack MBConv blocks, ``T`` stages stack windowed
relative self-attention blocks, each followed by an MLP sub-block. The head is
global average pooling and a linear layer producing logits.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import (
    BatchNormState,
    ConfigError,
    Tensor,
    activation,
    add,
    avg_pool2x2,
    batch_norm,
    conv2d,
    default_dtype,
    getitem,
    linear,
    matmul,
    mean,
    mul,
    pad2d,
    reshape,
    sigmoid,
    softmax,
    take,
    transpose,
)

WINDOW_SIZES = (7, 14, 16, 32)
EXPANSION = 4
SE_RATIO = 4
HEAD_WIDTH = 32
MLP_RATIO = 4

PRESETS = {
    # desk scale: every test and experiment in this repo
    "desk": dict(depths=(2, 2, 2, 2), channels=(32, 64, 128, 256), stem=16),
    # CoAtNet-0 widths, documented but not exercised
    "full": dict(depths=(2, 3, 5, 2), channels=(96, 192, 384, 768), stem=64),
    # gradient-check scale
    "micro": dict(depths=(1, 1, 1, 1), channels=(4, 4, 8, 8), stem=4),
}


class ArchParseError(ValueError):
    def __init__(self, text: str, position: int, reason: str):
        super().__init__(f"bad stage string {text!r} at position {position}: {reason}")
        self.position = position


@dataclass(frozen=True)
class StageSpec:
    kind: str  # "C" (MBConv) or "T" (relative attention)
    depth: int
    channels: int
    stride: int = 2


@dataclass(frozen=True)
class ArchSpec:
    stages: tuple[StageSpec, ...]
    stem_channels: int
    window: int = 7
    num_heads: int = 0  # 0: channels // 32 per attention stage
    num_classes: int = 264
    in_channels: int = 1

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ConfigError(f"expected 4 stages after the stem, got {len(self.stages)}")
        if self.window not in WINDOW_SIZES:
            raise ConfigError(f"window must be one of {WINDOW_SIZES}, got {self.window}")
        widths = [s.channels for s in self.stages]
        if any(b < a for a, b in zip(widths, widths[1:])):
            raise ConfigError(f"stage channels must be nondecreasing, got {widths}")
        for s in self.stages:
            if s.kind not in ("C", "T"):
                raise ConfigError(f"unknown stage kind {s.kind!r}")
            if s.kind == "T" and s.channels % self.heads_for(s.channels):
                raise ConfigError(f"{s.channels} channels not divisible by {self.heads_for(s.channels)} heads")

    @property
    def kinds(self) -> list[str]:
        return ["Conv" if s.kind == "C" else "Attn" for s in self.stages]

    @property
    def stage_string(self) -> str:
        return "-".join(s.kind for s in self.stages)

    def heads_for(self, channels: int) -> int:
        return self.num_heads or max(1, channels // HEAD_WIDTH)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        d["stages"] = tuple(StageSpec(**s) for s in d["stages"])
        return cls(**d)


_STAGE_RE = re.compile(r"[CT](-[CT]){3}")


def parse_arch_spec(text: str, preset: str = "desk", num_classes: int = 264,
                    window: int = 7, num_heads: int = 0) -> ArchSpec:
    """Build an :class:`ArchSpec` from a stage string such as ``"C-C-C-T"``."""
    for pos, ch in enumerate(text):
        want = "CT" if pos % 2 == 0 else "-"
        if pos >= 7:
            raise ArchParseError(text, pos, "trailing characters")
        if ch not in want:
            raise ArchParseError(text, pos, f"expected one of {list(want)}, got {ch!r}")
    if not _STAGE_RE.fullmatch(text):
        raise ArchParseError(text, len(text), "expected four stages like C-C-C-T")
    try:
        p = PRESETS[preset]
    except KeyError:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None
    stages = tuple(StageSpec(k, d, c) for k, d, c in zip(text.split("-"), p["depths"], p["channels"]))
    return ArchSpec(stages, p["stem"], window, num_heads, num_classes)


# ---------------------------------------------------------------------------
# weights


@dataclass
class ModelWeights:
    params: dict[str, Tensor] = field(default_factory=dict)
    bn: dict[str, BatchNormState] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Tensor:
        return self.params[key]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2
    return x * std


def relative_position_index(window: int) -> np.ndarray:
    """(window², window²) map from token pair to a slot of a (2w-1)² table."""
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    ys, xs = np.meshgrid(np.arange(window), np.arange(window), indexing="ij")
    coords = np.stack([ys.ravel(), xs.ravel()])  # 2 x N
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


class _Init:
    def __init__(self, weights: ModelWeights, rng: np.random.Generator, dtype):
        self.w, self.rng, self.dtype = weights, rng, dtype

    def _add(self, name, arr):
        self.w.params[name] = Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True, name=name)

    def conv(self, name, o, i, k, zero=False):
        fan_out = o * k * k
        arr = np.zeros((o, i, k, k)) if zero else self.rng.standard_normal((o, i, k, k)) * math.sqrt(2.0 / fan_out)
        self._add(name + ".weight", arr)

    def dwconv(self, name, c, k):
        self._add(name + ".weight", self.rng.standard_normal((c, 1, k, k)) * math.sqrt(2.0 / (k * k)))

    def linear(self, name, i, o, zero=False, bias=True):
        self._add(name + ".weight", np.zeros((i, o)) if zero else trunc_normal(self.rng, (i, o)))
        if bias:
            self._add(name + ".bias", np.zeros(o))

    def norm(self, name, c):
        self._add(name + ".gamma", np.ones(c))
        self._add(name + ".beta", np.zeros(c))
        self.w.bn[name] = BatchNormState.fresh(c, self.dtype)

    def table(self, name, heads, window):
        self._add(name, trunc_normal(self.rng, (heads, (2 * window - 1) ** 2)))


def block_names(spec: ArchSpec) -> list[str]:
    return [f"s{si + 1}.b{bi}" for si, st in enumerate(spec.stages) for bi in range(st.depth)]


def init_weights(spec: ArchSpec, seed: int = 0, dtype=None) -> ModelWeights:
    w = ModelWeights()
    ini = _Init(w, np.random.default_rng(seed), dtype or default_dtype())
    ini.conv("stem.conv1", spec.stem_channels, spec.in_channels, 3)
    ini.norm("stem.bn1", spec.stem_channels)
    ini.conv("stem.conv2", spec.stem_channels, spec.stem_channels, 3)
    ini.norm("stem.bn2", spec.stem_channels)
    cin = spec.stem_channels
    for si, st in enumerate(spec.stages):
        for bi in range(st.depth):
            name = f"s{si + 1}.b{bi}"
            stride = st.stride if bi == 0 else 1
            if st.kind == "C":
                hidden = cin * EXPANSION
                ini.norm(f"{name}.norm", cin)
                ini.conv(f"{name}.expand", hidden, cin, 1)
                ini.norm(f"{name}.bn1", hidden)
                ini.dwconv(f"{name}.dw", hidden, 3)
                ini.norm(f"{name}.bn2", hidden)
                ini.linear(f"{name}.se.fc1", hidden, hidden // SE_RATIO)
                ini.linear(f"{name}.se.fc2", hidden // SE_RATIO, hidden)
                ini.conv(f"{name}.project", st.channels, hidden, 1, zero=True)
                if stride != 1 or cin != st.channels:
                    ini.conv(f"{name}.shortcut", st.channels, cin, 1)
            else:
                if bi == 0:
                    ini.conv(f"{name}.down", st.channels, cin, 3)
                c = st.channels
                heads = spec.heads_for(c)
                ini.norm(f"{name}.attn.norm", c)
                for proj in ("q", "k", "v"):
                    ini.linear(f"{name}.attn.{proj}", c, c)
                # not zero-init, so the bias table receives gradient on the first step
                ini.linear(f"{name}.attn.proj", c, c)
                ini.table(f"{name}.attn.rel_bias", heads, spec.window)
                ini.norm(f"{name}.mlp.norm", c)
                ini.conv(f"{name}.mlp.fc1", c * MLP_RATIO, c, 1)
                ini.conv(f"{name}.mlp.fc2", c, c * MLP_RATIO, 1, zero=True)
            cin = st.channels
    ini.linear("head", cin, spec.num_classes)
    return w


# ---------------------------------------------------------------------------
# blocks


def stochastic_depth(residual_out: Tensor, identity: Tensor, p: float, train: bool,
                     rng: np.random.Generator | None) -> Tensor:
    """Drop the residual branch per example with probability ``p`` in training,
    rescaling survivors by 1/(1-p)."""
    if not 0 <= p < 1:
        raise ConfigError(f"drop probability must be in [0, 1), got {p}")
    if not train or p == 0:
        return add(identity, residual_out)
    if rng is None:
        raise ValueError("stochastic_depth in train mode needs an rng")
    B = residual_out.shape[0]
    keep = (rng.random(B) >= p).astype(residual_out.dtype) / (1.0 - p)
    mask = Tensor(keep.reshape((B,) + (1,) * (residual_out.ndim - 1)).astype(residual_out.dtype))
    return add(identity, residual_out * mask)


def _bn(x, w: ModelWeights, name, train):
    return batch_norm(x, w[name + ".gamma"], w[name + ".beta"], w.bn[name], train)


def squeeze_excitation(x: Tensor, w: ModelWeights, name: str, reduce_ratio: int = SE_RATIO) -> Tensor:
    B, C = x.shape[:2]
    if C % reduce_ratio:
        raise ConfigError(f"squeeze-excitation: {C} channels not divisible by {reduce_ratio}")
    pooled = mean(x, axis=(2, 3))
    h = activation(linear(pooled, w[name + ".fc1.weight"], w[name + ".fc1.bias"]), "gelu")
    gate = sigmoid(linear(h, w[name + ".fc2.weight"], w[name + ".fc2.bias"]))
    return x * reshape(gate, (B, C, 1, 1))


def mbconv_block(x: Tensor, w: ModelWeights, name: str, stride: int, train: bool = False,
                 drop: float = 0.0, rng=None) -> Tensor:
    h = _bn(x, w, name + ".norm", train)
    h = activation(_bn(conv2d(h, w[name + ".expand.weight"]), w, name + ".bn1", train), "gelu")
    dw = w[name + ".dw.weight"]
    h = conv2d(h, dw, stride=stride, pad="same", groups=dw.shape[0])
    h = activation(_bn(h, w, name + ".bn2", train), "gelu")
    h = squeeze_excitation(h, w, name + ".se")
    h = conv2d(h, w[name + ".project.weight"])
    short_key = name + ".shortcut.weight"
    if short_key in w.params:
        s = avg_pool2x2(x) if stride == 2 else x
        shortcut = conv2d(s, w[short_key])
    else:
        if stride != 1:
            raise ConfigError(f"{name}: stride {stride} block has no shortcut projection")
        shortcut = x
    return stochastic_depth(h, shortcut, drop, train, rng)


def _partition(x: Tensor, window: int) -> tuple[Tensor, tuple]:
    B, C, H, W = x.shape
    ph, pw = -H % window, -W % window
    x = pad2d(x, ((0, ph), (0, pw)))
    Hp, Wp = H + ph, W + pw
    nh, nw = Hp // window, Wp // window
    t = reshape(x, (B, C, nh, window, nw, window))
    t = transpose(t, (0, 2, 4, 3, 5, 1))
    return reshape(t, (B * nh * nw, window * window, C)), (B, C, H, W, nh, nw)


def _merge(t: Tensor, geom, window: int) -> Tensor:
    B, C, H, W, nh, nw = geom
    t = reshape(t, (B, nh, nw, window, window, C))
    t = transpose(t, (0, 5, 1, 3, 2, 4))
    t = reshape(t, (B, C, nh * window, nw * window))
    if nh * window != H or nw * window != W:
        t = getitem(t, (slice(None), slice(None), slice(0, H), slice(0, W)))
    return t


def window_attention(h: Tensor, w: ModelWeights, name: str, window: int, heads: int,
                     use_bias: bool = True, weights_out: list | None = None) -> Tensor:
    """Multi-head self-attention inside non-overlapping windows (no residual).

    With ``use_bias`` the learned relative-position table is added to the
    logits before the softmax; without it this is plain scaled dot-product
    attention.
    """
    C = h.shape[1]
    if C % heads:
        raise ConfigError(f"{C} channels not divisible by {heads} heads")
    d = C // heads
    tokens, geom = _partition(h, window)
    Bn, N, _ = tokens.shape

    def split(proj):
        t = linear(tokens, w[f"{name}.{proj}.weight"], w[f"{name}.{proj}.bias"])
        return transpose(reshape(t, (Bn, N, heads, d)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    logits = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    if use_bias:
        bias = take(w[f"{name}.rel_bias"], relative_position_index(window))
        logits = add(logits, reshape(bias, (1, heads, N, N)))
    attn = softmax(logits, axis=-1)
    if weights_out is not None:
        weights_out.append(attn.data)
    out = transpose(matmul(attn, v), (0, 2, 1, 3))
    out = linear(reshape(out, (Bn, N, C)), w[f"{name}.proj.weight"], w[f"{name}.proj.bias"])
    return _merge(out, geom, window)


def relative_window_attention(x: Tensor, w: ModelWeights, name: str, window: int, heads: int,
                              train: bool = False, drop: float = 0.0, rng=None,
                              use_bias: bool = True, weights_out: list | None = None) -> Tensor:
    """Pre-norm windowed relative attention with residual connection."""
    h = _bn(x, w, name + ".norm", train)
    h = window_attention(h, w, name, window, heads, use_bias, weights_out)
    return stochastic_depth(h, x, drop, train, rng)


def mlp_block(x: Tensor, w: ModelWeights, name: str, train=False, drop=0.0, rng=None) -> Tensor:
    h = _bn(x, w, name + ".norm", train)
    h = activation(conv2d(h, w[name + ".fc1.weight"]), "gelu")
    h = conv2d(h, w[name + ".fc2.weight"])
    return stochastic_depth(h, x, drop, train, rng)


def drop_rates(spec: ArchSpec, max_rate: float) -> dict[str, float]:
    """Linear ramp of drop probability from 0 (first block) to ``max_rate``."""
    names = block_names(spec)
    n = max(len(names) - 1, 1)
    return {b: max_rate * i / n for i, b in enumerate(names)}


def model_forward(batch: Tensor, spec: ArchSpec, w: ModelWeights, train: bool = False,
                  rng: np.random.Generator | None = None, drop_path: float = 0.0,
                  use_bias: bool = True, trace: list | None = None) -> Tensor:
    """Logits (B x num_classes) for a B x 1 x H x W spectrogram batch."""
    if batch.ndim != 4 or batch.shape[1] != spec.in_channels:
        raise ConfigError(f"expected B x {spec.in_channels} x H x W input, got {batch.shape}")
    rates = drop_rates(spec, drop_path) if train else {}
    x = activation(_bn(conv2d(batch, w["stem.conv1.weight"], stride=2, pad="same"), w, "stem.bn1", train), "gelu")
    x = activation(_bn(conv2d(x, w["stem.conv2.weight"], stride=1, pad=1), w, "stem.bn2", train), "gelu")
    if trace is not None:
        trace.append(x.shape)
    for si, st in enumerate(spec.stages):
        for bi in range(st.depth):
            name = f"s{si + 1}.b{bi}"
            stride = st.stride if bi == 0 else 1
            p = rates.get(name, 0.0)
            if st.kind == "C":
                x = mbconv_block(x, w, name, stride, train, p, rng)
            else:
                if bi == 0:
                    x = conv2d(x, w[name + ".down.weight"], stride=st.stride, pad="same")
                heads = spec.heads_for(st.channels)
                x = relative_window_attention(x, w, name + ".attn", spec.window, heads, train, p, rng, use_bias)
                x = mlp_block(x, w, name + ".mlp", train, p, rng)
        if trace is not None:
            trace.append(x.shape)
    pooled = mean(x, axis=(2, 3))
    return linear(pooled, w["head.weight"], w["head.bias"])


class ASCA:
    """Arch spec plus weights, with a forward call."""

    def __init__(self, spec: ArchSpec, weights: ModelWeights | None = None, seed: int = 0, dtype=None):
        self.spec = spec
        self.weights = weights if weights is not None else init_weights(spec, seed, dtype)

    def __call__(self, batch, train: bool = False, rng=None, drop_path: float = 0.0) -> Tensor:
        if not isinstance(batch, Tensor):
            batch = Tensor(np.asarray(batch, dtype=self.dtype))
        return model_forward(batch, self.spec, self.weights, train, rng, drop_path)

    @property
    def dtype(self):
        return next(iter(self.weights.params.values())).dtype

    def parameters(self) -> dict[str, Tensor]:
        return self.weights.params

    def num_parameters(self) -> int:
        return self.weights.num_parameters()
