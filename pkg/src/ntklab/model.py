"""NTK-parameterized ReLU network with an optional small convolutional front.

Every layer computes ``u = sigma_w * W h / sqrt(fan_in) + sigma_b * b``; hidden
layers apply ReLU, the final dense layer (the "head") is linear. Convolutions
are valid-padding, stride 1, via im2col so each conv weight is a 2-D matrix
``(out_channels, in_channels * kh * kw)``.

All parameters live in one flat vector ``theta``; ``layout`` maps block names
(``conv{i}.w``, ``conv{i}.b``, ``dense{i}.w``, ``dense{i}.b``, ``head.w``,
``head.b``) onto slices of it.
"""

from __future__ import annotations

import struct
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, LayoutError


class ConvLayer(NamedTuple):
    out_channels: int
    in_channels: int
    kernel_h: int
    kernel_w: int
    image_h: int
    image_w: int

    @property
    def out_h(self) -> int:
        return self.image_h - self.kernel_h + 1

    @property
    def out_w(self) -> int:
        return self.image_w - self.kernel_w + 1

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_h * self.kernel_w

    @property
    def out_dim(self) -> int:
        return self.out_channels * self.out_h * self.out_w


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int
    sigma_w: float = 1.0
    sigma_b: float = 0.1
    conv_front: tuple[ConvLayer, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        object.__setattr__(self, "conv_front", tuple(ConvLayer(*map(int, c)) for c in self.conv_front))
        if self.input_dim < 1 or self.output_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise ConfigError(f"all widths must be >= 1: {self}")
        if self.sigma_w < 0 or self.sigma_b < 0:
            raise ConfigError("sigma_w and sigma_b must be non-negative")
        prev = None
        for i, c in enumerate(self.conv_front):
            if min(c) < 1 or c.out_h < 1 or c.out_w < 1:
                raise ConfigError(f"conv layer {i} has an empty output: {c}")
            if prev is None:
                if self.input_dim != c.in_channels * c.image_h * c.image_w:
                    raise ConfigError(
                        f"input_dim {self.input_dim} != in_channels*image_h*image_w of first conv "
                        f"({c.in_channels * c.image_h * c.image_w})"
                    )
            elif (c.in_channels, c.image_h, c.image_w) != (prev.out_channels, prev.out_h, prev.out_w):
                raise ConfigError(f"conv layer {i} input does not match layer {i - 1} output")
            prev = c

    @property
    def dense_in(self) -> int:
        return self.conv_front[-1].out_dim if self.conv_front else self.input_dim

    @property
    def dense_widths(self) -> tuple[int, ...]:
        """Input width of each dense layer followed by the head's output width."""
        return (self.dense_in, *self.hidden_widths, self.output_dim)

    @property
    def embedding_dim(self) -> int:
        return self.dense_widths[-2]

    def widened(self, factor: int) -> NetworkSpec:
        convs = tuple(c._replace(out_channels=c.out_channels * factor) for c in self.conv_front)
        convs = tuple(
            c if i == 0 else c._replace(in_channels=convs[i - 1].out_channels) for i, c in enumerate(convs)
        )
        return NetworkSpec(
            self.input_dim,
            tuple(w * factor for w in self.hidden_widths),
            self.output_dim,
            self.sigma_w,
            self.sigma_b,
            convs,
        )


class Block(NamedTuple):
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.size)


def build_layout(spec: NetworkSpec) -> dict[str, Block]:
    layout: dict[str, Block] = {}
    offset = 0

    def add(name, shape):
        nonlocal offset
        layout[name] = Block(offset, tuple(shape))
        offset += int(np.prod(shape))

    for i, c in enumerate(spec.conv_front):
        add(f"conv{i}.w", (c.out_channels, c.in_channels, c.kernel_h, c.kernel_w))
        add(f"conv{i}.b", (c.out_channels,))
    widths = spec.dense_widths
    for i in range(len(widths) - 1):
        name = "head" if i == len(widths) - 2 else f"dense{i}"
        add(f"{name}.w", (widths[i + 1], widths[i]))
        add(f"{name}.b", (widths[i + 1],))
    return layout


def param_count(spec: NetworkSpec) -> int:
    return sum(b.size for b in build_layout(spec).values())


HEAD_BLOCKS = ("head.w", "head.b")


@dataclass(frozen=True)
class ModelParams:
    spec: NetworkSpec
    theta: np.ndarray
    layout: dict[str, Block] = field(compare=False)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).ravel()
        expected = sum(b.size for b in self.layout.values())
        if theta.size != expected:
            raise LayoutError(f"theta has {theta.size} entries, layout expects {expected}")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    def block(self, name: str) -> np.ndarray:
        b = self.layout[name]
        return self.theta[b.slice].reshape(b.shape)

    def with_theta(self, theta: np.ndarray) -> ModelParams:
        return ModelParams(self.spec, theta, self.layout)

    def head_columns(self) -> np.ndarray:
        return np.concatenate([np.arange(self.layout[n].offset, self.layout[n].offset + self.layout[n].size) for n in HEAD_BLOCKS])

    @property
    def size(self) -> int:
        return self.theta.size


InitHook = Callable[[NetworkSpec, Mapping[str, Block]], "Mapping[str, np.ndarray] | np.ndarray"]


def init_params(spec: NetworkSpec, rng: np.random.Generator, init_hook=None) -> ModelParams:
    """Draw theta i.i.d. N(0, 1); ``init_hook`` may override all or some blocks.

    ``init_hook`` is a flat vector, a mapping ``block name -> array``, or a
    callable ``(spec, layout)`` returning either.
    """
    layout = build_layout(spec)
    total = sum(b.size for b in layout.values())
    theta = rng.standard_normal(total)
    source = init_hook(spec, layout) if callable(init_hook) else init_hook
    if source is None:
        pass
    elif isinstance(source, Mapping):
        for name, value in source.items():
            if name not in layout:
                raise LayoutError(f"init hook supplies unknown block {name!r}; expected one of {list(layout)}")
            value = np.asarray(value, dtype=np.float64)
            blk = layout[name]
            if value.size != blk.size:
                raise LayoutError(f"init hook block {name!r}: expected {blk.size} values {blk.shape}, got {value.size}")
            theta[blk.slice] = value.ravel()
    else:
        flat = np.asarray(source, dtype=np.float64).ravel()
        if flat.size != total:
            raise LayoutError(f"init hook: expected {total} parameters, got {flat.size}")
        theta = flat.copy()
    return ModelParams(spec, theta, layout)


# ---------------------------------------------------------------- forward / backward


def _im2col(img: np.ndarray, c: ConvLayer) -> np.ndarray:
    # (B, C, H, W) -> (B, oh*ow, C*kh*kw), column order matches W.reshape(out, -1)
    win = sliding_window_view(img, (c.kernel_h, c.kernel_w), axis=(2, 3))  # B,C,oh,ow,kh,kw
    win = win.transpose(0, 2, 3, 1, 4, 5)
    return win.reshape(img.shape[0], c.out_h * c.out_w, c.fan_in)


def _col2im(cols: np.ndarray, c: ConvLayer) -> np.ndarray:
    b = cols.shape[0]
    cols = cols.reshape(b, c.out_h, c.out_w, c.in_channels, c.kernel_h, c.kernel_w)
    img = np.zeros((b, c.in_channels, c.image_h, c.image_w))
    for i in range(c.kernel_h):
        for j in range(c.kernel_w):
            img[:, :, i : i + c.out_h, j : j + c.out_w] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return img


@dataclass
class ForwardCache:
    x: np.ndarray
    conv_cols: list = field(default_factory=list)  # im2col patches per conv layer
    conv_pre: list = field(default_factory=list)  # pre-activations (B, P, out)
    dense_in: list = field(default_factory=list)  # input to each dense layer
    dense_pre: list = field(default_factory=list)
    output: np.ndarray | None = None

    @property
    def embedding(self) -> np.ndarray:
        """Penultimate activation, i.e. the input of the head layer."""
        return self.dense_in[-1]


def _check_input(params: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise DimensionError(f"input has shape {x.shape}, expected (batch, {params.spec.input_dim})")
    return x


def forward_cached(params: ModelParams, x) -> ForwardCache:
    spec = params.spec
    x = _check_input(params, x)
    cache = ForwardCache(x=x)
    sw, sb = spec.sigma_w, spec.sigma_b
    h = x
    if spec.conv_front:
        c0 = spec.conv_front[0]
        img = x.reshape(x.shape[0], c0.in_channels, c0.image_h, c0.image_w)
        for i, c in enumerate(spec.conv_front):
            cols = _im2col(img, c)
            w = params.block(f"conv{i}.w").reshape(c.out_channels, c.fan_in)
            pre = sw / np.sqrt(c.fan_in) * (cols @ w.T) + sb * params.block(f"conv{i}.b")
            cache.conv_cols.append(cols)
            cache.conv_pre.append(pre)
            act = np.maximum(pre, 0.0)
            img = act.transpose(0, 2, 1).reshape(x.shape[0], c.out_channels, c.out_h, c.out_w)
        h = img.reshape(x.shape[0], -1)
    names = _dense_names(spec)
    for k, name in enumerate(names):
        w = params.block(f"{name}.w")
        pre = sw / np.sqrt(w.shape[1]) * (h @ w.T) + sb * params.block(f"{name}.b")
        cache.dense_in.append(h)
        cache.dense_pre.append(pre)
        h = pre if k == len(names) - 1 else np.maximum(pre, 0.0)
    cache.output = h
    return cache


def _dense_names(spec: NetworkSpec) -> list[str]:
    n = len(spec.hidden_widths)
    return [f"dense{i}" for i in range(n)] + ["head"]


def forward(params: ModelParams, x) -> np.ndarray:
    return forward_cached(params, x).output


def embed(params: ModelParams, x) -> np.ndarray:
    """Penultimate (pre-head) activations."""
    return forward_cached(params, x).embedding


def backward(
    params: ModelParams,
    cache: ForwardCache,
    grad_output: np.ndarray | None,
    grad_embedding: np.ndarray | None = None,
    per_sample: bool = False,
) -> np.ndarray:
    """Reverse-mode pullback of output/embedding cotangents to theta.

    Returns the batch-summed gradient ``(|theta|,)``, or ``(batch, |theta|)``
    when ``per_sample`` is set.
    """
    spec = params.spec
    sw, sb = spec.sigma_w, spec.sigma_b
    bsz = cache.x.shape[0]
    grad = np.zeros((bsz, params.size)) if per_sample else np.zeros(params.size)

    def put(name, g):
        blk = params.layout[name]
        if per_sample:
            grad[:, blk.slice] = g.reshape(bsz, -1)
        else:
            grad[blk.slice] = g.ravel()

    names = _dense_names(spec)
    g = np.zeros((bsz, spec.output_dim)) if grad_output is None else np.asarray(grad_output, dtype=np.float64)
    for k in range(len(names) - 1, -1, -1):
        name = names[k]
        if k < len(names) - 1:
            g = g * (cache.dense_pre[k] > 0.0)
        h = cache.dense_in[k]
        w = params.block(f"{name}.w")
        scale = sw / np.sqrt(w.shape[1])
        if per_sample:
            put(f"{name}.w", scale * g[:, :, None] * h[:, None, :])
            put(f"{name}.b", sb * g)
        else:
            put(f"{name}.w", scale * (g.T @ h))
            put(f"{name}.b", sb * g.sum(axis=0))
        g = scale * (g @ w)
        if k == len(names) - 1 and grad_embedding is not None:
            g = g + grad_embedding
    if spec.conv_front:
        last = spec.conv_front[-1]
        # dense-input layout is channel-major (C, oh, ow); conv pre is (B, P, C)
        g = g.reshape(bsz, last.out_channels, last.out_h * last.out_w).transpose(0, 2, 1)
        for i in range(len(spec.conv_front) - 1, -1, -1):
            c = spec.conv_front[i]
            g = g * (cache.conv_pre[i] > 0.0)
            cols = cache.conv_cols[i]
            w = params.block(f"conv{i}.w").reshape(c.out_channels, c.fan_in)
            scale = sw / np.sqrt(c.fan_in)
            if per_sample:
                put(f"conv{i}.w", scale * np.einsum("bpo,bpf->bof", g, cols))
                put(f"conv{i}.b", sb * g.sum(axis=1))
            else:
                put(f"conv{i}.w", scale * np.einsum("bpo,bpf->of", g, cols))
                put(f"conv{i}.b", sb * g.sum(axis=(0, 1)))
            if i > 0:
                gimg = _col2im(scale * (g @ w), c)
                prev = spec.conv_front[i - 1]
                g = gimg.reshape(bsz, prev.out_channels, -1).transpose(0, 2, 1)
    return grad


def jacobian(params: ModelParams, x) -> np.ndarray:
    """Output Jacobian; row ``i * output_dim + q`` is d f(x_i)_q / d theta."""
    x = _check_input(params, x)
    p = params.spec.output_dim
    cache = forward_cached(params, np.repeat(x, p, axis=0))
    cot = np.tile(np.eye(p), (x.shape[0], 1))
    return backward(params, cache, cot, per_sample=True)


def head_jacobian(params: ModelParams, x) -> np.ndarray:
    """Jacobian restricted to the head block columns (``head.w`` then ``head.b``)."""
    h = embed(params, x)
    spec = params.spec
    p, z = spec.output_dim, h.shape[1]
    bsz = h.shape[0]
    scale = spec.sigma_w / np.sqrt(z)
    jw = np.zeros((bsz, p, p, z))
    idx = np.arange(p)
    jw[:, idx, idx, :] = scale * h[:, None, :]
    jb = np.broadcast_to(spec.sigma_b * np.eye(p), (bsz, p, p))
    return np.concatenate([jw.reshape(bsz * p, p * z), jb.reshape(bsz * p, p)], axis=1)


# ---------------------------------------------------------------- checkpoint format

MAGIC = b"NTKP"
FORMAT_VERSION = 1


def save_params(params: ModelParams, path) -> None:
    spec = params.spec
    buf = bytearray(MAGIC)
    buf += struct.pack("<IQQdd", FORMAT_VERSION, spec.input_dim, spec.output_dim, spec.sigma_w, spec.sigma_b)
    buf += struct.pack("<Q", len(spec.hidden_widths))
    buf += struct.pack(f"<{len(spec.hidden_widths)}Q", *spec.hidden_widths)
    buf += struct.pack("<Q", len(spec.conv_front))
    for c in spec.conv_front:
        buf += struct.pack("<6Q", *c)
    buf += struct.pack("<Q", params.size)
    buf += params.theta.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_params(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise LayoutError(f"{path}: not a parameter checkpoint (bad magic {data[:4]!r})")
    off = 4
    version, input_dim, output_dim, sigma_w, sigma_b = struct.unpack_from("<IQQdd", data, off)
    if version != FORMAT_VERSION:
        raise LayoutError(f"{path}: unsupported checkpoint version {version}")
    off += struct.calcsize("<IQQdd")
    (nh,) = struct.unpack_from("<Q", data, off)
    off += 8
    hidden = struct.unpack_from(f"<{nh}Q", data, off)
    off += 8 * nh
    (nc,) = struct.unpack_from("<Q", data, off)
    off += 8
    convs = []
    for _ in range(nc):
        convs.append(ConvLayer(*struct.unpack_from("<6Q", data, off)))
        off += 48
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    theta = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64)
    spec = NetworkSpec(input_dim, tuple(hidden), output_dim, sigma_w, sigma_b, tuple(convs))
    return ModelParams(spec, theta, build_layout(spec))


MATRIX_MAGIC = b"NTKM"


def save_matrix(m: np.ndarray, path) -> None:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError("save_matrix expects a 2-D array")
    Path(path).write_bytes(MATRIX_MAGIC + struct.pack("<QQ", *m.shape) + m.astype("<f8").tobytes())


def load_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != MATRIX_MAGIC:
        raise LayoutError(f"{path}: not a matrix file (bad magic {data[:4]!r})")
    rows, cols = struct.unpack_from("<QQ", data, 4)
    return np.frombuffer(data, dtype="<f8", count=rows * cols, offset=20).astype(np.float64).reshape(rows, cols)
