"""Reverse-mode automatic differentiation over an explicitly recorded DAG.

The operator set is exactly what the volumetric denoiser needs: 3D
convolution, group normalization, Swish, nearest-neighbor 2x upsampling,
dense layers, elementwise arithmetic, channel concatenation, and MSE loss.
Arrays are numpy; the graph is rebuilt on every forward pass and gradients
accumulate additively at fan-out nodes.

Tensors are laid out as (batch, channels, dx, dy, dz) for volumetric ops
and (batch, features) for dense ops. Training runs in float32; gradient
checks build the same graphs in float64.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import BadMagic, ConfigError, HeaderMismatch, ShapeError, TruncatedPayload


class TensorNode:
    """A value in the computation graph.

    `values` holds the forward result; `grad` is allocated lazily by
    backward(). `parents` and the `_backward` closure record how to push
    gradients to producers.
    """

    __slots__ = ("values", "grad", "parents", "_backward", "requires_grad", "name")

    def __init__(self, values, requires_grad=False, parents=(), backward=None, name=""):
        self.values = np.asarray(values)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.values.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"TensorNode(shape={self.shape}, name={self.name!r})"


def backward(loss: TensorNode) -> None:
    """Populate grads of everything `loss` depends on.

    Reverse topological traversal of the recorded DAG; gradients at shared
    subexpressions accumulate, never overwrite. `loss` must be scalar.
    """
    if loss.values.shape != ():
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.ones((), dtype=loss.values.dtype)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# convolution

def _conv_out_size(d, k, stride, padding):
    return (d + 2 * padding - k) // stride + 1


def _im2col(x, k, stride, padding):
    """Gather all k^3 windows of x (B,C,D,H,W) into (B, P, C*k^3)."""
    if padding:
        x = np.pad(
            x,
            ((0, 0), (0, 0), (padding, padding), (padding, padding), (padding, padding)),
        )
    b, c, d, h, w = x.shape
    od = (d - k) // stride + 1
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    sb, sc, sd, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, od, oh, ow, k, k, k),
        strides=(sb, sc, sd * stride, sh * stride, sw * stride, sd, sh, sw),
        writeable=False,
    )
    cols = windows.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(b, od * oh * ow, c * k**3)
    return np.ascontiguousarray(cols), (od, oh, ow)


def _col2im(dcols, in_shape, k, stride, padding):
    """Scatter-add window gradients back onto the (padded) input grid."""
    b, c, d, h, w = in_shape
    dp, hp, wp = d + 2 * padding, h + 2 * padding, w + 2 * padding
    od = (dp - k) // stride + 1
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    dx = np.zeros((b, c, dp, hp, wp), dtype=dcols.dtype)
    dwin = dcols.reshape(b, od, oh, ow, c, k, k, k).transpose(0, 4, 1, 2, 3, 5, 6, 7)
    for a in range(k):
        for e in range(k):
            for f in range(k):
                dx[
                    :,
                    :,
                    a : a + od * stride : stride,
                    e : e + oh * stride : stride,
                    f : f + ow * stride : stride,
                ] += dwin[..., a, e, f]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding, padding:-padding]
    return dx


def conv3d(x: TensorNode, w: TensorNode, b: TensorNode, stride=1, padding=1) -> TensorNode:
    """3D convolution with a cubic kernel.

    `w` has shape (c_out, c_in, k, k, k); output spatial size per axis is
    floor((d + 2*padding - k)/stride) + 1.
    """
    if x.values.ndim != 5:
        raise ShapeError(f"conv3d input must be 5-D, got {x.shape}")
    c_out, c_in, k, k2, k3 = w.shape
    if not (k == k2 == k3):
        raise ShapeError(f"conv3d kernel must be cubic, got {w.shape}")
    if x.shape[1] != c_in:
        raise ShapeError(f"conv3d expects {c_in} input channels, got {x.shape[1]}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv3d bias must have shape ({c_out},), got {b.shape}")
    if stride not in (1, 2):
        raise ConfigError(f"conv3d stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ConfigError("conv3d padding must be >= 0")

    cols, (od, oh, ow) = _im2col(x.values, k, stride, padding)
    batch = x.shape[0]
    flat = cols.reshape(-1, c_in * k**3)
    wmat = w.values.reshape(c_out, -1)
    out = flat @ wmat.T + b.values
    out = out.reshape(batch, od, oh, ow, c_out).transpose(0, 4, 1, 2, 3)
    out = np.ascontiguousarray(out)

    def _bw(g):
        gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, c_out)
        if w.requires_grad:
            w.accumulate_grad((gflat.T @ flat).reshape(w.shape))
        if b.requires_grad:
            b.accumulate_grad(gflat.sum(axis=0))
        if x.requires_grad:
            dcols = (gflat @ wmat).reshape(batch, -1, c_in * k**3)
            x.accumulate_grad(_col2im(dcols, x.shape, k, stride, padding))

    return TensorNode(out, parents=(x, w, b), backward=_bw, name="conv3d")


# ---------------------------------------------------------------------------
# normalization and activation

def group_norm(x: TensorNode, groups: int, scale: TensorNode, shift: TensorNode,
               eps: float = 1e-5) -> TensorNode:
    """Normalize each (sample, channel-group) slice to mean 0 / variance 1,
    then apply a per-channel affine."""
    bsz, c = x.shape[0], x.shape[1]
    if c % groups != 0:
        raise ShapeError(f"{c} channels not divisible by {groups} groups")
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError("scale/shift must be per-channel vectors")
    spatial = x.values.shape[2:]
    grouped = x.values.reshape(bsz, groups, -1)
    mu = grouped.mean(axis=2, keepdims=True)
    var = grouped.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((grouped - mu) * inv_std).reshape(x.shape)
    cshape = (1, c) + (1,) * len(spatial)
    out = xhat * scale.values.reshape(cshape) + shift.values.reshape(cshape)

    def _bw(g):
        if shift.requires_grad:
            shift.accumulate_grad(g.sum(axis=(0,) + tuple(range(2, g.ndim))))
        if scale.requires_grad:
            scale.accumulate_grad((g * xhat).sum(axis=(0,) + tuple(range(2, g.ndim))))
        if x.requires_grad:
            n = grouped.shape[2]
            dxhat = (g * scale.values.reshape(cshape)).reshape(bsz, groups, n)
            xhat_g = xhat.reshape(bsz, groups, n)
            # d/dx of (x - mu) * inv_std with mu, var functions of x
            sum_dxhat = dxhat.sum(axis=2, keepdims=True)
            sum_dxhat_xhat = (dxhat * xhat_g).sum(axis=2, keepdims=True)
            dx = (inv_std / n) * (n * dxhat - sum_dxhat - xhat_g * sum_dxhat_xhat)
            x.accumulate_grad(dx.reshape(x.shape))

    return TensorNode(out, parents=(x, scale, shift), backward=_bw, name="group_norm")


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def swish(x: TensorNode) -> TensorNode:
    """Elementwise x * sigmoid(x)."""
    s = _sigmoid(x.values)
    out = x.values * s

    def _bw(g):
        if x.requires_grad:
            x.accumulate_grad(g * (s * (1.0 + x.values * (1.0 - s))))

    return TensorNode(out, parents=(x,), backward=_bw, name="swish")


def upsample_nearest2x(x: TensorNode) -> TensorNode:
    """Replicate every voxel into a 2x2x2 block along the spatial axes."""
    if x.values.ndim != 5:
        raise ShapeError(f"upsample input must be 5-D, got {x.shape}")
    out = x.values.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)

    def _bw(g):
        if x.requires_grad:
            b, c, d, h, w = x.shape
            folded = g.reshape(b, c, d, 2, h, 2, w, 2)
            x.accumulate_grad(folded.sum(axis=(3, 5, 7)))

    return TensorNode(out, parents=(x,), backward=_bw, name="upsample2x")


# ---------------------------------------------------------------------------
# dense / elementwise ops

def linear(x: TensorNode, w: TensorNode, b: TensorNode) -> TensorNode:
    """Dense layer on (batch, features): x @ w + b."""
    if x.values.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    out = x.values @ w.values + b.values

    def _bw(g):
        if w.requires_grad:
            w.accumulate_grad(x.values.T @ g)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=0))
        if x.requires_grad:
            x.accumulate_grad(g @ w.values.T)

    return TensorNode(out, parents=(x, w, b), backward=_bw, name="linear")


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(x: TensorNode, y: TensorNode) -> TensorNode:
    """Elementwise addition with numpy broadcasting."""
    try:
        out = x.values + y.values
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {x.shape} with {y.shape}") from exc

    def _bw(g):
        if x.requires_grad:
            x.accumulate_grad(_unbroadcast(g, x.shape))
        if y.requires_grad:
            y.accumulate_grad(_unbroadcast(g, y.shape))

    return TensorNode(out, parents=(x, y), backward=_bw, name="add")


def scalar_mul(x: TensorNode, c: float) -> TensorNode:
    out = x.values * c

    def _bw(g):
        if x.requires_grad:
            x.accumulate_grad(g * c)

    return TensorNode(out, parents=(x,), backward=_bw, name="scalar_mul")


def reshape(x: TensorNode, shape) -> TensorNode:
    out = x.values.reshape(shape)

    def _bw(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.shape))

    return TensorNode(out, parents=(x,), backward=_bw, name="reshape")


def concat_channels(x: TensorNode, y: TensorNode) -> TensorNode:
    """Concatenate along the channel axis (axis 1)."""
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ShapeError(f"concat: incompatible shapes {x.shape} and {y.shape}")
    out = np.concatenate([x.values, y.values], axis=1)
    cx = x.shape[1]

    def _bw(g):
        if x.requires_grad:
            x.accumulate_grad(g[:, :cx])
        if y.requires_grad:
            y.accumulate_grad(g[:, cx:])

    return TensorNode(out, parents=(x, y), backward=_bw, name="concat")


def tensor_sum(x: TensorNode) -> TensorNode:
    """Sum of all elements, as a scalar node."""
    out = x.values.sum()

    def _bw(g):
        if x.requires_grad:
            x.accumulate_grad(np.full(x.shape, g, dtype=x.values.dtype))

    return TensorNode(out, parents=(x,), backward=_bw, name="sum")


def mse_loss(pred: TensorNode, target: TensorNode) -> TensorNode:
    """Mean of squared differences over all elements (scalar node)."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.values - target.values
    n = diff.size
    out = (diff * diff).sum() / n

    def _bw(g):
        scale = 2.0 * g / n
        if pred.requires_grad:
            pred.accumulate_grad(scale * diff)
        if target.requires_grad:
            target.accumulate_grad(-scale * diff)

    return TensorNode(out, parents=(pred, target), backward=_bw, name="mse")


def sinusoidal_time_embedding(t: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Deterministic timestep features: dim/2 sines and dim/2 cosines whose
    periods are geometrically spaced from 1 to 1e4."""
    if dim % 2 != 0:
        raise ConfigError(f"time embedding dim must be even, got {dim}")
    if t < 0:
        raise ConfigError(f"timestep index must be >= 0, got {t}")
    half = dim // 2
    if half == 1:
        periods = np.array([1.0])
    else:
        periods = np.power(10.0, 4.0 * np.arange(half) / (half - 1))
    ang = 2.0 * np.pi * float(t) / periods
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(dtype)


# ---------------------------------------------------------------------------
# parameters

class ParameterStore:
    """Named map of trainable tensors with deterministic (sorted) iteration."""

    def __init__(self):
        self._params: dict[str, TensorNode] = {}

    def register(self, name: str, values) -> TensorNode:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        node = TensorNode(np.asarray(values), requires_grad=True, name=name)
        self._params[name] = node
        return node

    def __getitem__(self, name: str) -> TensorNode:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def num_values(self) -> int:
        return sum(p.values.size for p in self._params.values())

    def astype(self, dtype):
        for p in self._params.values():
            p.values = p.values.astype(dtype)
            p.grad = None


PRM_MAGIC = b"PRM1"


def save_parameters(store: ParameterStore, path) -> None:
    """Write parameters in the PRM1 format: magic, u32 count, then per-tensor
    records (u16 name length, name bytes, u8 rank, u32 dims, f32 payload),
    sorted by name."""
    chunks = [PRM_MAGIC, struct.pack("<I", len(store))]
    for name, node in store.items():
        encoded = name.encode("utf-8")
        arr = node.values
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_parameter_arrays(path) -> dict[str, np.ndarray]:
    """Read a PRM1 file into a name -> float32 array mapping."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != PRM_MAGIC:
        raise BadMagic(f"{path}: expected magic {PRM_MAGIC!r}")
    if len(raw) < 8:
        raise TruncatedPayload(f"{path}: missing record count")
    (count,) = struct.unpack_from("<I", raw, 4)
    offset = 8
    out: dict[str, np.ndarray] = {}
    prev_name = None
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            if len(raw) < offset + name_len:
                raise TruncatedPayload(f"{path}: name truncated")
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            end = offset + 4 * n
            if len(raw) < end:
                raise TruncatedPayload(f"{path}: payload of {name!r} truncated")
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(dims)
            offset = end
        except struct.error as exc:
            raise TruncatedPayload(f"{path}: record header truncated") from exc
        if prev_name is not None and name <= prev_name:
            raise HeaderMismatch(f"{path}: names not sorted ({prev_name!r} >= {name!r})")
        prev_name = name
        out[name] = np.array(arr)
    if offset != len(raw):
        raise HeaderMismatch(f"{path}: {len(raw) - offset} trailing bytes")
    return out


def load_parameters(store: ParameterStore, path) -> None:
    """Load a PRM1 file into an existing store; names and shapes must match."""
    arrays = load_parameter_arrays(path)
    if set(arrays) != set(store.names()):
        missing = set(store.names()) - set(arrays)
        extra = set(arrays) - set(store.names())
        raise HeaderMismatch(
            f"{path}: parameter names differ (missing {sorted(missing)}, "
            f"unexpected {sorted(extra)})"
        )
    for name, arr in arrays.items():
        node = store[name]
        if node.values.shape != arr.shape:
            raise HeaderMismatch(
                f"{path}: shape of {name!r} is {arr.shape}, expected {node.values.shape}"
            )
        node.values = arr.astype(node.values.dtype)
        node.grad = None
