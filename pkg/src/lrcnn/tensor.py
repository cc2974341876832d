"""Dense float64 tensors with a reverse-mode autodiff tape.

Every differentiable operator in this package builds on the `Tensor` class
below: forward values are numpy arrays, and each op attaches
(parent, backward_fn) edges that `backward()` walks in reverse topological
order. Gradients from multiple consumers accumulate by summation.

Ops only record the tape while gradients are enabled (see `no_grad`), so
forward-only passes keep no intermediate buffers alive.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray

_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Disable tape recording within the block (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 n-d array that doubles as a node on the autodiff tape.

    `data` is always a C-contiguous-or-view float64 ndarray; `parents` holds
    (tensor, backward_fn) edges where backward_fn maps the output gradient to
    this edge's contribution to the parent gradient.
    """

    __slots__ = ("data", "grad", "parents")

    def __init__(self, data, parents: Sequence = ()):
        arr = np.asarray(data, dtype=np.float64)
        self.data: Array = arr
        self.grad: Array | None = None
        self.parents: tuple = tuple(parents) if _GRAD_ENABLED else ()

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)


class Parameter(Tensor):
    """Trainable leaf tensor; updated only by the optimizer between steps."""

    __slots__ = ("lr_mult",)

    def __init__(self, data, lr_mult: float = 1.0):
        super().__init__(data)
        self.parents = ()
        self.lr_mult = float(lr_mult)


def backward(root: Tensor) -> None:
    """Backpropagate from a scalar root; leaves end up with dL/dleaf in .grad.

    Nodes are visited exactly once, in reverse topological order. Gradient
    arrays are rebound (never mutated in place) so backward functions may
    return views.
    """
    if root.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        g = node.grad
        if g is None:
            continue
        for parent, fn in node.parents:
            contrib = fn(g)
            if parent.grad is None:
                parent.grad = contrib
            else:
                parent.grad = parent.grad + contrib


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return Tensor(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return Tensor(a.data - b.data, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return Tensor(ad * bd, [(a, lambda g: g * bd), (b, lambda g: g * ad)])


def add_scalar(a: Tensor, s: float) -> Tensor:
    return Tensor(a.data + s, [(a, lambda g: g)])


def mul_scalar(a: Tensor, s: float) -> Tensor:
    return Tensor(a.data * s, [(a, lambda g: g * s)])


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), [(a, lambda g: g * mask)])


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive inputs")
    ad = a.data
    return Tensor(np.log(ad), [(a, lambda g: g / ad)])


def pow_scalar(a: Tensor, p: float) -> Tensor:
    """a**p elementwise for non-negative a (exponent a plain float)."""
    if p == 0.0:
        out = np.ones_like(a.data)
        return Tensor(out, [(a, lambda g: np.zeros_like(g))])
    ad = a.data
    out = ad**p
    return Tensor(out, [(a, lambda g: g * p * ad ** (p - 1.0))])


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return Tensor(np.clip(a.data, lo, hi), [(a, lambda g: g * mask)])


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last dimension; rows sum to 1."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g: Array) -> Array:
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (g - dot) * y

    return Tensor(y, [(a, bw)])


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor(np.asarray(a.data.sum()), [(a, lambda g: np.full(shape, float(g)))])


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    return Tensor(a.data.reshape(shape), [(a, lambda g: g.reshape(old))])


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor(np.transpose(a.data, axes), [(a, lambda g: np.transpose(g, inv))])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Tensor(ad @ bd, [(a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)])


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows a[idx]; backward scatter-adds into the source rows."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def bw(g: Array) -> Array:
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return out

    return Tensor(a.data[idx], [(a, bw)])


def pick(a: Tensor, rows, cols) -> Tensor:
    """Select a[rows[i], cols[i]] as a 1-d tensor (2-d input)."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = a.shape

    def bw(g: Array) -> Array:
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g)
        return out

    return Tensor(a.data[rows, cols], [(a, bw)])


def elementwise(a: Tensor, kind: str, other: Tensor | None = None, scalar: float = 0.0) -> Tensor:
    """Dispatch by kind: relu, add, mul-scalar, log, softmax (last dim)."""
    if kind == "relu":
        return relu(a)
    if kind == "add":
        if other is None:
            raise ValueError("elementwise add needs a second tensor")
        return add(a, other)
    if kind == "mul-scalar":
        return mul_scalar(a, scalar)
    if kind == "log":
        return log(a)
    if kind == "softmax-over-last-dim":
        return softmax(a)
    raise ValueError(f"unknown elementwise kind: {kind}")


# ---------------------------------------------------------------------------
# spatial ops


def _conv_out_dim(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _im2col(xp: Array, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> Array:
    n, c = xp.shape[:2]
    sn, sc, sy, sx = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sy, sx, sy * sh, sx * sw),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, ho * wo)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
) -> Tensor:
    """2-d cross-correlation, NCHW input, OIKK weight, zero padding.

    Output spatial dims follow floor((H + 2p - K)/s) + 1; asymmetric kernels
    and padding are supported. Backward produces gradients for input, weight
    and bias.
    """
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    sh, sw = stride
    ph, pw = padding
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {ci}")
    ho = _conv_out_dim(h, kh, sh, ph)
    wo = _conv_out_dim(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output dims < 1: ({ho},{wo})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    w_mat = weight.data.reshape(o, c * kh * kw)
    out = np.matmul(w_mat, cols).reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    if not is_grad_enabled():
        return Tensor(out)

    def bw_x(g: Array) -> Array:
        gm = g.reshape(n, o, ho * wo)
        dcols = np.matmul(w_mat.T, gm).reshape(n, c, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += dcols[:, :, i, j]
        if ph or pw:
            return dxp[:, :, ph : ph + h, pw : pw + w]
        return dxp

    def bw_w(g: Array) -> Array:
        gm = g.reshape(n, o, ho * wo)
        return np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(o, c, kh, kw)

    parents = [(x, bw_x), (weight, bw_w)]
    if bias is not None:
        parents.append((bias, lambda g: g.sum(axis=(0, 2, 3))))
    return Tensor(out, parents)


def conv2d_direct(
    x: Array,
    weight: Array,
    bias: Array | None = None,
    stride: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
) -> Array:
    """Nested-loop direct convolution over plain arrays (the in-repo oracle).

    Agrees with conv2d to 1e-12; intended for small shapes only.
    """
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    assert ci == c
    sh, sw = stride
    ph, pw = padding
    ho = _conv_out_dim(h, kh, sh, ph)
    wo = _conv_out_dim(w, kw, sw, pw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0
                    for ci_ in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += weight[oi, ci_, i, j] * xp[ni, ci_, yi * sh + i, xi * sw + j]
                    out[ni, oi, yi, xi] = acc
            if bias is not None:
                out[ni, oi] += bias[oi]
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x (R, F_in) @ weight (F_out, F_in)^T + bias."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: {x.shape} x {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data[None, :]
    parents = [(x, lambda g: g @ wd), (weight, lambda g: g.T @ xd)]
    if bias is not None:
        parents.append((bias, lambda g: g.sum(axis=0)))
    return Tensor(out, parents)


def maxpool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Per-window max with -inf padding; gradient goes to the first argmax."""
    n, c, h, w = x.shape
    if padding > kernel // 2:
        raise ValueError("maxpool padding must be <= kernel // 2")
    ho = _conv_out_dim(h, kernel, stride, padding)
    wo = _conv_out_dim(w, kernel, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"maxpool output dims < 1: ({ho},{wo})")
    xp = (
        np.pad(x.data, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2), constant_values=-np.inf)
        if padding
        else x.data
    )
    sn, sc, sy, sx = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, ho, wo, kernel, kernel),
        strides=(sn, sc, sy * stride, sx * stride, sy, sx),
        writeable=False,
    )
    flat = view.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)  # first occurrence wins ties (row-major window order)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    if not is_grad_enabled():
        return Tensor(out)

    hp, wp = xp.shape[2], xp.shape[3]

    def bw(g: Array) -> Array:
        dxp = np.zeros((n, c, hp, wp))
        ni, ci_, yi, xi = np.indices((n, c, ho, wo))
        ky, kx = arg // kernel, arg % kernel
        np.add.at(dxp, (ni, ci_, yi * stride + ky, xi * stride + kx), g)
        if padding:
            return dxp[:, :, padding : padding + h, padding : padding + w]
        return dxp

    return Tensor(out, [(x, bw)])


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial dims: (R,C,H,W) -> (R,C)."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g: Array) -> Array:
        return np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy()

    return Tensor(out, [(x, bw)])


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel y = x * scale[c] + shift[c] on NCHW input.

    Stands in for normalization without batch statistics, so the forward is
    independent of batch composition.
    """
    sd = scale.data[None, :, None, None]
    xd = x.data
    out = xd * sd + shift.data[None, :, None, None]
    return Tensor(
        out,
        [
            (x, lambda g: g * sd),
            (scale, lambda g: (g * xd).sum(axis=(0, 2, 3))),
            (shift, lambda g: g.sum(axis=(0, 2, 3))),
        ],
    )


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    fn: Callable[[list[Tensor]], Tensor],
    inputs: Iterable[Array],
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients of a scalar-valued graph to central differences.

    Returns the max relative error over all input elements, with denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a.copy()) for a in arrays]
    out = fn(leaves)
    if out.size != 1:
        raise ValueError("grad_check function must produce a scalar")
    backward(out)
    analytic = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves
    ]

    worst = 0.0
    for k, base in enumerate(arrays):
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = fn([Tensor(a) for a in arrays]).item()
            flat[i] = orig - eps
            with no_grad():
                fm = fn([Tensor(a) for a in arrays]).item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            ana = analytic[k].reshape(-1)[i]
            if not (np.isfinite(num) and np.isfinite(ana)):
                raise FloatingPointError("non-finite value in grad_check")
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# serialization: "LRTN" magic, u32 rank, u64 dims, little-endian f64 payload

_MAGIC = b"LRTN"


def save_tensor(path, arr: Array) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(np.ascontiguousarray(arr).astype("<f8").tobytes())


def load_tensor(path) -> Array:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad tensor file magic: {magic!r}")
        (rank,) = struct.unpack("<I", f.read(4))
        dims = struct.unpack(f"<{rank}Q", f.read(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = f.read(8 * count)
        if len(payload) != 8 * count:
            raise ValueError("truncated tensor payload")
        return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
