"""Reverse-mode automatic differentiation on dense float32 tensors.

The engine is a Wengert list: every operation appends one node to an
append-only tape (`Graph.nodes`), recording its input node ids, its forward
value, and a closure that maps the gradient at the output back to gradients
at the inputs. `backward` walks the tape once in reverse. Ops never mutate
their inputs, so a graph can be replayed or differentiated repeatedly with
bit-identical results.

Values are stored at the graph dtype (float32 by default; float64 is useful
for finite-difference testing). Reductions (sum/mean, layernorm statistics,
cross-entropy log-sum-exp) accumulate in float64 before casting back.

Heavy kernels lower onto BLAS: conv3d goes through an im2col copy in a
channels-last layout followed by a single GEMM, and attention is expressed
as batched matmuls around a softmax.
"""

from __future__ import annotations

import zlib

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError

Array = np.ndarray


# --------------------------------------------------------------------------
# deterministic splittable randomness

def _label_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    raise TypeError(f"rng label must be int or str, got {type(label).__name__}")


def substream(seed: int, *labels) -> int:
    """Derive a child seed for the named substream of a root seed.

    Children are statistically independent of each other and of the parent;
    the derivation is a pure function of (seed, labels), so any component can
    reconstruct its stream without threading generator state through the
    program.
    """
    ss = np.random.SeedSequence([int(seed)] + [_label_int(v) for v in labels])
    return int(ss.generate_state(1, np.uint64)[0])


def rng(seed: int, *labels) -> np.random.Generator:
    """Counter-based (Philox) generator for the named substream of seed."""
    ss = np.random.SeedSequence([int(seed)] + [_label_int(v) for v in labels])
    return np.random.Generator(np.random.Philox(ss))


def assert_finite(value, what: str) -> None:
    """Raise NumericalError if value contains NaN or Inf."""
    arr = np.asarray(value)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")


# --------------------------------------------------------------------------
# tape

class Node:
    __slots__ = ("tag", "inputs", "value", "vjp")

    def __init__(self, tag: str, inputs: tuple, value: Array, vjp):
        self.tag = tag
        self.inputs = inputs
        self.value = value
        self.vjp = vjp


class Tensor:
    """Handle to one node of a Graph: immutable dims plus the stored value."""

    __slots__ = ("graph", "nid")

    def __init__(self, graph: "Graph", nid: int):
        self.graph = graph
        self.nid = nid

    @property
    def data(self) -> Array:
        return self.graph.nodes[self.nid].value

    @property
    def dims(self) -> tuple:
        return self.graph.nodes[self.nid].value.shape

    @property
    def ndim(self) -> int:
        return self.graph.nodes[self.nid].value.ndim

    @property
    def size(self) -> int:
        return self.graph.nodes[self.nid].value.size

    def __repr__(self):
        node = self.graph.nodes[self.nid]
        return f"Tensor(nid={self.nid}, tag={node.tag}, dims={self.dims})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """Append-only tape of operations.

    grad=False disables recording of backward closures and the auxiliary
    buffers they capture (used for sampling loops, where activations would
    otherwise accumulate); backward on such a graph is an error.
    """

    def __init__(self, dtype=np.float32, grad: bool = True):
        self.dtype = np.dtype(dtype)
        self.grad = bool(grad)
        self.nodes: list[Node] = []
        self.gradients: dict[int, Array] | None = None

    def __len__(self):
        return len(self.nodes)

    def _emit(self, tag: str, inputs: tuple, value: Array, vjp) -> Tensor:
        value = np.asarray(value, dtype=self.dtype)
        if value.ndim and not value.flags["C_CONTIGUOUS"]:
            value = np.ascontiguousarray(value)
        self.nodes.append(Node(tag, inputs, value, vjp if self.grad else None))
        return Tensor(self, len(self.nodes) - 1)

    def leaf(self, value, check_finite: bool = True) -> Tensor:
        """Insert an input tensor (parameter or data) as a differentiable leaf."""
        arr = np.asarray(value, dtype=self.dtype)
        if check_finite and not np.all(np.isfinite(arr)):
            raise NumericalError("non-finite values in leaf tensor")
        return self._emit("leaf", (), arr, None)

    def constant(self, value) -> Tensor:
        """Insert a non-trained tensor (masks, positions); gradients to it are discarded."""
        return self._emit("const", (), np.asarray(value, dtype=self.dtype), None)


def _same_graph(*tensors: Tensor) -> Graph:
    g = tensors[0].graph
    for t in tensors[1:]:
        if t.graph is not g:
            raise ShapeError("operands belong to different graphs")
    return g


def backward(graph: Graph, root) -> dict[int, Array]:
    """Gradients of a scalar root with respect to every reachable node.

    Returns {node id: gradient array}, also stored on graph.gradients. The
    walk is a single reverse pass over the tape (already topologically
    ordered); repeated calls produce bit-identical maps.
    """
    if not graph.grad:
        raise ShapeError("graph was built with grad=False; no backward closures recorded")
    rid = root.nid if isinstance(root, Tensor) else int(root)
    if not (0 <= rid < len(graph.nodes)):
        raise ShapeError(f"root node id {rid} not in graph of {len(graph.nodes)} nodes")
    rval = graph.nodes[rid].value
    if rval.size != 1:
        raise ShapeError(f"backward root must be scalar, got dims {rval.shape}")

    reachable = np.zeros(rid + 1, dtype=bool)
    reachable[rid] = True
    for nid in range(rid, -1, -1):
        if reachable[nid]:
            for pid in graph.nodes[nid].inputs:
                reachable[pid] = True

    grads: dict[int, Array] = {rid: np.ones_like(rval)}
    for nid in range(rid, -1, -1):
        if not reachable[nid] or nid not in grads:
            continue
        node = graph.nodes[nid]
        if node.vjp is None:
            continue
        gin = node.vjp(grads[nid])
        for pid, g in zip(node.inputs, gin):
            if g is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + g
            else:
                grads[pid] = g
    graph.gradients = grads
    return grads


# --------------------------------------------------------------------------
# shape helpers

def _unbroadcast(g: Array, dims: tuple) -> Array:
    """Sum a broadcast gradient back down to the original operand dims."""
    extra = g.ndim - len(dims)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, od) in enumerate(zip(g.shape, dims)) if od == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    for da, db in zip(reversed(a), reversed(b)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: dims {a} and {b} are not broadcast-compatible")


# --------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b) -> Tensor:
    """Elementwise a + b; b may be a tensor (numpy broadcasting rules) or a scalar."""
    g = a.graph
    if not isinstance(b, Tensor):
        s = float(b)
        return g._emit("add", (a.nid,), a.data + s, lambda gout: (gout,))
    _same_graph(a, b)
    _check_broadcast(a.dims, b.dims, "add")
    ad, bd = a.dims, b.dims
    return g._emit(
        "add", (a.nid, b.nid), a.data + b.data,
        lambda gout: (_unbroadcast(gout, ad), _unbroadcast(gout, bd)),
    )


def sub(a: Tensor, b) -> Tensor:
    """Elementwise a - b; b may be a tensor or a scalar."""
    g = a.graph
    if not isinstance(b, Tensor):
        s = float(b)
        return g._emit("sub", (a.nid,), a.data - s, lambda gout: (gout,))
    _same_graph(a, b)
    _check_broadcast(a.dims, b.dims, "sub")
    ad, bd = a.dims, b.dims
    return g._emit(
        "sub", (a.nid, b.nid), a.data - b.data,
        lambda gout: (_unbroadcast(gout, ad), _unbroadcast(gout, bd).__neg__()),
    )


def mul(a: Tensor, b) -> Tensor:
    """Elementwise a * b; b may be a tensor (numpy broadcasting rules) or a scalar."""
    g = a.graph
    if not isinstance(b, Tensor):
        s = float(b)
        return g._emit("mul", (a.nid,), a.data * s, lambda gout: (gout * s,))
    _same_graph(a, b)
    _check_broadcast(a.dims, b.dims, "mul")
    av, bv = a.data, b.data
    return g._emit(
        "mul", (a.nid, b.nid), av * bv,
        lambda gout: (_unbroadcast(gout * bv, av.shape), _unbroadcast(gout * av, bv.shape)),
    )


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return a.graph._emit("exp", (a.nid,), y, lambda gout: (gout * y,))


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    c = 0.7978845608028654  # sqrt(2/pi)
    x2 = x * x
    t = np.tanh(c * (x + 0.044715 * (x2 * x)))
    y = 0.5 * x * (1.0 + t)

    def vjp(gout):
        du = c * (1.0 + 0.134145 * x2)
        return (gout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return a.graph._emit("gelu", (a.nid,), y, vjp)


# --------------------------------------------------------------------------
# matmul and attention

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; inputs of rank >= 2, leading dims broadcast per numpy."""
    g = _same_graph(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2, got dims {a.dims} and {b.dims}")
    if a.dims[-1] != b.dims[-2]:
        raise ShapeError(f"matmul inner dim mismatch: {a.dims} x {b.dims}")
    _check_broadcast(a.dims[:-2], b.dims[:-2], "matmul batch")
    av, bv = a.data, b.data

    def vjp(gout):
        ga = _unbroadcast(gout @ bv.swapaxes(-1, -2), av.shape)
        gb = _unbroadcast(av.swapaxes(-1, -2) @ gout, bv.shape)
        return ga, gb

    return g._emit("matmul", (a.nid, b.nid), av @ bv, vjp)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention over pre-projected q/k/v.

    q has dims (T_q, h) or (B, T_q, h); k and v share dims (.., T_kv, h) with
    the same batch as q. T_kv may differ from T_q (cross-attention over a
    longer context). The feature axis is split into `heads` heads of width
    h/heads, scores are scaled by 1/sqrt(h/heads), and the softmax is taken
    over keys. Output dims equal q dims.
    """
    _same_graph(q, k, v)
    if q.ndim not in (2, 3) or k.ndim != q.ndim or v.ndim != q.ndim:
        raise ShapeError(f"attention expects matching rank 2 or 3, got {q.dims}, {k.dims}, {v.dims}")
    squeeze = q.ndim == 2
    if squeeze:
        q = reshape(q, (1,) + q.dims)
        k = reshape(k, (1,) + k.dims)
        v = reshape(v, (1,) + v.dims)
    B, Tq, h = q.dims
    if h % heads != 0:
        raise ConfigError(f"attention: width {h} not divisible by heads {heads}")
    if k.dims != v.dims:
        raise ShapeError(f"attention k/v dims differ: {k.dims} vs {v.dims}")
    if k.dims[0] != B or k.dims[2] != h:
        raise ShapeError(f"attention k dims {k.dims} incompatible with q dims {q.dims}")
    Tkv = k.dims[1]
    hd = h // heads

    qh = transpose(reshape(q, (B, Tq, heads, hd)), (0, 2, 1, 3))
    kh = transpose(reshape(k, (B, Tkv, heads, hd)), (0, 2, 1, 3))
    vh = transpose(reshape(v, (B, Tkv, heads, hd)), (0, 2, 1, 3))
    scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / float(np.sqrt(hd)))
    weights = softmax(scores)
    out = matmul(weights, vh)
    out = reshape(transpose(out, (0, 2, 1, 3)), (B, Tq, h))
    if squeeze:
        out = reshape(out, (Tq, h))
    return out


# --------------------------------------------------------------------------
# normalization and activations over the last axis

def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis, with learned gain and bias."""
    g = _same_graph(x, gain, bias)
    h = x.dims[-1]
    if gain.dims != (h,) or bias.dims != (h,):
        raise ShapeError(f"layernorm gain/bias must have dims ({h},), got {gain.dims} and {bias.dims}")
    xv, gv, bv = x.data, gain.data, bias.data
    gdims, bdims = gain.dims, bias.dims
    mu = xv.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = np.square(xv.astype(np.float64) - mu).mean(axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(xv.dtype)
    xhat = ((xv - mu) * inv).astype(xv.dtype)
    y = xhat * gv + bv

    def vjp(gout):
        gg = gout * gv
        dgain = _unbroadcast(gout * xhat, gdims)
        dbias = _unbroadcast(gout, bdims)
        m1 = gg.mean(axis=-1, keepdims=True, dtype=np.float64).astype(xv.dtype)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(xv.dtype)
        dx = (gg - m1 - xhat * m2) * inv
        return dx, dgain, dbias

    return g._emit("layernorm", (x.nid, gain.nid, bias.nid), y, vjp)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    xv = x.data
    z = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(gout):
        dot = (gout * y).sum(axis=-1, keepdims=True)
        return ((gout - dot) * y,)

    return x.graph._emit("softmax", (x.nid,), y, vjp)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer target classes.

    logits: (N, K) or (K,); targets: int array (N,) or scalar. Returns a
    scalar tensor. The log-sum-exp is accumulated in float64.
    """
    g = logits.graph
    lv = logits.data
    if lv.ndim == 1:
        lv = lv[None, :]
    if lv.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (N, K) logits, got dims {logits.dims}")
    t = np.atleast_1d(np.asarray(targets))
    if t.ndim != 1 or t.shape[0] != lv.shape[0]:
        raise ShapeError(f"targets dims {t.shape} do not match logits rows {lv.shape[0]}")
    if not np.issubdtype(t.dtype, np.integer):
        raise ShapeError(f"targets must be integers, got dtype {t.dtype}")
    N, K = lv.shape
    if t.min() < 0 or t.max() >= K:
        raise ShapeError(f"target class out of range [0, {K})")

    z = lv.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    loss = (lse - z[np.arange(N), t]).mean()
    probs = np.exp(z - lse[:, None]).astype(lv.dtype)
    odims = logits.dims

    def vjp(gout):
        d = probs.copy()
        d[np.arange(N), t] -= 1.0
        d *= float(np.asarray(gout).reshape(())) / N
        return (d.reshape(odims),)

    return g._emit("softmax_xent", (logits.nid,), np.asarray(loss), vjp)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale slices along axis to unit Euclidean norm; zero-norm slices are an error."""
    xv = x.data
    sq = np.square(xv.astype(np.float64)).sum(axis=axis, keepdims=True)
    if np.any(sq == 0.0):
        raise NumericalError("l2_normalize: zero-norm slice (degenerate embedding)")
    inv = (1.0 / np.sqrt(sq)).astype(xv.dtype)
    y = xv * inv

    def vjp(gout):
        dot = (gout * y).sum(axis=axis, keepdims=True)
        return ((gout - y * dot) * inv,)

    return x.graph._emit("l2norm", (x.nid,), y, vjp)


# --------------------------------------------------------------------------
# reductions

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over axis (or all axes); accumulates in float64."""
    xv = x.data
    y = xv.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(xv.dtype)
    dims = x.dims

    def vjp(gout):
        gexp = np.asarray(gout)
        if axis is not None and not keepdims:
            gexp = np.expand_dims(gexp, axis)
        return (np.broadcast_to(gexp, dims).astype(xv.dtype),)

    return x.graph._emit("sum", (x.nid,), np.asarray(y), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over axis (or all axes); accumulates in float64."""
    xv = x.data
    y = xv.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(xv.dtype)
    dims = x.dims
    count = xv.size if axis is None else np.prod([dims[a] for a in np.atleast_1d(axis)])

    def vjp(gout):
        gexp = np.asarray(gout)
        if axis is not None and not keepdims:
            gexp = np.expand_dims(gexp, axis)
        return (np.broadcast_to(gexp, dims).astype(xv.dtype) / count,)

    return x.graph._emit("mean", (x.nid,), np.asarray(y), vjp)


# --------------------------------------------------------------------------
# structural ops

def reshape(x: Tensor, dims: tuple) -> Tensor:
    dims = tuple(int(d) for d in dims)
    if int(np.prod(dims)) != x.size:
        raise ShapeError(f"reshape from {x.dims} to {dims} changes element count")
    old = x.dims
    return x.graph._emit("reshape", (x.nid,), x.data.reshape(dims),
                         lambda gout: (gout.reshape(old),))


def transpose(x: Tensor, axes: tuple) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose axes {axes} are not a permutation of rank {x.ndim}")
    inv = tuple(int(a) for a in np.argsort(axes))
    return x.graph._emit("transpose", (x.nid,), np.ascontiguousarray(x.data.transpose(axes)),
                         lambda gout: (np.ascontiguousarray(gout.transpose(inv)),))


def concat(parts: list, axis: int = 0) -> Tensor:
    """Concatenate tensors along axis."""
    if not parts:
        raise ShapeError("concat of zero tensors")
    g = _same_graph(*parts)
    axis = int(axis)
    ref = list(parts[0].dims)
    for p in parts[1:]:
        d = list(p.dims)
        d[axis] = ref[axis]
        if d != ref:
            raise ShapeError(f"concat dims mismatch off axis {axis}: {parts[0].dims} vs {p.dims}")
    sizes = [p.dims[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(gout):
        return tuple(np.ascontiguousarray(np.take(gout, range(offsets[i], offsets[i + 1]), axis=axis))
                     for i in range(len(sizes)))

    value = np.concatenate([p.data for p in parts], axis=axis)
    return g._emit("concat", tuple(p.nid for p in parts), value, vjp)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along one axis."""
    axis = int(axis)
    if not (0 <= start < stop <= x.dims[axis]):
        raise ShapeError(f"slice [{start}:{stop}) out of range for axis {axis} of dims {x.dims}")
    idx = tuple(slice(None) if a != axis else slice(start, stop) for a in range(x.ndim))
    dims = x.dims

    def vjp(gout):
        gx = np.zeros(dims, dtype=gout.dtype)
        gx[idx] = gout
        return (gx,)

    return x.graph._emit("slice", (x.nid,), np.ascontiguousarray(x.data[idx]), vjp)


def broadcast_to(x: Tensor, dims: tuple) -> Tensor:
    dims = tuple(int(d) for d in dims)
    try:
        value = np.broadcast_to(x.data, dims)
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {x.dims} to {dims}: {e}") from None
    old = x.dims
    return x.graph._emit("broadcast", (x.nid,), np.ascontiguousarray(value),
                         lambda gout: (_unbroadcast(gout, old),))


def nearest_upsample3d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of (B, D, H, W, C) by an integer factor."""
    if x.ndim != 5:
        raise ShapeError(f"nearest_upsample3d expects (B, D, H, W, C), got dims {x.dims}")
    f = int(factor)
    B, D, H, W, C = x.dims
    y = x.data.repeat(f, axis=1).repeat(f, axis=2).repeat(f, axis=3)

    def vjp(gout):
        gr = gout.reshape(B, D, f, H, f, W, f, C)
        return (gr.sum(axis=(2, 4, 6), dtype=np.float64).astype(gout.dtype),)

    return x.graph._emit("upsample", (x.nid,), y, vjp)


# --------------------------------------------------------------------------
# 3-D convolution

def _im2col(xp: Array, k: int, s: int):
    """Extract k^3 patches from padded (B, D, H, W, C) volume at stride s.

    Returns (cols, out_spatial): cols has dims (B*Do*Ho*Wo, k^3*C) with the
    channel axis fastest, matching a (k, k, k, C, Co) kernel flattened to
    (k^3*C, Co).
    """
    B, D, H, W, C = xp.shape
    v = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    v = v[:, ::s, ::s, ::s]
    Do, Ho, Wo = v.shape[1:4]
    cols = np.ascontiguousarray(v.transpose(0, 1, 2, 3, 5, 6, 7, 4))
    return cols.reshape(B * Do * Ho * Wo, k * k * k * C), (Do, Ho, Wo)


def _conv_pad(padding, k: int) -> int:
    if padding == "same":
        return (k - 1) // 2
    if padding == "valid":
        return 0
    p = int(padding)
    if p < 0 or p > k - 1:
        raise ShapeError(f"conv3d padding {p} out of range [0, {k - 1}]")
    return p


def conv3d_batch(x: Tensor, w: Tensor, stride: int = 1, padding="same") -> Tensor:
    """Batched 3-D convolution (cross-correlation), channels-last.

    x: (B, D, H, W, C_in); w: (k, k, k, C_in, C_out); zero padding "same",
    "valid", or an integer. The strided output extent must divide evenly:
    (D + 2p - k) % stride == 0.
    """
    g = _same_graph(x, w)
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d_batch expects 5-D x and w, got {x.dims} and {w.dims}")
    k = w.dims[0]
    if w.dims[1] != k or w.dims[2] != k:
        raise ShapeError(f"conv3d kernel must be cubic, got dims {w.dims}")
    if w.dims[3] != x.dims[4]:
        raise ShapeError(f"conv3d channel mismatch: input has {x.dims[4]}, kernel expects {w.dims[3]}")
    s = int(stride)
    p = _conv_pad(padding, k)
    B, D, H, W, Ci = x.dims
    Co = w.dims[4]
    for name, d in (("D", D), ("H", H), ("W", W)):
        if d + 2 * p < k or (d + 2 * p - k) % s != 0:
            raise ShapeError(f"conv3d: extent {name}={d} with pad {p}, kernel {k}, stride {s} "
                             f"does not tile evenly")

    xv, wv = x.data, w.data
    xp = np.pad(xv, ((0, 0), (p, p), (p, p), (p, p), (0, 0))) if p else xv
    cols, (Do, Ho, Wo) = _im2col(xp, k, s)
    wmat = wv.reshape(k * k * k * Ci, Co)
    y = (cols @ wmat).reshape(B, Do, Ho, Wo, Co)
    keep_cols = cols if g.grad else None
    wdims = w.dims
    # data constants never need an input gradient; skipping dX avoids a large
    # dilated im2col when the convolution is a strided patch embedding
    skip_dx = g.nodes[x.nid].tag == "const"

    def vjp(gout):
        gy = gout.reshape(B * Do * Ho * Wo, Co)
        dw = (keep_cols.T @ gy).reshape(wdims)
        if skip_dx:
            return None, dw
        # dX: correlate the stride-dilated output gradient with the flipped kernel.
        gvol = gout
        if s > 1:
            gd = np.zeros((B, (Do - 1) * s + 1, (Ho - 1) * s + 1, (Wo - 1) * s + 1, Co),
                          dtype=gout.dtype)
            gd[:, ::s, ::s, ::s] = gvol
            gvol = gd
        q = k - 1 - p
        gp = np.pad(gvol, ((0, 0), (q, q), (q, q), (q, q), (0, 0))) if q else gvol
        wflip = wv[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3)
        gcols, _ = _im2col(gp, k, 1)
        dx = (gcols @ wflip.reshape(k * k * k * Co, Ci)).reshape(B, D, H, W, Ci)
        return dx, dw

    return g._emit("conv3d", (x.nid, w.nid), y, vjp)


def conv3d(x: Tensor, w: Tensor, stride: int = 1, padding="same") -> Tensor:
    """Single-sample 3-D convolution, channels-first contract.

    x: (C_in, D, H, W); w: (C_out, C_in, k, k, k). Returns (C_out, D', H', W').
    Thin wrapper over conv3d_batch (the batched channels-last kernel).
    """
    if x.ndim != 4 or w.ndim != 5:
        raise ShapeError(f"conv3d expects x (C_in, D, H, W) and w (C_out, C_in, k, k, k), "
                         f"got {x.dims} and {w.dims}")
    if w.dims[1] != x.dims[0]:
        raise ShapeError(f"conv3d channel mismatch: input has {x.dims[0]}, kernel expects {w.dims[1]}")
    xb = transpose(reshape(x, (1,) + x.dims), (0, 2, 3, 4, 1))
    wb = transpose(w, (2, 3, 4, 1, 0))
    y = conv3d_batch(xb, wb, stride=stride, padding=padding)
    out = transpose(y, (0, 4, 1, 2, 3))
    return reshape(out, out.dims[1:])


# --------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with bias correction; updates the parameter dict in place.

    betas (0.9, 0.999) and eps 1e-8. Parameters without a gradient entry in
    a given step are left untouched (their moments do not advance).
    """

    def __init__(self, params: dict[str, Array], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, Array]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in sorted(grads):
            if name not in self.params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            gv = grads[name].astype(self.params[name].dtype, copy=False)
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - b1) * (gv - m)
            v += (1.0 - b2) * (gv * gv - v)
            self.params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, Array]:
        """Moment buffers and step counter, for checkpointing."""
        out = {"opt.t": np.asarray([self.t], dtype=np.float32)}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state(self, state: dict[str, Array]) -> None:
        self.t = int(state["opt.t"][0])
        for k in self.params:
            self.m[k] = state[f"opt.m.{k}"].astype(self.m[k].dtype).reshape(self.m[k].shape)
            self.v[k] = state[f"opt.v.{k}"].astype(self.v[k].dtype).reshape(self.v[k].shape)


# --------------------------------------------------------------------------
# parameter plumbing

def leaves(g: Graph, params: dict[str, Array]) -> dict[str, Tensor]:
    """Insert every parameter as a leaf; returns name -> Tensor in sorted order."""
    return {name: g.leaf(params[name]) for name in sorted(params)}


def grads_by_name(param_leaves: dict[str, Tensor], gradmap: dict[int, Array]) -> dict[str, Array]:
    """Collect gradients for named leaves; absent entries become zeros."""
    out = {}
    for name, t in param_leaves.items():
        gv = gradmap.get(t.nid)
        out[name] = np.zeros(t.dims, dtype=t.data.dtype) if gv is None else gv
    return out
