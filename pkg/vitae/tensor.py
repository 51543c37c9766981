"""
Dense tensors over numpy with a reverse-mode tape.

Every op returns a new Tensor. While grad mode is on and one of the inputs
requires a gradient, the result carries a Node: the op name, the inputs, a
closure mapping the output gradient to input gradients, and a sequence
number. Sequence numbers give the append order of the graph; backward()
walks the nodes reachable from its root in reverse of that order.
"""

import itertools
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from vitae.errors import ConfigurationError, DimensionError, UsageError


logger = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}
ACTIVATIONS = ("silu", "gelu", "relu")

_GELU_C = math.sqrt(2.0 / math.pi)

_sequence = itertools.count()
_local = threading.local()
_faults = {}
_pool = None
_threads = 1


def grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def inject_fault(op, scale=1.5):
    """
    Scale the backward of every node of kind `op` by `scale`.
    scale=None removes the fault. Used to prove the gradient check bites.
    """
    if scale is None:
        _faults.pop(op, None)
    else:
        logger.warning("fault injected into backward of %s (x%s)", op, scale)
        _faults[op] = scale


def set_num_threads(count):
    """Cap intra-op parallelism (batch-split convolution)."""
    global _pool, _threads
    count = max(1, int(count))
    if count == _threads:
        return
    if _pool is not None:
        _pool.shutdown()
        _pool = None
    _threads = count
    if count > 1:
        _pool = ThreadPoolExecutor(max_workers=count, thread_name_prefix="vitae")
    logger.debug("intra-op threads set to %d", count)


def resolve_dtype(dtype):
    try:
        name = np.dtype(dtype).name
    except TypeError:
        raise UsageError("unsupported dtype {!r}".format(dtype))
    if name not in DTYPES:
        raise UsageError("unsupported dtype {}, expected one of {}".format(name, sorted(DTYPES)))
    return np.dtype(DTYPES[name])


class Node(object):
    __slots__ = ("op", "inputs", "backward", "seq")

    def __init__(self, op, inputs, backward, seq):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.seq = seq


class Tensor(object):
    """
    n-dimensional float32/float64 array that may take part in the tape.
    """

    # let ndarray <op> Tensor dispatch to the Tensor reflected operators
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            array = np.asarray(data, dtype=resolve_dtype(dtype))
        else:
            array = np.asarray(data)
            if array.dtype not in (np.float32, np.float64):
                array = array.astype(np.float64)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self._retain = False

    @classmethod
    def from_op(cls, data, inputs, backward, op):
        """Wrap an op result and record it on the tape when needed."""
        inputs = tuple(inputs)
        out = cls(np.asarray(data, dtype=inputs[0].dtype))
        if grad_enabled() and any(t.requires_grad for t in inputs):
            scale = _faults.get(op)
            if scale is not None:
                backward = _scaled(backward, scale)
            out.requires_grad = True
            out.node = Node(op, inputs, backward, next(_sequence))
        return out

    def __repr__(self):
        return "Tensor(shape={}, dtype={}, requires_grad={})".format(self.shape, self.dtype.name, self.requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise UsageError("item() needs a single-element tensor, got shape {}".format(self.shape))
        return float(self.data.reshape(-1)[0])

    def retain_grad(self):
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


class Graph(object):
    """Tensors with a node reachable from a root, in append order."""

    def __init__(self, tensors):
        self.tensors = tensors

    @classmethod
    def trace(cls, root):
        seen = set()
        found = []
        stack = [root]
        while stack:
            tensor = stack.pop()
            if tensor.node is None or id(tensor) in seen:
                continue
            seen.add(id(tensor))
            found.append(tensor)
            stack.extend(tensor.node.inputs)
        found.sort(key=lambda t: t.node.seq)
        return cls(found)

    def __len__(self):
        return len(self.tensors)

    def ops(self):
        return [t.node.op for t in self.tensors]


def backward(root):
    """Accumulate d(root)/d(leaf) into .grad of every requires_grad leaf."""
    if not isinstance(root, Tensor) or root.data.size != 1:
        shape = root.shape if isinstance(root, Tensor) else type(root).__name__
        raise UsageError("backward needs a scalar root, got {}".format(shape))
    if not root.requires_grad:
        raise UsageError("backward root is not on a graph (nothing requires grad)")
    seed = np.ones_like(root.data)
    if root.node is None:
        _accumulate(root, seed)
        return
    pending = {id(root): seed}
    for tensor in reversed(Graph.trace(root).tensors):
        grad = pending.pop(id(tensor), None)
        if grad is None:
            continue
        if tensor._retain:
            _accumulate(tensor, grad)
        for inp, inp_grad in zip(tensor.node.inputs, tensor.node.backward(grad)):
            if inp_grad is None or not inp.requires_grad:
                continue
            if inp.node is None:
                _accumulate(inp, inp_grad)
            else:
                key = id(inp)
                pending[key] = pending[key] + inp_grad if key in pending else inp_grad


def _accumulate(tensor, grad):
    grad = np.asarray(grad, dtype=tensor.dtype)
    if grad.shape != tensor.shape:
        raise DimensionError("gradient shape {} does not match tensor shape {}".format(grad.shape, tensor.shape))
    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def _scaled(backward_fn, scale):
    def faulty(grad):
        return tuple(None if g is None else g * scale for g in backward_fn(grad))
    return faulty


def _check_dtypes(*tensors):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise UsageError("mixed dtypes in one graph: {}".format(sorted(d.name for d in dtypes)))


def _pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise UsageError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    _check_dtypes(a, b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError("shapes {} and {} do not broadcast".format(a.shape, b.shape))
    return a, b


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def constant(value, like):
    """Non-differentiable tensor in the dtype of `like`."""
    return Tensor(np.asarray(value, dtype=like.dtype))


# element-wise arithmetic

def add(a, b):
    a, b = _pair(a, b)

    def backward(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)
    return Tensor.from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _pair(a, b)

    def backward(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)
    return Tensor.from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _pair(a, b)

    def backward(grad):
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)
    return Tensor.from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = _pair(a, b)

    def backward(grad):
        return (_unbroadcast(grad / b.data, a.shape),
                _unbroadcast(-grad * a.data / (b.data * b.data), b.shape))
    return Tensor.from_op(a.data / b.data, (a, b), backward, "div")


def neg(x):
    return Tensor.from_op(-x.data, (x,), lambda grad: (-grad,), "neg")


def exp(x):
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda grad: (grad * out,), "exp")


def log(x):
    return Tensor.from_op(np.log(x.data), (x,), lambda grad: (grad / x.data,), "log")


def matmul(a, b):
    """Batched product over the last two axes; leading axes broadcast."""
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul {} x {}: inner dimensions differ".format(a.shape, b.shape))
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError("matmul {} x {}: batch dimensions do not broadcast".format(a.shape, b.shape))

    def backward(grad):
        grad_a = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)
    return Tensor.from_op(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """x . W (+ b) with W stored as (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# shape and reduction ops

def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError("cannot reshape {} to {}".format(x.shape, shape))
    return Tensor.from_op(out, (x,), lambda grad: (grad.reshape(x.shape),), "reshape")


def transpose(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(np.transpose(x.data, axes), (x,),
                          lambda grad: (np.transpose(grad, inverse),), "transpose")


def reduce_sum(x, axis=None, keepdims=False):
    def backward(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, x.shape).copy(),)
    return Tensor.from_op(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def reduce_mean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(reduce_sum(x, axis, keepdims), 1.0 / count)


def broadcast_to(x, shape):
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError("cannot broadcast {} to {}".format(x.shape, shape))
    return Tensor.from_op(out, (x,), lambda grad: (_unbroadcast(grad, x.shape),), "broadcast")


def concat(tensors, axis):
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    _check_dtypes(*tensors)
    first = tensors[0]
    axis = axis % first.ndim
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(t.shape[i] != first.shape[i] for i in range(first.ndim) if i != axis):
            raise DimensionError("concat along axis {}: {} vs {}".format(axis, first.shape, t.shape))
    sizes = [t.shape[axis] for t in tensors]
    bounds = list(np.cumsum(sizes)[:-1])

    def backward(grad):
        return tuple(np.split(grad, bounds, axis=axis))
    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def concat_channels(tensors):
    tensors = list(tensors)
    for t in tensors:
        if t.ndim != 4:
            raise DimensionError("concat_channels expects N,C,H,W maps, got {}".format(t.shape))
    return concat(tensors, axis=1)


def slice_tokens(x, start, stop):
    """Tokens start:stop along axis 1."""
    length = x.shape[1]
    if not 0 <= start < stop <= length:
        raise DimensionError("token slice {}:{} out of range for {} tokens".format(start, stop, length))

    def backward(grad):
        full = np.zeros(x.shape, dtype=grad.dtype)
        full[:, start:stop] = grad
        return (full,)
    return Tensor.from_op(x.data[:, start:stop].copy(), (x,), backward, "slice")


def img2seq(x):
    """N,C,H,W feature map to N,H*W,C token sequence (row-major positions)."""
    if x.ndim != 4:
        raise DimensionError("img2seq expects N,C,H,W, got {}".format(x.shape))
    n, c, h, w = x.shape
    out = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n, h * w, c)

    def backward(grad):
        return (grad.reshape(n, h, w, c).transpose(0, 3, 1, 2),)
    return Tensor.from_op(out, (x,), backward, "img2seq")


def seq2img(t, height, width):
    if t.ndim != 3:
        raise DimensionError("seq2img expects N,L,C, got {}".format(t.shape))
    n, length, c = t.shape
    if length != height * width:
        raise DimensionError("seq2img: {} tokens cannot form a {}x{} map".format(length, height, width))
    out = np.ascontiguousarray(t.data.reshape(n, height, width, c).transpose(0, 3, 1, 2))

    def backward(grad):
        return (grad.transpose(0, 2, 3, 1).reshape(n, length, c),)
    return Tensor.from_op(out, (t,), backward, "seq2img")



def mean_spatial(x):
    """N,C,H,W to N,C: the average over each channel's map."""
    if x.ndim != 4:
        raise DimensionError("mean_spatial expects N,C,H,W, got {}".format(x.shape))
    n, c, h, w = x.shape

    def backward(grad):
        return (np.broadcast_to(grad[:, :, None, None] / (h * w), x.shape).copy(),)
    return Tensor.from_op(x.data.mean(axis=(2, 3)), (x,), backward, "mean_spatial")


# normalization and activations

def softmax_lastdim(x):
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last axis, got {}".format(x.shape))
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(grad):
        return (out * (grad - (grad * out).sum(axis=-1, keepdims=True)),)
    return Tensor.from_op(out, (x,), backward, "softmax")


def layernorm(x, gamma, beta, eps=1e-5):
    if eps <= 0:
        raise UsageError("layernorm eps must be positive, got {}".format(eps))
    _check_dtypes(x, gamma, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError("layernorm over {} needs gamma/beta of shape ({},)".format(x.shape, d))
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    lead = tuple(range(x.ndim - 1))

    def backward(grad):
        g_hat = grad * gamma.data
        grad_x = inv * (g_hat - g_hat.mean(axis=-1, keepdims=True)
                        - normed * (g_hat * normed).mean(axis=-1, keepdims=True))
        return grad_x, (grad * normed).sum(axis=lead), grad.sum(axis=lead)
    return Tensor.from_op(normed * gamma.data + beta.data, (x, gamma, beta), backward, "layernorm")


def batchnorm2d(x, gamma, beta, running_mean, running_var, training, eps=1e-5, momentum=0.1):
    """
    Per-channel normalization of N,C,H,W maps. running_mean / running_var
    are plain arrays, updated in place in training mode.
    """
    _check_dtypes(x, gamma, beta)
    if x.ndim != 4:
        raise DimensionError("batchnorm2d expects N,C,H,W, got {}".format(x.shape))
    n, c, h, w = x.shape
    count = n * h * w
    if count < 1:
        raise DimensionError("batchnorm2d needs at least one value per channel")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("batchnorm2d over {} channels needs gamma/beta of shape ({},)".format(c, c))
    axes = (0, 2, 3)
    scale = gamma.data.reshape(1, c, 1, 1)
    if training:
        mean = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        normed = centered * inv
        if running_mean is not None:
            unbiased = var * (count / (count - 1.0)) if count > 1 else var
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean.reshape(c)
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased.reshape(c)

        def grad_input(grad):
            g_hat = grad * scale
            return inv * (g_hat - g_hat.mean(axis=axes, keepdims=True)
                          - normed * (g_hat * normed).mean(axis=axes, keepdims=True))
    else:
        inv = 1.0 / np.sqrt(running_var.reshape(1, c, 1, 1) + eps)
        normed = (x.data - running_mean.reshape(1, c, 1, 1)) * inv

        def grad_input(grad):
            return grad * scale * inv

    def backward(grad):
        return grad_input(grad), (grad * normed).sum(axis=axes), grad.sum(axis=axes)
    out = normed * scale + beta.data.reshape(1, c, 1, 1)
    return Tensor.from_op(out, (x, gamma, beta), backward, "batchnorm")


def activation(x, kind):
    """silu, gelu (tanh approximation) or relu, with the matching exact derivative."""
    v = x.data
    if kind == "relu":
        out = np.maximum(v, 0)
        slope = (v > 0).astype(v.dtype)
    elif kind == "silu":
        sig = 0.5 * (1.0 + np.tanh(0.5 * v))
        out = v * sig
        slope = sig * (1.0 + v * (1.0 - sig))
    elif kind == "gelu":
        t = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))
        out = 0.5 * v * (1.0 + t)
        slope = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
    else:
        raise ConfigurationError("unknown activation {!r}, expected one of {}".format(kind, ACTIVATIONS))
    return Tensor.from_op(out, (x,), lambda grad: (grad * slope,), kind)


# convolution

def _as_pair(value, name):
    pair = tuple(value) if isinstance(value, (tuple, list)) else (value, value)
    if len(pair) != 2 or not all(isinstance(v, (int, np.integer)) for v in pair):
        raise ConfigurationError("conv {} must be an int or a pair of ints, got {!r}".format(name, value))
    return tuple(int(v) for v in pair)


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)
    dilation: tuple = (1, 1)
    groups: int = 1
    padding: tuple = (0, 0)

    def __post_init__(self):
        for name in ("kernel", "stride", "dilation", "padding"):
            pair = _as_pair(getattr(self, name), name)
            low = 0 if name == "padding" else 1
            if min(pair) < low:
                raise ConfigurationError("conv {} must be >= {}, got {}".format(name, low, pair))
            object.__setattr__(self, name, pair)
        if self.groups < 1:
            raise ConfigurationError("conv groups must be positive, got {}".format(self.groups))

    @classmethod
    def aligned(cls, kernel, stride=1, dilation=1, groups=1):
        """Padding dilation*(k-1)/2: output is ceil(in/stride) for any dilation."""
        pad = dilation * (kernel - 1) // 2
        return cls((kernel, kernel), (stride, stride), (dilation, dilation), groups, (pad, pad))

    def output_size(self, height, width):
        out = []
        for size, k, s, d, p in zip((height, width), self.kernel, self.stride, self.dilation, self.padding):
            length = (size + 2 * p - d * (k - 1) - 1) // s + 1
            if length < 1:
                raise ConfigurationError("conv {} over {}x{} input leaves no output".format(self, height, width))
            out.append(length)
        return tuple(out)


def _im2col(padded, spec, out_h, out_w):
    n, c = padded.shape[:2]
    kh, kw = spec.kernel
    sh, sw = spec.stride
    dh, dw = spec.dilation
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=padded.dtype)
    for i in range(kh):
        top = i * dh
        for j in range(kw):
            left = j * dw
            cols[:, :, i, j] = padded[:, :, top:top + sh * (out_h - 1) + 1:sh, left:left + sw * (out_w - 1) + 1:sw]
    return cols


def _col2im(grad_cols, padded_shape, spec, out_h, out_w):
    kh, kw = spec.kernel
    sh, sw = spec.stride
    dh, dw = spec.dilation
    grad = np.zeros(padded_shape, dtype=grad_cols.dtype)
    for i in range(kh):
        top = i * dh
        for j in range(kw):
            left = j * dw
            grad[:, :, top:top + sh * (out_h - 1) + 1:sh, left:left + sw * (out_w - 1) + 1:sw] += grad_cols[:, :, i, j]
    return grad


def _grouped_matmul(weights, cols):
    # (G, Co, K) @ (N, G, K, P); batch chunks keep each output's summation order
    n = cols.shape[0]
    if _pool is None or n < 2:
        return np.matmul(weights, cols)
    step = -(-n // _threads)
    chunks = [cols[start:start + step] for start in range(0, n, step)]
    return np.concatenate(list(_pool.map(lambda chunk: np.matmul(weights, chunk), chunks)), axis=0)


def conv2d(x, weight, bias=None, spec=ConvSpec()):
    """
    Cross-correlation of N,Cin,H,W with Cout,Cin/groups,kh,kw weights:
    explicit zero padding, stride, dilation, channel groups.
    """
    inputs = (x, weight) if bias is None else (x, weight, bias)
    _check_dtypes(*inputs)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and weight, got {} and {}".format(x.shape, weight.shape))
    n, cin, h, w = x.shape
    cout, cin_group, kh, kw = weight.shape
    groups = spec.groups
    if (kh, kw) != spec.kernel:
        raise DimensionError("weight kernel {}x{} does not match {}".format(kh, kw, spec.kernel))
    if cin % groups or cout % groups or cin_group * groups != cin:
        raise DimensionError("channels {} -> {} do not split into {} groups of weight {}".format(
            cin, cout, groups, weight.shape))
    if bias is not None and bias.shape != (cout,):
        raise DimensionError("conv bias shape {} does not match {} output channels".format(bias.shape, cout))
    out_h, out_w = spec.output_size(h, w)
    ph, pw = spec.padding
    padded = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    cols = _im2col(padded, spec, out_h, out_w).reshape(n, groups, cin_group * kh * kw, out_h * out_w)
    kernels = weight.data.reshape(groups, cout // groups, cin_group * kh * kw)
    out = _grouped_matmul(kernels, cols).reshape(n, cout, out_h, out_w)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def backward(grad):
        grad = grad.reshape(n, groups, cout // groups, out_h * out_w)
        grad_w = np.matmul(grad, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(weight.shape)
        grad_cols = np.matmul(np.swapaxes(kernels, -1, -2), grad).reshape(n, cin, kh, kw, out_h, out_w)
        grad_x = _col2im(grad_cols, padded.shape, spec, out_h, out_w)[:, :, ph:ph + h, pw:pw + w]
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, grad.sum(axis=(0, 3)).reshape(cout)
    return Tensor.from_op(out, inputs, backward, "conv2d")
