"""
ViTAE built from configs: pyramid reduction (PRM), parallel convolution
(PCM), attention and feed-forward blocks assembled into reduction cells
(RC) and normal cells (NC), followed by a class-token head.

Parameters live in a ParamStore keyed by module path, e.g.
rc1.prm.branch0.weight or nc3.mhsa.wq. Forward functions are pure functions
of (input, config, params) so the same code serves training, gradient
checks and analysis.
"""

import functools
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from vitae.config import NCConfig, RCConfig
from vitae.errors import ConfigurationError, DimensionError
from vitae.tensor import (
    ConvSpec, Tensor, activation, batchnorm2d, broadcast_to, concat, concat_channels, constant, conv2d, img2seq,
    layernorm, linear, matmul, no_grad, resolve_dtype, seq2img, slice_tokens, softmax_lastdim)


logger = logging.getLogger(__name__)

INIT_STD = 0.02


class ParamStore(object):
    """
    Ordered name -> Tensor map of learnable parameters, plus the buffers
    (BN running statistics, random feature projections) that travel with
    them but are never optimized.
    """

    def __init__(self, dtype="float32"):
        self.dtype = resolve_dtype(dtype)
        self._params = OrderedDict()
        self._buffers = OrderedDict()
        self._no_decay = set()

    def add(self, name, value, decay=True):
        if name in self._params or name in self._buffers:
            raise ConfigurationError("duplicate parameter name {}".format(name))
        tensor = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = tensor
        if not decay:
            self._no_decay.add(name)
        return tensor

    def add_buffer(self, name, value):
        if name in self._params or name in self._buffers:
            raise ConfigurationError("duplicate buffer name {}".format(name))
        self._buffers[name] = np.array(value, dtype=self.dtype)
        return self._buffers[name]

    def __getitem__(self, name):
        try:
            return self._params[name]
        except KeyError:
            raise ConfigurationError("model has no parameter {}".format(name))

    def buffer(self, name):
        try:
            return self._buffers[name]
        except KeyError:
            raise ConfigurationError("model has no buffer {}".format(name))

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def buffers(self):
        return self._buffers.items()

    def decays(self, name):
        return name not in self._no_decay

    def zero_grad(self):
        for tensor in self._params.values():
            tensor.zero_grad()

    def num_elements(self):
        return sum(t.size for t in self._params.values())

    def astype(self, dtype, requires_grad=True):
        other = ParamStore(dtype)
        for name, tensor in self._params.items():
            other.add(name, tensor.data, decay=self.decays(name))
            other[name].requires_grad = requires_grad
        for name, value in self._buffers.items():
            other.add_buffer(name, value)
        return other

    def copy(self):
        return self.astype(self.dtype)

    def detached(self):
        """Copy whose parameters take no part in the tape."""
        return self.astype(self.dtype, requires_grad=False)

    def equals(self, other):
        """Bit-identical names, shapes, dtypes and values."""
        if self.names() != other.names() or [n for n, _ in self.buffers()] != [n for n, _ in other.buffers()]:
            return False
        pairs = [(t.data, other[n].data) for n, t in self.items()]
        pairs += [(v, other.buffer(n)) for n, v in self.buffers()]
        return all(a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b) for a, b in pairs)


def truncated_normal(rng, shape, std=INIT_STD, bound=2.0):
    """Normal draws with |z| > bound resampled, scaled by std. No rng: zeros."""
    if rng is None:
        return np.zeros(shape)
    values = rng.standard_normal(shape)
    outside = np.abs(values) > bound
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > bound
    return values * std


def orthogonal_features(rng, rows, cols):
    """Stacked blocks of random orthogonal rows, scaled to norm sqrt(cols)."""
    if rng is None:
        return np.zeros((rows, cols))
    blocks = []
    count = 0
    while count < rows:
        q, _ = np.linalg.qr(rng.standard_normal((cols, cols)))
        blocks.append(q.T)
        count += cols
    return np.concatenate(blocks)[:rows] * math.sqrt(cols)


def num_features(rc_cfg):
    return max(1, int(rc_cfg.head_dim * rc_cfg.kernel_ratio))


# plan

@dataclass
class CellPlan:
    name: str
    kind: str
    config: object
    input_shape: tuple
    output_shape: tuple


@dataclass
class ModelPlan:
    """Executable description of the layer sequence for one input size."""
    config: object
    input_size: tuple
    cells: list = field(default_factory=list)
    grid: tuple = (0, 0)

    @property
    def num_tokens(self):
        return self.grid[0] * self.grid[1] + 1

    @property
    def embed_dim(self):
        return self.config.embed_dim

    def describe(self):
        h, w, c = self.input_size
        lines = ["input {}x{}x{}".format(h, w, c)]
        for cell in self.cells:
            if cell.kind == "rc":
                cfg = cell.config
                lines.append("{}: {} -> {}  dilations {} stride {} attention {}".format(
                    cell.name, "x".join(map(str, cell.input_shape)), "x".join(map(str, cell.output_shape)),
                    list(cfg.dilation_set), cfg.stride, cfg.attention))
            else:
                lines.append("{}: {} tokens x {}".format(cell.name, cell.input_shape[0], cell.input_shape[1]))
        lines.append("head: {} -> {} classes".format(self.embed_dim, self.config.num_classes))
        return lines


def plan_model(cfg, input_size=None):
    """Validate `cfg` and trace cell shapes for `input_size` (H, W), default cfg.input_size."""
    cfg.validate()
    h, w = (cfg.input_size[0], cfg.input_size[1]) if input_size is None else input_size
    channels = cfg.input_size[2]
    cfg.check_input(h, w)
    plan = ModelPlan(config=cfg, input_size=(h, w, channels))
    for index, rc in enumerate(cfg.rcs, start=1):
        out = (rc.out_channels, h // rc.stride, w // rc.stride)
        plan.cells.append(CellPlan("rc{}".format(index), "rc", rc, (channels, h, w), out))
        channels, h, w = out
    plan.grid = (h, w)
    tokens = (h * w + 1, cfg.embed_dim)
    for index, nc in enumerate(cfg.ncs, start=1):
        plan.cells.append(CellPlan("nc{}".format(index), "nc", nc, tokens, tokens))
    return plan


# initialization

def _init_conv(store, rng, name, cout, cin, kernel):
    store.add(name + ".weight", truncated_normal(rng, (cout, cin, kernel, kernel)))
    store.add(name + ".bias", np.zeros(cout), decay=False)


def _init_norm(store, name, width):
    store.add(name + ".gamma", np.ones(width), decay=False)
    store.add(name + ".beta", np.zeros(width), decay=False)


def _init_batchnorm(store, name, width):
    _init_norm(store, name, width)
    store.add_buffer(name + ".running_mean", np.zeros(width))
    store.add_buffer(name + ".running_var", np.ones(width))


def _init_prm(store, rng, name, in_channels, widths, kernel):
    for j, width in enumerate(widths):
        _init_conv(store, rng, "{}.branch{}".format(name, j), width, in_channels, kernel)


def _init_pcm(store, rng, name, in_channels, hidden, out_channels, groups, cfg):
    _init_conv(store, rng, name + ".conv0", hidden, in_channels // groups, 3)
    if cfg.pcm_bn:
        _init_batchnorm(store, name + ".bn0", hidden)
    _init_conv(store, rng, name + ".conv1", hidden, hidden // groups, 3)
    if cfg.pcm_extra_bn:
        _init_batchnorm(store, name + ".bn1", hidden)
    _init_conv(store, rng, name + ".conv2", out_channels, hidden // groups, 3)


def _init_attention(store, rng, name, width):
    for key in ("wq", "wk", "wv", "wo"):
        store.add("{}.{}".format(name, key), truncated_normal(rng, (width, width)))
    store.add(name + ".bo", np.zeros(width), decay=False)


def _init_ffn(store, rng, name, width, hidden):
    store.add(name + ".w1", truncated_normal(rng, (width, hidden)))
    store.add(name + ".b1", np.zeros(hidden), decay=False)
    store.add(name + ".w2", truncated_normal(rng, (hidden, width)))
    store.add(name + ".b2", np.zeros(width), decay=False)


def _init_rc(store, rng, name, rc):
    _init_prm(store, rng, name + ".prm", rc.in_channels, rc.branch_widths(), rc.kernel)
    _init_norm(store, name + ".ln1", rc.embed_dim)
    _init_attention(store, rng, name + ".mhsa", rc.embed_dim)
    if rc.attention == "performer":
        store.add_buffer(name + ".mhsa.features", orthogonal_features(rng, num_features(rc), rc.head_dim))
    if rc.pcm_enabled:
        if rc.parallel_branch == "pcm":
            _init_pcm(store, rng, name + ".pcm", rc.in_channels, rc.pcm_hidden, rc.out_channels, 1, rc)
        else:
            _init_prm(store, rng, name + ".prm2", rc.in_channels, rc.parallel_widths(), rc.kernel)
    _init_norm(store, name + ".ln2", rc.out_channels)
    _init_ffn(store, rng, name + ".ffn", rc.out_channels, rc.hidden_dim)


def _init_nc(store, rng, name, nc):
    _init_norm(store, name + ".ln1", nc.embed_dim)
    _init_attention(store, rng, name + ".mhsa", nc.embed_dim)
    if nc.pcm_enabled:
        _init_pcm(store, rng, name + ".pcm", nc.embed_dim, nc.embed_dim, nc.embed_dim, nc.pcm_groups, nc)
    _init_norm(store, name + ".ln2", nc.embed_dim)
    _init_ffn(store, rng, name + ".ffn", nc.embed_dim, nc.hidden_dim)


def build_model(cfg, dtype="float32", initialize=True):
    """
    Allocate and initialize every parameter of `cfg`; deterministic under
    cfg.seed. initialize=False leaves everything zero, for loading.
    """
    plan = plan_model(cfg)
    rng = np.random.default_rng(cfg.seed) if initialize else None
    store = ParamStore(dtype)
    for index, rc in enumerate(cfg.rcs, start=1):
        _init_rc(store, rng, "rc{}".format(index), rc)
    cls_shape = (1, 1, cfg.embed_dim)
    store.add("cls_token", np.zeros(cls_shape) if rng is None else rng.normal(0.0, INIT_STD, cls_shape), decay=False)
    for index, nc in enumerate(cfg.ncs, start=1):
        _init_nc(store, rng, "nc{}".format(index), nc)
    _init_norm(store, "head.ln", cfg.embed_dim)
    store.add("head.weight", truncated_normal(rng, (cfg.embed_dim, cfg.num_classes)))
    store.add("head.bias", np.zeros(cfg.num_classes), decay=False)
    logger.info("built model: %d parameters in %d tensors (%s)", store.num_elements(), len(store), store.dtype.name)
    return store, plan


# forward pieces

@functools.lru_cache(maxsize=32)
def _sinusoid_table(num_tokens, dim):
    position = np.arange(num_tokens, dtype=np.float64)[:, None]
    rates = np.power(10000.0, -np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.empty((num_tokens, dim))
    table[:, 0::2] = np.sin(position * rates)
    table[:, 1::2] = np.cos(position * rates)
    table.setflags(write=False)
    return table


def sinusoid_pos_encoding(num_tokens, dim):
    """Transformer sine/cosine table; row 0 belongs to the class token."""
    if dim % 2:
        raise ConfigurationError("sinusoid position encoding needs an even dim, got {}".format(dim))
    return Tensor(_sinusoid_table(num_tokens, dim).copy())


class Trace(object):
    """
    Collects what analysis needs from one forward pass: post-softmax
    attention per layer with its token grid, and the NC attention outputs.
    `offsets` adds a constant to a named output, for finite-difference checks.
    """

    def __init__(self, offsets=None):
        self.attention = OrderedDict()
        self.grids = {}
        self.outputs = OrderedDict()
        self.offsets = dict(offsets or {})

    def record_attention(self, name, weights, grid, cls_tokens):
        self.attention[name] = weights
        self.grids[name] = (tuple(grid), cls_tokens)

    def observe(self, name, tensor):
        offset = self.offsets.get(name)
        if offset is not None:
            tensor = tensor + constant(offset, tensor)
        tensor.retain_grad()
        self.outputs[name] = tensor
        return tensor


def _split_heads(x, heads):
    n, length, width = x.shape
    return x.reshape(n, length, heads, width // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    n, heads, length, head_dim = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, length, heads * head_dim)


def _positive_features(x, features, per_row):
    # exp(w.x - |x|^2/2) / sqrt(m) with a detached max pulled out of the exponent
    head_dim = x.shape[-1]
    scaled = x * (head_dim ** -0.25)
    projection = matmul(scaled, constant(np.ascontiguousarray(features.T), x))
    logits = projection - (scaled * scaled).sum(axis=-1, keepdims=True) * 0.5
    axis = -1 if per_row else (-2, -1)
    stabilizer = constant(logits.data.max(axis=axis, keepdims=True), x)
    return (logits - stabilizer).exp() * (features.shape[0] ** -0.5)


def _performer_context(q, k, v, features, materialize=False):
    phi_q = _positive_features(q, features, per_row=True)
    phi_k = _positive_features(k, features, per_row=False)
    key_values = matmul(phi_k.transpose(0, 1, 3, 2), v)
    normalizer = matmul(phi_q, phi_k.sum(axis=-2, keepdims=True).transpose(0, 1, 3, 2))
    implied = None
    if materialize:
        implied = np.matmul(phi_q.data, np.swapaxes(phi_k.data, -1, -2)) / normalizer.data
    return matmul(phi_q, key_values) / normalizer, implied


def attention_forward(tokens, params, name, heads, kind="full", trace=None, grid=None, cls_tokens=0):
    """
    Width-preserving multi-head attention over N,L,D tokens. `kind` picks
    exact softmax or performer random features; with a trace the (implied)
    attention weights are recorded.
    """
    wq = params[name + ".wq"]
    if tokens.ndim != 3 or tokens.shape[-1] != wq.shape[0]:
        raise DimensionError("{}: tokens {} do not match projection {}".format(name, tokens.shape, wq.shape))
    width = wq.shape[1]
    if width % heads:
        raise DimensionError("{}: width {} not divisible by {} heads".format(name, width, heads))
    q = _split_heads(matmul(tokens, wq), heads)
    k = _split_heads(matmul(tokens, params[name + ".wk"]), heads)
    v = _split_heads(matmul(tokens, params[name + ".wv"]), heads)
    if kind == "full":
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(width // heads))
        weights = softmax_lastdim(scores)
        context = matmul(weights, v)
        implied = weights.data
    elif kind == "performer":
        context, implied = _performer_context(q, k, v, params.buffer(name + ".features"),
                                               trace is not None)
    else:
        raise ConfigurationError("{}: unknown attention kind {!r}".format(name, kind))
    if trace is not None:
        trace.record_attention(name, implied, grid, cls_tokens)
    return linear(_merge_heads(context), params[name + ".wo"], params[name + ".bo"])


def mhsa_forward(tokens, params, heads, name="mhsa", trace=None):
    """Width-preserving multi-head self-attention (as used in normal cells)."""
    return attention_forward(tokens, params, name, heads, "full", trace)


def ffn_forward(x, params, name):
    hidden = activation(linear(x, params[name + ".w1"], params[name + ".b1"]), "gelu")
    return linear(hidden, params[name + ".w2"], params[name + ".b2"])


def prm_forward(f, rc_cfg, params, name="prm"):
    """One strided, dilated conv per dilation, concatenated in dilation order, then the PRM activation."""
    if f.ndim != 4:
        raise DimensionError("{}: expected N,C,H,W input, got {}".format(name, f.shape))
    stride = rc_cfg.stride
    if f.shape[2] % stride or f.shape[3] % stride:
        raise DimensionError("{}: input {}x{} not divisible by stride {}".format(name, f.shape[2], f.shape[3], stride))
    branches = []
    for j, dilation in enumerate(rc_cfg.dilation_set):
        prefix = "{}.branch{}".format(name, j)
        spec = ConvSpec.aligned(rc_cfg.kernel, stride, dilation)
        branches.append(conv2d(f, params[prefix + ".weight"], params[prefix + ".bias"], spec))
    out = concat_channels(branches)
    if rc_cfg.prm_activation != "none":
        out = activation(out, rc_cfg.prm_activation)
    return out


def _pcm_layout(cfg):
    if isinstance(cfg, RCConfig):
        return cfg.pcm_strides, 1
    if isinstance(cfg, NCConfig):
        return (1, 1, 1), cfg.pcm_groups
    raise ConfigurationError("PCM needs an RC or NC config, got {}".format(type(cfg).__name__))


def _batchnorm(x, params, name, training):
    return batchnorm2d(x, params[name + ".gamma"], params[name + ".beta"], params.buffer(name + ".running_mean"),
                       params.buffer(name + ".running_var"), training)


def pcm_forward(f, cfg, params, name="pcm", training=False):
    """conv3x3 -> [BN] -> act -> conv3x3 -> [BN] -> act -> conv3x3."""
    strides, groups = _pcm_layout(cfg)
    x = f
    for index, stride in enumerate(strides):
        prefix = "{}.conv{}".format(name, index)
        x = conv2d(x, params[prefix + ".weight"], params[prefix + ".bias"], ConvSpec.aligned(3, stride, 1, groups))
        if index == 2:
            break
        if (index == 0 and cfg.pcm_bn) or (index == 1 and cfg.pcm_extra_bn):
            x = _batchnorm(x, params, "{}.bn{}".format(name, index), training)
        x = activation(x, cfg.pcm_activation)
    return x


def _fuse_and_feed(attended, local, fusion, params, name):
    if local is not None and fusion == "pre":
        attended = attended + local
    out = attended + ffn_forward(layernorm(attended, params[name + ".ln2.gamma"], params[name + ".ln2.beta"]),
                                 params, name + ".ffn")
    if local is not None and fusion == "post":
        out = out + local
    return out


def rc_forward(f, rc_cfg, params, name="rc1", training=False, trace=None):
    if f.ndim != 4 or f.shape[1] != rc_cfg.in_channels:
        raise DimensionError("{}: expected N,{},H,W input, got {}".format(name, rc_cfg.in_channels, f.shape))
    multi_scale = prm_forward(f, rc_cfg, params, name + ".prm")
    grid = multi_scale.shape[2:]
    tokens = layernorm(img2seq(multi_scale), params[name + ".ln1.gamma"], params[name + ".ln1.beta"])
    global_ = attention_forward(tokens, params, name + ".mhsa", rc_cfg.heads, rc_cfg.attention, trace, grid, 0)
    local = None
    if rc_cfg.pcm_enabled:
        if rc_cfg.parallel_branch == "pcm":
            local = img2seq(pcm_forward(f, rc_cfg, params, name + ".pcm", training))
        else:
            local = img2seq(prm_forward(f, rc_cfg, params, name + ".prm2"))
    out = _fuse_and_feed(global_, local, rc_cfg.fusion, params, name)
    return seq2img(out, grid[0], grid[1])


def nc_forward(t, nc_cfg, params, grid, name="nc1", training=False, trace=None):
    if t.ndim != 3:
        raise DimensionError("{}: expected N,L+1,D tokens, got {}".format(name, t.shape))
    n, length, width = t.shape
    h, w = grid
    if length != h * w + 1:
        raise DimensionError("{}: {} tokens do not match a {}x{} grid plus class token".format(name, length, h, w))
    if width != nc_cfg.embed_dim:
        raise DimensionError("{}: token width {} does not match embed_dim {}".format(name, width, nc_cfg.embed_dim))
    normed = layernorm(t, params[name + ".ln1.gamma"], params[name + ".ln1.beta"])
    attended = attention_forward(normed, params, name + ".mhsa", nc_cfg.heads, "full", trace, grid, 1)
    if trace is not None:
        attended = trace.observe(name + ".mhsa", attended)
    global_ = t + attended
    local = None
    if nc_cfg.pcm_enabled:
        spatial = seq2img(slice_tokens(t, 1, length), h, w)
        local = img2seq(pcm_forward(spatial, nc_cfg, params, name + ".pcm", training))
        # the class token has no spatial neighbours; its PCM row stays zero
        local = concat([constant(np.zeros((n, 1, width)), t), local], axis=1)
    return _fuse_and_feed(global_, local, nc_cfg.fusion, params, name)


def model_forward(x, cfg, params, training=False, trace=None):
    """Images N,C,H,W to logits N,num_classes."""
    if x.ndim != 4:
        raise DimensionError("model input must be N,C,H,W, got {}".format(x.shape))
    n, channels, height, width = x.shape
    cfg.check_input(height, width, channels)
    f = x
    for index, rc in enumerate(cfg.rcs, start=1):
        f = rc_forward(f, rc, params, "rc{}".format(index), training, trace)
    grid = f.shape[2:]
    tokens = img2seq(f)
    cls_token = broadcast_to(params["cls_token"], (n, 1, tokens.shape[-1]))
    t = concat([cls_token, tokens], axis=1)
    if cfg.use_pos_embedding:
        t = t + constant(_sinusoid_table(t.shape[1], t.shape[2]), t)
    for index, nc in enumerate(cfg.ncs, start=1):
        t = nc_forward(t, nc, params, grid, "nc{}".format(index), training, trace)
    cls_out = slice_tokens(t, 0, 1).reshape(n, t.shape[-1])
    cls_out = layernorm(cls_out, params["head.ln.gamma"], params["head.ln.beta"])
    return linear(cls_out, params["head.weight"], params["head.bias"])


class ViTAE(object):
    """A built model: config, plan and parameters, callable on image batches."""

    def __init__(self, cfg, params=None, dtype="float32"):
        if params is None:
            params, plan = build_model(cfg, dtype)
        else:
            plan = plan_model(cfg)
        self.cfg = cfg
        self.params = params
        self.plan = plan

    @property
    def dtype(self):
        return self.params.dtype

    def __call__(self, images, training=False, trace=None):
        x = images if isinstance(images, Tensor) else Tensor(images, dtype=self.dtype)
        return model_forward(x, self.cfg, self.params, training, trace)

    def predict(self, images, batch_size=256):
        """Eval-mode logits as an array, in batches, without recording a graph."""
        chunks = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                chunks.append(self(images[start:start + batch_size]).data)
        return np.concatenate(chunks) if chunks else np.zeros((0, self.cfg.num_classes), dtype=self.dtype)

    def clone(self):
        return ViTAE(self.cfg, self.params.copy())
