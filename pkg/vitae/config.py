"""
Declarative descriptions of models, training runs and data sources.

Every config is a frozen dataclass. from_dict() rejects unknown fields with
the dotted path of the offender and turns JSON lists into tuples, so that
parsing what to_dict() emitted gives back an equal object.
"""

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import ClassVar, Optional, Tuple, Union

from vitae.errors import ConfigurationError


logger = logging.getLogger(__name__)

FUSIONS = ("pre", "post")
PCM_ACTIVATIONS = ("silu", "gelu")
PRM_ACTIVATIONS = ("gelu", "silu", "none")
PARALLEL_BRANCHES = ("pcm", "prm")
ATTENTIONS = ("full", "performer")
DTYPE_NAMES = ("float32", "float64")


def _join(path, name):
    return "{}.{}".format(path, name) if path else str(name)


def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def _thaw(value):
    if isinstance(value, tuple):
        return [_thaw(v) for v in value]
    if isinstance(value, dict):
        return {k: _thaw(v) for k, v in value.items()}
    return value


def _is_int(value):
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def split_channels(total, count):
    """`total` channels over `count` branches, as evenly as possible, wider first."""
    base, extra = divmod(total, count)
    return tuple(base + (1 if j < extra else 0) for j in range(count))


class ConfigBase(object):
    """from_dict/to_dict shared by every config dataclass."""

    # field name -> (config class, is a list of them)
    _nested: ClassVar[dict] = {}

    @classmethod
    def from_dict(cls, data, path=""):
        if isinstance(data, cls):
            return data
        if not isinstance(data, dict):
            raise ConfigurationError("{}: expected an object, got {}".format(path or cls.__name__, type(data).__name__))
        known = {f.name for f in fields(cls)}
        for name in data:
            if name not in known:
                raise ConfigurationError("{}: unknown field".format(_join(path, name)))
        kwargs = {}
        for name, value in data.items():
            child = cls._nested.get(name)
            where = _join(path, name)
            if child is None or value is None:
                kwargs[name] = _freeze(value)
            elif child[1]:
                if not isinstance(value, (list, tuple)):
                    raise ConfigurationError("{}: expected a list".format(where))
                kwargs[name] = tuple(child[0].from_dict(v, "{}[{}]".format(where, i)) for i, v in enumerate(value))
            else:
                kwargs[name] = child[0].from_dict(value, where)
        try:
            return cls(**kwargs)
        except TypeError as ex:
            raise ConfigurationError("{}: {}".format(path or cls.__name__, ex))

    def to_dict(self):
        return _thaw(asdict(self))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _check(problems, condition, message):
    if not condition:
        problems.append(message)


def _default_pcm_strides(stride):
    """Front-load factors of two: 4 -> (2, 2, 1), 2 -> (2, 1, 1)."""
    strides = []
    remaining = stride
    for _ in range(2):
        if remaining % 2 == 0:
            strides.append(2)
            remaining //= 2
        else:
            strides.append(1)
    strides.append(remaining)
    return tuple(strides)


@dataclass(frozen=True)
class RCConfig(ConfigBase):
    in_channels: int
    branch_channels: Union[int, Tuple[int, ...]]
    dilation_set: Tuple[int, ...]
    stride: int
    kernel: int
    out_channels: int
    pcm_enabled: bool = True
    pcm_strides: Optional[Tuple[int, int, int]] = None
    fusion: str = "pre"
    pcm_bn: bool = True
    pcm_extra_bn: bool = False
    pcm_activation: str = "silu"
    parallel_branch: str = "pcm"
    prm_activation: str = "gelu"
    heads: int = 1
    ffn_ratio: float = 2.0
    attention: str = "full"
    kernel_ratio: float = 0.5

    def __post_init__(self):
        if isinstance(self.dilation_set, list):
            object.__setattr__(self, "dilation_set", tuple(self.dilation_set))
        if isinstance(self.branch_channels, list):
            object.__setattr__(self, "branch_channels", tuple(self.branch_channels))
        if self.pcm_strides is None and _is_int(self.stride) and self.stride >= 1:
            object.__setattr__(self, "pcm_strides", _default_pcm_strides(self.stride))
        elif isinstance(self.pcm_strides, list):
            object.__setattr__(self, "pcm_strides", tuple(self.pcm_strides))

    def branch_widths(self):
        if isinstance(self.branch_channels, tuple):
            return self.branch_channels
        return (self.branch_channels,) * len(self.dilation_set)

    @property
    def embed_dim(self):
        """Width of the multi-scale tokens: the branch widths summed, |S| * D."""
        return sum(self.branch_widths())

    @property
    def pcm_hidden(self):
        return max(self.branch_widths())

    @property
    def head_dim(self):
        return self.out_channels // self.heads

    @property
    def hidden_dim(self):
        return max(1, int(round(self.out_channels * self.ffn_ratio)))

    def parallel_widths(self):
        """Branch widths of a parallel PRM: out_channels split as evenly as possible."""
        return split_channels(self.out_channels, len(self.dilation_set))

    def problems(self, path):
        found = []
        for name in ("in_channels", "stride", "kernel", "out_channels", "heads"):
            value = getattr(self, name)
            _check(found, _is_int(value) and value >= 1, "{}: must be a positive integer, got {!r}".format(_join(path, name), value))
        if found:
            return found
        dilations = self.dilation_set
        _check(found, isinstance(dilations, tuple) and len(dilations) >= 1 and all(_is_int(d) and d >= 1 for d in dilations),
               "{}: needs at least one positive dilation".format(_join(path, "dilation_set")))
        branches = self.branch_channels
        if _is_int(branches):
            _check(found, branches >= 1, "{}: must be a positive integer, got {}".format(_join(path, "branch_channels"), branches))
        elif not (isinstance(branches, tuple) and isinstance(dilations, tuple) and len(branches) == len(dilations)
                  and all(_is_int(b) and b >= 1 for b in branches)):
            found.append("{}: expected a positive integer or one per dilation, got {!r}".format(
                _join(path, "branch_channels"), branches))
        if found:
            return found
        _check(found, self.embed_dim == self.out_channels,
               "{}: multi-scale width {} (branch widths {}) must equal out_channels {}".format(
                   path, self.embed_dim, "+".join(str(b) for b in self.branch_widths()), self.out_channels))
        _check(found, self.kernel % 2 == 1, "{}: kernel must be odd, got {}".format(_join(path, "kernel"), self.kernel))
        strides = self.pcm_strides
        if isinstance(strides, tuple) and len(strides) == 3 and all(_is_int(s) and s >= 1 for s in strides):
            _check(found, math.prod(strides) == self.stride,
                   "{}: product {} must equal stride {}".format(_join(path, "pcm_strides"), math.prod(strides), self.stride))
        else:
            found.append("{}: must be three positive integers".format(_join(path, "pcm_strides")))
        _check(found, self.out_channels % self.heads == 0,
               "{}: out_channels {} not divisible by heads {}".format(path, self.out_channels, self.heads))
        _check(found, self.fusion in FUSIONS, "{}: expected one of {}".format(_join(path, "fusion"), FUSIONS))
        _check(found, self.pcm_activation in PCM_ACTIVATIONS,
               "{}: expected one of {}".format(_join(path, "pcm_activation"), PCM_ACTIVATIONS))
        _check(found, self.prm_activation in PRM_ACTIVATIONS,
               "{}: expected one of {}".format(_join(path, "prm_activation"), PRM_ACTIVATIONS))
        _check(found, self.parallel_branch in PARALLEL_BRANCHES,
               "{}: expected one of {}".format(_join(path, "parallel_branch"), PARALLEL_BRANCHES))
        _check(found, self.attention in ATTENTIONS, "{}: expected one of {}".format(_join(path, "attention"), ATTENTIONS))
        _check(found, _is_number(self.ffn_ratio) and self.ffn_ratio > 0, "{}: must be positive".format(_join(path, "ffn_ratio")))
        _check(found, _is_number(self.kernel_ratio) and self.kernel_ratio > 0,
               "{}: must be positive".format(_join(path, "kernel_ratio")))
        if self.parallel_branch == "prm" and isinstance(dilations, tuple):
            _check(found, self.out_channels >= len(dilations),
                   "{}: parallel PRM needs out_channels >= number of dilations".format(path))
        for name in ("pcm_enabled", "pcm_bn", "pcm_extra_bn"):
            _check(found, isinstance(getattr(self, name), bool), "{}: must be true or false".format(_join(path, name)))
        return found


@dataclass(frozen=True)
class NCConfig(ConfigBase):
    embed_dim: int
    heads: int
    ffn_ratio: float = 2.0
    pcm_groups: int = 1
    fusion: str = "pre"
    pcm_bn: bool = True
    pcm_extra_bn: bool = False
    pcm_activation: str = "silu"
    pcm_enabled: bool = True

    @property
    def hidden_dim(self):
        return max(1, int(round(self.embed_dim * self.ffn_ratio)))

    def problems(self, path):
        found = []
        for name in ("embed_dim", "heads", "pcm_groups"):
            value = getattr(self, name)
            _check(found, _is_int(value) and value >= 1, "{}: must be a positive integer, got {!r}".format(_join(path, name), value))
        if found:
            return found
        _check(found, self.embed_dim % self.heads == 0,
               "{}: embed_dim {} not divisible by heads {}".format(path, self.embed_dim, self.heads))
        _check(found, self.embed_dim % self.pcm_groups == 0,
               "{}: embed_dim {} not divisible by pcm_groups {}".format(path, self.embed_dim, self.pcm_groups))
        _check(found, self.fusion in FUSIONS, "{}: expected one of {}".format(_join(path, "fusion"), FUSIONS))
        _check(found, self.pcm_activation in PCM_ACTIVATIONS,
               "{}: expected one of {}".format(_join(path, "pcm_activation"), PCM_ACTIVATIONS))
        _check(found, _is_number(self.ffn_ratio) and self.ffn_ratio > 0, "{}: must be positive".format(_join(path, "ffn_ratio")))
        for name in ("pcm_enabled", "pcm_bn", "pcm_extra_bn"):
            _check(found, isinstance(getattr(self, name), bool), "{}: must be true or false".format(_join(path, name)))
        return found


@dataclass(frozen=True)
class ModelConfig(ConfigBase):
    input_size: Tuple[int, int, int]
    rcs: Tuple[RCConfig, ...]
    ncs: Tuple[NCConfig, ...]
    num_classes: int
    use_pos_embedding: bool = True
    pos_embedding_kind: str = "sinusoid"
    seed: int = 0

    _nested: ClassVar[dict] = {"rcs": (RCConfig, True), "ncs": (NCConfig, True)}

    @property
    def total_stride(self):
        return math.prod(rc.stride for rc in self.rcs)

    @property
    def embed_dim(self):
        return self.ncs[0].embed_dim if self.ncs else self.rcs[-1].out_channels

    def grid(self, height=None, width=None):
        height = self.input_size[0] if height is None else height
        width = self.input_size[1] if width is None else width
        return height // self.total_stride, width // self.total_stride

    def num_tokens(self, height=None, width=None):
        h, w = self.grid(height, width)
        return h * w + 1

    def check_input(self, height, width, channels=None):
        stride = self.total_stride
        if height % stride or width % stride:
            raise ConfigurationError("input {}x{} is not divisible by the total stride {}; use a multiple of {}".format(
                height, width, stride, stride))
        if channels is not None and channels != self.input_size[2]:
            raise ConfigurationError("input has {} channels, model expects {}".format(channels, self.input_size[2]))

    def validate(self):
        found = []
        size = self.input_size
        if not (isinstance(size, tuple) and len(size) == 3 and all(_is_int(v) and v >= 1 for v in size)):
            found.append("input_size: expected three positive integers (H, W, C), got {!r}".format(size))
        _check(found, len(self.rcs) >= 1, "rcs: at least one reduction cell is required")
        _check(found, len(self.ncs) >= 1, "ncs: at least one normal cell is required")
        _check(found, _is_int(self.num_classes) and self.num_classes >= 1, "num_classes: must be a positive integer")
        _check(found, self.pos_embedding_kind == "sinusoid", "pos_embedding_kind: only 'sinusoid' is supported")
        _check(found, isinstance(self.use_pos_embedding, bool), "use_pos_embedding: must be true or false")
        _check(found, _is_int(self.seed) and self.seed >= 0, "seed: must be a non-negative integer")
        for index, rc in enumerate(self.rcs):
            found.extend(rc.problems("rcs[{}]".format(index)))
        for index, nc in enumerate(self.ncs):
            found.extend(nc.problems("ncs[{}]".format(index)))
        if not found:
            channels = size[2]
            for index, rc in enumerate(self.rcs):
                _check(found, rc.in_channels == channels,
                       "rcs[{}].in_channels: {} does not match incoming {} channels".format(index, rc.in_channels, channels))
                channels = rc.out_channels
            for index, nc in enumerate(self.ncs):
                _check(found, nc.embed_dim == channels,
                       "ncs[{}].embed_dim: {} does not match last RC out_channels {}".format(index, nc.embed_dim, channels))
            _check(found, self.embed_dim % 2 == 0, "sinusoid position encoding needs an even embed dim, got {}".format(self.embed_dim))
            stride = self.total_stride
            _check(found, size[0] % stride == 0 and size[1] % stride == 0,
                   "input_size: {}x{} is not divisible by the total stride {}".format(size[0], size[1], stride))
        if found:
            raise ConfigurationError("invalid model config: " + "; ".join(found))
        return self


@dataclass(frozen=True)
class TrainConfig(ConfigBase):
    epochs: int = 20
    batch_size: int = 64
    base_lr: float = 5e-4
    warmup_epochs: Optional[int] = None
    weight_decay: float = 0.05
    min_lr: float = 1e-6
    data_fraction: float = 1.0
    seed: int = 0
    dtype: str = "float32"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    scale_lr: bool = True
    label_smoothing: float = 0.0
    hflip: bool = False
    eval_batch_size: int = 256

    def validate(self):
        found = []
        _check(found, _is_int(self.epochs) and self.epochs >= 1, "train.epochs: must be >= 1, got {!r}".format(self.epochs))
        _check(found, _is_int(self.batch_size) and self.batch_size >= 1, "train.batch_size: must be >= 1")
        _check(found, _is_int(self.eval_batch_size) and self.eval_batch_size >= 1, "train.eval_batch_size: must be >= 1")
        _check(found, _is_number(self.data_fraction) and 0 < self.data_fraction <= 1,
               "train.data_fraction: must be in (0, 1], got {!r}".format(self.data_fraction))
        _check(found, _is_number(self.base_lr) and self.base_lr > 0, "train.base_lr: must be positive")
        _check(found, _is_number(self.min_lr) and 0 <= self.min_lr, "train.min_lr: must be non-negative")
        _check(found, _is_number(self.weight_decay) and self.weight_decay >= 0, "train.weight_decay: must be non-negative")
        _check(found, self.warmup_epochs is None or (_is_int(self.warmup_epochs) and 0 <= self.warmup_epochs < self.epochs),
               "train.warmup_epochs: must be in [0, epochs)")
        _check(found, self.dtype in DTYPE_NAMES, "train.dtype: expected one of {}".format(DTYPE_NAMES))
        _check(found, _is_number(self.beta1) and 0 <= self.beta1 < 1, "train.beta1: must be in [0, 1)")
        _check(found, _is_number(self.beta2) and 0 <= self.beta2 < 1, "train.beta2: must be in [0, 1)")
        _check(found, _is_number(self.adam_eps) and self.adam_eps > 0, "train.adam_eps: must be positive")
        _check(found, _is_number(self.label_smoothing) and 0 <= self.label_smoothing < 1,
               "train.label_smoothing: must be in [0, 1)")
        _check(found, _is_int(self.seed) and self.seed >= 0, "train.seed: must be a non-negative integer")
        if found:
            raise ConfigurationError("invalid train config: " + "; ".join(found))
        return self


@dataclass(frozen=True)
class SyntheticSpec(ConfigBase):
    canvas: int = 64
    num_classes: int = 3
    scale_range: Tuple[float, float] = (0.3, 0.9)
    samples_per_class: int = 500
    noise_std: float = 0.05
    seed: int = 0

    def validate(self):
        found = []
        _check(found, _is_int(self.canvas) and self.canvas >= 1, "canvas: must be a positive integer")
        _check(found, _is_int(self.num_classes) and 1 <= self.num_classes <= 3, "num_classes: must be 1, 2 or 3")
        _check(found, _is_int(self.samples_per_class) and self.samples_per_class >= 1, "samples_per_class: must be >= 1")
        _check(found, _is_number(self.noise_std) and self.noise_std >= 0, "noise_std: must be non-negative")
        scale = self.scale_range
        if isinstance(scale, tuple) and len(scale) == 2 and all(_is_number(v) for v in scale):
            _check(found, 0 < scale[0] < scale[1] <= 1,
                   "scale_range: need 0 < min < max <= 1, got {}".format(list(scale)))
        else:
            found.append("scale_range: expected [min_frac, max_frac]")
        if found:
            raise ConfigurationError("invalid synthetic spec: " + "; ".join(found))
        return self


@dataclass(frozen=True)
class IdxSource(ConfigBase):
    train_images: str
    train_labels: str
    val_images: Optional[str] = None
    val_labels: Optional[str] = None


@dataclass(frozen=True)
class DataConfig(ConfigBase):
    idx: Optional[IdxSource] = None
    synthetic: Optional[SyntheticSpec] = None
    val_samples_per_class: int = 100

    _nested: ClassVar[dict] = {"idx": (IdxSource, False), "synthetic": (SyntheticSpec, False)}

    def validate(self):
        if (self.idx is None) == (self.synthetic is None):
            raise ConfigurationError("data: exactly one of 'idx' and 'synthetic' must be given")
        if self.synthetic is not None:
            self.synthetic.validate()
        if not (_is_int(self.val_samples_per_class) and self.val_samples_per_class >= 0):
            raise ConfigurationError("data.val_samples_per_class: must be a non-negative integer")
        return self


# presets

def _vitae_rcs(final_branch, final_out):
    return (
        RCConfig(in_channels=3, branch_channels=16, dilation_set=(1, 2, 3, 4), stride=4, kernel=7,
                 out_channels=64, pcm_strides=(2, 2, 1), attention="performer"),
        RCConfig(in_channels=64, branch_channels=(22, 21, 21), dilation_set=(1, 2, 3), stride=2, kernel=3,
                 out_channels=64, pcm_strides=(2, 1, 1)),
        RCConfig(in_channels=64, branch_channels=final_branch, dilation_set=(1, 2), stride=2, kernel=3,
                 out_channels=final_out, pcm_strides=(2, 1, 1)),
    )


def vitae_t():
    return ModelConfig(input_size=(224, 224, 3), rcs=_vitae_rcs(128, 256),
                       ncs=(NCConfig(embed_dim=256, heads=4, pcm_groups=64),) * 7, num_classes=1000)


def vitae_s():
    return ModelConfig(input_size=(224, 224, 3), rcs=_vitae_rcs(192, 384),
                       ncs=(NCConfig(embed_dim=384, heads=6, pcm_groups=64),) * 14, num_classes=1000)


def vitae_micro():
    return ModelConfig(
        input_size=(16, 16, 1),
        rcs=(RCConfig(in_channels=1, branch_channels=4, dilation_set=(1, 2), stride=4, kernel=7,
                      out_channels=8, pcm_strides=(2, 2, 1)),),
        ncs=(NCConfig(embed_dim=8, heads=2, pcm_groups=2),),
        num_classes=3)


def vitae_micro_64():
    return ModelConfig(
        input_size=(64, 64, 1),
        rcs=(RCConfig(in_channels=1, branch_channels=4, dilation_set=(1, 2), stride=4, kernel=7,
                      out_channels=8, pcm_strides=(2, 2, 1)),
             RCConfig(in_channels=8, branch_channels=4, dilation_set=(1, 2), stride=2, kernel=3,
                      out_channels=8, pcm_strides=(2, 1, 1)),
             RCConfig(in_channels=8, branch_channels=8, dilation_set=(1, 2), stride=2, kernel=3,
                      out_channels=16, pcm_strides=(2, 1, 1))),
        ncs=(NCConfig(embed_dim=16, heads=2, pcm_groups=4),) * 2,
        num_classes=3)


PRESETS = {
    "vitae-t": vitae_t,
    "vitae-s": vitae_s,
    "vitae-micro": vitae_micro,
    "vitae-micro-64": vitae_micro_64,
}


def preset(name):
    try:
        return PRESETS[name]().validate()
    except KeyError:
        raise ConfigurationError("unknown preset {!r}, expected one of {}".format(name, sorted(PRESETS)))


def deep_merge(base, override):
    """
    Overrides win field-wise: dicts merge recursively, equal-length lists
    of dicts merge element-wise, anything else is replaced.
    """
    if isinstance(base, dict) and isinstance(override, dict):
        merged = copy.deepcopy(base)
        for key, value in override.items():
            merged[key] = deep_merge(base[key], value) if key in base else copy.deepcopy(value)
        return merged
    if (isinstance(base, list) and isinstance(override, list) and len(base) == len(override)
            and all(isinstance(v, dict) for v in base + override)):
        return [deep_merge(b, o) for b, o in zip(base, override)]
    return copy.deepcopy(override)


def model_config_from(source, path="model"):
    """A preset name, a full model object, or {"preset": name, ...overrides}."""
    if isinstance(source, ModelConfig):
        return source.validate()
    if isinstance(source, str):
        return preset(source)
    if not isinstance(source, dict):
        raise ConfigurationError("{}: expected a preset name or an object".format(path))
    data = dict(source)
    name = data.pop("preset", None)
    if name is not None:
        if not isinstance(name, str):
            raise ConfigurationError("{}.preset: expected a preset name".format(path))
        data = deep_merge(preset(name).to_dict(), data)
    return ModelConfig.from_dict(data, path).validate()


@dataclass(frozen=True)
class CliConfig(ConfigBase):
    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=lambda: DataConfig(synthetic=SyntheticSpec()))
    output_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, data, path=""):
        if not isinstance(data, dict):
            raise ConfigurationError("{}: expected an object".format(path or "config"))
        known = {f.name for f in fields(cls)}
        for name in data:
            if name not in known:
                raise ConfigurationError("{}: unknown field".format(_join(path, name)))
        if "model" not in data:
            raise ConfigurationError("{}: missing field".format(_join(path, "model")))
        config = cls(
            model=model_config_from(data["model"], _join(path, "model")),
            train=TrainConfig.from_dict(data.get("train", {}), _join(path, "train")),
            data=DataConfig.from_dict(data.get("data", {"synthetic": {}}), _join(path, "data")),
            output_dir=data.get("output_dir", "runs/default"))
        return config.validate()

    def validate(self):
        self.model.validate()
        self.train.validate()
        self.data.validate()
        if not isinstance(self.output_dir, str) or not self.output_dir:
            raise ConfigurationError("output_dir: must be a non-empty path")
        return self

    def with_overrides(self, **train_fields):
        """Replace train fields given on the command line; None means keep."""
        changes = {k: v for k, v in train_fields.items() if v is not None}
        return replace(self, train=replace(self.train, **changes)).validate() if changes else self


def read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)
    except OSError as ex:
        raise ConfigurationError("cannot read {}: {}".format(path, ex.strerror))
    except json.JSONDecodeError as ex:
        raise ConfigurationError("{}: invalid JSON at line {} column {}: {}".format(path, ex.lineno, ex.colno, ex.msg))


def load_cli_config(path):
    config = CliConfig.from_dict(read_json(path))
    logger.info("loaded config %s (%d RCs, %d NCs)", path, len(config.model.rcs), len(config.model.ncs))
    return config
