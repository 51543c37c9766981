"""
Measurements over a model: parameter and MAC counts, attention distance per
layer, Grad-CAM on the last normal cell's attention output, and the CSV/PGM
writers for them.
"""

import logging
import math
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from vitae.errors import ConfigurationError, ExportError, FormatError
from vitae.model import Trace, model_forward, num_features, plan_model
from vitae.tensor import Tensor, backward, constant, no_grad


logger = logging.getLogger(__name__)


# cost accounting

@dataclass
class CostRow:
    name: str
    params: int = 0
    macs: int = 0


@dataclass
class CostReport:
    rows: list = field(default_factory=list)
    input_size: tuple = None

    @property
    def total_params(self):
        return sum(row.params for row in self.rows)

    @property
    def total_macs(self):
        return sum(row.macs for row in self.rows)

    def to_frame(self):
        return pd.DataFrame([asdict(row) for row in self.rows], columns=["name", "params", "macs"])

    def format_table(self):
        lines = [self.to_frame().to_string(index=False)]
        lines.append("total params {:,} ({:.2f} M)".format(self.total_params, self.total_params / 1e6))
        if self.input_size is not None:
            lines.append("total MACs {:,} ({:.2f} G) at {}x{}".format(
                self.total_macs, self.total_macs / 1e9, self.input_size[0], self.input_size[1]))
        return "\n".join(lines)


def module_of(name):
    return name.rsplit(".", 1)[0] if "." in name else name


def count_params(params):
    """Exact element counts of learnable tensors, grouped by module path."""
    grouped = OrderedDict()
    for name, tensor in params.items():
        module = module_of(name)
        grouped[module] = grouped.get(module, 0) + tensor.size
    return CostReport([CostRow(name, count, 0) for name, count in grouped.items()])


def conv_macs(out_h, out_w, out_channels, in_channels, groups, kernel):
    return out_h * out_w * out_channels * (in_channels // groups) * kernel * kernel


def _attention_macs(tokens, width, heads, kind, features):
    if kind == "performer":
        head_dim = width // heads
        return heads * (4 * tokens * head_dim * features + tokens * features)
    return 2 * tokens * tokens * width


def _pcm_macs(in_channels, hidden, out_channels, h, w, strides, groups):
    macs = 0
    widths = (in_channels, hidden, hidden, out_channels)
    for index, stride in enumerate(strides):
        h, w = -(-h // stride), -(-w // stride)
        macs += conv_macs(h, w, widths[index + 1], widths[index], groups, 3)
    return macs


def _rc_rows(cell):
    rc = cell.config
    channels, h, w = cell.input_shape
    out, gh, gw = cell.output_shape
    tokens = gh * gw
    rows = [
        CostRow(cell.name + ".prm", 0, sum(conv_macs(gh, gw, width, channels, 1, rc.kernel) for width in rc.branch_widths())),
        CostRow(cell.name + ".mhsa", 0, tokens * 4 * out * out),
        CostRow(cell.name + ".attention", 0,
                _attention_macs(tokens, out, rc.heads, rc.attention, num_features(rc) if rc.attention == "performer" else 0)),
    ]
    if rc.pcm_enabled:
        if rc.parallel_branch == "pcm":
            macs = _pcm_macs(channels, rc.pcm_hidden, out, h, w, rc.pcm_strides, 1)
            rows.append(CostRow(cell.name + ".pcm", 0, macs))
        else:
            macs = sum(conv_macs(gh, gw, width, channels, 1, rc.kernel) for width in rc.parallel_widths())
            rows.append(CostRow(cell.name + ".prm2", 0, macs))
    rows.append(CostRow(cell.name + ".ffn", 0, tokens * 2 * out * rc.hidden_dim))
    return rows


def _nc_rows(cell, grid):
    nc = cell.config
    tokens, width = cell.input_shape
    rows = [
        CostRow(cell.name + ".mhsa", 0, tokens * 4 * width * width),
        CostRow(cell.name + ".attention", 0, _attention_macs(tokens, width, nc.heads, "full", 0)),
    ]
    if nc.pcm_enabled:
        rows.append(CostRow(cell.name + ".pcm", 0,
                            _pcm_macs(width, width, width, grid[0], grid[1], (1, 1, 1), nc.pcm_groups)))
    rows.append(CostRow(cell.name + ".ffn", 0, tokens * 2 * width * nc.hidden_dim))
    return rows


def count_macs(cfg, input_size=None):
    """
    Per-sample multiply-accumulates: convs, token-wise linears, and the
    score and value products of attention. Norms and activations excluded.
    """
    plan = plan_model(cfg, input_size)
    rows = []
    for cell in plan.cells:
        rows.extend(_rc_rows(cell) if cell.kind == "rc" else _nc_rows(cell, plan.grid))
    rows.append(CostRow("head", 0, cfg.embed_dim * cfg.num_classes))
    return CostReport(rows, plan.input_size[:2])


# attention distance

@dataclass
class AttnDistanceRow:
    layer: str
    grid: tuple
    mean_distance: float
    head_distances: tuple


@dataclass
class AttnDistanceReport:
    rows: list = field(default_factory=list)
    matrices: dict = field(default_factory=OrderedDict)

    def to_frame(self):
        records = [{
            "layer": row.layer,
            "grid": "{}x{}".format(*row.grid),
            "mean_distance": row.mean_distance,
            "head_distances": ";".join("{:.6f}".format(d) for d in row.head_distances),
        } for row in self.rows]
        return pd.DataFrame(records, columns=["layer", "grid", "mean_distance", "head_distances"])


def grid_distances(h, w):
    """Euclidean distance between every pair of row-major grid positions."""
    rows, cols = np.divmod(np.arange(h * w), w)
    positions = np.stack([rows, cols], axis=1).astype(np.float64)
    delta = positions[:, None, :] - positions[None, :, :]
    return np.sqrt((delta * delta).sum(axis=-1))


def mean_attention_distance(weights, grid, cls_tokens=0):
    """
    Attention-weighted distance per query, averaged over queries, for
    weights (..., L, L). The first cls_tokens rows and columns are dropped
    and the remaining weights are used as they are.
    """
    h, w = grid
    spatial = np.asarray(weights, dtype=np.float64)[..., cls_tokens:, cls_tokens:]
    if spatial.shape[-1] != h * w or spatial.shape[-2] != h * w:
        raise ConfigurationError("attention over {} tokens does not match a {}x{} grid".format(spatial.shape[-1], h, w))
    return (spatial * grid_distances(h, w)).sum(axis=-1).mean(axis=-1)


def attention_distance(model, images):
    """Mean attention distance of every attention layer, per head, over `images`."""
    x = images if isinstance(images, Tensor) else Tensor(images, dtype=model.dtype)
    if x.shape[0] < 1:
        raise ConfigurationError("attention distance needs at least one image")
    trace = Trace()
    with no_grad():
        model(x, training=False, trace=trace)
    report = AttnDistanceReport()
    for name, weights in trace.attention.items():
        grid, cls_tokens = trace.grids[name]
        per_head = mean_attention_distance(weights, grid, cls_tokens).mean(axis=0)
        layer = name.rsplit(".", 1)[0]
        report.rows.append(AttnDistanceRow(layer, grid, float(per_head.mean()), tuple(float(d) for d in per_head)))
        report.matrices[layer] = weights.mean(axis=(0, 1))
        logger.debug("%s: mean attention distance %.4f", layer, per_head.mean())
    return report


# Grad-CAM

@dataclass
class CamGrid:
    values: np.ndarray
    image_id: int = 0
    target_class: int = 0


def cam_from_gradients(activations, gradients, image_id=0, target_class=0):
    """relu(sum_c mean_hw(G[..., c]) * A[..., c]) scaled so its max is 1."""
    weights = gradients.mean(axis=(0, 1))
    cam = np.maximum((activations * weights).sum(axis=-1), 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return CamGrid(cam, image_id, target_class)


def last_attention_name(cfg):
    return "nc{}.mhsa".format(len(cfg.ncs))


def grad_cam(model, image, target_class, image_id=0):
    """
    Grad-CAM on the spatial tokens of the last NC's attention output.
    Runs on a private graph: model parameters are detached and left untouched.
    """
    cfg = model.cfg
    if not 0 <= target_class < cfg.num_classes:
        raise ConfigurationError("target class {} outside [0, {})".format(target_class, cfg.num_classes))
    image = np.asarray(image)
    batch = image[None] if image.ndim == 3 else image[:1]
    x = Tensor(batch, requires_grad=True, dtype=model.dtype)
    trace = Trace()
    logits = model_forward(x, cfg, model.params.detached(), training=False, trace=trace)
    selector = np.zeros(logits.shape)
    selector[0, target_class] = 1.0
    backward((logits * constant(selector, logits)).sum())
    attended = trace.outputs[last_attention_name(cfg)]
    h, w = model.plan.grid
    activations = attended.data[0, 1:].reshape(h, w, -1).astype(np.float64)
    gradients = np.zeros_like(activations) if attended.grad is None else attended.grad[0, 1:].reshape(h, w, -1)
    return cam_from_gradients(activations, gradients.astype(np.float64), image_id, target_class)


# writers

def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(parent, exist_ok=True)
    except OSError as ex:
        raise ExportError("cannot create {}: {}".format(parent, ex.strerror))


def export_pgm(grid, path):
    """ASCII P2 with maxval 255, pixels floor(255 v + 0.5)."""
    values = np.asarray(grid.values if isinstance(grid, CamGrid) else grid, dtype=np.float64)
    h, w = values.shape
    pixels = np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(int)
    lines = ["P2", "# image {} class {}".format(getattr(grid, "image_id", 0), getattr(grid, "target_class", 0)),
             "{} {}".format(w, h), "255"]
    lines.extend(" ".join(str(p) for p in row) for row in pixels)
    _ensure_parent(path)
    try:
        with open(path, "w", encoding="ascii") as handle:
            handle.write("\n".join(lines) + "\n")
    except OSError as ex:
        raise ExportError("cannot write {}: {}".format(path, ex.strerror))
    return path


def read_pgm(path):
    """Parse an ASCII P2 file back to values in [0, 1]."""
    try:
        with open(path, "r", encoding="ascii") as handle:
            text = handle.read()
    except OSError as ex:
        raise FormatError("cannot read {}: {}".format(path, ex.strerror))
    tokens = []
    for line in text.splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if not tokens or tokens[0] != "P2":
        raise FormatError("{}: not an ASCII PGM (P2) file".format(path))
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        pixels = np.array([int(t) for t in tokens[4:]], dtype=np.float64)
    except (IndexError, ValueError):
        raise FormatError("{}: malformed PGM header or pixels".format(path))
    if pixels.size != w * h or maxval < 1:
        raise FormatError("{}: expected {} pixels, found {}".format(path, w * h, pixels.size))
    return pixels.reshape(h, w) / maxval


def export_csv(report, path):
    frame = report.to_frame() if hasattr(report, "to_frame") else pd.DataFrame(report)
    _ensure_parent(path)
    try:
        frame.to_csv(path, index=False)
    except OSError as ex:
        raise ExportError("cannot write {}: {}".format(path, ex.strerror))
    logger.info("wrote %d rows to %s", len(frame), path)
    return path


def export_attention_matrices(report, directory):
    """One head- and batch-averaged attention matrix per layer, as attn_<layer>.csv."""
    paths = []
    for layer, matrix in report.matrices.items():
        path = os.path.join(directory, "attn_{}.csv".format(layer))
        _ensure_parent(path)
        try:
            pd.DataFrame(matrix).to_csv(path, index=False, header=False)
        except OSError as ex:
            raise ExportError("cannot write {}: {}".format(path, ex.strerror))
        paths.append(path)
    return paths
