"""Central finite differences against the tape's analytic gradients."""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from vitae.errors import UsageError
from vitae.model import ViTAE, model_forward
from vitae.tensor import Tensor, backward, no_grad


logger = logging.getLogger(__name__)

EPS_RANGE = (1e-7, 1e-3)


@dataclass
class GradcheckReport:
    eps: float
    errors: dict = field(default_factory=OrderedDict)
    nonfinite: list = field(default_factory=list)

    def worst(self):
        return max(self.errors.values(), default=0.0)

    def by_module(self):
        """Worst error per top-level cell (rc1, nc3, head, cls_token)."""
        grouped = OrderedDict()
        for name, error in self.errors.items():
            module = name.split(".", 1)[0]
            grouped[module] = max(grouped.get(module, 0.0), error)
        return grouped

    def offenders(self, threshold):
        # NaN compares false, so it lands here too
        return [name for name, error in self.errors.items() if not error < threshold]

    def passed(self, threshold):
        return not self.offenders(threshold)


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / scale


def _items(params):
    return list(params.items())


def _evaluate(f, params):
    with no_grad():
        return float(np.asarray(f(params).data).reshape(-1)[0])


def finite_diff_check(f, params, eps=1e-4, max_entries=None, seed=0):
    """
    Compare backward() of the scalar f(params) with central differences,
    entry by entry. With max_entries set, each tensor is sampled at that
    many positions chosen by `seed`. Parameters must be float64.
    """
    if not EPS_RANGE[0] <= eps <= EPS_RANGE[1]:
        raise UsageError("eps {} outside [{}, {}]".format(eps, *EPS_RANGE))
    tensors = _items(params)
    for name, tensor in tensors:
        if tensor.dtype != np.float64:
            raise UsageError("gradient checks run in float64; {} is {}".format(name, tensor.dtype.name))
        tensor.zero_grad()
    loss = f(params)
    backward(loss)
    rng = np.random.default_rng(seed)
    report = GradcheckReport(eps=eps)
    for name, tensor in tensors:
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        analytic = analytic.reshape(-1)
        flat = tensor.data.reshape(-1)
        if not np.shares_memory(flat, tensor.data):
            raise UsageError("{} is not contiguous; cannot perturb in place".format(name))
        if max_entries is None or max_entries >= flat.size:
            positions = range(flat.size)
        else:
            positions = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for index in positions:
            original = flat[index]
            flat[index] = original + eps
            plus = _evaluate(f, params)
            flat[index] = original - eps
            minus = _evaluate(f, params)
            flat[index] = original
            if not (math.isfinite(plus) and math.isfinite(minus)):
                report.nonfinite.append(name)
                worst = math.inf
                break
            numeric = (plus - minus) / (2.0 * eps)
            worst = max(worst, float(relative_error(analytic[index], numeric)))
        report.errors[name] = worst
        logger.debug("%s: worst relative error %.3e", name, worst)
    return report


def check_model(cfg, eps=1e-4, seed=0, batch=2, max_entries=None, scale=0.3):
    """
    Gradient check of every parameter of a model config in float64, BN in
    eval mode. Parameters are moved to a random point away from the zero
    biases and unit norms of a fresh init; the objective is sum(logits * R)
    for random images and weights R.
    """
    model = ViTAE(cfg, dtype="float64")
    rng = np.random.default_rng(seed)
    for _, tensor in model.params.items():
        tensor.data += rng.normal(0.0, scale, tensor.shape)
    h, w, c = cfg.input_size
    x = Tensor(rng.standard_normal((batch, c, h, w)), dtype="float64")
    weights = Tensor(rng.standard_normal((batch, cfg.num_classes)), dtype="float64")

    def objective(params):
        return (model_forward(x, cfg, params, training=False) * weights).sum()
    return finite_diff_check(objective, model.params, eps, max_entries, seed)
