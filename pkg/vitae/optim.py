"""AdamW with decoupled weight decay, and the warmup + cosine schedule."""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from vitae.errors import UsageError


logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    first: dict = field(default_factory=OrderedDict)
    second: dict = field(default_factory=OrderedDict)

    def hyperparams(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step}


def adamw_step(params, state, lr=None, grads=None):
    """
    One AdamW update in place. grads defaults to each parameter's .grad.
    Parameters the store marks as non-decaying (norms, biases, class
    token) skip the decay term.
    """
    lr = state.lr if lr is None else lr
    items = list(params.items())
    resolved = []
    for name, param in items:
        grad = grads[name] if grads is not None and name in grads else param.grad
        if grad is None:
            raise UsageError("no gradient for parameter {}".format(name))
        if grad.shape != param.shape:
            raise UsageError("gradient of {} has shape {}, parameter has {}".format(name, grad.shape, param.shape))
        resolved.append((name, param, grad))
    decays = getattr(params, "decays", lambda name: True)
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, param, grad in resolved:
        first = state.first.get(name)
        if first is None:
            first = state.first[name] = np.zeros_like(param.data)
            state.second[name] = np.zeros_like(param.data)
        second = state.second[name]
        if first.shape != param.shape:
            raise UsageError("moment of {} has shape {}, parameter has {}".format(name, first.shape, param.shape))
        if state.weight_decay and decays(name):
            param.data -= lr * state.weight_decay * param.data
        first *= state.beta1
        first += (1.0 - state.beta1) * grad
        second *= state.beta2
        second += (1.0 - state.beta2) * grad * grad
        param.data -= lr * (first / correction1) / (np.sqrt(second / correction2) + state.eps)


def cosine_lr(step, total_steps, base_lr, min_lr, warmup_steps):
    """Linear warmup from 0 to base_lr, then cosine decay to min_lr at total_steps."""
    if not 0 <= step <= total_steps:
        raise UsageError("step {} outside [0, {}]".format(step, total_steps))
    if not 0 <= warmup_steps < total_steps:
        raise UsageError("warmup_steps {} must be in [0, {})".format(warmup_steps, total_steps))
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return min_lr + (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress)) / 2.0
