"""
Ablation matrices: a base run plus named variants that flip architecture
axes. Every variant trains under the same recipe; results land in one CSV.

Matrix JSON:
    {"base": {<CliConfig>}, "variants": [{"id": "...", "axes": {...}}, ...]}
"""

import json
import logging
import os
from dataclasses import dataclass, replace

import pandas as pd

from vitae.config import CliConfig, read_json, split_channels
from vitae.data import load_data
from vitae.errors import ConfigurationError, ExportError
from vitae.train import Trainer


logger = logging.getLogger(__name__)

ABLATION_FILE = "ablation.csv"
ABLATION_COLUMNS = ["variant", "flags", "params", "final_train_loss", "final_val_loss", "val_top1"]

RC_AXES = {"rc_pcm": "pcm_enabled", "rc_fusion": "fusion", "prm_activation": "prm_activation",
           "parallel_branch": "parallel_branch"}
NC_AXES = {"nc_pcm": "pcm_enabled", "nc_fusion": "fusion"}
SHARED_AXES = ("pcm_bn", "pcm_extra_bn", "pcm_activation")
AXES = frozenset(["dilations", "use_pos_embedding"]) | set(RC_AXES) | set(NC_AXES) | set(SHARED_AXES)

# the "[1,2,3,4] down" schedule: each reduction cell drops its largest dilation
DECREASING = ((1, 2, 3, 4), (1, 2, 3), (1, 2))


@dataclass(frozen=True)
class Variant:
    id: str
    axes: dict

    def flags(self):
        return json.dumps(self.axes, sort_keys=True, separators=(",", ":"))


def _dilation_schedule(value, count, where):
    if value == "down":
        if count > len(DECREASING):
            raise ConfigurationError("{}: 'down' covers at most {} reduction cells".format(where, len(DECREASING)))
        return DECREASING[:count]
    if (isinstance(value, list) and len(value) == count
            and all(isinstance(s, list) and s and all(isinstance(d, int) and d >= 1 for d in s) for s in value)):
        return tuple(tuple(s) for s in value)
    if isinstance(value, list) and value and all(isinstance(d, int) and d >= 1 for d in value):
        return (tuple(value),) * count
    raise ConfigurationError("{}: expected 'down', one dilation list, or one list per reduction cell".format(where))


def apply_axes(cfg, axes, where="axes"):
    """Model config with every axis of `axes` applied; validated."""
    rcs = list(cfg.rcs)
    ncs = list(cfg.ncs)
    model_changes = {}
    for key, value in axes.items():
        path = "{}.{}".format(where, key)
        if key not in AXES:
            raise ConfigurationError("{}: unknown ablation axis, expected one of {}".format(path, sorted(AXES)))
        if key == "dilations":
            schedule = _dilation_schedule(value, len(rcs), path)
            # the cell keeps its width; out_channels is re-split over the new branches
            rcs = [replace(rc, dilation_set=dilations, branch_channels=split_channels(rc.out_channels, len(dilations)))
                   for rc, dilations in zip(rcs, schedule)]
        elif key == "use_pos_embedding":
            model_changes[key] = value
        elif key in RC_AXES:
            rcs = [replace(rc, **{RC_AXES[key]: value}) for rc in rcs]
        elif key in NC_AXES:
            ncs = [replace(nc, **{NC_AXES[key]: value}) for nc in ncs]
        else:
            rcs = [replace(rc, **{key: value}) for rc in rcs]
            ncs = [replace(nc, **{key: value}) for nc in ncs]
    try:
        return replace(cfg, rcs=tuple(rcs), ncs=tuple(ncs), **model_changes).validate()
    except ConfigurationError as ex:
        raise ConfigurationError("{}: {}".format(where, ex))


def parse_matrix(data, source="matrix"):
    if not isinstance(data, dict) or set(data) - {"base", "variants"}:
        raise ConfigurationError("{}: expected an object with 'base' and 'variants'".format(source))
    base = CliConfig.from_dict(data.get("base", {}), "base")
    raw_variants = data.get("variants")
    if not isinstance(raw_variants, list) or not raw_variants:
        raise ConfigurationError("{}: 'variants' must be a non-empty list".format(source))
    variants = []
    seen = set()
    for index, entry in enumerate(raw_variants):
        where = "variants[{}]".format(index)
        if not isinstance(entry, dict) or set(entry) - {"id", "axes"} or not isinstance(entry.get("id"), str):
            raise ConfigurationError("{}: expected {{\"id\": str, \"axes\": {{...}}}}".format(where))
        if entry["id"] in seen:
            raise ConfigurationError("{}.id: duplicate variant id {!r}".format(where, entry["id"]))
        seen.add(entry["id"])
        axes = entry.get("axes", {})
        if not isinstance(axes, dict):
            raise ConfigurationError("{}.axes: expected an object".format(where))
        # build now so every variant is known to be legal before any training starts
        apply_axes(base.model, axes, where + ".axes")
        variants.append(Variant(entry["id"], axes))
    return base, variants


def load_matrix(path):
    return parse_matrix(read_json(path), path)


def run_ablation(base, variants, output_dir, epochs=None):
    """Train every variant with the base recipe; returns the consolidated frame."""
    train_cfg = base.train if epochs is None else replace(base.train, epochs=epochs).validate()
    train_set, val_set = load_data(base.data)
    os.makedirs(output_dir, exist_ok=True)
    records = []
    for variant in variants:
        model_cfg = apply_axes(base.model, variant.axes)
        logger.info("ablation variant %s: %s", variant.id, variant.flags())
        trainer = Trainer(model_cfg, train_cfg, train_set, val_set, os.path.join(output_dir, variant.id))
        metrics = trainer.fit()
        last = metrics[-1]
        records.append({
            "variant": variant.id,
            "flags": variant.flags(),
            "params": trainer.model.params.num_elements(),
            "final_train_loss": last.train_loss,
            "final_val_loss": last.val_loss,
            "val_top1": last.val_top1,
        })
        path = os.path.join(output_dir, ABLATION_FILE)
        try:
            pd.DataFrame(records, columns=ABLATION_COLUMNS).to_csv(path, index=False)
        except OSError as ex:
            raise ExportError("cannot write {}: {}".format(path, ex.strerror))
    return pd.DataFrame(records, columns=ABLATION_COLUMNS)
