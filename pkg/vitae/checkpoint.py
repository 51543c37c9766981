"""
Binary checkpoints.

Layout: b"VTAE", u32 version, u32 header length, UTF-8 JSON header (sorted
keys), little-endian tensor payloads in directory order, u32 CRC32 of the
payload bytes. All integers little-endian.
"""

import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from vitae.config import ModelConfig, TrainConfig
from vitae.errors import ConfigurationError, ExportError, FormatError
from vitae.model import ParamStore, build_model
from vitae.optim import OptimizerState


logger = logging.getLogger(__name__)

MAGIC = b"VTAE"
VERSION = 1
DTYPE_CODES = {"float32": "f4", "float64": "f8"}
CODE_DTYPES = {code: name for name, code in DTYPE_CODES.items()}
SECTIONS = ("param", "buffer", "adam_m", "adam_v")


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: ParamStore
    epoch: int = 0
    optimizer: Optional[OptimizerState] = None
    rng_state: Optional[dict] = None
    train_config: Optional[TrainConfig] = None
    normalization: Optional[dict] = None


def _entries(ckpt):
    for name, tensor in ckpt.params.items():
        yield "param", name, tensor.data
    for name, value in ckpt.params.buffers():
        yield "buffer", name, value
    if ckpt.optimizer is not None:
        for name, value in ckpt.optimizer.first.items():
            yield "adam_m", name, value
        for name, value in ckpt.optimizer.second.items():
            yield "adam_v", name, value


def encode_checkpoint(ckpt):
    directory = []
    payload = bytearray()
    for section, name, array in _entries(ckpt):
        code = DTYPE_CODES[array.dtype.name]
        directory.append({"section": section, "name": name, "dtype": code, "shape": list(array.shape)})
        payload += np.ascontiguousarray(array, dtype="<" + code).tobytes()
    optimizer = None
    if ckpt.optimizer is not None:
        optimizer = ckpt.optimizer.hyperparams()
    header = {
        "config": ckpt.model_config.to_dict(),
        "epoch": ckpt.epoch,
        "normalization": ckpt.normalization,
        "optimizer": optimizer,
        "rng_state": ckpt.rng_state,
        "tensors": directory,
        "train_config": None if ckpt.train_config is None else ckpt.train_config.to_dict(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    crc = zlib.crc32(bytes(payload)) & 0xFFFFFFFF
    return b"".join([MAGIC, struct.pack("<II", VERSION, len(head)), head, bytes(payload), struct.pack("<I", crc)])


def _nbytes(entry):
    count = 1
    for dim in entry["shape"]:
        count *= dim
    return count * np.dtype(entry["dtype"]).itemsize


def decode_checkpoint(raw, source="<bytes>", model_cfg=None):
    """
    Parse checkpoint bytes. With `model_cfg` the tensors must fit that
    config; otherwise the embedded config is used.
    """
    if len(raw) < 12:
        raise FormatError("{}: truncated checkpoint ({} bytes)".format(source, len(raw)))
    if raw[:4] != MAGIC:
        raise FormatError("{}: not a checkpoint (magic {!r})".format(source, bytes(raw[:4])))
    version, head_len = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise FormatError("{}: unsupported checkpoint version {}, expected {}".format(source, version, VERSION))
    if len(raw) < 12 + head_len + 4:
        raise FormatError("{}: truncated header".format(source))
    try:
        header = json.loads(raw[12:12 + head_len].decode("utf-8"))
        directory = header["tensors"]
        size = sum(_nbytes(entry) for entry in directory)
    except (ValueError, KeyError, TypeError) as ex:
        raise FormatError("{}: corrupt header: {}".format(source, ex))
    start = 12 + head_len
    if len(raw) != start + size + 4:
        raise FormatError("{}: truncated or padded payload ({} bytes, expected {})".format(
            source, len(raw) - start - 4, size))
    payload = raw[start:start + size]
    (crc,) = struct.unpack("<I", raw[start + size:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise FormatError("{}: checksum mismatch, payload is corrupt".format(source))

    try:
        embedded = ModelConfig.from_dict(header["config"], "config").validate()
        train_cfg = header.get("train_config")
        train_cfg = None if train_cfg is None else TrainConfig.from_dict(train_cfg, "train_config")
    except ConfigurationError as ex:
        raise FormatError("{}: embedded config is invalid: {}".format(source, ex))
    cfg = embedded if model_cfg is None else model_cfg
    params_dtype = next((CODE_DTYPES.get(e["dtype"]) for e in directory if e["section"] == "param"), "float32")
    if params_dtype is None:
        raise FormatError("{}: unknown dtype code".format(source))
    store = build_model(cfg, params_dtype, initialize=False)[0]
    buffers = dict(store.buffers())
    optimizer = None
    if header.get("optimizer") is not None:
        optimizer = OptimizerState(**header["optimizer"])

    offset = 0
    seen = set()
    for entry in directory:
        code = entry["dtype"]
        if code not in CODE_DTYPES:
            raise FormatError("{}: unknown dtype code {!r} for {}".format(source, code, entry["name"]))
        nbytes = _nbytes(entry)
        array = np.frombuffer(payload, dtype="<" + code, count=nbytes // np.dtype(code).itemsize, offset=offset)
        array = array.reshape(entry["shape"]).astype(code)
        offset += nbytes
        section, name = entry["section"], entry["name"]
        if section in ("param", "buffer"):
            if section == "param":
                target = store[name].data if name in store else None
            else:
                target = buffers.get(name)
            if target is None:
                raise FormatError("{}: {} {} does not exist in the config".format(source, section, name))
            if target.shape != array.shape:
                raise FormatError("{}: shape disagreement for {}: checkpoint {} vs config {}".format(
                    source, name, array.shape, target.shape))
            target[...] = array
            seen.add(name)
        elif section in ("adam_m", "adam_v") and optimizer is not None:
            (optimizer.first if section == "adam_m" else optimizer.second)[name] = array.copy()
        else:
            raise FormatError("{}: unknown section {!r}".format(source, section))
    missing = [name for name in store.names() + list(buffers) if name not in seen]
    if missing:
        raise FormatError("{}: checkpoint lacks {} tensors of the config, first {}".format(source, len(missing), missing[0]))
    return Checkpoint(model_config=cfg, params=store, epoch=header.get("epoch", 0), optimizer=optimizer,
                      rng_state=header.get("rng_state"), train_config=train_cfg,
                      normalization=header.get("normalization"))


def save_checkpoint(path, ckpt):
    raw = encode_checkpoint(ckpt)
    temporary = "{}.tmp".format(path)
    try:
        with open(temporary, "wb") as handle:
            handle.write(raw)
        os.replace(temporary, path)
    except OSError as ex:
        raise ExportError("cannot write checkpoint {}: {}".format(path, ex.strerror))
    logger.info("saved checkpoint %s (epoch %d, %d bytes)", path, ckpt.epoch, len(raw))
    return path


def load_checkpoint(path, model_cfg=None):
    try:
        with open(path, "rb") as handle:
            raw = handle.read()
    except OSError as ex:
        raise FormatError("cannot read checkpoint {}: {}".format(path, ex.strerror))
    ckpt = decode_checkpoint(raw, str(path), model_cfg)
    logger.info("loaded checkpoint %s (epoch %d)", path, ckpt.epoch)
    return ckpt
