"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"DFQCKPT\\0"
    version    uint32    currently 1
    hdr_len    uint64    length of the JSON header in bytes
    header     JSON      {"meta": {...}, "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}]}
    blob       bytes     tensor payloads, little-endian, offsets relative to blob start

dtype tags: f4, f8, i4, i8, b1.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from ..generator import Generator, GeneratorConfig
from ..latent import DisentanglementMap, EmbeddingTable
from ..quantizer import QuantParams, quant_layers, quantize_model
from .io import atomic_write_bytes
from .models import ClassifierConfig, ToyClassifier, freeze

MAGIC = b"DFQCKPT\x00"
VERSION = 1

_DTYPES = {
    torch.float32: "<f4", torch.float64: "<f8", torch.int32: "<i4", torch.int64: "<i8", torch.bool: "|b1",
}
_TAGS = {"f4": torch.float32, "f8": torch.float64, "i4": torch.int32, "i8": torch.int64, "b1": torch.bool}


class CheckpointError(ValueError):
    pass


def encode(tensors: dict, meta: dict) -> bytes:
    directory, chunks, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        directory.append({"name": name, "dtype": _DTYPES[t.dtype][-2:], "shape": list(t.shape),
                          "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": directory}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def decode(data: bytes) -> tuple[dict, dict]:
    if len(data) < 20 or data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hdr_len = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[20:20 + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    blob = memoryview(data)[20 + hdr_len:]
    tensors = {}
    for entry in header["tensors"]:
        tag = entry["dtype"]
        if tag not in _TAGS:
            raise CheckpointError(f"unknown dtype tag {tag!r}")
        np_dtype = ("|" if tag == "b1" else "<") + tag
        end = entry["offset"] + entry["nbytes"]
        if end > len(blob) or entry["nbytes"] != int(np.prod(entry["shape"])) * np.dtype(np_dtype).itemsize:
            raise CheckpointError(f"truncated or inconsistent tensor {entry['name']!r}")
        chunk = blob[entry["offset"]:end]
        arr = np.frombuffer(chunk, dtype=np_dtype).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr).to(_TAGS[tag])
    return tensors, header["meta"]


def save_checkpoint(path, tensors: dict, meta: dict) -> None:
    atomic_write_bytes(path, encode(tensors, meta))


def load_checkpoint(path) -> tuple[dict, dict]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        return decode(f.read())


def _prefixed(prefix: str, state: dict) -> dict:
    return {f"{prefix}/{k}": v for k, v in state.items()}


def _unprefixed(prefix: str, tensors: dict) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}


def save_teacher(path, model: ToyClassifier, extra_meta: Optional[dict] = None) -> None:
    meta = {"kind": "teacher", "classifier": model.config.to_dict(), **(extra_meta or {})}
    save_checkpoint(path, _prefixed("teacher", model.state_dict()), meta)


def _classifier_from(tensors, meta, prefix):
    model = ToyClassifier(ClassifierConfig(**meta["classifier"]))
    model.load_state_dict(_unprefixed(prefix, tensors))
    return model


def load_teacher(path) -> ToyClassifier:
    tensors, meta = load_checkpoint(path)
    if "classifier" not in meta:
        raise CheckpointError(f"{path} does not contain a classifier")
    return freeze(_classifier_from(tensors, meta, "teacher"))


def quant_param_tensors(qmodel: nn.Module) -> tuple[dict, dict]:
    """Weight range tensors (float32) and their (n_bits, channel_axis) records."""
    tensors, records = {}, {}
    for name, layer in quant_layers(qmodel):
        params: QuantParams = layer.weight_params()
        tensors[f"quant/{name}/theta_min"] = params.theta_min.to(torch.float32)
        tensors[f"quant/{name}/theta_max"] = params.theta_max.to(torch.float32)
        records[name] = {"n_bits": params.n_bits, "channel_axis": params.channel_axis,
                         "a_bits": layer.act_quant.n_bits}
    return tensors, records


@dataclass
class DistilledBundle:
    student: nn.Module
    teacher: ToyClassifier
    generator: Generator
    table: EmbeddingTable
    dm: DisentanglementMap
    meta: dict


def save_distilled(path, student, teacher, generator, table, dm, config_dict: dict, extra_meta=None) -> None:
    qtensors, qrecords = quant_param_tensors(student)
    tensors = {
        **_prefixed("student", student.state_dict()),
        **_prefixed("teacher", teacher.state_dict()),
        **_prefixed("generator", generator.state_dict()),
        **_prefixed("dm", dm.state_dict()),
        "embedding/E": table.E.detach(),
        **qtensors,
    }
    gc = generator.config
    meta = {
        "kind": "distilled",
        "classifier": teacher.config.to_dict(),
        "generator": {"latent_dim": gc.latent_dim, "num_classes": gc.num_classes, "out_shape": list(gc.out_shape),
                      "hidden": gc.hidden, "use_conditional_bn": gc.use_conditional_bn},
        "dm": {"in_dim": dm.in_dim, "out_dim": dm.out_dim, "layer_count": dm.layer_count},
        "embedding": {"dim": table.dim, "num_classes": table.num_classes, "frozen": table.frozen},
        "quant": qrecords,
        "config": config_dict,
        **(extra_meta or {}),
    }
    save_checkpoint(path, tensors, meta)


def load_distilled(path) -> DistilledBundle:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "distilled":
        raise CheckpointError(f"{path} is not a distillation checkpoint")
    teacher = freeze(_classifier_from(tensors, meta, "teacher"))
    bits = next(iter(meta["quant"].values()))
    student = quantize_model(teacher, bits["n_bits"], bits["a_bits"])
    student.load_state_dict(_unprefixed("student", tensors))
    student.eval()
    generator = Generator(GeneratorConfig(**meta["generator"]))
    generator.load_state_dict(_unprefixed("generator", tensors))
    generator.eval()
    dm = DisentanglementMap(**meta["dm"])
    dm.load_state_dict(_unprefixed("dm", tensors))
    emb = meta["embedding"]
    table = EmbeddingTable(emb["dim"], emb["num_classes"], frozen=emb["frozen"])
    with torch.no_grad():
        table.E.copy_(tensors["embedding/E"])
    return DistilledBundle(student, teacher, generator, table, dm, meta)


def load_classifier(path) -> nn.Module:
    """Student of a distillation checkpoint, or the model of a teacher checkpoint."""
    _, meta = load_checkpoint(path)
    if meta.get("kind") == "distilled":
        return load_distilled(path).student
    return load_teacher(path)
