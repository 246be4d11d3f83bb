"""Versioned binary checkpoints: named float32 tensors plus a key=value config block.

Layout (little-endian):
    b"IFPC" | u32 version | u32 len + UTF-8 config text | u32 tensor count |
    per tensor: u32 len + UTF-8 name, u32 rank, u64 dims, u8 dtype (0 = f32), payload
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bundle import ModelBundle
from .model import ModelConfig, Transformer
from .predictor import Predictor, PredictorConfig, StaticScores
from .tensor import Tensor

MAGIC = b"IFPC"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    version: int
    config: dict[str, str]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: int(self.config[f"model.{k}"]) for k in ModelConfig.__dataclass_fields__})

    def to_bundle(self) -> ModelBundle:
        cfg = self.model_config()
        mode = self.config.get("mode", "dynamic")

        def group(prefix):
            return {k[len(prefix):]: Tensor(v.astype(np.float64), True, k)
                    for k, v in self.tensors.items() if k.startswith(prefix)}

        pcfg = None
        if mode == "dynamic":
            fields = {}
            for k in ("n_layers", "d_model", "n_heads", "d_ffn", "head_hidden"):
                fields[k] = int(self.config[f"predictor.{k}"])
            pcfg = PredictorConfig(**fields)
        # names and shapes come from a freshly initialized bundle of the same layout
        template = ModelBundle.create(cfg, "dense" if mode == "pruned" else mode, predictor_cfg=pcfg)
        expected = {k: p.shape for k, p in template.named_params().items()}
        if set(expected) != set(self.tensors):
            missing, extra = sorted(set(expected) - set(self.tensors)), sorted(set(self.tensors) - set(expected))
            raise CheckpointError(f"tensor table mismatch: missing {missing}, unexpected {extra}")
        for k, shape in expected.items():
            if self.tensors[k].shape != shape:
                raise CheckpointError(f"tensor {k} has shape {self.tensors[k].shape}, expected {shape}")
        model = Transformer(cfg, group("model."))
        if mode == "dynamic":
            selector = Predictor(cfg, pcfg, group("predictor."))
        elif mode == "static":
            selector = StaticScores(cfg, group("static."))
        else:
            selector = None
        meta = {k[len("meta."):]: _parse_meta(v) for k, v in self.config.items() if k.startswith("meta.")}
        return ModelBundle(model, selector, mode, meta)


def _parse_meta(v: str):
    try:
        return int(v)
    except ValueError:
        pass
    # integer matrices are stored as space-separated rows of comma-separated values
    if v and "," in v and all(x.lstrip("-").isdigit() for row in v.split(" ") for x in row.split(",")):
        return np.array([[int(x) for x in row.split(",")] for row in v.split(" ")])
    return v


def bundle_config(bundle: ModelBundle) -> dict[str, str]:
    cfg = {"mode": bundle.mode}
    cfg.update({f"model.{k}": str(v) for k, v in asdict(bundle.cfg).items()})
    pc = bundle.predictor_cfg
    if pc is not None:
        cfg.update({f"predictor.{k}": str(v) for k, v in asdict(pc).items() if k != "head_hidden"})
        cfg["predictor.head_hidden"] = str(pc.hidden)
    for k, v in sorted(bundle.meta.items()):
        if isinstance(v, np.ndarray):
            v = " ".join(",".join(str(int(x)) for x in row) for row in v)
        cfg[f"meta.{k}"] = str(v)
    return cfg


def encode(config: dict[str, str], tensors: dict[str, np.ndarray]) -> bytes:
    text = "".join(f"{k}={v}\n" for k, v in config.items())
    for k, v in config.items():
        if "=" in k or "\n" in k + v:
            raise CheckpointError(f"config entry {k!r} cannot be encoded as key=value")
    out = [MAGIC, struct.pack("<I", VERSION)]
    blob = text.encode("utf-8")
    out += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        out += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim)]
        out += [struct.pack("<Q", d) for d in arr.shape]
        out += [struct.pack("<B", DTYPE_F32), np.ascontiguousarray(arr, dtype="<f4").tobytes()]
    return b"".join(out)


def decode(buf: bytes) -> Checkpoint:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("not an IFPC checkpoint (bad magic bytes)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (n,) = struct.unpack("<I", take(4, "config length"))
    config = {}
    for line in take(n, "config block").decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            config[k] = v
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for i in range(count):
        (nl,) = struct.unpack("<I", take(4, f"name length of tensor #{i}"))
        name = take(nl, f"name of tensor #{i}").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of tensor {name}"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"dims of tensor {name}"))
        (dtype,) = struct.unpack("<B", take(1, f"dtype of tensor {name}"))
        if dtype != DTYPE_F32:
            raise CheckpointError(f"tensor {name}: unknown dtype tag {dtype}")
        size = int(np.prod(dims, dtype=np.int64)) * 4
        payload = take(size, f"payload of tensor {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after the last tensor")
    return Checkpoint(version, config, tensors)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, bundle: ModelBundle) -> None:
    tensors = {k: p.data for k, p in bundle.named_params().items()}
    _atomic_write(Path(path), encode(bundle_config(bundle), tensors))


def read_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def load_checkpoint(path) -> ModelBundle:
    return read_checkpoint(path).to_bundle()


def round_trip(bundle: ModelBundle) -> ModelBundle:
    """Pass a bundle through the 32-bit storage format in memory."""
    return decode(encode(bundle_config(bundle), {k: p.data for k, p in bundle.named_params().items()})).to_bundle()
