"""Projection head from backbone features to the unit-norm invariant space.

Architecture: ``[Linear -> LayerNorm -> ReLU -> Dropout] x 2 -> Linear -> L2``
with default widths 768 -> 2048 -> 2048 -> 4096.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

MAGIC = b"TGPROJ01"
MAGIC_PREFIX = b"TGPROJ"
FORMAT_VERSION = 1
LN_EPS = 1e-5
NORM_EPS = 1e-12


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass(frozen=True)
class ProjectorDims:
    in_dim: int = 768
    hidden_dim: int = 2048
    out_dim: int = 4096

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        i, h, o = self.in_dim, self.hidden_dim, self.out_dim
        return {
            "layer1.weight": (h, i),
            "layer1.bias": (h,),
            "norm1.weight": (h,),
            "norm1.bias": (h,),
            "layer2.weight": (h, h),
            "layer2.bias": (h,),
            "norm2.weight": (h,),
            "norm2.bias": (h,),
            "layer3.weight": (o, h),
            "layer3.bias": (o,),
        }

    def parameter_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.layer_shapes().values())


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)


class Projector(nn.Module):
    def __init__(self, dims: ProjectorDims = ProjectorDims(), dropout_rate: float = 0.1):
        super().__init__()
        self.dims = dims
        self.dropout_rate = dropout_rate
        self.layer1 = nn.Linear(dims.in_dim, dims.hidden_dim)
        self.norm1 = nn.LayerNorm(dims.hidden_dim, eps=LN_EPS)
        self.layer2 = nn.Linear(dims.hidden_dim, dims.hidden_dim)
        self.norm2 = nn.LayerNorm(dims.hidden_dim, eps=LN_EPS)
        self.layer3 = nn.Linear(dims.hidden_dim, dims.out_dim)

    def _dropout(self, h: torch.Tensor, generator: torch.Generator | None) -> torch.Tensor:
        if not self.training or self.dropout_rate == 0:
            return h
        keep = 1.0 - self.dropout_rate
        mask = torch.rand(h.shape, generator=generator, dtype=h.dtype) < keep
        return h * mask / keep

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        if x.shape[-1] != self.dims.in_dim:
            raise ValueError(f"expected feature dim {self.dims.in_dim}, got {x.shape[-1]}")
        h = self._dropout(F.relu(self.norm1(self.layer1(x))), generator)
        h = self._dropout(F.relu(self.norm2(self.layer2(h))), generator)
        return l2_normalize(self.layer3(h))

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in self.state_dict().items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        shapes = self.dims.layer_shapes()
        state = {}
        for name, shape in shapes.items():
            if name not in arrays:
                raise CheckpointError(f"checkpoint is missing layer {name!r}")
            arr = arrays[name]
            if tuple(arr.shape) != shape:
                raise CheckpointError(f"layer {name!r}: expected shape {shape}, found {tuple(arr.shape)}")
            state[name] = torch.from_numpy(np.array(arr, dtype=np.float32))
        self.load_state_dict(state)


ProjectorParams = Projector


def init_params(seed: int = 0, dims: ProjectorDims = ProjectorDims(), dropout_rate: float = 0.1) -> Projector:
    """Fan-in scaled weights ``N(0, 1/fan_in)``, biases ``U(+-1/sqrt(fan_in))``, LayerNorm gain 1 / bias 0."""
    proj = Projector(dims, dropout_rate)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for layer in (proj.layer1, proj.layer2, proj.layer3):
            fan_in = layer.in_features
            w = rng.standard_normal(tuple(layer.weight.shape), dtype=np.float32) / np.float32(np.sqrt(fan_in))
            b = rng.uniform(-1, 1, size=layer.out_features).astype(np.float32) / np.float32(np.sqrt(fan_in))
            layer.weight.copy_(torch.from_numpy(w))
            layer.bias.copy_(torch.from_numpy(b))
        for norm in (proj.norm1, proj.norm2):
            norm.weight.fill_(1.0)
            norm.bias.zero_()
    return proj.eval()


def project(params: Projector, x: torch.Tensor, training_mode: bool = False, generator: torch.Generator | None = None):
    params.train(training_mode)
    try:
        return params(x, generator)
    finally:
        params.eval()


# -- container format -----------------------------------------------------------
#
# MAGIC(8) | u32 header_len | header JSON (utf-8) | u32 crc32(header) | payload
# The header lists arrays in payload order as {name, shape, dtype}; payloads
# are little-endian float32, row-major. ``payload_sha256`` guards the payload.


def write_container(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None, magic: bytes = MAGIC) -> None:
    entries = []
    chunks = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
        chunks.append(arr.tobytes())
    payload = b"".join(chunks)
    header = {
        "version": FORMAT_VERSION,
        "arrays": entries,
        "meta": dict(meta or {}),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(struct.pack("<I", zlib.crc32(hbytes)))
        fh.write(payload)
    os.replace(tmp, path)


def read_container(path, magic: bytes = MAGIC) -> tuple[dict[str, np.ndarray], dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {os.fspath(path)!r}: {exc}") from exc
    if data[: len(MAGIC_PREFIX)] != magic[: len(MAGIC_PREFIX)] or len(data) < len(magic):
        raise CheckpointError(f"{path}: not a projector checkpoint (bad magic)")
    if data[: len(magic)] != magic:
        raise CheckpointVersionError(
            f"{path}: unsupported checkpoint format {data[:len(magic)]!r}, expected {magic!r}"
        )
    pos = len(magic)
    if len(data) < pos + 4:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    hbytes = data[pos:pos + hlen]
    pos += hlen
    if len(hbytes) != hlen or len(data) < pos + 4:
        raise CheckpointError(f"{path}: truncated header")
    (crc,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if zlib.crc32(hbytes) != crc:
        raise CheckpointError(f"{path}: header checksum mismatch (corrupted header)")
    try:
        header = json.loads(hbytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported header version {header.get('version')!r}")
    payload = data[pos:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch (truncated or corrupted)")
    arrays = {}
    offset = 0
    for entry in header["arrays"]:
        if entry.get("dtype") != "float32":
            raise CheckpointError(f"{path}: array {entry.get('name')!r} has unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload too short for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return arrays, header.get("meta", {})


def dims_from_arrays(arrays: Mapping[str, np.ndarray]) -> ProjectorDims:
    try:
        h, i = arrays["layer1.weight"].shape
        o = arrays["layer3.weight"].shape[0]
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot infer projector dims: {exc}") from exc
    return ProjectorDims(int(i), int(h), int(o))


def save_params(params: Projector, path, meta: Mapping | None = None, extra: Mapping[str, np.ndarray] | None = None) -> None:
    arrays = params.named_arrays()
    if extra:
        arrays.update(extra)
    full_meta = {"dims": [params.dims.in_dim, params.dims.hidden_dim, params.dims.out_dim], "dropout_rate": params.dropout_rate}
    full_meta.update(meta or {})
    write_container(path, arrays, full_meta)


def load_params(path, dims: ProjectorDims | None = None) -> Projector:
    arrays, meta = read_container(path)
    if dims is None:
        dims = dims_from_arrays(arrays)
    proj = Projector(dims, float(meta.get("dropout_rate", 0.1)))
    proj.load_arrays(arrays)
    return proj.eval()
