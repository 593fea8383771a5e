"""SEGT tensor files and zip checkpoint archives.

A SEGT file is a one-line ASCII header ``SEGT <H_f> <W_f> <C> <H> <W>\\n``
followed by ``H_f * W_f * C`` little-endian float32 values in row-major
order. Checkpoints bundle many tensors as SEGT members of a zip archive
alongside a JSON header that records each tensor's true shape and dtype.
"""
from __future__ import annotations

import io
import json
import os
import zipfile
from typing import Any, Mapping

import numpy as np
import torch

from .errors import InputError

MAGIC = b"SEGT"


def encode_segt(data: np.ndarray, source_shape: tuple[int, int]) -> bytes:
    data = np.asarray(data)
    if data.ndim != 3:
        raise InputError(f"SEGT payload must be 3-d (H_f, W_f, C), got shape {data.shape}")
    hf, wf, c = data.shape
    h, w = (int(s) for s in source_shape)
    header = f"SEGT {hf} {wf} {c} {h} {w}\n".encode("ascii")
    return header + np.ascontiguousarray(data, dtype="<f4").tobytes()


def decode_segt(buf: bytes) -> tuple[np.ndarray, tuple[int, int]]:
    nl = buf.find(b"\n")
    if nl < 0 or not buf.startswith(MAGIC + b" "):
        raise InputError("not a SEGT tensor (bad header)")
    fields = buf[:nl].decode("ascii").split()
    if len(fields) != 6:
        raise InputError(f"malformed SEGT header: {buf[:nl]!r}")
    hf, wf, c, h, w = (int(f) for f in fields[1:])
    payload = buf[nl + 1:]
    expected = hf * wf * c * 4
    if len(payload) != expected:
        raise InputError(f"SEGT payload has {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(hf, wf, c).astype(np.float32)
    return data, (h, w)


def write_segt(path: str | os.PathLike, data: np.ndarray, source_shape: tuple[int, int]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_segt(data, source_shape))


def read_segt(path: str | os.PathLike) -> tuple[np.ndarray, tuple[int, int]]:
    with open(path, "rb") as fh:
        return decode_segt(fh.read())


def save_archive(path: str | os.PathLike, tensors: Mapping[str, torch.Tensor], config: Mapping[str, Any]) -> None:
    """Write named tensors plus a JSON config into a single zip archive.

    Each tensor is flattened to an ``(n, 1, 1)`` SEGT member; its shape and
    dtype go into the JSON header so loading restores it exactly.
    """
    index = {}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, t in tensors.items():
            t = t.detach().cpu()
            if t.is_floating_point() and t.dtype != torch.float32:
                raise InputError(f"tensor {name!r} has dtype {t.dtype}; only float32 is stored")
            flat = t.reshape(-1).to(torch.float32).numpy()
            if not t.is_floating_point() and np.any(np.abs(t.reshape(-1).numpy()) >= 2**24):
                raise InputError(f"integer tensor {name!r} exceeds float32 exact range")
            index[name] = {"shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", "")}
            zf.writestr(f"tensors/{name}.segt", encode_segt(flat.reshape(-1, 1, 1), (flat.size, 1)))
        zf.writestr("config.json", json.dumps({"config": config, "tensors": index}, indent=1, sort_keys=True))


def load_archive(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    with zipfile.ZipFile(path, "r") as zf:
        header = json.loads(zf.read("config.json"))
        tensors = {}
        for name, meta in header["tensors"].items():
            data, _ = decode_segt(zf.read(f"tensors/{name}.segt"))
            t = torch.from_numpy(data.reshape(-1).copy()).to(getattr(torch, meta["dtype"]))
            tensors[name] = t.reshape(meta["shape"])
    return tensors, header["config"]


def archive_bytes(tensors: Mapping[str, torch.Tensor], config: Mapping[str, Any]) -> bytes:
    buf = io.BytesIO()
    save_archive(buf, tensors, config)
    return buf.getvalue()
