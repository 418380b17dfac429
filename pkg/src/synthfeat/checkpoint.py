"""Checkpoint archive format.

A checkpoint is a single zip archive holding ``arch.json`` (the full
architecture config plus format metadata), ``params/`` with one raw
little-endian array per named tensor and a manifest listing name -> shape /
dtype, and ``train_state.json`` for optimizer/iteration state. Exported
backbones reuse the same container with ``kind: backbone``.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .arch import ArchitectureConfig
from .network import MultiTaskModel

FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4",
           "uint8": "|u1", "bool": "|b1"}


def write_archive(path: Path, kind: str, meta: dict,
                  arrays: dict[str, np.ndarray], train_state: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = []
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("arch.json", json.dumps(
            {"format_version": FORMAT_VERSION, "kind": kind, **meta}, indent=2))
        for i, (name, arr) in enumerate(arrays.items()):
            arr = np.ascontiguousarray(arr)
            dtype = str(arr.dtype)
            if dtype not in _DTYPES:
                raise ValueError(f"unsupported dtype {dtype} for {name}")
            fname = f"params/{i:05d}.bin"
            zf.writestr(fname, arr.astype(_DTYPES[dtype]).tobytes())
            manifest.append({"name": name, "file": fname,
                             "shape": list(arr.shape), "dtype": dtype})
        zf.writestr("params/manifest.json", json.dumps(manifest, indent=2))
        zf.writestr("train_state.json", json.dumps(train_state or {}, indent=2))


def read_archive(path: Path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("arch.json"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(
                f"{path}: unsupported format_version {meta.get('format_version')}")
        manifest = json.loads(zf.read("params/manifest.json"))
        arrays = {}
        for entry in manifest:
            raw = zf.read(entry["file"])
            arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]])
            arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
        train_state = json.loads(zf.read("train_state.json"))
    return meta, arrays, train_state


def save_checkpoint(path: Path, model: MultiTaskModel,
                    train_state: dict | None = None,
                    extra_tensors: dict[str, torch.Tensor] | None = None):
    arrays = {f"model/{k}": v.detach().cpu().numpy()
              for k, v in model.state_dict().items()}
    for k, v in (extra_tensors or {}).items():
        arrays[f"extra/{k}"] = v.detach().cpu().numpy()
    meta = {"arch": model.config.to_dict(), "init_seed": model.init_seed}
    write_archive(path, "checkpoint", meta, arrays, train_state)


def load_checkpoint(path: Path):
    """Returns (model, train_state, extra_tensors); model weights restored."""
    meta, arrays, train_state = read_archive(path)
    if meta["kind"] != "checkpoint":
        raise ValueError(f"{path}: expected a checkpoint archive, got {meta['kind']!r}")
    config = ArchitectureConfig.from_dict(meta["arch"])
    model = MultiTaskModel(config, init_seed=meta.get("init_seed", 0))
    state = {k[len("model/"):]: torch.from_numpy(v.copy())
             for k, v in arrays.items() if k.startswith("model/")}
    model.load_state_dict(state)
    extra = {k[len("extra/"):]: torch.from_numpy(v.copy())
             for k, v in arrays.items() if k.startswith("extra/")}
    return model, train_state, extra


def serialize_optimizer(opt: torch.optim.Optimizer, prefix: str):
    """Split an optimizer state dict into (json skeleton, named tensors)."""
    sd = opt.state_dict()
    tensors = {}
    state_meta = {}
    for pid, pstate in sd["state"].items():
        entry = {}
        for key, val in pstate.items():
            if isinstance(val, torch.Tensor):
                name = f"{prefix}/{pid}/{key}"
                tensors[name] = val
                entry[key] = {"__tensor__": name}
            else:
                entry[key] = val
        state_meta[str(pid)] = entry
    skeleton = {"state": state_meta, "param_groups": sd["param_groups"]}
    return skeleton, tensors


def deserialize_optimizer(opt: torch.optim.Optimizer, skeleton: dict,
                          tensors: dict[str, torch.Tensor]):
    state = {}
    for pid, entry in skeleton["state"].items():
        pstate = {}
        for key, val in entry.items():
            if isinstance(val, dict) and "__tensor__" in val:
                pstate[key] = tensors[val["__tensor__"]]
            else:
                pstate[key] = val
        state[int(pid)] = pstate
    opt.load_state_dict({"state": state, "param_groups": skeleton["param_groups"]})
