"""Flat named-tensor archive shared by every training stage.

A zip of ``.npy`` members plus a JSON ``__header__.json`` member carrying the
format name, version, stage and free-form metadata. Member timestamps are
fixed so identical content produces identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

FORMAT = "cascade-sgg-archive"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(RuntimeError):
    pass


def save_archive(path, tensors: dict, header: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = {"format": FORMAT, "version": VERSION, **header}
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("__header__.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(head, sort_keys=True, indent=1))
        for name in sorted(tensors):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(tensors[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH), buf.getvalue())
    tmp.replace(path)
    return path


def load_archive(path, stage: str | None = None) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        try:
            header = json.loads(zf.read("__header__.json"))
        except KeyError:
            raise CheckpointError(f"{path}: missing archive header") from None
        if header.get("format") != FORMAT:
            raise CheckpointError(f"{path}: not a {FORMAT} file")
        if header.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported archive version {header.get('version')}")
        if stage is not None and header.get("stage") != stage:
            raise CheckpointError(f"{path}: expected a {stage!r} checkpoint, found {header.get('stage')!r}")
        tensors = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                tensors[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return header, tensors


def module_state(module, prefix: str = "") -> dict:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_state(module, tensors: dict, prefix: str = "") -> None:
    import torch

    state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith(prefix)}
    module.load_state_dict(state)


def optimizer_state(optimizer, prefix: str = "optim/") -> dict:
    out = {}
    for idx, st in optimizer.state_dict()["state"].items():
        for key, val in st.items():
            out[f"{prefix}{idx}/{key}"] = np.asarray(val.detach().cpu().numpy() if hasattr(val, "detach") else val)
    return out


def load_optimizer_state(optimizer, tensors: dict, prefix: str = "optim/") -> None:
    import torch

    sd = optimizer.state_dict()
    state: dict = {}
    for name, val in tensors.items():
        if not name.startswith(prefix):
            continue
        idx, key = name[len(prefix):].split("/", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(val))
    sd["state"] = state
    optimizer.load_state_dict(sd)
