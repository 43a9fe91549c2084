"""Self-describing checkpoint container: one ``.npz`` holding arrays plus a JSON header."""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .nn import ParamSet
from .optim import AdamState

_META_KEY = "__meta__"


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload[_META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp.npz")
    # fixed entry timestamps keep identical checkpoints byte-identical
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(payload):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, payload[key], allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    tmp.replace(path)
    return path


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with np.load(Path(path), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files if k != _META_KEY}
        meta = json.loads(z[_META_KEY].tobytes().decode()) if _META_KEY in z.files else {}
    return arrays, meta


def pack_params(prefix: str, params: ParamSet) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in params.items()}


def unpack_params(prefix: str, arrays: Mapping[str, np.ndarray]) -> ParamSet:
    head = prefix + "/"
    return ParamSet({k[len(head):]: v for k, v in arrays.items() if k.startswith(head)})


def pack_adam(prefix: str, state: AdamState) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    arrays = {f"{prefix}.m/{k}": v for k, v in state.m.items()}
    arrays.update({f"{prefix}.v/{k}": v for k, v in state.v.items()})
    meta = {"step": state.step, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps}
    return arrays, meta


def unpack_adam(prefix: str, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> AdamState:
    m = {k[len(prefix) + 3:]: v for k, v in arrays.items() if k.startswith(prefix + ".m/")}
    v = {k[len(prefix) + 3:]: v for k, v in arrays.items() if k.startswith(prefix + ".v/")}
    return AdamState(m=m, v=v, step=int(meta["step"]), beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"])
