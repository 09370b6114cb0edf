"""Model checkpoints: ``checkpoint.json`` header plus a flat float64 blob."""
from __future__ import annotations

import json
import os

import numpy as np

from .baselines_gp import DrcModel, PcaGpModel
from .gpode import GpodeModel
from .ifc import IfcOde2Model, SfModel

HEADER = "checkpoint.json"
BLOB = "params.f64"


def model_state(model):
    if isinstance(model, DrcModel):
        out = {}
        for i, level in enumerate(model.levels):
            out.update(level.state(f"level{i}."))
        return out
    if isinstance(model, PcaGpModel):
        return model.state()
    return model.params()


def model_config(model):
    if isinstance(model, DrcModel):
        return {"kind": "drc", "levels": len(model.levels)}
    if isinstance(model, PcaGpModel):
        return {"kind": "pca-gp", "K": model.K}
    return model.config()


def save_model(model, directory, extra=None):
    os.makedirs(directory, exist_ok=True)
    state = model_state(model)
    entries, pos = [], 0
    for name, arr in state.items():
        arr = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": pos})
        pos += arr.size
    header = {"model": model_config(model), "params": entries, "n_values": pos, **(extra or {})}
    with open(os.path.join(directory, HEADER), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    flat = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in state.values()]) \
        if state else np.zeros(0)
    flat.astype("<f8").tofile(os.path.join(directory, BLOB))


def load_model(directory):
    """Returns ``(model, header)``."""
    with open(os.path.join(directory, HEADER)) as fh:
        header = json.load(fh)
    flat = np.fromfile(os.path.join(directory, BLOB), dtype="<f8").astype(np.float64)
    if flat.size != header["n_values"]:
        raise ValueError(f"{directory}: parameter blob has {flat.size} values, "
                         f"header says {header['n_values']}")
    state = {e["name"]: flat[e["offset"]:e["offset"] + int(np.prod(e["shape"], dtype=int))]
             .reshape(e["shape"]) for e in header["params"]}
    cfg = dict(header["model"])
    kind = cfg.pop("kind")
    if kind == "ifc-ode2":
        model = IfcOde2Model(cfg["input_dim"], cfg["d"], cfg["K"], hidden=cfg["hidden"],
                             seed=cfg["seed"], steps_per_unit=cfg["steps_per_unit"])
        model.set_params(state)
    elif kind == "ifc-gpode":
        model = GpodeModel(cfg["input_dim"], cfg["d"], cfg["K"], cfg["fidelities"], R=cfg["R"],
                           hidden=cfg["hidden"], seed=cfg["seed"],
                           steps_per_unit=cfg["steps_per_unit"])
        model.set_params(state)
    elif kind == "sf":
        model = SfModel(cfg["input_dim"], cfg["d"], cfg["K"], hidden=cfg["hidden"],
                        seed=cfg["seed"], layers=cfg.get("layers", 2))
        model.set_params(state)
    elif kind == "pca-gp":
        model = PcaGpModel.from_state(state)
    elif kind == "drc":
        model = DrcModel([PcaGpModel.from_state(state, f"level{i}.") for i in range(cfg["levels"])])
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return model, header
