"""Policy checkpoints as ``.npz`` archives.

Layout (format version 1)::

    meta            0-d unicode array holding a JSON object:
                    {"format": "cdnnsched-policies", "version": 1,
                     "kind": "cdnn" | "locally_robust", "k_users": K,
                     "seed": <training seed>,
                     "policies": [{"layer_sizes": [...], "dropout_rate": r,
                                   "output_index": i, "threshold": t,
                                   "dtype": "float32"}, ...]}
    tx{j}.W{l}      weight matrix of layer l of TX j, shape (fan_out, fan_in), row-major
    tx{j}.b{l}      bias vector of layer l of TX j
    tx{j}.mean      input standardization mean, length K*K (row-major flattened estimate)
    tx{j}.std       input standardization scale, length K*K

TX and layer indices are 0-based.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .neural import MlpArchitecture, MlpParams
from .training import Policy, PolicySet, Standardizer

FORMAT = "cdnnsched-policies"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_policies(policies: PolicySet, path, seed: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "kind": policies.kind,
        "k_users": policies.k_users,
        "seed": int(seed),
        "policies": [],
    }
    arrays = {}
    for j, pol in enumerate(policies.policies):
        meta["policies"].append({
            "layer_sizes": list(pol.arch.layer_sizes),
            "dropout_rate": pol.arch.dropout_rate,
            "output_index": pol.output_index,
            "threshold": pol.threshold,
            "dtype": str(pol.params.weights[0].dtype),
        })
        for l, (w, b) in enumerate(zip(pol.params.weights, pol.params.biases)):
            arrays[f"tx{j}.W{l}"] = w
            arrays[f"tx{j}.b{l}"] = b
        arrays[f"tx{j}.mean"] = pol.standardizer.mean
        arrays[f"tx{j}.std"] = pol.standardizer.std
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)
    return path


def load_policies(path) -> tuple[PolicySet, dict]:
    """Return ``(policies, meta)``."""
    with np.load(path, allow_pickle=False) as data:
        if "meta" not in data:
            raise CheckpointError(f"{path}: missing meta record")
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != FORMAT or meta.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint {meta.get('format')} v{meta.get('version')}")
        pols = []
        for j, pm in enumerate(meta["policies"]):
            arch = MlpArchitecture(tuple(pm["layer_sizes"]), pm["dropout_rate"])
            n_layers = len(arch.layer_sizes) - 1
            params = MlpParams(
                tuple(data[f"tx{j}.W{l}"] for l in range(n_layers)),
                tuple(data[f"tx{j}.b{l}"] for l in range(n_layers)),
            )
            if params.layer_sizes != arch.layer_sizes:
                raise CheckpointError(f"{path}: TX {j} arrays do not match layer_sizes {arch.layer_sizes}")
            std = Standardizer(data[f"tx{j}.mean"], data[f"tx{j}.std"])
            pols.append(Policy(params, arch, std, pm["output_index"], pm["threshold"]))
    if len(pols) != meta["k_users"]:
        raise CheckpointError(f"{path}: expected {meta['k_users']} policies, found {len(pols)}")
    return PolicySet(tuple(pols), meta["kind"]), meta
