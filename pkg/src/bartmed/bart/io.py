"""Lossless on-disk format for fitted ensembles.

A fit is stored as an ``.npz`` archive: the preorder node arrays, the per-draw
sigma, the cut grid and a JSON header carrying a format tag and the sampler
configuration.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import BartConfig, CutGrid, FittedBart

FORMAT = "bartmed-ensemble"
VERSION = 1


def fit_to_arrays(fit: FittedBart) -> dict[str, np.ndarray]:
    header = {
        "format": FORMAT,
        "version": VERSION,
        "kind": fit.kind,
        "n_trees": fit.n_trees,
        "offset": fit.offset.hex(),
        "scale": fit.scale.hex(),
        "config": fit.config.to_dict(),
        "covariate_names": fit.covariate_names,
    }
    vals, start = fit.grid.flat()
    return {
        "header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
        "node_var": fit.node_var,
        "node_cut": fit.node_cut,
        "node_value": fit.node_value,
        "node_right": fit.node_right,
        "tree_start": fit.tree_start,
        "sigma": fit.sigma,
        "cut_values": vals,
        "cut_start": start,
    }


def fit_from_arrays(arrays) -> FittedBart:
    header = json.loads(bytes(arrays["header"]).decode())
    if header.get("format") != FORMAT:
        raise ValueError("not a fitted ensemble archive")
    if header["version"] > VERSION:
        raise ValueError(f"unsupported ensemble format version {header['version']}")
    vals, start = arrays["cut_values"], arrays["cut_start"]
    grid = CutGrid([np.array(vals[start[i]:start[i + 1]]) for i in range(len(start) - 1)])
    return FittedBart(kind=header["kind"], n_trees=header["n_trees"],
                      node_var=np.array(arrays["node_var"]),
                      node_cut=np.array(arrays["node_cut"]),
                      node_value=np.array(arrays["node_value"]),
                      node_right=np.array(arrays["node_right"]),
                      tree_start=np.array(arrays["tree_start"]),
                      sigma=np.array(arrays["sigma"]),
                      offset=float.fromhex(header["offset"]),
                      scale=float.fromhex(header["scale"]), grid=grid,
                      config=BartConfig(**header["config"]),
                      covariate_names=list(header["covariate_names"]))


def save_fit(fit: FittedBart, path) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **fit_to_arrays(fit))
    return path


def load_fit(path) -> FittedBart:
    with np.load(path) as data:
        return fit_from_arrays(data)


def draw_trees(fit: FittedBart, draw: int) -> list[list[tuple]]:
    """Preorder node records of one draw: (var, cutpoint) or ("leaf", value)."""
    trees = []
    for r in range(fit.n_trees):
        k = fit.tree_start[draw * fit.n_trees + r]
        records, need = [], 1
        while need:
            if fit.node_var[k] >= 0:
                records.append((int(fit.node_var[k]), float(fit.node_value[k])))
                need += 1
            else:
                records.append(("leaf", float(fit.node_value[k])))
                need -= 1
            k += 1
        trees.append(records)
    return trees


def ensemble_from_records(draws: list[list[list[tuple]]], kind: str = "continuous",
                          n_covariates: int = 1, offset: float = 0.0, scale: float = 1.0,
                          sigma=None) -> FittedBart:
    """Build a fit from explicit preorder records, the inverse of ``draw_trees``."""
    n_trees = len(draws[0])
    var, value, right, starts = [], [], [], []
    for trees in draws:
        if len(trees) != n_trees:
            raise ValueError("every draw needs the same number of trees")
        for records in trees:
            base = len(var)
            starts.append(base)
            for tag, val in records:
                var.append(-1 if tag == "leaf" else int(tag))
                value.append(float(val))
                right.append(-1)
            local = np.array(var[base:])
            for j in range(len(local)):
                if local[j] >= 0:
                    k, need = j + 1, 1
                    while need:
                        need += 1 if local[k] >= 0 else -1
                        k += 1
                    right[base + j] = base + k
    n_draws = len(draws)
    sig = np.ones(n_draws) if sigma is None else np.asarray(sigma, dtype=np.float64)
    return FittedBart(kind=kind, n_trees=n_trees, node_var=np.array(var, dtype=np.int64),
                      node_cut=np.full(len(var), -1, dtype=np.int64),
                      node_value=np.array(value), node_right=np.array(right, dtype=np.int64),
                      tree_start=np.array(starts, dtype=np.int64), sigma=sig,
                      offset=float(offset), scale=float(scale),
                      grid=CutGrid([np.empty(0)] * n_covariates), config=BartConfig())
