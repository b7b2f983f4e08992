"""File formats: CSV tables with headers, JSON for metadata, checkpoints and metrics.

Floats are written with Python's shortest round-trip repr, so a checkpoint
reloads bit-exactly and save -> load -> save reproduces the same bytes.
"""
import csv
import json
from pathlib import Path

import numpy as np

from .datagen import DataConfig, DatasetBundle
from .demix_net import AdamState, DemixNet
from .emission import GaussianStateParams
from .model import ModelParams

FORMAT_VERSION = 1

OBSERVATIONS = "observations.csv"
SOURCES = "sources.csv"
STATES = "states.csv"
METADATA = "metadata.json"


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# arrays and CSV


def array_to_json(a):
    a = np.asarray(a)
    return {"shape": list(a.shape), "data": a.tolist()}


def array_from_json(obj, dtype=float):
    arr = np.asarray(obj["data"], dtype=dtype)
    return arr.reshape(obj["shape"])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header, columns):
    """Write equal-length columns under ``header``; floats use round-trip repr."""
    rows = zip(*columns)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_matrix_csv(path, matrix, prefix):
    matrix = np.asarray(matrix)
    header = [f"{prefix}{i}" for i in range(matrix.shape[1])]
    write_csv(path, header, matrix.T)


def read_csv(path):
    """Returns (header, float matrix)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return header, data


def load_observations(path):
    """Observation matrix from a dataset directory or a CSV file."""
    path = Path(path)
    if path.is_dir():
        path = path / OBSERVATIONS
    _, data = read_csv(path)
    return data


# ---------------------------------------------------------------------------
# networks and parameters


def net_to_json(net):
    return {
        "alpha": float(net.alpha),
        "layers": [{"weight": array_to_json(W), "bias": array_to_json(b)}
                   for W, b in zip(net.weights, net.biases)],
    }


def net_from_json(obj):
    return DemixNet([array_from_json(l["weight"]) for l in obj["layers"]],
                    [array_from_json(l["bias"]) for l in obj["layers"]], obj["alpha"])


def params_to_json(params):
    out = {
        "A": array_to_json(params.A),
        "means": array_to_json(params.sources.means),
        "variances": array_to_json(params.sources.variances),
        "natural": array_to_json(params.natural.eta),
        "net": net_to_json(params.net) if params.net is not None else None,
    }
    return out


def params_from_json(obj):
    net = net_from_json(obj["net"]) if obj.get("net") is not None else None
    return ModelParams(array_from_json(obj["A"]),
                       GaussianStateParams(array_from_json(obj["means"]),
                                           array_from_json(obj["variances"])), net)


def adam_to_json(state):
    return {
        "first_moment": [array_to_json(m) for m in state.first_moment],
        "second_moment": [array_to_json(v) for v in state.second_moment],
        "step_count": state.step_count, "lr": state.lr, "beta1": state.beta1,
        "beta2": state.beta2, "eps": state.eps,
    }


def adam_from_json(obj):
    return AdamState([array_from_json(m) for m in obj["first_moment"]],
                     [array_from_json(v) for v in obj["second_moment"]],
                     obj["step_count"], obj["lr"], obj["beta1"], obj["beta2"], obj["eps"])


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# checkpoints


def make_checkpoint(params, config, iteration, free_energy, adam=None, seed=None):
    return {
        "version": FORMAT_VERSION,
        "kind": "checkpoint",
        "params": params_to_json(params),
        "config": dict(config),
        "seed": config.get("seed") if seed is None else seed,
        "iteration": int(iteration),
        "free_energy": None if free_energy is None else float(free_energy),
        "adam": adam_to_json(adam) if adam is not None else None,
    }


def save_checkpoint(ckpt, path):
    dump_json(ckpt, path)


def load_checkpoint(path):
    ckpt = load_json(path)
    if ckpt.get("kind") != "checkpoint" or "version" not in ckpt:
        raise FormatError(f"{path} is not a checkpoint file")
    if ckpt["version"] != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {ckpt['version']}")
    return ckpt


def checkpoint_params(ckpt):
    return params_from_json(ckpt["params"])


def checkpoint_adam(ckpt):
    return adam_from_json(ckpt["adam"]) if ckpt.get("adam") else None


# ---------------------------------------------------------------------------
# datasets


def save_dataset(bundle, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out / OBSERVATIONS, bundle.observations, "x")
    write_matrix_csv(out / SOURCES, bundle.sources, "s")
    write_csv(out / STATES, ["state"], [bundle.state_path])
    meta = {
        "version": FORMAT_VERSION,
        "kind": "dataset",
        "config": {k: getattr(bundle.config, k) for k in bundle.config.__dataclass_fields__},
        "true_params": params_to_json(bundle.true_params),
        "mixing_net": net_to_json(bundle.mixing_net),
    }
    dump_json(meta, out / METADATA)
    return out


def load_dataset(path):
    path = Path(path)
    meta_path = path / METADATA
    if not meta_path.exists():
        raise FormatError(f"{path} has no {METADATA}; ground truth unavailable")
    meta = load_json(meta_path)
    obs = load_observations(path)
    if not (path / SOURCES).exists() or not (path / STATES).exists():
        raise FormatError(f"{path} is missing ground-truth sources or states")
    _, sources = read_csv(path / SOURCES)
    _, states = read_csv(path / STATES)
    return DatasetBundle(obs, sources, states[:, 0].astype(np.intp),
                         net_from_json(meta["mixing_net"]), params_from_json(meta["true_params"]),
                         DataConfig(**meta["config"]))
