"""Command-line interface: generate, train, decode, evaluate, benchmark.

Run configuration is a JSON file with up to three keys::

    {
      "data":  {...DataConfig fields...},
      "train": {...TrainConfig fields...},
      "strict": true
    }

Every field is optional; defaults are the dataclass defaults of
``DataConfig`` and ``TrainConfig``. ``train.num_states`` and
``train.num_components`` default to the data section's values. Unknown keys
are rejected. Exit codes: 0 success, 2 configuration/validation error,
3 numerical failure (all restarts exhausted).
"""
import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .datagen import DataConfig, generate_dataset
from .em_trainer import IdentifiabilityError, TrainConfig, TrainingError, e_step, train
from .emission import log_emission_matrix
from .evaluation import benchmark_logdet, check_assumptions, linear_r2, mcc_detail, state_accuracy
from .hmm_core import viterbi

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

logger = logging.getLogger("hmm_nica")

METRICS_SCHEMA = {
    "type": "object",
    "required": ["mcc", "state_accuracy", "matched_abs_corr", "linear_r2", "assumptions",
                 "num_states", "num_components", "length"],
    "properties": {
        "mcc": {"type": "number", "minimum": 0, "maximum": 1},
        "state_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "matched_abs_corr": {"type": "array", "items": {"type": "number"}},
        "component_assignment": {"type": "array", "items": {"type": "integer"}},
        "linear_r2": {"type": "array", "items": {"type": "number"}},
        "assumptions": {
            "type": "object",
            "required": ["passed", "full_rank", "irreducible", "unique_stationary",
                         "enough_states", "lambda_invertible", "distinct_means", "bijective"],
        },
        "num_states": {"type": "integer"},
        "num_components": {"type": "integer"},
        "length": {"type": "integer"},
    },
}


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    data: DataConfig
    train: TrainConfig
    strict: bool = True


def _build(cls, values, section):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    return cls(**values)


def load_run_config(path=None, data_overrides=None, train_overrides=None):
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(raw) - {"data", "train", "strict"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    data_vals = dict(raw.get("data", {}))
    data_vals.update({k: v for k, v in (data_overrides or {}).items() if v is not None})
    data = _build(DataConfig, data_vals, "data")
    strict = bool(raw.get("strict", True))

    train_vals = dict(raw.get("train", {}))
    train_vals.setdefault("num_states", data.num_states)
    train_vals.setdefault("num_components", data.num_components)
    train_vals.setdefault("layers", data.mixing_layers)
    train_vals.setdefault("check_identifiability", strict)
    train_vals.update({k: v for k, v in (train_overrides or {}).items() if v is not None})
    return RunConfig(data, _build(TrainConfig, train_vals, "train"), strict)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args):
    cfg = load_run_config(args.config, data_overrides={
        "seed": args.seed, "num_states": args.states, "num_components": args.components,
        "mixing_layers": args.layers, "length": args.length, "p_stay": args.p_stay})
    d = cfg.data
    if cfg.strict and d.num_states < 2 * d.num_components + 1:
        raise IdentifiabilityError(
            f"C = {d.num_states} < 2N + 1 = {2 * d.num_components + 1}: violates identifiability "
            "assumption (ii), C >= NV + 1 with V = 2 (set \"strict\": false to override)")
    bundle = generate_dataset(d)
    out = io.save_dataset(bundle, args.out)
    report = check_assumptions(bundle.true_params, d.num_components, d.num_states)
    print(f"wrote {d.length} x {d.num_components} dataset to {out}")
    print("assumption check on generating parameters:")
    for line in report.lines():
        print("  " + line)
    return bundle


def _train_overrides(args):
    return {"seed": args.seed, "mode": args.mode, "num_states": args.states,
            "num_components": args.components, "layers": args.layers,
            "em_iterations": args.iters, "lr": args.lr, "restarts": args.restarts}


def write_trace(path, trace):
    cols = ["iteration", "free_energy", "loglik", "grad_norm", "seconds"]
    write_rows = [[getattr(r, c) for c in cols] for r in trace.records]
    io.write_csv(path, cols, list(zip(*write_rows)) if write_rows else [[] for _ in cols])


def cmd_train(args):
    data = io.load_observations(args.data)
    init = adam = None
    start = 0
    if args.checkpoint:
        ckpt = io.load_checkpoint(args.checkpoint)
        init = io.checkpoint_params(ckpt)
        adam = io.checkpoint_adam(ckpt)
        start = ckpt["iteration"]
        if args.config is None:
            base = dict(ckpt["config"])
            base.update({k: v for k, v in _train_overrides(args).items() if v is not None})
            config = _build(TrainConfig, base, "train")
        else:
            config = load_run_config(args.config, train_overrides=_train_overrides(args)).train
    else:
        config = load_run_config(args.config, data_overrides={
            "num_states": args.states, "num_components": args.components},
            train_overrides=_train_overrides(args)).train
    if data.shape[1] != config.num_components:
        raise ConfigError(f"data has {data.shape[1]} columns but num_components = "
                          f"{config.num_components}")

    result = train(data, config, init=init, adam=adam, start_iteration=start)
    ckpt = io.make_checkpoint(result.params, config.to_dict(), start + len(result.trace),
                              result.final_loglik, result.adam, config.seed)
    out = Path(args.out)
    io.save_checkpoint(ckpt, out)
    trace_path = Path(args.trace) if args.trace else out.with_suffix(".trace.csv")
    write_trace(trace_path, result.trace)
    print(f"final log-likelihood {result.final_loglik:.6f} after {len(result.trace)} iterations")
    print(f"wrote checkpoint {out} and trace {trace_path}")
    return result


def _params_for(ckpt_path, data):
    params = io.checkpoint_params(io.load_checkpoint(ckpt_path))
    if params.net is None:
        raise ConfigError("checkpoint has no demixing network")
    if data.shape[1] != params.N:
        raise ConfigError(f"dimension mismatch: data N = {data.shape[1]}, checkpoint N = {params.N}")
    return params


def decode(params, data):
    log_em = log_emission_matrix(data, params.net, params.sources)
    path = viterbi(log_em, params.A, params.pi)
    post = e_step(data, params, log_em)
    return path, np.argmax(post.gamma, axis=1)


def cmd_decode(args):
    data = io.load_observations(args.data)
    params = _params_for(args.checkpoint, data)
    path, marg = decode(params, data)
    io.write_csv(args.out, ["viterbi", "gamma_argmax"], [path, marg])
    print(f"wrote {len(path)} decoded states to {args.out}")
    return path, marg


def evaluate(params, bundle):
    s_est = params.net(bundle.observations)
    value, matched, assign = mcc_detail(bundle.sources, s_est)
    path, _ = decode(params, bundle.observations)
    C = max(params.C, bundle.true_params.C)
    report = check_assumptions(params)
    return {
        "mcc": value,
        "matched_abs_corr": [float(v) for v in matched],
        "component_assignment": [int(v) for v in assign.permutation],
        "state_accuracy": state_accuracy(bundle.state_path, path, C),
        "linear_r2": [float(v) for v in linear_r2(bundle.sources, s_est)],
        "assumptions": {
            "passed": report.passed, "full_rank": report.full_rank,
            "irreducible": report.irreducible, "unique_stationary": report.unique_stationary,
            "enough_states": report.enough_states, "lambda_invertible": report.lambda_invertible,
            "lambda_condition": report.lambda_condition if np.isfinite(report.lambda_condition)
            else None,
            "distinct_means": report.distinct_means, "min_mean_gap": report.min_mean_gap,
            "bijective": report.bijective,
        },
        "num_states": params.C,
        "num_components": params.N,
        "length": int(bundle.observations.shape[0]),
    }


def cmd_evaluate(args):
    bundle = io.load_dataset(args.data)
    params = _params_for(args.checkpoint, bundle.observations)
    metrics = evaluate(params, bundle)
    text = json.dumps(metrics, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return metrics


def cmd_benchmark(args):
    n_values = [int(v) for v in args.n_values.split(",")]
    rows = benchmark_logdet(n_values, args.layers, args.reps, args.batch_size)
    header = ["N", "with_logdet_ms", "without_logdet_ms", "with_logdet_std_ms",
              "without_logdet_std_ms", "ratio"]
    cols = [[r.N for r in rows], [r.with_logdet_ms for r in rows],
            [r.without_logdet_ms for r in rows], [r.with_logdet_std_ms for r in rows],
            [r.without_logdet_std_ms for r in rows], [r.ratio for r in rows]]
    if args.out:
        io.write_csv(args.out, header, cols)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    for row in zip(*cols):
        w.writerow([f"{v:.4f}" if isinstance(v, float) else v for v in row])
    return rows


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = argparse.ArgumentParser(prog="hmm-nica",
                                     description="Hidden Markov nonlinear ICA toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--states", type=int, help="number of hidden states C")
        p.add_argument("--components", type=int, help="number of components N")
        p.add_argument("--layers", type=int, help="network depth L")

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--length", type=int, help="sequence length T")
    p.add_argument("--p-stay", type=float, dest="p_stay")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit the model by EM")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory or observations CSV")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--trace", help="trace CSV path (default: <out>.trace.csv)")
    p.add_argument("--mode", choices=["full", "subchain"])
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--restarts", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="Viterbi and posterior-argmax state paths")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", help="recovery metrics against ground truth")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory with ground truth")
    p.add_argument("--out", help="metrics JSON path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="time gradients with and without the log-det term")
    p.add_argument("--n-values", default="5,20,50", dest="n_values")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=1, dest="batch_size",
                   help="observations per gradient evaluation (default: 1, per-sample cost)")
    p.add_argument("--out", help="timing CSV path")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except TrainingError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, IdentifiabilityError, io.FormatError, FileNotFoundError,
            ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
