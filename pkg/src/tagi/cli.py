"""tagi command line: train, optimize, attack, rl, oracle.

Configuration is an INI file with one section per subcommand plus an
optional [global] section (seed, output_dir, model_path). Flags override
file values and ``--set key=value`` overrides single keys. The resolved
configuration is written next to the outputs as ``resolved.ini``.

Exit codes: 0 success, 1 internal or numerical failure (including failed
oracle checks), 2 bad usage or input.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import oracles
from .attack import AttackConfig, evaluate_attacks, report_schema
from .data import Dataset, load_csv, load_idx, toy_cubic, train_test_split
from .engine import predict, train_epoch
from .net import Model, NetworkSpec, ObservationModel, init_posterior, load, save
from .optimize import OptimizerConfig, optimize
from .rl import ENVIRONMENTS, RlConfig, make_env, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config schema: key -> (parser, default)


def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _str(s):
    return str(s).strip()


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s):
    s = str(s).strip()
    return tuple(int(v) for v in s.split(",") if v.strip()) if s else ()


def _floats(s):
    return tuple(float(v) for v in str(s).split(",") if v.strip())


def _strs(s):
    return tuple(v.strip() for v in str(s).split(",") if v.strip())


def _alpha(s):
    v = str(s).strip().lower()
    if v in ("none", ""):
        return None
    a = int(v)
    if a not in (1, -1):
        raise ValueError("alpha must be +1, -1 or none")
    return a


def _opt_float(s):
    v = str(s).strip().lower()
    return None if v in ("none", "") else float(v)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


GLOBAL = {
    "seed": (_int, 0),
    "output_dir": (_str, "out"),
    "model_path": (_str, ""),
}

DATA = {
    "dataset": (_str, "toy_cubic"),  # toy_cubic | idx | csv
    "n": (_int, 200),  # toy_cubic sample size
    "noise": (_float, 0.1),  # toy_cubic observation noise std
    "data_seed": (_int, 0),
    "images": (_str, "data/mnist5k/images-idx3-ubyte.gz"),
    "labels": (_str, "data/mnist5k/labels-idx1-ubyte.gz"),
    "csv": (_str, ""),
    "n_train": (_int, 2000),
    "n_test": (_int, 1000),
    "split_seed": (_int, 0),
}

SCHEMA = {
    "train": {
        **DATA,
        "hidden": (_ints, (128, 128, 128)),
        "activations": (_strs, ("tanh", "relu", "relu")),
        "output_activation": (_str, "identity"),
        "sigma_v": (_float, 0.1),
        "epochs": (_int, 5),
        "batch_size": (_int, 1),
        "prior_mean_gain": (_float, 1.0),
        "prior_var_gain": (_float, 0.01),
    },
    "optimize": {
        **DATA,
        "x0_mean": (_floats, (0.25,)),
        "alpha": (_alpha, None),
        "sigma_x0": (_float, 0.01),
        "epochs": (_int, 5),
        "sigma_v": (_float, 0.1),
        "hidden": (_ints, (128, 128, 128)),
        "activations": (_strs, ("tanh", "relu", "relu")),
        "prior_mean_gain": (_float, 1.0),
        "prior_var_gain": (_float, 0.01),
        "early_stop": (_bool, False),
        "tol": (_float, 1e-4),
        "patience": (_int, 5),
    },
    "attack": {
        **DATA,
        "dataset": (_str, "idx"),
        "subset": (_str, "test"),  # test | all
        "sigma_x": (_float, 0.03),
        "max_epochs": (_int, 100),
        "n_images": (_int, 100),
        "early_stop": (_bool, False),
        "patience": (_int, 3),
        "low": (_float, 0.0),
        "high": (_float, 1.0),
    },
    "rl": {
        "env": (_str, "bandit"),
        "horizon": (_int, 64),
        "sigma_v0": (_float, 0.5),
        "decay": (_float, 0.7),
        "decay_every": (_int, 1024),
        "sigma_v_min": (_float, 0.05),
        "gamma": (_float, 0.0),
        "batch": (_int, 16),
        "epochs": (_int, 1),
        "steps": (_int, 20000),
        "policy_hidden": (_ints, (128, 128)),
        "q_hidden": (_ints, (128, 128, 128)),
        "q_activations": (_strs, ("tanh", "relu", "relu")),
        "prior_var_gain": (_float, 0.01),
        "alpha": (_alpha, 1),
        "inner_iterations": (_int, 1),
        "reward_scale": (_float, 1.0),
        "stop_avg": (_opt_float, None),
    },
    "oracle": {
        "suites": (_strs, ("gma_products", "deriv_covariances", "exact_conditioning", "forward",
                           "chain_derivative", "finite_difference", "td_targets", "mutations")),
        "n_sets": (_int, 50),
        "n_samples": (_int, 1_000_000),
        "n_nets": (_int, 20),
        "n_se": (_float, 3.0),
    },
}


@dataclass
class Resolved:
    command: str
    glob: dict
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def to_ini(self) -> str:
        lines = ["[global]"]
        lines += [f"{k} = {_fmt(v)}" for k, v in sorted(self.glob.items())]
        lines += ["", f"[{self.command}]"]
        lines += [f"{k} = {_fmt(v)}" for k, v in sorted(self.values.items())]
        return "\n".join(lines) + "\n"


def resolve(command: str, config_path: str | None, overrides: dict, flag_globals: dict) -> Resolved:
    schema = SCHEMA[command]
    raw_glob: dict = {}
    raw: dict = {}
    if config_path:
        cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
        try:
            with open(config_path) as fh:
                cp.read_file(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {config_path}") from None
        except configparser.Error as exc:
            raise UsageError(f"malformed config: {exc}") from None
        for section in cp.sections():
            if section != "global" and section not in SCHEMA:
                raise UsageError(f"unknown config section [{section}]")
        if cp.has_section("global"):
            raw_glob.update(cp["global"])
        if cp.has_section(command):
            raw.update(cp[command])
    for k, v in overrides.items():
        (raw_glob if k in GLOBAL else raw)[k] = v
    for k, v in flag_globals.items():
        if v is not None:
            raw_glob[k] = v
    for k in raw_glob:
        if k not in GLOBAL:
            raise UsageError(f"unknown key {k!r} in [global]")
    for k in raw:
        if k not in schema:
            raise UsageError(f"unknown key {k!r} for {command}")

    def parse(table, given):
        out = {}
        for k, (fn, default) in table.items():
            if k in given:
                try:
                    out[k] = fn(given[k])
                except ValueError as exc:
                    raise UsageError(f"bad value for {k}: {exc}") from None
            else:
                out[k] = default
        return out

    return Resolved(command, parse(GLOBAL, raw_glob), parse(schema, raw))


# ---------------------------------------------------------------------------
# helpers


def _load_data(cfg: Resolved) -> Dataset:
    kind = cfg["dataset"]
    if kind == "toy_cubic":
        return toy_cubic(cfg["n"], cfg["noise"], seed=cfg["data_seed"])
    if kind == "idx":
        for key in ("images", "labels"):
            if not Path(cfg[key]).is_file():
                raise UsageError(f"dataset file not found: {cfg[key]}")
        return load_idx(cfg["images"], cfg["labels"])
    if kind == "csv":
        if not Path(cfg["csv"]).is_file():
            raise UsageError(f"dataset file not found: {cfg['csv']!r}")
        return load_csv(cfg["csv"])
    raise UsageError(f"unknown dataset {kind!r} (toy_cubic, idx, csv)")


def _split(cfg: Resolved, data: Dataset) -> tuple[Dataset, Dataset | None]:
    if data.kind != "classification":
        return data, None
    return train_test_split(data, cfg["n_train"], cfg["n_test"], seed=cfg["split_seed"])


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)


def _r(v) -> str:
    return repr(float(v))


def _model_path(cfg: Resolved, out: Path) -> Path:
    return Path(cfg.glob["model_path"]) if cfg.glob["model_path"] else out / "model.tagi"


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(cfg: Resolved, out: Path, threads: int) -> int:
    data = _load_data(cfg)
    train_set, test_set = _split(cfg, data)
    if len(train_set) == 0:
        raise UsageError("empty dataset")
    hidden = cfg["hidden"]
    if len(cfg["activations"]) != len(hidden):
        raise UsageError("one activation per hidden layer")
    widths = [train_set.inputs.shape[1], *hidden, train_set.targets.shape[1]]
    spec = NetworkSpec.from_widths(widths, [*cfg["activations"], cfg["output_activation"]])
    seed = cfg.glob["seed"]
    post = init_posterior(spec, seed, mean_gain=cfg["prior_mean_gain"], var_gain=cfg["prior_var_gain"])
    noise = cfg["sigma_v"] ** 2
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=cfg["epochs"])
    rows = []
    for e, s in enumerate(seeds):
        post, log = train_epoch(spec, post, train_set.inputs, train_set.targets, noise, int(s), batch_size=cfg["batch_size"])
        row = [e + 1, _r(log.log_likelihood), _r(log.rmse), log.diagnostics.clamped]
        if test_set is not None:
            m, _ = predict(spec, post, test_set.inputs)
            row.append(_r(np.mean(np.argmax(m, axis=1) == test_set.labels)))
        rows.append(row)
    header = ["epoch", "log_likelihood", "rmse", "clamped"] + (["test_accuracy"] if test_set is not None else [])
    _write_csv(out / "metrics.csv", header, rows)
    meta = {"dataset": cfg["dataset"], "epochs": cfg["epochs"]}
    save(Model(spec, post, ObservationModel(cfg["sigma_v"]), seed, meta), _model_path(cfg, out))
    last = rows[-1] if rows else None
    print(f"trained {cfg['epochs']} epochs; final row {last}")
    return EXIT_OK


def cmd_optimize(cfg: Resolved, out: Path, threads: int) -> int:
    data = _load_data(cfg)
    if data.kind != "regression" or len(data) == 0:
        raise UsageError("optimize needs a non-empty regression dataset")
    oc = OptimizerConfig(
        x0_mean=cfg["x0_mean"],
        alpha=cfg["alpha"],
        sigma_x0=cfg["sigma_x0"],
        epochs=cfg["epochs"],
        seed=cfg.glob["seed"],
        sigma_v=cfg["sigma_v"],
        hidden=cfg["hidden"],
        activations=cfg["activations"],
        prior_mean_gain=cfg["prior_mean_gain"],
        prior_var_gain=cfg["prior_var_gain"],
        early_stop=cfg["early_stop"],
        tol=cfg["tol"],
        patience=cfg["patience"],
    )
    trace = optimize(data, oc)
    trace.to_csv(out / "trace.csv")
    m, v = trace.final_mean, trace.final_var
    print("final x_mean", " ".join(_r(x) for x in m), "x_var", " ".join(_r(x) for x in v))
    return EXIT_OK


def cmd_attack(cfg: Resolved, out: Path, threads: int) -> int:
    import jsonschema

    path = _model_path(cfg, out)
    if not path.is_file():
        raise UsageError(f"model file not found: {path}")
    model = load(path)
    data = _load_data(cfg)
    if len(data) == 0:
        raise UsageError("empty dataset")
    if cfg["subset"] == "test":
        if data.kind != "classification":
            raise UsageError("subset = test needs a classification dataset")
        _, data = _split(cfg, data)
    elif cfg["subset"] != "all":
        raise UsageError(f"subset must be test or all, not {cfg['subset']!r}")
    ac = AttackConfig(
        sigma_x=cfg["sigma_x"],
        max_epochs=cfg["max_epochs"],
        seed=cfg.glob["seed"],
        early_stop=cfg["early_stop"],
        patience=cfg["patience"],
        low=cfg["low"],
        high=cfg["high"],
    )
    report = evaluate_attacks(model, data, ac, n_images=cfg["n_images"], threads=threads)
    doc = report.to_dict()
    jsonschema.validate(doc, report_schema())
    (out / "attack_report.json").write_text(report.to_json())
    print(
        f"clean {report.clean_error:.3f} targeted {report.targeted_error:.3f} "
        f"untargeted {report.untargeted_error:.3f} success {report.targeted_success:.3f} "
        f"linf {report.targeted_linf:.3f}"
    )
    return EXIT_OK


def cmd_rl(cfg: Resolved, out: Path, threads: int) -> int:
    if cfg["env"] not in ENVIRONMENTS:
        raise UsageError(f"unknown environment {cfg['env']!r}; choose from {sorted(ENVIRONMENTS)}")
    keys = [k for k in SCHEMA["rl"] if k != "env"]
    rc = RlConfig(seed=cfg.glob["seed"], **{k: cfg[k] for k in keys})
    trace, _ = train(make_env(cfg["env"], cfg.glob["seed"]), rc)
    trace.to_csv(out / "rewards.csv")
    ma = np.asarray(trace.moving_avg_100, dtype=float)
    best = float(np.nanmax(ma)) if np.any(np.isfinite(ma)) else float("nan")
    print(f"{len(trace.reward)} steps, {len(trace.episode_returns)} episodes, best 100-episode average {best:.4f}")
    return EXIT_OK


def _finite_difference_suite(seed: int) -> oracles.SuiteResult:
    from .engine import fit

    data = toy_cubic(200, 0.1, seed=seed)
    spec = NetworkSpec.from_widths([1, 128, 128, 128, 1], ["tanh", "relu", "relu", "identity"])
    post = init_posterior(spec, seed, var_gain=0.01)
    post, _ = fit(spec, post, data.inputs, data.targets, 0.01, epochs=5, seed=seed)
    res = oracles.SuiteResult("finite_difference")
    grid = np.linspace(-1.8, 1.8, 50)
    for exclude in (0.05, 0.002):
        checks, _ = oracles.finite_difference_check(spec, post, grid, exclude=exclude)
        for c in checks:
            c.name = f"exclude={exclude} {c.name}"
        res.checks += checks
    return res


def _mutation_suite(seed: int, n_samples: int) -> oracles.SuiteResult:
    """Each deliberately wrong formula must be caught by the sampling suites."""
    res = oracles.SuiteResult("mutations")
    for name in oracles.MUTATIONS:
        ops = oracles.mutated_ops(name)
        suite = oracles.deriv_covariance_suite if name == "deriv_covariances" else oracles.gma_product_suite
        r = suite(n_sets=5, n_samples=n_samples, seed=seed + 100, ops=ops)
        res.checks.append(oracles.Check(f"detects {name}", float(r.n_failed), 1.0, 0.0, r.n_failed > 0))
    return res


def cmd_oracle(cfg: Resolved, out: Path, threads: int) -> int:
    seed = cfg.glob["seed"]
    ns, n_sets, n_se = cfg["n_samples"], cfg["n_sets"], cfg["n_se"]
    runners = {
        "gma_products": lambda: oracles.gma_product_suite(n_sets, ns, seed, n_se),
        "deriv_covariances": lambda: oracles.deriv_covariance_suite(n_sets, ns, seed + 1, n_se),
        "exact_conditioning": lambda: oracles.exact_conditioning_suite(cfg["n_nets"], seed + 2),
        "forward": lambda: oracles.forward_suite(seed=seed + 3),
        "chain_derivative": lambda: oracles.chain_derivative_suite(seed=seed + 4, n_se=n_se),
        "finite_difference": lambda: _finite_difference_suite(seed),
        "td_targets": lambda: oracles.td_suite(seed=seed + 5),
        "mutations": lambda: _mutation_suite(seed, min(ns, 100_000)),
    }
    names = cfg["suites"]
    for n in names:
        if n not in runners:
            raise UsageError(f"unknown suite {n!r}; choose from {sorted(runners)}")
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(lambda n: runners[n](), names))
    report = {"seed": seed, "passed": all(r.passed for r in results), "suites": []}
    for r in results:
        w = r.worst()
        report["suites"].append(
            {
                "name": r.name,
                "passed": bool(r.passed),
                "n_checks": len(r.checks),
                "n_failed": r.n_failed,
                "max_delta": float(max((c.delta for c in r.checks), default=0.0)),
                "worst": None if w is None else {"name": w.name, "delta": float(w.delta), "tolerance": float(w.tolerance)},
                "checks": [
                    {"name": c.name, "passed": bool(c.passed), "value": float(c.value),
                     "reference": float(c.reference), "delta": float(c.delta), "tolerance": float(c.tolerance)}
                    for c in r.checks
                ],
            }
        )
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {len(r.checks) - r.n_failed}/{len(r.checks)}")
    (out / "oracle_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK if report["passed"] else EXIT_FAIL


COMMANDS = {
    "train": cmd_train,
    "optimize": cmd_optimize,
    "attack": cmd_attack,
    "rl": cmd_rl,
    "oracle": cmd_oracle,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tagi", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config")
        s.add_argument("--seed", type=int)
        s.add_argument("--output-dir")
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = resolve(args.command, args.config, overrides, {"seed": args.seed, "output_dir": args.output_dir})
        out = Path(cfg.glob["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved.ini").write_text(cfg.to_ini())
        return COMMANDS[args.command](cfg, out, args.threads)
    except UsageError as exc:
        print(f"tagi: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ArithmeticError as exc:
        print(f"tagi: numerical error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ValueError, OSError) as exc:
        print(f"tagi: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"tagi: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
