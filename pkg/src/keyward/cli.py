"""``keyward <subcommand> [--config FILE] [--set key=value ...]``

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as E
from .errors import ConfigError
from .keys import save_keys
from .protocol import RunLog

log = logging.getLogger("keyward")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def read_config(path) -> dict:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def apply_overrides(data: dict, pairs: list[str]) -> dict:
    """Apply ``key=value`` pairs; dotted keys address nested objects, values parse as JSON when they can."""
    out = json.loads(json.dumps(data))
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set {pair!r}: expected key=value")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        *parents, leaf = key.split(".")
        node = out
        for name in parents:
            node = node.setdefault(name, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {name!r} is not an object")
        node[leaf] = value
    return out


def resolve(args) -> E.ExperimentConfig:
    data = read_config(args.config) if args.config else {}
    data = apply_overrides(data, args.set or [])
    if data.get("experiment", args.command) != args.command:
        raise ConfigError(f"experiment: config says {data['experiment']!r} but subcommand is {args.command!r}")
    data["experiment"] = args.command
    if not data.get("out_dir"):
        data["out_dir"] = os.environ.get("KEYWARD_OUT") or str(Path("runs") / args.command)
    return E.ExperimentConfig.from_dict(data).validate()


def _write_csv(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _publish(out: Path, runlog: RunLog, tag: str = "") -> None:
    kdir = out / "keys"
    kdir.mkdir(exist_ok=True)
    by_owner: dict = {}
    for k in runlog.published_keys:
        by_owner.setdefault(k.owner, []).append(k)
    for owner, ks in by_owner.items():
        save_keys(kdir / f"{tag}{owner}.keys", ks)


# ---------------------------------------------------------------------------
# subcommands; each returns (headline_name, headline_value, details)


def cmd_collab(cfg, out):
    results = [E.run_collab(cfg, s) for s in cfg.run_seeds()]
    first = results[0]
    first["runlog"].to_csv(out / "metrics.csv")
    _publish(out, first["runlog"])
    per_seed = [dict(seed=s, mpa=r["mpa"], centralized_acc=r["centralized_acc"], first_round_ge_0_9=r["best_round"])
                for s, r in zip(cfg.run_seeds(), results)]
    _write_csv(out / "collab.csv", per_seed)
    mpa = float(np.mean([r["mpa"] for r in results]))
    return "mpa", mpa, dict(per_seed=per_seed, mpa_curve=first["runlog"].mpa,
                            centralized_acc=float(np.mean([r["centralized_acc"] for r in results])))


def _attack_details(rep: E.AttackReport) -> dict:
    return dict(regime=rep.regime, delta=rep.delta, seed=rep.seed, target_class=rep.target_class,
                final_score=rep.final_score, run_score=rep.run_score, honest_mpa=rep.honest_mpa,
                oracle_accuracy=rep.oracle_accuracy)


def cmd_attack(cfg, out):
    if cfg.regime == "delta_key" and len(cfg.deltas) > 1:
        sweep = E.delta_sweep(cfg)
        _write_csv(out / "delta_sweep.csv", sweep["rows"])
        RunLog().to_csv(out / "metrics.csv")
        curve = {str(k): v for k, v in sweep["curve"].items()}
        return "crossover_delta", sweep["crossover"], dict(curve=curve, rows=sweep["rows"])
    reports = [E.run_attack(cfg, seed=s) for s in cfg.run_seeds()]
    first = reports[0]
    first.runlog.to_csv(out / "metrics.csv")
    _publish(out, first.runlog)
    train, _ = E.load_data(cfg, first.seed)
    E.dump_samples(out / "samples", first.regime, first.samples, train.image_shape)
    _write_csv(out / "attack.csv", [
        dict(seed=r.seed, epoch=i + 1, score=v) for r in reports for i, v in enumerate(r.scores)
    ])
    score = float(np.mean([r.final_score for r in reports]))
    return "oracle_score", score, dict(runs=[_attack_details(r) for r in reports])


def cmd_key_stats(cfg, out):
    reports = E.key_stats_ladder(cfg)
    rows = [dict(d_key=r.d_key, distribution=r.distribution, n_vectors=r.n_vectors, n_repeats=r.n_repeats,
                 max_of_max_dot=r.max_of_max_dot, mean_of_max_dot=float(np.mean(r.per_repeat_max))) for r in reports]
    _write_csv(out / "key_stats.csv", rows)
    RunLog().to_csv(out / "metrics.csv")
    top = max(r.d_key for r in reports)
    worst = max(r.max_of_max_dot for r in reports if r.d_key == top)
    return f"max_dot_at_d{top}", worst, dict(rows=rows)


def cmd_softmax_oracle(cfg, out):
    rows = E.softmax_oracle_check(cfg)
    _write_csv(out / "softmax_oracle.csv", rows)
    RunLog().to_csv(out / "metrics.csv")
    return "max_rel_err", max(r["rel_err"] for r in rows), dict(rows=rows)


def cmd_shared_class(cfg, out):
    rep = E.shared_class_sim(cfg.d_key, cfg.n_trials, np.random.default_rng(cfg.seed), cfg.n_fresh)
    rows = [dict(trial=i, dot_i=a, dot_j=b, fresh_max_abs=c, steps=int(s))
            for i, (a, b, c, s) in enumerate(zip(rep.dots_i, rep.dots_j, rep.fresh_max_abs, rep.steps))]
    _write_csv(out / "shared_class.csv", rows)
    details = dict(mean_dot_i=rep.mean_dot_i, mean_dot_j=rep.mean_dot_j,
                   mean_fresh_max_abs=rep.mean_fresh_max_abs)
    if cfg.shared_training:
        tr = E.shared_class_training(cfg)
        tr["runlog"].to_csv(out / "metrics.csv")
        _publish(out, tr["runlog"])
        details.update(training_mpa=tr["mpa"], shared_class_acc=tr["shared_class_acc"])
    else:
        RunLog().to_csv(out / "metrics.csv")
    return "mean_dot", 0.5 * (rep.mean_dot_i + rep.mean_dot_j), details


def cmd_grad_check(cfg, out):
    res = E.grad_check_suite(cfg.n_instances, cfg.seed)
    _write_csv(out / "grad_check.csv", [dict(category=k, max_rel_err=v) for k, v in res.items()])
    RunLog().to_csv(out / "metrics.csv")
    return "max_rel_err", max(res.values()), res


def cmd_loss_compare(cfg, out):
    res = E.loss_compare(cfg)
    _write_csv(out / "loss_compare.csv", [res])
    RunLog().to_csv(out / "metrics.csv")
    return "accuracy_gap", res["gap"], res


COMMANDS = {
    "collab": cmd_collab,
    "attack": cmd_attack,
    "key-stats": cmd_key_stats,
    "softmax-oracle": cmd_softmax_oracle,
    "shared-class": cmd_shared_class,
    "grad-check": cmd_grad_check,
    "loss-compare": cmd_loss_compare,
}


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return o


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="keyward", description="Key-protected classification experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
    except (ConfigError, OSError) as e:
        print(f"keyward: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    t0 = time.perf_counter()
    try:
        name, value, details = COMMANDS[args.command](cfg, out)
    except ConfigError as e:
        print(f"keyward: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # any failure inside an experiment is a runtime failure
        log.debug("experiment failed", exc_info=True)
        print(f"keyward: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    summary = dict(experiment=args.command, seed=cfg.seed, headline_name=name,
                   headline_value=None if value is None else float(value),
                   runtime_s=round(time.perf_counter() - t0, 3), details=_jsonable(details))
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{args.command}: {name} = {value}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
