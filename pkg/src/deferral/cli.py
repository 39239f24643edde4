"""Command-line entry point: ``run``, ``verify`` and ``gen-data``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .data import GaussianMixtureConfig, gen_gaussian_mixture, gen_multiclass_blobs, save_dataset_csv, write_manifest
from .evaluation import CURVE_HEADER
from .experiments import ConfigError, ExperimentConfig, ExperimentFailed, run
from .experts import ExpertSpec, expert_predict_batch, group1_bayes_expert

log = logging.getLogger("deferral")

GEN_KEYS = {"kind", "seed", "d", "n_train", "n_test", "K", "expert", "expert_k", "expert_p", "expert_q",
            "output_dir"}


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None


def _attach_log(outdir: Path) -> logging.Handler:
    handler = logging.FileHandler(outdir / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def write_results(cfg: ExperimentConfig, result: dict, outdir: Path) -> None:
    """``results.json`` (sorted keys, no timestamp) and ``curves.csv``."""
    payload = {"config": cfg.__dict__, "summary": result["summary"]}
    with open(outdir / "results.json", "w") as fh:
        json.dump(_clean(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(outdir / "curves.csv", "w") as fh:
        fh.write(",".join(CURVE_HEADER) + "\n")
        for r in result["rows"]:
            fh.write(f"{r[0]},{r[1]},{float(r[2])!r},{r[3]},{float(r[4])!r},{int(r[5])},{int(r[6])}\n")


def cmd_run(config_path: str, output_dir=None) -> int:
    cfg = ExperimentConfig.from_dict(_load_json(config_path))
    outdir = Path(output_dir or cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    handler = _attach_log(outdir)
    try:
        log.info("running %s with %d trial(s)", cfg.kind, cfg.trials)
        try:
            result = run(cfg)
        except ExperimentFailed as exc:
            print(f"error: {exc} (see {outdir / 'run.log'})", file=sys.stderr)
            return 1
        write_results(cfg, result, outdir)
        log.info("wrote %s", outdir / "results.json")
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()
    print(f"results written to {outdir}")
    return 0


def cmd_verify(grad_trials: int = 1000) -> int:
    from .verify import run_verification_suite

    checks = run_verification_suite(grad_trials=grad_trials)
    failed = [c.name for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return 1 if failed else 0


def cmd_gen_data(config_path: str, output_dir=None) -> int:
    raw = _load_json(config_path)
    for key in raw:
        if key not in GEN_KEYS:
            raise ConfigError(f"{key}: unknown config key")
    kind = raw.get("kind", "gaussian_mixture")
    seed = int(raw.get("seed", 0))
    outdir = Path(output_dir or raw.get("output_dir", "data"))
    outdir.mkdir(parents=True, exist_ok=True)
    if kind == "gaussian_mixture":
        train, test = gen_gaussian_mixture(GaussianMixtureConfig(
            d=int(raw.get("d", 10)), n_train=int(raw.get("n_train", 1000)),
            n_test=int(raw.get("n_test", 1000)), seed=seed))
        expert = raw.get("expert", "group1_bayes")
        if expert == "group1_bayes":
            spec = group1_bayes_expert(train.info["params"])
        else:
            spec = ExpertSpec("group_pq", K=2, p=float(raw.get("expert_p", 0.95)), q=float(raw.get("expert_q", 0.55)))
    elif kind == "multiclass_blobs":
        rng = np.random.default_rng(seed)
        K, d = int(raw.get("K", 10)), int(raw.get("d", 10))
        train, centers = gen_multiclass_blobs(int(raw.get("n_train", 1000)), K, d, rng)
        test, _ = gen_multiclass_blobs(int(raw.get("n_test", 1000)), K, d, rng, centers=centers)
        spec = ExpertSpec("k_perfect", K=K, k=int(raw.get("expert_k", K // 2)))
    else:
        raise ConfigError(f"kind: unknown data kind {kind!r}")
    rng = np.random.default_rng(seed + 1)
    for name, part in (("train", train), ("test", test)):
        part = part.with_expert(expert_predict_batch(spec, part, rng))
        schema = save_dataset_csv(part, outdir / f"{name}.csv")
        write_manifest(part, outdir / f"{name}.manifest.json", schema, seed)
    print(f"datasets written to {outdir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deferral", description="Learning-to-defer experiments and checks.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment described by a JSON config")
    r.add_argument("config")
    r.add_argument("--output-dir", default=None, help="overrides output_dir from the config")
    v = sub.add_parser("verify", help="run the built-in verification suite")
    v.add_argument("--grad-trials", type=int, default=1000)
    g = sub.add_parser("gen-data", help="write synthetic datasets as CSV")
    g.add_argument("config")
    g.add_argument("--output-dir", default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.output_dir)
        if args.command == "verify":
            return cmd_verify(args.grad_trials)
        return cmd_gen_data(args.config, args.output_dir)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
