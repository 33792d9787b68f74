"""Command-line entry point: ``omac {gen-data,train,eval,verify,ablate}``.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 input or
artifact error. Every command that writes files also writes a manifest that
records the flags, the config and a sha256 of each artifact.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset as ds
from .cvf import CvfModel, Variant
from .dataset import DatasetFormatError, DatasetValidationError
from .env import make_env
from .numcore import dumps_checkpoint
from .suites import GRID_ENV, SUITES
from .trainer import (PRESETS, FingerprintMismatchError, PolicyModel, TrainConfig,
                      TrainingDivergedError, evaluate, metrics_csv, run)

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_INPUT = 0, 1, 2, 3

DEFAULT_ENVS = {
    "matrix": {"kind": "matrix", "payoff": [[1.0, 0.0], [0.0, 2.0]]},
    "grid": GRID_ENV,
}


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, config, artifacts, seed=None, dataset_hash=None,
                   started=None, extra=None) -> Path:
    """Manifest JSON next to the artifacts. Wall-clock is the only non-deterministic field."""
    path = Path(path)
    payload = {
        "command": command,
        "config": config,
        "seed": seed,
        "dataset_hash": dataset_hash,
        "artifacts": {str(Path(a).name): {"path": str(Path(a).resolve()), "sha256": sha256_file(a)}
                      for a in artifacts},
        "wall_clock_seconds": None if started is None else round(time.perf_counter() - started, 3),
    }
    if extra:
        payload.update(extra)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def check_manifest(path) -> list:
    """Re-hash every artifact a manifest lists. Returns a list of problems."""
    payload = json.loads(Path(path).read_text())
    problems = []
    for name, entry in payload.get("artifacts", {}).items():
        p = Path(entry["path"])
        if not p.exists():
            problems.append(f"{name}: missing ({p})")
        elif sha256_file(p) != entry["sha256"]:
            problems.append(f"{name}: hash mismatch")
    return problems


def _float_in(lo, hi, name, lo_open=True, hi_open=True):
    def parse(text):
        try:
            x = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number, got {text!r}")
        ok_lo = x > lo if lo_open else x >= lo
        ok_hi = x < hi if hi_open else x <= hi
        if not (ok_lo and ok_hi and np.isfinite(x)):
            lb, rb = "(" if lo_open else "[", ")" if hi_open else "]"
            raise argparse.ArgumentTypeError(f"{name} must lie in {lb}{lo}, {hi}{rb}, got {x}")
        return x
    return parse


def _nonneg_int(text):
    try:
        x = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if x < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {x}")
    return x


def _positive_int(text):
    x = _nonneg_int(text)
    if x == 0:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return x


def _csv_list(kind):
    def parse(text):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if not items:
            raise argparse.ArgumentTypeError("empty list")
        return [kind(t) for t in items]
    return parse


def _variant(text):
    try:
        return Variant.parse(text).value
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


# gen-data


def cmd_gen_data(args) -> int:
    started = time.perf_counter()
    config = dict(DEFAULT_ENVS[args.env])
    if args.env_config:
        config = _load_json_arg(args.env_config)
        if config.get("kind") != args.env:
            raise UsageError(f"--env-config kind {config.get('kind')!r} does not match --env {args.env}")
    env = make_env(config)
    data = ds.generate(env, args.tier, args.episodes, args.seed)
    out = Path(args.out)
    if not out.name.endswith(ds.FILE_SUFFIX):
        out = out.with_name(out.name + ds.FILE_SUFFIX)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(data, out)
    manifest = out.with_name(out.name[:-len(ds.FILE_SUFFIX)] + ".manifest.json")
    write_manifest(manifest, "gen-data", {"env": config, "tier": args.tier,
                                          "episodes": args.episodes}, [out], seed=args.seed,
                   dataset_hash=data.content_hash(), started=started)
    print(json.dumps({"dataset": str(out), "manifest": str(manifest), "episodes": len(data),
                      "steps": data.n_steps, "hash": data.content_hash()}))
    return EXIT_OK


# train


def _config_from_args(args, **extra) -> TrainConfig:
    preset = os.environ.get("OMAC_PRESET", "desk")
    if preset not in PRESETS:
        raise UsageError(f"OMAC_PRESET must be one of {sorted(PRESETS)}, got {preset!r}")
    base = TrainConfig.from_preset(preset).to_dict()
    if getattr(args, "config", None):
        base.update(_load_json_arg(args.config))
    for flag, key in (("tau", "tau"), ("beta", "beta"), ("seed", "seed"), ("variant", "variant"),
                      ("iters_value", "value_iters"), ("iters_policy", "policy_iters"),
                      ("log_interval", "log_interval")):
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    base.update(extra)
    try:
        return TrainConfig(**base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}")


def _load_json_arg(text):
    try:
        if text.lstrip().startswith("{"):
            return json.loads(text)
        return json.loads(Path(text).read_text())
    except FileNotFoundError:
        raise InputError(f"config file not found: {text}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}")


def load_dataset(path) -> ds.OfflineDataset:
    path = Path(path)
    if not path.exists():
        raise InputError(f"dataset not found: {path}")
    try:
        return ds.load(path)
    except (DatasetFormatError, DatasetValidationError) as exc:
        raise InputError(f"bad dataset {path}: {exc}")


def checkpoint_payload(config, env, model, policy, dataset_hash) -> dict:
    return {"format": "omac-checkpoint/1", "config": config.to_dict(),
            "env_config": env.config, "env_fingerprint": env.fingerprint,
            "dataset_hash": dataset_hash, "values": model.to_dict(), "policy": policy.to_dict()}


def train_one(config, data, env, out_dir: Path, command="train", extra=None,
              started=None) -> dict:
    model, policy, metrics = run(config, data, env)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint.json"
    ckpt.write_text(dumps_checkpoint(checkpoint_payload(config, env, model, policy,
                                                        data.content_hash())))
    metrics_path = out_dir / "metrics.csv"
    metrics_path.write_text(metrics_csv(metrics))
    final = [r for r in metrics if r.get("eval_return_mean") is not None]
    summary = {"checkpoint": str(ckpt), "metrics": str(metrics_path),
               "final_return_mean": final[-1]["eval_return_mean"] if final else None,
               "final_return_std": final[-1]["eval_return_std"] if final else None}
    lineage = data.meta.get("lineage", [])
    write_manifest(out_dir / "manifest.json", command, config.to_dict(), [ckpt, metrics_path],
                   seed=config.seed, dataset_hash=data.content_hash(), started=started,
                   extra={"lineage": lineage, "env_fingerprint": env.fingerprint,
                          "summary": summary, **(extra or {})})
    return {**summary, "model": model, "policy": policy}


def cmd_train(args) -> int:
    started = time.perf_counter()
    config = _config_from_args(args)
    data = load_dataset(args.data)
    env = data.env()
    if args.env_config:
        env = make_env(_load_json_arg(args.env_config))
        if env.fingerprint != data.meta.get("fingerprint"):
            raise InputError("dataset fingerprint does not match the given env config "
                             f"({data.meta.get('fingerprint', '?')[:12]} vs {env.fingerprint[:12]})")
    if args.ratio < 1.0:
        data = ds.subsample(data, args.ratio, args.subsample_seed)
    out = Path(args.out)
    result = train_one(config, data, env, out, started=started,
                       extra={"data": str(Path(args.data).resolve()), "ratio": args.ratio})
    print(json.dumps({k: v for k, v in result.items() if k not in ("model", "policy")}))
    return EXIT_OK


# eval


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    try:
        payload = json.loads(path.read_text())
        env = make_env(payload["env_config"])
        policy = PolicyModel.from_dict(payload["policy"])
        model = CvfModel.from_dict(payload["values"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"unreadable checkpoint {path}: {exc}")
    return payload, env, model, policy


def cmd_eval(args) -> int:
    payload, env, _, policy = load_checkpoint(args.checkpoint)
    res = evaluate(policy, env, args.episodes, seed=args.seed)
    out = {"mean": res.mean, "std": res.std, "episodes": res.episodes, "seed": args.seed,
           "returns": res.returns}
    text = json.dumps(out, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# verify


def cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    report = {"suites": [], "manifests": []}
    ok = True
    for manifest in args.manifest or []:
        if not Path(manifest).exists():
            raise InputError(f"manifest not found: {manifest}")
        problems = check_manifest(manifest)
        report["manifests"].append({"manifest": manifest, "problems": problems})
        ok &= not problems
        print(f"[{'PASS' if not problems else 'FAIL'}] manifest {manifest}"
              + "".join(f"\n  {p}" for p in problems))
    for name in names:
        kwargs = {}
        if name == "structure" and args.trials:
            kwargs["n_models"] = args.trials
        if name == "theorem1" and args.seeds:
            kwargs["n_seeds"] = args.seeds
        result = SUITES[name](**kwargs)
        ok &= result.passed
        report["suites"].append(result.to_dict())
        print(result.summary())
        if name == "theorem1":
            for row in result.extra["seed_checks"]:
                print(f"  {row['name']}: {'ok' if row['passed'] else 'off'} ({row['detail']})")
    report["passed"] = bool(ok)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True, default=float) + "\n")
    return EXIT_OK if ok else EXIT_FAILED


# ablate


def weight_correlation(model: CvfModel, transitions, max_samples: int = 2000, seed: int = 0):
    """Sample correlation between ``wv_i(o)`` and the action-average of ``wq_i(o, .)``.

    Joint actions for the average are enumerated when small, otherwise sampled.
    """
    rng = np.random.default_rng(seed)
    n = len(transitions)
    idx = np.sort(rng.choice(n, size=min(n, max_samples), replace=False))
    obs = transitions.obs[idx]
    wv = model.state_weights(obs)
    A, k = model.n_actions, model.n_agents
    if A ** k <= 64:
        joint = np.array(np.meshgrid(*[np.arange(A)] * k, indexing="ij")).reshape(k, -1).T
    else:
        joint = rng.integers(0, A, size=(64, k))
    wq_mean = np.zeros_like(wv)
    for a in joint:
        wq_mean += model.cca_weights(obs, np.broadcast_to(a, (len(obs), k)))[1]
    wq_mean /= len(joint)
    x, y = wv.ravel(), wq_mean.ravel()
    if x.std() == 0 or y.std() == 0:
        corr = float("nan")
    else:
        corr = float(np.corrcoef(x, y)[0, 1])
    return corr, x, y


def cmd_ablate(args) -> int:
    started = time.perf_counter()
    data = load_dataset(args.data)
    env = data.env()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, corr_rows, dump = [], [], []
    # held-out observations for the weight correlation: a fresh dataset of the same env
    held_out = ds.generate(env, data.meta.get("tier", "poor"), args.heldout_episodes,
                           10_000 + int(data.meta.get("seed", 0))).transitions() \
        if args.heldout_episodes > 0 else data.transitions()
    for ratio in args.ratios:
        sub = data if ratio >= 1.0 else ds.subsample(data, ratio, args.subsample_seed)
        for variant in args.variants:
            for tau in args.taus:
                for seed in range(args.seeds):
                    config = _config_from_args(args, variant=variant, tau=tau, seed=seed)
                    model, policy, metrics = run(config, sub, env)
                    final = [r for r in metrics if r.get("eval_return_mean") is not None][-1]
                    rows.append({"variant": variant, "tau": tau, "ratio": ratio, "seed": seed,
                                 "final_return_mean": final["eval_return_mean"],
                                 "final_return_std": final["eval_return_std"],
                                 "dataset_hash": sub.content_hash()})
                    if variant in ("cvf", "no-cca", "maxq"):
                        corr, x, y = weight_correlation(model, held_out, seed=seed)
                        corr_rows.append({"variant": variant, "tau": tau, "ratio": ratio,
                                          "seed": seed, "correlation": corr,
                                          "n_samples": int(x.size)})
                        dump.extend({"variant": variant, "tau": tau, "ratio": ratio, "seed": seed,
                                     "wv": float(a), "wq_mean": float(b)} for a, b in zip(x, y))
                    print(f"{variant} tau={tau:g} ratio={ratio:g} seed={seed}: "
                          f"{final['eval_return_mean']:.3f}", file=sys.stderr)
    key = lambda r: (r["variant"], r["tau"], r["ratio"], r["seed"])  # noqa: E731
    rows.sort(key=key)
    corr_rows.sort(key=key)
    results = out / "ablation.csv"
    _write_csv(results, rows)
    corr_path = out / "weight_correlation.csv"
    _write_csv(corr_path, corr_rows, ["variant", "tau", "ratio", "seed", "correlation", "n_samples"])
    dump_path = out / "weight_samples.csv"
    _write_csv(dump_path, dump, ["variant", "tau", "ratio", "seed", "wv", "wq_mean"])
    groups = {}
    for r in rows:
        groups.setdefault((r["variant"], r["tau"], r["ratio"]), []).append(r["final_return_mean"])
    summary = [{"variant": v, "tau": t, "ratio": q, "mean": float(np.mean(x)),
                "std": float(np.std(x)), "seeds": len(x)} for (v, t, q), x in sorted(groups.items())]
    pooled = [c["correlation"] for c in corr_rows if np.isfinite(c["correlation"])]
    write_manifest(out / "manifest.json", "ablate",
                   {"variants": args.variants, "taus": args.taus, "ratios": args.ratios,
                    "seeds": args.seeds, "base": _config_from_args(args).to_dict()},
                   [results, corr_path, dump_path], dataset_hash=data.content_hash(),
                   started=started,
                   extra={"summary": summary,
                          "weight_correlation": {"mean": float(np.mean(pooled)) if pooled else None,
                                                 "runs": len(pooled),
                                                 "samples_per_run": corr_rows[0]["n_samples"]
                                                 if corr_rows else 0}})
    print(json.dumps({"results": str(results), "summary": summary}))
    return EXIT_OK


def _write_csv(path, rows, fields=None):
    fields = fields or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    Path(path).write_text(buf.getvalue())


# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="omac", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate an offline dataset")
    g.add_argument("--env", choices=sorted(DEFAULT_ENVS), required=True)
    g.add_argument("--tier", choices=sorted(ds.TIER_EPSILON), required=True)
    g.add_argument("--episodes", type=_nonneg_int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--env-config", help="JSON (inline or file) overriding the default env")
    g.set_defaults(func=cmd_gen_data)

    def train_flags(q):
        q.add_argument("--data", required=True)
        q.add_argument("--tau", type=_float_in(0.0, 1.0, "--tau"))
        q.add_argument("--beta", type=_float_in(0.0, np.inf, "--beta"))
        q.add_argument("--iters-value", type=_nonneg_int)
        q.add_argument("--iters-policy", type=_nonneg_int)
        q.add_argument("--log-interval", type=_positive_int)
        q.add_argument("--config", help="TrainConfig fields as JSON (inline or file)")
        q.add_argument("--subsample-seed", type=int, default=0)
        q.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train values then policies on a dataset")
    train_flags(t)
    t.add_argument("--variant", type=_variant, default=None)
    t.add_argument("--seed", type=int)
    t.add_argument("--ratio", type=_float_in(0.0, 1.0, "--ratio", hi_open=False), default=1.0)
    t.add_argument("--env-config", help="env JSON the dataset must have been generated from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint with decentralized greedy execution")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=_positive_int, default=32)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run property and oracle suites")
    v.add_argument("--suite", choices=[*SUITES, "all"], default="all")
    v.add_argument("--manifest", action="append", help="re-hash the artifacts of a manifest")
    v.add_argument("--trials", type=_positive_int, help="models for the structure suite")
    v.add_argument("--seeds", type=_positive_int, help="seeds for the theorem1 suite")
    v.add_argument("--out", help="write the full report as JSON")
    v.set_defaults(func=cmd_verify)

    a = sub.add_parser("ablate", help="cross-product of variants, taus and ratios over seeds")
    train_flags(a)
    a.add_argument("--seeds", type=_positive_int, default=5)
    a.add_argument("--variants", type=_csv_list(_variant), default=["cvf", "no-cca", "linear"])
    a.add_argument("--taus", type=_csv_list(_float_in(0.0, 1.0, "tau")), default=[0.7])
    a.add_argument("--ratios", type=_csv_list(_float_in(0.0, 1.0, "ratio", hi_open=False)),
                   default=[1.0])
    a.add_argument("--heldout-episodes", type=_nonneg_int, default=100)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"omac {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, FingerprintMismatchError) as exc:
        print(f"omac {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingDivergedError as exc:
        print(f"omac {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
