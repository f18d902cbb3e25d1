"""``apb`` command line: verify-theory, meta-train, adapt, bc, report.

Each command writes a fresh run directory under the output root (``--output-root``,
else ``$APB_OUTPUT_ROOT``, else ``./runs``) holding the resolved config, a run
manifest, and one subdirectory per seed/method with ``metrics.csv`` and
``result.json``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .envs import FAMILIES, TaskSpec, in_train_support, ood_task
from .errors import ConfigError, StructuralError
from .meta import (AdaptConfig, MetaTrainConfig, adapt, bc_eval, bc_train, collect_demonstrations, meta_train,
                   run_baseline_td3, train_expert)
from .nn import load_checkpoint, save_checkpoint
from .records import new_run_dir, output_root, source_revision, write_json, write_metrics
from .report import build_report, write_summary_csv
from .theory_suite import run_theory_suite, summarize, write_report

log = logging.getLogger("apb")


def _pick(cls, params):
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in params.items() if k in names}


def _start_run(resolved, command, root, label):
    run_dir = new_run_dir(output_root(root or resolved.get("output_dir")), command, label)
    (run_dir / "config.yaml").write_text(cfgmod.dump(resolved))
    manifest = {"run_id": run_dir.name, "command": command, "config_hash": cfgmod.config_hash(resolved),
                "source_revision": source_revision()}
    return run_dir, manifest


def _finish_run(run_dir, manifest, outcomes):
    bad = [o for o in outcomes if o != "completed"]
    manifest["outcome"] = "completed" if not bad else ("diverged" if "diverged" in bad else "aborted")
    write_json(run_dir / "run.json", manifest)


def _seed_dir(run_dir, name):
    d = run_dir / name
    d.mkdir()
    return d


def _summary_table(results):
    """``mean +- std`` over seeds for each (method, protocol)."""
    groups = {}
    for r in results:
        groups.setdefault((r["method"], r["protocol"]), []).append(r["final_return"])
    lines = []
    for (method, protocol), vals in sorted(groups.items()):
        v = np.array(vals, dtype=float)
        ok = v[np.isfinite(v)]
        mean = float(ok.mean()) if ok.size else float("nan")
        std = float(ok.std(ddof=1)) if ok.size > 1 else 0.0
        lines.append(f"{method:<12} {protocol:<10} n={len(vals):<3} {mean:10.3f} +- {std:.3f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# orchestration (callable without argparse)


def run_meta_train(resolved, root=None):
    params = resolved["meta_train"]
    family = params["family"]
    run_dir, manifest = _start_run(resolved, "meta-train", root, family)
    manifest["family"] = family
    outcomes, results = [], []
    for seed in resolved["seeds"]:
        config = MetaTrainConfig(**_pick(MetaTrainConfig, params), seed=seed)
        res = meta_train(config, family)
        d = _seed_dir(run_dir, f"seed{seed}")
        res.save(d / "backbone.npz", {"family": family, "seed": seed})
        rows = [{"episode": c["cycle"], "env_steps": c["env_steps"], "grad_steps": c["grad_steps"],
                 "return": c["return"], "actor_loss": c["actor_loss"], "critic_loss": c["critic_loss"],
                 "reset": 0} for c in res.curve]
        write_metrics(d / "metrics.csv", rows)
        final = float(np.mean(res.final_returns))
        result = {"family": family, "method": "meta-train", "protocol": "action", "seed": seed,
                  "final_return": final, "per_task_returns": res.final_returns, "cycles": res.cycles,
                  "converged": res.converged, "outcome": res.outcome}
        write_json(d / "result.json", result)
        outcomes.append(res.outcome)
        results.append(result)
    (run_dir / "summary.txt").write_text(_summary_table(results) + "\n")
    _finish_run(run_dir, manifest, outcomes)
    return run_dir


def _task_from(params):
    family = params["family"]
    if params.get("parameter") is not None:
        p = params["parameter"]
        p = tuple(p) if isinstance(p, (list, tuple)) else float(p)
        return TaskSpec(family, p, is_ood=not in_train_support(family, p))
    if params.get("ood", True):
        return ood_task(family)
    raise ConfigError("adapt needs either ood: true or an explicit parameter", keys=["adapt.parameter"])


def _backbone_for(path, seed):
    """A checkpoint file, or a meta-train run directory (uses ``seed<k>/backbone.npz`` when present)."""
    if path is None:
        raise ConfigError("method apb needs a backbone checkpoint (adapt.backbone / --backbone)",
                          keys=["adapt.backbone"])
    p = Path(path)
    if p.is_dir():
        candidates = [p / f"seed{seed}" / "backbone.npz"] + sorted(p.glob("seed*/backbone.npz"))
        found = [c for c in candidates if c.exists()]
        if not found:
            raise StructuralError(f"no backbone checkpoint under {p}")
        p = found[0]
    return load_checkpoint(p)


def _adapt_config(params, protocol, seed):
    sigma = params["param_sigma"] if protocol == "parameter" else params["action_sigma"]
    kw = _pick(AdaptConfig, params)
    kw.update(protocol=protocol, sigma=sigma, seed=seed)
    return AdaptConfig(**kw)


def run_adapt(resolved, root=None):
    params = resolved["adapt"]
    task = _task_from(params)
    method = params["method"]
    methods = {"both": ["apb", "baseline"], "apb": ["apb"], "baseline": ["baseline"]}.get(method)
    if methods is None:
        raise ConfigError(f"unknown method {method!r}", keys=["adapt.method"])
    run_dir, manifest = _start_run(resolved, "adapt", root, task.family)
    manifest.update(family=task.family, task=task.to_dict())
    outcomes, results = [], []
    for seed in resolved["seeds"]:
        for protocol in params["protocols"]:
            config = _adapt_config(params, protocol, seed)
            for m in methods:
                if m == "baseline":
                    res = run_baseline_td3(task, config)
                else:
                    backbone = None if config.random_init_backbone else _backbone_for(params["backbone"], seed)
                    res = adapt(backbone, task, config)
                d = _seed_dir(run_dir, f"{res.method}-{protocol}-seed{seed}")
                write_metrics(d / "metrics.csv", res.rows)
                save_checkpoint(d / "actor.npz", res.actor.state_arrays(), {"task": task.to_dict(), "seed": seed})
                result = {"family": task.family, "method": res.method, "protocol": protocol, "seed": seed,
                          "final_return": res.final_return, "env_steps": res.env_steps,
                          "grad_steps": res.grad_steps, "backbone_constant": res.backbone_constant,
                          "outcome": res.outcome}
                write_json(d / "result.json", result)
                outcomes.append(res.outcome)
                results.append(result)
    (run_dir / "summary.txt").write_text(_summary_table(results) + "\n")
    _finish_run(run_dir, manifest, outcomes)
    return run_dir


def run_bc(resolved, root=None):
    params = resolved["bc"]
    task = ood_task(params["family"])
    run_dir, manifest = _start_run(resolved, "bc", root, task.family)
    manifest.update(family=task.family, task=task.to_dict())
    expert_cfg = AdaptConfig(protocol="action", sigma=0.1, reset_every=10 ** 9, init_scale=params["init_scale"],
                             n_updates=params["expert_updates"], batch_size=params["expert_batch_size"],
                             total_episodes=params["expert_episodes"], actor_lr=params["expert_lr"],
                             critic_lr=params["expert_critic_lr"], seed=resolved["seeds"][0])
    expert, expert_best = train_expert(task, expert_cfg)
    save_checkpoint(run_dir / "expert.npz", expert.state_arrays(), {"task": task.to_dict(), "best": expert_best})
    data = collect_demonstrations(expert, task, params["n_pairs"], params["h_demo"], seed=resolved["seeds"][0])
    data.save(run_dir / "dataset")
    ref = bc_eval(expert, task, params["h_eval"], params["h_demo"], params["eval_seeds"])
    manifest["expert_reference"] = {"mean": ref.mean, "ci": [ref.ci_low, ref.ci_high]}
    results = []
    for seed in resolved["seeds"]:
        backbone = _backbone_for(params["backbone"], seed)
        for mode in ("apb-frozen", "full-scratch"):
            fit = bc_train(data, mode, params["lr"], params["batch_size"], params["n_steps"], seed,
                           backbone if mode == "apb-frozen" else None, params["init_scale"])
            ev = bc_eval(fit.actor, task, params["h_eval"], params["h_demo"], params["eval_seeds"], seed=seed)
            d = _seed_dir(run_dir, f"{mode}-seed{seed}")
            result = {"family": task.family, "method": mode, "protocol": "-", "seed": seed,
                      "final_return": ev.mean, "ci": [ev.ci_low, ev.ci_high], "returns": ev.returns,
                      "final_loss": fit.final_loss, "outcome": "completed"}
            write_json(d / "result.json", result)
            save_checkpoint(d / "actor.npz", fit.actor.state_arrays(), {"task": task.to_dict(), "seed": seed})
            results.append(result)
    (run_dir / "summary.txt").write_text(_summary_table(results) + "\n")
    _finish_run(run_dir, manifest, ["completed"])
    return run_dir


# ---------------------------------------------------------------------------
# argparse front end


def _parser():
    p = argparse.ArgumentParser(prog="apb", description="Adaptive policy backbone experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, family=True):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--override", nargs="*", default=[], metavar="KEY=VALUE")
        sp.add_argument("--seeds", type=int, nargs="+")
        sp.add_argument("--output-root")
        if family:
            sp.add_argument("--family", choices=FAMILIES)

    t = sub.add_parser("verify-theory", help="run the exact tabular theory suite")
    t.add_argument("scenarios", nargs="*", help="scenario files (default: built-in suite)")
    t.add_argument("--seed", type=int)
    t.add_argument("--trials", type=int)
    t.add_argument("--report", help="JSONL report path (default: <run dir>/theory.jsonl)")
    common(t, family=False)

    m = sub.add_parser("meta-train", help="meta-train a shared backbone")
    common(m)

    a = sub.add_parser("adapt", help="adapt head/tail around a frozen backbone (and/or run the TD3 baseline)")
    common(a)
    a.add_argument("--backbone", help="checkpoint file or meta-train run directory")
    a.add_argument("--ood", action="store_true", help="use the family's built-in OOD task")
    a.add_argument("--parameter", type=float, help="explicit task parameter instead of the OOD task")
    a.add_argument("--method", choices=["apb", "baseline", "both"])
    a.add_argument("--protocol", choices=["action", "parameter"], nargs="+")
    a.add_argument("--random-init-backbone", action="store_true")

    b = sub.add_parser("bc", help="behaviour-cloning extrapolation study on the OOD task")
    common(b)
    b.add_argument("--backbone", help="checkpoint file or meta-train run directory")

    r = sub.add_parser("report", help="compare finished run directories")
    r.add_argument("runs", nargs="+")
    r.add_argument("--csv", help="also write the summary table as CSV")
    return p


def _flag_overrides(args):
    section = cfgmod.COMMAND_SECTIONS[args.command]
    out = []

    def put(key, value):
        out.append(f"{section}.{key}={value}")

    if getattr(args, "family", None):
        put("family", args.family)
    if getattr(args, "backbone", None):
        put("backbone", args.backbone)
    if getattr(args, "ood", False):
        put("ood", "true")
    if getattr(args, "parameter", None) is not None:
        put("parameter", repr(args.parameter))
    if getattr(args, "method", None):
        put("method", args.method)
    if getattr(args, "protocol", None):
        put("protocols", "[" + ",".join(args.protocol) + "]")
    if getattr(args, "random_init_backbone", False):
        put("random_init_backbone", "true")
    if getattr(args, "seed", None) is not None:
        put("seed", args.seed)
    if getattr(args, "trials", None) is not None:
        put("trials", args.trials)
    if args.seeds:
        out.append("seeds=[" + ",".join(map(str, args.seeds)) + "]")
    return out


def _resolve(args):
    user = cfgmod.load_config(args.config)
    return cfgmod.resolve(user, args.command, list(args.override) + _flag_overrides(args))


def cmd_verify_theory(args):
    resolved = _resolve(args)
    params = resolved["theory"]
    run_dir, manifest = _start_run(resolved, "verify-theory", args.output_root, None)
    try:
        records, elapsed = run_theory_suite(params["seed"], params["trials"], params["n_mdps"],
                                            params["n_transport"], args.scenarios or None)
    except (StructuralError, ValueError) as exc:
        manifest["error"] = str(exc)
        _finish_run(run_dir, manifest, ["aborted"])
        print(f"error: {exc}", file=sys.stderr)
        return 2
    report = Path(args.report) if args.report else run_dir / "theory.jsonl"
    write_report(records, report)
    for name, s in summarize(records).items():
        print(f"{name:<24} {s['passed']}/{s['total']} passed, max deviation {s['max_deviation']:.3e}")
    ok = all(r["passed"] for r in records)
    print(f"{'PASS' if ok else 'FAIL'}: {sum(r['passed'] for r in records)}/{len(records)} checks in {elapsed:.2f}s;"
          f" report {report}")
    _finish_run(run_dir, manifest, ["completed" if ok else "aborted"])
    return 0 if ok else 1


def _run_command(fn, args):
    resolved = _resolve(args)
    run_dir = fn(resolved, args.output_root)
    print((run_dir / "summary.txt").read_text(), end="")
    print(f"run directory: {run_dir}")
    return 0


def cmd_report(args):
    summary, lines, text = build_report(args.runs)
    print(text)
    if args.csv:
        write_summary_csv(args.csv, summary)
    return 0


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "verify-theory":
            return cmd_verify_theory(args)
        if args.command == "report":
            return cmd_report(args)
        fn = {"meta-train": run_meta_train, "adapt": run_adapt, "bc": run_bc}[args.command]
        return _run_command(fn, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        for k in exc.keys:
            print(f"  offending key: {k}", file=sys.stderr)
        return 2
    except StructuralError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
