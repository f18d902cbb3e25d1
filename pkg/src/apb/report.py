"""Cross-run comparison: curve alignment on an env-step grid, seed statistics and verdict lines."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import StructuralError
from .meta import mean_ci
from .records import read_json, read_metrics


@dataclass
class SeedRun:
    family: str
    method: str
    protocol: str
    seed: int
    final_return: float
    outcome: str
    rows: list
    path: Path


def load_runs(run_dirs):
    """Every per-seed result (``result.json`` next to ``metrics.csv``) under the given directories."""
    runs = []
    for d in map(Path, run_dirs):
        if not d.is_dir():
            raise StructuralError(f"{d} is not a run directory")
        for res in sorted(d.glob("*/result.json")):
            info = read_json(res)
            metrics = res.parent / "metrics.csv"
            rows = read_metrics(metrics) if metrics.exists() else []
            runs.append(SeedRun(info["family"], info["method"], info.get("protocol", "-"), int(info["seed"]),
                                float(info["final_return"]), info["outcome"], rows, res.parent))
    completed = [r for r in runs if r.outcome == "completed"]
    if not completed:
        raise StructuralError(f"no completed runs found in {[str(d) for d in run_dirs]}")
    return completed


def resample(rows, grid):
    """Episode returns against env steps, linearly interpolated onto ``grid`` (held flat past the end)."""
    x = np.array([r["env_steps"] for r in rows], dtype=float)
    y = np.array([r["return"] for r in rows], dtype=float)
    return np.interp(grid, x, y)


def aligned_curves(runs, n_points=50):
    ends = [r.rows[-1]["env_steps"] for r in runs if r.rows]
    if not ends:
        return np.zeros(0), {}
    grid = np.linspace(min(r.rows[0]["env_steps"] for r in runs if r.rows), min(ends), n_points)
    groups = defaultdict(list)
    for r in runs:
        if r.rows:
            groups[(r.family, r.method, r.protocol)].append(resample(r.rows, grid))
    return grid, {k: (np.mean(v, axis=0), np.std(v, axis=0)) for k, v in groups.items()}


def summarize(runs):
    """One row per (family, method, protocol): mean, std and 95% CI of final returns over seeds."""
    groups = defaultdict(list)
    for r in runs:
        groups[(r.family, r.method, r.protocol)].append(r.final_return)
    out = []
    for (family, method, protocol), vals in sorted(groups.items()):
        ci = mean_ci(vals)
        out.append({"family": family, "method": method, "protocol": protocol, "n": len(vals), "mean": ci.mean,
                    "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
                    "ci_low": ci.ci_low, "ci_high": ci.ci_high})
    return out


def best_variants(summary):
    """Per (family, method), the exploration protocol with the higher mean."""
    best = {}
    for row in summary:
        key = (row["family"], row["method"])
        if key not in best or row["mean"] > best[key]["mean"]:
            best[key] = row
    return best


def verdicts(summary, candidate="apb", reference="baseline"):
    """``candidate >= reference`` per family, each method at its better protocol."""
    best = best_variants(summary)
    families = sorted({f for f, _ in best})
    methods = {m for _, m in best}
    if len(methods) > 1:
        lonely = [f for f in families if len({m for g, m in best if g == f}) < 2]
        if lonely:
            raise StructuralError(f"families {lonely} have runs for only one method; cannot pair them")
    lines = []
    for f in families:
        a, b = best.get((f, candidate)), best.get((f, reference))
        if a is None or b is None:
            continue
        ok = a["mean"] >= b["mean"]
        lines.append(f"{f}: {candidate}[{a['protocol']}] {a['mean']:.3f} {'>=' if ok else '<'} "
                     f"{reference}[{b['protocol']}] {b['mean']:.3f} -> {'PASS' if ok else 'FAIL'}")
    return lines


def format_summary(summary):
    lines = [f"{'family':<11} {'method':<12} {'protocol':<10} {'n':>3} {'mean':>10} {'std':>9} {'95% CI':>22}"]
    for r in summary:
        lines.append(f"{r['family']:<11} {r['method']:<12} {r['protocol']:<10} {r['n']:>3} {r['mean']:>10.3f} "
                     f"{r['std']:>9.3f}   [{r['ci_low']:.3f}, {r['ci_high']:.3f}]")
    return "\n".join(lines)


def write_summary_csv(path, summary):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["family", "method", "protocol", "n", "mean", "std", "ci_low", "ci_high"])
        w.writeheader()
        for row in summary:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return Path(path)


def build_report(run_dirs, candidate="apb", reference="baseline"):
    runs = load_runs(run_dirs)
    summary = summarize(runs)
    text = format_summary(summary)
    lines = verdicts(summary, candidate, reference)
    if lines:
        text += "\n\n" + "\n".join(lines)
    return summary, lines, text
