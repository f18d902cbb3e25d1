"""Run directories, metric CSV files and run manifests."""
from __future__ import annotations

import csv
import json
import os
import subprocess
import uuid
from pathlib import Path

from .errors import StructuralError

METRICS_SCHEMA = "apb-metrics/1"
COLUMNS = ("episode", "env_steps", "grad_steps", "return", "actor_loss", "critic_loss", "reset")
OUTCOMES = ("completed", "diverged", "aborted")
OUTPUT_ROOT_ENV = "APB_OUTPUT_ROOT"


def output_root(explicit=None):
    return Path(explicit or os.environ.get(OUTPUT_ROOT_ENV) or "runs")


def new_run_dir(root, command, label=None):
    """Create a fresh directory ``<root>/<command>[-label]-<hex>``; never reuses a name."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stem = command if label is None else f"{command}-{label}"
    while True:
        path = root / f"{stem}-{uuid.uuid4().hex[:12]}"
        try:
            path.mkdir()
        except FileExistsError:
            continue
        return path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(path, rows):
    """Write per-episode rows under the versioned schema line; env_steps must not decrease."""
    prev = -1
    for row in rows:
        if row["env_steps"] < prev:
            raise StructuralError(f"env_steps decreases at episode {row['episode']}")
        prev = row["env_steps"]
    path = Path(path)
    if path.exists():
        raise FileExistsError(f"refusing to overwrite {path}")
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {METRICS_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in COLUMNS])
    return path


def read_metrics(path):
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("# schema:"):
            raise StructuralError(f"{path}: missing schema line")
        version = first.split(":", 1)[1].strip()
        if version != METRICS_SCHEMA:
            raise StructuralError(f"{path}: unsupported metrics schema {version!r}")
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise StructuralError(f"{path}: columns {reader.fieldnames} != {list(COLUMNS)}")
        rows = []
        for r in reader:
            rows.append({"episode": int(r["episode"]), "env_steps": int(r["env_steps"]),
                         "grad_steps": int(r["grad_steps"]), "return": float(r["return"]),
                         "actor_loss": float(r["actor_loss"]), "critic_loss": float(r["critic_loss"]),
                         "reset": int(r["reset"])})
    return rows


def source_revision():
    """Git commit of the source tree if available, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=here, capture_output=True, text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__
    return f"apb-{__version__}"


def write_json(path, obj):
    path = Path(path)
    if path.exists():
        raise FileExistsError(f"refusing to overwrite {path}")
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())
