"""CSV, manifest and gnuplot emission.

Floats are written with 17 significant digits so every double round-trips.
"""

from __future__ import annotations

import csv
import json
import platform
import subprocess
import sys
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

FLOAT_FMT = ".17g"


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), FLOAT_FMT)
    return str(x)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])
    return path


def read_csv(path) -> tuple[list[str], np.ndarray]:
    """Header and a float array of a numeric CSV written by ``write_csv``."""
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    conv = {"true": 1.0, "false": 0.0}
    data = [[conv[v] if v in conv else float(v) for v in r] for r in rows[1:]]
    return rows[0], np.array(data, dtype=float)


def version_string() -> str:
    try:
        v = metadata.version("qrelax")
    except metadata.PackageNotFoundError:
        v = "unknown"
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                              timeout=5, cwd=Path(__file__).parent).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"{v}+{desc}" if desc else v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    if callable(obj):
        return repr(obj)
    return obj


def write_manifest(path, command: str, seed: int | None, config: dict, outputs: Sequence[str] = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "qrelax",
        "version": version_string(),
        "command": command,
        "seed": seed,
        "config": _jsonable(config),
        "outputs": list(outputs),
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(),
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def write_gnuplot(path, csv_name: str, x_col: int, y_cols: Sequence[tuple[int, str]],
                  xlabel: str, ylabel: str, logx: bool = False) -> Path:
    """Plot script for columns of a CSV in the same directory (1-based gnuplot columns)."""
    path = Path(path)
    lines = [
        "set datafile separator ','",
        f"set xlabel '{xlabel}'",
        f"set ylabel '{ylabel}'",
        "set key autotitle columnhead",
    ]
    if logx:
        lines.append("set logscale x")
    plots = [f"'{csv_name}' using {x_col}:{c} with lines title '{t}'" for c, t in y_cols]
    lines.append("plot " + ", \\\n     ".join(plots))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_ensemble(summary, outdir, plots: bool = False) -> list[str]:
    """One CSV per quantity; returns the file names written."""
    outdir = Path(outdir)
    t = summary.checkpoint_times
    names = ["mean_H.csv", "mean_V.csv", "frequencies.csv"]
    write_csv(outdir / names[0], ["t", "mean_H", "se_H"], zip(t, summary.mean_H, summary.se_H))
    write_csv(outdir / names[1], ["t", "mean_V", "se_V"], zip(t, summary.mean_V, summary.se_V))
    m = np.arange(1, summary.terminal_counts.size + 1)
    write_csv(outdir / names[2], ["m", "count", "frequency", "pi"],
              zip(m, summary.terminal_counts, summary.terminal_frequency, summary.priors))
    if summary.mean_density is not None:
        names.append("density.csv")
        rows = ((tk, x, v) for k, tk in enumerate(t) for x, v in zip(summary.x_grid, summary.mean_density[k]))
        write_csv(outdir / names[-1], ["t", "x", "value"], rows)
    if plots:
        write_gnuplot(outdir / "mean_H.gp", "mean_H.csv", 1, [(2, "mean H")], "t", "H", logx=True)
        write_gnuplot(outdir / "mean_V.gp", "mean_V.csv", 1, [(2, "mean V")], "t", "V", logx=True)
        names += ["mean_H.gp", "mean_V.gp"]
    return names
