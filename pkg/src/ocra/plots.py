"""Figures (standalone SVG) and their underlying data (CSV).

SVG output is made reproducible by fixing matplotlib's hash salt and
dropping the date metadata.
"""
from __future__ import annotations

import csv
import io as _stdio
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import io  # noqa: E402
from .errors import FormatError  # noqa: E402

_STYLE = {
    "svg.hashsalt": "ocra",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def read_losses(path) -> list:
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except FileNotFoundError as e:
        raise FormatError(f"missing input file: {path}") from e
    if not rows or rows[0] != ["step", "loss"]:
        raise FormatError(f"{path}: expected a 'step,loss' CSV")
    try:
        return [(int(r[0]), float(r[1])) for r in rows[1:]]
    except (ValueError, IndexError) as e:
        raise FormatError(f"{path}: malformed row: {e}") from e


def _save(fig, path: Path):
    buf = _stdio.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    io.atomic_write_text(path, buf.getvalue())


def _write_csv(path: Path, header, rows):
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    io.atomic_write_text(path, "\n".join(lines) + "\n")


def loss_figure(losses, out_dir) -> list:
    out = Path(out_dir)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        if losses:
            steps = np.array([s for s, _ in losses])
            vals = np.array([v for _, v in losses])
            ax.plot(steps, vals, lw=0.4, color="0.7", label="per step")
            w = min(100, len(vals))
            smooth = np.convolve(vals, np.ones(w) / w, mode="valid")
            ax.plot(steps[w - 1:], smooth, lw=1.2, color="C0", label=f"{w}-step mean")
            ax.set_yscale("log")
            ax.legend(frameon=False)
        ax.set_xlabel("training step")
        ax.set_ylabel("noise-prediction loss")
        _save(fig, out / "loss.svg")
    _write_csv(out / "loss.csv", ["step", "loss"], [(s, repr(v)) for s, v in losses])
    return [out / "loss.svg", out / "loss.csv"]


def trajectory_figure(log, truth, out_dir) -> list:
    """Top-down (x, y) overlay of executed and reference object paths."""
    out = Path(out_dir)
    rows = []
    for e in log:
        t = e["pose"]["translation"]
        rows.append((e["rollout"], e["step"], repr(t[0]), repr(t[1]), repr(t[2])))
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4, 4))
        runs = sorted({e["rollout"] for e in log})
        for i, r in enumerate(runs):
            pts = np.array([e["pose"]["translation"] for e in log if e["rollout"] == r])
            ax.plot(pts[:, 0], pts[:, 1], "-", lw=1.0, color=f"C{i % 10}",
                    label="executed" if i == 0 else None)
        for i, gt in enumerate(truth.get("rollouts", [])):
            pts = np.array([p["translation"] for p in gt["poses"]])
            if len(pts):
                ax.plot(pts[:, 0], pts[:, 1], "--", lw=0.8, color="0.3",
                        label="reference" if i == 0 else None)
        if runs:
            ax.legend(frameon=False)
            ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        _save(fig, out / "trajectories.svg")
    _write_csv(out / "trajectories.csv", ["rollout", "step", "x", "y", "z"], rows)
    return [out / "trajectories.svg", out / "trajectories.csv"]


def force_figure(log, out_dir) -> list:
    out = Path(out_dir)
    rows = [(e["rollout"], e["step"], repr(e["reference_force"]), repr(e["measured_force"]),
             repr(e["command"])) for e in log]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        runs = sorted({e["rollout"] for e in log})
        for i, r in enumerate(runs):
            steps = [e["step"] for e in log if e["rollout"] == r]
            ax.plot(steps, [e["measured_force"] for e in log if e["rollout"] == r],
                    lw=1.0, color=f"C{i % 10}", label="measured" if i == 0 else None)
            ax.plot(steps, [e["reference_force"] for e in log if e["rollout"] == r],
                    "--", lw=0.8, color="0.3", label="reference" if i == 0 else None)
        if runs:
            ax.legend(frameon=False)
        ax.set_xlabel("action step")
        ax.set_ylabel("grip force [N]")
        _save(fig, out / "force.svg")
    _write_csv(out / "force.csv", ["rollout", "step", "reference_force", "measured_force", "command"], rows)
    return [out / "force.svg", out / "force.csv"]
