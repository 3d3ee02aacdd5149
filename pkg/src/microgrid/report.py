"""Result files: trajectory CSV, key-value text reports and figures."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .integrator import TrajectoryRecord

FLOAT_FORMAT = "{:.9g}"


def atomic_write(path, data: bytes) -> Path:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def csv_header(record: TrajectoryRecord) -> list:
    return (["t"] + [f"f_{i}" for i in record.node_ids] + [f"pg_{i}" for i in record.ctrl_ids]
            + ["lambda_min", "lambda_max", "H", "Hbar", "Phi", "passivity_min"])


def csv_text(record: TrajectoryRecord) -> str:
    rows = [",".join(csv_header(record))]
    if len(record):
        table = np.column_stack([
            record.t, record.frequency_hz, record.pg, record.lambda_min, record.lambda_max,
            record.H, record.Hbar, record.Phi, record.passivity_min,
        ])
        fmt = FLOAT_FORMAT.format
        rows.extend(",".join(fmt(v) for v in row) for row in table.tolist())
    return "\n".join(rows) + "\n"


def emit_csv(record: TrajectoryRecord, path) -> Path:
    return atomic_write(path, csv_text(record).encode("ascii"))


def _format_value(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT.format(float(value))
    if isinstance(value, (list, tuple, np.ndarray)):
        return " ".join(_format_value(v) for v in value)
    return str(value)


def key_value_text(items) -> str:
    return "".join(f"{k}: {_format_value(v)}\n" for k, v in items)


def emit_summary(bundle, path) -> Path:
    return atomic_write(path, key_value_text(bundle.summary_items()).encode("utf-8"))


def emit_text(items, path) -> Path:
    return atomic_write(path, key_value_text(items).encode("utf-8"))


def load_profile(record: TrajectoryRecord, load_index: np.ndarray):
    """Step profile of the active loads at the recorded times."""
    if not len(record):
        return np.zeros((0, len(load_index)))
    levels = np.array([exo.pl[load_index] for exo in record.exogenous])
    return levels[record.segment]


def render_figures(record: TrajectoryRecord, out_dir, n_ctrl: int) -> list:
    """Frequencies, generation setpoints, load steps and shifted energy."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    load_ids = record.node_ids[n_ctrl:]
    panels = [
        ("frequency.png", "node frequency [Hz]", record.frequency_hz, record.node_ids, "f"),
        ("generation.png", "p_g [p.u.]", record.pg, record.ctrl_ids, "p_g"),
        ("loads.png", "p_l [p.u.]", load_profile(record, np.arange(n_ctrl, len(record.node_ids))),
         load_ids, "p_l"),
    ]
    for name, ylabel, data, ids, label in panels:
        fig, ax = plt.subplots(figsize=(7.0, 3.6))
        for c, nid in enumerate(ids):
            ax.plot(record.t, data[:, c], lw=0.9, label=f"{label}{nid}")
        ax.set_xlabel("t [s]")
        ax.set_ylabel(ylabel)
        ax.grid(True, alpha=0.3)
        if len(ids) <= 8:
            ax.legend(fontsize=7, ncol=2)
        fig.tight_layout()
        paths.append(_save(fig, out_dir / name))
        plt.close(fig)

    fig, ax = plt.subplots(figsize=(7.0, 3.6))
    hbar = np.where(record.Hbar > 0, record.Hbar, np.nan)
    ax.semilogy(record.t, hbar, lw=0.9)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("shifted energy")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    paths.append(_save(fig, out_dir / "energy.png"))
    plt.close(fig)
    return paths


def _save(fig, path: Path) -> Path:
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=path.suffix, dir=path.parent)
    os.close(fd)
    try:
        fig.savefig(tmp, dpi=120)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path
