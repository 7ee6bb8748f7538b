"""CSV and manifest writers.

Every float goes through ``%.17g`` so files round-trip exactly and repeated
runs are byte-identical.  Files are written to a temporary sibling and then
renamed into place.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SNAPSHOT_HEADER = ("t", "x", "rho1_dev", "v1_dev", "rho2_dev", "v2_dev")
TRACE_HEADER = ("t", "l2_norm", "control_U", "mode_index", "lyapunov_V")
ENSEMBLE_HEADER = ("t", "mean_sq", "stderr")
LEMMA3_HEADER = ("mode_s2", "f1", "f2", "f3", "f4")
KERNEL_HEADER = ("x", "xi", "k1", "k2", "k3", "n_kernel")


def fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return "%.17g" % float(v)


def _atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    lines = [",".join(header)]
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")
    return Path(path)


def write_columns(path, header: Sequence[str], columns: Sequence) -> Path:
    """Columns of equal length; integer arrays keep integer formatting."""
    cols = [np.asarray(c) for c in columns]
    n = len(cols[0]) if cols else 0
    if any(len(c) != n for c in cols):
        raise ValueError("columns differ in length")
    return write_rows(path, header, zip(*[c.tolist() for c in cols]))


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


# --- specific schemas -------------------------------------------------------

def write_trace(path, trace) -> Path:
    lyap = trace.lyapunov if trace.lyapunov is not None else np.full(len(trace.t), np.nan)
    return write_columns(path, TRACE_HEADER,
                         [trace.t, trace.l2, trace.U, trace.mode_index.astype(int), lyap])


def write_snapshots(path, trace) -> Path:
    rows = []
    for t, z in zip(trace.snapshot_t, trace.snapshots):
        for x, zi in zip(trace.x.tolist(), z.tolist()):
            rows.append((t, x, *zi))
    return write_rows(path, SNAPSHOT_HEADER, rows)


def write_probability(path, ptrace, p0) -> Path:
    m = ptrace.marginals(p0)
    header = ("t",) + tuple(f"p_{k + 1}" for k in range(m.shape[1]))
    return write_columns(path, header, [ptrace.t_grid, *m.T])


def write_ensemble(path, result) -> Path:
    return write_columns(path, ENSEMBLE_HEADER, [result.t_grid, result.mean_sq, result.stderr])


def write_lemma3(path, norms) -> Path:
    return write_rows(path, LEMMA3_HEADER, [(f.s2, f.f1, f.f2, f.f3, f.f4) for f in norms])


def write_kernels(path, kernels) -> Path:
    from .backstepping import kernel_rows
    return write_columns(path, KERNEL_HEADER, list(kernel_rows(kernels).T))


def read_mode_path(path, horizon: float):
    """A pinned mode path: CSV with columns ``t, mode_index`` (header optional)."""
    from .markov import ModePath
    rows = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            try:
                rows.append((float(parts[0]), int(parts[1])))
            except (ValueError, IndexError):
                if ln == 1:
                    continue  # header
                raise ValueError(f"{path}:{ln}: expected 't, mode_index'") from None
    if not rows:
        raise ValueError(f"{path}: empty mode path")
    t, m = zip(*rows)
    return ModePath(tuple(t), tuple(m), float(horizon))


@dataclass(frozen=True)
class RunManifest:
    config_path: str
    command: str
    seed: int | None
    output_dir: str
    tool_version: str
    wall_time: float
    outputs: tuple[str, ...] = ()

    def write(self, path=None) -> Path:
        path = Path(path) if path else Path(self.output_dir) / "manifest.json"
        d = asdict(self)
        d["outputs"] = list(self.outputs)
        _atomic_write_text(path, json.dumps(d, indent=2, sort_keys=True) + "\n")
        return path
