"""Continual-learning metrics over a success matrix, plus structure diagnostics.

``R[i, j]`` is the success rate of task ``i`` after training stage ``j``. A
task introduced at stage ``s(i)`` has entries only for ``j >= s(i)``;
earlier cells are NaN and are excluded from every sum. With one task per
stage this reduces to the usual square upper-triangular formulas; with a
jointly trained base group, the whole group shares stage 0.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .policy import PolicyParameters, encode


class MetricsError(ValueError):
    pass


@dataclass
class SuccessMatrix:
    values: np.ndarray  # (N tasks, S stages), NaN where undefined
    task_stage: np.ndarray  # (N,) stage at which each task is introduced
    stage_labels: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.task_stage = np.asarray(self.task_stage, dtype=np.int64)
        n, s = self.values.shape
        if self.task_stage.shape != (n,) or len(self.stage_labels) != s:
            raise MetricsError("task_stage / stage_labels do not match matrix shape")
        defined = self.defined_mask()
        if np.isnan(self.values[defined]).any():
            raise MetricsError("missing success rate in a defined cell")
        if not np.isnan(self.values[~defined]).all():
            raise MetricsError("value present in an undefined cell (task not yet introduced)")
        v = self.values[defined]
        if np.any(v < 0) or np.any(v > 1):
            raise MetricsError("success rates must lie in [0, 1]")

    @property
    def n_tasks(self) -> int:
        return self.values.shape[0]

    @property
    def n_stages(self) -> int:
        return self.values.shape[1]

    def defined_mask(self) -> np.ndarray:
        return np.arange(self.values.shape[1])[None, :] >= self.task_stage[:, None]

    @classmethod
    def empty(cls, task_stage: Sequence[int], stage_labels: Sequence[str]) -> SuccessMatrix:
        task_stage = np.asarray(task_stage, dtype=np.int64)
        values = np.full((len(task_stage), len(stage_labels)), np.nan)
        m = cls.__new__(cls)
        m.values, m.task_stage, m.stage_labels = values, task_stage, list(stage_labels)
        return m

    @classmethod
    def square(cls, rows: Sequence[Sequence[float | None]]) -> SuccessMatrix:
        """One task per stage; ``rows[i][j]`` for ``j >= i``, anything else ignored."""
        n = len(rows)
        vals = np.full((n, n), np.nan)
        for i in range(n):
            for j in range(i, n):
                vals[i, j] = rows[i][j]
        return cls(vals, np.arange(n), [f"Task{j + 1}" for j in range(n)])


def stage_labels(base_count: int, steps: int) -> list[str]:
    if base_count > 0:
        return ["Base"] + [f"Task{j + 1}" for j in range(steps)]
    return [f"Task{j + 1}" for j in range(steps)]


# ------------------------------------------------------------------ metrics


def auc(r: SuccessMatrix) -> float:
    """Mean over tasks of the task's average success from its stage onward."""
    per_task = [np.mean(r.values[i, r.task_stage[i] :]) for i in range(r.n_tasks)]
    return float(np.mean(per_task))


def fwt(r: SuccessMatrix) -> float:
    """Mean just-learned success: ``R[i, s(i)]`` averaged over tasks."""
    return float(np.mean(r.values[np.arange(r.n_tasks), r.task_stage]))


def nbt(r: SuccessMatrix) -> float:
    """Mean drop from just-learned success over later stages; 0 if no task has later stages."""
    drops = []
    for i in range(r.n_tasks):
        s = r.task_stage[i]
        if s < r.n_stages - 1:
            drops.append(np.mean(r.values[i, s] - r.values[i, s + 1 :]))
    return float(np.mean(drops)) if drops else 0.0


def faa(r: SuccessMatrix) -> float:
    return float(np.mean(r.values[:, -1]))


def per_stage_all(r: SuccessMatrix) -> list[float]:
    """Average success over all tasks introduced so far, per stage."""
    return [float(np.nanmean(r.values[r.task_stage <= j, j])) for j in range(r.n_stages)]


def per_stage_old(r: SuccessMatrix) -> list[float | None]:
    """Average success over tasks introduced before each stage (None at stage 0)."""
    out: list[float | None] = []
    for j in range(r.n_stages):
        old = r.task_stage < j
        out.append(float(np.mean(r.values[old, j])) if old.any() else None)
    return out


def aa_from_stage_averages(stage_averages: Sequence[float]) -> float:
    """Average accuracy from per-stage all-seen-task averages."""
    if len(stage_averages) == 0:
        raise MetricsError("no stages")
    return float(np.mean(stage_averages))


def aa(r: SuccessMatrix) -> float:
    return aa_from_stage_averages(per_stage_all(r))


def all_metrics(r: SuccessMatrix) -> dict:
    return {
        "auc": auc(r),
        "fwt": fwt(r),
        "nbt": nbt(r),
        "faa": faa(r),
        "aa": aa(r),
        "per_stage_all": per_stage_all(r),
        "per_stage_old": per_stage_old(r),
    }


# --------------------------------------------------------------- R.csv I/O


def to_csv(r: SuccessMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(r.stage_labels))
    for i in range(r.n_tasks):
        w.writerow(["" if math.isnan(v) else f"{v:.6f}" for v in r.values[i]])
    return buf.getvalue()


def from_csv(text: str) -> SuccessMatrix:
    rows = list(csv.reader(io.StringIO(text)))
    if len(rows) < 2 or not rows[0]:
        raise MetricsError("R.csv needs a header row and at least one task row")
    labels = rows[0]
    vals, stages = [], []
    for k, row in enumerate(rows[1:], start=2):
        if len(row) != len(labels):
            raise MetricsError(f"line {k}: expected {len(labels)} fields, got {len(row)}")
        cells = row
        try:
            parsed = [float(c) if c.strip() else math.nan for c in cells]
        except ValueError as e:
            raise MetricsError(f"line {k}: {e}") from None
        defined = [j for j, c in enumerate(cells) if c.strip()]
        if not defined:
            raise MetricsError(f"line {k}: task has no defined cells")
        if stages and defined[0] < stages[-1]:
            raise MetricsError(f"line {k}: tasks must be listed in the order they are introduced")
        stages.append(defined[0])
        vals.append(parsed)
    return SuccessMatrix(np.array(vals), np.array(stages), labels)


def read_csv(path: str | Path) -> SuccessMatrix:
    return from_csv(Path(path).read_text())


def write_atomic(path: str | Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_csv(path: str | Path, r: SuccessMatrix) -> None:
    write_atomic(path, to_csv(r))


def write_metrics_json(path: str | Path, r: SuccessMatrix) -> dict:
    m = all_metrics(r)
    write_atomic(path, json.dumps(m, indent=2))
    return m


def format_table(r: SuccessMatrix, name: str = "") -> str:
    """Text table: first stage, then Old/All per later stage, then AA (percent)."""
    old, allv = per_stage_old(r), per_stage_all(r)
    head = [f"{'method':<12}", f"{r.stage_labels[0]:>7}"]
    cells = [f"{name:<12}", f"{100 * allv[0]:7.1f}"]
    for j in range(1, r.n_stages):
        head.append(f"{r.stage_labels[j] + ' Old':>10} {'All':>6}")
        cells.append(f"{100 * old[j]:10.1f} {100 * allv[j]:6.1f}")
    head.append(f"{'AA':>6}")
    cells.append(f"{100 * aa(r):6.1f}")
    return " ".join(head) + "\n" + " ".join(cells)


# ------------------------------------------------------------- diagnostics


def attention_entropy(attn: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each row of a batch of attention distributions."""
    a = np.asarray(attn, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0, a * np.log(a), 0.0)
    return -terms.sum(axis=-1)


def attention_diffusion(params: PolicyParameters, probes) -> float:
    """Mean fusion-attention entropy over a probe set (higher = more diffuse)."""
    with ad.no_grad():
        lat = encode(probes.images, probes.proprio, probes.instructions, params)
    return float(attention_entropy(lat.attn.data).mean())


def cosine_similarity_matrix(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    n = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    u = z / n
    return u @ u.T


def representation_similarity(params: PolicyParameters, probes) -> np.ndarray:
    """Pairwise cosine similarity of fused latents over the probe set."""
    with ad.no_grad():
        lat = encode(probes.images, probes.proprio, probes.instructions, params)
    return cosine_similarity_matrix(lat.z_fused.data)


def structure_drift(before: np.ndarray, after: np.ndarray) -> float:
    """Frobenius distance between two similarity matrices."""
    return float(np.linalg.norm(np.asarray(after) - np.asarray(before)))
