"""Prediction with target-dictionary prompts and the three step-wise accuracy metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .attributes import AttributeDictionary, select_top_l_batch
from .encoders.base import Encoder, VisualFeature
from .errors import ReportError
from .prompts import class_probs, prompt_embeddings


@torch.no_grad()
def predict_batch(z: torch.Tensor, target: AttributeDictionary, class_tokens: Sequence[torch.Tensor], encoder: Encoder, L: int, tau: float) -> torch.Tensor:
    """Argmax over all classes of the target-prompt probabilities, no task id."""
    z = z.to(target.keys.dtype)
    sel = select_top_l_batch(target.keys, z, L)
    emb = prompt_embeddings(encoder, target.values.detach(), sel.indices, class_tokens)
    return class_probs(z, emb, tau).argmax(dim=-1)


def predict(z, target: AttributeDictionary, class_names: Sequence[str], encoder: Encoder, L: int, tau: float | None = None) -> int:
    vec = z.vector if isinstance(z, VisualFeature) else z
    tokens = [encoder.class_tokens(n) for n in class_names]
    tau = encoder.spec.temperature if tau is None else tau
    return int(predict_batch(vec.reshape(1, -1), target, tokens, encoder, L, tau)[0])


def accuracy(pred, true) -> float:
    pred, true = np.asarray(pred), np.asarray(true)
    if true.size == 0:
        raise ReportError("empty evaluation set")
    return float((pred == true).mean() * 100.0)


def final_accuracy(pred, true) -> float:
    return accuracy(pred, true)


@dataclass
class PredictionRecord:
    example_id: str
    true_class: int
    predicted_class: int
    eval_step: int
    example_step: int


def step_level_accuracy(records: Sequence[PredictionRecord], n_steps: int, cumulative: bool = True) -> list[float]:
    out = []
    for t in range(n_steps):
        rows = [r for r in records if r.eval_step == t and (cumulative or r.example_step == t)]
        out.append(accuracy([r.predicted_class for r in rows], [r.true_class for r in rows]))
    return out


def s1_accuracy_and_delta(records: Sequence[PredictionRecord], n_steps: int) -> tuple[list[float], list[float | None]]:
    s1 = []
    for t in range(n_steps):
        rows = [r for r in records if r.eval_step == t and r.example_step == 0]
        s1.append(accuracy([r.predicted_class for r in rows], [r.true_class for r in rows]))
    return s1, delta_pct(s1)


def delta_pct(s1: Sequence[float]) -> list[float | None]:
    if not s1 or s1[0] == 0:
        return [None] * len(s1)
    return [100.0 * (v - s1[0]) / s1[0] for v in s1]


@dataclass
class TaskMetrics:
    step_accuracy: list[float]
    s1_accuracy: list[float]
    final_accuracy: float

    @classmethod
    def from_records(cls, records: Sequence[PredictionRecord], n_steps: int, cumulative: bool = True) -> "TaskMetrics":
        step = step_level_accuracy(records, n_steps, cumulative)
        s1, _ = s1_accuracy_and_delta(records, n_steps)
        last = [r for r in records if r.eval_step == n_steps - 1]
        final = final_accuracy([r.predicted_class for r in last], [r.true_class for r in last])
        return cls(step, s1, final)


@dataclass
class MetricsReport:
    benchmark_id: str
    tasks: dict[str, TaskMetrics] = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return max((len(t.step_accuracy) for t in self.tasks.values()), default=0)

    def _mean_over_tasks(self, attr: str) -> list[float]:
        cols = [getattr(t, attr) for t in self.tasks.values()]
        return [float(np.mean([c[i] for c in cols])) for i in range(self.n_steps)]

    @property
    def avg_final(self) -> float:
        return float(np.mean([t.final_accuracy for t in self.tasks.values()]))

    @property
    def avg_step(self) -> list[float]:
        return self._mean_over_tasks("step_accuracy")

    @property
    def avg_s1(self) -> list[float]:
        return self._mean_over_tasks("s1_accuracy")

    @property
    def s1_delta_pct(self) -> list[float | None]:
        return delta_pct(self.avg_s1)

    def to_dict(self) -> dict:
        return {
            "benchmark_id": self.benchmark_id,
            "tasks": {
                name: {
                    "final_accuracy": t.final_accuracy,
                    "step_accuracy": t.step_accuracy,
                    "s1_accuracy": t.s1_accuracy,
                    "s1_delta_pct": delta_pct(t.s1_accuracy),
                }
                for name, t in self.tasks.items()
            },
            "aggregate": {
                "avg_final": self.avg_final,
                "avg_step": self.avg_step,
                "avg_s1": self.avg_s1,
                "s1_delta_pct": self.s1_delta_pct,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        tasks = {
            name: TaskMetrics(t["step_accuracy"], t["s1_accuracy"], t["final_accuracy"])
            for name, t in d["tasks"].items()
        }
        return cls(d["benchmark_id"], tasks)

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        if other.benchmark_id != self.benchmark_id:
            raise ReportError(f"cannot merge {other.benchmark_id} into {self.benchmark_id}")
        return MetricsReport(self.benchmark_id, {**self.tasks, **other.tasks})


def _fmt(v) -> str:
    return "" if v is None else f"{v:.4f}"


def write_predictions(records: Sequence[PredictionRecord], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["example_id", "true_class", "predicted_class", "eval_step", "example_step"])
        for r in records:
            w.writerow([r.example_id, r.true_class, r.predicted_class, r.eval_step, r.example_step])
    return path


def read_predictions(path) -> list[PredictionRecord]:
    with open(path, newline="") as f:
        return [
            PredictionRecord(row["example_id"], int(row["true_class"]), int(row["predicted_class"]), int(row["eval_step"]), int(row["example_step"]))
            for row in csv.DictReader(f)
        ]


def emit_report(report: MetricsReport, out_dir, formats: Sequence[str] = ("csv", "json"), plots: bool = False) -> list[Path]:
    if not report.tasks:
        raise ReportError("report has no tasks")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    T = report.n_steps
    if "json" in formats:
        p = out_dir / "metrics.json"
        p.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        written.append(p)
    if "csv" in formats:
        p = out_dir / "per_task.csv"
        with open(p, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["task", "step", "step_accuracy", "s1_accuracy", "s1_delta_pct"])
            for name, t in report.tasks.items():
                for i, (sa, s1, d) in enumerate(zip(t.step_accuracy, t.s1_accuracy, delta_pct(t.s1_accuracy))):
                    w.writerow([name, i + 1, _fmt(sa), _fmt(s1), _fmt(d)])
        written.append(p)
        p = out_dir / "aggregate.csv"
        names = list(report.tasks)
        with open(p, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", *names, "Avg."])
            w.writerow(["Final", *[_fmt(report.tasks[n].final_accuracy) for n in names], _fmt(report.avg_final)])
            for i in range(T):
                w.writerow([f"Step {i + 1}", *[_fmt(report.tasks[n].step_accuracy[i]) for n in names], _fmt(report.avg_step[i])])
            for i in range(T):
                w.writerow([f"S-1 @ Step {i + 1}", *[_fmt(report.tasks[n].s1_accuracy[i]) for n in names], _fmt(report.avg_s1[i])])
        written.append(p)
    if plots:
        written.extend(_plot(report, out_dir))
    return written


def read_aggregate(path) -> dict[str, dict[str, float | None]]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return {r["metric"]: {k: (float(v) if v != "" else None) for k, v in r.items() if k != "metric"} for r in rows}


def _plot(report: MetricsReport, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = np.arange(1, report.n_steps + 1)
    paths = []
    for key, series, ylabel in (
        ("step_level", report.avg_step, "Step-level accuracy (%)"),
        ("s1", report.avg_s1, "S-1 accuracy (%)"),
        ("s1_delta", [np.nan if v is None else v for v in report.s1_delta_pct], "S-1 change vs step 1 (%)"),
    ):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(steps, series, marker="o")
        ax.set_xlabel("step")
        ax.set_ylabel(ylabel)
        ax.set_xticks(steps)
        fig.tight_layout()
        p = out_dir / f"{key}.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths.append(p)
    return paths
