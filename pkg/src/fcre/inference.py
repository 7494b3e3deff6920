"""Prediction heads and cumulative continual-learning metrics.

Two heads over the same frozen state:

* ``ncm_predict`` -- nearest class mean: argmax over relations of
  E(x, r) = -||z - p_r||.
* ``dri_predict`` -- descriptive rank fusion: rank all relations once
  by E(x, r) and once by cos(z, mean description of r), then fuse
  DRI(x, r) = alpha / (epsilon + rank_E(r)) + (1 - alpha) / (epsilon + rank_cos(r)).

Both heads resolve exact score ties by ascending relation id, so
predictions are deterministic functions of their inputs.  Accuracy is
reported cumulatively: after task j, every earlier task's test pool is
scored against the full label space seen so far, and ACC_j is the
unweighted mean of those per-task accuracies.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping

import numpy as np

from fcre.encoder import encode
from fcre.geometry import as_embedding, cosine, euclidean, rank_scores

if TYPE_CHECKING:  # pragma: no cover - import would be circular at runtime
    from fcre.continual import ContinualState
    from fcre.descriptions import DescriptionSet

HEADS = ("ncm", "dri")


def _relation_items(prototypes) -> list[tuple[int, np.ndarray]]:
    """Accept a PrototypeStore or any mapping of relation id -> vector."""
    items = prototypes.items() if hasattr(prototypes, "items") else prototypes
    out = [(int(r), np.asarray(p, dtype=np.float64)) for r, p in items]
    if not out:
        raise ValueError("prototype store is empty")
    return sorted(out, key=lambda pair: pair[0])


def euclidean_scores(z, prototypes) -> dict[int, float]:
    """E(x, r) = -||z - p_r|| for every registered relation."""
    z = as_embedding(z, name="embedding")
    return {r: -euclidean(z, p) for r, p in _relation_items(prototypes)}


def description_cosine_scores(z, descriptions: "DescriptionSet") -> dict[int, float]:
    """cos(z, mean description of r) for every relation in the set."""
    z = as_embedding(z, name="embedding")
    return {r: cosine(z, descriptions.mean(r)) for r in descriptions.relations}


def ncm_predict(z, prototypes) -> int:
    """Nearest-class-mean prediction; distance ties go to the lower id."""
    scores = euclidean_scores(z, prototypes)
    return _argmax_by_id(scores)


def _argmax_by_id(scores: Mapping[int, float]) -> int:
    best_rel = None
    best = -math.inf
    for rel in sorted(scores):
        if scores[rel] > best:
            best = scores[rel]
            best_rel = rel
    return int(best_rel)


def fuse_ranked_scores(
    e_scores: Mapping[int, float],
    c_scores: Mapping[int, float],
    alpha: float,
    epsilon: float,
) -> dict[int, float]:
    """Reciprocal-rank fusion of two score tables over the same relations."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if not epsilon > 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if set(e_scores) != set(c_scores):
        raise ValueError(
            "mismatched relation registries: prototype scores cover "
            f"{sorted(e_scores)} but description scores cover {sorted(c_scores)}"
        )
    e_ranks = rank_scores(e_scores).ranks
    c_ranks = rank_scores(c_scores).ranks
    return {
        r: alpha / (epsilon + e_ranks[r]) + (1.0 - alpha) / (epsilon + c_ranks[r])
        for r in e_ranks
    }


def dri_predict_from_scores(
    e_scores: Mapping[int, float],
    c_scores: Mapping[int, float],
    alpha: float,
    epsilon: float,
) -> int:
    fused = fuse_ranked_scores(e_scores, c_scores, alpha, epsilon)
    return _argmax_by_id(fused)


def dri_score(
    z, rel: int, prototypes, descriptions: "DescriptionSet", alpha: float, epsilon: float
) -> float:
    """Fused score of one relation (ranks are computed over all of them)."""
    fused = fuse_ranked_scores(
        euclidean_scores(z, prototypes),
        description_cosine_scores(z, descriptions),
        alpha,
        epsilon,
    )
    if int(rel) not in fused:
        raise ValueError(f"relation {rel} is not registered")
    return fused[int(rel)]


def dri_predict(z, prototypes, descriptions: "DescriptionSet", alpha: float, epsilon: float) -> int:
    """Descriptive rank-fusion prediction; fused ties go to the lower id."""
    return dri_predict_from_scores(
        euclidean_scores(z, prototypes),
        description_cosine_scores(z, descriptions),
        alpha,
        epsilon,
    )


@dataclass(frozen=True)
class TaskAccuracy:
    """Cumulative evaluation row logged after finishing one task."""

    task_index: int
    head: str
    acc_per_task: dict[int, float]
    acc_avg: float


@dataclass
class MetricsReport:
    """Ordered collection of evaluation rows plus CSV (de)serialization."""

    rows: list[TaskAccuracy] = field(default_factory=list)

    def add(self, row: TaskAccuracy) -> None:
        if row.head not in HEADS:
            raise ValueError(f"unknown head {row.head!r}")
        self.rows.append(row)

    def head_rows(self, head: str) -> list[TaskAccuracy]:
        return [r for r in self.rows if r.head == head]

    def final_drop(self, head: str) -> float:
        """ACC_1 - ACC_T for one head (positive means forgetting)."""
        rows = self.head_rows(head)
        if not rows:
            raise ValueError(f"no rows recorded for head {head!r}")
        return rows[0].acc_avg - rows[-1].acc_avg

    def signed_delta(self, head: str) -> float:
        """ACC_T - ACC_1; negative means performance degraded."""
        return -self.final_drop(head)

    def n_tasks(self) -> int:
        return max((r.task_index for r in self.rows), default=0)

    def to_csv(self, n_tasks: int | None = None) -> str:
        """Render all rows; float cells use repr so reruns are byte-identical."""
        total = n_tasks if n_tasks is not None else self.n_tasks()
        buf = io.StringIO()
        writer = csv.writer(buf)
        header = ["task", "head", "acc_avg"]
        header += [f"acc_per_task_{i}" for i in range(1, total + 1)]
        header += ["drop"]
        writer.writerow(header)
        first_avg: dict[str, float] = {}
        for row in self.rows:
            if row.head not in first_avg:
                first_avg[row.head] = row.acc_avg
            cells = [str(row.task_index), row.head, repr(row.acc_avg)]
            for i in range(1, total + 1):
                cells.append(repr(row.acc_per_task[i]) if i in row.acc_per_task else "")
            cells.append(repr(first_avg[row.head] - row.acc_avg))
            writer.writerow(cells)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("metrics CSV is empty") from None
        if header[:3] != ["task", "head", "acc_avg"] or header[-1] != "drop":
            raise ValueError(f"unrecognized metrics CSV header: {header}")
        task_cols = header[3:-1]
        report = cls()
        for cells in reader:
            if not cells:
                continue
            acc_per_task = {}
            for col, cell in zip(task_cols, cells[3:-1]):
                if cell != "":
                    acc_per_task[int(col.rsplit("_", 1)[1])] = float(cell)
            report.add(
                TaskAccuracy(
                    task_index=int(cells[0]),
                    head=cells[1],
                    acc_per_task=acc_per_task,
                    acc_avg=float(cells[2]),
                )
            )
        return report


def evaluate(state: "ContinualState", through_task: int, head: str, hp) -> TaskAccuracy:
    """Score the test pools of tasks 1..through_task with one head.

    Every prediction runs against the full label space seen so far (the
    prototype registry), so earlier tasks get harder as the stream
    grows.  The result is a pure fold over the test pools: sample order
    cannot affect it.
    """
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")
    done = {t.index: t for t in state.completed_tasks}
    if through_task < 1 or through_task > max(done, default=0):
        raise ValueError(f"through_task {through_task} has not been completed")
    proto_rels = set(state.prototypes.relations)
    desc_rels = set(state.descriptions.relations)
    if head == "dri" and proto_rels != desc_rels:
        raise ValueError(
            "mismatched relation registries: prototypes cover "
            f"{sorted(proto_rels)} but descriptions cover {sorted(desc_rels)}"
        )
    acc_per_task: dict[int, float] = {}
    for i in range(1, through_task + 1):
        task = done[i]
        hits = 0
        for features, label in zip(task.test_x, task.test_y):
            z = encode(state.encoder, features)
            if head == "ncm":
                pred = ncm_predict(z, state.prototypes)
            else:
                pred = dri_predict(
                    z, state.prototypes, state.descriptions, hp.alpha, hp.epsilon
                )
            hits += int(pred == int(label))
        acc_per_task[i] = hits / len(task.test_y)
    acc_avg = sum(acc_per_task.values()) / len(acc_per_task)
    return TaskAccuracy(
        task_index=through_task, head=head, acc_per_task=acc_per_task, acc_avg=acc_avg
    )
