"""Synthetic task streams and the JSONL dataset file format.

Synthetic data places one unit-norm class center per relation on the
feature sphere (rejection-sampled so every pair of centers is at least
``cluster_separation`` radians apart) and draws samples as
center + within_class_noise * gaussian.  Relation ids are dense:
task t (1-based) owns ids (t-1)*n_way .. t*n_way - 1.

Dataset files are JSONL, one sample per line:

    {"task": 1, "relation": 0, "split": "train", "features": [...]}

``write_dataset`` emits a canonical ordering (task ascending, train
rows before test rows, stored sample order within a split), so
serialize -> parse -> serialize is byte-identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from fcre.continual import Task, TaskStream
from fcre.geometry import unit_normalize

_MAX_ATTEMPTS_PER_CENTER = 10_000


class GenerationError(RuntimeError):
    """Raised when the requested geometry cannot be realized."""


class DatasetFormatError(ValueError):
    """Raised when a dataset file violates the JSONL contract."""


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the synthetic stream generator."""

    n_tasks: int = 8
    n_way: int = 5
    shots: int = 5
    test_per_relation: int = 20
    feature_dim: int = 32
    cluster_separation: float = 0.5
    within_class_noise: float = 0.1
    task1_oversample: int = 100
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        for name in ("n_tasks", "n_way", "shots", "test_per_relation", "feature_dim",
                     "task1_oversample"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.cluster_separation < math.pi:
            raise ValueError(
                f"cluster_separation must lie in (0, pi), got {self.cluster_separation}"
            )
        if self.within_class_noise < 0.0:
            raise ValueError(
                f"within_class_noise must be >= 0, got {self.within_class_noise}"
            )
        return self

    @property
    def n_relations(self) -> int:
        return self.n_tasks * self.n_way


def sample_separated_centers(
    rng: np.random.Generator, count: int, dim: int, min_angle: float
) -> np.ndarray:
    """Unit vectors with pairwise angle >= min_angle, by rejection."""
    max_dot = math.cos(min_angle)
    centers: list[np.ndarray] = []
    for i in range(count):
        for _ in range(_MAX_ATTEMPTS_PER_CENTER):
            candidate = unit_normalize(rng.standard_normal(dim))
            if all(float(np.dot(candidate, c)) <= max_dot for c in centers):
                centers.append(candidate)
                break
        else:
            raise GenerationError(
                f"placed only {i} of {count} class centers in {dim} dimensions "
                f"at separation {min_angle}; try a smaller cluster_separation"
            )
    return np.stack(centers)


def generate_stream(spec: SyntheticSpec) -> tuple[TaskStream, dict[int, np.ndarray]]:
    """Draw a full task stream; also returns the class centers by relation.

    One generator seeded by ``spec.seed`` drives every draw in a fixed
    order (centers, then task by task, relation by relation, train pool
    before test pool), so identical specs produce identical streams.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    centers = sample_separated_centers(
        rng, spec.n_relations, spec.feature_dim, spec.cluster_separation
    )
    tasks = []
    for t in range(1, spec.n_tasks + 1):
        relations = list(range((t - 1) * spec.n_way, t * spec.n_way))
        n_train = spec.task1_oversample if t == 1 else spec.shots
        train_blocks, train_labels = [], []
        test_blocks, test_labels = [], []
        for rel in relations:
            center = centers[rel]
            train_blocks.append(
                center + spec.within_class_noise
                * rng.standard_normal((n_train, spec.feature_dim))
            )
            train_labels.append(np.full(n_train, rel, dtype=np.int64))
            test_blocks.append(
                center + spec.within_class_noise
                * rng.standard_normal((spec.test_per_relation, spec.feature_dim))
            )
            test_labels.append(np.full(spec.test_per_relation, rel, dtype=np.int64))
        tasks.append(
            Task(
                index=t,
                relations=tuple(relations),
                train_x=np.concatenate(train_blocks),
                train_y=np.concatenate(train_labels),
                test_x=np.concatenate(test_blocks),
                test_y=np.concatenate(test_labels),
            )
        )
    center_map = {rel: centers[rel] for rel in range(spec.n_relations)}
    return TaskStream(tasks=tuple(tasks)), center_map


def write_dataset(stream: TaskStream, path) -> None:
    """Serialize a stream in canonical JSONL order."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for task in stream.tasks:
            for split, xs, ys in (
                ("train", task.train_x, task.train_y),
                ("test", task.test_x, task.test_y),
            ):
                for row, label in zip(xs, ys):
                    obj = {
                        "task": task.index,
                        "relation": int(label),
                        "split": split,
                        "features": [float(v) for v in row],
                    }
                    fh.write(json.dumps(obj, separators=(", ", ": ")))
                    fh.write("\n")


def ingest_dataset(path) -> TaskStream:
    """Parse a JSONL dataset file; all errors carry 1-based line numbers."""
    rows: dict[int, dict[str, tuple[list[list[float]], list[int]]]] = {}
    relation_home: dict[int, int] = {}
    dim: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {lineno}: invalid JSON: {exc}") from None
            if not isinstance(obj, dict):
                raise DatasetFormatError(f"line {lineno}: expected a JSON object")
            missing = {"task", "relation", "split", "features"} - set(obj)
            if missing:
                raise DatasetFormatError(
                    f"line {lineno}: missing keys {sorted(missing)}"
                )
            task = obj["task"]
            rel = obj["relation"]
            split = obj["split"]
            feats = obj["features"]
            if not isinstance(task, int) or isinstance(task, bool) or task < 1:
                raise DatasetFormatError(
                    f"line {lineno}: task must be an integer >= 1, got {task!r}"
                )
            if not isinstance(rel, int) or isinstance(rel, bool) or rel < 0:
                raise DatasetFormatError(
                    f"line {lineno}: relation must be a non-negative integer, got {rel!r}"
                )
            if split not in ("train", "test"):
                raise DatasetFormatError(
                    f"line {lineno}: split must be 'train' or 'test', got {split!r}"
                )
            if not isinstance(feats, list) or not feats:
                raise DatasetFormatError(
                    f"line {lineno}: features must be a non-empty list"
                )
            try:
                values = [float(v) for v in feats]
            except (TypeError, ValueError):
                raise DatasetFormatError(
                    f"line {lineno}: features contain non-numeric entries"
                ) from None
            if not all(math.isfinite(v) for v in values):
                raise DatasetFormatError(
                    f"line {lineno}: features contain non-finite entries"
                )
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise DatasetFormatError(
                    f"line {lineno}: features have dimension {len(values)}, "
                    f"expected {dim}"
                )
            if rel in relation_home and relation_home[rel] != task:
                raise DatasetFormatError(
                    f"line {lineno}: relation {rel} appears in both task "
                    f"{relation_home[rel]} and task {task}"
                )
            relation_home[rel] = task
            split_rows = rows.setdefault(task, {"train": ([], []), "test": ([], [])})
            split_rows[split][0].append(values)
            split_rows[split][1].append(rel)
    if not rows:
        raise DatasetFormatError("dataset file is empty")
    indices = sorted(rows)
    if indices != list(range(1, len(indices) + 1)):
        raise DatasetFormatError(
            f"task indices must be contiguous from 1, got {indices}"
        )
    tasks = []
    for t in indices:
        train_rows, train_labels = rows[t]["train"]
        test_rows, test_labels = rows[t]["test"]
        relations = sorted(set(train_labels) | set(test_labels))
        if not train_rows:
            raise DatasetFormatError(f"task {t} has no train samples")
        if not test_rows:
            raise DatasetFormatError(f"task {t} has no test samples")
        try:
            tasks.append(
                Task(
                    index=t,
                    relations=tuple(relations),
                    train_x=np.array(train_rows),
                    train_y=np.array(train_labels, dtype=np.int64),
                    test_x=np.array(test_rows),
                    test_y=np.array(test_labels, dtype=np.int64),
                )
            )
        except ValueError as exc:
            raise DatasetFormatError(f"task {t}: {exc}") from None
    return TaskStream(tasks=tuple(tasks))
