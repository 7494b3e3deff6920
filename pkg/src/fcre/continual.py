"""Task-stream training driver with memory-based rehearsal.

The lifecycle for each incoming task mirrors the standard
memory-rehearsal recipe:

1. register the new relations' descriptions,
2. train on the task's own data for ``epochs_current`` epochs,
3. select ``memory_size`` representatives per new relation (the samples
   whose embeddings are closest to their relation's embedding centroid;
   ties go to the lower sample index) and append them to the memory,
4. train again on the union of all *previous* tasks' memory and the
   current task data for ``epochs_memory`` epochs,
5. rebuild the prototypes from memory with the final encoder and log a
   cumulative evaluation row per prediction head.

Prototypes are always recomputed from raw stored features with the
current encoder, so rebuilding them twice in a row is a no-op.  Memory
is append-only: once a relation's representatives are chosen they are
never replaced.

Batches are formed per epoch: one full batch when the pool fits in 64
samples, otherwise shuffled minibatches of 32 (a would-be trailing
singleton is merged into the previous batch, since the contrastive
losses need company).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from fcre.descriptions import DescriptionSet
from fcre.encoder import (
    AdamState,
    BilinearForm,
    EncoderParams,
    encode,
    encode_backward,
    floats_from_b64,
    floats_to_b64,
    init_adam,
    init_bilinear,
    init_encoder,
    params_from_json_dict,
    params_to_json_dict,
    step,
)
from fcre.geometry import euclidean
from fcre.inference import HEADS, MetricsReport, evaluate
from fcre.losses import Batch, HyperParams, joint_loss

logger = logging.getLogger(__name__)

FULL_BATCH_MAX = 64
MINIBATCH_SIZE = 32

DESCRIPTION_SOURCES = ("k-set", "raw-mean")


class ProtocolError(RuntimeError):
    """Violation of the task-stream contract (ordering, overlap, coverage)."""


def _as_matrix(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class Task:
    """One N-way few-shot task: disjoint train and test pools."""

    index: int
    relations: tuple[int, ...]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError(f"task index must be >= 1, got {self.index}")
        rels = tuple(int(r) for r in self.relations)
        if len(rels) == 0:
            raise ValueError("task must cover at least one relation")
        if len(set(rels)) != len(rels):
            raise ValueError(f"task {self.index} has duplicate relations: {rels}")
        object.__setattr__(self, "relations", tuple(sorted(rels)))
        object.__setattr__(self, "train_x", _as_matrix(self.train_x, "train_x"))
        object.__setattr__(self, "test_x", _as_matrix(self.test_x, "test_x"))
        object.__setattr__(self, "train_y", np.asarray(self.train_y, dtype=np.int64))
        object.__setattr__(self, "test_y", np.asarray(self.test_y, dtype=np.int64))
        if self.train_y.shape != (self.train_x.shape[0],):
            raise ValueError("train labels do not match train features")
        if self.test_y.shape != (self.test_x.shape[0],):
            raise ValueError("test labels do not match test features")
        if self.train_x.shape[1] != self.test_x.shape[1]:
            raise ValueError("train and test feature dimensions differ")
        rel_set = set(rels)
        for split, labels in ("train", self.train_y), ("test", self.test_y):
            extra = set(int(v) for v in labels) - rel_set
            if extra:
                raise ValueError(
                    f"task {self.index} {split} labels {sorted(extra)} are not in "
                    f"its relation set"
                )
        for r in rels:
            if not np.any(self.train_y == r):
                raise ValueError(f"task {self.index}: relation {r} has no train samples")
            if not np.any(self.test_y == r):
                raise ValueError(f"task {self.index}: relation {r} has no test samples")

    @property
    def feature_dim(self) -> int:
        return self.train_x.shape[1]

    @property
    def n_way(self) -> int:
        return len(self.relations)


@dataclass(frozen=True)
class TaskStream:
    """Tasks 1..T with pairwise-disjoint relation sets."""

    tasks: tuple[Task, ...]

    def __post_init__(self) -> None:
        tasks = tuple(self.tasks)
        object.__setattr__(self, "tasks", tasks)
        if len(tasks) == 0:
            raise ValueError("task stream is empty")
        indices = [t.index for t in tasks]
        if indices != list(range(1, len(tasks) + 1)):
            raise ValueError(f"task indices must be contiguous from 1, got {indices}")
        dims = {t.feature_dim for t in tasks}
        if len(dims) != 1:
            raise ValueError(f"tasks disagree on feature dimension: {sorted(dims)}")
        seen: set[int] = set()
        for t in tasks:
            overlap = seen & set(t.relations)
            if overlap:
                raise ValueError(
                    f"task {t.index} reuses relations {sorted(overlap)} from an "
                    "earlier task"
                )
            seen.update(t.relations)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def feature_dim(self) -> int:
        return self.tasks[0].feature_dim

    @property
    def relations(self) -> tuple[int, ...]:
        return tuple(sorted(r for t in self.tasks for r in t.relations))


class MemoryBuffer:
    """Append-only store of raw feature representatives per relation."""

    def __init__(self) -> None:
        self._entries: dict[int, np.ndarray] = {}

    def add(self, relation: int, features) -> None:
        relation = int(relation)
        if relation in self._entries:
            raise ProtocolError(
                f"memory for relation {relation} was already selected; "
                "memory is append-only"
            )
        block = _as_matrix(features, f"memory for relation {relation}")
        self._entries[relation] = block.copy()  # snapshot; callers may reuse buffers

    @property
    def relations(self) -> tuple[int, ...]:
        """Relations in insertion (task) order."""
        return tuple(self._entries)

    def __contains__(self, relation: int) -> bool:
        return int(relation) in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def total_samples(self) -> int:
        return sum(block.shape[0] for block in self._entries.values())

    def features(self, relation: int) -> np.ndarray:
        try:
            return self._entries[int(relation)]
        except KeyError:
            raise KeyError(f"no memory for relation {relation}") from None

    def stacked(self, exclude: set[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """All stored samples (insertion order) as one (X, y) pair."""
        exclude = exclude or set()
        xs = []
        ys = []
        for rel, block in self._entries.items():
            if rel in exclude:
                continue
            xs.append(block)
            ys.append(np.full(block.shape[0], rel, dtype=np.int64))
        if not xs:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        return np.concatenate(xs), np.concatenate(ys)


class PrototypeStore:
    """Relation id -> class-mean embedding under some encoder snapshot."""

    def __init__(self, prototypes: Mapping[int, np.ndarray] | None = None) -> None:
        self._protos: dict[int, np.ndarray] = {}
        for rel, vec in (prototypes or {}).items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.ndim != 1 or not np.all(np.isfinite(vec)):
                raise ValueError(f"prototype for relation {rel} must be a finite vector")
            self._protos[int(rel)] = vec.copy()

    @property
    def relations(self) -> tuple[int, ...]:
        return tuple(sorted(self._protos))

    def items(self):
        return [(r, self._protos[r]) for r in self.relations]

    def __getitem__(self, relation: int) -> np.ndarray:
        try:
            return self._protos[int(relation)]
        except KeyError:
            raise KeyError(f"no prototype for relation {relation}") from None

    def __contains__(self, relation: int) -> bool:
        return int(relation) in self._protos

    def __len__(self) -> int:
        return len(self._protos)


@dataclass
class ContinualState:
    """Everything that evolves while consuming a task stream."""

    encoder: EncoderParams
    bilinear: BilinearForm
    optimizer: AdamState
    memory: MemoryBuffer
    prototypes: PrototypeStore
    descriptions: DescriptionSet
    completed_tasks: list[Task] = field(default_factory=list)
    report: MetricsReport = field(default_factory=MetricsReport)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @property
    def seen_relations(self) -> tuple[int, ...]:
        return tuple(sorted(r for t in self.completed_tasks for r in t.relations))


def init_state(
    feature_dim: int,
    hidden_dim: int,
    embed_dim: int,
    hp: HyperParams,
    seed: int,
) -> ContinualState:
    """Fresh state: seeded encoder/bilinear init and one Adam over both."""
    hp.validate()
    rng = np.random.default_rng(seed)
    params = init_encoder(feature_dim, hidden_dim, embed_dim, rng)
    bilinear = init_bilinear(embed_dim, rng)
    optimizer = init_adam(params.n_params + embed_dim * embed_dim, hp.learning_rate)
    return ContinualState(
        encoder=params,
        bilinear=bilinear,
        optimizer=optimizer,
        memory=MemoryBuffer(),
        prototypes=PrototypeStore(),
        descriptions=DescriptionSet.empty(),
        rng=rng,
    )


def select_memory(
    samples_by_relation: Mapping[int, np.ndarray],
    encode_fn: Callable[[np.ndarray], np.ndarray],
    memory_size: int,
) -> dict[int, np.ndarray]:
    """Pick the ``memory_size`` most central samples of each relation.

    Centrality is Euclidean distance from the relation's embedding
    centroid (a 1-means fit); distance ties are resolved by the lower
    sample index.  Relations with fewer samples keep everything.
    """
    if memory_size < 1:
        raise ValueError(f"memory_size must be >= 1, got {memory_size}")
    if len(samples_by_relation) == 0:
        raise ValueError("no relations to select memory from")
    selected: dict[int, np.ndarray] = {}
    for rel in sorted(samples_by_relation):
        block = _as_matrix(samples_by_relation[rel], f"samples for relation {rel}")
        embedded = np.stack([np.asarray(encode_fn(row), dtype=np.float64) for row in block])
        centroid = embedded.mean(axis=0)
        dists = [euclidean(embedded[i], centroid) for i in range(block.shape[0])]
        order = sorted(range(block.shape[0]), key=lambda i: (dists[i], i))
        keep = order[: min(memory_size, block.shape[0])]
        selected[int(rel)] = block[keep].copy()
    return selected


def build_prototypes(
    memory: MemoryBuffer, encode_fn: Callable[[np.ndarray], np.ndarray]
) -> PrototypeStore:
    """Mean embedding of each relation's stored samples, freshly encoded.

    Pure function of (memory, encoder): calling it twice with the same
    arguments gives identical prototypes.
    """
    protos: dict[int, np.ndarray] = {}
    for rel in memory.relations:
        block = memory.features(rel)
        if block.shape[0] == 0:  # defensive; MemoryBuffer never stores empties
            logger.warning("relation %d has empty memory; skipping prototype", rel)
            continue
        embedded = np.stack([np.asarray(encode_fn(row), dtype=np.float64) for row in block])
        protos[rel] = embedded.mean(axis=0)
    return PrototypeStore(protos)


def _description_block(
    descriptions: DescriptionSet, labels: np.ndarray, source: str
) -> np.ndarray:
    rows = []
    for label in labels:
        rel = int(label)
        if rel not in descriptions:
            raise ProtocolError(f"no descriptions registered for relation {rel}")
        if source == "k-set":
            rows.append(descriptions.vectors(rel))
        else:
            rows.append(descriptions.mean(rel)[None, :])
    return np.stack(rows)


def _epoch_batches(n: int, rng: np.random.Generator) -> list[np.ndarray]:
    if n <= FULL_BATCH_MAX:
        return [np.arange(n)]
    perm = rng.permutation(n)
    batches = [perm[i : i + MINIBATCH_SIZE] for i in range(0, n, MINIBATCH_SIZE)]
    if len(batches) > 1 and batches[-1].size == 1:
        # Contrastive terms need at least a pair; fold the straggler in.
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _train(
    state: ContinualState,
    train_x: np.ndarray,
    train_y: np.ndarray,
    hp: HyperParams,
    epochs: int,
    description_source: str,
) -> None:
    n = train_x.shape[0]
    if epochs == 0 or n == 0:
        return
    if n == 1:
        logger.warning("training pool has a single sample; nothing to contrast, skipping")
        return
    encoder = state.encoder
    w = state.bilinear.matrix
    n_enc = encoder.n_params
    vec = np.concatenate([encoder.to_vector(), w.ravel()])
    for _ in range(epochs):
        for idx in _epoch_batches(n, state.rng):
            z = np.stack([encode(encoder, train_x[i]) for i in idx])
            batch = Batch(
                z=z,
                labels=train_y[idx],
                descriptions=_description_block(state.descriptions, train_y[idx], description_source),
            )
            result = joint_loss(batch, hp, w)
            grad_enc = np.zeros(n_enc)
            for row, i in enumerate(idx):
                g = result.grad_z[row]
                if np.any(g):
                    grad_enc += encode_backward(encoder, train_x[i], g)
            grads = np.concatenate([grad_enc, result.grad_w.ravel()])
            vec, state.optimizer = step(state.optimizer, vec, grads)
            encoder = encoder.with_vector(vec[:n_enc])
            w = vec[n_enc:].reshape(w.shape)
    state.encoder = encoder
    state.bilinear = BilinearForm(matrix=w)


def run_task(
    state: ContinualState,
    task: Task,
    descriptions: DescriptionSet,
    hp: HyperParams,
    heads: tuple[str, ...] = HEADS,
    description_source: str = "k-set",
) -> ContinualState:
    """Consume one task: train, remember, re-train, evaluate.

    ``descriptions`` must cover every relation of the task; only those
    relations are absorbed into the state.  Appends one metrics row per
    head and returns the (mutated) state.
    """
    hp.validate()
    if description_source not in DESCRIPTION_SOURCES:
        raise ValueError(
            f"description_source must be one of {DESCRIPTION_SOURCES}, "
            f"got {description_source!r}"
        )
    for head in heads:
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")
    expected_index = len(state.completed_tasks) + 1
    if task.index != expected_index:
        raise ProtocolError(
            f"tasks must arrive in order: expected task {expected_index}, "
            f"got task {task.index}"
        )
    overlap = set(task.relations) & set(state.seen_relations)
    if overlap:
        raise ProtocolError(
            f"task {task.index} reuses already-seen relations {sorted(overlap)}"
        )
    if task.feature_dim != state.encoder.feature_dim:
        raise ValueError(
            f"task features have dimension {task.feature_dim}, encoder expects "
            f"{state.encoder.feature_dim}"
        )
    missing = [r for r in task.relations if r not in descriptions]
    if missing:
        raise ProtocolError(
            f"descriptions missing for relations {missing} of task {task.index}"
        )
    new_descriptions = descriptions.subset(task.relations)
    if new_descriptions.dim != state.encoder.embed_dim:
        raise ValueError(
            f"description dimension {new_descriptions.dim} does not match "
            f"embedding dimension {state.encoder.embed_dim}"
        )
    state.descriptions = state.descriptions.union(new_descriptions)

    _train(state, task.train_x, task.train_y, hp, hp.epochs_current, description_source)

    per_relation = {r: task.train_x[task.train_y == r] for r in task.relations}
    selected = select_memory(
        per_relation, lambda row: encode(state.encoder, row), hp.memory_size
    )
    for rel in sorted(selected):
        state.memory.add(rel, selected[rel])
    state.prototypes = build_prototypes(
        state.memory, lambda row: encode(state.encoder, row)
    )

    old_x, old_y = state.memory.stacked(exclude=set(task.relations))
    if old_x.shape[0] > 0:
        replay_x = np.concatenate([old_x, task.train_x])
        replay_y = np.concatenate([old_y, task.train_y])
    else:
        replay_x, replay_y = task.train_x, task.train_y
    _train(state, replay_x, replay_y, hp, hp.epochs_memory, description_source)

    state.prototypes = build_prototypes(
        state.memory, lambda row: encode(state.encoder, row)
    )
    state.completed_tasks.append(task)
    for head in heads:
        state.report.add(evaluate(state, task.index, head, hp))
    return state


def checkpoint_dict(state: ContinualState) -> dict:
    """JSON-safe snapshot taken after the most recent completed task."""
    return {
        "task_index": len(state.completed_tasks),
        "relations": list(state.seen_relations),
        "encoder": params_to_json_dict(state.encoder),
        "bilinear": {
            "dim": state.bilinear.dim,
            "data": floats_to_b64(state.bilinear.matrix.ravel()),
        },
        "memory": [
            {
                "relation": int(rel),
                "count": int(state.memory.features(rel).shape[0]),
                "feature_dim": int(state.memory.features(rel).shape[1]),
                "data": floats_to_b64(state.memory.features(rel).ravel()),
            }
            for rel in state.memory.relations
        ],
    }


def write_checkpoint(path, state: ContinualState) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(checkpoint_dict(state), fh, sort_keys=True)
        fh.write("\n")


def read_checkpoint(path) -> dict:
    """Load a checkpoint back into live objects.

    Returns a dict with keys: task_index, relations, encoder
    (EncoderParams), bilinear (BilinearForm), memory (MemoryBuffer).
    """
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    encoder = params_from_json_dict(obj["encoder"])
    dim = int(obj["bilinear"]["dim"])
    bilinear = BilinearForm(
        matrix=floats_from_b64(obj["bilinear"]["data"], dim * dim).reshape(dim, dim)
    )
    memory = MemoryBuffer()
    for entry in obj["memory"]:
        count = int(entry["count"])
        fdim = int(entry["feature_dim"])
        memory.add(
            entry["relation"],
            floats_from_b64(entry["data"], count * fdim).reshape(count, fdim),
        )
    return {
        "task_index": int(obj["task_index"]),
        "relations": [int(r) for r in obj["relations"]],
        "encoder": encoder,
        "bilinear": bilinear,
        "memory": memory,
    }
