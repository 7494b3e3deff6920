"""Task lifecycle: memory selection, prototypes, replay, checkpoints."""

import numpy as np
import pytest

from fcre.continual import (
    ContinualState,
    MemoryBuffer,
    ProtocolError,
    PrototypeStore,
    Task,
    TaskStream,
    _epoch_batches,
    build_prototypes,
    init_state,
    read_checkpoint,
    run_task,
    select_memory,
    write_checkpoint,
)
from fcre.descriptions import DescriptionSet, synth_descriptions
from fcre.encoder import encode
from fcre.inference import evaluate
from fcre.losses import HyperParams

HP = HyperParams(epochs_current=2, epochs_memory=2)


def make_task(index, relations, rng, feature_dim=6, shots=4, test_n=3):
    rels = list(relations)
    train_x, train_y, test_x, test_y = [], [], [], []
    for rel in rels:
        center = rng.normal(size=feature_dim)
        center /= np.linalg.norm(center)
        train_x.append(center + 0.05 * rng.normal(size=(shots, feature_dim)))
        train_y.extend([rel] * shots)
        test_x.append(center + 0.05 * rng.normal(size=(test_n, feature_dim)))
        test_y.extend([rel] * test_n)
    return Task(
        index=index,
        relations=tuple(rels),
        train_x=np.concatenate(train_x),
        train_y=np.array(train_y),
        test_x=np.concatenate(test_x),
        test_y=np.array(test_y),
    )


def make_descriptions(relations, embed_dim, seed=0, k_desc=2):
    rng = np.random.default_rng(seed + 100)
    centers = {r: rng.normal(size=embed_dim) for r in relations}
    return synth_descriptions(seed, centers, k_desc=k_desc, spread=0.1)


def fresh_state(seed=0, feature_dim=6, hidden_dim=8, embed_dim=4, hp=HP):
    return init_state(feature_dim, hidden_dim, embed_dim, hp, seed)


class TestTaskValidation:
    def test_relations_sorted_and_deduped(self):
        rng = np.random.default_rng(42)
        task = make_task(1, [3, 1], rng)
        assert task.relations == (1, 3)

    def test_duplicate_relations_rejected(self):
        rng = np.random.default_rng(42)
        base = make_task(1, [0, 1], rng)
        with pytest.raises(ValueError, match="duplicate"):
            Task(1, (0, 0), base.train_x, base.train_y, base.test_x, base.test_y)

    def test_labels_outside_relations_rejected(self):
        rng = np.random.default_rng(42)
        base = make_task(1, [0, 1], rng)
        with pytest.raises(ValueError, match="not in"):
            Task(1, (0, 2), base.train_x, base.train_y, base.test_x, base.test_y)

    def test_empty_test_pool_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            Task(
                1,
                (0,),
                np.ones((2, 3)),
                np.zeros(2, dtype=int),
                np.empty((0, 3)),
                np.empty(0, dtype=int),
            )

    def test_relation_without_test_samples_rejected(self):
        # relation 1 appears in the registry but never in the test pool
        with pytest.raises(ValueError, match="relation 1 has no test samples"):
            Task(
                1,
                (0, 1),
                np.ones((2, 3)),
                np.array([0, 1]),
                np.ones((2, 3)),
                np.array([0, 0]),
            )

    def test_relation_without_train_samples_rejected(self):
        with pytest.raises(ValueError, match="relation 1 has no train samples"):
            Task(
                1,
                (0, 1),
                np.ones((2, 3)),
                np.array([0, 0]),
                np.ones((2, 3)),
                np.array([0, 1]),
            )

    def test_index_must_be_positive(self):
        rng = np.random.default_rng(42)
        base = make_task(1, [0], rng)
        with pytest.raises(ValueError, match="task index"):
            Task(0, (0,), base.train_x, base.train_y, base.test_x, base.test_y)


class TestTaskStream:
    def test_valid_stream(self):
        rng = np.random.default_rng(42)
        stream = TaskStream(tasks=(make_task(1, [0, 1], rng), make_task(2, [2, 3], rng)))
        assert stream.n_tasks == 2
        assert stream.relations == (0, 1, 2, 3)
        assert stream.feature_dim == 6

    def test_non_contiguous_indices_rejected(self):
        rng = np.random.default_rng(42)
        with pytest.raises(ValueError, match="contiguous from 1"):
            TaskStream(tasks=(make_task(1, [0], rng), make_task(3, [1], rng)))

    def test_shared_relations_rejected(self):
        rng = np.random.default_rng(42)
        with pytest.raises(ValueError, match="reuses relations"):
            TaskStream(tasks=(make_task(1, [0], rng), make_task(2, [0], rng)))

    def test_mixed_feature_dims_rejected(self):
        rng = np.random.default_rng(42)
        with pytest.raises(ValueError, match="feature dim"):
            TaskStream(
                tasks=(
                    make_task(1, [0], rng, feature_dim=6),
                    make_task(2, [1], rng, feature_dim=7),
                )
            )


class TestMemoryBuffer:
    def test_append_only(self):
        buf = MemoryBuffer()
        buf.add(3, np.ones((2, 4)))
        with pytest.raises(ProtocolError, match="append-only"):
            buf.add(3, np.zeros((1, 4)))

    def test_insertion_order_preserved(self):
        buf = MemoryBuffer()
        buf.add(5, np.ones((1, 2)))
        buf.add(2, np.ones((1, 2)))
        assert buf.relations == (5, 2)
        assert 5 in buf and 2 in buf and 7 not in buf
        assert len(buf) == 2
        assert buf.total_samples == 2

    def test_stacked_excludes_requested_relations(self):
        buf = MemoryBuffer()
        buf.add(0, np.zeros((2, 3)))
        buf.add(1, np.ones((1, 3)))
        x, y = buf.stacked(exclude={1})
        assert x.shape == (2, 3)
        np.testing.assert_array_equal(y, [0, 0])
        x_all, y_all = buf.stacked()
        assert x_all.shape == (3, 3)
        np.testing.assert_array_equal(y_all, [0, 0, 1])

    def test_stacked_empty(self):
        x, y = MemoryBuffer().stacked()
        assert x.shape == (0, 0) and y.shape == (0,)

    def test_stored_features_copied(self):
        buf = MemoryBuffer()
        block = np.ones((1, 2))
        buf.add(0, block)
        block[0, 0] = 99.0
        assert buf.features(0)[0, 0] == 1.0

    def test_entries_never_change_across_tasks(self):
        # the buffer only grows: earlier blocks stay bitwise intact
        rng = np.random.default_rng(42)
        hp = HyperParams(epochs_current=1, epochs_memory=1, memory_size=2)
        state = fresh_state(hp=hp)
        snapshots = {}
        for t in range(1, 4):
            rels = [2 * (t - 1), 2 * t - 1]
            task = make_task(t, rels, rng)
            descriptions = make_descriptions(rels, 4, seed=t)
            run_task(state, task, descriptions, hp, heads=("ncm",))
            for rel in state.memory.relations:
                stored = state.memory.features(rel)
                if rel in snapshots:
                    np.testing.assert_array_equal(stored, snapshots[rel])
                else:
                    snapshots[rel] = stored.copy()
        assert len(snapshots) == 6


class TestSelectMemory:
    def test_keeps_most_central_sample(self):
        # embeddings 0, 1, 10 have centroid 11/3; sample 1 is nearest
        samples = {0: np.array([[0.0], [1.0], [10.0]])}
        kept = select_memory(samples, lambda row: row, memory_size=1)
        np.testing.assert_array_equal(kept[0], [[1.0]])

    def test_distance_tie_prefers_lower_index(self):
        samples = {0: np.array([[-1.0], [1.0]])}  # both 1 away from centroid 0
        kept = select_memory(samples, lambda row: row, memory_size=1)
        np.testing.assert_array_equal(kept[0], [[-1.0]])

    def test_small_relations_keep_everything(self):
        samples = {0: np.array([[1.0], [2.0]])}
        kept = select_memory(samples, lambda row: row, memory_size=5)
        assert kept[0].shape == (2, 1)

    def test_selection_uses_embedding_space(self):
        # the encoder flips sign of the second coordinate's contribution,
        # changing which sample is central
        samples = {0: np.array([[0.0, 3.0], [1.0, 0.0], [2.0, 0.0]])}

        def encode_fn(row):
            return np.array([row[0]])  # drop the second feature entirely

        kept = select_memory(samples, encode_fn, memory_size=1)
        np.testing.assert_array_equal(kept[0], [[1.0, 0.0]])  # central in x only

    def test_matches_brute_force(self):
        from fcre.geometry import euclidean

        rng = np.random.default_rng(42)
        for _ in range(25):
            n_rel = int(rng.integers(1, 4))
            samples = {
                int(r): rng.normal(size=(int(rng.integers(1, 8)), 3))
                for r in rng.choice(20, size=n_rel, replace=False)
            }
            size = int(rng.integers(1, 4))
            proj = rng.normal(size=(3, 2))
            encode_fn = lambda row: row @ proj
            kept = select_memory(samples, encode_fn, size)
            assert sorted(kept) == sorted(samples)
            for rel, block in samples.items():
                emb = np.stack([encode_fn(row) for row in block])
                centroid = emb.mean(axis=0)
                dists = [euclidean(e, centroid) for e in emb]
                order = sorted(range(len(dists)), key=lambda i: (dists[i], i))
                expected = block[order[: min(size, len(dists))]]
                np.testing.assert_array_equal(kept[rel], expected)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError, match="memory_size"):
            select_memory({0: np.ones((1, 2))}, lambda r: r, 0)
        with pytest.raises(ValueError, match="no relations"):
            select_memory({}, lambda r: r, 1)


class TestBuildPrototypes:
    def test_mean_of_encoded_memory(self):
        buf = MemoryBuffer()
        buf.add(0, np.array([[1.0, 0.0], [3.0, 0.0]]))
        protos = build_prototypes(buf, lambda row: row * 2.0)
        np.testing.assert_allclose(protos[0], [4.0, 0.0])

    def test_idempotent_bitwise(self):
        rng = np.random.default_rng(42)
        buf = MemoryBuffer()
        buf.add(0, rng.normal(size=(3, 5)))
        buf.add(1, rng.normal(size=(2, 5)))
        state = fresh_state(feature_dim=5)
        fn = lambda row: encode(state.encoder, row)
        a = build_prototypes(buf, fn)
        b = build_prototypes(buf, fn)
        assert a.relations == b.relations
        for rel in a.relations:
            np.testing.assert_array_equal(a[rel], b[rel])

    def test_store_is_mapping_like(self):
        store = PrototypeStore({3: np.ones(2), 1: np.zeros(2)})
        assert store.relations == (1, 3)
        assert [rel for rel, _ in store.items()] == [1, 3]
        assert 3 in store and 0 not in store
        with pytest.raises(KeyError):
            store[7]


class TestEpochBatches:
    def test_small_pool_is_one_full_batch(self):
        rng = np.random.default_rng(0)
        batches = _epoch_batches(10, rng)
        assert len(batches) == 1
        np.testing.assert_array_equal(batches[0], np.arange(10))
        assert len(_epoch_batches(64, rng)) == 1

    def test_straggler_folded_into_last_batch(self):
        rng = np.random.default_rng(0)
        batches = _epoch_batches(65, rng)
        assert sorted(b.size for b in batches) == [32, 33]
        covered = np.sort(np.concatenate(batches))
        np.testing.assert_array_equal(covered, np.arange(65))

    def test_exact_multiple_keeps_uniform_batches(self):
        rng = np.random.default_rng(0)
        batches = _epoch_batches(96, rng)
        assert [b.size for b in batches] == [32, 32, 32]

    def test_shuffle_is_seeded(self):
        a = _epoch_batches(100, np.random.default_rng(5))
        b = _epoch_batches(100, np.random.default_rng(5))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)


class TestRunTaskProtocol:
    def setup_method(self):
        self.rng = np.random.default_rng(42)
        self.state = fresh_state()
        self.task1 = make_task(1, [0, 1], self.rng)
        self.task2 = make_task(2, [2, 3], self.rng)
        self.descriptions = make_descriptions([0, 1, 2, 3], 4)

    def test_out_of_order_task_rejected(self):
        with pytest.raises(ProtocolError, match="expected task 1"):
            run_task(self.state, self.task2, self.descriptions, HP)

    def test_repeated_relations_rejected(self):
        run_task(self.state, self.task1, self.descriptions, HP)
        again = make_task(2, [1, 4], self.rng)
        descriptions = self.descriptions.union(make_descriptions([4], 4, seed=9))
        with pytest.raises(ProtocolError, match="already-seen"):
            run_task(self.state, again, descriptions, HP)

    def test_missing_descriptions_rejected(self):
        with pytest.raises(ProtocolError, match="missing for relations"):
            run_task(self.state, self.task1, make_descriptions([0], 4), HP)

    def test_feature_dim_mismatch_rejected(self):
        wide = make_task(1, [0, 1], self.rng, feature_dim=9)
        with pytest.raises(ValueError, match="dimension 9"):
            run_task(self.state, wide, self.descriptions, HP)

    def test_description_dim_mismatch_rejected(self):
        bad = make_descriptions([0, 1], 5)
        with pytest.raises(ValueError, match="does not match"):
            run_task(self.state, bad and make_task(1, [0, 1], self.rng), bad, HP)

    def test_unknown_head_rejected(self):
        with pytest.raises(ValueError, match="unknown head"):
            run_task(self.state, self.task1, self.descriptions, HP, heads=("knn",))

    def test_unknown_description_source_rejected(self):
        with pytest.raises(ValueError, match="description_source"):
            run_task(
                self.state, self.task1, self.descriptions, HP, description_source="best"
            )


class TestRunTaskBehavior:
    def run_stream(self, state, hp, n_tasks=3, heads=("ncm", "dri"), seed=42):
        rng = np.random.default_rng(seed)
        for t in range(1, n_tasks + 1):
            rels = [2 * (t - 1), 2 * t - 1]
            task = make_task(t, rels, rng)
            descriptions = make_descriptions(rels, state.encoder.embed_dim, seed=t)
            run_task(state, task, descriptions, hp, heads=heads)
        return state

    def test_state_bookkeeping(self):
        state = self.run_stream(fresh_state(), HP)
        assert state.seen_relations == (0, 1, 2, 3, 4, 5)
        assert state.memory.relations == (0, 1, 2, 3, 4, 5)
        assert state.prototypes.relations == (0, 1, 2, 3, 4, 5)
        assert state.descriptions.relations == (0, 1, 2, 3, 4, 5)
        # one row per head per task, cumulative accuracy vectors grow
        assert len(state.report.rows) == 6
        for row in state.report.rows:
            assert len(row.acc_per_task) == row.task_index

    def test_memory_keeps_l_per_relation(self):
        hp = HyperParams(epochs_current=1, epochs_memory=1, memory_size=2)
        state = self.run_stream(fresh_state(hp=hp), hp)
        for rel in state.memory.relations:
            assert state.memory.features(rel).shape == (2, 6)

    def test_prototypes_match_final_encoder(self):
        state = self.run_stream(fresh_state(), HP)
        rebuilt = build_prototypes(state.memory, lambda row: encode(state.encoder, row))
        assert rebuilt.relations == state.prototypes.relations
        for rel in rebuilt.relations:
            np.testing.assert_array_equal(rebuilt[rel], state.prototypes[rel])

    def test_zero_epochs_leaves_encoder_untouched(self):
        hp = HyperParams(epochs_current=0, epochs_memory=0)
        state = fresh_state(hp=hp)
        before = state.encoder.to_vector().copy()
        w_before = state.bilinear.matrix.copy()
        state = self.run_stream(state, hp, n_tasks=2)
        np.testing.assert_array_equal(state.encoder.to_vector(), before)
        np.testing.assert_array_equal(state.bilinear.matrix, w_before)

    def test_zero_epoch_metrics_equal_frozen_encoder_evaluation(self):
        hp = HyperParams(epochs_current=0, epochs_memory=0)
        state = self.run_stream(fresh_state(hp=hp), hp, n_tasks=2, heads=("ncm",))
        # recompute by hand with the frozen encoder
        protos = {rel: state.prototypes[rel] for rel in state.prototypes.relations}
        for row in state.report.rows:
            for i in range(1, row.task_index + 1):
                task = state.completed_tasks[i - 1]
                hits = 0
                for x_row, y in zip(task.test_x, task.test_y):
                    z = encode(state.encoder, x_row)
                    pred = min(
                        sorted(protos),
                        key=lambda r: (float(np.linalg.norm(z - protos[r])), r),
                    )
                    hits += int(pred == int(y))
                np.testing.assert_allclose(
                    row.acc_per_task[i], hits / task.test_y.size, rtol=1e-12
                )

    def test_same_seed_reproduces_run_bitwise(self):
        a = self.run_stream(fresh_state(seed=3), HP)
        b = self.run_stream(fresh_state(seed=3), HP)
        np.testing.assert_array_equal(a.encoder.to_vector(), b.encoder.to_vector())
        np.testing.assert_array_equal(a.bilinear.matrix, b.bilinear.matrix)
        assert len(a.report.rows) == len(b.report.rows)
        for ra, rb in zip(a.report.rows, b.report.rows):
            assert ra == rb

    def test_different_seeds_diverge(self):
        a = self.run_stream(fresh_state(seed=3), HP)
        b = self.run_stream(fresh_state(seed=4), HP)
        assert not np.array_equal(a.encoder.to_vector(), b.encoder.to_vector())

    def test_evaluation_is_order_independent(self):
        state = self.run_stream(fresh_state(), HP, n_tasks=2, heads=("ncm",))
        # permute the last task's test pool and re-evaluate
        last = state.completed_tasks[-1]
        perm = np.random.default_rng(0).permutation(last.test_y.size)
        shuffled = Task(
            index=last.index,
            relations=last.relations,
            train_x=last.train_x,
            train_y=last.train_y,
            test_x=last.test_x[perm],
            test_y=last.test_y[perm],
        )
        baseline = evaluate(state, 2, "ncm", HP)
        state.completed_tasks[-1] = shuffled
        permuted = evaluate(state, 2, "ncm", HP)
        assert baseline == permuted

    def test_raw_mean_description_source_runs(self):
        state = fresh_state()
        rng = np.random.default_rng(42)
        task = make_task(1, [0, 1], rng)
        descriptions = make_descriptions([0, 1], 4)
        run_task(state, task, descriptions, HP, description_source="raw-mean")
        assert len(state.report.rows) == 2


class TestCheckpoint:
    def test_round_trip_restores_live_objects(self, tmp_path):
        rng = np.random.default_rng(42)
        state = fresh_state()
        task = make_task(1, [0, 1], rng)
        run_task(state, task, make_descriptions([0, 1], 4), HP)
        path = tmp_path / "task_01.json"
        write_checkpoint(path, state)
        loaded = read_checkpoint(path)
        assert loaded["task_index"] == 1
        assert loaded["relations"] == [0, 1]
        np.testing.assert_array_equal(
            loaded["encoder"].to_vector(), state.encoder.to_vector()
        )
        np.testing.assert_array_equal(
            loaded["bilinear"].matrix, state.bilinear.matrix
        )
        assert loaded["memory"].relations == state.memory.relations
        for rel in state.memory.relations:
            np.testing.assert_array_equal(
                loaded["memory"].features(rel), state.memory.features(rel)
            )

    def test_checkpoint_bytes_stable(self, tmp_path):
        rng = np.random.default_rng(42)
        state = fresh_state()
        task = make_task(1, [0, 1], rng)
        run_task(state, task, make_descriptions([0, 1], 4), HP)
        first = tmp_path / "a.json"
        second = tmp_path / "b.json"
        write_checkpoint(first, state)
        write_checkpoint(second, state)
        assert first.read_bytes() == second.read_bytes()
