import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from darl.exceptions import ParameterError
from darl.synthdata import (
    DEFAULT_PHASE,
    DaTask,
    ShiftSpec,
    apply_domain_shift,
    class_means,
    dataset_summary,
    generate_task,
    load_task,
    save_task,
)


def test_partition_and_labels():
    task = generate_task(seed=0, k_source=4, n_shared=2)
    assert task.shared_classes == {0, 1}
    assert task.outlier_classes == {2, 3}
    assert set(task.target_y_hidden.tolist()) <= {0, 1}


def test_sizes():
    task = generate_task(seed=1, per_class_count_src=7, per_class_count_tgt=5, k_source=5, n_shared=3, d_in=3)
    assert task.source_x.shape == (3, 35) and task.source_y.shape == (35,)
    assert task.target_x.shape == (3, 15) and task.target_y_hidden.shape == (15,)


@pytest.mark.parametrize("n_shared,k", [(0, 4), (4, 4), (5, 4)])
def test_invalid_counts(n_shared, k):
    with pytest.raises(ParameterError):
        generate_task(k_source=k, n_shared=n_shared)


def test_bad_separation():
    with pytest.raises(ParameterError):
        generate_task(class_separation=0.0)


def test_identity_shift_keeps_means():
    task = generate_task(
        seed=3, shift=ShiftSpec.identity(2), cluster_std=0.0, per_class_count_tgt=10, phase=DEFAULT_PHASE
    )
    means = class_means(4, 2, 4.0, DEFAULT_PHASE)
    for c in (0, 1):
        np.testing.assert_allclose(task.target_x[:, task.target_y_hidden == c].mean(axis=1), means[:, c], atol=1e-12)


def test_identity_shift_empirical_means_agree():
    task = generate_task(seed=4, shift=ShiftSpec.identity(2), per_class_count_src=2000, per_class_count_tgt=2000)
    for c in (0, 1):
        src = task.source_x[:, task.source_y == c].mean(axis=1)
        tgt = task.target_x[:, task.target_y_hidden == c].mean(axis=1)
        # two independent sample means, each with std 1/sqrt(2000)
        assert np.all(np.abs(src - tgt) < 4 * math.sqrt(2 / 2000))


def test_bit_reproducible():
    a, b = generate_task(seed=9), generate_task(seed=9)
    for name in ("source_x", "source_y", "target_x", "target_y_hidden"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert generate_task(seed=10).source_x.tobytes() != a.source_x.tobytes()


def test_wide_separation_is_linearly_separable():
    task = generate_task(seed=0, class_separation=6.0, cluster_std=0.5)
    clf = LogisticRegression(max_iter=2000).fit(task.source_x.T, task.source_y)
    assert clf.score(task.source_x.T, task.source_y) >= 0.99


def test_means_on_circle():
    m = class_means(6, 3, 2.5, phase=0.3)
    np.testing.assert_allclose(np.hypot(m[0], m[1]), 2.5)
    assert not m[2].any()
    d = np.linalg.norm(m - np.roll(m, 1, axis=1), axis=0)
    np.testing.assert_allclose(d, d[0])


class TestShift:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(2, 20))
        np.testing.assert_array_equal(apply_domain_shift(x, ShiftSpec.identity(2), 0), x)

    def test_rotation_by_pi(self):
        out = apply_domain_shift(np.array([[1.0], [0.0]]), ShiftSpec(math.pi, (0, 0), (1, 1), 0.0), 0)
        np.testing.assert_allclose(out[:, 0], [-1.0, 0.0], atol=1e-12)

    def test_translation_statistics(self):
        sigma, n = 0.5, 1000
        x = np.zeros((2, n))
        out = apply_domain_shift(x, ShiftSpec(0.0, (10, 0), (1, 1), sigma), 7)
        assert np.all(np.abs(out.mean(axis=1) - [10.0, 0.0]) < 3 * sigma / math.sqrt(n))

    def test_higher_dims_pad(self):
        x = np.ones((4, 3))
        out = apply_domain_shift(x, ShiftSpec(0.0, (1, 2), (2, 3), 0.0), 0)
        np.testing.assert_allclose(out[:, 0], [3, 5, 1, 1])

    def test_too_many_components(self):
        with pytest.raises(ParameterError):
            apply_domain_shift(np.ones((1, 2)), ShiftSpec(0.0, (1, 2), (1, 1), 0.0), 0)

    def test_scale_must_be_positive(self):
        with pytest.raises(ParameterError):
            ShiftSpec(scale=(1.0, 0.0))

    def test_seeded(self):
        x = np.ones((2, 5))
        a = apply_domain_shift(x, ShiftSpec(), 3)
        assert a.tobytes() == apply_domain_shift(x, ShiftSpec(), 3).tobytes()


class TestSummary:
    def test_counts(self):
        s = dataset_summary(generate_task(seed=0, per_class_count_src=50, k_source=4))
        assert s["source_counts"] == {0: 50, 1: 50, 2: 50, 3: 50} and s["n_source"] == 200

    def test_two_nonzero_target_classes(self):
        s = dataset_summary(generate_task(seed=0, n_shared=2))
        assert sum(1 for v in s["target_counts"].values() if v) == 2

    @given(st.integers(0, 500), st.integers(2, 6), st.integers(1, 9), st.integers(1, 9))
    @settings(max_examples=20, deadline=None)
    def test_matches_recount(self, seed, k, n_src, n_tgt):
        task = generate_task(seed=seed, k_source=k, n_shared=1 + seed % (k - 1),
                             per_class_count_src=n_src, per_class_count_tgt=n_tgt)
        s = dataset_summary(task)
        for c in range(k):
            assert s["source_counts"][c] == int(np.sum(task.source_y == c))
            assert s["target_counts"][c] == int(np.sum(task.target_y_hidden == c))
        assert sum(s["source_counts"].values()) == task.n_source
        assert sum(s["target_counts"].values()) == task.n_target


class TestTaskFiles:
    def test_round_trip(self, tmp_path):
        task = generate_task(seed=5, d_in=3)
        save_task(task, tmp_path / "t.txt")
        back = load_task(tmp_path / "t.txt")
        for name in ("source_x", "source_y", "target_x", "target_y_hidden"):
            assert getattr(back, name).tobytes() == getattr(task, name).astype(getattr(back, name).dtype).tobytes()
        assert back.shift == task.shift and back.shared_classes == task.shared_classes

    def test_unlabelled_round_trip(self, tmp_path):
        t = generate_task(seed=1)
        task = DaTask(t.source_x, t.source_y, t.target_x, None, None, t.k_source)
        save_task(task, tmp_path / "u.txt")
        back = load_task(tmp_path / "u.txt")
        assert back.target_y_hidden is None and back.shared_classes is None
        assert back.target_x.tobytes() == t.target_x.tobytes()

    def test_count_mismatch(self, tmp_path):
        save_task(generate_task(seed=0), tmp_path / "t.txt")
        lines = (tmp_path / "t.txt").read_text().splitlines()
        (tmp_path / "t.txt").write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(ParameterError):
            load_task(tmp_path / "t.txt")


def test_task_rejects_target_outside_shared():
    t = generate_task(seed=0)
    with pytest.raises(ParameterError):
        DaTask(t.source_x, t.source_y, t.target_x, np.full(t.n_target, 3), frozenset({0, 1}), 4)


def test_summary_without_partition():
    task = generate_task(seed=0)
    blind = DaTask(task.source_x, task.source_y, task.target_x, None, None, 4)
    summary = dataset_summary(blind)
    assert blind.outlier_classes is None and "shared_classes" not in summary
    assert summary["n_target"] == task.n_target
