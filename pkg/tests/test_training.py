"""Optimizer behavior, the training loop, and its bookkeeping."""
import numpy as np
import pytest

from sleeptransfer import training
from sleeptransfer.autodiff import Tensor
from sleeptransfer.features import FeatureSet
from sleeptransfer.models import EPB, SOFTMAX, SPB, build_model, seqsleepnet_config
from sleeptransfer.training import (
    Adam,
    TrainConfig,
    check_feature_set,
    clip_gradients,
    evaluate_accuracy,
    read_curve_csv,
    sequence_starts,
    train,
    write_curve_csv,
)


def adam_ref(p0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam recurrence, scalar-looped, written independently."""
    p = np.array(p0, dtype=np.float64)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p


def tiny_config(**kw):
    base = dict(L=3, n_channels=1, frame_count=5, n_bins=9, n_filters=4,
                epb_hidden=3, attention_size=3, spb_hidden=3, output_size=6,
                dropout=0.0)
    base.update(kw)
    return seqsleepnet_config(**base)


def separable_set(subjects, epochs_each, seed=0, frame_count=5, n_bins=9,
                  split_tag="all"):
    """One recording per subject; each epoch's class plants a bump at its
    own frequency bin, so the task is learnable by a tiny model."""
    rng = np.random.default_rng(seed)
    inputs, labels, subj_idx, rec_idx = [], [], [], []
    for r, _ in enumerate(subjects):
        labs = rng.integers(0, 5, size=epochs_each)
        x = 0.1 * rng.standard_normal((epochs_each, frame_count, n_bins, 1))
        for e, lab in enumerate(labs):
            x[e, :, lab, 0] += 2.0
        inputs.append(x)
        labels.append(labs)
        subj_idx.append(np.full(epochs_each, r))
        rec_idx.append(np.full(epochs_each, r))
    return FeatureSet(kind="spectrogram",
                      inputs=np.concatenate(inputs).astype(np.float32),
                      labels=np.concatenate(labels),
                      subject_index=np.concatenate(subj_idx),
                      recording_index=np.concatenate(rec_idx),
                      subjects=tuple(subjects), channel_names=("EEG",),
                      split_tag=split_tag)


class TestAdam:
    def make_params(self, shapes, seed=0):
        rng = np.random.default_rng(seed)
        return [(f"p{i}", Tensor(rng.standard_normal(s), requires_grad=True))
                for i, s in enumerate(shapes)]

    def test_first_step_magnitude_is_lr(self):
        # Constant gradient: bias-corrected m/sqrt(v) is sign(g), so the
        # first update has magnitude lr wherever the gradient is nonzero.
        params = self.make_params([(4,)])
        before = params[0][1].data.copy()
        params[0][1].grad = np.array([3.0, -0.5, 1e3, 2e-2])
        opt = Adam(params, lr=1e-2)
        opt.step()
        np.testing.assert_allclose(np.abs(params[0][1].data - before), 1e-2, rtol=1e-5)

    def test_matches_reference_over_many_steps(self):
        rng = np.random.default_rng(1)
        params = self.make_params([(3, 2), (5,)], seed=2)
        p0 = [t.data.copy() for _, t in params]
        grad_seq = [[rng.standard_normal(t.data.shape) for _, t in params]
                    for _ in range(7)]
        opt = Adam(params, lr=0.05)
        for gs in grad_seq:
            for (_, t), g in zip(params, gs):
                t.grad = g
            opt.step()
        for i, (_, t) in enumerate(params):
            ref = adam_ref(p0[i], [gs[i] for gs in grad_seq], lr=0.05)
            np.testing.assert_allclose(t.data, ref, atol=1e-12)

    def test_frozen_entries_are_bitwise_untouched(self):
        params = self.make_params([(3,), (3,)])
        frozen_before = params[0][1].data.copy()
        opt = Adam(params, lr=0.1)
        for _ in range(3):
            for _, t in params:
                t.grad = np.ones(3)
            opt.step(frozen=frozenset({"p0"}))
        assert params[0][1].data.tobytes() == frozen_before.tobytes()
        assert opt.state["p0"]["t"] == 0
        assert not opt.state["p0"]["m"].any() and not opt.state["p0"]["v"].any()
        assert opt.state["p1"]["t"] == 3
        assert not np.array_equal(params[1][1].data, frozen_before)

    def test_missing_gradient_rejected(self):
        params = self.make_params([(2,)])
        with pytest.raises(ValueError, match="missing gradient"):
            Adam(params, lr=0.1).step()

    def test_non_finite_gradient_aborts(self):
        params = self.make_params([(2,)])
        params[0][1].grad = np.array([1.0, np.nan])
        with pytest.raises(FloatingPointError, match="p0"):
            Adam(params, lr=0.1).step()


class TestClipping:
    def test_norm_and_scaling(self):
        t1 = Tensor(np.zeros(2), requires_grad=True)
        t2 = Tensor(np.zeros(1), requires_grad=True)
        t1.grad = np.array([3.0, 0.0])
        t2.grad = np.array([4.0])
        norm = clip_gradients([("a", t1), ("b", t2)], max_norm=1.0)
        assert norm == pytest.approx(5.0)
        total = np.sqrt(np.sum(t1.grad ** 2) + np.sum(t2.grad ** 2))
        assert total == pytest.approx(1.0)

    def test_below_threshold_untouched(self):
        t = Tensor(np.zeros(2), requires_grad=True)
        t.grad = np.array([0.3, 0.4])
        clip_gradients([("a", t)], max_norm=1.0)
        np.testing.assert_array_equal(t.grad, [0.3, 0.4])


class TestSequenceStarts:
    def test_counts_per_recording(self):
        fs = separable_set(["a", "b"], epochs_each=6)
        starts = sequence_starts(fs, 4)
        np.testing.assert_array_equal(starts, [0, 1, 2, 6, 7, 8])

    def test_short_recordings_contribute_nothing(self):
        fs = separable_set(["a"], epochs_each=2)
        assert len(sequence_starts(fs, 3)) == 0


class TestFeatureCheck:
    def test_kind_mismatch_rejected(self):
        fs = separable_set(["a"], 4)
        raw = FeatureSet(kind="raw", inputs=np.zeros((4, 3000, 1), dtype=np.float32),
                         labels=np.zeros(4, dtype=int), subject_index=np.zeros(4, dtype=int),
                         recording_index=np.zeros(4, dtype=int), subjects=("a",),
                         channel_names=("EEG",))
        with pytest.raises(ValueError, match="spectrogram"):
            check_feature_set(tiny_config(), raw)

    def test_shape_mismatch_rejected(self):
        fs = separable_set(["a"], 4, n_bins=11)
        with pytest.raises(ValueError, match="does not match"):
            check_feature_set(tiny_config(), fs)


class TestEvaluateAccuracy:
    def test_zeroed_model_predicts_first_class(self):
        fs = separable_set(["a", "b"], epochs_each=7, seed=3)
        model = build_model(tiny_config(), rng=0)
        model.store.zero_all()
        acc = evaluate_accuracy(model, fs)
        assert acc == pytest.approx(np.mean(fs.labels == 0))

    def test_all_recordings_too_short_rejected(self):
        fs = separable_set(["a"], epochs_each=2)
        model = build_model(tiny_config(), rng=0)
        with pytest.raises(ValueError, match="full window"):
            evaluate_accuracy(model, fs)


class TestTrainLoop:
    def test_learns_separable_task(self):
        fs = separable_set(["a", "b"], epochs_each=40, seed=4, split_tag="train")
        model = build_model(tiny_config(), rng=1)
        before = evaluate_accuracy(model, fs)
        cfg = TrainConfig(lr=3e-3, batch_size=8, max_passes=30, max_steps=250,
                          eval_every=50, seed=5)
        result = train(model, fs, cfg)
        after = evaluate_accuracy(model, fs)
        assert result.steps == 250
        assert after > 0.9 > before + 0.4
        losses = [v for _, split, metric, v in result.curve if metric == "loss"]
        assert losses[-1] < losses[0]

    def test_bitwise_deterministic(self):
        fs = separable_set(["a", "b"], epochs_each=20, seed=6, split_tag="train")
        val = separable_set(["c"], epochs_each=12, seed=7, split_tag="val")
        runs = []
        for _ in range(2):
            model = build_model(tiny_config(dropout=0.25), rng=2)
            cfg = TrainConfig(lr=1e-3, batch_size=8, max_passes=2, eval_every=5, seed=9)
            result = train(model, fs, cfg, val_set=val)
            runs.append((result.curve,
                         {n: t.data.tobytes() for n, t in model.store.named_tensors()}))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]

    def test_seed_changes_run(self):
        fs = separable_set(["a"], epochs_each=20, seed=6, split_tag="train")
        curves = []
        for seed in (1, 2):
            model = build_model(tiny_config(), rng=2)
            result = train(model, fs, TrainConfig(lr=1e-3, batch_size=4,
                                                  max_passes=1, eval_every=3, seed=seed))
            curves.append(result.curve)
        assert curves[0] != curves[1]

    def test_subject_overlap_rejected(self):
        fs = separable_set(["a", "b"], epochs_each=10, split_tag="train")
        val = separable_set(["b"], epochs_each=10, split_tag="val")
        model = build_model(tiny_config(), rng=0)
        with pytest.raises(ValueError, match="share subjects"):
            train(model, fs, TrainConfig(), val_set=val)

    def test_empty_training_set_rejected(self):
        fs = separable_set(["a"], epochs_each=2)
        model = build_model(tiny_config(), rng=0)
        with pytest.raises(ValueError, match="no full window"):
            train(model, fs, TrainConfig())

    def test_no_validation_means_no_early_stop(self):
        fs = separable_set(["a"], epochs_each=12, split_tag="train")
        model = build_model(tiny_config(), rng=0)
        cfg = TrainConfig(lr=1e-3, batch_size=4, max_passes=2, eval_every=2,
                          early_stop_patience=1, seed=0)
        result = train(model, fs, cfg)
        assert not result.stopped_early
        assert result.best_val_accuracy is None
        # 10 starts per pass, batch 4 -> 3 steps per pass, 2 passes.
        assert result.steps == 6

    def test_early_stop_restores_best(self, monkeypatch):
        fs = separable_set(["a"], epochs_each=15, split_tag="train")
        val = separable_set(["v"], epochs_each=8, seed=8, split_tag="val")
        scripted = iter([0.5, 0.9, 0.4, 0.3, 0.2])
        snapshots = {}

        def fake_eval(model, eval_fs, batch_size=32):
            acc = next(scripted)
            snapshots[acc] = {n: t.data.copy() for n, t in model.store.named_tensors()}
            return acc

        monkeypatch.setattr(training, "evaluate_accuracy", fake_eval)
        model = build_model(tiny_config(), rng=3)
        cfg = TrainConfig(lr=1e-3, batch_size=4, max_passes=50, eval_every=2,
                          early_stop_patience=2, seed=1)
        result = train(model, fs, cfg, val_set=val)
        assert result.stopped_early
        assert result.best_val_accuracy == 0.9
        assert result.best_step == 4
        assert result.steps == 8  # two more evaluations after the best one
        for n, t in model.store.named_tensors():
            assert t.data.tobytes() == snapshots[0.9][n].tobytes()

    def test_frozen_groups_stay_bitwise_fixed(self):
        fs = separable_set(["a"], epochs_each=20, split_tag="train")
        model = build_model(tiny_config(dropout=0.25), rng=4)
        before_p = {n: t.data.copy() for n, t in model.store.named_tensors()}
        before_b = {n: b.array.copy() for n, b in model.store.buffers()}
        cfg = TrainConfig(lr=1e-2, batch_size=4, max_passes=1, max_steps=4,
                          eval_every=100, seed=2)
        train(model, fs, cfg, frozen_groups=frozenset({EPB, SOFTMAX}))
        groups = {n: p.group for n, p in model.store.params()}
        for n, t in model.store.named_tensors():
            if groups[n] in (EPB, SOFTMAX):
                assert t.data.tobytes() == before_p[n].tobytes(), n
            else:
                assert not np.array_equal(t.data, before_p[n]), n
        # Frozen-group normalizer state is untouched; unfrozen groups update.
        buf_groups = {n: b.group for n, b in model.store.buffers()}
        changed = {n: not np.array_equal(b.array, before_b[n])
                   for n, b in model.store.buffers()}
        assert not any(changed[n] for n in changed if buf_groups[n] == EPB)
        assert any(changed[n] for n in changed if buf_groups[n] == SPB)

    def test_unknown_frozen_group_rejected(self):
        fs = separable_set(["a"], epochs_each=10, split_tag="train")
        model = build_model(tiny_config(), rng=0)
        with pytest.raises(ValueError, match="unknown parameter groups"):
            train(model, fs, TrainConfig(), frozen_groups=frozenset({"HEAD"}))

    def test_extra_eval_rows_tracked(self):
        fs = separable_set(["a"], epochs_each=12, split_tag="train")
        probe = separable_set(["p"], epochs_each=8, seed=9, split_tag="test")
        model = build_model(tiny_config(), rng=0)
        cfg = TrainConfig(lr=1e-3, batch_size=4, max_passes=2, eval_every=2, seed=0)
        result = train(model, fs, cfg, extra_eval=("test", probe))
        splits = {row[1] for row in result.curve}
        assert splits == {"train", "test"}


class TestCurveCsv:
    def test_round_trip(self, tmp_path):
        rows = [(2, "train", "loss", 1.5), (2, "val", "accuracy", 0.25),
                (4, "train", "loss", 0.75)]
        path = str(tmp_path / "curve.csv")
        write_curve_csv(rows, path)
        assert read_curve_csv(path) == rows

    def test_header_enforced(self, tmp_path):
        path = str(tmp_path / "bad.csv")
        with open(path, "w") as f:
            f.write("a,b\n1,2\n")
        with pytest.raises(ValueError, match="curve header"):
            read_curve_csv(path)
