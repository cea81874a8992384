import numpy as np
import pytest

from rescbm.bottleneck import batch_standardize, cosine_values
from rescbm.concept_bank import build_bank
from rescbm.concept_discovery import _subset_bank
from rescbm.data_io import EmbeddingMatrix, generate_synthetic_task
from rescbm.optimizer_core import AdamState, LinearClassifier, adam_step, forward
from rescbm.residual_trainer import (
    ResidualModel,
    TrainingConfig,
    init_residual_model,
    load_checkpoint,
    predict,
    residual_objective,
    save_checkpoint,
    stratified_split,
    train_pcbm,
    train_pcbm_h,
    train_residual,
    zero_shot,
)


@pytest.fixture(scope="module")
def planted_task():
    return generate_synthetic_task(400, 32, 40, 7, 3, 4, seed=7)


@pytest.fixture(scope="module")
def complete_task():
    return generate_synthetic_task(400, 32, 40, 7, 0, 4, seed=7)


def base_bank_of(task):
    tokens = set(task.candidate_bank.tokens[i] for i in task.base_token_indices)
    return _subset_bank(task.candidate_bank, tokens)


class TestStratifiedSplit:
    def test_deterministic_and_disjoint(self):
        labels = np.repeat(np.arange(4), 25)
        a_train, a_val = stratified_split(labels, 0.2, seed=3)
        b_train, b_val = stratified_split(labels, 0.2, seed=3)
        assert np.array_equal(a_train, b_train) and np.array_equal(a_val, b_val)
        assert not set(a_train) & set(a_val)
        assert len(a_train) + len(a_val) == 100

    def test_per_class_fraction(self):
        labels = np.repeat(np.arange(4), 25)
        _, val = stratified_split(labels, 0.2, seed=3)
        counts = np.bincount(labels[val], minlength=4)
        assert np.all(counts == 5)


class TestTrainPcbm:
    def test_complete_bank_reaches_high_accuracy(self, complete_task):
        cfg = TrainingConfig(epochs=150, seed=7, n_residual=0)
        _, _, trace = train_pcbm(
            complete_task.features, complete_task.labels.labels, base_bank_of(complete_task), cfg
        )
        assert trace.val_accuracy[-1] >= 0.9

    def test_decisive_concept_gets_largest_weight(self):
        rng = np.random.default_rng(0)
        bank_rows = rng.standard_normal((5, 16))
        bank = build_bank([f"t{i}" for i in range(5)], EmbeddingMatrix(bank_rows))
        n = 200
        labels = (np.arange(n) % 2).astype(np.int64)
        signs = np.where(labels == 1, 1.0, -1.0)
        feats = signs[:, None] * bank.embeddings.data[0] + 0.05 * rng.standard_normal((n, 16))
        cfg = TrainingConfig(epochs=120, seed=1, n_residual=0)
        psi_c, _, _ = train_pcbm(EmbeddingMatrix(feats), labels, bank, cfg)
        column_norms = np.linalg.norm(psi_c.weights, axis=0)
        assert int(np.argmax(column_norms)) == 0

    def test_huge_lambda_collapses_to_majority(self):
        rng = np.random.default_rng(1)
        bank = build_bank(["a", "b"], EmbeddingMatrix(rng.standard_normal((2, 8))))
        n = 200
        labels = (rng.random(n) < 0.3).astype(np.int64)  # class 0 is the majority
        feats = rng.standard_normal((n, 8))
        cfg = TrainingConfig(epochs=150, seed=1, n_residual=0, lam=1e6)
        psi_c, _, trace = train_pcbm(EmbeddingMatrix(feats), labels, bank, cfg)
        assert np.max(np.abs(psi_c.weights)) < 0.05
        train_idx, val_idx = stratified_split(labels, cfg.val_fraction, cfg.seed)
        majority = np.mean(labels[val_idx] == 0)
        assert trace.val_accuracy[-1] == pytest.approx(majority, abs=0.1)

    def test_empty_and_degenerate_inputs(self, complete_task):
        cfg = TrainingConfig(epochs=10, seed=0)
        with pytest.raises(ValueError, match="misaligned"):
            train_pcbm(
                complete_task.features,
                complete_task.labels.labels[:-1],
                base_bank_of(complete_task),
                cfg,
            )
        one_class = np.zeros(complete_task.features.rows, dtype=np.int64)
        with pytest.raises(ValueError, match="two classes"):
            train_pcbm(complete_task.features, one_class, base_bank_of(complete_task), cfg)


class TestTrainResidual:
    def test_d0_reduces_to_pcbm_bit_for_bit(self, planted_task):
        bank = base_bank_of(planted_task)
        cfg = TrainingConfig(epochs=40, seed=7, n_residual=0)
        psi_c, std, trace = train_pcbm(
            planted_task.features, planted_task.labels.labels, bank, cfg
        )
        model = init_residual_model(bank, 4, cfg)
        trained, trace_r = train_residual(
            model, planted_task.features, planted_task.labels.labels
        )
        assert np.array_equal(trained.psi_c.weights, psi_c.weights)
        assert np.array_equal(trained.psi_c.bias, psi_c.bias)
        assert trace_r.val_accuracy == trace.val_accuracy
        _, pred_a = predict(trained, planted_task.features, include_residual=True)
        direct = np.argmax(
            forward(
                psi_c,
                (
                    cosine_values(planted_task.features.data, bank.embeddings.data)
                    - std.means
                )
                / std.stds,
            ),
            axis=1,
        )
        assert np.array_equal(pred_a, direct)

    def test_planted_gap_at_least_five_points(self, planted_task):
        bank = base_bank_of(planted_task)
        cfg0 = TrainingConfig(epochs=150, seed=7, n_residual=0)
        _, _, base_trace = train_pcbm(
            planted_task.features, planted_task.labels.labels, bank, cfg0
        )
        cfg = TrainingConfig(epochs=150, seed=7, n_residual=3)
        model = init_residual_model(bank, 4, cfg)
        _, res_trace = train_residual(
            model, planted_task.features, planted_task.labels.labels
        )
        assert res_trace.val_accuracy[-1] - base_trace.val_accuracy[-1] >= 0.05

    def test_pass2_structurally_freezes_base_classifier(self, planted_task):
        # the combined objective has no base-classifier gradients at all, and
        # stepping it leaves an externally held psi_c untouched
        bank = base_bank_of(planted_task)
        cfg = TrainingConfig(epochs=5, seed=7, n_residual=3)
        model = init_residual_model(bank, 4, cfg)
        model, _ = train_residual(model, planted_task.features, planted_task.labels.labels)
        wc = model.psi_c.weights.copy()
        bc = model.psi_c.bias.copy()
        feats = planted_task.features.data[:64]
        labels = planted_task.labels.labels[:64]
        offset = np.zeros((64, 4))
        params = {
            "w": model.psi_r.weights.copy(),
            "b": model.psi_r.bias.copy(),
            "u": model.residual_vectors.copy(),
        }
        adam = AdamState.for_params(params, 0.01)
        for _ in range(10):
            loss, grads = residual_objective(
                params, offset, feats, labels, cfg.regularizer, cfg.epsilon
            )
            assert set(grads) == {"w", "b", "u"}
            params = adam_step(adam, params, grads)
        assert np.array_equal(model.psi_c.weights, wc)
        assert np.array_equal(model.psi_c.bias, bc)

    def test_training_is_deterministic(self, planted_task):
        bank = base_bank_of(planted_task)
        cfg = TrainingConfig(epochs=20, seed=5, n_residual=2)
        a, trace_a = train_residual(
            init_residual_model(bank, 4, cfg),
            planted_task.features,
            planted_task.labels.labels,
        )
        b, trace_b = train_residual(
            init_residual_model(bank, 4, cfg),
            planted_task.features,
            planted_task.labels.labels,
        )
        assert np.array_equal(a.psi_c.weights, b.psi_c.weights)
        assert np.array_equal(a.psi_r.weights, b.psi_r.weights)
        assert np.array_equal(a.residual_vectors, b.residual_vectors)
        assert trace_a.pass1_losses == trace_b.pass1_losses
        assert trace_a.val_accuracy == trace_b.val_accuracy


class TestPredict:
    def test_logits_additivity(self, planted_task):
        bank = base_bank_of(planted_task)
        cfg = TrainingConfig(epochs=30, seed=7, n_residual=3)
        model, _ = train_residual(
            init_residual_model(bank, 4, cfg),
            planted_task.features,
            planted_task.labels.labels,
        )
        full, _ = predict(model, planted_task.features, include_residual=True)
        base, _ = predict(model, planted_task.features, include_residual=False)
        r_std = batch_standardize(
            cosine_values(planted_task.features.data, model.residual_vectors),
            model.config.epsilon,
        )
        residual_part = forward(model.psi_r, r_std)
        assert np.array_equal(full, base + residual_part)

    def test_argmax_matches_exhaustive_oracle(self, planted_task):
        bank = base_bank_of(planted_task)
        cfg = TrainingConfig(epochs=10, seed=3, n_residual=2)
        model, _ = train_residual(
            init_residual_model(bank, 4, cfg),
            planted_task.features,
            planted_task.labels.labels,
        )
        logits, labels = predict(model, planted_task.features)
        for i in range(0, 400, 37):
            best = 0
            for k in range(1, 4):
                if logits[i, k] > logits[i, best]:
                    best = k
            assert labels[i] == best

    def test_scale_invariance_of_predictions(self, planted_task):
        bank = base_bank_of(planted_task)
        cfg = TrainingConfig(epochs=10, seed=3, n_residual=2)
        model, _ = train_residual(
            init_residual_model(bank, 4, cfg),
            planted_task.features,
            planted_task.labels.labels,
        )
        _, a = predict(model, planted_task.features)
        scaled = EmbeddingMatrix(planted_task.features.data * 55.0)
        _, b = predict(model, scaled)
        assert np.array_equal(a, b)

    def test_untrained_model_rejected(self, planted_task):
        model = init_residual_model(base_bank_of(planted_task), 4, TrainingConfig())
        with pytest.raises(ValueError, match="standardizer"):
            predict(model, planted_task.features)


class TestPcbmH:
    def test_zero_init_head_matches_pcbm(self, planted_task):
        bank = base_bank_of(planted_task)
        cfg = TrainingConfig(epochs=30, seed=7, n_residual=0)
        model, _ = train_residual(
            init_residual_model(bank, 4, cfg),
            planted_task.features,
            planted_task.labels.labels,
        )
        head = LinearClassifier.zeros(4, planted_task.features.dim)
        base_logits, base_pred = predict(model, planted_task.features)
        hybrid = base_logits + forward(head, planted_task.features.data)
        assert np.array_equal(np.argmax(hybrid, axis=1), base_pred)

    def test_hybrid_beats_pcbm_on_training_data(self, planted_task):
        bank = base_bank_of(planted_task)
        labels = planted_task.labels.labels
        cfg = TrainingConfig(epochs=80, seed=7, n_residual=0)
        model, _ = train_residual(
            init_residual_model(bank, 4, cfg), planted_task.features, labels
        )
        train_idx, val_idx = stratified_split(labels, cfg.val_fraction, cfg.seed)
        head, _ = train_pcbm_h(planted_task.features, labels, model, cfg)
        base_logits, _ = predict(model, planted_task.features)
        hybrid_pred = np.argmax(
            base_logits + forward(head, planted_task.features.data), axis=1
        )
        base_pred = np.argmax(base_logits, axis=1)
        hybrid_acc = np.mean(hybrid_pred[train_idx] == labels[train_idx])
        base_acc = np.mean(base_pred[train_idx] == labels[train_idx])
        assert hybrid_acc >= base_acc


class TestZeroShot:
    def test_exact_class_embedding(self):
        classes = EmbeddingMatrix(np.eye(3))
        feats = EmbeddingMatrix(np.array([[0.0, 0.0, 5.0]]))
        assert zero_shot(feats, classes)[0] == 2

    def test_tie_goes_to_lowest_index(self):
        classes = EmbeddingMatrix(np.array([[1.0, 0.0], [0.0, 1.0]]))
        feats = EmbeddingMatrix(np.array([[1.0, 1.0]]))
        assert zero_shot(feats, classes)[0] == 0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        classes = EmbeddingMatrix(rng.standard_normal((4, 8)))
        feats = rng.standard_normal((20, 8))
        out = zero_shot(EmbeddingMatrix(feats), classes)
        for i in range(20):
            sims = [
                float(feats[i] @ classes.data[k])
                / (np.linalg.norm(feats[i]) * np.linalg.norm(classes.data[k]))
                for k in range(4)
            ]
            assert out[i] == int(np.argmax(sims))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, planted_task):
        bank = base_bank_of(planted_task)
        cfg = TrainingConfig(epochs=10, seed=7, n_residual=2)
        model, _ = train_residual(
            init_residual_model(bank, 4, cfg),
            planted_task.features,
            planted_task.labels.labels,
        )
        save_checkpoint(model, tmp_path / "ckpt")
        loaded = load_checkpoint(tmp_path / "ckpt")
        assert loaded.base_bank.tokens == model.base_bank.tokens
        assert loaded.config == model.config
        # parameters survive at file precision
        assert np.allclose(loaded.psi_c.weights, model.psi_c.weights, atol=1e-6)
        assert np.allclose(loaded.residual_vectors, model.residual_vectors, atol=1e-6)
        _, a = predict(model, planted_task.features)
        _, b = predict(loaded, planted_task.features)
        assert np.mean(a == b) > 0.99

    def test_untrained_model_refused(self, tmp_path, planted_task):
        model = init_residual_model(base_bank_of(planted_task), 4, TrainingConfig())
        with pytest.raises(ValueError, match="untrained"):
            save_checkpoint(model, tmp_path / "ckpt")
