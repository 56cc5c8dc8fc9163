"""Student forward/loss/gradient math, training, inference, persistence."""

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sensedict import (
    SenseDictionary,
    SenseSet,
    StudentModel,
    TrainConfig,
    ce_grad,
    ce_loss,
    infer_labels,
    init_student,
    load_model,
    nearest_sense,
    save_model,
    sense_logits,
    softmax_prob,
    student_forward,
    train,
)
from sensedict.distillation import FALLBACK_LABEL
from sensedict.errors import (
    ChecksumMismatch,
    DimMismatch,
    EmptyTrainingSet,
    LabelOutOfRange,
    StreamMisaligned,
)

from conftest import gaussian_corpus, semb_bytes


def sense_set(rows):
    rows = np.asarray(rows, dtype=np.float64)
    return SenseSet(
        token=1,
        senses=rows.astype(np.float32),
        counts=np.ones(len(rows), dtype=np.int64),
        total=len(rows),
    )


def random_model(rng, feature_dim, hidden_dim, teacher_dim, activation="tanh"):
    if hidden_dim > 0:
        return StudentModel(
            feature_dim=feature_dim,
            hidden_dim=hidden_dim,
            teacher_dim=teacher_dim,
            activation=activation,
            W1=rng.normal(size=(hidden_dim, feature_dim)),
            b1=rng.normal(size=hidden_dim),
            W2=rng.normal(size=(teacher_dim, hidden_dim)),
            b2=rng.normal(size=teacher_dim),
        )
    return StudentModel(
        feature_dim=feature_dim,
        hidden_dim=0,
        teacher_dim=teacher_dim,
        activation=activation,
        W1=None,
        b1=None,
        W2=rng.normal(size=(teacher_dim, feature_dim)),
        b2=rng.normal(size=teacher_dim),
    )


def forward_oracle(model, x):
    """Independent affine chain with explicit loops."""

    def matvec(W, v):
        out = np.zeros(W.shape[0])
        for i in range(W.shape[0]):
            s = 0.0
            for j in range(W.shape[1]):
                s += W[i, j] * v[j]
            out[i] = s
        return out

    def act(name, v):
        if name == "identity":
            return v.copy()
        if name == "relu":
            return np.asarray([max(t, 0.0) for t in v])
        return np.asarray([np.tanh(t) for t in v])

    if model.hidden_dim > 0:
        h = act(model.activation, matvec(model.W1, x) + model.b1)
        return matvec(model.W2, h) + model.b2
    return matvec(model.W2, x) + model.b2


class TestStudentForward:
    def test_identity_map(self):
        model = StudentModel(
            feature_dim=3, hidden_dim=0, teacher_dim=3, activation="identity",
            W1=None, b1=None, W2=np.eye(3), b2=np.zeros(3),
        )
        x = np.asarray([1.5, -2.0, 0.25])
        assert np.array_equal(student_forward(model, x), x)

    def test_zero_weights(self):
        model = StudentModel(
            feature_dim=2, hidden_dim=4, teacher_dim=3, activation="relu",
            W1=np.zeros((4, 2)), b1=np.zeros(4), W2=np.zeros((3, 4)), b2=np.zeros(3),
        )
        assert np.array_equal(student_forward(model, [5.0, 7.0]), np.zeros(3))

    @pytest.mark.parametrize("hidden", [0, 6])
    @pytest.mark.parametrize("activation", ["identity", "relu", "tanh"])
    def test_matches_loop_oracle(self, hidden, activation):
        rng = np.random.default_rng(42)
        for _ in range(20):
            model = random_model(rng, 5, hidden, 4, activation)
            x = rng.normal(size=5)
            got = student_forward(model, x)
            want = forward_oracle(model, x)
            assert np.max(np.abs(got - want)) < 1e-12

    def test_dim_mismatch(self):
        model = random_model(np.random.default_rng(0), 4, 0, 3)
        with pytest.raises(DimMismatch):
            student_forward(model, np.zeros(5))


class TestSenseLogits:
    def test_direct_dot(self):
        ss = sense_set([[1.0, 0.0], [0.0, 1.0]])
        assert sense_logits(ss, [3.0, 4.0]).tolist() == [3.0, 4.0]

    def test_zero_vector(self):
        ss = sense_set([[1.0, 2.0], [3.0, 4.0]])
        assert sense_logits(ss, [0.0, 0.0]).tolist() == [0.0, 0.0]

    def test_matches_loop(self):
        rng = np.random.default_rng(3)
        rows = rng.normal(size=(5, 7)).astype(np.float32).astype(np.float64)
        ss = sense_set(rows)
        n = rng.normal(size=7)
        want = [sum(rows[i][j] * n[j] for j in range(7)) for i in range(5)]
        assert np.allclose(sense_logits(ss, n), want, atol=1e-12)


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax_prob([2.0, 2.0, 2.0, 2.0]), 0.25)

    def test_analytic(self):
        p = softmax_prob([np.log(2.0), 0.0])
        assert np.allclose(p, [2.0 / 3.0, 1.0 / 3.0])

    def test_no_overflow(self):
        p = softmax_prob([1000.0, 0.0])
        assert np.isfinite(p).all()
        assert p[0] > 0.999999

    def test_shift_invariance(self):
        z = np.asarray([0.3, -1.2, 4.0])
        assert np.max(np.abs(softmax_prob(z + 123.456) - softmax_prob(z))) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(
            st.floats(min_value=-100, max_value=100, allow_nan=False),
            min_size=1,
            max_size=10,
        )
    )
    def test_valid_distribution(self, logits):
        p = softmax_prob(logits)
        assert abs(p.sum() - 1.0) < 1e-9
        assert np.all(p >= 0.0) and np.all(p <= 1.0)


class TestCeLoss:
    def test_certain(self):
        assert ce_loss([0.0, 1.0], 1) == 0.0

    def test_uniform_four(self):
        assert abs(ce_loss([0.25] * 4, 2) - np.log(4.0)) < 1e-12

    def test_matches_neg_log(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            p = softmax_prob(rng.normal(size=6))
            label = int(rng.integers(6))
            assert abs(ce_loss(p, label) - (-np.log(p[label]))) < 1e-12

    def test_floor(self):
        assert ce_loss([1.0, 0.0], 1) == -np.log(1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRange):
            ce_loss([0.5, 0.5], 2)


def tensor_relative_error(analytic, numeric):
    """Per-tensor gradient-check metric: ||a - n|| / (||a|| + ||n||)."""
    gap = np.linalg.norm(analytic - numeric)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale < 1e-12:
        return 0.0  # both sides vanish (e.g. the single-sense case)
    return float(gap / scale)


def finite_difference_grads(model, ss, x, label, step=1e-5):
    grads = {}
    for name, tensor in model.tensors().items():
        num = np.zeros_like(tensor)
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = tensor[idx]
            tensor[idx] = orig + step
            up = ce_loss(
                softmax_prob(sense_logits(ss, student_forward(model, x))), label
            )
            tensor[idx] = orig - step
            down = ce_loss(
                softmax_prob(sense_logits(ss, student_forward(model, x))), label
            )
            tensor[idx] = orig
            num[idx] = (up - down) / (2.0 * step)
        grads[name] = num
    return grads


class TestCeGrad:
    def test_one_hot_probability_zeroes_gradient(self):
        # two orthogonal far-apart senses drive p to one-hot
        ss = sense_set([[1000.0, 0.0], [0.0, 1000.0]])
        model = StudentModel(
            feature_dim=2, hidden_dim=0, teacher_dim=2, activation="identity",
            W1=None, b1=None, W2=np.eye(2), b2=np.zeros(2),
        )
        grads = ce_grad(model, ss, [1.0, 0.0], 0)
        for g in grads.values():
            assert np.max(np.abs(g)) < 1e-12

    def test_single_sense(self):
        ss = sense_set([[0.4, -0.3]])
        model = random_model(np.random.default_rng(1), 3, 0, 2)
        prob = softmax_prob(sense_logits(ss, student_forward(model, np.ones(3))))
        assert ce_loss(prob, 0) == 0.0
        grads = ce_grad(model, ss, np.ones(3), 0)
        for g in grads.values():
            assert np.max(np.abs(g)) == 0.0

    @pytest.mark.parametrize("hidden", [0, 12])
    def test_matches_finite_differences(self, hidden):
        rng = np.random.default_rng(99)
        for trial in range(20):
            k = int(rng.integers(1, 7))
            # unit-scale senses and Glorot weights keep the softmax away
            # from saturation, where finite differences lose all signal
            ss = sense_set(rng.normal(size=(k, 16)) / 4.0)
            model = init_student(8, hidden, 16, "tanh", seed=trial)
            x = rng.normal(size=8)
            label = int(rng.integers(k))
            analytic = ce_grad(model, ss, x, label)
            numeric = finite_difference_grads(model, ss, x, label)
            for name in analytic:
                rel = tensor_relative_error(analytic[name], numeric[name])
                assert rel < 1e-6, f"{name} rel err {rel:.2e}"

    def test_constant_logit_shift_leaves_grad_unchanged(self):
        # a sense coordinate shared by all senses turns a b2 offset into a
        # constant logit shift, which must not move any gradient
        rng = np.random.default_rng(7)
        rows = rng.normal(size=(4, 5))
        rows[:, -1] = 1.0
        ss = sense_set(rows)
        model = random_model(rng, 3, 0, 5, "identity")
        base = ce_grad(model, ss, np.ones(3), 2)
        shifted_model = random_model(rng, 3, 0, 5, "identity")
        for name, tensor in model.tensors().items():
            shifted_model.tensors()[name][...] = tensor
        shifted_model.b2[-1] += 57.0
        shifted = ce_grad(shifted_model, ss, np.ones(3), 2)
        for name in base:
            assert np.max(np.abs(base[name] - shifted[name])) < 1e-12

    def test_label_out_of_range(self):
        ss = sense_set([[1.0, 0.0]])
        model = random_model(np.random.default_rng(2), 2, 0, 2)
        with pytest.raises(LabelOutOfRange):
            ce_grad(model, ss, [1.0, 1.0], 1)


def make_training_dict(seed=29, n_tokens=20, dim=16):
    records, _, _ = gaussian_corpus(
        n_tokens=n_tokens, occurrences=90, seed=seed, dim=dim
    )
    from sensedict import BuildConfig, KmeansConfig, build_dictionary

    built = build_dictionary(
        io.BytesIO(semb_bytes(records, dim)),
        BuildConfig(kmeans=KmeansConfig(k=3, seed=seed), seed=seed),
    )
    return built, records


class TestTrain:
    def test_identity_control(self):
        built, records = make_training_dict()
        teacher = io.BytesIO(semb_bytes(records, 16))
        features = io.BytesIO(semb_bytes(records, 16))
        identity = StudentModel(
            feature_dim=16, hidden_dim=0, teacher_dim=16, activation="identity",
            W1=None, b1=None, W2=np.eye(16), b2=np.zeros(16),
        )
        _, trace = train(
            teacher, features, built, TrainConfig(epochs=3, seed=0),
            init_model=identity,
        )
        assert trace.epochs[0].epoch == 0
        assert trace.epochs[0].agreement == 1.0
        # the student already reproduces the teacher: agreement stays
        # perfect and the loss cannot rise materially
        for entry in trace.epochs:
            assert entry.agreement == 1.0
        assert trace.epochs[-1].mean_loss <= trace.epochs[0].mean_loss + 1e-9

    def test_learns_orthogonal_map(self):
        built, records = make_training_dict(seed=31)
        rng = np.random.default_rng(31)
        rotation, _ = np.linalg.qr(rng.normal(size=(16, 16)))
        pairs = [(t, rotation.T @ m + rng.normal(scale=0.01, size=16))
                 for t, m in records]
        split = int(0.8 * len(records))
        teacher = io.BytesIO(semb_bytes(records[:split], 16))
        features = io.BytesIO(semb_bytes(pairs[:split], 16))
        model, trace = train(
            teacher, features, built,
            TrainConfig(epochs=40, batch_size=32, learning_rate=1e-2, seed=1),
        )
        held_tokens = [t for t, _ in records[split:]]
        hits = 0
        for (token, m), (_, x) in zip(records[split:], pairs[split:]):
            want, _ = nearest_sense(built, token, m)
            got, _ = nearest_sense(built, token, student_forward(model, x))
            hits += want == got
        assert hits / len(held_tokens) >= 0.95
        assert trace.epochs[-1].agreement > trace.epochs[0].agreement

    def test_deterministic_weight_bytes(self):
        built, records = make_training_dict(seed=37, n_tokens=8)
        def run():
            teacher = io.BytesIO(semb_bytes(records, 16))
            features = io.BytesIO(semb_bytes(records, 16))
            model, _ = train(
                teacher, features, built,
                TrainConfig(epochs=3, seed=5), hidden_dim=6,
            )
            buf = io.BytesIO()
            save_model(model, buf)
            return buf.getvalue()

        assert run() == run()

    def test_skips_unlisted_tokens(self):
        built, records = make_training_dict(seed=41, n_tokens=4)
        extra = records + [(999, rng_vec) for rng_vec in
                           np.random.default_rng(0).normal(size=(10, 16))]
        teacher = io.BytesIO(semb_bytes(extra, 16))
        features = io.BytesIO(semb_bytes(extra, 16))
        _, trace = train(teacher, features, built, TrainConfig(epochs=1, seed=0))
        assert trace.skipped_records == 10

    def test_empty_stream(self):
        built, _ = make_training_dict(seed=43, n_tokens=2)
        teacher = io.BytesIO(semb_bytes([], 16))
        features = io.BytesIO(semb_bytes([], 16))
        with pytest.raises(EmptyTrainingSet):
            train(teacher, features, built, TrainConfig(epochs=1))

    def test_misaligned_streams(self):
        built, records = make_training_dict(seed=47, n_tokens=2)
        teacher = io.BytesIO(semb_bytes(records, 16))
        features = io.BytesIO(semb_bytes(records[:-1], 16))
        with pytest.raises(StreamMisaligned):
            train(teacher, features, built, TrainConfig(epochs=1))

    def test_token_mismatch(self):
        built, records = make_training_dict(seed=53, n_tokens=2)
        swapped = list(records)
        swapped[0] = (swapped[0][0] + 1, swapped[0][1])
        teacher = io.BytesIO(semb_bytes(records, 16))
        features = io.BytesIO(semb_bytes(swapped, 16))
        with pytest.raises(StreamMisaligned):
            train(teacher, features, built, TrainConfig(epochs=1))

    def test_sgd_also_trains(self):
        built, records = make_training_dict(seed=59, n_tokens=6)
        teacher = io.BytesIO(semb_bytes(records, 16))
        features = io.BytesIO(semb_bytes(records, 16))
        _, trace = train(
            teacher, features, built,
            TrainConfig(epochs=5, optimizer="sgd", learning_rate=0.5, seed=2),
        )
        assert trace.epochs[-1].mean_loss <= trace.epochs[0].mean_loss


class TestInferLabels:
    def test_identity_student_self_dominant(self):
        built, records = make_training_dict(seed=61, n_tokens=4)
        from sensedict import non_self_dominant_senses

        assert non_self_dominant_senses(built) == {}
        token = 2
        sense_vec = built.entries[token].senses_f64[1]
        identity = StudentModel(
            feature_dim=16, hidden_dim=0, teacher_dim=16, activation="identity",
            W1=None, b1=None, W2=np.eye(16), b2=np.zeros(16),
        )
        features = io.BytesIO(semb_bytes([(token, sense_vec)], 16))
        labels, fallbacks = infer_labels(identity, built, features)
        assert labels.tolist() == [1]
        assert fallbacks == 0

    def test_unknown_token_marker(self):
        built, _ = make_training_dict(seed=67, n_tokens=2)
        model = random_model(np.random.default_rng(0), 16, 0, 16)
        features = io.BytesIO(semb_bytes([(12345, np.ones(16))], 16))
        labels, fallbacks = infer_labels(model, built, features)
        assert labels.tolist() == [FALLBACK_LABEL]
        assert fallbacks == 1

    def test_composition_oracle(self):
        built, _ = make_training_dict(seed=71, n_tokens=10)
        rng = np.random.default_rng(4)
        model = random_model(rng, 8, 12, 16, "relu")
        records = [
            (int(rng.integers(10)), rng.normal(size=8)) for _ in range(10_000)
        ]
        features = io.BytesIO(semb_bytes(records, 8))
        labels, _ = infer_labels(model, built, features)
        for (token, x), got in zip(records, labels):
            want, _ = nearest_sense(built, token, student_forward(model, x))
            assert got == want


class TestModelPersistence:
    def test_round_trip_identical(self):
        rng = np.random.default_rng(8)
        model = random_model(rng, 5, 7, 4)
        # float32-representable weights make the round trip lossless
        for tensor in model.tensors().values():
            tensor[...] = tensor.astype(np.float32)
        buf = io.BytesIO()
        save_model(model, buf)
        loaded = load_model(io.BytesIO(buf.getvalue()))
        for name, tensor in model.tensors().items():
            assert np.array_equal(loaded.tensors()[name], tensor)
        again = io.BytesIO()
        save_model(loaded, again)
        assert again.getvalue() == buf.getvalue()

    def test_corrupted_byte(self):
        model = random_model(np.random.default_rng(9), 3, 0, 2)
        buf = io.BytesIO()
        save_model(model, buf)
        data = bytearray(buf.getvalue())
        data[25] ^= 0xFF
        with pytest.raises(ChecksumMismatch):
            load_model(io.BytesIO(bytes(data)))

    def test_linear_model_has_no_hidden_payload(self):
        model = random_model(np.random.default_rng(10), 3, 0, 2)
        buf = io.BytesIO()
        size = save_model(model, buf)
        # header 22 + W2 (2x3) + b2 (2) at 4 bytes each + CRC 4
        assert size == 22 + (6 + 2) * 4 + 4
        loaded = load_model(io.BytesIO(buf.getvalue()))
        assert loaded.W1 is None and loaded.b1 is None

    def test_glorot_init_shapes_and_determinism(self):
        a = init_student(4, 6, 3, "relu", seed=12)
        b = init_student(4, 6, 3, "relu", seed=12)
        assert np.array_equal(a.W1, b.W1) and np.array_equal(a.W2, b.W2)
        assert np.all(a.b1 == 0.0) and np.all(a.b2 == 0.0)
        bound = np.sqrt(6.0 / (4 + 6))
        assert np.all(np.abs(a.W1) <= bound)
