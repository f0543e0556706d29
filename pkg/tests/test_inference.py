import numpy as np
import pytest

pytest.importorskip("sklearn", reason="digits-based sanity checks need scikit-learn")
from sklearn.datasets import load_digits

from resnetsde.activations import IDENTITY, TANH
from resnetsde.inference import (CompletedResNet, Dataset, GramError, GramMatrix,
                                 TrainingDiverged, accuracy, build_gram,
                                 classify, cross_gram, krr_classify,
                                 krr_predict, make_one_hot, train,
                                 tune_learning_rate)
from resnetsde.kernels import KernelSpec
from resnetsde.rng import substream

E = np.e


def digit_split(n_train=1000, seed=0):
    digits = load_digits()
    inputs = digits.data / 16.0
    labels = digits.target
    perm = np.random.default_rng(seed).permutation(len(inputs))
    tr = Dataset(inputs[perm[:n_train]], make_one_hot(labels[perm[:n_train]], 10))
    te = Dataset(inputs[perm[n_train:]], make_one_hot(labels[perm[n_train:]], 10),
                 "test")
    return tr, te


def digit_kernel():
    return KernelSpec("completed_ntk", 1.0, 1.0, 0.01, sigma_z2=1.0 / 64,
                      sigma_y2=1.0)


# ---------------------------------------------------------------------------
# datasets and Gram matrices
# ---------------------------------------------------------------------------

def test_one_hot_round_trip():
    labels = np.array([3, 0, 9, 3])
    onehot = make_one_hot(labels, 10)
    assert onehot.shape == (4, 10)
    assert np.array_equal(np.argmax(onehot, axis=1), labels)
    assert np.allclose(onehot.sum(axis=1), 1.0)


def test_dataset_rejects_soft_targets():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), np.array([[0.5, 0.5, 0.0], [1.0, 0.0, 0.0]]))


def test_single_point_gram():
    spec = digit_kernel()
    z = np.ones((1, 4))
    gram = build_gram(spec, z)
    assert gram.matrix.shape == (1, 1)
    assert gram.jitter == 1.0
    from resnetsde.kernels import completed_ntk_kernel
    assert gram.matrix[0, 0] == pytest.approx(completed_ntk_kernel(z[0], z[0], spec))


def test_orthonormal_inputs_reference_values():
    spec = KernelSpec("completed_ntk", 1.0, 1.0, 0.01, sigma_z2=1.0,
                      sigma_y2=1.0)
    z = np.eye(2)
    gram = build_gram(spec, z, jitter=0.0)
    assert gram.matrix[0, 1] == pytest.approx(0.01 * (2 * E - 1))
    assert gram.matrix[0, 0] == pytest.approx(3 * E + 0.01 * (2 * E - 1))


def test_duplicate_rows_need_jitter():
    spec = digit_kernel()
    z = np.vstack([np.ones(3), np.ones(3), np.zeros(3)])
    gram = build_gram(spec, z, jitter=0.0)
    assert np.linalg.matrix_rank(gram.matrix) < 3
    jittered = build_gram(spec, z)  # default 1/N
    preds = krr_predict(jittered, make_one_hot([0, 0, 1], 2), jittered.matrix)
    assert np.all(np.isfinite(preds))


def test_indefinite_system_raises():
    gram = build_gram(digit_kernel(), np.eye(3), jitter=0.0)
    broken = GramMatrix(gram.matrix - 10.0 * np.eye(3), 0.0)
    with pytest.raises(GramError):
        krr_predict(broken, make_one_hot([0, 1, 2], 3), broken.matrix)


def test_interpolation_at_training_point():
    spec = digit_kernel()
    z = np.array([[1.0, 0.0], [0.0, 2.0], [1.5, 1.0]])
    targets = make_one_hot([0, 1, 2], 3)
    gram = build_gram(spec, z, jitter=1e-10)
    cross = cross_gram(spec, z, z[1:2])
    preds = krr_predict(gram, targets, cross)
    assert np.allclose(preds, targets[1], atol=1e-6)


def test_affine_kernel_reproduces_linear_interpolation():
    # three collinear points, targets linear in z: the affine-feature model
    # contains the truth, so the regularized solution recovers it
    spec = digit_kernel()
    z = np.array([[0.0], [1.0], [2.0]])
    targets = 2.0 * z + 1.0
    gram = build_gram(spec, z, jitter=1e-12)
    g = gram.matrix + gram.jitter * np.eye(3)
    weights = np.linalg.solve(g, targets)
    test_z = np.array([[0.5], [1.5]])
    preds = cross_gram(spec, z, test_z).T @ weights
    assert np.allclose(preds, 2.0 * test_z + 1.0, atol=1e-5)


def test_cholesky_solve_residual_invariant(rng):
    spec = digit_kernel()
    z = rng.standard_normal((40, 6))
    targets = make_one_hot(rng.integers(0, 4, size=40), 4)
    gram = build_gram(spec, z)
    g = gram.matrix + gram.jitter * np.eye(40)
    weights = np.linalg.solve(g, targets)
    krr_predict(gram, targets, gram.matrix)  # raises if residual too large
    assert np.linalg.norm(g @ weights - targets) <= 1e-8 * np.linalg.norm(targets)


def test_classify_breaks_ties_low():
    preds = np.array([[0.5, 0.5, 0.1], [0.1, 0.3, 0.3]])
    assert np.array_equal(classify(preds), [0, 1])


# ---------------------------------------------------------------------------
# training machinery
# ---------------------------------------------------------------------------

def tiny_model(**kw):
    defaults = dict(width=4, depth=8, n_inputs=3, n_outputs=2, phi=TANH,
                    sigma_b2=0.25, seed=11)
    defaults.update(kw)
    return CompletedResNet(**defaults)


def test_gradients_match_finite_differences():
    model = tiny_model()
    rng = substream(1, 0)
    inputs = rng.standard_normal((3, 3))
    targets = make_one_hot([0, 1, 0], 2)
    _, grads = model.loss_and_grads(inputs, targets)
    h = 1e-6
    worst = 0.0
    for key, grad in grads.items():
        flat_param = model.params[key]
        it = np.nditer(grad, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = flat_param[idx]
            flat_param[idx] = old + h
            up = model.loss(inputs, targets)
            flat_param[idx] = old - h
            down = model.loss(inputs, targets)
            flat_param[idx] = old
            fd = (up - down) / (2 * h)
            denom = max(abs(fd), abs(grad[idx]), 1e-8)
            worst = max(worst, abs(fd - grad[idx]) / denom)
    assert worst < 1e-5


def test_linear_tiny_net_gradient_against_composition():
    # phi = identity makes the model an explicit matrix product; finite
    # differences of that independent composition validate the first GD step
    model = tiny_model(width=2, depth=2, n_inputs=2, n_outputs=1, phi=IDENTITY)
    inputs = np.array([[1.0, -0.5], [0.3, 0.8]])
    targets = np.array([[1.0], [0.0]])

    def composed_loss(params):
        emb = model.in_scale * params["eps_in"]
        x = inputs @ emb.T
        for t in range(model.depth):
            x = x + x @ (model.w_scale * params["eps_w"][t]).T \
                + model.b_scale * params["eps_b"][t]
        out = x @ (model.out_scale * params["eps_out"]).T
        return float(np.mean((out - targets) ** 2))

    base_loss, grads = model.loss_and_grads(
        inputs, Dataset(inputs, make_one_hot([0, 0], 1)).targets * 0 + targets)
    assert base_loss == pytest.approx(composed_loss(model.params), rel=1e-12)
    h = 1e-7
    for key in grads:
        it = np.nditer(grads[key], flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = model.params[key][idx]
            model.params[key][idx] = old + h
            up = composed_loss(model.params)
            model.params[key][idx] = old - h
            down = composed_loss(model.params)
            model.params[key][idx] = old
            fd = (up - down) / (2 * h)
            assert grads[key][idx] == pytest.approx(fd, abs=1e-6, rel=1e-4)


def test_zero_learning_rate_keeps_parameters():
    model = tiny_model()
    before = {k: v.copy() for k, v in model.params.items()}
    data = Dataset(np.eye(3), make_one_hot([0, 1, 0], 2))
    history = train(model, data, "gd", lr=0.0, epochs=3, test_data=data)
    for key in before:
        assert np.array_equal(model.params[key], before[key])
    accs = [h["test_accuracy"] for h in history]
    assert len(set(accs)) == 1


def test_gd_equals_full_batch_sgd():
    data = Dataset(np.eye(3), make_one_hot([0, 1, 0], 2))
    m1 = tiny_model()
    m2 = tiny_model()
    train(m1, data, "gd", lr=0.5, epochs=4)
    train(m2, data, "sgd", lr=0.5, epochs=4, batch_size=3)
    for key in m1.params:
        assert np.allclose(m1.params[key], m2.params[key], atol=1e-14)


def test_adam_first_step_is_sign_step():
    model = tiny_model(width=1, depth=1, n_inputs=1, n_outputs=1)
    data = Dataset(np.array([[2.0]]), make_one_hot([0], 1))
    _, grads = model.loss_and_grads(data.inputs, data.targets)
    before = {k: v.copy() for k, v in model.params.items()}
    lr = 0.01
    train(model, data, "adam", lr=lr, epochs=1, batch_size=1)
    for key, grad in grads.items():
        g = float(grad.ravel()[0])
        if abs(g) < 1e-10:
            continue
        update = float((model.params[key] - before[key]).ravel()[0])
        assert update == pytest.approx(-lr * np.sign(g), rel=1e-6)


def test_divergence_reports_epoch():
    tr, _ = digit_split(200)
    model = CompletedResNet(16, 16, 64, 10, TANH, sigma_b2=0.01, seed=1)
    with pytest.raises(TrainingDiverged):
        with np.errstate(all="ignore"):
            train(model, tr, "gd", lr=1e4, epochs=50)


def test_learning_rate_sweep_returns_stable_rate():
    tr, _ = digit_split(300)

    def factory():
        return CompletedResNet(16, 16, 64, 10, TANH, sigma_b2=0.01, seed=2)

    with np.errstate(all="ignore"):
        best = tune_learning_rate(factory, tr, [1.0, 10.0, 1e4], epochs=4)
    assert best in (1.0, 10.0)


# ---------------------------------------------------------------------------
# end-to-end sanity on the bundled digits data (stand-in for the IDX runs)
# ---------------------------------------------------------------------------

def test_kernel_classification_on_digits():
    tr, te = digit_split()
    result = krr_classify(digit_kernel(), tr, te)
    assert result["accuracy"] >= 0.88


def test_converged_training_matches_kernel_accuracy_on_digits():
    # converged minibatch training lands on the kernel-regression accuracy
    tr, te = digit_split()
    kernel_acc = krr_classify(digit_kernel(), tr, te)["accuracy"]
    model = CompletedResNet(32, 32, 64, 10, TANH, sigma_b2=0.01, seed=3)
    history = train(model, tr, "sgd", lr=10.0, epochs=120, batch_size=100,
                    seed=5, test_data=te)
    assert abs(history[-1]["test_accuracy"] - kernel_acc) <= 0.03
    assert history[-1]["train_loss"] < history[0]["train_loss"]


def test_accuracy_helper():
    assert accuracy(np.array([1, 2, 3]), np.array([1, 0, 3])) == pytest.approx(2 / 3)
