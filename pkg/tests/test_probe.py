import numpy as np
import pytest
import torch

from jepalab.config import ProbeConfig
from jepalab.probe import LARS, SGD_NESTEROV_PRESET, ProbeHead, evaluate_probe, predict_probe, train_probe


def _two_gaussians(rng, n=200, d=10):
    y = np.repeat([0, 1], n // 2)
    X = rng.normal(size=(n, d))
    X[:, 0] += np.where(y == 1, 6.0, -6.0)
    return X, y


def test_separable_two_class(rng):
    X, y = _two_gaussians(rng)
    head = train_probe(X, y, ProbeConfig(epochs=20, batch_size=32))
    assert evaluate_probe(head, X, y) >= 0.99


def test_shuffled_labels_score_chance(rng):
    C = 4
    X = rng.normal(size=(800, 16))
    y = rng.integers(0, C, size=800)
    head = train_probe(X[:400], y[:400], ProbeConfig(epochs=10, batch_size=64), n_classes=C)
    assert abs(evaluate_probe(head, X[400:], y[400:]) - 1 / C) <= 0.1


def test_zero_variance_feature_is_finite(rng):
    X, y = _two_gaussians(rng)
    X[:, 3] = 2.0
    head = train_probe(X, y, ProbeConfig(epochs=3, batch_size=32))
    assert all(torch.isfinite(p).all() for p in head.parameters())
    assert np.isfinite(head(torch.as_tensor(X, dtype=torch.float32)).detach().numpy()).all()


def test_constant_head_scores_one_over_c():
    head = ProbeHead(3, 4)
    head.eval()
    y = np.repeat(np.arange(4), 5)  # balanced
    # zero weights: every logit ties, argmax picks class 0
    assert evaluate_probe(head, np.random.default_rng(0).normal(size=(20, 3)), y) == 0.25


def test_memorizing_head_on_its_train_set(rng):
    X = rng.normal(size=(20, 40))
    y = np.arange(20) % 5
    head = train_probe(X, y, SGD_NESTEROV_PRESET)
    assert evaluate_probe(head, X, y) == pytest.approx(float(np.mean(predict_probe(head, X) == y)))
    assert evaluate_probe(head, X, y) == 1.0


def test_empty_eval_set_is_error():
    with pytest.raises(ValueError):
        evaluate_probe(ProbeHead(3, 2), np.zeros((0, 3)), np.zeros(0))


def test_single_class_is_error(rng):
    with pytest.raises(ValueError):
        train_probe(rng.normal(size=(10, 3)), np.zeros(10, dtype=int))


def test_scale_invariance_of_predictions(rng):
    X, y = _two_gaussians(rng)
    # the rescale only moves the norm epsilon's relative weight, so use a head
    # trained far enough that no sample sits on the decision boundary
    cfg = SGD_NESTEROV_PRESET
    a = predict_probe(train_probe(X, y, cfg), X)
    b = predict_probe(train_probe(X * 13.0, y, cfg), X * 13.0)
    assert np.array_equal(a, b)


def test_features_are_not_modified(rng):
    X, y = _two_gaussians(rng)
    before = X.copy()
    train_probe(X, y, ProbeConfig(epochs=2))
    assert np.array_equal(before, X)


def test_head_has_no_affine_norm():
    head = ProbeHead(5, 3)
    assert not head.norm.affine
    assert [n for n, _ in head.named_parameters()] == ["linear.weight", "linear.bias"]


def test_lars_trust_ratio_step():
    w = torch.nn.Parameter(torch.tensor([[3.0, 4.0]]))  # |w| = 5
    w.grad = torch.tensor([[0.0, 2.0]])  # |g| = 2
    opt = LARS([w], lr=0.1, momentum=0.9, trust_coefficient=0.001)
    opt.step()
    # update = lr * eta * |w| / |g| * g = 0.1 * 0.001 * 2.5 * g
    assert torch.allclose(w.detach(), torch.tensor([[3.0, 4.0 - 0.1 * 0.001 * 2.5 * 2.0]]))
