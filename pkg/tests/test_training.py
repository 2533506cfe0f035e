import math

import numpy as np
import pytest
import torch

from threatformer_ids import autodiff as ad
from threatformer_ids.errors import ConfigError, DataError, NumericalError
from threatformer_ids.model import ModelConfig, ThreatFormer
from threatformer_ids.sequencing import class_weights
from threatformer_ids.training import (
    TrainConfig, apply_delta, mask_sequence, pgd_perturb, ssl_loss, total_loss, train, wbce,
)

from toydata import separable_sequences


def t(*v):
    return torch.tensor(v, dtype=torch.float64)


@pytest.mark.parametrize("s,y,w0,w1,expected", [
    (0.5, 1, 1.0, 1.0, math.log(2)),
    (0.5, 1, 1.0, 2.0, 2 * math.log(2)),
    (0.9, 0, 0.5, 1.0, 0.5 * -math.log(0.1)),
])
def test_wbce_values(s, y, w0, w1, expected):
    assert abs(float(wbce(t(s), torch.tensor([y]), w0, w1)) - expected) < 1e-9


def test_wbce_averages_over_batch():
    v = float(wbce(t(0.5, 0.5), torch.tensor([1, 0]), 3.0, 1.0))
    assert abs(v - 2 * math.log(2)) < 1e-9


def test_ssl_loss_values():
    X = torch.zeros(3, 2, 2, dtype=torch.float64)
    assert float(ssl_loss(X, X)) == 0.0
    assert float(ssl_loss(X + 1, X)) == 1.0
    one = X[:1].clone()
    one[0, 0, 0] = 2.0
    assert float(ssl_loss(one, X[:1])) == 1.0


def test_ssl_loss_masked_only_variant():
    X = torch.zeros(1, 2, 2)
    X_hat = X.clone()
    X_hat[0, 0, 0], X_hat[0, 1, 1] = 3.0, 5.0
    pos = torch.zeros_like(X, dtype=torch.bool)
    pos[0, 0, 0] = True
    assert float(ssl_loss(X_hat, X, pos)) == 9.0


def test_ssl_loss_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        ssl_loss(torch.zeros(2, 3), torch.zeros(3, 2))


def test_total_loss():
    assert total_loss(1.0, 0.5, 2.0, 1.0) == 3.5
    assert total_loss(1.0, 0.5, 2.0, 0.0) == 3.0
    assert total_loss(0.0, 0.0, 0.0, 0.7) == 0.0


def test_total_loss_gradient_is_weighted_sum(rng):
    x = torch.tensor(rng.normal(size=5), requires_grad=True)
    parts = [lambda: ad.sum(x ** 2), lambda: ad.sum(ad.sigmoid(x)), lambda: ad.mean(ad.gelu(x))]
    (g,) = ad.grad(total_loss(parts[0](), parts[1](), parts[2](), 0.3), [x])
    g0, g1, g2 = (ad.grad(p(), [x])[0] for p in parts)
    assert torch.allclose(g, g0 + 0.3 * g1 + g2, atol=1e-6)


def test_mask_zero_ratio_is_identity(rng):
    X = torch.tensor(rng.normal(size=(8, 6)), dtype=torch.float32)
    Xm, pos = mask_sequence(X, 0.0, torch.Generator().manual_seed(0), 3)
    assert torch.equal(Xm, X) and not pos.any()


def test_mask_counts_and_mask_bits_untouched():
    X = torch.ones(50, 40)   # 50 x 20 continuous cells = 1000
    for seed in range(50):
        Xm, pos = mask_sequence(X, 0.15, torch.Generator().manual_seed(seed), 20)
        assert 100 <= int(pos.sum()) <= 200
        assert not pos[:, 20:].any() and torch.equal(Xm[:, 20:], X[:, 20:])
        assert torch.equal(Xm[pos], torch.zeros(int(pos.sum())))


def test_mask_is_seeded():
    X = torch.ones(8, 10)
    a = mask_sequence(X, 0.3, torch.Generator().manual_seed(4), 5)[1]
    b = mask_sequence(X, 0.3, torch.Generator().manual_seed(4), 5)[1]
    assert torch.equal(a, b)


def linear_scorer(W, b=0.0):
    W = torch.as_tensor(W, dtype=torch.float64)
    return lambda z: ad.sigmoid(ad.sum(z * W, axis=(-2, -1)) + b)


def test_pgd_zero_budget_returns_zero(rng):
    X = torch.tensor(rng.normal(size=(4, 3, 5)))
    score = linear_scorer(rng.normal(size=(3, 5)))
    for eps, steps in [(0.0, 4), (0.3, 0)]:
        delta = pgd_perturb(score, X, torch.tensor([0, 1, 0, 1]), eps, steps, 0.1, n_continuous=2)
        assert delta.shape == (4, 3, 2) and not delta.any()


def test_pgd_box_and_mask_columns(rng):
    X = torch.tensor(rng.normal(size=(6, 3, 4)))
    y = torch.tensor([0, 1] * 3)
    score = linear_scorer(rng.normal(size=(3, 4)))
    for eps in (0.01, 0.2, 1.0):
        delta = pgd_perturb(score, X, y, eps, 7, eps / 3, n_continuous=2)
        assert float(delta.abs().max()) <= eps + 1e-7
        assert torch.equal(apply_delta(X, delta)[..., 2:], X[..., 2:])


def test_pgd_linear_closed_form(rng):
    W = rng.normal(size=(3, 4))
    X = torch.tensor(rng.normal(size=(8, 3, 4)))
    y = torch.tensor(rng.integers(0, 2, size=8))
    eps = 0.37
    delta = pgd_perturb(linear_scorer(W), X, y, eps, 1, eps)
    # the loss rises when the logit moves against the label
    direction = np.where(y.numpy()[:, None, None] == 1, -1.0, 1.0)
    assert np.abs(delta.numpy() - eps * direction * np.sign(W)).max() < 1e-6


def test_pgd_never_lowers_linear_loss(rng):
    W = rng.normal(size=(3, 4))
    score = linear_scorer(W)
    X = torch.tensor(rng.normal(size=(16, 3, 4)))
    y = torch.tensor(rng.integers(0, 2, size=16))
    delta = pgd_perturb(score, X, y, 0.2, 3, 0.05)
    assert float(wbce(score(X + delta), y, 1, 1)) >= float(wbce(score(X), y, 1, 1)) - 1e-6


@pytest.mark.parametrize("kw", [dict(mask_ratio=1.0), dict(learning_rate=0), dict(adv_epsilon=-1),
                                dict(optimizer="adam"), dict(adv_step_size=0.0)])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_step_size_default():
    assert TrainConfig(adv_epsilon=0.4).step_size == pytest.approx(0.1)
    assert not TrainConfig(adv_steps=0).adversarial


def toy_model(seed=0, **kw):
    return ModelConfig(d_in=4, n_continuous=2, d_model=16, n_heads=2, n_layers=1, d_ff=32, seed=seed, **kw)


def test_zero_epochs_keeps_initial_params():
    seqs = separable_sequences(40)
    cfg = toy_model()
    res = train(seqs, seqs, class_weights([s.y for s in seqs]), cfg, TrainConfig(epochs=0))
    init = ThreatFormer(cfg)
    for a, b in zip(res.model.parameters(), init.parameters()):
        assert torch.equal(a, b)
    assert res.history.epochs == []


def test_training_is_deterministic():
    seqs = separable_sequences(60)
    w = class_weights([s.y for s in seqs])
    tc = TrainConfig(epochs=2, batch_size=16, adv_steps=2)
    a = train(seqs, seqs, w, toy_model(), tc)
    b = train(seqs, seqs, w, toy_model(), tc)
    assert a.history.to_dict() == b.history.to_dict()
    for p, q in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(p, q)


def test_disabled_terms_are_absent():
    seqs = separable_sequences(40)
    res = train(seqs, seqs, class_weights([s.y for s in seqs]), toy_model(),
                TrainConfig(epochs=1, lambda_ssl=0.0, adv_epsilon=0.0))
    e = res.history.epochs[0]
    assert e.loss_ssl == 0.0 and e.loss_adv == 0.0 and e.loss_total == pytest.approx(e.loss_sup)


def test_supervised_loss_halves_on_separable_data():
    seqs = separable_sequences(400)
    res = train(seqs, seqs[:100], class_weights([s.y for s in seqs]), toy_model(),
                TrainConfig(epochs=10, lambda_ssl=0.0, adv_epsilon=0.0, batch_size=32))
    sup = [e.loss_sup for e in res.history.epochs]
    assert sup[9] < 0.5 * sup[0], sup


def test_best_model_tracks_validation():
    seqs = separable_sequences(120)
    res = train(seqs, seqs, class_weights([s.y for s in seqs]), toy_model(), TrainConfig(epochs=3))
    best = res.history.best_epoch
    aucs = [e.val_auc_pr for e in res.history.epochs]
    assert aucs[best - 1] == max(aucs)


def test_single_class_rejected():
    seqs = [s for s in separable_sequences(60) if s.y == 0]
    with pytest.raises(DataError):
        train(seqs, seqs, class_weights([0, 1]), toy_model(), TrainConfig(epochs=1))


def test_non_finite_loss_raises():
    seqs = separable_sequences(40)
    seqs[3].X[0, 0] = np.nan
    with pytest.raises(NumericalError, match="epoch 1"):
        train(seqs, seqs, class_weights([s.y for s in seqs]), toy_model(), TrainConfig(epochs=1))
