import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from promptclip.encoders import Temperature, normalize
from promptclip.synthetic import planted_clusters
from promptclip.training import (TrainConfig, TrainingDiverged, batch_loss, clip_loss, cosine_similarity_matrix,
                                 finite_difference_check, info_nce_i2t, info_nce_t2i, train, write_trace_csv)

# Frozen from a direct double-precision evaluation of the softmax definition:
#   -1/N sum_i log(exp(S_ii/tau) / sum_j exp(S_ij/tau))
S_WORKED = [[0.9, 0.1], [0.2, 0.8]]
I2T_WORKED = 0.22359160411318496
T2I_WORKED = 0.22041740991845085


def _direct_i2t(S, tau):
    n = len(S)
    return -sum(math.log(math.exp(S[i][i] / tau) / sum(math.exp(S[i][j] / tau) for j in range(n)))
                for i in range(n)) / n


def _unit_rows(rng, n, d):
    x = torch.as_tensor(rng.normal(size=(n, d)))
    return normalize(x, eps=0.0)


# -- similarity ---------------------------------------------------------------

def test_similarity_identity():
    assert torch.equal(cosine_similarity_matrix(np.eye(2), np.eye(2)), torch.eye(2, dtype=torch.float64))


def test_similarity_transpose():
    rng = np.random.default_rng(0)
    V, T = _unit_rows(rng, 5, 3), _unit_rows(rng, 5, 3)
    assert torch.allclose(cosine_similarity_matrix(V, T), cosine_similarity_matrix(T, V).T)


def test_similarity_scale_invariant():
    rng = np.random.default_rng(1)
    raw_v, raw_t = torch.as_tensor(rng.normal(size=(4, 3))), torch.as_tensor(rng.normal(size=(4, 3)))
    S = cosine_similarity_matrix(normalize(raw_v, 0.0), normalize(raw_t, 0.0))
    S2 = cosine_similarity_matrix(normalize(7.5 * raw_v, 0.0), normalize(0.01 * raw_t, 0.0))
    assert torch.allclose(S, S2, atol=1e-12)
    assert (S.abs() <= 1 + 1e-12).all()


def test_similarity_errors():
    with pytest.raises(ValueError, match="shape"):
        cosine_similarity_matrix(np.eye(2), np.eye(3))
    with pytest.raises(ValueError, match="unit norm"):
        cosine_similarity_matrix(2 * np.eye(2), np.eye(2))


# -- losses -------------------------------------------------------------------

def test_single_pair_loss_is_zero():
    assert info_nce_i2t([[0.3]], 0.07).item() == 0.0
    assert clip_loss([[0.3]], 0.07).item() == 0.0


def test_identity_worked_example():
    assert info_nce_i2t(np.eye(2), 1.0).item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert clip_loss(np.eye(2), 1.0).item() == pytest.approx(0.626523375, abs=1e-9)


def test_asymmetric_worked_example():
    assert _direct_i2t(S_WORKED, 0.5) == pytest.approx(I2T_WORKED, abs=1e-15)
    assert info_nce_i2t(S_WORKED, 0.5).item() == pytest.approx(I2T_WORKED, abs=1e-12)
    assert info_nce_t2i(S_WORKED, 0.5).item() == pytest.approx(T2I_WORKED, abs=1e-12)


def test_duality_and_symmetric_case():
    rng = np.random.default_rng(2)
    S = rng.uniform(-1, 1, size=(6, 6))
    assert info_nce_t2i(S, 0.3).item() == info_nce_i2t(S.T, 0.3).item()
    sym = S + S.T
    assert info_nce_i2t(sym, 0.3).item() == pytest.approx(info_nce_t2i(sym, 0.3).item(), abs=1e-15)


def test_tower_swap_leaves_clip_loss():
    rng = np.random.default_rng(3)
    V, T = _unit_rows(rng, 5, 4), _unit_rows(rng, 5, 4)
    a = clip_loss(cosine_similarity_matrix(V, T), 0.1).item()
    b = clip_loss(cosine_similarity_matrix(T, V), 0.1).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_loss_errors():
    with pytest.raises(ValueError, match="non-finite"):
        info_nce_i2t([[float("nan"), 0], [0, 1]], 1.0)
    with pytest.raises(ValueError):
        info_nce_i2t(np.zeros((2, 3)), 1.0)
    with pytest.raises(ValueError):
        info_nce_i2t(np.eye(2), 0.0)


def test_small_tau_is_stable():
    # without max subtraction exp(1/1e-3) overflows
    loss = clip_loss(torch.eye(3, dtype=torch.float32), 1e-3)
    assert torch.isfinite(loss) and loss.item() < 1e-6


matrices = st.integers(1, 6).flatmap(
    lambda n: st.lists(st.floats(-1, 1, allow_nan=False), min_size=n * n, max_size=n * n)
    .map(lambda xs, n=n: np.array(xs).reshape(n, n)))


@settings(max_examples=100, deadline=None)
@given(matrices, st.floats(1e-2, 10), st.randoms(use_true_random=False))
def test_loss_properties(S, tau, rnd):
    n = len(S)
    perm = list(range(n))
    rnd.shuffle(perm)
    P = S[np.ix_(perm, perm)]
    for f in (info_nce_i2t, info_nce_t2i, clip_loss):
        v = f(S, tau).item()
        assert v >= -1e-12
        assert f(P, tau).item() == pytest.approx(v, abs=1e-9)
    assert info_nce_t2i(S, tau).item() == info_nce_i2t(S.T, tau).item()


@pytest.mark.parametrize("tau", [1e-3, 1e-1, 1.0, 1e3])
def test_tau_gradient_finite(tau):
    temp = Temperature(tau).double()
    rng = np.random.default_rng(4)
    S = torch.as_tensor(rng.uniform(-1, 1, size=(4, 4)))
    clip_loss(S, temp.tau).backward()
    assert torch.isfinite(temp.log_tau.grad)
    assert temp.tau.item() > 0


def test_temperature_cap():
    temp = Temperature(0.07, log_cap=math.log(100))
    with torch.no_grad():
        temp.log_tau.fill_(50.0)
    assert temp.tau.item() == pytest.approx(100.0)


# -- gradient check -----------------------------------------------------------

def test_gradcheck_quadratic():
    x = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64, requires_grad=True)
    res = finite_difference_check(lambda: (x ** 2).sum() + 3 * x[0], {"x": x}, epsilon=1e-5, tolerance=1e-8)
    assert res.passed and res.max_rel_dev < 1e-9


def test_gradcheck_flags_wrong_gradient():
    x = torch.tensor([0.5], dtype=torch.float64, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, a):
            return a ** 3

        @staticmethod
        def backward(ctx, g):
            return g * 2.0  # should be 3a^2

    res = finite_difference_check(lambda: Wrong.apply(x).sum(), {"x": x})
    assert not res.passed


def test_gradcheck_frozen_coordinate(f64_model):
    """An unused frozen backend row: no analytic gradient, finite difference exactly zero."""
    m = f64_model
    caps = ["lung ct", "liver ultrasound"]
    feats = torch.randn(2, 16, dtype=torch.float64)
    used = set()
    for c in caps + [m.config.prefix_1, m.config.prefix_2, m.config.init_phrase]:
        used.update(m.backend.tokenize(c))
    row = next(i for i in range(m.backend.spec.vocab_size) if i not in used)
    frozen = m.backend.token_embedding.weight[row]
    res = finite_difference_check(lambda: batch_loss(m, caps, feats)[2], {"frozen": frozen}, tolerance=1e-12)
    assert res.passed and res.max_rel_dev == 0.0


# -- training loop ------------------------------------------------------------

TOY = dict(batch_size=8, learning_rate=1e-2)


def test_drop_last_and_needs_one_batch(clusters):
    with pytest.raises(ValueError, match="full batch"):
        train(clusters[:7], config=TrainConfig(epochs=1, **TOY))
    res = train(clusters[:20], config=TrainConfig(epochs=2, **TOY))
    assert len(res.trace) == 4  # 20 // 8 = 2 batches per epoch


def test_trace_columns(clusters, tmp_path):
    res = train(clusters, config=TrainConfig(epochs=1, **TOY))
    write_trace_csv(res.trace, tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,loss_i2t,loss_t2i,loss_total,tau"
    assert len(lines) == 1 + 4


def test_no_learnable_prompt_keeps_prompt(clusters):
    from promptclip.encoders import DualEncoder, ModelConfig

    model = DualEncoder(ModelConfig.for_ablation(True, False), seed=0)
    before = model.prompt.vectors.detach().clone()
    head_before = model.head.fc1.weight.detach().clone()
    train(clusters, model=model, config=TrainConfig(epochs=3, use_learnable_prompt=False, **TOY))
    assert torch.equal(model.prompt.vectors, before)
    assert not torch.equal(model.head.fc1.weight, head_before)


def test_seeded_runs_identical(clusters):
    cfg = TrainConfig(epochs=2, seed=5, **TOY)
    a, b = train(clusters, config=cfg).model, train(clusters, config=cfg).model
    for (n, p), (_, q) in zip(a.checkpoint_tensors().items(), b.checkpoint_tensors().items()):
        assert torch.equal(p, q), n


def test_convergence_smoke(clusters):
    res = train(clusters, config=TrainConfig(epochs=30, **TOY))
    assert res.epoch_losses[-1] < res.epoch_losses[0]


def test_non_finite_loss_aborts(clusters):
    bad = [r.__class__(r.id, tuple([float("nan")] * 16), r.caption, r.cuis, r.semantic_types) for r in clusters]
    with pytest.raises(TrainingDiverged, match="step 0"):
        train(bad, config=TrainConfig(epochs=1, **TOY))


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.epochs, cfg.learning_rate) == (32, 10, 3e-6)
    assert cfg.betas == (0.9, 0.999) and cfg.adam_eps == 1e-8


def test_planted_clusters_shape():
    recs = planted_clusters(n_clusters=3, per_cluster=4, feature_dim=5, seed=1)
    assert len(recs) == 12 and len({r.id for r in recs}) == 12
    assert all(len(r.image_ref) == 5 for r in recs)
