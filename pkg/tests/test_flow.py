import math

import numpy as np
import pytest
import torch

from counterflow.errors import (
    DimensionMismatchError,
    EstimationError,
    NotFittedError,
    PreconditionError,
)
from counterflow.flow import (
    FlowModel,
    FlowTrainConfig,
    VocabTable,
    counterfactual_embedding,
    decode_word,
    estimate_k,
    pair_loss,
    swap_leading_block,
    train_flow,
)


def perturbed_flow(dim=4, k=2, depth=2, seed=0, scale=0.2):
    model = FlowModel(dim=dim, k=k, depth=depth, seed=seed)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in model.parameters():
            param.add_(torch.randn(param.shape, generator=gen, dtype=param.dtype) * scale)
    return model


def fd_logdet(model, z, eps=1e-6):
    d = len(z)
    jac = np.zeros((d, d))
    for j in range(d):
        zp, zm = z.copy(), z.copy()
        zp[j] += eps
        zm[j] -= eps
        jac[:, j] = (model.forward_np(zp)[0] - model.forward_np(zm)[0]) / (2 * eps)
    return np.log(abs(np.linalg.det(jac)))


def attribute_dataset(dim=16, n=200, seed=0, n_directions=1, signal=1.5, noise=0.7):
    rng = np.random.default_rng(seed)
    basis = np.linalg.qr(rng.standard_normal((dim, n_directions)))[0].T
    def sample(count, sign):
        coeffs = sign * (signal + 0.2 * rng.standard_normal((count, n_directions)))
        return rng.standard_normal((count, dim)) * noise + coeffs @ basis
    return basis, {"a": sample(n, +1.0), "b": sample(n, -1.0)}


def test_identity_initialization():
    model = FlowModel(dim=4, k=2, depth=3, seed=0)
    z = np.array([0.3, -1.2, 0.5, 2.0])
    out, logdet = model.forward_np(z)
    assert np.allclose(out, z)
    assert logdet == 0.0
    assert np.allclose(model.inverse_np(z), z)


def test_identity_log_likelihood_at_origin():
    model = FlowModel(dim=4, k=2, seed=0)
    assert model.log_likelihood(np.zeros(4)) == pytest.approx(-2 * math.log(2 * math.pi), abs=1e-6)


def test_identity_log_likelihood_general():
    model = FlowModel(dim=6, k=2, seed=0)
    rng = np.random.default_rng(1)
    for z in rng.standard_normal((5, 6)):
        expected = -0.5 * (z @ z + 6 * math.log(2 * math.pi))
        assert model.log_likelihood(z) == pytest.approx(expected, abs=1e-9)


def test_roundtrip_inverse():
    model = perturbed_flow(dim=8, k=3, depth=3, seed=2)
    rng = np.random.default_rng(0)
    z = rng.standard_normal((200, 8))
    forward, _ = model.forward_np(z)
    assert np.abs(model.inverse_np(forward) - z).max() < 1e-5
    assert np.abs(model.forward_np(model.inverse_np(z))[0] - z).max() < 1e-5


def test_logdet_matches_finite_differences():
    model = perturbed_flow(dim=4, k=2, depth=2, seed=1)
    rng = np.random.default_rng(3)
    for z in rng.standard_normal((20, 4)):
        analytic = model.forward_np(z)[1]
        assert abs(analytic - fd_logdet(model, z)) < 1e-4


def test_logdet_additive_over_blocks():
    model = perturbed_flow(dim=4, k=2, depth=2, seed=4)
    x = torch.from_numpy(np.random.default_rng(0).standard_normal((3, 4)))
    total = model._forward_tensor(x)[1]
    accumulated = torch.zeros(3, dtype=torch.float64)
    step = x
    for block in model.blocks:
        step, logdet = block(step)
        accumulated = accumulated + logdet
    assert torch.allclose(total, accumulated)


def test_dimension_and_finite_checks():
    model = FlowModel(dim=4, k=1, seed=0)
    with pytest.raises(DimensionMismatchError):
        model.forward_np(np.zeros(5))
    with pytest.raises(PreconditionError):
        model.forward_np(np.array([np.nan, 0, 0, 0]))


def test_pair_loss_correlation_zero_case():
    model = FlowModel(dim=4, k=2, seed=0)  # identity
    sigma = 0.8
    z1 = torch.tensor([[1.0, -0.5, 0.3, 0.2]], dtype=torch.float64)
    z2 = z1.clone()
    z2[:, :2] *= sigma  # leading block exactly sigma-scaled
    loss = pair_loss(model, z1, z2, k=2, sigma=sigma).detach()
    expected = (z1 ** 2).sum() + (z2[:, 2:] ** 2).sum()
    assert float(loss) == pytest.approx(float(expected), abs=1e-12)


def test_pairing_loss_gradients_match_finite_differences():
    model = FlowModel(dim=8, k=3, depth=2, seed=5)
    gen = torch.Generator().manual_seed(9)
    with torch.no_grad():
        for param in model.parameters():
            param.add_(torch.randn(param.shape, generator=gen, dtype=param.dtype) * 0.1)
    rng = np.random.default_rng(11)
    z1 = torch.from_numpy(rng.standard_normal((4, 8)))
    z2 = torch.from_numpy(rng.standard_normal((4, 8)))

    def loss_value():
        return pair_loss(model, z1, z2, k=3, sigma=0.9).mean()

    loss = loss_value()
    loss.backward()
    checked = 0
    for param in model.parameters():
        grad = param.grad
        if grad is None:
            continue
        flat = param.detach().reshape(-1)
        gflat = grad.reshape(-1)
        idx = np.linspace(0, len(flat) - 1, num=min(5, len(flat)), dtype=int)
        for j in idx:
            eps = 1e-6
            with torch.no_grad():
                flat[j] += eps
                hi = float(loss_value())
                flat[j] -= 2 * eps
                lo = float(loss_value())
                flat[j] += eps
            numeric = (hi - lo) / (2 * eps)
            denom = max(abs(numeric), abs(float(gflat[j])), 1e-8)
            assert abs(numeric - float(gflat[j])) / denom < 1e-3
            checked += 1
    assert checked > 20


def test_train_flow_requires_both_groups():
    rng = np.random.default_rng(0)
    data = [(rng.standard_normal(8), "a") for _ in range(10)]
    with pytest.raises(PreconditionError):
        train_flow(data, FlowTrainConfig(k=2, epochs=1))


def test_sigma_bounds_validated():
    with pytest.raises(PreconditionError):
        FlowTrainConfig(sigma=1.0)
    with pytest.raises(PreconditionError):
        FlowTrainConfig(sigma=0.0)


@pytest.fixture(scope="module")
def trained_flow():
    basis, groups = attribute_dataset(dim=16, n=250, seed=21)
    config = FlowTrainConfig(sigma=0.9, epochs=300, depth=2, seed=0, batch=256, lr=1e-3, k=2)
    model = train_flow(groups, config)
    return basis, groups, model


def test_training_loss_decreases(trained_flow):
    _, _, model = trained_flow
    history = model.meta["loss_history"]
    assert history[-1] < history[0]


def test_prototypes_fitted_and_recorded(trained_flow):
    _, groups, model = trained_flow
    proto_a = model.prototype("a")
    proto_b = model.prototype("b")
    assert proto_a.shape == (2,)
    assert not np.allclose(proto_a, proto_b)
    assert model.meta["k_rule"] == "fixed"


def test_unfitted_prototypes_raise():
    model = FlowModel(dim=4, k=2, seed=0)
    with pytest.raises(NotFittedError):
        model.prototype("a")


def test_swap_flips_group_direction(trained_flow):
    basis, groups, model = trained_flow
    direction = basis[0]
    swapped = counterfactual_embedding(model, groups["b"], "a")
    flips = float(((swapped @ direction) > 0).mean())
    assert flips >= 0.9


def test_swap_keeps_own_group(trained_flow):
    basis, groups, model = trained_flow
    direction = basis[0]
    kept = counterfactual_embedding(model, groups["a"], "a")
    assert float(((kept @ direction) > 0).mean()) >= 0.9


def test_swap_preserves_trailing_dimensions(trained_flow):
    _, groups, model = trained_flow
    z = groups["a"][0]
    z_tilde = model.forward_np(z)[0]
    swapped = swap_leading_block(model, z_tilde, model.prototype("b"))
    assert np.array_equal(swapped[model.k:], z_tilde[model.k:])


def test_swap_idempotent_in_interpretable_space(trained_flow):
    _, groups, model = trained_flow
    z_tilde = model.forward_np(groups["a"][1])[0]
    once = swap_leading_block(model, z_tilde, model.prototype("b"))
    twice = swap_leading_block(model, once, model.prototype("b"))
    assert np.array_equal(once, twice)


def test_estimate_k_on_two_direction_fixture():
    _, groups = attribute_dataset(dim=16, n=250, seed=33, n_directions=2)
    config = FlowTrainConfig(sigma=0.9, depth=2, seed=1, batch=256, estimate_epochs=120)
    k = estimate_k(groups, config)
    assert 1 <= k <= 3


def test_estimate_k_bounds_and_degenerate():
    _, groups = attribute_dataset(dim=8, n=60, seed=2)
    config = FlowTrainConfig(seed=0, estimate_epochs=10)
    with pytest.raises(PreconditionError):
        estimate_k(groups, config, candidate_range=(0, 9))
    flat = {"a": np.ones((10, 8)), "b": np.ones((10, 8))}
    with pytest.raises(EstimationError):
        estimate_k(flat, config)


def test_fixed_k_recorded():
    _, groups = attribute_dataset(dim=16, n=80, seed=3)
    model = train_flow(groups, FlowTrainConfig(k=8, epochs=5, seed=0))
    assert model.k == 8
    assert model.meta["k_rule"] == "fixed"


def test_checkpoint_roundtrip(tmp_path, trained_flow):
    _, groups, model = trained_flow
    path = tmp_path / "flow.bin"
    model.save(path)
    loaded = FlowModel.load(path)
    z = groups["a"][:5]
    orig_fwd, orig_ld = model.forward_np(z)
    new_fwd, new_ld = loaded.forward_np(z)
    assert np.array_equal(orig_fwd, new_fwd)
    assert np.array_equal(orig_ld, new_ld)
    assert np.array_equal(loaded.prototype("a"), model.prototype("a"))
    assert loaded.k == model.k
    path2 = tmp_path / "flow2.bin"
    loaded.save(path2)
    assert path.read_bytes() == path2.read_bytes()


def test_decode_word_exact_and_ties():
    table = VocabTable(["bird", "cat"], np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert decode_word(np.array([1.0, 0.0]), table) == "bird"
    tied = VocabTable(["zeta", "alpha"], np.array([[1.0, 0.0], [1.0, 0.0]]))
    assert decode_word(np.array([2.0, 0.0]), tied) == "alpha"
    with pytest.raises(DimensionMismatchError):
        decode_word(np.zeros(3), table)
    with pytest.raises(PreconditionError):
        VocabTable([], np.zeros((0, 2)))
        decode_word(np.zeros(2), VocabTable([], np.zeros((0, 2))))


def test_generate_word_pairs_votes(monkeypatch, trained_flow):
    from counterflow import flow as flow_mod

    instance_counts = {"calm": 2, "she": 4}
    # words are processed in sorted order: calm's 2 decodes, then she's 4
    decode_seq = iter(["calm", "calm", "he", "he", "he", "him"])

    monkeypatch.setattr(
        flow_mod, "find_occurrences",
        lambda corpus, word, window=64: [object()] * instance_counts[word],
    )
    monkeypatch.setattr(flow_mod, "embedding_matrix",
                        lambda embs: np.zeros((len(embs), 2)))
    monkeypatch.setattr(flow_mod, "counterfactual_embedding",
                        lambda model, vectors, target: vectors)
    monkeypatch.setattr(flow_mod, "decode_word",
                        lambda row, table: next(decode_seq))

    class StubBackend:
        def embed_many(self, occs):
            return list(occs)

    table = VocabTable(["x"], np.zeros((1, 2)))
    pairs = flow_mod.generate_word_pairs(
        object(), {"calm", "she"}, set(), StubBackend(), trained_flow[2], table,
    )
    results = {p.word: p for p in pairs}
    assert "calm" not in results            # modal decode equals itself
    assert results["she"].counterfactual == "he"
    assert results["she"].votes == 3 and results["she"].total == 4
    assert results["she"].side == "a"


def test_non_finite_intermediate_names_layer():
    from counterflow.errors import NumericOverflowError

    model = FlowModel(dim=4, k=2, depth=2, seed=0)
    with torch.no_grad():
        model.blocks[2].log_diag.fill_(800.0)  # second linear block overflows
    with pytest.raises(NumericOverflowError) as err:
        model.forward_np(np.ones(4) * 10)
    assert err.value.layer_index == 2


def test_density_estimate_near_gaussian_entropy():
    # Monte-Carlo entropy oracle: mean NLL on fresh standard-Gaussian
    # samples should sit within 10% of the true differential entropy
    rng = np.random.default_rng(0)
    d = 8
    data = rng.standard_normal((600, d))
    model = train_flow(
        {"a": data[:300], "b": data[300:]},
        FlowTrainConfig(sigma=0.3, k=1, epochs=300, depth=2, seed=1, batch=256),
    )
    fresh = rng.standard_normal((2000, d))
    mean_nll = -model.log_likelihood(fresh).mean()
    entropy = (d / 2) * (1 + math.log(2 * math.pi))
    assert abs(mean_nll - entropy) / entropy < 0.10


def test_first_epoch_improves_on_initialization():
    _, groups = attribute_dataset(dim=16, n=150, seed=8)
    config = FlowTrainConfig(k=2, epochs=5, depth=2, seed=0, batch=256)
    model = train_flow(groups, config)
    fresh = FlowModel(dim=16, k=2, depth=2, seed=0)
    z1 = torch.from_numpy(np.vstack([groups["a"][:64], groups["b"][:64]]))
    z2 = torch.from_numpy(np.vstack([groups["a"][64:128], groups["b"][64:128]]))
    with torch.no_grad():
        init_loss = float(pair_loss(fresh, z1, z2, 2, config.sigma).mean())
        trained_loss = float(pair_loss(model, z1, z2, 2, config.sigma).mean())
    assert trained_loss < init_loss
    history = model.meta["loss_history"]
    assert history[-1] < history[0]
