import math

import numpy as np
import pytest
import torch

from grand.data import Dataset, synth_grid_image, synth_sbm
from grand.experiments import boundary_experiment
from grand.graph import random_graph
from grand.integrators import ConfigError, SchemeConfig, integrate
from grand.model import (GrandModel, ModelConfig, TrainConfig, TrainingDivergenceError,
                         UnsupportedConfigError, checkpoint_dict, evaluate, gradients,
                         load_checkpoint, loss, param_count, save_checkpoint, train)
from grand.rewiring import RewireConfig

import oracles


def tiny_dataset(n=12, d_in=3, seed=0):
    rng = np.random.default_rng(seed)
    g = random_graph(n, 0.35, rng=seed)
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    X = rng.standard_normal((n, d_in))
    idx = rng.permutation(n)
    return Dataset(g, X, labels, {"train": idx[:6], "val": idx[6:9], "test": idx[9:]}, 2)


def perturb(model, seed=0, scale=0.3):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return model


def test_encode_matches_affine_oracle():
    m = GrandModel(ModelConfig(5, 3, d=4))
    X = np.random.default_rng(0).standard_normal((7, 5))
    W, b = m.encoder.weight.detach().numpy(), m.encoder.bias.detach().numpy()
    np.testing.assert_allclose(m.encode(X).detach().numpy(), X @ W.T + b, atol=1e-12)


def test_encode_dimension_mismatch():
    with pytest.raises(ConfigError):
        GrandModel(ModelConfig(5, 3, d=4)).encode(np.zeros((3, 4)))


def test_t_zero_is_encoder_decoder():
    ds = tiny_dataset()
    m = GrandModel(ModelConfig(3, 2, d=4, scheme=SchemeConfig(scheme="rk4", tau=1.0, T=0.0)))
    out = m(ds.graph, ds.features)
    assert torch.equal(out, m.decode(m.encode(ds.features)))


def test_linear_forward_expm_vs_dopri5():
    g = random_graph(32, 0.2, rng=1)
    X = np.random.default_rng(1).standard_normal((32, 5))
    m = perturb(GrandModel(ModelConfig(5, 3, d=8, seed=1)), seed=1)
    a = m(g, X, scheme=SchemeConfig(scheme="expm", T=3.0)).detach()
    b = m(g, X, scheme=SchemeConfig(scheme="dopri5", T=3.0, tau=0.1, atol=1e-10, rtol=1e-10))
    assert ((a - b.detach()).norm() / a.norm()).item() < 1e-6


def test_linear_forward_matches_dense_oracle():
    ds = tiny_dataset()
    m = perturb(GrandModel(ModelConfig(3, 2, d=4)), seed=2)
    with torch.no_grad():
        X0 = m.encode(ds.features)
        Abar = m.diffusion_operator(X0, ds.graph.directed()).to_dense().numpy()
        XT = oracles.expm_solution(Abar, X0.numpy(), 2.0)
        out = m(ds.graph, ds.features, scheme=SchemeConfig(scheme="expm", T=2.0))
    ref = XT @ m.decoder.weight.detach().numpy().T + m.decoder.bias.detach().numpy()
    np.testing.assert_allclose(out.numpy(), ref, atol=1e-10)


def test_constant_encoding_unchanged_by_diffusion():
    ds = tiny_dataset()
    m = GrandModel(ModelConfig(3, 2, d=4))
    X = np.ones((ds.n, 3))
    with torch.no_grad():
        X0 = m.encode(X)
        XT, _ = integrate(m.dynamics(X0, ds.graph.directed()), X0, m.cfg.scheme)
    np.testing.assert_allclose(XT.numpy(), X0.numpy(), atol=1e-12)


def test_loss_uniform_logits_is_log_c():
    logits = torch.zeros(5, 4, dtype=torch.float64)
    assert abs(loss(logits, [0, 1, 2, 3, 0], np.ones(5, bool)).item() - math.log(4)) < 1e-15


def test_loss_matches_dense_oracle():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((10, 3)) * 4
    labels = rng.integers(0, 3, 10)
    mask = rng.random(10) < 0.5
    got = loss(torch.from_numpy(logits), labels, mask).item()
    assert abs(got - oracles.cross_entropy(logits, labels, mask)) < 1e-12


def test_loss_empty_mask():
    with pytest.raises(ValueError):
        loss(torch.zeros(3, 2, dtype=torch.float64), [0, 1, 0], np.zeros(3, bool))


def finite_difference(model, ds, eps=1e-6):
    mask = ds.mask("train")
    out = {}
    for name, p in model.named_parameters():
        fd = torch.zeros_like(p)
        flat, gflat = p.data.view(-1), fd.view(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            vals = []
            for sgn in (1, -1):
                flat[k] = orig + sgn * eps
                with torch.no_grad():
                    vals.append(loss(model(ds.graph, ds.features), ds.labels, mask).item())
            flat[k] = orig
            gflat[k] = (vals[0] - vals[1]) / (2 * eps)
        out[name] = fd
    return out


@pytest.mark.parametrize("variant", ["grand-l", "grand-nl"])
@pytest.mark.parametrize("scheme", ["explicit-euler", "rk4"])
def test_gradients_match_finite_differences(variant, scheme):
    ds = tiny_dataset()
    cfg = ModelConfig(3, 2, d=3, variant=variant,
                      scheme=SchemeConfig(scheme=scheme, tau=0.5, T=1.5))
    m = perturb(GrandModel(cfg), seed=4)
    grads = gradients(m, ds)
    fds = finite_difference(m, ds)
    assert set(grads) == {"encoder.weight", "encoder.bias", "decoder.weight", "decoder.bias",
                          "w_key", "w_query"}
    for name in grads:
        g, f = grads[name], fds[name]
        rel = (g - f).abs() / torch.maximum(torch.maximum(g.abs(), f.abs()),
                                            torch.tensor(1e-6, dtype=g.dtype))
        assert rel.max().item() <= 1e-4, name


def test_linear_attention_evaluated_once():
    ds = tiny_dataset()
    m = GrandModel(ModelConfig(3, 2, d=4, scheme=SchemeConfig(scheme="rk4", tau=0.25, T=2.0)))
    m(ds.graph, ds.features)
    assert m.attention_evals == 1
    nl = GrandModel(ModelConfig(3, 2, d=4, variant="grand-nl",
                                scheme=SchemeConfig(scheme="rk4", tau=0.25, T=2.0)))
    nl(ds.graph, ds.features)
    assert nl.attention_evals == 8 * 4


@pytest.mark.parametrize("scheme", ["implicit-euler", "dopri5", "am4-pc", "expm"])
def test_untrainable_schemes_rejected(scheme):
    ds = tiny_dataset()
    m = GrandModel(ModelConfig(3, 2, d=4, scheme=SchemeConfig(scheme=scheme, tau=0.5, T=1.0)))
    with pytest.raises(UnsupportedConfigError):
        train(m, ds, TrainConfig(epochs=1))
    with pytest.raises(UnsupportedConfigError):
        gradients(m, ds)


def test_unknown_variant():
    with pytest.raises(ConfigError):
        ModelConfig(3, 2, variant="gcn")


def test_training_is_deterministic():
    ds = synth_sbm(n=60, p_in=0.3, p_out=0.03, seed=2, per_class=5, n_val=20)
    runs = [train(GrandModel(ModelConfig(ds.features.shape[1], 2, d=8)), ds,
                  TrainConfig(epochs=15)) for _ in range(2)]
    assert runs[0].history == runs[1].history
    for a, b in zip(runs[0].model.parameters(), runs[1].model.parameters()):
        assert torch.equal(a, b)


def test_parameter_count_independent_of_depth():
    counts = {T: param_count(GrandModel(ModelConfig(10, 3, d=16, scheme=SchemeConfig(
        scheme="rk4", tau=1.0, T=T)))) for T in (2.0, 32.0)}
    assert counts[2.0] == counts[32.0] == (10 * 16 + 16) + (16 * 3 + 3) + 2 * 16 * 16


def test_checkpoint_round_trip(tmp_path):
    ds = tiny_dataset()
    m = perturb(GrandModel(ModelConfig(3, 2, d=4, variant="grand-nl", heads=2)), seed=5)
    save_checkpoint(m, tmp_path / "m.json")
    back = load_checkpoint(tmp_path / "m.json")
    assert back.cfg == m.cfg
    assert torch.equal(back(ds.graph, ds.features), m(ds.graph, ds.features))
    meta = checkpoint_dict(m)["meta"]
    assert meta["variant"] == "grand-nl" and meta["dims"]["heads"] == 2


def test_nan_loss_aborts():
    ds = tiny_dataset()
    m = GrandModel(ModelConfig(3, 2, d=4))
    with torch.no_grad():
        m.decoder.bias[0] = math.inf
    with pytest.raises(TrainingDivergenceError, match="epoch 0"):
        train(m, ds, TrainConfig(epochs=3))


def test_sbm_accuracy_and_label_propagation():
    ds = synth_sbm(n=200, p_in=0.1, p_out=0.01, seed=0)
    cfg = ModelConfig(ds.features.shape[1], 2, d=16)
    res = train(GrandModel(cfg), ds, TrainConfig(epochs=200))
    assert res.test_acc >= 0.9
    assert evaluate(res.model, ds)["test"] == res.test_acc
    pred = oracles.label_propagation(ds.graph.adjacency().toarray(), ds.labels, ds.splits["train"])
    assert (pred[ds.splits["test"]] == ds.labels[ds.splits["test"]]).mean() >= 0.9


def test_rewired_training_runs():
    ds = synth_sbm(n=60, p_in=0.3, p_out=0.03, seed=1, per_class=5, n_val=20)
    cfg = ModelConfig(ds.features.shape[1], 2, d=8, variant="grand-nl-rw",
                      rewire=RewireConfig(K=8, rho=0.01),
                      scheme=SchemeConfig(scheme="explicit-euler", tau=0.5, T=2.0))
    res = train(GrandModel(cfg), ds, TrainConfig(epochs=5))
    assert len(res.history.epoch) == 5 and res.seconds_per_epoch > 0
    assert evaluate(res.model, ds)["test"] == res.test_acc


def test_grid_boundary_learned_beats_uniform():
    ds = synth_grid_image(8, 8, shape="disk", seed=0, noise=0.3)
    cfg = ModelConfig(1, 2, d=8, variant="grand-nl",
                      scheme=SchemeConfig(scheme="rk4", tau=0.8, T=4.8))
    flips = boundary_experiment(ds, cfg, TrainConfig(epochs=100))
    assert flips["scaled-dot"] < flips["uniform"]
