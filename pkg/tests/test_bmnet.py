import numpy as np
import pytest

from gamloc.bmnet import (
    BmnetConfig,
    ParamsFormatError,
    StaleCacheError,
    backward,
    context_normalize,
    dumps_params,
    forward,
    init_params,
    load_params,
    loads_params,
    loss,
    loss_logit_grad,
    save_params,
)
from gamloc.hungarian import hungarian_pooling
from gamloc.matcher import BipartiteGraph
from gamloc.synthgen import SceneConfig
from tests.gradcheck import SMALL_NET, check_all_parameters, check_directions, frozen_targets, randomized_params

TINY = BmnetConfig(width=8, point_blocks=2, edge_blocks=4)


def make_graph(rng, M=4, N=5, T=8, camera=None):
    cells = np.sort(rng.choice(M * N, size=T, replace=False))
    eu, ev = cells // N, cells % N
    # make every row an endpoint
    eu[:M] = np.arange(M)
    ev[-N:] = np.arange(N)
    keep = np.unique(np.stack([eu, ev], axis=1), axis=0)
    return BipartiteGraph(
        rng.uniform(0, 640, (M, 2)), rng.normal(scale=5, size=(N, 3)), keep[:, 0], keep[:, 1],
        np.zeros(len(keep)), np.arange(M), np.arange(N), camera,
    )


def test_init_deterministic_and_seed_dependent():
    assert init_params(4, TINY) == init_params(4, TINY)
    assert init_params(4, TINY) != init_params(5, TINY)


def test_default_architecture():
    p = init_params(0)
    assert p["u0.W"].shape == (2, 128) and p["v0.W"].shape == (3, 128)
    assert p["e0.W"].shape == (256, 128)
    assert sum(1 for k in p.tensors if k.startswith("e") and k.endswith(".W")) == 18


def test_context_normalize_examples():
    out = context_normalize(np.array([[1.0], [2.0], [3.0]]))
    np.testing.assert_allclose(out[:, 0], [-1.22474, 0.0, 1.22474], atol=1e-5)
    np.testing.assert_allclose(context_normalize(np.full((4, 2), 7.0)), 0.0, atol=1e-12)
    assert context_normalize(np.array([[3.0, -1.0]])).tolist() == [[0.0, 0.0]]


def test_forward_contract(rng):
    g = make_graph(rng)
    w, _ = forward(init_params(0), g)
    assert w.shape == (g.T,)
    assert np.all((w >= 0) & (w <= 1)) and np.all(np.isfinite(w))


def test_forward_rejects_channel_mismatch(rng):
    g = make_graph(rng)
    bad = BipartiteGraph(g.U, np.hstack([g.V, g.V]), g.edge_u, g.edge_v, g.distance, g.u_ref, g.v_ref)
    with pytest.raises(ValueError):
        forward(init_params(0, TINY), bad)


def test_edge_permutation_equivariance(rng):
    g = make_graph(rng, T=10)
    p = init_params(1, TINY)
    perm = rng.permutation(g.T)
    gp = BipartiteGraph(g.U, g.V, g.edge_u[perm], g.edge_v[perm], g.distance[perm], g.u_ref, g.v_ref)
    np.testing.assert_allclose(forward(p, gp)[0], forward(p, g)[0][perm], atol=1e-12)


def test_translation_invariance(rng):
    g = make_graph(rng)
    p = init_params(2, TINY)
    moved = BipartiteGraph(g.U + 100.0, g.V + 5.0, g.edge_u, g.edge_v, g.distance, g.u_ref, g.v_ref)
    np.testing.assert_allclose(forward(p, moved)[0], forward(p, g)[0], atol=1e-9)


def test_loss_examples():
    assert loss([0.5], [1], [1]) == pytest.approx(0.693147, abs=1e-6)
    assert loss([0.5, 0.9], [1, 1], [1, 1]) == pytest.approx(0.399254, abs=1e-6)
    assert loss([0.2, 0.7, 0.99], [0, 0, 0], [1, 0, 1]) == 0.0
    with pytest.raises(ValueError):
        loss([0.5], [1, 1], [1])


def test_unselected_edges_get_zero_logit_gradient():
    g = loss_logit_grad(np.array([0.3, 0.6, 0.8]), np.array([1, 0, 1]), np.array([1, 1, 0]))
    assert g[1] == 0.0 and g[0] != 0.0 and g[2] != 0.0


def test_all_zero_selection_gives_zero_gradients(rng):
    g = make_graph(rng)
    p = init_params(3, TINY)
    _, cache = forward(p, g)
    grads = backward(p, cache, np.zeros(g.T), rng.integers(0, 2, g.T))
    assert all(not np.any(v) for v in grads.values())


def test_stale_cache_rejected(rng):
    g = make_graph(rng)
    p = init_params(3, TINY)
    _, cache = forward(p, g)
    p.bump()
    with pytest.raises(StaleCacheError):
        backward(p, cache, np.ones(g.T), np.ones(g.T))
    with pytest.raises(StaleCacheError):
        backward(p.copy(), cache, np.ones(g.T), np.ones(g.T))


def test_gradients_on_six_edge_graph():
    # every entry of a small network, s frozen from the pooled forward pass
    rng = np.random.default_rng(6)
    g = make_graph(rng, M=4, N=4, T=6)
    assert g.T == 6
    p = randomized_params(rng, SMALL_NET)
    s, t = frozen_targets(p, g, rng)
    worst, n, _ = check_all_parameters(p, g, s, t)
    assert n == p.n_parameters()
    assert worst < 1e-4


def test_gradients_default_network_directional():
    rng = np.random.default_rng(7)
    cam = SceneConfig().camera()
    g = make_graph(rng, M=5, N=5, T=6, camera=cam)
    p = init_params(0)
    s, t = frozen_targets(p, g, rng)
    assert check_directions(p, g, s, t, rng, n_dirs=3) < 1e-4


def test_pooling_examples_through_graph():
    g = BipartiteGraph(np.zeros((2, 2)), np.zeros((2, 3)), np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1]),
                       np.zeros(4), np.arange(2), np.arange(2))
    assert hungarian_pooling(g, np.array([0.9, 0.8, 0.85, 0.1])).tolist() == [0, 1, 1, 0]


def test_params_round_trip(tmp_path):
    p = init_params(9, TINY)
    p["e1.b"][:] = np.linspace(-1, 1, 8)
    save_params(p, tmp_path / "p.bmn")
    q = load_params(tmp_path / "p.bmn")
    assert q == p
    assert dumps_params(q) == dumps_params(p)


def test_default_network_round_trip():
    p = init_params(0)
    q = loads_params(dumps_params(p), expected=BmnetConfig())
    assert q == p and q.config.edge_blocks == 18


def test_params_format_errors():
    data = dumps_params(init_params(0, TINY))
    with pytest.raises(ParamsFormatError, match="truncated"):
        loads_params(data[:-3])
    with pytest.raises(ParamsFormatError):
        loads_params(b"XXXX" + data[4:])
    with pytest.raises(ParamsFormatError, match="trailing"):
        loads_params(data + b"\0")
    with pytest.raises(ParamsFormatError, match="does not match"):
        loads_params(data, expected=BmnetConfig())
