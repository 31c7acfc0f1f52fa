import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_dataset
from conv4rec.dataset import ObservedDataset, RatingScale
from conv4rec.model import DecoderSpec, init_params, EncoderSpec, predict_users
from conv4rec.numerics import make_rng
from conv4rec.theory import (
    BoundInputs,
    bayes_optimal_G,
    bound_norm_based,
    bound_param_count,
    claim1_probe,
    distance_to_init,
    implicit_loss,
    kl_divergence,
    layer_norm,
    lipschitz_probe,
    norm_kind,
    population_loss,
    q_bound,
    sample_counts,
    sample_dataset,
    synth_generate,
    tv_distance,
    tv_recovery_experiment,
)
from conv4rec.training import TrainConfig, reconstruction_loss, train
from oracles import brute_force_bayes, norm_bound_mp, param_count_bound_mp

N_LADDER = (1e3, 1e6, 1e9, 1e12)


def test_norm_kind_selection():
    assert [norm_kind(l, 2, 4) for l in (1, 2, 3, 4)] == ["interior-dense", "boundary", "interior-conv", "last"]
    with pytest.raises(ValueError):
        norm_kind(5, 2, 4)


def test_layer_norm_examples():
    assert layer_norm(np.array([[3.0, 4], [0, 1]]), "last") == 5.0
    assert layer_norm(np.diag([3.0, 1.0]), "interior-dense") == pytest.approx(3.0)
    assert layer_norm(np.array([[2.0], [7.0]]), "boundary", n=2) == pytest.approx(7.0)
    with pytest.raises(ValueError):
        layer_norm(np.zeros((3, 2)), "boundary", n=2)
    with pytest.raises(ValueError):
        layer_norm(np.zeros((3, 2)), "frobenius")


def test_boundary_norm_random_probe():
    w = np.vstack([np.diag([2.0, 1.0]), np.diag([7.0, 3.0])])
    got = layer_norm(w, "boundary", n=2)
    v = make_rng(0).standard_normal((100_000, 2))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    probe = max(np.linalg.norm(v @ w[:2].T, axis=1).max(), np.linalg.norm(v @ w[2:].T, axis=1).max())
    assert probe <= got + 1e-12
    assert got - probe <= 1e-3
    assert got == pytest.approx(7.0)


@settings(max_examples=30)
@given(st.integers(0, 10**6))
def test_layer_norm_properties(seed):
    rng = make_rng(seed)
    w = rng.standard_normal((5, 4))
    assert layer_norm(w, "last") == np.sqrt((w**2).sum(1)).max()
    v = rng.standard_normal(4)
    v /= np.linalg.norm(v)
    assert np.linalg.norm(w @ v) <= layer_norm(w, "interior-conv") + 1e-9


def test_distance_zero_at_init_and_rank_one():
    enc = EncoderSpec(6, 5, (4,), (3,))
    dec = DecoderSpec(6, 5, 3, (4, 4, 4), L0=2)
    p = init_params(enc, dec, RatingScale.integer(1, 5), seed=0)
    d0 = distance_to_init(dec, p.dec_w, p.dec_init)
    assert d0.beta == 0 and all(x == 0 for x in d0.dist + d0.a)
    w = [x.copy() for x in p.dec_w]
    for ell in (0, 2):
        w[ell][0, 0] += 1.0
    d1 = distance_to_init(dec, w, p.dec_init)
    assert d1.dist[0] == pytest.approx(1) and d1.dist[2] == pytest.approx(1)
    assert d1.a[0] == pytest.approx(1) and d1.a[2] == pytest.approx(1)
    assert d1.beta == pytest.approx(2)
    with pytest.raises(ValueError):
        distance_to_init(dec, p.dec_w, None)


def test_distance_after_training_matches_recomputation():
    d = make_dataset(10, 12, 40)
    state = train(TrainConfig(batch_size=4, epoch_block=10, max_blocks=1, r=4, K=6), d)
    p = state.params
    dist = distance_to_init(p.dec, p.dec_w, p.dec_init)
    diffs = [w - m for w, m in zip(p.dec_w, p.dec_init)]
    n, K = p.dec.n, p.dec.K[1]
    want = [max(np.linalg.norm(diffs[0][j * K:(j + 1) * K], 2) for j in range(n)),
            np.linalg.norm(diffs[1], 2),
            np.sqrt((diffs[2] ** 2).sum(1)).max()]
    assert np.allclose(dist.dist, want, rtol=1e-9)
    assert math.isfinite(dist.beta) and dist.beta == pytest.approx(sum(want), rel=1e-9)
    assert dist.beta > 0


INSTANCES = [
    dict(du=4, delta=0.05, N=1e4, m=100, r=8, D2=500, beta=1, nu=0, L=3, chi=2),
    dict(du=4, delta=0.01, N=1e5, m=943, r=32, D2=244_000, beta=3.5, nu=0.2, L=3, chi=10),
    dict(du=1, delta=0.1, N=500, m=20, r=2, D2=80, beta=0.1, nu=1.5, L=2, chi=0.5),
    dict(du=9, delta=0.5, N=1e7, m=5000, r=128, D2=10**6, beta=12, nu=0, L=9, chi=40),
    dict(du=4.5, delta=0.2, N=3e3, m=50, r=4, D2=700, beta=0, nu=0.3, L=5, chi=1),
]


def _param_inputs(c):
    return BoundInputs(c["delta"], c["N"], c["m"], c["r"], c["D2"], c["du"], c["L"],
                       c["beta"], c["nu"], c["chi"])


@pytest.mark.parametrize("c", INSTANCES)
def test_param_count_bound_matches_oracle(c):
    want = float(param_count_bound_mp(**c))
    assert bound_param_count(_param_inputs(c)) == pytest.approx(want, rel=1e-9)


def test_param_count_bound_hand_value():
    # 3*16*sqrt(ln 40/2e4) + 16*16/1e4 + 16*sqrt(48*1300/1e4) + 16*sqrt(1300*ln(72e4*3*3+1)/1e4)
    want = (48 * math.sqrt(math.log(40) / 2e4) + 0.0256 + 16 * math.sqrt(6.24)
            + 16 * math.sqrt(0.13 * math.log(6_480_001)))
    assert bound_param_count(_param_inputs(INSTANCES[0])) == pytest.approx(want, rel=1e-12)


def test_param_count_bound_monotone():
    base = INSTANCES[1]
    v0 = bound_param_count(_param_inputs(base))
    for key, bump in (("beta", 1.0), ("nu", 0.5), ("chi", 3.0), ("D2", 1000)):
        c = dict(base)
        c[key] += bump
        assert bound_param_count(_param_inputs(c)) >= v0


def _norm_inputs(c, a, s, n=50):
    return BoundInputs(c["delta"], c["N"], c["m"], c["r"], c["D2"], c["du"], len(s),
                       chi=c["chi"], a=a, s=s, n=n)


NORM_CASES = [
    (INSTANCES[0], (0.5, 0.2, 0.1), (1.2, 1.1, 0.9)),
    (INSTANCES[1], (2.0, 1.0, 3.0), (3.0, 2.5, 1.7)),
    (INSTANCES[2], (0.01, 0.02), (1.0, 1.0)),
    (INSTANCES[3], (0.3,) * 9, (1.05,) * 9),
    (INSTANCES[4], (0.0, 0.4, 0.0, 0.2, 0.1), (2.0, 0.5, 1.0, 1.5, 0.8)),
]


@pytest.mark.parametrize("c,a,s", NORM_CASES)
def test_norm_bound_matches_oracle(c, a, s):
    want = float(norm_bound_mp(c["du"], c["delta"], c["N"], c["m"], c["r"], c["D2"], 50, c["chi"], a, s))
    assert bound_norm_based(_norm_inputs(c, a, s)) == pytest.approx(want, rel=1e-9)


def test_norm_bound_zero_distance_drops_third_term():
    c = INSTANCES[0]
    b = _norm_inputs(c, (0.0, 0.0, 0.0), (1.2, 1.1, 0.9))
    first_two = (3 * 16 * math.sqrt(math.log(40) / 2e4) + 16 * 16 / 1e4
                 + 48 * 16 * 4 * math.sqrt(800 / 1e4) * math.sqrt(math.log(600 * 1e4 * 2 * 1.2 * 1.1 * 0.9 + 1)))
    assert bound_norm_based(b) == pytest.approx(first_two, rel=1e-12)


def test_bounds_vanish_along_ladder():
    c = dict(INSTANCES[1])
    pc, nb = [], []
    for N in N_LADDER:
        c["N"] = N
        pc.append(bound_param_count(_param_inputs(c)))
        nb.append(bound_norm_based(_norm_inputs(c, (2.0, 1.0, 3.0), (3.0, 2.5, 1.7))))
    for seq in (pc, nb):
        assert all(a > b for a, b in zip(seq, seq[1:]))
        assert seq[-1] < 1e-2 * seq[0]


def test_bound_inputs_validation():
    with pytest.raises(ValueError):
        BoundInputs(1.5, 10, 1, 1, 1, 4, 2)
    with pytest.raises(ValueError):
        bound_norm_based(BoundInputs(0.05, 10, 1, 1, 1, 4, 2))


def test_q_bound_vanishes():
    vals = [q_bound(BoundInputs(0.05, N, 50, 4, 700, 4, 2, 1.0, 0.1, 2.0, B=5.0)) for N in N_LADDER]
    assert all(a > b for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize("L,L0", [(2, 1), (3, 1), (4, 2)])
def test_lipschitz_probe(L, L0):
    dec = DecoderSpec(7, 3, 3, (5,) * (L - 1), L0)
    rng = make_rng(L)
    init = [rng.standard_normal(s.weight_shape) * 0.5 for s in dec.layers]
    worst = lipschitz_probe(dec, init, trials=1000, chi=2.0, beta=1.5, seed=L)
    assert 0 < worst <= 1 + 1e-6


def test_claim1_probe():
    dec = DecoderSpec(7, 3, 3, (5, 5), 1)
    rng = make_rng(9)
    init = [rng.standard_normal(s.weight_shape) * 0.5 for s in dec.layers]
    assert claim1_probe(dec, init, chi=2.0, beta=1.0, eps=1e-3, trials=200) <= 1 + 1e-9


def test_bayes_examples():
    p = np.full((2, 2, 1), 0.25)
    G = bayes_optimal_G(p, 2)
    assert np.allclose(G, 0.5)
    with pytest.raises(ValueError, match=r"i=0, j=0"):
        bayes_optimal_G(p, 10)


def test_bayes_matches_brute_force():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        m, n, k = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 3)
        p = rng.random((m, n, k)) + 0.05
        p /= p.sum()
        N = rng.uniform(0.3, 0.95) / p.sum(-1).max()
        G = bayes_optimal_G(p, N)
        assert np.allclose(G.sum(-1), 1, atol=1e-12) and np.all(G >= 0)
        for i in range(m):
            for j in range(n):
                worst = max(worst, np.abs(brute_force_bayes(p[i, j], N) - G[i, j]).max())
    assert worst <= 1e-4


def test_implicit_loss_uniform_empty():
    G = np.full((3, 4, 6), 1 / 6)
    empty = ObservedDataset(3, 4, np.zeros(0, int), np.zeros(0, int), np.zeros(0, int), RatingScale.integer(1, 5))
    assert implicit_loss(G, empty, 7) == pytest.approx(12 / 7 * math.log(6), rel=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_implicit_loss_equals_scaled_reconstruction(seed):
    rng = np.random.default_rng(seed)
    m, n = int(rng.integers(2, 6)), int(rng.integers(3, 8))
    d = make_dataset(m, n, int(rng.integers(1, m * n)), seed=seed)
    p = init_params(EncoderSpec(n, 5, (3,), (2,)), DecoderSpec.uniform(n, 5, 2, 2, 3), d.scale, seed)
    G = predict_users(p, d, range(m))
    rec = reconstruction_loss(p, range(m), d)
    assert abs(implicit_loss(G, d, d.N) - m * n / d.N * rec) <= 1e-10


def test_implicit_loss_rejects_zero_channel():
    d = make_dataset(2, 3, 2)
    G = np.full((2, 3, 6), 1 / 6)
    G[d.users[0], d.items[0], d.ratings[0]] = 0
    with pytest.raises(ValueError):
        implicit_loss(G, d, 2)


def test_implicit_loss_at_bayes_tracks_population():
    gt = synth_generate(30, 30, 2, 3, seed=0)
    N = 300
    G = bayes_optimal_G(gt.p, N)
    pop = population_loss(G, gt.p, N)
    rng = make_rng(5)
    vals = [implicit_loss(G, sample_dataset(gt, N, rng), N) for _ in range(40)]
    assert abs(np.mean(vals) - pop) <= 4 * np.std(vals) / np.sqrt(len(vals)) + 0.01 * abs(pop)


def test_kl_tv_examples():
    p = np.array([0.2, 0.3, 0.5])
    assert kl_divergence(p, p) == 0 and tv_distance(p, p) == 0
    assert kl_divergence(np.array([1.0, 0]), np.array([0.5, 0.5])) == pytest.approx(math.log(2))
    assert tv_distance(np.array([1.0, 0]), np.array([0.5, 0.5])) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        kl_divergence(np.array([0.5, 0.5]), np.array([1.0, 0.0]))


def test_pinsker_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        k = int(rng.integers(2, 8))
        p, q = rng.dirichlet(np.ones(k) * 0.5), rng.dirichlet(np.ones(k) * 0.5)
        q = np.maximum(q, 1e-300)
        kl = kl_divergence(p, q)
        assert kl >= 0
        # L1 form of Pinsker: ||p - q||_1 <= sqrt(2 KL)
        assert math.sqrt(2 * kl) - tv_distance(p, q) >= -1e-12


@given(st.integers(0, 10**6))
def test_marginal_tv_le_full_tv(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(24)).reshape(2, 4, 3)
    q = rng.dirichlet(np.ones(24)).reshape(2, 4, 3)
    assert tv_distance(p.sum(-1), q.sum(-1)) <= tv_distance(p, q) + 1e-15


def test_synth_generate_normalised_and_noiseless():
    gt = synth_generate(6, 7, 2, 5, seed=3)
    assert abs(gt.p.sum() - 1) <= 1e-12
    nl = synth_generate(6, 7, 2, 5, seed=3, noiseless=True)
    assert abs(nl.p.sum() - 1) <= 1e-12
    assert np.all((nl.p > 0).sum(-1) == 1)


def test_bayes_of_generator_recovers_p():
    gt = synth_generate(5, 6, 2, 4, seed=1)
    G = bayes_optimal_G(gt.p, gt.Z)
    assert np.allclose(G, gt.G_gen, atol=1e-12)
    p_hat = G[..., 1:] / G[..., 1:].sum()
    assert tv_distance(p_hat, gt.p) <= 1e-12


def test_counts_match_binomial_bounds():
    gt = synth_generate(3, 4, 2, 2, seed=0)
    N = 10**6
    freq = sample_counts(gt, N, make_rng(0)) / N
    sd = np.sqrt(gt.p * (1 - gt.p) / N)
    assert np.all(np.abs(freq - gt.p) <= 3 * sd)


def test_duplicate_free_sampler():
    gt = synth_generate(4, 5, 2, 3, seed=2)
    d = sample_dataset(gt, 15, make_rng(1))
    assert d.N == 15
    assert len(set(zip(d.users.tolist(), d.items.tolist()))) == 15
    with pytest.raises(ValueError):
        sample_dataset(gt, 21, make_rng(1))


def test_noiseless_mse_within_excess_bound():
    rows = tv_recovery_experiment(10, 12, 2, 3, [20_000], steps=600, noiseless=True)
    row = rows[0]
    assert row.status == "ok"
    du = 2.0
    assert row.excess >= -1e-9
    # rating MSE <= du^2 (TV + TV of marginals) <= 2 du^2 TV <= 2 du^2 sqrt(2 KL)
    assert row.mse <= du**2 * (row.tv + row.tv_marginal) + 1e-12
    assert row.mse <= 2 * du**2 * math.sqrt(2 * max(row.excess, 0.0)) + 1e-12
