import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special

from lif_mc import random_instances, simulate_rates
from spikeattack.dataset import Image
from spikeattack.sdbn.network import (
    TOPOLOGY,
    SdbnModel,
    TopLayerConfig,
    _top_loss_and_grads,
    _top_problem,
    input_rates,
    normalize_rates,
    predict_proba,
    sdbn_oracle,
    sdbn_rate_forward,
    train_top_layer,
)
from spikeattack.sdbn.neuron import (
    NeuronParams,
    adaptive_simpson,
    drive_moments,
    erfcx_integral,
    layer_rates,
    siegert,
    siegert_rate,
)
from spikeattack.sdbn.rbm import (
    Rbm,
    RbmDivergedError,
    RbmTrainConfig,
    drive_for_activation,
    hidden_activation,
    rbm_init,
    rbm_train_pcd,
    reconstruction_error,
    visible_activation,
)
from spikeattack.sdbn.spiking import (
    SimConfig,
    poisson_encode,
    sdbn_spike_forward,
    simulate,
    spike_probabilities,
    write_spike_csv,
)

P = NeuronParams()


def quad_siegert(rates, w, bias, p=P):
    """Reference rate from QUADPACK; exp(u^2) (1 + erf(u)) is evaluated as erfcx(-u)."""
    mu, sigma = drive_moments(rates, w, bias, p)
    lo, hi = (p.v_reset - mu) / sigma, (p.v_th - mu) / sigma
    val, _ = integrate.quad(lambda u: special.erfcx(-u), lo, hi, epsabs=1e-13, epsrel=1e-12, limit=500)
    return 1.0 / (p.t_ref + p.tau_m * math.sqrt(math.pi) * val)


def test_neuron_params_validation():
    with pytest.raises(ValueError):
        NeuronParams(tau_m=0)
    with pytest.raises(ValueError):
        NeuronParams(v_th=0.0, v_reset=0.0)
    with pytest.raises(ValueError):
        NeuronParams(t_ref=-1e-3)
    assert P.max_rate == pytest.approx(500.0)


def test_adaptive_simpson_known_integrals():
    val, ok = adaptive_simpson(math.exp, 0.0, 1.0)
    assert ok and val == pytest.approx(math.e - 1, abs=1e-10)
    val, ok = adaptive_simpson(lambda x: math.sqrt(x), 0.0, 4.0)
    assert ok and val == pytest.approx(16.0 / 3.0, abs=1e-8)
    val, ok = adaptive_simpson(math.sin, 1.0, 1.0)
    assert val == 0.0


def test_siegert_subthreshold_silence():
    assert siegert_rate(np.zeros(20), np.full(20, 0.01), -50.0, P) < 1e-6


def test_siegert_refractory_ceiling():
    r = siegert_rate(np.full(20, 1000.0), np.full(20, 100.0), 0.0, P)
    assert r <= P.max_rate
    assert r == pytest.approx(P.max_rate, rel=0.01)


def test_siegert_matches_quadpack():
    rng = np.random.default_rng(0)
    for _ in range(30):
        rates = rng.uniform(0, 300, 20)
        w = rng.uniform(-0.02, 0.03, 20)
        bias = rng.uniform(-20, 40)
        mu, sigma = drive_moments(rates, w, bias, P)
        if (P.v_th - mu) / sigma > 8:
            continue
        assert siegert_rate(rates, w, bias, P) == pytest.approx(quad_siegert(rates, w, bias), rel=1e-7)


def test_deterministic_limit():
    # no noise: time to climb from reset to threshold under constant drive
    mu = 1.5
    r = siegert_rate(np.zeros(3), np.zeros(3), mu / P.tau_m, P)
    expected = 1 / (P.t_ref + P.tau_m * math.log(mu / (mu - 1)))
    assert r == pytest.approx(expected, rel=1e-12)
    assert siegert(np.array([mu]), np.array([1e-6]), P)[0] == pytest.approx(expected, rel=1e-4)


def test_erfcx_integral_against_quadrature():
    for y in (0.0, 0.3, 1.7, 5.2, 19.9, 20.5, 40.0):
        ref, _ = integrate.quad(special.erfcx, 0, y, epsabs=1e-14, epsrel=1e-13, limit=200)
        assert erfcx_integral(np.array([y]))[0] == pytest.approx(ref, rel=1e-10, abs=1e-14)


def test_vectorised_siegert_matches_reference():
    rng = np.random.default_rng(1)
    rates = rng.uniform(0, 200, (200, 30))
    W = rng.uniform(-0.02, 0.03, (30, 1))
    for bias in (-30.0, 0.0, 20.0, 60.0):
        vec = layer_rates(rates, W, np.array([bias]), P)[:, 0]
        ref = np.array([siegert_rate(r, W[:, 0], bias, P) for r in rates])
        np.testing.assert_allclose(vec, ref, rtol=1e-8, atol=1e-12)


def test_siegert_derivatives():
    mu = np.linspace(0.3, 3.0, 25)
    sigma = np.linspace(0.05, 0.6, 25)
    _, d_mu, d_sigma = siegert(mu, sigma, P, derivatives=True)
    h = 1e-6
    fd_mu = (siegert(mu + h, sigma, P) - siegert(mu - h, sigma, P)) / (2 * h)
    fd_sigma = (siegert(mu, sigma + h, P) - siegert(mu, sigma - h, P)) / (2 * h)
    np.testing.assert_allclose(d_mu, fd_mu, rtol=1e-4, atol=1e-6)
    np.testing.assert_allclose(d_sigma, fd_sigma, rtol=1e-4, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    b1=st.floats(-100, 200),
    db=st.floats(0, 50),
)
def test_siegert_monotone_in_bias_and_bounded(seed, b1, db):
    rng = np.random.default_rng(seed)
    rates = rng.uniform(0, 500, 10)
    w = rng.uniform(-0.05, 0.05, 10)
    r1 = siegert_rate(rates, w, b1, P)
    r2 = siegert_rate(rates, w, b1 + db, P)
    assert 0.0 <= r1 <= r2 * (1 + 1e-9) + 1e-12
    assert r2 <= P.max_rate


@pytest.mark.parametrize("seed", [3, 4])
def test_siegert_against_monte_carlo_lif(seed):
    inst = random_instances(4, np.random.default_rng(seed), mu_range=(1.2, 1.5))
    mc = simulate_rates(inst, duration=4.0, trials=20, seed=seed)
    theory = np.array([siegert_rate(r, w, b, P) for r, w, b in inst])
    np.testing.assert_allclose(theory, mc, rtol=0.05)


def test_top_layer_gradients():
    rng = np.random.default_rng(0)
    F = rng.uniform(0, 100, (20, 15))
    y = rng.integers(0, 10, 20)
    W = 0.01 * rng.standard_normal((15, 10))
    b = np.full(10, 45.0)
    _, gW, gb = _top_loss_and_grads(W, b, F, y, P, 1.0)
    for i, j in [(0, 0), (7, 4), (14, 9)]:
        e = 1e-6
        Wp, Wm = W.copy(), W.copy()
        Wp[i, j] += e
        Wm[i, j] -= e
        fd = (_top_loss_and_grads(Wp, b, F, y, P, 1.0)[0] - _top_loss_and_grads(Wm, b, F, y, P, 1.0)[0]) / (2 * e)
        assert gW[i, j] == pytest.approx(fd, rel=1e-4, abs=1e-8)
    e = 1e-4
    bp, bm = b.copy(), b.copy()
    bp[2] += e
    bm[2] -= e
    fd = (_top_loss_and_grads(W, bp, F, y, P, 1.0)[0] - _top_loss_and_grads(W, bm, F, y, P, 1.0)[0]) / (2 * e)
    assert gb[2] == pytest.approx(fd, rel=1e-4, abs=1e-10)


def test_top_layer_objective_gradient_in_training_coordinates():
    rng = np.random.default_rng(1)
    F = rng.uniform(0, 80, (30, 12))
    y = rng.integers(0, 10, 30)
    objective, x0, _, _ = _top_problem(F, y, TopLayerConfig(l2=1e-3, init_std=0.3), P, 10)
    x = x0 + 0.05 * rng.standard_normal(x0.shape)
    _, g = objective(x)
    for i in [0, 17, 64, 119, 120, 125, 129]:
        e = 1e-6
        xp, xm = x.copy(), x.copy()
        xp[i] += e
        xm[i] -= e
        fd = (objective(xp)[0] - objective(xm)[0]) / (2 * e)
        assert g[i] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_top_layer_fits_separable_features():
    rng = np.random.default_rng(2)
    y = np.repeat(np.arange(10), 20)
    F = 5.0 + 40.0 * np.eye(10)[y] @ rng.uniform(0.5, 1.0, (10, 30)) + rng.uniform(0, 5, (200, 30))
    top = train_top_layer(F, y, TopLayerConfig(max_iterations=100), P)
    assert np.mean(layer_rates(F, top.W, top.b_h, P).argmax(axis=1) == y) == 1.0


@pytest.mark.parametrize("bound", [0.05, 0.5])
def test_top_layer_weights_stay_within_bound(bound):
    rng = np.random.default_rng(3)
    y = np.repeat(np.arange(10), 20)
    F = 5.0 + 40.0 * np.eye(10)[y] @ rng.uniform(0.5, 1.0, (10, 30)) + rng.uniform(0, 5, (200, 30))
    top = train_top_layer(F, y, TopLayerConfig(max_iterations=100, weight_bound=bound), P)
    assert np.abs(top.W).max() <= bound * (1 + 1e-9)


# RBM ------------------------------------------------------------------------------


def _pattern_data(n=200, size=16, seed=0):
    pat = (np.random.default_rng(seed).random(size) < 0.5).astype(float)
    return np.tile(pat, (n, 1))


def test_drive_for_activation_inverts_noise_free_rate():
    act = np.array([0.01, 0.05, 0.2, 0.6, 0.9])
    for p in (P, NeuronParams(v_reset=0.25, tau_m=0.01)):
        mu = drive_for_activation(act, p)
        np.testing.assert_allclose(siegert(mu, np.zeros_like(mu), p) * p.t_ref, act, rtol=1e-7)
    quiet = drive_for_activation(np.array([0.0, 0.004]), P)
    assert quiet[0] == P.v_reset and quiet[1] < P.v_th


def test_rbm_init_matches_visible_means():
    data = np.random.default_rng(5).uniform(0.0, 0.6, (200, 30)) * np.linspace(0, 1, 30)
    rbm = rbm_init(30, 20, RbmTrainConfig(init_std=0.0), P, data.mean(axis=0))
    recon = visible_activation(rbm, np.zeros((1, 20)), P)[0]
    live = data.mean(axis=0) >= 0.01
    np.testing.assert_allclose(recon[live], data.mean(axis=0)[live], rtol=1e-6)
    assert np.all(recon[~live] < 1e-6)


def test_rbm_zero_epochs_is_init():
    cfg = RbmTrainConfig(epochs=0)
    rbm = rbm_train_pcd(_pattern_data(), (16, 8), cfg, P)
    ref = rbm_init(16, 8, cfg, P)
    assert np.array_equal(rbm.W, ref.W) and np.array_equal(rbm.b_h, ref.b_h)


def test_rbm_deterministic_per_seed():
    cfg = RbmTrainConfig(epochs=3, minibatch=20, fantasy_particles=20, seed=5)
    a = rbm_train_pcd(_pattern_data(), (16, 8), cfg, P)
    b = rbm_train_pcd(_pattern_data(), (16, 8), cfg, P)
    assert np.array_equal(a.W, b.W) and np.array_equal(a.b_v, b.b_v)


def test_rbm_memorises_repeated_pattern():
    data = _pattern_data()
    cfg = RbmTrainConfig(epochs=30, minibatch=20, fantasy_particles=20)
    rbm = rbm_train_pcd(data, (16, 8), cfg, P)
    assert reconstruction_error(rbm, data[:1], P) < 0.05


def test_rbm_rejects_out_of_range_data():
    with pytest.raises(ValueError):
        rbm_train_pcd(np.full((4, 16), 1.5), (16, 8), RbmTrainConfig(epochs=1), P)


def test_rbm_divergence_reports_epoch():
    cfg = RbmTrainConfig(epochs=3, learning_rate=1e300, minibatch=20, fantasy_particles=20)
    with np.errstate(all="ignore"), pytest.raises(RbmDivergedError) as exc:
        rbm_train_pcd(_pattern_data(), (16, 8), cfg, P)
    assert exc.value.epoch == 0


def test_hidden_activation_in_unit_interval():
    rng = np.random.default_rng(2)
    rbm = Rbm(rng.normal(scale=0.5, size=(16, 8)), np.zeros(16), rng.normal(scale=40, size=8))
    h = hidden_activation(rbm, rng.random((50, 16)), P)
    assert h.min() >= 0 and h.max() <= 1


# network --------------------------------------------------------------------------


def small_model(seed=0, bias=60.0, scale=0.01):
    rng = np.random.default_rng(seed)
    stack = []
    for n_in, n_out in zip(TOPOLOGY[:-1], TOPOLOGY[1:]):
        stack.append(Rbm(scale * rng.standard_normal((n_in, n_out)), np.zeros(n_in), np.full(n_out, bias)))
    return SdbnModel(stack, P)


def test_model_topology_checked():
    m = small_model()
    assert [r.W.shape for r in m.stack] == [(784, 500), (500, 500), (500, 10)]
    with pytest.raises(ValueError):
        SdbnModel(m.stack[:2], P)


def test_input_scaling():
    x = np.zeros((28, 28))
    x[0, 0] = 1.0
    assert input_rates(x, P)[0, 0] == pytest.approx(0.2 * 500.0)


def test_rate_forward_normalised_and_deterministic():
    m = small_model()
    px = np.random.default_rng(3).random((28, 28))
    a = sdbn_rate_forward(m, Image(px))
    assert abs(a.sum() - 1) < 1e-9
    assert np.array_equal(a, sdbn_oracle(m)(Image(px)))


def test_all_black_zero_bias_is_uniform():
    m = small_model(bias=0.0)
    np.testing.assert_allclose(predict_proba(m, np.zeros((28, 28)))[0], np.full(10, 0.1), atol=1e-12)


def test_normalize_rates_silent_row():
    out = normalize_rates([[0, 0, 0, 0], [1, 3, 0, 0]])
    assert out[0].tolist() == [0.25] * 4
    assert out[1].tolist() == [0.25, 0.75, 0, 0]


# spiking --------------------------------------------------------------------------


def test_poisson_zero_pixel_empty_and_ordering():
    px = np.zeros((28, 28))
    px[3, 4] = 0.2
    sim = SimConfig(duration=1.0, seed=1)
    trains = poisson_encode(px, P, sim)
    assert len(trains) == 784
    assert all(len(t) == 0 for i, t in enumerate(trains) if i != 3 * 28 + 4)
    t = trains[3 * 28 + 4]
    assert np.all(np.diff(t) > 0) and t.min() >= 0 and t.max() < 1.0


def test_poisson_mean_count():
    px = np.zeros((28, 28))
    px[0, 0] = 0.2
    counts = np.array([len(poisson_encode(px, P, SimConfig(seed=s))[0]) for s in range(1000)])
    se = counts.std(ddof=1) / math.sqrt(len(counts))
    assert abs(counts.mean() - 100.0) < 3 * se


def test_poisson_same_seed_identical():
    px = np.random.default_rng(0).random((28, 28)) * 0.2
    a = poisson_encode(px, P, SimConfig(seed=7))
    b = poisson_encode(px, P, SimConfig(seed=7))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt=0)
    with pytest.raises(ValueError):
        SimConfig(duration=1e-4, dt=1e-3)
    with pytest.raises(ValueError):
        SimConfig(repeats=0)


def test_spike_probabilities_silent_and_zero_class():
    probs, silent = spike_probabilities(np.array([[[0, 0, 0, 0], [2, 2, 0, 0]]]))
    assert silent[0]
    np.testing.assert_allclose(probs[0], [0.375, 0.375, 0.125, 0.125])
    probs, silent = spike_probabilities(np.array([[[3, 1, 0, 0]]]))
    assert not silent[0] and probs[0, 2] == 0.0


def test_spike_forward_sums_to_one_and_batches_match():
    m = small_model(bias=55.0, scale=0.02)
    rng = np.random.default_rng(4)
    x = rng.random((2, 28, 28))
    sim = SimConfig(duration=0.2, repeats=2, seed=3)
    out = sdbn_spike_forward(m, x[0], sim, details=True)
    assert abs(out.probs.sum() - 1) < 1e-12
    batch = simulate(m, x, sim)
    assert np.array_equal(batch[0], out.counts)


def test_spike_csv(tmp_path):
    m = small_model(bias=55.0, scale=0.02)
    counts, events = simulate(m, np.random.default_rng(0).random((28, 28)), SimConfig(duration=0.05, repeats=1), record=True)
    write_spike_csv(tmp_path / "s.csv", events)
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["time", "layer", "neuron", "spike"]
    assert len(rows) == len(events) + 1
    assert sum(1 for r in rows[1:] if r[1] == "3") == counts.sum()
