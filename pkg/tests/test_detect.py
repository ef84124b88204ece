"""Detector tests: energy math against a brute-force oracle, AUC against
exact pair enumeration, then the behavioral contract of each scorer."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedrider import detect as d
from fedrider import fedsim
from fedrider import numkit as nk


# Independent oracles, written before the implementations they check.

def mixture_energy_oracle(z, phi, mu, sigma):
    """-log of the mixture density by direct dense evaluation: plain inv and
    det, no Cholesky, no log-sum-exp."""
    z = np.asarray(z, dtype=np.float64)
    total = 0.0
    for k in range(len(phi)):
        diff = z - mu[k]
        quad = diff @ np.linalg.inv(sigma[k]) @ diff
        total += phi[k] * math.exp(-0.5 * quad) / math.sqrt(
            np.linalg.det(2.0 * math.pi * sigma[k]))
    return -math.log(total)


def pairwise_auc_oracle(scores, labels):
    """Fraction of (positive, negative) pairs won by the positive, ties 1/2."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def random_pd_mixture(rng, k, dim):
    phi = rng.dirichlet(np.ones(k))
    mu = rng.normal(0, 2, size=(k, dim))
    sigma = np.empty((k, dim, dim))
    for i in range(k):
        a = rng.normal(size=(dim, dim))
        sigma[i] = a @ a.T + 0.5 * np.eye(dim)
    return d.GMMParams(phi, mu, sigma)


def make_batch(matrix):
    return [d.flatten(row, client_id=i) for i, row in enumerate(np.asarray(matrix))]


# ----------------------------------------------------------- flatten / std

def test_flatten_matrix_rows():
    flat = d.flatten(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert flat.vector.tolist() == [1.0, 2.0, 3.0, 4.0]


def test_flatten_layer_list_and_unflatten_roundtrip():
    layers = [np.arange(6.0).reshape(2, 3), np.array([7.0, 8.0, 9.0]),
              np.arange(8.0).reshape(4, 2)]
    flat = d.flatten(layers, client_id=3)
    assert flat.client_id == 3
    back = d.unflatten(flat, [(2, 3), (3,), (4, 2)])
    for orig, rec in zip(layers, back):
        assert np.array_equal(orig, rec)


def test_unflatten_length_mismatch_rejected():
    with pytest.raises(d.DetectError):
        d.unflatten(np.zeros(7), [(2, 3)])


def test_flatten_desk_model_parameter_count():
    model = fedsim.init_global_model((20, 16, 10), seed=0)
    update = fedsim.ClientUpdate(client_id=0, round_index=1, grad=model.params)
    flat = d.flatten(update)
    expected = sum(int(np.prod(s)) for s in model.params.shapes)
    assert flat.vector.size == expected == 20 * 16 + 16 + 16 * 10 + 10


def test_std_stat_constant_vector_is_zero():
    assert d.std_stat(np.array([1.0, 1.0, 1.0])) == 0.0


def test_std_stat_population_convention():
    # sample std would give sqrt(2); population gives 1
    assert d.std_stat(np.array([0.0, 2.0])) == 1.0


def test_std_stat_short_vector_rejected():
    with pytest.raises(d.DetectError):
        d.std_stat(np.array([4.2]))


def test_std_stat_uniform_moment():
    rng = np.random.default_rng(11)
    draw = rng.uniform(-1e-3, 1e-3, size=100_000)
    expected = 1e-3 / math.sqrt(3.0)
    assert abs(d.std_stat(draw) - expected) < 0.05 * expected


# ------------------------------------------------------------------- energy

def test_gmm_params_weight_sum_enforced():
    with pytest.raises(d.DetectError):
        d.GMMParams(np.array([0.6, 0.6]), np.zeros((2, 1)), np.ones((2, 1, 1)))


def test_gmm_params_shape_consistency_enforced():
    with pytest.raises(d.DetectError):
        d.GMMParams(np.array([1.0]), np.zeros((1, 2)), np.ones((1, 3, 3)))


def test_gmm_energy_standard_normal_closed_form():
    gmm = d.GMMParams(np.array([1.0]), np.zeros((1, 1)), np.ones((1, 1, 1)))
    assert d.gmm_energy(np.array([0.0]), gmm) == pytest.approx(
        0.5 * math.log(2.0 * math.pi), abs=1e-12)


def test_gmm_energy_matches_bruteforce_oracle():
    rng = np.random.default_rng(5)
    for k in (1, 2, 3, 4):
        for dim in (1, 2, 4, 6):
            gmm = random_pd_mixture(rng, k, dim)
            for _ in range(100 // (k * 2)):
                z = rng.normal(0, 3, size=dim)
                want = mixture_energy_oracle(z, gmm.phi, gmm.mu, gmm.sigma)
                got = d.gmm_energy(z, gmm)
                assert abs(got - want) <= 1e-8 * max(1.0, abs(want))


def test_gmm_energy_two_component_hand_mixture():
    gmm = d.GMMParams(np.array([0.3, 0.7]),
                      np.array([[0.0, 0.0], [3.0, 1.0]]),
                      np.stack([np.eye(2), 2.0 * np.eye(2)]))
    z = np.array([1.0, -0.5])
    want = mixture_energy_oracle(z, gmm.phi, gmm.mu, gmm.sigma)
    assert d.gmm_energy(z, gmm) == pytest.approx(want, rel=1e-10)


def test_gmm_energy_minimum_at_dominant_mean():
    gmm = d.GMMParams(np.array([0.9, 0.1]),
                      np.array([[0.0, 0.0], [8.0, 8.0]]),
                      np.stack([np.eye(2), np.eye(2)]))
    at_mode = d.gmm_energy(gmm.mu[0], gmm)
    rng = np.random.default_rng(2)
    others = [gmm.mu[0] + off for off in
              ([0.5, 0.0], [0.0, -0.5], [1.0, 1.0], gmm.mu[1] - gmm.mu[0])]
    others += [rng.normal(0, 2, size=2) for _ in range(20)]
    assert all(at_mode < d.gmm_energy(z, gmm) for z in others)


def test_gmm_energy_nonpd_component_named():
    sigma = np.stack([np.eye(2), -np.eye(2)])
    gmm = d.GMMParams(np.array([0.5, 0.5]), np.zeros((2, 2)), sigma)
    with pytest.raises(d.CovarianceError, match="component 1"):
        d.gmm_energy(np.zeros(2), gmm)


def test_gmm_energy_dimension_mismatch_rejected():
    gmm = d.GMMParams(np.array([1.0]), np.zeros((1, 2)), np.eye(2)[None])
    with pytest.raises(d.DetectError):
        d.gmm_energy(np.zeros(3), gmm)


def test_gmm_from_memberships_uniform_equals_plain_moments():
    rng = np.random.default_rng(9)
    z = rng.normal(size=(40, 3))
    gamma = np.full((40, 4), 0.25)
    gmm = d.gmm_from_memberships(z, gamma, eps=1e-6)
    want_mu = z.mean(axis=0)
    want_sigma = np.cov(z, rowvar=False, bias=True) + 1e-6 * np.eye(3)
    for k in range(4):
        assert gmm.phi[k] == pytest.approx(0.25, abs=1e-12)
        assert np.allclose(gmm.mu[k], want_mu, atol=1e-12)
        assert np.allclose(gmm.sigma[k], want_sigma, atol=1e-12)


# ---------------------------------------------------------------------- auc

def test_auc_hand_cases():
    assert d.auc(np.array([2.0, 3.0, 1.0]), np.array([True, True, False])) == 1.0
    assert d.auc(np.array([1.0, 2.0]), np.array([True, False])) == 0.0
    got = d.auc(np.array([3.0, 1.0, 2.0, 0.0]),
                np.array([True, True, False, False]))
    assert got == pytest.approx(3.0 / 4.0, abs=1e-15)


def test_auc_ties_count_half():
    got = d.auc(np.array([1.0, 1.0]), np.array([True, False]))
    assert got == pytest.approx(0.5, abs=1e-15)


def test_auc_one_class_rejected():
    with pytest.raises(d.OneClassInputError):
        d.auc(np.array([1.0, 2.0]), np.array([True, True]))
    with pytest.raises(d.OneClassInputError):
        d.auc(np.array([1.0, 2.0]), np.array([False, False]))


def test_auc_accepts_detector_output():
    out = d.DetectorOutput(kind="std", round_index=5,
                           client_ids=np.array([7, 8, 9]),
                           scores=np.array([0.1, 0.9, 0.2]))
    assert d.auc(out, {8}) == 1.0


@given(st.lists(st.sampled_from([0.0, 0.25, 0.5, 1.0, 2.0]),
                min_size=2, max_size=12),
       st.data())
def test_auc_matches_pairwise_oracle(scores, data):
    labels = data.draw(st.lists(st.booleans(), min_size=len(scores),
                                max_size=len(scores)))
    if not (any(labels) and not all(labels)):
        labels[0], labels[-1] = True, False
    got = d.auc(np.array(scores), np.array(labels))
    want = pairwise_auc_oracle(scores, labels)
    assert abs(got - want) <= 1e-12


# -------------------------------------------------------------- autoencoder

def test_autoencoder_identical_vectors_equal_scores():
    vec = np.linspace(-1e-3, 1e-3, 30)
    batch = make_batch(np.tile(vec, (8, 1)))
    out = d.autoencoder_score(batch, arch=(8, 2), seed=4)
    assert out.scores.max() - out.scores.min() <= 1e-9


def test_autoencoder_zero_epochs_scores_initial_reconstruction():
    rng = np.random.default_rng(1)
    x = rng.normal(0, 1e-3, size=(6, 12))
    batch = make_batch(x)
    cfg = nk.SgdConfig(learning_rate=0.1, batch_size=6, epochs=0)
    out = d.autoencoder_score(batch, arch=(8, 3), train=cfg, seed=2,
                              input_scale="none")
    net = nk.Mlp(np.random.default_rng(2), [12, 8, 3, 8, 12])
    rec = net(nk.tensor(x)).values
    want = ((x - rec) ** 2).mean(axis=1)
    assert out.epoch_losses == ()
    assert np.allclose(out.scores, want, rtol=0, atol=1e-15)


def test_autoencoder_degenerate_bottleneck_rejected():
    batch = make_batch(np.random.default_rng(0).normal(size=(4, 6)))
    with pytest.raises(d.DetectError, match="degenerate"):
        d.autoencoder_score(batch, arch=(8, 6))


def test_autoencoder_single_update_rejected():
    with pytest.raises(d.DetectError):
        d.autoencoder_score(make_batch(np.ones((1, 5))))


def test_autoencoder_loss_decreases():
    rng = np.random.default_rng(3)
    batch = make_batch(rng.normal(0, 1e-3, size=(10, 20)))
    out = d.autoencoder_score(batch, arch=(8, 2), seed=1)
    assert out.epoch_losses[-1] < out.epoch_losses[0]
    assert np.isfinite(out.epoch_losses).all()


# -------------------------------------------------------------------- dagmm

def small_anomaly_batch(n=12, dim=16, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 1e-3, size=(n, dim))
    x[-1] = rng.uniform(-4e-3, 4e-3, size=dim)
    return make_batch(x)


def test_dagmm_duplicate_rows_identical_scores():
    rng = np.random.default_rng(6)
    x = rng.normal(0, 1e-3, size=(9, 10))
    x[4] = x[7]
    out = d.dagmm_score(make_batch(x), epochs=25, seed=1)
    assert out.score_of(4) == out.score_of(7)


def test_detectors_permutation_equivariant():
    batch = small_anomaly_batch()
    perm = np.random.default_rng(42).permutation(len(batch))
    shuffled = [batch[i] for i in perm]
    runs = [
        lambda b: d.autoencoder_score(b, arch=(8, 2), seed=3),
        lambda b: d.dagmm_score(b, epochs=25, seed=3),
        lambda b: d.stddagmm_score(b, epochs=25, seed=3),
    ]
    for run in runs:
        a, b = run(batch), run(shuffled)
        for cid in range(len(batch)):
            assert a.score_of(cid) == b.score_of(cid)


def test_dagmm_memberships_and_weights_sum_to_one():
    batch = small_anomaly_batch()
    x, _ = d._batch_matrix(batch)
    run = d._DagmmRun(d._scale_input(x, "pooled_std"), (32, 4, 16), 4, False,
                      0.1, 0.005, 1e-6, True, seed=0)
    z, gamma = run.features()
    assert np.allclose(gamma.values.sum(axis=1), 1.0, atol=1e-9)
    phi, _ = run.mixture(z, gamma)
    assert abs(phi.values.sum() - 1.0) <= 1e-9


def test_dagmm_ingraph_moments_match_plain_formulas():
    batch = small_anomaly_batch(n=10, dim=8, seed=5)
    x, _ = d._batch_matrix(batch)
    run = d._DagmmRun(d._scale_input(x, "pooled_std"), (6, 2, 5), 3, False,
                      0.1, 0.005, 1e-6, True, seed=7)
    z, gamma = run.features()
    phi, comps = run.mixture(z, gamma)
    plain = d.gmm_from_memberships(z.values, gamma.values, eps=1e-6)
    assert np.allclose(phi.values, plain.phi, atol=1e-12)
    for k, (_phi_k, mu_k, _dev, cov) in enumerate(comps):
        assert np.allclose(mu_k.values.ravel(), plain.mu[k], atol=1e-12)
        assert np.allclose(cov.values, plain.sigma[k], atol=1e-12)
    energies = run.energies(comps).values
    want = [d.gmm_energy(z.values[i], plain) for i in range(len(batch))]
    assert np.allclose(energies, want, rtol=1e-8)


def test_dagmm_losses_finite_every_epoch():
    out = d.dagmm_score(small_anomaly_batch(), epochs=40, seed=2)
    assert len(out.epoch_losses) == 40
    assert np.isfinite(out.epoch_losses).all()


def test_dagmm_covariance_collapse_diagnostics():
    # identical rows with the eps regularizer disabled: zero covariance
    vec = np.linspace(0.5, 1.5, 10)
    batch = make_batch(np.tile(vec, (6, 1)))
    with pytest.raises(d.CovarianceError, match="component"):
        d.dagmm_score(batch, epochs=5, seed=0, eps=0.0)


def test_dagmm_optimizer_switch():
    batch = small_anomaly_batch()
    by_sgd = d.dagmm_score(batch, epochs=25, seed=3, optimizer="sgd")
    by_adam = d.dagmm_score(batch, epochs=25, seed=3, optimizer="adam")
    assert not np.array_equal(by_sgd.scores, by_adam.scores)
    with pytest.raises(d.DetectError, match="optimizer"):
        d.dagmm_score(batch, epochs=1, optimizer="rmsprop")


def test_winsorize_clamps_and_kills_outside_gradient():
    col = nk.param(np.array([-5.0, -1.0, 0.0, 2.0, 7.0]))
    clipped = d._winsorize(col, 3.0)
    np.testing.assert_allclose(clipped.values, [-3.0, -1.0, 0.0, 2.0, 3.0])
    grads = nk.backward(nk.reduce_sum(clipped), params=[col])
    np.testing.assert_allclose(grads[col], [0.0, 1.0, 1.0, 1.0, 0.0])


def test_zr_clip_bounds_reconstruction_features():
    rng = np.random.default_rng(9)
    x = rng.normal(0, 1e-3, size=(14, 12))
    x[3] *= 40.0  # one wildly off-scale row
    xs = d._scale_input(x, "pooled_std")
    clipped = d._DagmmRun(xs, (8, 2, 5), 3, False, 0.1, 0.005, 1e-6, True,
                          seed=1, zr_clip=2.0)
    z, _ = clipped.features()
    assert np.abs(z.values[:, -2:]).max() <= 2.0 + 1e-12
    free = d._DagmmRun(xs, (8, 2, 5), 3, False, 0.1, 0.005, 1e-6, True,
                       seed=1, zr_clip=None)
    z2, _ = free.features()
    assert np.abs(z2.values[:, -2:]).max() > 2.0


def test_zr_clip_spares_the_std_column():
    rng = np.random.default_rng(11)
    x = rng.normal(0, 1e-3, size=(14, 12))
    x[5] = rng.normal(0, 3e-2, size=12)  # dispersion outlier
    xs = d._scale_input(x, "pooled_std")
    run = d._DagmmRun(xs, (8, 2, 5), 3, True, 0.1, 0.005, 1e-6, True,
                      seed=1, zr_clip=1.5)
    z, _ = run.features()
    # reconstruction columns are capped, the dispersion column is not
    assert np.abs(z.values[:, -3:-1]).max() <= 1.5 + 1e-12
    assert np.abs(z.values[:, -1]).max() > 1.5


def test_membership_floor_and_exact_row_sums():
    batch = small_anomaly_batch()
    x, _ = d._batch_matrix(batch)
    run = d._DagmmRun(d._scale_input(x, "pooled_std"), (32, 4, 16), 4, True,
                      0.1, 0.005, 1e-6, True, seed=2)
    _, gamma = run.features()
    g = gamma.values
    assert g.min() >= 1e-10
    np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-12)


def test_reconstruction_warmup_prepends_losses():
    batch = small_anomaly_batch()
    out = d.dagmm_score(batch, epochs=10, seed=4, pretrain_epochs=6)
    assert len(out.epoch_losses) == 16
    cold = d.dagmm_score(batch, epochs=10, seed=4)
    assert len(cold.epoch_losses) == 10
    assert not np.array_equal(out.scores, cold.scores)


def test_initial_latent_code_not_saturated():
    # wide unit-variance inputs must not start the code at the tanh corners,
    # otherwise every batch degenerates to one of 2^bottleneck patterns
    rng = np.random.default_rng(5)
    x = rng.normal(size=(20, 400))
    run = d._DagmmRun(d._scale_input(x, "pooled_std"), (32, 4, 16), 4, False,
                      0.1, 0.005, 1e-6, True, seed=6)
    z, _ = run.features()
    z_c = z.values[:, :4]
    assert np.mean(np.abs(z_c) > 0.95) < 0.25


def test_dagmm_batch_smaller_than_components_rejected():
    batch = make_batch(np.random.default_rng(0).normal(size=(4, 6)))
    with pytest.raises(d.DetectError, match="K\\+1"):
        d.dagmm_score(batch, K=4, epochs=1)


def test_dagmm_degenerate_bottleneck_rejected():
    batch = make_batch(np.random.default_rng(0).normal(size=(6, 3)))
    with pytest.raises(d.DetectError, match="degenerate"):
        d.dagmm_score(batch, arch=(8, 3, 4), epochs=1)


def test_stddagmm_estimation_net_width():
    rng = np.random.default_rng(0)
    plain = d._DagmmNets(20, (8, 2, 6), 3, with_std=False, rng=rng)
    with_std = d._DagmmNets(20, (8, 2, 6), 3, with_std=True,
                            rng=np.random.default_rng(0))
    assert plain.est.layers[0].W.shape[0] == 2 + 2
    assert with_std.est.layers[0].W.shape[0] == 2 + 3


def test_feature_vector_lengths_by_detector():
    batch = small_anomaly_batch()
    out2 = d.dagmm_score(batch, epochs=5, seed=0)
    out3 = d.stddagmm_score(batch, epochs=5, seed=0)
    assert all(f.z_r.size == 2 for f in out2.features)
    assert all(f.z_r.size == 3 for f in out3.features)
    f = out3.features[0]
    assert f.z.size == f.z_c.size + f.z_r.size


def test_feature_vector_rejects_bad_zr_length():
    with pytest.raises(d.DetectError):
        d.FeatureVector(np.zeros(4), np.zeros(4))


def test_stddagmm_neutralized_std_feature_still_scores():
    rng = np.random.default_rng(8)
    x = rng.normal(0, 1e-3, size=(10, 14))
    stds = x.std(axis=1)
    x[-1] *= np.median(stds) / x[-1].std()
    out = d.stddagmm_score(make_batch(x), epochs=15, seed=1)
    assert out.scores.shape == (10,)
    assert np.isfinite(out.scores).all()


# ------------------------------------------------------------------ ranking

def out_with_scores(scores):
    return d.DetectorOutput(kind="dagmm", round_index=1,
                            client_ids=np.arange(len(scores)),
                            scores=np.asarray(scores, dtype=np.float64))


def test_rank_report_single_max_is_rank_one():
    rep = d.rank_report(out_with_scores([0.1, 0.3, 5.0, 0.2]), truth={2})
    assert rep.rank_of(2) == 1
    assert rep.free_rider_ranks == {2: 1}
    assert rep.true_positives == 1 and rep.false_positives == 0


def test_rank_report_k_zero_flags_nothing():
    rep = d.rank_report(out_with_scores([3.0, 1.0]), truth={0}, k=0)
    assert not rep.flagged.any()


def test_rank_report_perfect_ranking_twenty_free_riders():
    rng = np.random.default_rng(1)
    honest = rng.uniform(0, 1, size=80)
    riders = rng.uniform(2, 3, size=20)
    scores = np.concatenate([honest, riders])
    truth = set(range(80, 100))
    rep = d.rank_report(out_with_scores(scores), truth)
    assert rep.k == 20
    assert rep.true_positives == 20 and rep.false_positives == 0
    assert d.auc(out_with_scores(scores), truth) == 1.0


def test_rank_report_tie_break_is_deterministic():
    rep = d.rank_report(out_with_scores([1.0, 1.0, 1.0]), truth={1}, k=1)
    assert sorted(rep.ranks.tolist()) == [1, 2, 3]
    assert rep.rank_of(0) == 1


def test_detector_output_rejects_nonfinite_scores():
    with pytest.raises(d.DetectError):
        d.DetectorOutput(kind="std", round_index=0,
                         client_ids=np.array([0, 1]),
                         scores=np.array([1.0, np.nan]))


def test_detector_output_score_of_unknown_client():
    out = out_with_scores([1.0, 2.0])
    with pytest.raises(d.DetectError):
        out.score_of(17)


# ------------------------------------------------------------ configuration

def test_detector_config_kwargs_bind_to_scorers():
    cfg = d.DetectorConfig(ae_epochs=2, dagmm_epochs=2)
    batch = small_anomaly_batch(n=6, dim=8)
    ae = d.autoencoder_score(batch, **cfg.autoencoder_kwargs(), seed=cfg.seed)
    gm = d.dagmm_score(batch, **cfg.dagmm_kwargs(), seed=cfg.seed)
    sd = d.stddagmm_score(batch, **cfg.dagmm_kwargs(), seed=cfg.seed)
    assert len(ae.epoch_losses) == 2
    assert len(gm.epoch_losses) == 2 and len(sd.epoch_losses) == 2


def test_detector_config_describe_is_json_friendly():
    import json
    text = json.dumps(d.DetectorConfig().describe())
    assert "pooled_std" in text
