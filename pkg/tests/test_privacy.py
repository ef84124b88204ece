"""Differential-privacy mechanics: clipping, server noise, sampling."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedrider import fedsim
from fedrider import privacy as fprivacy


def update_with(vec):
    return fedsim.ClientUpdate(0, 1, fedsim.ModelParams(np.asarray(vec, float),
                                                        ((len(vec),),)))


def test_dp_config_validation():
    with pytest.raises(fprivacy.PrivacyError):
        fprivacy.DPConfig(clip_bound=0.0)
    with pytest.raises(fprivacy.PrivacyError):
        fprivacy.DPConfig(server_noise_std=-1e-3)
    with pytest.raises(fprivacy.PrivacyError):
        fprivacy.DPConfig(participation_ratio=0.0)
    with pytest.raises(fprivacy.PrivacyError):
        fprivacy.DPConfig(participation_ratio=1.2)


# ----------------------------------------------------------------- clipping

def test_clip_inside_ball_is_identity():
    u = update_with([0.3, 0.4])          # norm 0.5
    assert fprivacy.clip_update(u, 1.0) is u


def test_clip_outside_ball_lands_on_sphere():
    u = update_with([3.0, 4.0])          # norm 5 = 2C for C=2.5
    clipped = fprivacy.clip_update(u, 2.5)
    norm = np.linalg.norm(clipped.grad.flat)
    assert abs(norm - 2.5) <= 1e-12
    # direction preserved
    cos = clipped.grad.flat @ u.grad.flat / (norm * 5.0)
    assert cos == pytest.approx(1.0, abs=1e-12)


def test_clip_zero_vector_unchanged():
    u = update_with([0.0, 0.0, 0.0])
    assert fprivacy.clip_update(u, 1.0) is u


@given(st.lists(st.floats(min_value=-10.0, max_value=10.0), min_size=1,
                max_size=40),
       st.floats(min_value=1e-3, max_value=5.0))
def test_clip_norm_never_exceeds_bound(vals, bound):
    clipped = fprivacy.clip_update(update_with(vals), bound)
    assert np.linalg.norm(clipped.grad.flat) <= bound + 1e-12


# --------------------------------------------------------------- server noise

def test_server_noise_zero_std_is_identity():
    model = fedsim.init_global_model((4, 3), seed=0)
    assert fprivacy.add_server_noise(model, 0.0, np.random.default_rng(0)) is model


def test_server_noise_mean_within_clt_bound():
    n = 100_000
    model = fedsim.GlobalModel(fedsim.ModelParams(np.zeros(n), ((n,),)), 0)
    sigma = 1e-3
    noisy = fprivacy.add_server_noise(model, sigma, np.random.default_rng(8))
    assert abs(noisy.params.flat.mean()) < 3 * sigma / np.sqrt(n)
    assert abs(noisy.params.flat.std() - sigma) < 0.05 * sigma


def test_server_noise_seed_determinism():
    model = fedsim.init_global_model((4, 3), seed=0)
    a = fprivacy.add_server_noise(model, 1e-3, np.random.default_rng([1, 2]))
    b = fprivacy.add_server_noise(model, 1e-3, np.random.default_rng([1, 2]))
    c = fprivacy.add_server_noise(model, 1e-3, np.random.default_rng([1, 3]))
    assert np.array_equal(a.params.flat, b.params.flat)
    assert not np.array_equal(a.params.flat, c.params.flat)


# ----------------------------------------------------------------- sampling

def test_sampling_full_ratio_includes_everyone():
    ids = range(10)
    got = fprivacy.sample_participants(ids, 1.0, 1, np.random.default_rng(0))
    assert got == frozenset(range(10))


def test_sampling_invalid_ratio_rejected():
    with pytest.raises(fprivacy.PrivacyError):
        fprivacy.sample_participants(range(4), 0.0, 1, np.random.default_rng(0))


def test_sampling_binomial_band():
    counts = []
    for j in range(80):
        got = fprivacy.sample_participants(range(100), 0.25, j,
                                           np.random.default_rng([0, 3, j]))
        counts.append(len(got))
    assert abs(np.mean(counts) - 25.0) < 5.0


def test_sampling_deterministic_per_stream():
    a = fprivacy.sample_participants(range(50), 0.3, 4, np.random.default_rng([9, 4]))
    b = fprivacy.sample_participants(range(50), 0.3, 4, np.random.default_rng([9, 4]))
    assert a == b


def test_free_rider_state_only_holds_joined_rounds():
    from fedrider import attacks as fattacks
    from fedrider import data as fdata
    from fedrider import numkit as nk

    ds = fdata.synth_dataset(num_classes=4, per_class=10, feature_dim=6, seed=1)
    part = fdata.partition_iid(ds, 5, seed=1)
    cfg = fedsim.FedConfig(n_clients=5, eta=1.0, rounds=10,
                           snapshot_rounds=frozenset(),
                           local=nk.SgdConfig(learning_rate=0.1, batch_size=8,
                                              epochs=1), seed=1)
    dp = fprivacy.DPConfig(participation_ratio=0.4, server_noise_std=0.0, seed=1)
    state = fedsim.SimState(cfg=cfg, dataset=ds, partition=part,
                            model=fedsim.init_global_model((6, 5, 4), 1),
                            free_rider_ids=frozenset({2}),
                            attack=fattacks.AttackConfig(kind="dp_delta"),
                            dp=dp)
    joined = []
    for _ in range(cfg.rounds):
        record = fedsim.run_round(state)
        if 2 in record.participant_ids:
            joined.append(record.round_index)
    seen = [r for r, _ in state.fr_states[2].received]
    assert set(seen).issubset(set(joined))
    assert seen == sorted(joined)[-len(seen):]
