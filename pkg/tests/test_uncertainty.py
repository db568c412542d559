import io
import math

import numpy as np
import pytest
from scipy.stats import pearsonr

from dimekit import AtomicConfiguration
from dimekit.errors import ContractViolation, InputError
from dimekit.model import Prediction, init_params
from dimekit.trainer import TrainConfig, train
from dimekit.uncertainty import (
    Ensemble,
    calibration,
    cov_identity_check,
    ensemble_predict,
    ensemble_predict_many,
    ensemble_train,
    pearson,
    write_calibration_csv,
    write_samples_csv,
)
from helpers import live_params, random_config, small_cfg

CFG = small_cfg()


def linear_member(w):
    """Parameters whose energy is exactly ``w`` times the energy of a reference network."""
    base = live_params(CFG, seed=0)
    p = base.copy()
    for k in p:
        if k.endswith("final.W"):
            p[k] = base[k] * w
    return p


def test_single_member_has_zero_sigma():
    ens = Ensemble(CFG, [live_params(CFG, 0)])
    p = ensemble_predict(ens, random_config(np.random.default_rng(0)))
    assert p.sigma_energy == 0.0
    np.testing.assert_array_equal(p.sigma_forces, 0.0)


def test_mean_and_unbiased_std_of_scaled_members():
    ens = Ensemble(CFG, [linear_member(w) for w in (1.0, 2.0, 3.0)])
    c = random_config(np.random.default_rng(1))
    ref = ensemble_predict(Ensemble(CFG, [linear_member(1.0)]), c)
    p = ensemble_predict(ens, c)
    assert p.energy == pytest.approx(2.0 * ref.energy, rel=1e-12)
    assert p.sigma_energy == pytest.approx(abs(ref.energy), rel=1e-12)
    np.testing.assert_allclose(p.sigma_forces, np.abs(ref.forces), rtol=1e-10, atol=1e-14)


def test_identical_members_have_zero_spread():
    m = live_params(CFG, 2)
    ens = Ensemble(CFG, [m, m.copy(), m.copy()])
    for p in ensemble_predict_many(ens, [random_config(np.random.default_rng(s)) for s in range(3)]):
        assert p.sigma_energy == 0.0
        assert np.all(p.sigma_forces == 0.0)


def test_incompatible_members_rejected():
    with pytest.raises(InputError):
        Ensemble(CFG, [])
    with pytest.raises(InputError):
        Ensemble(CFG, [init_params(CFG), init_params(small_cfg(hidden_dim=8, triplet_dim=8))])


def test_pearson_against_scipy_and_edge_cases():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=40), rng.normal(size=40)
    assert abs(pearson(a, b) - pearsonr(a, b)[0]) < 1e-12
    assert pearson(a, 3 * a + 1) == pytest.approx(1.0, abs=1e-14)
    assert pearson(a, -a) == pytest.approx(-1.0, abs=1e-14)
    assert pearson(a, np.ones(40)) is None
    assert pearson([1.0], [2.0]) is None
    with pytest.raises(InputError):
        pearson(a, b[:-1])


def _labelled(rng, n):
    return [random_config(rng, with_labels=True) for _ in range(n)]


def test_calibration_perfect_sigma_and_missing_sigma_f():
    rng = np.random.default_rng(4)
    labels = _labelled(rng, 6)
    err = rng.uniform(0.1, 1.0, size=6)
    preds = []
    for c, e in zip(labels, err):
        f_err = rng.uniform(0.1, 1.0, size=c.forces.shape)
        preds.append(Prediction(c.energy + e, c.forces + f_err, sigma_energy=2 * e, sigma_forces=3 * f_err))
    rep = calibration(preds, labels)
    assert rep.rho_E_sigmaE == pytest.approx(1.0) and rep.rho_F_sigmaF == pytest.approx(1.0)
    assert rep.n_force == sum(c.num_atoms * 3 for c in labels)

    mve_like = [Prediction(p.energy, p.forces, sigma_energy=p.sigma_energy) for p in preds]
    rep = calibration(mve_like, labels)
    assert rep.rho_F_sigmaF is None and not rep.sigma_F_available
    assert rep.rho_F_sigmaE is not None
    text = write_calibration_csv(rep)
    assert text.splitlines()[0] == "metric,value,n_samples"
    assert "rho_dF_sigmaF,undefined,0" in text


def test_calibration_undefined_when_sigma_constant():
    rng = np.random.default_rng(5)
    labels = _labelled(rng, 4)
    preds = [Prediction(c.energy + rng.normal(), c.forces, sigma_energy=0.5) for c in labels]
    rep = calibration(preds, labels)
    assert rep.rho_E_sigmaE is None
    assert "rho_dE_sigmaE,undefined,4" in write_calibration_csv(rep)


def test_calibration_input_errors():
    labels = _labelled(np.random.default_rng(6), 2)
    with pytest.raises(InputError):
        calibration([Prediction(0.0)], labels)
    with pytest.raises(InputError):
        calibration([], [])


def test_samples_csv_rows():
    labels = _labelled(np.random.default_rng(7), 3)
    preds = [Prediction(c.energy + 0.25, sigma_energy=0.5) for c in labels]
    buf = io.StringIO()
    write_samples_csv(calibration(preds, labels), buf)
    rows = buf.getvalue().splitlines()
    assert rows[0] == "sample_id,delta_E,sigma_E"
    assert rows[1:] == [f"{n},0.25,0.5" for n in range(3)]


def test_cov_identity_on_scaled_members():
    # members E_k = w_k E share one force field shape, so both sides are closed form
    ens = Ensemble(CFG, [linear_member(w) for w in (0.5, 1.0, 2.5)])
    c = random_config(np.random.default_rng(8))
    r = cov_identity_check(ens, c)
    ref = ensemble_predict(Ensemble(CFG, [linear_member(1.0)]), c)
    w = np.array([0.5, 1.0, 2.5])
    want = -2 * np.var(w, ddof=1) * ref.energy * ref.forces
    np.testing.assert_allclose(r.minus_two_cov, want, rtol=1e-10, atol=1e-14)
    assert r.relative < 1e-10


@pytest.mark.parametrize("K", [2, 3, 5])
def test_cov_identity_on_random_members(K):
    ens = Ensemble(CFG, [live_params(CFG, seed=s) for s in range(K)])
    rng = np.random.default_rng(9)
    for _ in range(2):
        assert cov_identity_check(ens, random_config(rng)).relative < 1e-8


def test_cov_identity_needs_two_members():
    with pytest.raises(ContractViolation):
        cov_identity_check(Ensemble(CFG, [live_params(CFG)]), random_config(np.random.default_rng(0)))


def test_ensemble_train_single_member_equals_train():
    rng = np.random.default_rng(10)
    data = _labelled(rng, 5)
    tcfg = TrainConfig(max_steps=4, batch_size=2, eval_every=2, seed=3)
    ens = ensemble_train(data[:3], data[3:], CFG, tcfg, K=1)
    plain = train(data[:3], data[3:], CFG, tcfg)
    assert ens.members[0].equal(plain.params)
    assert ens.seeds == [3] and len(ens.wall_times) == 1 and ens.wall_times[0] > 0


def test_ensemble_members_differ_by_seed():
    rng = np.random.default_rng(11)
    data = _labelled(rng, 5)
    ens = ensemble_train(data[:3], data[3:], CFG, TrainConfig(max_steps=2, batch_size=2), K=3)
    assert ens.seeds == [0, 1, 2] and ens.K == 3
    assert not ens.members[0].equal(ens.members[1])
    assert not ens.members[1].equal(ens.members[2])
    with pytest.raises(InputError):
        ensemble_train(data[:3], data[3:], CFG, TrainConfig(max_steps=1), K=2, seeds=[1])
    with pytest.raises(InputError):
        ensemble_train(data[:3], data[3:], CFG, TrainConfig(max_steps=1), K=0)


def test_single_member_prediction_sigma_is_not_nan():
    ens = Ensemble(CFG, [live_params(CFG)])
    p = ensemble_predict(ens, AtomicConfiguration([1, 1], [[0, 0, 0], [0.8, 0, 0]]), forces=False)
    assert p.forces is None and not math.isnan(p.sigma_energy)
