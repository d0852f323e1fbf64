import numpy as np
import pytest

from helpers import (
    PARAMS,
    full_nll_hard,
    max_param_diff,
    oracle_hard,
    oracle_soft,
    oracle_unconstrained,
    random_dataset,
    random_external,
    soft_marginal_loglik_dense,
)
from medfuse.core import (
    ExternalSummary,
    InternalDataset,
    MediationFit,
    Method,
    TEModelFit,
    fit_te_model,
)
from medfuse.errors import NoConvergence, ValidationError
from medfuse.estimators import (
    HardConfig,
    SoftConfig,
    eb_s2,
    extract_effects,
    fit,
    fit_hard_constraint,
    fit_soft_constraint,
    fit_unconstrained,
)


@pytest.fixture
def toy():
    A = np.array([-1.0, 0.0, 1.0])
    M = np.array([[-1.0], [1.0], [0.0]])
    return InternalDataset(Y=A + 2 * M[:, 0], M=M, A=A, C=np.ones((3, 1)))


def test_unconstrained_exact_interpolation(toy):
    f = fit_unconstrained(toy)
    assert f.beta_a == pytest.approx(1.0, abs=1e-12)
    assert f.beta_m[0] == pytest.approx(2.0, abs=1e-12)
    assert f.beta_c[0] == pytest.approx(0.0, abs=1e-12)
    assert f.sigma_e2 == pytest.approx(0.0, abs=1e-12)
    assert f.alpha_a[0] == pytest.approx(0.5, abs=1e-12)
    nde, nie, te = extract_effects(f)
    assert (nde, nie, te) == pytest.approx((1.0, 1.0, 2.0), abs=1e-12)


def test_unconstrained_zero_response(toy):
    f = fit_unconstrained(InternalDataset(Y=np.zeros(3), M=toy.M, A=toy.A, C=toy.C))
    np.testing.assert_allclose(f.beta_m, 0, atol=1e-14)
    assert f.beta_a == pytest.approx(0, abs=1e-14)
    assert f.sigma_e2 == pytest.approx(0, abs=1e-14)
    nde, nie, _ = extract_effects(f)
    assert nde == pytest.approx(0, abs=1e-14) and nie == pytest.approx(0, abs=1e-14)


def test_unconstrained_matches_oracle():
    d = random_dataset(np.random.default_rng(11))
    f = fit_unconstrained(d)
    assert max_param_diff(f, oracle_unconstrained(d), PARAMS + ("beta_a",)) < 1e-6


def test_unconstrained_score_is_zero():
    d = random_dataset(np.random.default_rng(12))
    f = fit_unconstrained(d)

    def ll(ba, bm, bc, s2, aa):
        ba, s2 = ba[0], s2[0]
        R = d.M - np.outer(d.A, aa) - d.C @ f.alpha_c.T
        Si = np.linalg.inv(f.Sigma_m)
        r = d.Y - d.M @ bm - ba * d.A - d.C @ bc
        return -0.5 * np.einsum("ij,jk,ik->", R, Si, R) - 0.5 * d.n * np.log(s2) - 0.5 * r @ r / s2

    x0 = dict(ba=np.array([f.beta_a]), bm=f.beta_m, bc=f.beta_c, s2=np.array([f.sigma_e2]),
              aa=f.alpha_a)
    h = 1e-5
    for key, v in x0.items():
        for j in range(v.size):
            step = np.zeros(v.size)
            step[j] = h
            up = {k: (x + step if k == key else x) for k, x in x0.items()}
            dn = {k: (x - step if k == key else x) for k, x in x0.items()}
            g = (ll(**up) - ll(**dn)) / (2 * h)
            assert abs(g) / d.n < 1e-5, (key, j, g)


def test_hard_with_congenial_target_equals_unconstrained():
    d = random_dataset(np.random.default_rng(13))
    fu = fit_unconstrained(d)
    fh = fit_hard_constraint(d, ExternalSummary(fu.te, 0.01))
    assert max_param_diff(fh, {k: getattr(fu, k) for k in PARAMS + ("beta_a",)},
                          PARAMS + ("beta_a",)) < 1e-8
    np.testing.assert_allclose(fh.alpha_a, fu.alpha_a, atol=1e-10)


def test_hard_te_exact_and_decomposition():
    rng = np.random.default_rng(14)
    d = random_dataset(rng)
    ext = random_external(rng, d, shift=1.0)
    fh = fit_hard_constraint(d, ext)
    assert fh.te == ext.theta_hat_E
    nde, nie, te = extract_effects(fh)
    assert abs(nde + nie - te) <= 1e-12
    assert abs(fh.te - fh.alpha_a @ fh.beta_m - fh.beta_a) <= 1e-10


def test_hard_matches_oracle_at_half():
    d = random_dataset(np.random.default_rng(15))
    fh = fit_hard_constraint(d, ExternalSummary(0.5, 0.01))
    ref = oracle_hard(d, 0.5)
    assert max_param_diff(fh, ref, PARAMS + ("beta_a",)) < 1e-5
    obj = full_nll_hard(d, 0.5, fh.alpha_a, fh.alpha_c, fh.Sigma_m, fh.beta_m, fh.beta_c,
                        fh.sigma_e2)
    obj_ref = full_nll_hard(d, 0.5, ref["alpha_a"], ref["alpha_c"], ref["Sigma_m"],
                            ref["beta_m"], ref["beta_c"], ref["sigma_e2"])
    assert obj <= obj_ref + 1e-8
    assert -fh.loglik == pytest.approx(obj, abs=1e-8)


def test_hard_no_convergence_reports_iterations():
    rng = np.random.default_rng(16)
    d = random_dataset(rng)
    with pytest.raises(NoConvergence) as info:
        fit_hard_constraint(d, ExternalSummary(3.0, 0.01), HardConfig(ccd_max_iter=2))
    assert info.value.iterations == 2 and info.value.last_delta > 0


def test_soft_matches_marginal_likelihood_oracle():
    rng = np.random.default_rng(17)
    d = random_dataset(rng)
    ext = random_external(rng, d)
    fs = fit_soft_constraint(d, ext, SoftConfig(s2=1.0))
    ref = oracle_soft(d, ext, 1.0)
    assert max_param_diff(fs, ref) < 1e-5
    assert fs.loglik == pytest.approx(ref["loglik"], abs=1e-6)
    tau = ext.var_theta_hat_E
    dense = soft_marginal_loglik_dense(d, ext, tau, fs.alpha_a, fs.alpha_c, fs.Sigma_m,
                                       fs.beta_m, fs.beta_c, fs.sigma_e2)
    assert fs.loglik == pytest.approx(dense, abs=1e-8)


def test_soft_endpoints():
    rng = np.random.default_rng(18)
    d = random_dataset(rng)
    ext = random_external(rng, d, shift=0.5)
    fu = fit_unconstrained(d)
    fh = fit_hard_constraint(d, ext)
    wide = fit_soft_constraint(d, ext, SoftConfig(s2=1e8))
    tight = fit_soft_constraint(d, ext, SoftConfig(s2=1e-10))
    np.testing.assert_allclose(extract_effects(wide), extract_effects(fu), atol=1e-4)
    np.testing.assert_allclose(extract_effects(tight), extract_effects(fh), atol=1e-4)


def test_soft_zero_scale_uses_floor():
    rng = np.random.default_rng(19)
    d = random_dataset(rng)
    ext = random_external(rng, d)
    f = fit_soft_constraint(d, ext, SoftConfig(s2=0.0, eps_s2=1e-6))
    assert f.s2_used == 1e-6
    assert f.method is Method.SOFT


def test_soft_eb_scale_recorded():
    rng = np.random.default_rng(20)
    d = random_dataset(rng)
    ext = ExternalSummary(fit_te_model(d).theta_a + 2.0, 0.01)
    f = fit_soft_constraint(d, ext)
    assert f.s2_used == pytest.approx(eb_s2(fit_te_model(d), ext))
    assert f.s2_used > 100


@pytest.mark.parametrize("ti,te_,vi,ve,expected", [
    (1.5, 1.0, 0.04, 0.01, 21.0),
    (1.2, 1.2, 0.04, 0.01, 0.0),
    (1.2, 1.0, 0.04, 0.01, 0.0),
])
def test_eb_s2(ti, te_, vi, ve, expected):
    got = eb_s2(TEModelFit(ti, np.zeros(1), 1.0, vi), ExternalSummary(te_, ve))
    assert got == pytest.approx(expected, abs=1e-9)


def _fit_stub(alpha, beta, te):
    p = len(alpha)
    return MediationFit(np.array(alpha, float), np.zeros((p, 1)), np.eye(p), te - np.dot(alpha, beta),
                        np.array(beta, float), np.zeros(1), 1.0, te, Method.HARD, 0.0)


def test_extract_effects_arithmetic():
    assert extract_effects(_fit_stub([0.5], [2.0], 2.0)) == pytest.approx((1.0, 1.0, 2.0))
    nde, nie, te = extract_effects(_fit_stub([0.0, 0.0], [1.0, 3.0], 1.7))
    assert nie == 0.0 and nde == te == 1.7


def test_extract_effects_simulation_truth():
    alpha = [0.6] * 10 + [0.0] * 40
    beta = [0.1] * 5 + [0.0] * 5 + [0.1] * 5 + [0.0] * 35
    assert extract_effects(_fit_stub(alpha, beta, 1.0)) == pytest.approx((0.7, 0.3, 1.0))


def test_dispatch():
    rng = np.random.default_rng(21)
    d = random_dataset(rng)
    ext = random_external(rng, d)
    assert fit(d, None, "unconstrained").method is Method.UNCONSTRAINED
    assert fit(d, ext, Method.HARD).te == ext.theta_hat_E
    with pytest.raises(ValidationError):
        fit(d, None, "soft")


def test_config_validation():
    with pytest.raises(ValidationError):
        SoftConfig(s2="bayes")
    with pytest.raises(ValidationError):
        SoftConfig(s2=-1.0)
    with pytest.raises(ValidationError):
        HardConfig(ccd_tol=0)
    assert SoftConfig(s2="EB").empirical_bayes
