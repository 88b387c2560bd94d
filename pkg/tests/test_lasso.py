import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ols
from tendonfusion.errors import LassoConvergenceError
from tendonfusion.lasso import (LassoConfig, duality_gap, fit_lasso, fused_feature_name,
                                lasso_objective, selected_features, soft_threshold,
                                write_selection_report)


def _problem(seed, n=80, p=6):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p)) * rng.uniform(0.5, 3, size=p) + rng.normal(size=p)
    y = X @ rng.normal(size=p) + 2.0 + 0.3 * rng.normal(size=n)
    return X, y


def test_soft_threshold():
    assert soft_threshold(0.5, 0.1) == pytest.approx(0.4)
    assert soft_threshold(-0.5, 0.1) == pytest.approx(-0.4)
    assert soft_threshold(0.05, 0.1) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_alpha_zero_is_ordinary_least_squares(seed):
    X, y = _problem(seed)
    model = fit_lasso(X, y, LassoConfig(alpha=0.0))
    b0, b = ols(X, y)
    np.testing.assert_allclose(model.coef_original, b, atol=1e-6)
    assert model.intercept_original == pytest.approx(b0, abs=1e-6)


def test_single_feature_closed_form():
    rng = np.random.default_rng(2)
    x = rng.normal(size=200)
    y = 0.7 * x + rng.normal(size=200)
    model = fit_lasso(x[:, None], y, LassoConfig(alpha=0.1))
    xs = (x - x.mean()) / x.std()
    rho = xs @ (y - y.mean()) / len(y)
    assert model.coefficients[0] == pytest.approx(np.sign(rho) * max(abs(rho) - 0.1, 0), abs=1e-12)


def test_full_shrinkage():
    X, y = _problem(3)
    Xs = (X - X.mean(0)) / X.std(0)
    alpha_max = np.abs(Xs.T @ (y - y.mean())).max() / len(y)
    model = fit_lasso(X, y, LassoConfig(alpha=alpha_max * 1.0001))
    assert model.support == ()
    assert model.intercept == pytest.approx(y.mean())
    np.testing.assert_allclose(model.predict(X), y.mean())


def test_objective_monotone_and_converged():
    X, y = _problem(4, n=60, p=20)
    model = fit_lasso(X, y, LassoConfig(alpha=0.05))
    path = np.array(model.objective_path)
    assert np.all(np.diff(path) <= 1e-12)
    Xs = (X - model.mean) / model.scale
    assert lasso_objective(Xs, y - y.mean(), model.coefficients, 0.05) == pytest.approx(path[-1])
    assert duality_gap(Xs, y - y.mean(), model.coefficients, 0.05) < 1e-5 * max(1.0, path[-1])


def test_constant_column_pinned_to_zero():
    X, y = _problem(5)
    X[:, 2] = 4.0
    model = fit_lasso(X, y, LassoConfig(alpha=0.0))
    assert model.coefficients[2] == 0.0
    assert np.isfinite(model.predict(X)).all()


def test_nonconvergence_reports_gap():
    X, y = _problem(6, n=40, p=30)
    with pytest.raises(LassoConvergenceError) as info:
        fit_lasso(X, y, LassoConfig(alpha=1e-4, max_sweeps=2, tol=1e-12))
    assert info.value.gap > 0 and info.value.model is not None


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_column_permutation_equivariance(seed):
    X, y = _problem(seed, n=50, p=8)
    perm = np.random.default_rng(seed).permutation(8)
    a = fit_lasso(X, y, LassoConfig(alpha=0.05, tol=1e-10))
    b = fit_lasso(X[:, perm], y, LassoConfig(alpha=0.05, tol=1e-10))
    np.testing.assert_allclose(b.coefficients, a.coefficients[perm], atol=1e-7)


def test_support_shrinks_toward_large_alpha():
    X, y = _problem(8, n=100, p=15)
    sizes = [len(fit_lasso(X, y, LassoConfig(alpha=a)).support) for a in (0.0, 0.01, 0.1, 1.0, 100.0)]
    assert sizes[0] == 15 and sizes[-1] == 0
    assert sizes[0] >= sizes[2] >= sizes[-1]


def test_selected_feature_names(tmp_path):
    sel = selected_features([3, 201])
    assert sel.deep == (3,)
    assert sel.handcrafted == ("min",)
    assert fused_feature_name(3) == "pc003" and fused_feature_name(245) == "max_probability_d10"
    sel2 = selected_features([0, 1, 202, 211])
    assert sel2.texture == ("contrast_d1",)
    assert sel2.summary() == "2 DL features and 2 hand-crafted features, including 1 texture (contrast_d1)"
    write_selection_report({"tt": sel2}, tmp_path / "s.txt", tmp_path / "s.csv", {"tt": "TT"}, stamp="x")
    assert (tmp_path / "s.txt").read_text().splitlines()[1].startswith("TT: 2 DL features")
    assert "pc001" in (tmp_path / "s.csv").read_text()
