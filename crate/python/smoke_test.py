"""Smoke test for the Python bindings. Run after `pip install crates/python`."""

import math

import gauss_extremes_py as ge


def main():
    sol = ge.solve_qpp([[1.0, -0.5], [-0.5, 1.0]], [1.0, 1.0])
    assert abs(sol.value - 4.0) < 1e-12, sol
    assert sol.active_set == [0, 1]
    assert abs(ge.generalized_variance([[1.0, 0.2], [0.2, 1.0]], [1.0, 1.0]) - 0.6) < 1e-12

    target = 2 * math.exp(-1) - math.exp(-2)
    assert abs(ge.orthant_union_integral([[0.0, -1.0], [-1.0, 0.0]]) - target) < 1e-12

    fbm = ge.CovModel.fbm(0.5)
    r = fbm.asymptotic(3.0)
    assert abs(r["components"]["kappa1"] - 9.0) < 1e-8, r["components"]
    d = fbm.derived()
    assert len(d["w"]) == 2

    st = ge.CovModel.stationary(1.5)
    mc = st.monte_carlo(1.0, n_paths=2000, seed=3, steps=128)
    assert mc == st.monte_carlo(1.0, n_paths=2000, seed=3, steps=128)
    paths = st.simulate(3, seed=1, steps=16)
    assert len(paths) == 3

    h = ge.pickands_constant(1.0, seed=5, s=8.0, n_paths=4000)
    assert abs(h["value"] - 1.0) < 0.1, h
    p = ge.piterbarg_constant(2.0, seed=5, lambda_max=10.0, n_paths=4000)
    assert abs(p["estimate"]["value"] - p["closed_form"]) < 0.05 * p["closed_form"], p

    try:
        ge.CovModel.fbm(1.5)
    except ValueError:
        pass
    else:
        raise AssertionError("H = 1.5 accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
