import numpy as np
import pytest

from bottleneck_em.continuation import ContinuationConfig, run_continuation
from bottleneck_em.data import Dataset, PriorSpec
from bottleneck_em.selection import (
    GRID_POINTS,
    CvCurve,
    checkpoints_to_grid,
    cross_validate_gamma,
    default_grid,
    final_fit,
)

from scenarios import small_problem


def test_default_grid():
    g = default_grid()
    assert g.size == GRID_POINTS and g[0] == 0.0 and g[-1] == 1.0


def test_gamma_star_takes_smallest_on_ties():
    grid = np.array([0.0, 0.5, 1.0])
    assert CvCurve(grid, [[-3.0, -1.0, -1.0]]).gamma_star == 0.5
    assert CvCurve(grid, [[-3.0, -1.0, -2.0], [-3.0, -1.0, 0.5]]).gamma_star == 1.0


def test_interior_peak():
    grid = default_grid()
    curve = CvCurve(grid, [-(grid - 0.37) ** 2, -(grid - 0.43) ** 2])
    assert curve.gamma_star == pytest.approx(0.4)


def test_curve_validation():
    with pytest.raises(ValueError):
        CvCurve(np.array([0.5, 0.2]), [[1.0, 2.0]])
    with pytest.raises(ValueError):
        CvCurve(np.array([0.0, 1.0]), [[1.0, 2.0, 3.0]])


def test_curve_tsv():
    curve = CvCurve(np.array([0.0, 1.0]), [[-2.0, -1.0], [-4.0, -1.0]])
    lines = curve.to_tsv().splitlines()
    assert lines[0] == "gamma\tmean_heldout_ll\tfold0\tfold1"
    assert lines[1].split("\t")[1] == "-3.000000000"
    assert lines[-1] == "# gamma_star\t1.000000000"


def test_checkpoints_to_grid():
    grid = np.linspace(0, 1, 11)
    out = checkpoints_to_grid([0.0, 0.12, 0.33, 1.0], [1.0, 2.0, 3.0, 4.0], grid)
    np.testing.assert_array_equal(out, [1, 2, 2, 3, 3, 3, 3, 3, 3, 3, 4])
    # a later checkpoint overwrites an earlier one that lands on the same point
    out = checkpoints_to_grid([0.31, 0.29], [5.0, 6.0], grid)
    assert out[3] == 6.0 and out[0] == 5.0
    with pytest.raises(ValueError):
        checkpoints_to_grid([], [], grid)


def test_fold_order_does_not_change_the_mean():
    grid = np.linspace(0, 1, 5)
    folds = np.random.default_rng(0).normal(size=(4, 5))
    a, b = CvCurve(grid, folds), CvCurve(grid, folds[::-1])
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-15)
    assert a.gamma_star == b.gamma_star


def test_cross_validation_small():
    s, data = small_problem(0, M=60, leaves=4)
    cfg = ContinuationConfig(epsilon=0.1, gamma_step_max=0.2, gamma_stop=0.3)
    curve = cross_validate_gamma(s, data, 3, cfg, PriorSpec(1.0), seed=2)
    assert curve.k == 3 and curve.folds.shape == (3, GRID_POINTS)
    assert np.all(np.isfinite(curve.folds))
    again = cross_validate_gamma(s, data, 3, cfg, PriorSpec(1.0), seed=2, workers=2)
    np.testing.assert_array_equal(curve.folds, again.folds)


def test_cross_validation_warns_on_missing_states():
    s, data = small_problem(0, M=30, leaves=2)
    vals = np.array(data.values)
    vals[:, 0] = 0
    vals[0, 0] = 1  # one instance carries state 1; the fold without it misses the state
    skewed = Dataset(data.variables, vals)
    cfg = ContinuationConfig(epsilon=0.2, gamma_step_max=0.5)
    with pytest.warns(RuntimeWarning, match="miss"):
        cross_validate_gamma(s, skewed, 2, cfg, PriorSpec(1.0))


def test_cross_validation_argument_errors():
    s, data = small_problem(0, M=10)
    with pytest.raises(ValueError):
        cross_validate_gamma(s, data, 1)
    with pytest.raises(ValueError):
        cross_validate_gamma(s, data, 11)


def test_final_fit_is_a_prefix_of_the_full_path():
    s, data = small_problem(3, M=50)
    cfg = ContinuationConfig(epsilon=0.05, seed=1)
    full = run_continuation(s, data, cfg, PriorSpec(1.0))
    part = final_fit(s, data, 0.5, cfg, PriorSpec(1.0))
    assert part.trace[-1].gamma == 0.5
    shared = [r for r in part.trace if r.gamma < 0.5]
    assert shared == list(full.trace)[:len(shared)]
    with pytest.raises(ValueError):
        final_fit(s, data, 0.0, cfg)
