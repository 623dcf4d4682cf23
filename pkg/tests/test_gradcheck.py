import numpy as np

from trupnet.gradcheck import (
    REL_TOL,
    check_encoder,
    check_gradient,
    check_model,
    rel_error,
    run_op_checks,
)
from trupnet.tensor import Tensor, _wrap, reduce_sum


def test_rel_error_definition():
    # denominator clamps at 1 for small magnitudes
    assert rel_error(np.array([0.5]), np.array([0.504])) == np.float64(0.504) - np.float64(0.5)
    big = np.array([100.0])
    assert rel_error(big, np.array([101.0])) == 1.0 / 101.0


def test_checker_catches_wrong_backward():
    def doubled_with_wrong_grad(t):
        # claims gradient 3x, actual function is 2x
        out = _wrap(t.data * np.float32(2.0), (t,), lambda g: (g * np.float32(3.0),))
        return reduce_sum(out)

    x = Tensor(np.random.default_rng(0).standard_normal(4).astype(np.float32))
    assert check_gradient(doubled_with_wrong_grad, x) > 0.3


def test_checker_passes_correct_backward():
    def doubled(t):
        return reduce_sum(_wrap(t.data * np.float32(2.0), (t,), lambda g: (g * np.float32(2.0),)))

    x = Tensor(np.random.default_rng(1).standard_normal(4).astype(np.float32))
    assert check_gradient(doubled, x) <= REL_TOL


def test_registry_single_seed_all_pass():
    results = run_op_checks(seed=3, seeds_per_op=1)
    assert len(results) >= 25
    bad = {name: err for name, err in results.items() if err > REL_TOL}
    assert not bad, bad


def test_encoder_and_model_spot_checks():
    assert check_encoder(seed=1, n_sample=40) <= REL_TOL
    assert check_model(seed=1, n_sample=40) <= REL_TOL
