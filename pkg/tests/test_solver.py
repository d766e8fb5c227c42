import numpy as np
import pytest

from drpdeblur import tensor as T
from drpdeblur.degradation import make_gaussian_kernel, simulate_blur
from drpdeblur.networks import Network
from drpdeblur.signal_ops import conv2d_circular_fft, dct2, idct2
from drpdeblur.solver import (
    ABLATIONS,
    DivergenceError,
    SolverConfig,
    init_state,
    objective,
    objective_value,
    run,
    run_ablation,
    step_networks,
    step_v,
    write_trace_csv,
)
from drpdeblur.tensor import finite_diff_check

SMALL_NET = dict(input_channels=4, depth=2, encoder_channels=(8, 8), skip_channels=(2, 2))


def _config(**kw):
    base = dict(dtype="float64", image_net=SMALL_NET, residual_net=SMALL_NET, iterations=5)
    base.update(kw)
    return SolverConfig(**base)


def _instance(seed=0, size=16, noise=0.01):
    rng = np.random.default_rng(seed)
    x = np.clip(rng.random((size, size)) * 0.2 + 0.4, 0, 1)
    x[size // 4 : size // 2, size // 4 : 3 * size // 4] = 0.9
    k_true = make_gaussian_kernel(5, 1.0)
    k_hat = make_gaussian_kernel(5, 1.3)
    return x, simulate_blur(x, k_true, noise, seed), k_hat


# ---------------------------------------------------------------- config


def test_default_config_values():
    cfg = SolverConfig()
    assert (cfg.lambda1, cfg.lambda2, cfg.lambda3) == (5e-2, 5e-5, 5e-7)
    assert (cfg.lr_image, cfg.lr_residual) == (9e-3, 5e-4)
    assert cfg.iterations == 1500 and cfg.L == 2.0


@pytest.mark.parametrize(
    "kw",
    [dict(lambda1=-1.0), dict(lr_image=-1e-3), dict(iterations=-1), dict(L=0.0), dict(ablation="nope"), dict(dtype="int8")],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)


def test_ablation_zeroes_weights():
    cfg = SolverConfig(lambda1=1.0, lambda2=2.0, lambda3=3.0)
    assert SolverConfig(**{**cfg.to_dict(), "ablation": "no_tv"}).effective().lambda1 == 0.0
    assert SolverConfig(**{**cfg.to_dict(), "ablation": "no_r_sparsity"}).effective().lambda2 == 0.0
    assert SolverConfig(**{**cfg.to_dict(), "ablation": "no_v_sparsity"}).effective().lambda3 == 0.0


# ---------------------------------------------------------------- objective


def test_exact_decomposition_has_zero_objective():
    cfg = _config(lambda1=0.0, lambda2=0.0, lambda3=0.0)
    state = init_state(np.zeros((16, 16)), cfg)
    x = state.image_gen.forward().data
    r = state.residual_gen.forward().data
    y = (conv2d_circular_fft(x, make_gaussian_kernel(5, 1.0)) + r)[0]
    total, parts, _, _ = objective(state, y, make_gaussian_kernel(5, 1.0))
    assert total.item() < 1e-24
    assert parts["v_l1"] == 0.0


def test_parts_sum_to_total():
    _, y, k_hat = _instance()
    cfg = _config(lambda1=0.3, lambda2=0.2, lambda3=0.1)
    state = init_state(y, cfg)
    state.v = np.random.default_rng(1).standard_normal(state.v.shape) * 0.01
    _, p, _, _ = objective(state, y, k_hat)
    recon = p["data"] + 0.3 * p["tv"] + 0.2 * p["r_l1"] + 0.1 * p["v_l1"]
    assert abs(recon - p["total"]) / p["total"] < 1e-12


def test_objective_value_matches_graph_objective():
    _, y, k_hat = _instance()
    cfg = _config(lambda1=0.3, lambda2=0.2, lambda3=0.1)
    state = init_state(y, cfg)
    state.v = np.random.default_rng(2).standard_normal(state.v.shape) * 0.01
    _, p, x, r = objective(state, y, k_hat)
    q = objective_value(y, k_hat, x.data, r.data, state.v, cfg)
    for k in p:
        assert q[k] == pytest.approx(p[k], rel=1e-12)


def test_objective_gradient_matches_finite_differences():
    _, y, k_hat = _instance(seed=3)
    cfg = _config(lambda1=0.05, lambda2=0.01, lambda3=0.01)
    state = init_state(y, cfg)
    state.v = dct2(np.random.default_rng(4).standard_normal(state.v.shape) * 0.01)
    rng = np.random.default_rng(5)
    nets = [("image", state.image_gen), ("residual", state.residual_gen)]
    for _ in range(10):
        _, net = nets[rng.integers(2)]
        names = sorted(net.params)
        name = names[rng.integers(len(names))]
        idx = int(rng.integers(net.params[name].data.size))

        def f(p, net=net, name=name):
            saved = net.params[name]
            net.params[name] = p
            try:
                return objective(state, y, k_hat)[0]
            finally:
                net.params[name] = saved

        err = finite_diff_check(f, net.params[name].data.copy(), h=1e-6, coords=[idx])
        assert err < 1e-3, (name, idx, err)


# ---------------------------------------------------------------- network step


def test_zero_learning_rates_leave_parameters_unchanged():
    _, y, k_hat = _instance()
    state = init_state(y, _config(lr_image=0.0, lr_residual=0.0))
    before = [p.data.copy() for p in state.image_gen.parameters() + state.residual_gen.parameters()]
    step_networks(state, y, k_hat)
    after = [p.data for p in state.image_gen.parameters() + state.residual_gen.parameters()]
    assert all(np.array_equal(a, b) for a, b in zip(before, after))
    assert len(state.loss_trace) == 1


def test_single_step_descends_on_most_seeds():
    x, y, k_hat = _instance(size=32, noise=0.0)
    wins = 0
    for seed in range(10):
        cfg = _config(seed=seed, lambda1=1e-3, lambda2=1e-3, lambda3=0.1)
        state = init_state(y, cfg)
        before = objective(state, y, k_hat)[1]["total"]
        step_networks(state, y, k_hat)
        after = objective(state, y, k_hat)[1]["total"]
        wins += after < before
    assert wins >= 8


def test_no_drp_replaces_residual_network():
    _, y, k_hat = _instance()
    state = init_state(y, _config(ablation="no_drp"))
    assert not isinstance(state.residual_gen, Network)
    assert isinstance(state.image_gen, Network)
    step_networks(state, y, k_hat)
    assert state.r_hat.shape == (1, 16, 16)


def test_no_dip_and_no_r_term_generators():
    _, y, _ = _instance()
    state = init_state(y, _config(ablation="no_dip"))
    assert not isinstance(state.image_gen, Network)
    np.testing.assert_array_equal(state.image_gen.forward().data, 0.5)
    assert init_state(y, _config(ablation="no_r_term")).residual_gen is None


def test_divergence_is_reported_with_iteration():
    _, y, k_hat = _instance()
    cfg = _config(lr_image=1e300, lr_residual=1e300, iterations=3, ablation="no_dip")
    with pytest.raises(DivergenceError) as info:
        with np.errstate(all="ignore"):
            run(y * 1e200, k_hat, cfg)
    assert info.value.iteration >= 0


# ---------------------------------------------------------------- v step


def _state_after_one_step(lambda3, seed=0):
    _, y, k_hat = _instance(seed)
    state = init_state(y, _config(lambda3=lambda3))
    step_networks(state, y, k_hat)
    c = y[None] - conv2d_circular_fft(state.x_hat, k_hat) - state.r_hat
    return state, y, k_hat, c


def test_v_step_without_sparsity_is_least_squares():
    state, y, k_hat, c = _state_after_one_step(0.0)
    step_v(state, y, k_hat)
    np.testing.assert_array_equal(state.v, dct2(c))


def test_v_step_zero_residual_gives_zero():
    state, y, k_hat, _ = _state_after_one_step(0.3)
    y_exact = (conv2d_circular_fft(state.x_hat, k_hat) + state.r_hat)[0]
    step_v(state, y_exact, k_hat)
    assert np.abs(state.v).max() < 1e-12


def _scalar_argmin(lam, b):
    # argmin_u lam*|u| + (u - b)^2 by grid search plus one refinement
    grid = np.linspace(b - lam - 0.1, b + lam + 0.1, 4001)
    u = grid[np.argmin(lam * np.abs(grid) + (grid - b) ** 2)]
    step = grid[1] - grid[0]
    fine = np.linspace(u - step, u + step, 4001)
    return fine[np.argmin(lam * np.abs(fine) + (fine - b) ** 2)]


def test_v_step_matches_scalar_oracle():
    lam = 0.02
    state, y, k_hat, c = _state_after_one_step(lam, seed=1)
    step_v(state, y, k_hat)
    b = dct2(c).ravel()
    rng = np.random.default_rng(0)
    for i in rng.choice(b.size, size=60, replace=False):
        assert abs(state.v.ravel()[i] - _scalar_argmin(lam, b[i])) < 1e-6


def test_v_step_is_exact_minimizer_against_perturbations():
    lam = 0.02
    state, y, k_hat, _ = _state_after_one_step(lam, seed=2)
    cfg = state.config
    step_v(state, y, k_hat)
    best = objective_value(y, k_hat, state.x_hat, state.r_hat, state.v, cfg)["total"]
    rng = np.random.default_rng(3)
    for scale in (1e-2, 1e-4, 1e-6):
        for _ in range(20):
            probe = state.v + scale * rng.standard_normal(state.v.shape)
            assert objective_value(y, k_hat, state.x_hat, state.r_hat, probe, cfg)["total"] >= best - 1e-12


def test_general_prox_step_with_other_lipschitz_constant():
    state, y, k_hat, c = _state_after_one_step(0.02)
    state.config = SolverConfig(**{**state.config.to_dict(), "L": 4.0})
    step_v(state, y, k_hat)
    # starting from v = 0 with step 1/4: S_{lam/4}(dct2(c) / 2)
    expected = np.sign(dct2(c)) * np.maximum(np.abs(dct2(c)) / 2 - 0.02 / 4, 0)
    np.testing.assert_allclose(state.v, expected, atol=1e-15)


def test_v_step_requires_network_step_first():
    _, y, k_hat = _instance()
    with pytest.raises(ValueError):
        step_v(init_state(y, _config()), y, k_hat)


def test_v_update_never_increases_objective():
    _, y, k_hat = _instance(seed=4)
    cfg = _config(lambda1=1e-3, lambda2=1e-3, lambda3=0.05)
    state = init_state(y, cfg)
    for it in range(25):
        state.iter = it
        step_networks(state, y, k_hat)
        before = objective_value(y, k_hat, state.x_hat, state.r_hat, state.v, cfg)["total"]
        step_v(state, y, k_hat)
        after = objective_value(y, k_hat, state.x_hat, state.r_hat, state.v, cfg)["total"]
        assert after <= before + 1e-10


# ---------------------------------------------------------------- run


def test_zero_iterations_return_fresh_outputs():
    _, y, k_hat = _instance()
    cfg = _config(iterations=0)
    res = run(y, k_hat, cfg)
    assert res.loss_trace == []
    fresh = init_state(y, cfg).image_gen.forward().data[0]
    np.testing.assert_array_equal(res.x_hat, fresh)
    assert not res.h_hat.any()
    assert res.x_hat.shape == y.shape


def test_run_is_bitwise_deterministic():
    _, y, k_hat = _instance()
    a = run(y, k_hat, _config(iterations=4, seed=7))
    b = run(y, k_hat, _config(iterations=4, seed=7))
    assert np.array_equal(a.x_hat, b.x_hat)
    assert np.array_equal(a.r_hat, b.r_hat)
    assert np.array_equal(a.h_hat, b.h_hat)
    assert a.loss_trace == b.loss_trace


def test_run_trace_length_and_output_range():
    _, y, k_hat = _instance()
    res = run(y, k_hat, _config(iterations=6))
    assert len(res.loss_trace) == 6
    assert set(res.loss_trace[0]) == {"data", "tv", "r_l1", "v_l1", "total"}
    assert (res.x_hat > 0).all() and (res.x_hat < 1).all()


def test_run_rejects_non_finite_observation():
    _, y, k_hat = _instance()
    y[0, 0] = np.nan
    with pytest.raises(ValueError):
        run(y, k_hat, _config())


def test_colour_observation_keeps_layout():
    _, y, k_hat = _instance()
    y3 = np.stack([y, y * 0.9, y * 0.8])
    res = run(y3, k_hat, _config(iterations=2))
    assert res.x_hat.shape == res.r_hat.shape == res.h_hat.shape == (3, 16, 16)


# ---------------------------------------------------------------- ablations


def test_full_ablation_is_plain_run():
    _, y, k_hat = _instance()
    a = run(y, k_hat, _config(iterations=3))
    b = run_ablation(y, k_hat, _config(iterations=3), "full")
    assert np.array_equal(a.x_hat, b.x_hat) and a.loss_trace == b.loss_trace


def test_unknown_ablation_mode():
    _, y, k_hat = _instance()
    with pytest.raises(ValueError):
        run_ablation(y, k_hat, _config(), "no_everything")


@pytest.mark.parametrize("mode", ABLATIONS)
def test_every_mode_runs(mode):
    _, y, k_hat = _instance()
    res = run_ablation(y, k_hat, _config(iterations=2), mode)
    assert res.config["ablation"] == mode
    assert np.isfinite(res.x_hat).all()


def test_no_v_sparsity_fits_data_faster():
    _, y, k_hat = _instance()
    cfg = _config(iterations=10, lambda3=0.05)
    full = run_ablation(y, k_hat, cfg, "full").loss_trace
    free_v = run_ablation(y, k_hat, cfg, "no_v_sparsity").loss_trace
    assert free_v[-1]["data"] < full[-1]["data"]


def test_trace_csv(tmp_path):
    trace = [{"data": 1.0, "tv": 2.0, "r_l1": 3.0, "v_l1": 4.0, "total": 10.0}]
    write_trace_csv(trace, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines == ["iter,data,tv,r_l1,v_l1,total", "0,1.0,2.0,3.0,4.0,10.0"]
