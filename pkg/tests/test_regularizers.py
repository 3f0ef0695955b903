import numpy as np
import pytest

from lnsr import diffcore as dc
from lnsr.encoder import LayerTrace, Parameters, init_params
from lnsr.regularizers import (
    L2SPConfig,
    LNSRConfig,
    MixoutConfig,
    NoiseOnlyConfig,
    RegularizerError,
    compose_loss,
    l2sp_penalty,
    lnsr_penalty,
    mixout_mix,
    sample_noise,
)


def _trace(outputs, start=1):
    outputs = [np.asarray(o, dtype=float) for o in outputs]
    mask = np.ones(outputs[0].shape[0], dtype=bool)
    return LayerTrace(start, outputs, None, None, mask, batched=False)


# -- noise -------------------------------------------------------------------

def test_zero_sigma_noise_is_exactly_zero():
    assert not sample_noise((4, 5), 0.0, np.random.default_rng(0)).any()


def test_noise_moments():
    eps = sample_noise((10**6,), 0.3, np.random.default_rng(1))
    assert abs(eps.mean()) < 4 * 0.3 / 1000
    assert abs(eps.var() / 0.09 - 1) < 0.01


def test_noise_determinism():
    a = sample_noise((3,), 1.0, np.random.default_rng(7))
    assert np.array_equal(a, sample_noise((3,), 1.0, np.random.default_rng(7)))
    assert not np.array_equal(a, sample_noise((3,), 1.0, np.random.default_rng(8)))


def test_zero_sigma_consumes_the_generator_like_positive_sigma():
    r0, r1 = np.random.default_rng(3), np.random.default_rng(3)
    sample_noise((5, 2), 0.0, r0)
    sample_noise((5, 2), 0.5, r1)
    assert r0.random() == r1.random()


def test_negative_sigma_rejected():
    with pytest.raises(RegularizerError):
        sample_noise((2,), -1.0, np.random.default_rng(0))


# -- LNSR penalty --------------------------------------------------------------

def test_identical_traces_give_zero():
    t = _trace([np.ones((3, 2)), np.ones((3, 2))])
    total, terms = lnsr_penalty(t, t, LNSRConfig(0.1, 1, (1.0, 1.0)))
    assert total == 0.0 and terms == [0.0, 0.0]


def test_single_unit_difference():
    clean = _trace([np.zeros((2, 3))])
    diff = np.zeros((2, 3))
    diff[1, 2] = 1.0
    total, _ = lnsr_penalty(clean, _trace([diff]), LNSRConfig(0.1, 1, (1.0,)))
    assert total == 1.0


def test_weighted_two_layer_example():
    clean = _trace([np.zeros((1, 2)), np.zeros((1, 2))])
    pert = _trace([[[0.5, 0.0]], [[0.0, 2.0]]])  # norms^2 0.25 and 4.0
    total, terms = lnsr_penalty(clean, pert, LNSRConfig(0.1, 1, (1.0, 0.5)))
    assert total == pytest.approx(2.25, abs=1e-15)
    assert sum(terms) == pytest.approx(total, abs=1e-15)


def test_penalty_scales_linearly_with_lambda():
    rng = np.random.default_rng(0)
    clean = _trace([rng.normal(size=(3, 4)) for _ in range(3)], start=2)
    pert = _trace([rng.normal(size=(3, 4)) for _ in range(3)], start=2)
    base, _ = lnsr_penalty(clean, pert, LNSRConfig(0.1, 2, (1.0, 2.0, 0.5)))
    scaled, _ = lnsr_penalty(clean, pert, LNSRConfig(0.1, 2, (3.0, 6.0, 1.5)))
    assert scaled == pytest.approx(3.0 * base, rel=1e-15)


def test_padding_positions_are_ignored():
    clean = LayerTrace(1, [np.zeros((1, 3, 2))], None, None, np.array([[True, True, False]]))
    pert = LayerTrace(1, [np.array([[[1.0, 0.0], [0.0, 0.0], [5.0, 5.0]]])], None, None, clean.mask)
    total, _ = lnsr_penalty(clean, pert, LNSRConfig(0.1, 1, (1.0,)))
    assert total == 1.0


def test_mismatched_ranges_rejected():
    clean = _trace([np.zeros((2, 2)), np.zeros((2, 2))])
    with pytest.raises(RegularizerError):
        lnsr_penalty(clean, _trace([np.zeros((2, 2))], start=2), LNSRConfig(0.1, 1, (1.0, 1.0)))
    with pytest.raises(RegularizerError):
        lnsr_penalty(clean, _trace([np.zeros((2, 2))] * 2), LNSRConfig(0.1, 1, (1.0,)))


def test_lnsr_config_validation():
    with pytest.raises(RegularizerError):
        LNSRConfig(-0.1, 1, (1.0,))
    with pytest.raises(RegularizerError):
        LNSRConfig(0.1, 0, (1.0,))
    with pytest.raises(RegularizerError):
        LNSRConfig(0.1, 1, (-1.0,))
    with pytest.raises(RegularizerError):
        LNSRConfig(0.1, 2, (1.0,)).check(4)
    assert LNSRConfig.uniform(0.1, 2, 4).layer_weights == (1.0, 1.0, 1.0)


def _lnsr_objective(model, params, batch, cfg, eps):
    clean = model.forward(params, batch)
    xb = clean.layer_input(cfg.inject_layer)
    base = xb if cfg.backprop_below else dc.detach(xb)
    pert = model.forward_from(params, base + eps, cfg.inject_layer, batch)
    return lnsr_penalty(clean, pert, cfg)[0]


def test_penalty_gradient_matches_finite_differences(tiny_params, tiny_model, tiny_batch):
    cfg = LNSRConfig(0.2, 1, (1.0, 0.7))
    eps = sample_noise(tiny_batch.tokens.shape + (8,), cfg.sigma, np.random.default_rng(4))
    tape = dc.Tape()
    pen = _lnsr_objective(tiny_model, tiny_params.on_tape(tape), tiny_batch, cfg, eps)
    grads = dc.backward(tape, output=pen)
    for name in ("layer1.attn.k.w", "layer1.ln2.g", "layer2.ffn.in.w", "layer2.attn.o.b"):
        def f(v, name=name):
            return _lnsr_objective(tiny_model, tiny_params.replace(**{name: v}), tiny_batch, cfg, eps)

        fd = dc.finite_difference_gradient(f, tiny_params[name])
        assert dc.max_relative_error(grads[name], fd) < 1e-4, name


def test_perturbed_branch_is_detached_below_inject_layer(tiny_params, tiny_model, tiny_batch):
    """Layers below b only see gradient from the clean branch."""
    cfg = LNSRConfig(0.2, 2, (1.0,))
    eps = sample_noise(tiny_batch.tokens.shape + (8,), cfg.sigma, np.random.default_rng(4))

    def grads_for(c):
        tape = dc.Tape()
        pen = _lnsr_objective(tiny_model, tiny_params.on_tape(tape), tiny_batch, c, eps)
        return dc.backward(tape, output=pen)

    detached = grads_for(cfg)
    full = grads_for(LNSRConfig(0.2, 2, (1.0,), backprop_below=True))
    # The clean branch at layer 2 depends on layer-1 parameters, so they still get gradient.
    assert np.any(detached["layer1.attn.q.w"] != 0)
    assert not np.allclose(detached["layer1.attn.q.w"], full["layer1.attn.q.w"])
    np.testing.assert_array_equal(detached["layer2.attn.q.w"], full["layer2.attn.q.w"])

    # Perturbed input equals detached x^b plus noise.
    tape = dc.Tape()
    p = tiny_params.on_tape(tape)
    xb = tiny_model.forward(p, tiny_batch).layer_input(2)
    pin = dc.detach(xb) + eps
    assert pin.tape.nodes[dc.detach(xb).id].op == "const"
    np.testing.assert_array_equal(pin.value, xb.value + eps)


# -- L2-SP ---------------------------------------------------------------------

def _flat_params(body, head):
    from lnsr.encoder import EncoderConfig

    cfg = EncoderConfig(num_layers=1, d_model=2, n_heads=1, d_ff=2, vocab_size=8, max_seq_len=4)
    return Parameters(cfg, {"embed.tok": np.asarray(body, float), "head.w": np.asarray(head, float)})


def test_l2sp_zero_at_anchor():
    p = _flat_params([1.0, 2.0, 3.0], [4.0])
    assert l2sp_penalty(p, L2SPConfig(1.0, 0.0, p)) == 0.0


def test_l2sp_head_term():
    p = _flat_params([1.0, 2.0, 3.0], [2.0])
    assert l2sp_penalty(p, L2SPConfig(0.0, 1.0, p)) == 2.0


def test_l2sp_body_term():
    snap = _flat_params([0.0, 0.0, 0.0], [9.0])
    p = _flat_params([1.0, 1.0, 1.0], [9.0])
    assert l2sp_penalty(p, L2SPConfig(2.0, 0.0, snap)) == 3.0


def test_l2sp_body_gradient_is_alpha_times_offset(tiny_params):
    rng = np.random.default_rng(2)
    snap = Parameters(tiny_params.config, {k: v + rng.normal(size=v.shape) for k, v in tiny_params.tensors.items()})
    tape = dc.Tape()
    pen = l2sp_penalty(tiny_params.on_tape(tape), L2SPConfig(0.3, 0.7, snap))
    grads = dc.backward(tape, output=pen)
    for name in tiny_params.body_names:
        np.testing.assert_allclose(grads[name], 0.3 * (tiny_params[name] - snap[name]), rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(grads["head.w"], 0.7 * tiny_params["head.w"], rtol=1e-14)


def test_l2sp_shape_mismatch_rejected(tiny_params):
    snap = tiny_params.replace(**{"embed.tok": np.zeros((2, 2))})
    with pytest.raises(RegularizerError):
        l2sp_penalty(tiny_params, L2SPConfig(1.0, 0.0, snap))


# -- Mixout --------------------------------------------------------------------

def test_mixout_zero_prob_is_bitwise_noop(tiny_params, tiny_config):
    snap = init_params(tiny_config, np.random.default_rng(9))
    mixed = mixout_mix(tiny_params, MixoutConfig(0.0, snap), np.random.default_rng(0))
    for k in tiny_params.tensors:
        assert mixed[k].tobytes() == tiny_params[k].tobytes()


def test_mixout_full_prob_restores_body(tiny_params, tiny_config):
    snap = init_params(tiny_config, np.random.default_rng(9))
    mixed = mixout_mix(tiny_params, MixoutConfig(1.0, snap), np.random.default_rng(0))
    for k in tiny_params.body_names:
        assert np.array_equal(mixed[k], snap[k])
    for k in tiny_params.head_names:
        assert np.array_equal(mixed[k], tiny_params[k])


def test_mixout_replacement_fraction():
    from lnsr.encoder import EncoderConfig

    cfg = EncoderConfig(num_layers=1, d_model=8, n_heads=1, d_ff=8, vocab_size=8, max_seq_len=4)
    p = Parameters(cfg, {"embed.tok": np.ones(10**6), "head.w": np.ones(2)})
    snap = Parameters(cfg, {"embed.tok": np.zeros(10**6), "head.w": np.zeros(2)})
    mixed = mixout_mix(p, MixoutConfig(0.5, snap), np.random.default_rng(0))
    frac = 1.0 - mixed["embed.tok"].mean()
    assert abs(frac - 0.5) < 0.003 * 0.5


def test_mixout_is_deterministic_given_seed(tiny_params, tiny_config):
    snap = init_params(tiny_config, np.random.default_rng(9))
    a = mixout_mix(tiny_params, MixoutConfig(0.3, snap), np.random.default_rng(1))
    b = mixout_mix(tiny_params, MixoutConfig(0.3, snap), np.random.default_rng(1))
    assert a.equals(b)


def test_mixout_rescale_keeps_expectation(tiny_config):
    from lnsr.encoder import EncoderConfig

    cfg = EncoderConfig(num_layers=1, d_model=8, n_heads=1, d_ff=8, vocab_size=8, max_seq_len=4)
    p = Parameters(cfg, {"embed.tok": np.full(10**5, 2.0), "head.w": np.ones(2)})
    snap = Parameters(cfg, {"embed.tok": np.zeros(10**5), "head.w": np.zeros(2)})
    mixed = mixout_mix(p, MixoutConfig(0.4, snap, rescale=True), np.random.default_rng(0))
    assert abs(mixed["embed.tok"].mean() - 2.0) < 0.03


def test_mixout_gradient_reaches_only_kept_entries(tiny_params, tiny_config):
    snap = init_params(tiny_config, np.random.default_rng(9))
    tape = dc.Tape()
    mixed = mixout_mix(tiny_params.on_tape(tape), MixoutConfig(0.5, snap), np.random.default_rng(2))
    loss = dc.sum_squares(mixed["layer1.ffn.in.w"])
    g = dc.backward(tape, output=loss)["layer1.ffn.in.w"]
    kept = mixed["layer1.ffn.in.w"].value != snap["layer1.ffn.in.w"]
    assert np.all(g[~kept] == 0)
    np.testing.assert_allclose(g[kept], 2 * tiny_params["layer1.ffn.in.w"][kept])


def test_mixout_probability_validated(tiny_params):
    with pytest.raises(RegularizerError):
        MixoutConfig(1.5, tiny_params)


def test_noise_only_config_validation():
    with pytest.raises(RegularizerError):
        NoiseOnlyConfig(-1.0, 1)


# -- compose -------------------------------------------------------------------

def test_compose_zero_penalty():
    assert compose_loss(0.7, 0.0) == 0.7


def test_compose_adds():
    assert compose_loss(0.7, 0.05) == pytest.approx(0.75, abs=1e-15)


def test_compose_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        compose_loss(0.7, float("inf"))


def test_compose_gradient_is_sum_of_gradients():
    x0 = np.array([0.3, -1.2, 2.0])

    def grad(builder):
        _, tape = dc.evaluate(builder, {"x": x0})
        return dc.backward(tape)["x"]

    task = lambda x: dc.sum_(dc.tanh(x))  # noqa: E731
    pen = lambda x: dc.sum_squares(x) * 0.1  # noqa: E731
    total = grad(lambda x: compose_loss(task(x), pen(x)))
    np.testing.assert_allclose(total, grad(task) + grad(pen), rtol=0, atol=1e-12)
