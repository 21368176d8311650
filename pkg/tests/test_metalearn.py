import numpy as np
import pytest

from metashot.diffcore import ParamSet, Tensor, finite_difference_gradient, gradient, ops, relative_error
from metashot.episodes import EpisodeSpec, SyntheticSpec, generate_synthetic, sample_episode
from metashot.errors import ConfigError, ShapeError
from metashot.metalearn import (
    InnerLoopConfig,
    MetaConfig,
    MetaLearner,
    PretrainConfig,
    adapt_and_predict,
    apply_regularization,
    draw_batch,
    init_pretrain_params,
    init_state,
    inner_update,
    meta_gradient,
    meta_step,
    meta_train,
    pretrain,
    training_accuracy,
)
from metashot.netmodels import BackboneConfig, HeadConfig, NetworkSpec, RepresentationHandle, build_network


def small_spec(ways=2, variant="aml", fc=1):
    return NetworkSpec(variant, BackboneConfig(2, 8, (8, 8, 1)), HeadConfig(fc, ways))


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(SyntheticSpec((8, 8), 1, 0.1, 4, 2.0), 8, 12, seed=1)


def quiet(**kw):
    base = dict(beta=0.01, beta_final=0.001, decay_after=10**6, meta_batch=1, iterations=10,
                dropout_rate=0.0, l1=0.0, l2=0.0)
    base.update(kw)
    return MetaConfig(**base)


# ---------------------------------------------------------------- inner update


def test_zero_alpha_leaves_theta_unchanged(data):
    spec = small_spec()
    learner = MetaLearner(spec)
    ps = build_network("aml", spec, 0)
    st = init_state(learner, ps, InnerLoopConfig(alpha_init=0.0), 0)
    ep = sample_episode(data, EpisodeSpec(2, 1, 2), np.random.default_rng(0))
    out = inner_update(learner, st.params, st.alpha, ep.support_x, ep.support_y, InnerLoopConfig())
    for n, t in st.params.items():
        assert np.array_equal(out[n].data, t.data)


def test_scalar_inner_step_example():
    # theta=1, loss theta^2, alpha=0.1 -> theta' = 1 - 0.1 * 2 = 0.8
    ps = ParamSet({"t": Tensor(1.0, requires_grad=True)})
    g = gradient(ops.mul(ps["t"], ps["t"]), ps)
    assert 1.0 - 0.1 * g["t"].item() == pytest.approx(0.8, abs=1e-15)


def test_support_loss_decreases_after_small_step(data):
    spec = small_spec()
    learner = MetaLearner(spec)
    inner = InnerLoopConfig(alpha_init=1e-3)
    wins = 0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        st = init_state(learner, build_network("aml", spec, trial), inner, trial)
        ep = sample_episode(data, EpisodeSpec(2, 1, 1), rng)
        before = ops.cross_entropy(learner.logits(ep.support_x, st.params), ep.support_y).item()
        theta = inner_update(learner, st.params, st.alpha, ep.support_x, ep.support_y, inner)
        after = ops.cross_entropy(learner.logits(ep.support_x, theta), ep.support_y).item()
        wins += after < before
    assert wins >= 90


def test_alpha_must_match_scope(data):
    spec = small_spec()
    learner = MetaLearner(spec)
    ps = build_network("aml", spec, 0)
    st = init_state(learner, ps, InnerLoopConfig(), 0)
    ep = sample_episode(data, EpisodeSpec(2, 1, 1), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        inner_update(learner, ps, st.alpha, ep.support_x, ep.support_y, InnerLoopConfig(scope="abp_only"))


def test_inner_config_validation():
    with pytest.raises(ConfigError):
        InnerLoopConfig(steps=0).validate()
    with pytest.raises(ConfigError):
        InnerLoopConfig(scope="encoder").validate()
    with pytest.raises(ConfigError):
        MetaConfig(dropout_rate=1.0).validate()


# ---------------------------------------------------------------- toy chain


def toy_meta_gradient(second_order):
    theta = Tensor(0.0, requires_grad=True)
    alpha = Tensor(0.25, requires_grad=True)
    ps = ParamSet({"theta": theta, "alpha": alpha})
    ls = ops.power(ops.sub(theta, 1.0), 2)
    g = gradient(ls, ps.subset(["theta"]), create_graph=second_order)["theta"]
    theta2 = ops.sub(theta, ops.mul(alpha, g))
    out = gradient(ops.mul(theta2, theta2), ps)
    return out["theta"].item(), out["alpha"].item()


def test_toy_chain_second_order():
    t, a = toy_meta_gradient(True)
    assert abs(t - 0.5) <= 1e-12 and abs(a - 2.0) <= 1e-12


def test_toy_chain_first_order():
    t, a = toy_meta_gradient(False)
    assert abs(t - 1.0) <= 1e-12 and abs(a - 2.0) <= 1e-12


# ---------------------------------------------------------------- meta-gradient


def composed_objective(learner, ep, names):
    def f(p):
        theta = ParamSet((n, p[n]) for n in names)
        alpha = ParamSet((n, p["alpha:" + n]) for n in names)
        loss = ops.cross_entropy(learner.logits(ep.support_x, theta), ep.support_y)
        g = gradient(loss, theta, create_graph=True)
        adapted = ParamSet((n, ops.sub(theta[n], ops.mul(alpha[n], g[n]))) for n in names)
        return ops.cross_entropy(learner.logits(ep.query_x, adapted), ep.query_y)

    return f


def test_meta_gradient_matches_fd_including_alpha(data):
    spec = small_spec()
    learner = MetaLearner(spec)
    inner = InnerLoopConfig(alpha_init=0.05)
    st = init_state(learner, build_network("aml", spec, 3), inner, 0)
    # random per-element alpha so its gradient is not degenerate
    arng = np.random.default_rng(4)
    st.alpha = st.alpha.map(lambda n, t: Tensor(arng.uniform(0.01, 0.1, t.shape)))
    ep = sample_episode(data, EpisodeSpec(2, 1, 2), np.random.default_rng(5))
    g_theta, g_alpha, _ = meta_gradient(learner, st, [ep], inner, quiet())
    names = st.params.names()
    joint = ParamSet(
        [(n, Tensor(st.params[n].data, requires_grad=True)) for n in names]
        + [("alpha:" + n, Tensor(st.alpha[n].data, requires_grad=True)) for n in names]
    )
    fd = finite_difference_gradient(composed_objective(learner, ep, names), joint, nested=True)
    an = ParamSet([(n, g_theta[n]) for n in names] + [("alpha:" + n, g_alpha[n]) for n in names])
    assert relative_error(an, fd) <= 1e-5


def test_regularization_example():
    ps = ParamSet({"x.w": Tensor(2.0), "x.b": Tensor(5.0)})
    out = apply_regularization(0.0, ps, 0.001, 0.00001).item()
    assert out == pytest.approx(0.002 + 0.00004, abs=1e-15)
    assert apply_regularization(1.25, ps, 0.0, 0.0).item() == 1.25


def test_beta_decays_at_boundary():
    cfg = MetaConfig(beta=0.001, beta_final=0.0001, decay_after=30000)
    assert cfg.beta_at(29999) == 0.001 and cfg.beta_at(30000) == 0.0001


def test_regularization_gradient_matches_fd():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((3, 4))
    w = np.where(np.abs(w) < 0.05, 0.1, w)
    ps = ParamSet({"l.w": Tensor(w, requires_grad=True), "l.b": Tensor(rng.standard_normal(4), requires_grad=True)})
    f = lambda p: apply_regularization(ops.tsum(ops.mul(p["l.b"], p["l.b"])), p, 0.01, 0.1)
    assert relative_error(gradient(f(ps), ps), finite_difference_gradient(f, ps)) < 1e-6


def test_meta_step_is_plain_descent(data):
    spec = small_spec()
    learner = MetaLearner(spec)
    inner = InnerLoopConfig(alpha_init=0.05)
    st = init_state(learner, build_network("aml", spec, 0), inner, 0)
    ep = sample_episode(data, EpisodeSpec(2, 1, 2), np.random.default_rng(1))
    cfg = quiet(l1=0.001, l2=1e-5)
    g_theta, g_alpha, _ = meta_gradient(learner, st, [ep], inner, cfg)
    new, _ = meta_step(learner, st, [ep], inner, cfg)
    for n, t in st.params.items():
        assert np.array_equal(new.params[n].data, t.data - 0.01 * g_theta[n].data)
    for n, t in st.alpha.items():
        assert np.array_equal(new.alpha[n].data, t.data - 0.01 * g_alpha[n].data)
    assert new.iteration == 1


def test_zero_beta_leaves_state_unchanged(data):
    spec = small_spec()
    learner = MetaLearner(spec)
    inner = InnerLoopConfig()
    st = init_state(learner, build_network("aml", spec, 0), inner, 0)
    ep = sample_episode(data, EpisodeSpec(2, 1, 2), np.random.default_rng(1))
    new, _ = meta_step(learner, st, [ep], inner, quiet(beta=0.0, beta_final=0.0))
    for n, t in st.params.items():
        assert np.array_equal(new.params[n].data, t.data)
    for n, t in st.alpha.items():
        assert np.array_equal(new.alpha[n].data, t.data)


def test_meta_batch_size_checked(data):
    spec = small_spec()
    learner = MetaLearner(spec)
    st = init_state(learner, build_network("aml", spec, 0), InnerLoopConfig(), 0)
    ep = sample_episode(data, EpisodeSpec(2, 1, 2), np.random.default_rng(1))
    with pytest.raises(ShapeError):
        meta_step(learner, st, [ep, ep], InnerLoopConfig(), quiet())


def test_threaded_meta_gradient_matches_serial(data):
    spec = small_spec()
    learner = MetaLearner(spec)
    inner = InnerLoopConfig()
    st = init_state(learner, build_network("aml", spec, 0), inner, 0)
    cfg = quiet(meta_batch=4, dropout_rate=0.2)
    eps, rngs = draw_batch(data, EpisodeSpec(2, 1, 2), cfg, np.random.default_rng(2))
    _, rngs2 = draw_batch(data, EpisodeSpec(2, 1, 2), cfg, np.random.default_rng(2))
    a, _, _ = meta_gradient(learner, st, eps, inner, cfg, rngs, threads=1)
    b, _, _ = meta_gradient(learner, st, eps, inner, cfg, rngs2, threads=4)
    for n, t in a.items():
        assert t.data.tobytes() == b[n].data.tobytes()


# ---------------------------------------------------------------- RAML / URAML


def raml_setup(data):
    enc = BackboneConfig(2, 8, (8, 8, 1))
    rep = RepresentationHandle("supervised", build_network("representation", enc, 0), enc)
    spec = NetworkSpec("raml_abp", head=HeadConfig(2, 2, 16), feature_dim=rep.feature_dim)
    learner = MetaLearner(spec, rep)
    return rep, spec, learner


def test_abp_only_training_leaves_representation_bit_identical(data):
    rep, spec, learner = raml_setup(data)
    before = {n: t.data.tobytes() for n, t in rep.params.items()}
    inner = InnerLoopConfig(scope="abp_only")
    st = init_state(learner, build_network("abp", spec, 0), inner, 0)
    st, _ = meta_train(learner, st, data, EpisodeSpec(2, 1, 2), inner, quiet(iterations=5, meta_batch=2))
    assert st.iteration == 5
    assert {n: t.data.tobytes() for n, t in rep.params.items()} == before
    assert not any(n.startswith("r.") for n in st.params.names())


def test_raml_requires_a_representation():
    spec = NetworkSpec("raml_abp", head=HeadConfig(2, 2, 16), feature_dim=8)
    with pytest.raises(ShapeError):
        MetaLearner(spec)


def test_eval_dropout_off_gives_identical_logits(data):
    spec = small_spec(fc=2)
    learner = MetaLearner(spec)
    inner = InnerLoopConfig()
    st = init_state(learner, build_network("aml", spec, 0), inner, 0)
    ep = sample_episode(data, EpisodeSpec(2, 1, 3), np.random.default_rng(0))
    a = adapt_and_predict(learner, st.params, st.alpha, ep, inner)
    b = adapt_and_predict(learner, st.params, st.alpha, ep, inner)
    assert a.tobytes() == b.tobytes() and a.shape == (6, 2)


# ---------------------------------------------------------------- training loop


def test_zero_iterations_gives_empty_log(data):
    spec = small_spec()
    learner = MetaLearner(spec)
    st = init_state(learner, build_network("aml", spec, 0), InnerLoopConfig(), 0)
    out, rows = meta_train(learner, st, data, EpisodeSpec(2, 1, 2), InnerLoopConfig(), quiet(iterations=0))
    assert rows == [] and out.iteration == 0


def test_training_logs_are_reproducible(data):
    spec = small_spec()
    learner = MetaLearner(spec)

    def run():
        st = init_state(learner, build_network("aml", spec, 0), InnerLoopConfig(), 7)
        cfg = quiet(iterations=6, meta_batch=2, dropout_rate=0.2)
        return meta_train(learner, st, data, EpisodeSpec(2, 1, 2), InnerLoopConfig(), cfg, log_every=2)

    (s1, r1), (s2, r2) = run(), run()
    assert r1 == r2 and [r[0] for r in r1] == [2, 4, 6]
    for n, t in s1.params.items():
        assert t.data.tobytes() == s2.params[n].data.tobytes()


def test_resumed_training_matches_uninterrupted(data):
    spec = small_spec()
    learner = MetaLearner(spec)
    cfg = quiet(iterations=6, meta_batch=2, dropout_rate=0.2)
    ep = EpisodeSpec(2, 1, 2)
    st = init_state(learner, build_network("aml", spec, 0), InnerLoopConfig(), 7)
    full, rows = meta_train(learner, st.copy(), data, ep, InnerLoopConfig(), cfg, log_every=1)
    half, r1 = meta_train(learner, st.copy(), data, ep, InnerLoopConfig(), cfg, iterations=3, log_every=1)
    rest, r2 = meta_train(learner, half.copy(), data, ep, InnerLoopConfig(), cfg, log_every=1)
    assert r1 + r2 == rows
    for n, t in full.params.items():
        assert t.data.tobytes() == rest.params[n].data.tobytes()


def test_first_order_training_runs(data):
    spec = small_spec()
    learner = MetaLearner(spec)
    st = init_state(learner, build_network("aml", spec, 0), InnerLoopConfig(), 0)
    out, rows = meta_train(learner, st, data, EpisodeSpec(2, 1, 2), InnerLoopConfig(),
                           quiet(iterations=4, second_order=False), log_every=1)
    assert len(rows) == 4 and all(np.isfinite(r[1]) for r in rows)


# ---------------------------------------------------------------- pretraining


def test_zero_iteration_pretrain_returns_frozen_init(data):
    enc = BackboneConfig(2, 8, (8, 8, 1))
    params = init_pretrain_params("supervised", enc, None, data.num_classes, 0)
    cfg = PretrainConfig(iterations=0, batch_size=4)
    rep, final, rows = pretrain(params, data, cfg, enc)
    assert rows == []
    for n, t in rep.params.items():
        assert np.array_equal(t.data, params[n].data)
        assert not t.data.flags.writeable


def test_supervised_pretraining_fits_training_classes():
    handle = generate_synthetic(SyntheticSpec((8, 8), 1, 0.1, 4, 2.0), 5, 20, seed=2)
    enc = BackboneConfig(2, 8, (8, 8, 1))
    params = init_pretrain_params("supervised", enc, None, 5, 0)
    cfg = PretrainConfig(iterations=500, batch_size=16, lr=0.01, lr_final=0.001, decay_after=400, dropout_rate=0.0)
    rep, final, rows = pretrain(params, handle, cfg, enc, seed=0, log_every=100)
    assert [r[0] for r in rows] == [1, 100, 200, 300, 400, 500]
    assert training_accuracy(final, handle, enc) >= 0.95
    assert rep.feature_dim == 8
