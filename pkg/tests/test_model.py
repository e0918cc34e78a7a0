"""Latent Kalman model: components, fusion/missing contracts, training."""

import numpy as np
import pytest

from vrkn import autodiff as ad
from vrkn.autodiff import Tensor, make_rng, no_grad
from vrkn.gauss import GaussianDiag
from vrkn.lgssm import FilterTrace, LocalStep, Trajectory
from vrkn.lgssm import smooth as lgssm_smooth
from vrkn.model import (
    SensorConfig,
    Trainer,
    Vrkn,
    VrknConfig,
    epistemic_spread,
    load_model,
    stack_batch,
)
from vrkn.tasks import TaskSpec, generate
from vrkn.verify import check_gradients


def small_config(**kwargs):
    defaults = dict(
        sensors=(SensorConfig("angle", 2), SensorConfig("velocity", 1)),
        action_dim=1,
        latent_dim=6,
        hidden_width=16,
    )
    defaults.update(kwargs)
    return VrknConfig(**defaults)


def pendulum_trajs(n=6, T=12, **kwargs):
    task = TaskSpec(system="pendulum", seed=3, **kwargs)
    return generate(task, n, T)


# dynamics network -----------------------------------------------------


def test_phi_zero_weights_emit_midpoints():
    model = Vrkn(small_config(), seed=0)
    for part in (model.phi_in, model.phi_out, model.phi_a, model.phi_b,
                 model.phi_var):
        for p in part.parameters():
            p.data[...] = 0.0
    for p in model.phi_gru.parameters():
        p.data[...] = 0.0
    a, b, q = model.dynamics_phi(
        Tensor(np.zeros((3, 6))), Tensor(np.zeros((3, 1))), None, False
    )
    assert np.max(np.abs(a.data - 0.9)) < 1e-12
    assert np.max(np.abs(q.data - 0.01)) < 1e-12
    assert np.array_equal(b.data, np.zeros((3, 6)))


def test_phi_outputs_within_bounds():
    model = Vrkn(small_config(), seed=1)
    rng = np.random.default_rng(0)
    mu = 5.0 * rng.standard_normal((10_000, 6))
    act = rng.standard_normal((10_000, 1))
    with no_grad():
        a, _, q = model.dynamics_phi(Tensor(mu), Tensor(act), None, False)
    assert np.all(a.data > 0.1) and np.all(a.data < 0.99)
    assert np.all(q.data > 0.001) and np.all(q.data < 0.1)


def test_phi_dropout_contract():
    model = Vrkn(small_config(), seed=2)
    mu, act = np.ones((4, 6)), np.ones((4, 1))
    with no_grad():
        a1, _, _ = model.dynamics_phi(Tensor(mu), Tensor(act),
                                      make_rng(0, "d"), True)
        a2, _, _ = model.dynamics_phi(Tensor(mu), Tensor(act),
                                      make_rng(1, "d"), True)
        d1, _, _ = model.dynamics_phi(Tensor(mu), Tensor(act), None, False)
        d2, _, _ = model.dynamics_phi(Tensor(mu), Tensor(act), None, False)
    assert not np.array_equal(a1.data, a2.data)
    assert np.array_equal(d1.data, d2.data)


# encoders --------------------------------------------------------------


def test_encoder_init_sanity_and_gradcheck():
    model = Vrkn(small_config(), seed=3)
    with no_grad():
        w, vw = model.encode("angle", np.zeros((2, 2)))
    assert np.all(np.isfinite(w.data)) and np.all(vw.data > 0)

    enc = model.encoders["angle"]
    params = []
    for layer in enc["trunk"]:
        params += layer.parameters()
    params += enc["mean"].parameters() + enc["var"].parameters()
    obs = np.random.default_rng(5).normal(size=(3, 2))
    wts = np.random.default_rng(6).normal(size=(3, 6))

    def loss():
        w, vw = model.encode("angle", obs)
        return ad.tsum(w * wts) + ad.tsum(vw * 0.5)

    assert check_gradients(loss, params) <= 1e-4


def test_encoders_share_no_parameters():
    model = Vrkn(small_config(), seed=4)
    names = [p.name for p in model.parameters()]
    assert len(set(names)) == len(names)
    angle = {n for n in names if n.startswith("enc.angle")}
    vel = {n for n in names if n.startswith("enc.velocity")}
    assert angle and vel and not (angle & vel)


def test_encoder_rejects_nan():
    model = Vrkn(small_config(), seed=5)
    bad = np.zeros((2, 2))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        model.encode("angle", bad)


# filtering contracts ----------------------------------------------------


def test_invalid_steps_leave_posterior_bitwise_equal():
    model = Vrkn(small_config(), seed=6)
    trajs = pendulum_trajs(n=3, T=10, missing="every_nth")
    batch = stack_batch(trajs)
    with no_grad():
        priors, posts, _ = model.filter_batch(batch, None, False)
    both_invalid = ~(
        np.stack([t.valid["angle"] for t in trajs]).astype(bool)
        | np.stack([t.valid["velocity"] for t in trajs]).astype(bool)
    )
    for t in range(10):
        pm, pv = priors[t][0].data, priors[t][1].data
        om, ov = posts[t][0].data, posts[t][1].data
        for i in range(3):
            if both_invalid[i, t]:
                assert np.array_equal(pm[i], om[i])
                assert np.array_equal(pv[i], ov[i])


def test_sensor_order_invariance():
    cfg_ab = small_config()
    cfg_ba = VrknConfig(
        sensors=(SensorConfig("velocity", 1), SensorConfig("angle", 2)),
        action_dim=1, latent_dim=6, hidden_width=16,
    )
    m1 = Vrkn(cfg_ab, seed=7)
    m2 = Vrkn(cfg_ba, seed=99)
    # copy parameters so both models are identical functions
    src = {p.name: p for p in m1.parameters()}
    for p in m2.parameters():
        p.data = src[p.name].data.copy()
    trajs = pendulum_trajs(n=4, T=8)
    with no_grad():
        _, posts1, _ = m1.filter_batch(stack_batch(trajs), None, False)
        _, posts2, _ = m2.filter_batch(stack_batch(trajs), None, False)
    for (ma, va), (mb, vb) in zip(posts1, posts2):
        assert np.max(np.abs(ma.data - mb.data)) <= 1e-10
        assert np.max(np.abs(va.data - vb.data)) <= 1e-10


def test_identical_sensor_pair_equals_half_variance():
    cfg2 = VrknConfig(
        sensors=(SensorConfig("a", 2), SensorConfig("b", 2)),
        action_dim=1, latent_dim=5, hidden_width=8,
    )
    model = Vrkn(cfg2, seed=8)
    # make sensor b an exact copy of sensor a
    params = {p.name: p for p in model.parameters()}
    for name, p in params.items():
        if name.startswith("enc.b") or name.startswith("dec.b"):
            p.data = params[name.replace(".b.", ".a.")].data.copy()
    obs = np.random.default_rng(1).normal(size=(3, 1, 2))
    traj_args = dict(actions=np.zeros((1, 1)))
    twin = [
        Trajectory(sensors={"a": o, "b": o.copy()}, **traj_args) for o in obs
    ]
    batch = stack_batch(twin)
    with no_grad():
        _, posts, _ = model.filter_batch(batch, None, False)
        w, vw = model.encode("a", obs.reshape(3, 2))
        mean0, var0 = model.init_belief(3)
        gain = var0.data / (var0.data + vw.data / 2.0)
        ref_mean = mean0.data + gain * (w.data - mean0.data)
        ref_var = var0.data * (1.0 - gain)
    assert np.max(np.abs(posts[0][0].data - ref_mean)) < 1e-9
    assert np.max(np.abs(posts[0][1].data - ref_var)) < 1e-9


def test_filter_online_gap_variance_saw_tooth():
    model = Vrkn(small_config(), seed=9)
    task = TaskSpec(system="pendulum", missing="every_nth", seed=11)
    trajs = generate(task, 2, 16)
    out = model.filter_online(trajs)
    for i, traj in enumerate(trajs):
        valid = traj.valid["angle"] | traj.valid["velocity"]
        for t in range(1, 16):
            prior_v = out["prior_var"][i, t]
            post_prev_v = out["post_var"][i, t - 1]
            assert np.all(prior_v > post_prev_v)  # predict adds noise
            if valid[t]:
                assert np.all(out["post_var"][i, t] < prior_v)
            else:
                assert np.array_equal(out["post_var"][i, t], prior_v)


def test_filter_online_matches_training_filter_bitwise():
    model = Vrkn(small_config(), seed=10)
    trajs = pendulum_trajs(n=3, T=9)
    out = model.filter_online(trajs, dropout_mode="off")
    batch = stack_batch(trajs)
    with no_grad():
        _, posts, _ = model.filter_batch(batch, None, False)
    ref = np.stack([p[0].data for p in posts], axis=1)
    assert np.array_equal(out["post_mean"], ref)


def test_filter_online_validates_mode():
    model = Vrkn(small_config(), seed=11)
    trajs = pendulum_trajs(n=1, T=4)
    with pytest.raises(ValueError):
        model.filter_online(trajs, dropout_mode="bogus")
    with pytest.raises(ValueError):
        model.filter_online(trajs, dropout_mode="sampled")  # rng missing


# smoothing ---------------------------------------------------------------


def _numpy_traces(model, trajs):
    batch = stack_batch(trajs)
    with no_grad():
        priors, posts, steps = model.filter_batch(batch, None, False)
        smoothed, cond = model.smooth_batch(priors, posts, steps)
    return priors, posts, steps, smoothed, cond


def test_smoother_matches_reference_rts():
    model = Vrkn(small_config(), seed=12)
    trajs = pendulum_trajs(n=1, T=8)
    priors, posts, steps, smoothed, _ = _numpy_traces(model, trajs)
    ftrace = FilterTrace(
        priors=[GaussianDiag(p[0].data[0], p[1].data[0]) for p in priors],
        posteriors=[GaussianDiag(p[0].data[0], p[1].data[0]) for p in posts],
        steps=[
            LocalStep(a.data[0], b.data[0], q.data[0]) for a, b, q in steps
        ],
    )
    strace = lgssm_smooth(ftrace)
    for t in range(8):
        assert np.max(np.abs(smoothed[t][0].data[0] - strace.smoothed[t].mean)) < 1e-12
        assert np.max(np.abs(smoothed[t][1].data[0] - strace.smoothed[t].var)) < 1e-12


def test_smoothed_dynamics_marginalization_identity():
    model = Vrkn(small_config(), seed=13)
    trajs = pendulum_trajs(n=4, T=10)
    _, _, _, smoothed, cond = _numpy_traces(model, trajs)
    for t in range(9):
        j, off, cvar = (c.data for c in cond[t])
        mean_t, var_t = smoothed[t][0].data, smoothed[t][1].data
        mean_n, var_n = smoothed[t + 1][0].data, smoothed[t + 1][1].data
        assert np.max(np.abs(j * mean_t + off - mean_n)) < 1e-10
        assert np.max(np.abs(j * var_t * j + cvar - var_n)) < 1e-10
        assert np.all(cvar > 0)


def test_smoothed_beliefs_dominate_posteriors_on_gt_states():
    # belief-quality ordering, averaged over sequences, after brief training
    task = TaskSpec(system="pendulum", action_noise_sd=0.1, seed=17)
    trajs = generate(task, 120, 20)
    model = Vrkn(VrknConfig.for_task(task, latent_dim=8, hidden_width=32),
                 seed=14)
    trainer = Trainer(model, trajs[:100], batch_size=16, seed=0)
    trainer.run(300)
    hold = trajs[100:]
    sm = model.smooth_offline(hold)
    states = np.stack([t.states for t in hold])
    from vrkn.evaluation import fit_state_probe, probe_logprob

    probe = fit_state_probe(
        model.smooth_offline(trajs[:100])["mean"],
        model.smooth_offline(trajs[:100])["var"],
        np.stack([t.states for t in trajs[:100]]),
    )
    lp_smooth = probe_logprob(probe, sm["mean"], sm["var"], states)
    lp_post = probe_logprob(probe, sm["post_mean"], sm["post_var"], states)
    assert lp_smooth > lp_post


# objectives and training --------------------------------------------------


def test_free_nats_zeroes_kl_gradients_when_low():
    model = Vrkn(small_config(free_nats=3.0), seed=15)
    trajs = pendulum_trajs(n=4, T=6)
    batch = stack_batch(trajs)

    def grads_for(fn_value):
        cfg = small_config(free_nats=fn_value)
        m = Vrkn(cfg, seed=15)
        loss, stats = m.loss(batch, make_rng(0, "d"), make_rng(0, "s"),
                             dropout_on=False)
        loss.backward()
        return {p.name: p.grad.copy() for p in m.parameters()}, stats

    g3, stats = grads_for(3.0)
    g_inf, _ = grads_for(1e9)  # everything clipped: pure reconstruction
    assert stats["kl"] < 3.0 * 6  # untrained KLs are small here
    for name in g3:
        assert np.array_equal(g3[name], g_inf[name])
    g0, _ = grads_for(0.0)
    assert any(not np.array_equal(g0[n], g3[n]) for n in g0)


def test_masking_all_dims_zeroes_reconstruction():
    model = Vrkn(small_config(), seed=16)
    trajs = pendulum_trajs(n=2, T=5)
    for t in trajs:
        t.masks["angle"] = np.zeros((5, 2), dtype=bool)
        t.masks["velocity"] = np.zeros((5, 1), dtype=bool)
    batch = stack_batch(trajs)
    with no_grad():
        recon, _ = model.elbo_terms(batch, None, make_rng(0, "s"), False)
    assert recon.data == 0.0


def test_decode_only_stream_contributes_scaled_recon():
    cfg = VrknConfig(
        sensors=(
            SensorConfig("angle", 2),
            SensorConfig("velocity", 1),
            SensorConfig("reward", 1, decoder_loss_scale=10.0, encode=False),
        ),
        action_dim=1, latent_dim=6, hidden_width=16,
    )
    model = Vrkn(cfg, seed=17)
    assert "reward" not in model.encoders and "reward" in model.decoders
    trajs = pendulum_trajs(n=2, T=5)
    for t in trajs:
        reward = np.cos(t.states[:, :1])
        t.sensors["reward"] = reward
        t.valid["reward"] = np.ones(5, dtype=bool)
    batch = stack_batch(trajs)
    loss, stats = model.loss(batch, make_rng(0, "d"), make_rng(0, "s"))
    assert np.isfinite(loss.data)
    loss.backward()
    dec_grads = [p.grad for p in model.decoders["reward"].parameters()]
    assert any(np.any(g != 0) for g in dec_grads)


def test_concat_mode_updates_on_invalid_steps():
    cfg = small_config(missing_mode="concat")
    model = Vrkn(cfg, seed=18)
    trajs = pendulum_trajs(n=2, T=8, missing="every_nth")
    batch = stack_batch(trajs)
    with no_grad():
        priors, posts, _ = model.filter_batch(batch, None, False)
    # flags are features, not gates: posterior differs from prior everywhere
    for t in range(8):
        assert not np.array_equal(priors[t][1].data, posts[t][1].data)


def test_composed_loss_gradcheck_smoke():
    model = Vrkn(small_config(), seed=19)
    trajs = pendulum_trajs(n=2, T=5, missing="every_nth")
    batch = stack_batch(trajs)

    def loss():
        out, _ = model.loss(batch, make_rng(7, "d"), make_rng(7, "s"),
                            dropout_on=True)
        return out

    err = check_gradients(loss, model.parameters(), coords=24,
                          rng=np.random.default_rng(3))
    assert err <= 1e-3, f"composed gradient error {err:.2e}"


def test_training_improves_heldout_elbo_on_matched_linear_task():
    task = TaskSpec(system="linear_tracking", diagonal=True, seed=21)
    trajs = generate(task, 80, 16)
    model = Vrkn(VrknConfig.for_task(task, latent_dim=8, hidden_width=24),
                 seed=20)
    trainer = Trainer(model, trajs[:64], batch_size=16, seed=1)
    hold = trajs[64:]
    before = model.eval_elbo(hold)
    window_means = []
    for _ in range(5):
        stats = trainer.run(60)
        window_means.append(np.mean([s["elbo"] for s in stats[-10:]]))
    after = model.eval_elbo(hold)
    assert after > before
    assert window_means[-1] > window_means[0]


def test_trainer_raises_on_nan():
    model = Vrkn(small_config(), seed=22)
    trajs = pendulum_trajs(n=2, T=4)
    trainer = Trainer(model, trajs, batch_size=2, seed=2)
    model.init_rho.data[:] = np.nan
    from vrkn.optim import NumericalError

    with pytest.raises(NumericalError):
        trainer.train_step()


def test_checkpoint_resume_is_bitwise_identical(tmp_path):
    task = TaskSpec(system="pendulum", seed=23)
    trajs = generate(task, 12, 8)
    model_a = Vrkn(small_config(), seed=24)
    tr_a = Trainer(model_a, trajs, batch_size=4, seed=5)
    tr_a.run(5)
    path = tmp_path / "ckpt.json"
    tr_a.save(path)
    tr_a.run(2)

    tr_b = Trainer.load(path, trajs)
    tr_b.run(2)
    pa = {p.name: p.data for p in tr_a.model.parameters()}
    pb = {p.name: p.data for p in tr_b.model.parameters()}
    for name in pa:
        assert np.array_equal(pa[name], pb[name]), name
    assert tr_a.step == tr_b.step == 7

    model_c = load_model(path)
    pc = {p.name: p.data for p in model_c.parameters()}
    tr_d = Trainer.load(path, trajs)
    for name, val in pc.items():
        assert np.array_equal(val, {p.name: p.data for p in tr_d.model.parameters()}[name])


def test_epistemic_spread_positive_with_dropout():
    model = Vrkn(small_config(dropout_rate=0.1), seed=25)
    trajs = pendulum_trajs(n=3, T=8)
    spread = epistemic_spread(model, trajs, passes=6, seed=0)
    assert spread > 0
    frozen = Vrkn(small_config(dropout_rate=0.0), seed=25)
    assert epistemic_spread(frozen, trajs, passes=3, seed=0) == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        VrknConfig(sensors=(), action_dim=1)
    with pytest.raises(ValueError):
        small_config(dropout_rate=1.0)
    with pytest.raises(ValueError):
        small_config(missing_mode="sometimes")
    with pytest.raises(ValueError):
        VrknConfig(
            sensors=(SensorConfig("a", 2, encode=False),), action_dim=1
        )
    roundtrip = VrknConfig.from_json(small_config().to_json())
    assert roundtrip == small_config()
