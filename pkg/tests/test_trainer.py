"""Joint training step, gradient routing, phase-2 freezing, and monitors."""

import hashlib

import numpy as np
import pytest
import torch

from rl_cyclegan import env
from rl_cyclegan.data import REAL_OFFPOLICY, SIM_ONPOLICY, ReplayBuffer
from rl_cyclegan.losses import LossWeights, total_objective
from rl_cyclegan.models import (
    DiscriminatorConfig,
    GeneratorConfig,
    QConfig,
    parameter_hash,
)
from rl_cyclegan.trainer import (
    ROUTING,
    CollapseReport,
    MetricsWriter,
    TrainConfig,
    TrainerState,
    TrainingAborted,
    build_trainer_state,
    joint_train_step,
    load_trainer_state,
    monitor_collapse,
    q_policy_fn,
    save_trainer_state,
    train_phase2_qreal,
    train_q_single_stream,
    translated_policy_fn,
)

SMALL = dict(
    batch_sim=4,
    batch_real=4,
    generator=GeneratorConfig(depth=3, base_width=8),
    discriminator=DiscriminatorConfig(base_width=8),
    q=QConfig(base_width=8, hidden=32),
    candidate_count=16,
    eval_episodes=0,
    refresh_every=0,
)


def small_config(**overrides) -> TrainConfig:
    kwargs = dict(SMALL)
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def weight_hash(net) -> str:
    """Digest over learnable parameters only.

    Spectral-norm power-iteration buffers update on any forward pass, so
    routing checks must ignore buffers: "unchanged" means no optimizer step.
    """
    h = hashlib.sha256()
    for name, p in sorted(net.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def datasets():
    sim = env.collect_episodes(env.scripted_policy_fn(0.3), env.sim_style(), 8, 1)
    real = env.collect_episodes(env.scripted_policy_fn(0.3), env.real_style(7), 8, 2)
    return sim, real


@pytest.fixture
def buffers(datasets):
    sim_eps, real_eps = datasets
    sb = ReplayBuffer(stream_label=SIM_ONPOLICY)
    rb = ReplayBuffer(stream_label=REAL_OFFPOLICY)
    for e in sim_eps:
        sb.push(e)
    for e in real_eps:
        rb.push(e)
    return sb, rb


def run_steps(config, buffers, steps=1):
    sb, rb = buffers
    state = build_trainer_state(config)
    breakdowns = []
    for i in range(steps):
        breakdowns.append(joint_train_step(
            state, sb.sample(config.batch_sim, rng_seed=i),
            rb.sample(config.batch_real, rng_seed=100 + i)))
    return state, breakdowns


def test_routing_table_contents():
    assert ROUTING["gan"] == {"G", "F", "D_X", "D_Y"}
    assert ROUTING["cycle"] == {"G", "F"}
    assert ROUTING["rl"] == {"Q_sim", "Q_real"}
    assert ROUTING["rl_scene"] == {"G", "F"}


@pytest.mark.parametrize("weights,frozen", [
    # adversarial + cycle only: Q networks must be bit-identical afterwards
    (LossWeights(lambda_gan=1.0, lambda_cycle=10.0, lambda_rl=0.0,
                 lambda_rl_scene=0.0), {"Q_sim", "Q_real"}),
    # TD only: generators and discriminators must be bit-identical
    (LossWeights(lambda_gan=0.0, lambda_cycle=0.0, lambda_rl=10.0,
                 lambda_rl_scene=0.0), {"G", "F", "D_X", "D_Y"}),
    # Q-consistency only: everything but the generators stays put
    (LossWeights(lambda_gan=0.0, lambda_cycle=0.0, lambda_rl=0.0,
                 lambda_rl_scene=10.0), {"D_X", "D_Y", "Q_sim", "Q_real"}),
])
def test_selective_routing_leaves_unrouted_weights_bit_identical(
        buffers, weights, frozen):
    config = small_config(weights=weights)
    state = build_trainer_state(config)
    before = {r: weight_hash(n) for r, n in state.networks.items()}
    sb, rb = buffers
    joint_train_step(state, sb.sample(4, rng_seed=0), rb.sample(4, rng_seed=1))
    after = {r: weight_hash(n) for r, n in state.networks.items()}
    for role in state.networks:
        if role in frozen:
            assert after[role] == before[role], f"{role} should not update"
        else:
            assert after[role] != before[role], f"{role} should update"


def test_rl_scene_warmup_freezes_generators(buffers):
    # during warmup the scene-consistency weight is held at zero, so a
    # step driven only by that term leaves G and F bit-identical; after
    # warmup the same configuration updates them
    weights = LossWeights(lambda_gan=0.0, lambda_cycle=0.0, lambda_rl=0.0,
                          lambda_rl_scene=10.0)
    sb, rb = buffers
    for warmup, expect_update in ((5, False), (0, True)):
        config = small_config(weights=weights, rl_scene_warmup=warmup)
        state = build_trainer_state(config)
        before = {r: weight_hash(state.networks[r]) for r in ("G", "F")}
        breakdown = joint_train_step(state, sb.sample(4, rng_seed=0),
                                     rb.sample(4, rng_seed=1))
        for role in ("G", "F"):
            changed = weight_hash(state.networks[role]) != before[role]
            assert changed == expect_update
        # the term is skipped entirely during warmup, computed after it
        assert (breakdown.rl_scene > 0.0) == expect_update


def test_joint_step_is_deterministic(buffers):
    _, a = run_steps(small_config(seed=3), buffers, steps=2)
    _, b = run_steps(small_config(seed=3), buffers, steps=2)
    assert [x.as_dict() for x in a] == [y.as_dict() for y in b]


def test_joint_step_seed_sensitivity(buffers):
    _, a = run_steps(small_config(seed=3), buffers, steps=1)
    _, b = run_steps(small_config(seed=4), buffers, steps=1)
    assert a[0].as_dict() != b[0].as_dict()


def test_breakdown_recomposes_from_parts(buffers):
    config = small_config()
    state, (breakdown,) = run_steps(config, buffers, steps=1)
    recomposed = total_objective(
        breakdown.gan_g, breakdown.gan_f, breakdown.cycle, breakdown.rl_scene,
        breakdown.rl_sim, breakdown.rl_real, config.weights)
    assert recomposed.total == pytest.approx(breakdown.total, rel=1e-6)


def test_six_q_streams_recorded(buffers):
    state, _ = run_steps(small_config(), buffers, steps=1)
    assert sorted(state.last_q_evals) == [
        "q_x", "q_x_cycled", "q_x_translated",
        "q_y", "q_y_cycled", "q_y_translated"]
    for value in state.last_q_evals.values():
        assert value.shape == (4,)
        assert not value.requires_grad
        assert float(value.min()) >= 0.0 and float(value.max()) <= 1.0


def test_domain_mismatch_rejected(buffers):
    sb, rb = buffers
    state = build_trainer_state(small_config())
    sim = sb.sample(4, rng_seed=0)
    real = rb.sample(4, rng_seed=1)
    with pytest.raises(ValueError):
        joint_train_step(state, real, real)
    with pytest.raises(ValueError):
        joint_train_step(state, sim, sim)


def test_losses_decrease_over_short_run(buffers):
    # cycle loss should trend down once the generators get a few steps
    state, breakdowns = run_steps(small_config(seed=0), buffers, steps=25)
    first = np.mean([b.cycle for b in breakdowns[:5]])
    last = np.mean([b.cycle for b in breakdowns[-5:]])
    assert last < first


def test_phase2_generator_bit_frozen(buffers, datasets, tmp_path):
    sim_eps, real_eps = datasets
    config = small_config(max_steps=3)
    state = build_trainer_state(config)
    generator = state.net("G")
    before = parameter_hash(generator)
    q_real, metrics = train_phase2_qreal(generator, config, sim_eps, real_eps,
                                         metrics_path=tmp_path / "m.txt")
    assert parameter_hash(generator) == before
    # the new Q actually trained and logged both streams
    names = {name for _, name, _ in metrics.records}
    assert names == {"loss/rl_sim", "loss/rl_real"}
    assert len(metrics.records) == 2 * config.max_steps


def test_single_stream_q_training_runs(datasets):
    sim_eps, _ = datasets
    config = small_config(max_steps=3)
    q_net, metrics = train_q_single_stream(config, sim_eps)
    assert len(metrics.records) == config.max_steps
    assert all(np.isfinite(v) for _, _, v in metrics.records)


def test_collapse_monitor_flags_constant_q(buffers):
    state = build_trainer_state(small_config())
    sb, rb = buffers

    class ConstantQ(torch.nn.Module):
        def forward(self, images, actions):
            return torch.full((images.shape[0], 2), 0.5)

    state.networks["Q_sim"] = ConstantQ()
    state.networks["Q_real"] = ConstantQ()
    probe = sb.sample(16, rng_seed=0) + rb.sample(16, rng_seed=1)
    report = monitor_collapse(state, probe)
    assert report.q_std == 0.0
    assert report.uniform_q_flag


def test_collapse_monitor_accepts_varied_q(buffers):
    state = build_trainer_state(small_config(collapse_q_std=1e-4))
    sb, rb = buffers
    probe = sb.sample(16, rng_seed=0) + rb.sample(16, rng_seed=1)
    report = monitor_collapse(state, probe)
    assert not report.uniform_q_flag
    assert not report.flagged


def test_collapse_monitor_flags_success_drop(buffers):
    state = build_trainer_state(small_config(collapse_q_std=1e-4))
    state.monitors["prev_eval_success"] = 0.8
    state.monitors["eval_success"] = 0.3
    sb, rb = buffers
    probe = sb.sample(16, rng_seed=0) + rb.sample(16, rng_seed=1)
    report = monitor_collapse(state, probe)
    assert report.success_drop_flag and report.flagged


def test_collapse_monitor_rejects_degenerate_probe(buffers):
    state = build_trainer_state(small_config())
    sb, rb = buffers
    probe = sb.sample(16, rng_seed=0) + rb.sample(16, rng_seed=1)
    no_reward = [t for t in probe if t.reward == 0.0][:32]
    with pytest.raises(ValueError):
        monitor_collapse(state, probe[:8])
    if len(no_reward) >= 32:
        with pytest.raises(ValueError):
            monitor_collapse(state, no_reward)


def test_nan_losses_abort(buffers):
    state = build_trainer_state(small_config())
    with torch.no_grad():
        for p in state.net("G").parameters():
            p.mul_(float("nan"))
    sb, rb = buffers
    with pytest.raises(TrainingAborted):
        joint_train_step(state, sb.sample(4, rng_seed=0), rb.sample(4, rng_seed=1))


def test_trainer_state_checkpoint_round_trip(buffers, tmp_path):
    config = small_config()
    state, _ = run_steps(config, buffers, steps=2)
    path = tmp_path / "trainer.pt"
    save_trainer_state(path, state)
    restored = load_trainer_state(path, config)
    assert restored.step == state.step
    for role in state.networks:
        assert parameter_hash(restored.networks[role]) == \
            parameter_hash(state.networks[role])
    # both copies produce the same next step
    sb, rb = buffers
    a = joint_train_step(state, sb.sample(4, rng_seed=9), rb.sample(4, rng_seed=10))
    b = joint_train_step(restored, sb.sample(4, rng_seed=9), rb.sample(4, rng_seed=10))
    assert a.as_dict() == b.as_dict()


def test_metrics_writer_file_format(tmp_path):
    path = tmp_path / "metrics.txt"
    writer = MetricsWriter(path)
    writer.write(1, "loss/total", 3.5)
    writer.write(2, "eval/success", 0.25)
    writer.close()
    lines = path.read_text().splitlines()
    assert lines[0].split("\t") == ["1", "loss/total", "3.5"]
    assert len(lines) == 2


def test_policy_fns_produce_valid_actions(buffers):
    state = build_trainer_state(small_config())
    scene = env.generate_scene(5, 3)
    direct = q_policy_fn(state.net("Q_sim"), candidate_count=8)
    translated = translated_policy_fn(state.net("Q_real"), state.net("G"),
                                      candidate_count=8)
    for policy in (direct, translated):
        action = policy(scene, 0)
        assert isinstance(action, env.Action)
        assert action.as_vector().shape == (4,)
        # deterministic in the step seed
        assert policy(scene, 0).as_vector().tolist() == action.as_vector().tolist()
