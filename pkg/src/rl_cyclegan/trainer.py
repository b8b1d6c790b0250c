"""Joint translation + Q-learning training with selective gradient routing.

The joint step computes all six images {x, G(x), F(G(x)), y, F(y), G(F(y))}
and six Q-values, then applies each loss term's gradient only to the networks
it is allowed to update: adversarial terms to G/F/D, cycle and Q-consistency
terms to G/F, TD terms to the Q networks. Phase 2 freezes the Sim2Real
generator and retrains a fresh Q from scratch with the TD loss alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import env
from .data import (
    REAL_OFFPOLICY,
    SIM2REAL_ONPOLICY,
    SIM_ONPOLICY,
    ReplayBuffer,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    QTriple,
    adversarial_loss,
    clipped_q_target,
    cycle_loss,
    rl_loss,
    rl_scene_loss,
    total_objective,
)
from .models import (
    DiscriminatorConfig,
    GeneratorConfig,
    QConfig,
    argmax_policy,
    build_discriminator,
    build_generator,
    build_q_network,
    images_to_tensor,
    parameter_hash,
    sample_candidate_actions,
    tensor_to_image,
)

# which networks each loss term may update
ROUTING = {
    "gan": frozenset({"G", "F", "D_X", "D_Y"}),
    "cycle": frozenset({"G", "F"}),
    "rl": frozenset({"Q_sim", "Q_real"}),
    "rl_scene": frozenset({"G", "F"}),
}


class TrainingAborted(RuntimeError):
    """Raised on NaN losses or a persistent mode-collapse flag."""


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    batch_sim: int = 8
    batch_real: int = 8
    learning_rate: float = 1e-4
    adam_beta1: float = 0.1
    adam_beta2: float = 0.999
    max_steps: int = 2000
    eval_every: int = 500
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    q: QConfig = field(default_factory=QConfig)
    candidate_count: int = 64
    refresh_every: int = 500
    refresh_episodes: int = 200
    refresh_epsilon: float = 0.0
    rl_scene_warmup: int = 0
    eval_episodes: int = 50
    num_objects: int = 3
    collapse_q_std: float = 0.01
    collapse_rl_scene: float = 1e-3
    collapse_success_drop: float = 0.20


class MetricsWriter:
    """Append-only (step, name, value) record stream, optionally file-backed."""

    def __init__(self, path=None):
        self.records: list[tuple[int, str, float]] = []
        self._fh = open(path, "w") if path is not None else None

    def write(self, step: int, name: str, value: float) -> None:
        self.records.append((step, name, float(value)))
        if self._fh is not None:
            self._fh.write(f"{step}\t{name}\t{float(value)!r}\n")
            self._fh.flush()

    def write_breakdown(self, step: int, breakdown: LossBreakdown) -> None:
        for name, value in breakdown.as_dict().items():
            self.write(step, f"loss/{name}", value)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


@dataclass
class TrainerState:
    config: TrainConfig
    networks: dict
    optimizers: dict
    step: int = 0
    rng: np.random.Generator = None
    metrics: MetricsWriter = None
    monitors: dict = field(default_factory=dict)
    last_q_evals: dict = field(default_factory=dict)

    def net(self, role):
        return self.networks[role]


def build_trainer_state(config: TrainConfig, metrics: MetricsWriter | None = None) -> TrainerState:
    torch.manual_seed(config.seed)
    networks = {
        "G": build_generator(config.generator),
        "F": build_generator(config.generator),
        "D_X": build_discriminator(config.discriminator),
        "D_Y": build_discriminator(config.discriminator),
        "Q_sim": build_q_network(config.q),
        "Q_real": build_q_network(config.q),
    }
    optimizers = {
        role: torch.optim.Adam(net.parameters(), lr=config.learning_rate,
                               betas=(config.adam_beta1, config.adam_beta2))
        for role, net in networks.items()
    }
    return TrainerState(config=config, networks=networks, optimizers=optimizers,
                        rng=np.random.default_rng(config.seed),
                        metrics=metrics or MetricsWriter())


# ---------------------------------------------------------------------------
# Batch plumbing


def _batch_tensors(transitions):
    images = images_to_tensor([t.observation.image for t in transitions])
    next_images = images_to_tensor([t.next_observation.image for t in transitions])
    actions = torch.from_numpy(np.stack([t.action.as_vector() for t in transitions]))
    rewards = torch.tensor([t.reward for t in transitions], dtype=torch.float32)
    terminals = torch.tensor([t.terminal for t in transitions], dtype=torch.bool)
    return images, next_images, actions, rewards, terminals


def _bootstrap_values(net, next_images, candidates):
    """Per-sample next-state value heads at the sampled-argmax action."""
    with torch.no_grad():
        batch = next_images.shape[0]
        k = candidates.shape[0]
        feats = net.features(next_images)
        tiled = feats.repeat_interleave(k, dim=0)
        actions = torch.from_numpy(candidates).repeat(batch, 1)
        values = net.values_from_features(tiled, actions).reshape(batch, k, 2)
        best = values[:, :, 0].argmax(dim=1)
        picked = values[torch.arange(batch), best]  # (B, 2)
    return picked[:, 0], picked[:, 1]


def _td_terms(net, images, actions, rewards, terminals, next_images,
              candidates, gamma):
    """Per-transition squared TD errors, averaged over the two heads."""
    heads = net(images, actions)  # (B, 2)
    next_h1, next_h2 = _bootstrap_values(net, next_images, candidates)
    target = clipped_q_target(rewards, terminals, next_h1, next_h2, gamma).detach()
    return ((heads[:, 0] - target) ** 2 + (heads[:, 1] - target) ** 2) / 2.0


def _check_finite(name: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value).all():
        raise TrainingAborted(f"non-finite loss: {name}")


def _apply_gradients(state: TrainerState, loss: torch.Tensor, roles,
                     retain_graph: bool) -> None:
    """Backserve a loss into the named networks only, then step their optimizers.

    The backward pass runs through the whole graph (no stop-gradients); only
    the routed networks' parameters receive and apply the result.
    """
    params = [p for role in roles for p in state.networks[role].parameters()]
    grads = torch.autograd.grad(loss, params, retain_graph=retain_graph,
                                allow_unused=True)
    for p, g in zip(params, grads):
        p.grad = g if g is not None else None
    for role in roles:
        state.optimizers[role].step()
        state.optimizers[role].zero_grad(set_to_none=True)


def joint_train_step(state: TrainerState, sim_batch, real_batch) -> LossBreakdown:
    """One optimization step over a (sim, real) transition batch pair."""
    cfg = state.config
    w = cfg.weights
    if state.step < cfg.rl_scene_warmup:
        # the consistency pressure is only meaningful once the Q-functions
        # carry task signal; an untrained Q drags G toward images that merely
        # flatten its (noise) values, destroying scene content
        w = replace(w, lambda_rl_scene=0.0)
    for t in sim_batch:
        if t.domain_tag != env.SIM:
            raise ValueError("sim batch contains a non-SIM transition")
    for t in real_batch:
        if t.domain_tag != env.REAL:
            raise ValueError("real batch contains a non-REAL transition")

    G, F = state.net("G"), state.net("F")
    D_X, D_Y = state.net("D_X"), state.net("D_Y")
    Q_sim, Q_real = state.net("Q_sim"), state.net("Q_real")

    x, x_next, a_x, r_x, term_x = _batch_tensors(sim_batch)
    y, y_next, a_y, r_y, term_y = _batch_tensors(real_batch)

    # --- discriminator step (alternating D then G) ---
    gan_d = 0.0
    if w.lambda_gan > 0:
        with torch.no_grad():
            fake_y_d = G(x)
            fake_x_d = F(y)
        _check_finite("generator_output", fake_y_d)
        _check_finite("generator_output", fake_x_d)
        loss_d_y, _ = adversarial_loss(D_Y(y), D_Y(fake_y_d))
        loss_d_x, _ = adversarial_loss(D_X(x), D_X(fake_x_d))
        loss_d = w.lambda_gan * (loss_d_y + loss_d_x)
        _check_finite("gan_d", loss_d)
        _apply_gradients(state, loss_d, ["D_X", "D_Y"], retain_graph=False)
        gan_d = float((loss_d_y + loss_d_x).detach())

    # --- the six images ---
    need_gen = w.lambda_gan > 0 or w.lambda_cycle > 0 or w.lambda_rl_scene > 0
    need_q = w.lambda_rl > 0 or w.lambda_rl_scene > 0
    fake_y = G(x)          # G(x)
    cycled_x = F(fake_y)   # F(G(x))
    fake_x = F(y)          # F(y)
    cycled_y = G(fake_x)   # G(F(y))
    for img in (fake_y, cycled_x, fake_x, cycled_y):
        _check_finite("generator_output", img)

    gan_g = torch.tensor(0.0)
    gan_f = torch.tensor(0.0)
    if w.lambda_gan > 0:
        _, gan_g = adversarial_loss(torch.zeros(1), D_Y(fake_y))
        _, gan_f = adversarial_loss(torch.zeros(1), D_X(fake_x))
    cycle = cycle_loss(x, cycled_x, y, cycled_y) if w.lambda_cycle > 0 else torch.tensor(0.0)

    # --- the six Q-values ---
    scene = torch.tensor(0.0)
    rl_sim_terms = torch.zeros(1)
    rl_real_terms = torch.zeros(1)
    state.last_q_evals = {}
    if need_q:
        q_x = Q_sim(x, a_x)[:, 0]
        q_x_t = Q_real(fake_y, a_x)[:, 0]
        q_x_c = Q_sim(cycled_x, a_x)[:, 0]
        q_y = Q_real(y, a_y)[:, 0]
        q_y_t = Q_sim(fake_x, a_y)[:, 0]
        q_y_c = Q_real(cycled_y, a_y)[:, 0]
        state.last_q_evals = {
            "q_x": q_x.detach(), "q_x_translated": q_x_t.detach(),
            "q_x_cycled": q_x_c.detach(), "q_y": q_y.detach(),
            "q_y_translated": q_y_t.detach(), "q_y_cycled": q_y_c.detach(),
        }
        if w.lambda_rl_scene > 0:
            scene = rl_scene_loss(QTriple(q_x, q_x_t, q_x_c),
                                  QTriple(q_y, q_y_t, q_y_c))

        if w.lambda_rl > 0:
            # generators applied to both current and next image of each stream
            with torch.no_grad():
                fake_y_next = G(x_next)
                cycled_x_next = F(fake_y_next)
                fake_x_next = F(y_next)
                cycled_y_next = G(fake_x_next)
            candidates = sample_candidate_actions(state.rng, cfg.candidate_count)
            gamma = w.gamma
            sim_streams = [
                (Q_sim, x, x_next),
                (Q_sim, cycled_x, cycled_x_next),
                (Q_real, fake_y, fake_y_next),
            ]
            real_streams = [
                (Q_real, y, y_next),
                (Q_sim, fake_x, fake_x_next),
                (Q_real, cycled_y, cycled_y_next),
            ]
            rl_sim_terms = torch.cat([
                _td_terms(net, imgs, a_x, r_x, term_x, nxt, candidates, gamma)
                for net, imgs, nxt in sim_streams])
            rl_real_terms = torch.cat([
                _td_terms(net, imgs, a_y, r_y, term_y, nxt, candidates, gamma)
                for net, imgs, nxt in real_streams])

    rl = rl_loss(rl_sim_terms, rl_real_terms, w.lambda_rl_real) \
        if w.lambda_rl > 0 else torch.tensor(0.0)

    for name, value in (("gan_g", gan_g), ("gan_f", gan_f), ("cycle", cycle),
                        ("rl_scene", scene), ("rl", rl)):
        _check_finite(name, value)

    # --- selective application ---
    gen_loss = w.lambda_gan * (gan_g + gan_f) + w.lambda_cycle * cycle \
        + w.lambda_rl_scene * scene
    if need_gen and isinstance(gen_loss, torch.Tensor) and gen_loss.requires_grad:
        _apply_gradients(state, gen_loss, ["G", "F"],
                         retain_graph=w.lambda_rl > 0)
    if w.lambda_rl > 0:
        _apply_gradients(state, w.lambda_rl * rl, ["Q_sim", "Q_real"],
                         retain_graph=False)

    state.step += 1

    def scalar(v):
        return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

    breakdown = total_objective(
        scalar(gan_g), scalar(gan_f), scalar(cycle), scalar(scene),
        scalar(rl_sim_terms.mean()), scalar(rl_real_terms.mean()), w)
    state.monitors["rl_scene"] = scalar(scene)
    state.monitors["gan_d"] = gan_d
    return breakdown


# ---------------------------------------------------------------------------
# Policy rollouts


def translated_policy_fn(q_net, generator, candidate_count: int = 64):
    """Argmax policy of a Q-network applied to generator-translated frames."""
    generator.eval()

    def policy(scene, step_seed):
        obs = env.render(scene, env.sim_style())
        with torch.no_grad():
            translated = generator(images_to_tensor([obs.image]))[0]
        return argmax_policy(q_net, tensor_to_image(translated),
                             candidate_count=candidate_count, rng_seed=step_seed)

    return policy


def q_policy_fn(q_net, candidate_count: int = 64, style=None):
    """Argmax policy of a Q-network on frames rendered in the given style."""
    if style is None:
        style = env.sim_style()

    def policy(scene, step_seed):
        obs = env.render(scene, style)
        return argmax_policy(q_net, obs.image, candidate_count=candidate_count,
                             rng_seed=step_seed)

    return policy


def exploring_policy_fn(policy, epsilon: float, seed: int):
    """Epsilon-greedy wrapper: with probability epsilon take a uniform action.

    The argmax policy converges to repeating its current best guess; without
    occasional random actions the on-policy stream stops producing successful
    grasps once the policy degrades, and the TD targets lose their only
    positive examples.
    """
    if epsilon <= 0:
        return policy

    def wrapped(scene, step_seed):
        rng = np.random.default_rng((seed, step_seed))
        if rng.random() < epsilon:
            dx, dy, close, term = sample_candidate_actions(rng, 1)[0]
            return env.Action(displacement=(float(dx), float(dy)),
                              close_gripper=bool(close > 0.5),
                              terminate=bool(term > 0.5))
        return policy(scene, step_seed)

    return wrapped


def collect_onpolicy_sim(state: TrainerState, count: int, seed: int) -> list[env.Episode]:
    """Sim episodes driven by Q_real through the (snapshotted) generator G."""
    policy = translated_policy_fn(state.net("Q_real"), state.net("G"),
                                  state.config.candidate_count)
    policy = exploring_policy_fn(policy, state.config.refresh_epsilon, seed)
    episodes = env.collect_episodes(policy, env.sim_style(), count, seed,
                                    num_objects=state.config.num_objects,
                                    policy_label=env.LEARNED)
    state.net("G").train()
    return episodes


def evaluate_policy(policy, style, count: int, seed: int,
                    num_objects: int = 3) -> float:
    episodes = env.collect_episodes(policy, style, count, seed,
                                    num_objects=num_objects)
    return sum(e.success for e in episodes) / count


# ---------------------------------------------------------------------------
# Collapse monitoring


@dataclass(frozen=True)
class CollapseReport:
    q_std: float
    rl_scene: float
    uniform_q_flag: bool
    success_drop_flag: bool

    @property
    def flagged(self) -> bool:
        return self.uniform_q_flag or self.success_drop_flag


def monitor_collapse(state: TrainerState, probe_batch) -> CollapseReport:
    """Detect the uniform-Q failure mode on a probe batch."""
    if len(probe_batch) < 32:
        raise ValueError("probe batch must contain at least 32 transitions")
    if len({t.reward for t in probe_batch}) < 2:
        raise ValueError("probe batch must contain varied rewards")
    sim = [t for t in probe_batch if t.domain_tag == env.SIM]
    real = [t for t in probe_batch if t.domain_tag == env.REAL]
    G, F = state.net("G"), state.net("F")
    Q_sim, Q_real = state.net("Q_sim"), state.net("Q_real")
    with torch.no_grad():
        x, _, a_x, _, _ = _batch_tensors(sim)
        y, _, a_y, _, _ = _batch_tensors(real)
        fake_y = G(x)
        cycled_x = F(fake_y)
        fake_x = F(y)
        cycled_y = G(fake_x)
        q_x = Q_sim(x, a_x)[:, 0]
        q_x_t = Q_real(fake_y, a_x)[:, 0]
        q_x_c = Q_sim(cycled_x, a_x)[:, 0]
        q_y = Q_real(y, a_y)[:, 0]
        q_y_t = Q_sim(fake_x, a_y)[:, 0]
        q_y_c = Q_real(cycled_y, a_y)[:, 0]
        scene = float(rl_scene_loss(QTriple(q_x, q_x_t, q_x_c),
                                    QTriple(q_y, q_y_t, q_y_c)))
        std_sim = float(torch.cat([q_x, q_x_c, q_y_t]).std())
        std_real = float(torch.cat([q_y, q_x_t, q_y_c]).std())
    q_std = max(std_sim, std_real)
    uniform = q_std < state.config.collapse_q_std and scene < state.config.collapse_rl_scene
    prev = state.monitors.get("prev_eval_success")
    curr = state.monitors.get("eval_success")
    drop = (prev is not None and curr is not None
            and prev - curr > state.config.collapse_success_drop)
    return CollapseReport(q_std=q_std, rl_scene=scene,
                          uniform_q_flag=uniform, success_drop_flag=drop)


# ---------------------------------------------------------------------------
# Training loops


def _sample_batch(buffers: list[ReplayBuffer], count: int, seed: int):
    """Draw a batch split evenly across the non-empty buffers."""
    live = [b for b in buffers if len(b)]
    if not live:
        raise ValueError("all buffers are empty")
    share = count // len(live)
    batch = []
    for i, buf in enumerate(live):
        take = count - share * (len(live) - 1) if i == 0 else share
        batch.extend(buf.sample(take, rng_seed=seed + i))
    return batch


def _probe_batch(sim_buffer, real_buffer, seed: int):
    probe = sim_buffer.sample(16, rng_seed=seed) + real_buffer.sample(16, rng_seed=seed + 1)
    if len({t.reward for t in probe}) < 2:
        return None
    return probe


def train_rl_cyclegan(config: TrainConfig, sim_data, real_data,
                      metrics_path=None, q_init=None) -> TrainerState:
    """Joint phase over all six networks.

    `q_init` optionally seeds both Q-networks from a pre-trained state dict
    (e.g. a sim-only Q). The scene-consistency gradients on G and F are only
    as good as the Q-functions producing them; starting from an informative
    Q lets that term protect task content (gripper, objects) from the first
    step instead of chasing the noise of an untrained Q.
    """
    state = build_trainer_state(config, MetricsWriter(metrics_path))
    if q_init is not None:
        state.networks["Q_sim"].load_state_dict(q_init)
        state.networks["Q_real"].load_state_dict(q_init)
    sim_buffer = ReplayBuffer(stream_label=SIM_ONPOLICY)
    real_buffer = ReplayBuffer(stream_label=REAL_OFFPOLICY)
    onpolicy_buffer = ReplayBuffer(stream_label=SIM2REAL_ONPOLICY)
    for ep in sim_data:
        sim_buffer.push(ep)
    for ep in real_data:
        real_buffer.push(ep)

    # refresh, policy evaluation, and the collapse monitor exercise the Q
    # networks; skip them under reduced objectives that never train a Q
    trains_q = config.weights.lambda_rl > 0
    consecutive_flags = 0
    for step in range(config.max_steps):
        if trains_q and config.refresh_every > 0 and step > 0 \
                and step % config.refresh_every == 0:
            fresh = collect_onpolicy_sim(state, config.refresh_episodes,
                                         seed=config.seed + 7_000_000 + step)
            for ep in fresh:
                onpolicy_buffer.push(ep)
        sim_batch = _sample_batch([sim_buffer, onpolicy_buffer], config.batch_sim,
                                  seed=config.seed + 2 * step)
        real_batch = real_buffer.sample(config.batch_real,
                                        rng_seed=config.seed + 2 * step + 1)
        breakdown = joint_train_step(state, sim_batch, real_batch)
        state.metrics.write_breakdown(state.step, breakdown)

        if trains_q and config.eval_every > 0 and (step + 1) % config.eval_every == 0:
            _run_joint_eval(state)
            probe = _probe_batch(sim_buffer, real_buffer,
                                 seed=config.seed + 5_000_000 + step)
            if probe is not None:
                report = monitor_collapse(state, probe)
                state.metrics.write(state.step, "monitor/q_std", report.q_std)
                consecutive_flags = consecutive_flags + 1 if report.flagged else 0
                if consecutive_flags >= 3:
                    raise TrainingAborted("mode collapse flagged on 3 consecutive evaluations")
    state.metrics.close()
    return state


def _run_joint_eval(state: TrainerState) -> None:
    cfg = state.config
    if cfg.eval_episodes <= 0:
        return
    seed = cfg.seed + 9_000_000 + state.step
    sim_success = evaluate_policy(
        q_policy_fn(state.net("Q_sim"), cfg.candidate_count),
        env.sim_style(), cfg.eval_episodes, seed, num_objects=cfg.num_objects)
    real_success = evaluate_policy(
        translated_policy_fn(state.net("Q_real"), state.net("G"), cfg.candidate_count),
        env.sim_style(), cfg.eval_episodes, seed + 1, num_objects=cfg.num_objects)
    state.net("G").train()
    state.monitors["prev_eval_success"] = state.monitors.get("eval_success")
    state.monitors["eval_success"] = sim_success
    state.monitors["eval_success_qreal"] = real_success
    state.metrics.write(state.step, "eval/q_sim_success", sim_success)
    state.metrics.write(state.step, "eval/q_real_success", real_success)


def _q_only_step(q_net, optimizer, streams, weights: LossWeights,
                 candidate_count: int, rng) -> tuple[float, float]:
    """One TD step for a single Q-network over (transitions, translate) streams.

    The first stream is the sim-derived one, the second (optional) the real
    one, weighted by lambda_rl_real.
    """
    candidates = sample_candidate_actions(rng, candidate_count)
    term_values = []
    for transitions, translate in streams:
        images, next_images, actions, rewards, terminals = _batch_tensors(transitions)
        if translate is not None:
            with torch.no_grad():
                images = translate(images)
                next_images = translate(next_images)
        term_values.append(_td_terms(q_net, images, actions, rewards, terminals,
                                     next_images, candidates, weights.gamma))
    if len(term_values) == 1:
        loss = term_values[0].mean()
        real_mean = 0.0
    else:
        loss = rl_loss(term_values[0], term_values[1], weights.lambda_rl_real)
        real_mean = float(term_values[1].detach().mean())
    if not torch.isfinite(loss):
        raise TrainingAborted("non-finite loss: rl")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(term_values[0].detach().mean()), real_mean


def train_q_single_stream(config: TrainConfig, transitions_data, translate=None,
                          metrics_path=None, seed_offset: int = 0):
    """Train a fresh Q-network on one transition stream (optionally translated).

    For SIM-domain data the trainer periodically collects on-policy sim
    episodes with the current argmax policy (through the translator when one
    is given). Purely scripted data never contains far-from-object grasp
    attempts, so the policy's own mistakes are the only source of grounded
    negatives for the actions it prefers.
    """
    torch.manual_seed(config.seed + seed_offset)
    q_net = build_q_network(config.q)
    optimizer = torch.optim.Adam(q_net.parameters(), lr=config.learning_rate,
                                 betas=(config.adam_beta1, config.adam_beta2))
    domain = transitions_data[0].transitions[0].domain_tag
    buffer = ReplayBuffer(stream_label=SIM_ONPOLICY if domain == env.SIM
                          else REAL_OFFPOLICY)
    onpolicy_buffer = ReplayBuffer(
        stream_label=SIM2REAL_ONPOLICY if translate is not None else SIM_ONPOLICY)
    for ep in transitions_data:
        buffer.push(ep)
    metrics = MetricsWriter(metrics_path)
    rng = np.random.default_rng(config.seed + seed_offset)
    batch = config.batch_sim + config.batch_real
    refresh = config.refresh_every > 0 and domain == env.SIM
    for step in range(config.max_steps):
        if refresh and step % config.refresh_every == 0:
            if translate is not None:
                policy = translated_policy_fn(q_net, translate,
                                              config.candidate_count)
            else:
                policy = q_policy_fn(q_net, config.candidate_count)
            policy = exploring_policy_fn(
                policy, config.refresh_epsilon,
                config.seed + seed_offset + 7_000_000 + step)
            fresh = env.collect_episodes(
                policy, env.sim_style(), config.refresh_episodes,
                config.seed + seed_offset + 7_000_000 + step,
                num_objects=config.num_objects, policy_label=env.LEARNED)
            for ep in fresh:
                onpolicy_buffer.push(ep)
        transitions = _sample_batch([buffer, onpolicy_buffer], batch,
                                    seed=config.seed + seed_offset + step)
        sim_mean, _ = _q_only_step(q_net, optimizer, [(transitions, translate)],
                                   config.weights, config.candidate_count, rng)
        metrics.write(step + 1, "loss/rl_sim", sim_mean)
    metrics.close()
    return q_net, metrics


def train_phase2_qreal(generator_G, config: TrainConfig, sim_data, real_data,
                       metrics_path=None):
    """Phase 2: frozen Sim2Real generator, fresh Q trained with the TD loss only.

    Batches take equal parts simulation-to-real and real data; the real TD
    terms are weighted by lambda_rl_real.
    """
    g_hash_before = parameter_hash(generator_G)
    generator_G.eval()
    for p in generator_G.parameters():
        p.requires_grad_(False)

    torch.manual_seed(config.seed + 101)
    q_real = build_q_network(config.q)
    optimizer = torch.optim.Adam(q_real.parameters(), lr=config.learning_rate,
                                 betas=(config.adam_beta1, config.adam_beta2))
    sim_buffer = ReplayBuffer(stream_label=SIM_ONPOLICY)
    real_buffer = ReplayBuffer(stream_label=REAL_OFFPOLICY)
    onpolicy_buffer = ReplayBuffer(stream_label=SIM2REAL_ONPOLICY)
    for ep in sim_data:
        sim_buffer.push(ep)
    for ep in real_data:
        real_buffer.push(ep)

    def translate(images):
        return generator_G(images)

    metrics = MetricsWriter(metrics_path)
    rng = np.random.default_rng(config.seed + 101)
    for step in range(config.max_steps):
        if config.refresh_every > 0 and step > 0 and step % config.refresh_every == 0:
            policy = exploring_policy_fn(
                translated_policy_fn(q_real, generator_G, config.candidate_count),
                config.refresh_epsilon, config.seed + 8_000_000 + step)
            fresh = env.collect_episodes(policy, env.sim_style(),
                                         config.refresh_episodes,
                                         config.seed + 8_000_000 + step,
                                         num_objects=config.num_objects,
                                         policy_label=env.LEARNED)
            for ep in fresh:
                onpolicy_buffer.push(ep)
        sim_batch = _sample_batch([sim_buffer, onpolicy_buffer], config.batch_sim,
                                  seed=config.seed + 3 * step)
        real_batch = real_buffer.sample(config.batch_real,
                                        rng_seed=config.seed + 3 * step + 1)
        sim_mean, real_mean = _q_only_step(
            q_real, optimizer,
            [(sim_batch, translate), (real_batch, None)],
            config.weights, config.candidate_count, rng)
        metrics.write(step + 1, "loss/rl_sim", sim_mean)
        metrics.write(step + 1, "loss/rl_real", real_mean)
    metrics.close()

    if parameter_hash(generator_G) != g_hash_before:
        raise AssertionError("generator parameters changed during phase 2")
    return q_real, metrics


# ---------------------------------------------------------------------------
# Trainer checkpoints


def save_trainer_state(path, state: TrainerState) -> None:
    torch.save({
        "step": state.step,
        "networks": {role: net.state_dict() for role, net in state.networks.items()},
        "optimizers": {role: opt.state_dict() for role, opt in state.optimizers.items()},
        "monitors": state.monitors,
        "rng": state.rng.bit_generator.state,
    }, path)


def load_trainer_state(path, config: TrainConfig) -> TrainerState:
    blob = torch.load(path, weights_only=False)
    state = build_trainer_state(config)
    state.step = blob["step"]
    state.monitors = blob["monitors"]
    for role, net_state in blob["networks"].items():
        state.networks[role].load_state_dict(net_state)
    for role, opt_state in blob["optimizers"].items():
        state.optimizers[role].load_state_dict(opt_state)
    state.rng.bit_generator.state = blob["rng"]
    return state
