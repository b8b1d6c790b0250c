"""Loss terms for jointly trained translation + Q-learning.

All functions are pure maps from network outputs to scalars and keep the
autograd graph intact, so gradient routing is decided by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

LOG_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_gan: float = 1.0
    lambda_cycle: float = 10.0
    lambda_rl: float = 10.0
    lambda_rl_scene: float = 10.0
    lambda_rl_real: float = 0.1
    gamma: float = 0.9

    def __post_init__(self):
        for name in ("lambda_gan", "lambda_cycle", "lambda_rl",
                     "lambda_rl_scene", "lambda_rl_real"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")


@dataclass(frozen=True)
class QTriple:
    """Q-values for an image, its translation, and its cycled reconstruction."""

    q_original: torch.Tensor
    q_translated: torch.Tensor
    q_cycled: torch.Tensor


@dataclass(frozen=True)
class LossBreakdown:
    gan_g: float
    gan_f: float
    cycle: float
    rl_scene: float
    rl_sim: float
    rl_real: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "gan_g": self.gan_g, "gan_f": self.gan_f, "cycle": self.cycle,
            "rl_scene": self.rl_scene, "rl_sim": self.rl_sim,
            "rl_real": self.rl_real, "total": self.total,
        }


def _as_tensor(value) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    return torch.as_tensor(value, dtype=torch.get_default_dtype())


def adversarial_loss(d_scores_real, d_scores_fake):
    """Discriminator and generator losses from per-scale logits.

    The discriminator minimizes -[log D(real) + log(1 - D(fake))]; the
    generator uses the non-saturating -log D(fake), averaged over scales.
    """
    real = _as_tensor(d_scores_real)
    fake = _as_tensor(d_scores_fake)
    if not (torch.isfinite(real).all() and torch.isfinite(fake).all()):
        raise ValueError("non-finite discriminator logits")
    p_real = torch.sigmoid(real).clamp(LOG_EPS, 1 - LOG_EPS)
    p_fake = torch.sigmoid(fake).clamp(LOG_EPS, 1 - LOG_EPS)
    loss_d = -(torch.log(p_real) + torch.log(1 - p_fake)).mean()
    loss_g = -torch.log(p_fake).mean()
    return loss_d, loss_g


def cycle_loss(x, cycled_x, y, cycled_y) -> torch.Tensor:
    """Mean-squared reconstruction error of both cycles."""
    x, cycled_x = _as_tensor(x), _as_tensor(cycled_x)
    y, cycled_y = _as_tensor(y), _as_tensor(cycled_y)
    if x.shape != cycled_x.shape or y.shape != cycled_y.shape:
        raise ValueError("cycle pairs must have matching shapes")
    return ((cycled_x - x) ** 2).mean() + ((cycled_y - y) ** 2).mean()


def clipped_q_target(reward, terminal, next_q_head1, next_q_head2, gamma):
    """Bootstrapped TD target with the double-Q clip (min over heads)."""
    reward = _as_tensor(reward)
    terminal = _as_tensor(terminal).to(torch.bool)
    next_min = torch.minimum(_as_tensor(next_q_head1), _as_tensor(next_q_head2))
    return torch.where(terminal, reward, reward + gamma * next_min)


def td_loss(q_predicted, target) -> torch.Tensor:
    """Squared TD error; no gradient flows through the target."""
    q_predicted = _as_tensor(q_predicted)
    target = _as_tensor(target).detach()
    return (q_predicted - target) ** 2


def rl_scene_loss(sim_triple: QTriple, real_triple: QTriple) -> torch.Tensor:
    """Sum of the six pairwise squared Q-value gaps, averaged over the batch."""
    total = None
    for triple in (sim_triple, real_triple):
        a, b, c = triple.q_original, triple.q_translated, triple.q_cycled
        term = ((a - b) ** 2 + (a - c) ** 2 + (b - c) ** 2)
        total = term if total is None else total + term
    return total.mean()


def rl_loss(batch_sim2real_td, batch_real_td, lambda_rl_real: float) -> torch.Tensor:
    """TD loss mixing the two data streams, real terms down/up-weighted."""
    sim = _as_tensor(batch_sim2real_td)
    real = _as_tensor(batch_real_td)
    if sim.numel() == 0 or real.numel() == 0:
        raise ValueError("both TD streams must be non-empty")
    return sim.mean() + lambda_rl_real * real.mean()


def total_objective(gan_g, gan_f, cycle, rl_scene, rl_sim, rl_real,
                    weights: LossWeights) -> LossBreakdown:
    """Weighted sum of all terms; the RL term is rl_sim + lambda_rl_real * rl_real."""
    parts = {"gan_g": gan_g, "gan_f": gan_f, "cycle": cycle,
             "rl_scene": rl_scene, "rl_sim": rl_sim, "rl_real": rl_real}
    values = {}
    for name, value in parts.items():
        value = float(value)
        if not torch.isfinite(torch.tensor(value)):
            raise ValueError(f"non-finite loss component: {name}")
        values[name] = value
    rl = values["rl_sim"] + weights.lambda_rl_real * values["rl_real"]
    total = (
        weights.lambda_gan * (values["gan_g"] + values["gan_f"])
        + weights.lambda_cycle * values["cycle"]
        + weights.lambda_rl_scene * values["rl_scene"]
        + weights.lambda_rl * rl
    )
    return LossBreakdown(total=total, **values)
