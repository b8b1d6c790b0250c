import numpy as np
import pytest
import torch

from rl_cyclegan import models
from rl_cyclegan.env import Action
from rl_cyclegan.models import (
    DiscriminatorConfig,
    GeneratorConfig,
    QConfig,
    argmax_policy,
    build_discriminator,
    build_generator,
    build_q_network,
    estimated_spectral_norm,
    load_checkpoint,
    parameter_hash,
    q_value,
    save_checkpoint,
)

SMALL_GEN = GeneratorConfig(depth=3, base_width=8)
SMALL_Q = QConfig(base_width=8, hidden=16)


def analytic_generator_param_count(config: GeneratorConfig) -> int:
    """Independent parameter count from the block list."""
    def conv(cin, cout):
        return cout * cin * 9 + cout

    def norm(c):
        return 2 * c  # affine instance norm

    widths = [config.base_width * 2 ** i for i in range(config.depth + 1)]
    total = conv(3, widths[0]) + norm(widths[0])
    for i in range(config.depth):
        total += conv(widths[i], widths[i + 1]) + norm(widths[i + 1])
    total += conv(widths[-1], widths[-1]) + norm(widths[-1])
    for i in reversed(range(config.depth)):
        total += conv(widths[i + 1], widths[i]) + norm(widths[i])
    total += conv(widths[0], 3)
    return total


def test_generator_shape_and_range():
    torch.manual_seed(0)
    g = build_generator(SMALL_GEN)
    x = torch.rand(2, 3, 64, 64)
    y = g(x)
    assert y.shape == x.shape
    assert float(y.min()) >= 0.0 and float(y.max()) <= 1.0


def test_generator_param_count_pinned():
    g = build_generator()
    actual = sum(p.numel() for p in g.parameters())
    assert actual == analytic_generator_param_count(GeneratorConfig())
    assert actual == 5_500_419  # pinned for the default 4-block, width-32 config


def test_generator_param_count_small_config():
    g = build_generator(SMALL_GEN)
    assert sum(p.numel() for p in g.parameters()) == analytic_generator_param_count(SMALL_GEN)


def test_generator_rejects_excess_depth():
    with pytest.raises(ValueError):
        build_generator(GeneratorConfig(depth=5, base_width=8))


def test_generator_output_bounded_many_inputs():
    torch.manual_seed(1)
    g = build_generator(SMALL_GEN)
    for _ in range(100):
        y = g(torch.rand(1, 3, 64, 64))
        assert torch.isfinite(y).all()
        assert float(y.min()) >= 0.0 and float(y.max()) <= 1.0


def test_cycle_shape_preservation():
    torch.manual_seed(2)
    g = build_generator(SMALL_GEN)
    f = build_generator(SMALL_GEN)
    x = torch.rand(3, 3, 64, 64)
    assert f(g(x)).shape == x.shape
    assert g(f(x)).shape == x.shape


def test_generator_spectral_norm_bounded_after_updates():
    torch.manual_seed(3)
    g = build_generator(SMALL_GEN)
    # training-regime optimizer settings
    opt = torch.optim.Adam(g.parameters(), lr=1e-4, betas=(0.1, 0.999))
    x = torch.rand(2, 3, 64, 64)
    for _ in range(20):
        loss = ((g(x) - 1.0) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    g(x)  # refresh the power-iteration vectors after the last step
    for module in g.modules():
        if isinstance(module, torch.nn.Conv2d):
            assert estimated_spectral_norm(module.weight) <= 1.05


def test_discriminator_three_scales():
    torch.manual_seed(4)
    d = build_discriminator(DiscriminatorConfig(base_width=8))
    logits = d(torch.rand(2, 3, 64, 64))
    assert logits.shape == (2, 3)
    assert torch.isfinite(logits).all()


def test_discriminator_deterministic():
    torch.manual_seed(5)
    d = build_discriminator(DiscriminatorConfig(base_width=8))
    x = torch.zeros(1, 3, 64, 64)
    assert torch.equal(d(x), d(x))


def test_discriminator_scale_path_structural():
    """The scale-s logit equals feeding the downscaled image to subnet s."""
    torch.manual_seed(6)
    d = build_discriminator(DiscriminatorConfig(base_width=8))
    x = torch.rand(2, 3, 64, 64)
    logits = d(x)
    half = torch.nn.functional.avg_pool2d(x, 2)
    quarter = torch.nn.functional.avg_pool2d(x, 4)
    assert torch.equal(logits[:, 1:2], d.scales[1](half))
    assert torch.equal(logits[:, 2:3], d.scales[2](quarter))


def test_q_value_bounded_and_deterministic():
    torch.manual_seed(7)
    q = build_q_network(SMALL_Q)
    rng = np.random.default_rng(0)
    img = rng.random((64, 64, 3)).astype(np.float32)
    action = Action(displacement=(0.3, -0.2), close_gripper=True, terminate=False)
    v1 = q_value(q, img, action, head=1)
    v2 = q_value(q, img, action, head=2)
    assert 0.0 <= v1 <= 1.0 and 0.0 <= v2 <= 1.0
    assert q_value(q, img, action, head=1) == v1


def test_q_boundedness_random_pairs():
    torch.manual_seed(8)
    nets = [build_q_network(SMALL_Q), build_q_network(SMALL_Q)]
    images = torch.rand(1000, 3, 64, 64)
    actions = torch.rand(1000, 4) * 2 - 1
    with torch.no_grad():
        for net in nets:
            values = net(images, actions)
            assert float(values.min()) >= 0.0 and float(values.max()) <= 1.0


def test_q_rejects_bad_shapes():
    q = build_q_network(SMALL_Q)
    with pytest.raises(ValueError):
        q(torch.rand(2, 1, 64, 64), torch.rand(2, 4))
    with pytest.raises(ValueError):
        q(torch.rand(2, 3, 64, 64), torch.rand(2, 3))


def test_argmax_single_candidate():
    torch.manual_seed(9)
    q = build_q_network(SMALL_Q)
    img = np.zeros((64, 64, 3), dtype=np.float32)
    a = argmax_policy(q, img, candidate_count=1, rng_seed=5)
    cand = models.sample_candidate_actions(np.random.default_rng(5), 1)[0]
    assert a.as_vector() == pytest.approx(cand)


def test_argmax_tie_break_lowest_index():
    class ConstantQ(models.QNetwork):
        def values_from_features(self, feats, actions):
            return torch.full((actions.shape[0], 2), 0.5)

    q = ConstantQ(SMALL_Q)
    img = np.zeros((64, 64, 3), dtype=np.float32)
    a = argmax_policy(q, img, candidate_count=16, rng_seed=11)
    first = models.sample_candidate_actions(np.random.default_rng(11), 16)[0]
    assert a.as_vector() == pytest.approx(first)


def test_argmax_prefers_planted_maximum():
    class TerminatePreferringQ(models.QNetwork):
        def values_from_features(self, feats, actions):
            return actions[:, 3:4].repeat(1, 2) * 0.5 + 0.25

    q = TerminatePreferringQ(SMALL_Q)
    img = np.zeros((64, 64, 3), dtype=np.float32)
    for seed in range(5):
        assert argmax_policy(q, img, candidate_count=32, rng_seed=seed).terminate


def test_parameter_disjointness():
    torch.manual_seed(10)
    g = build_generator(SMALL_GEN)
    f = build_generator(SMALL_GEN)
    q_sim = build_q_network(SMALL_Q)
    q_real = build_q_network(SMALL_Q)
    ids_g = {id(p) for p in g.parameters()}
    ids_qsim = {id(p) for p in q_sim.parameters()}
    assert ids_g.isdisjoint({id(p) for p in f.parameters()})
    assert ids_qsim.isdisjoint({id(p) for p in q_real.parameters()})


def test_checkpoint_round_trip_bit_exact(tmp_path):
    torch.manual_seed(11)
    nets = {
        "G": build_generator(SMALL_GEN),
        "Q_real": build_q_network(SMALL_Q),
    }
    path = tmp_path / "ckpt.pt"
    save_checkpoint(path, nets, extra={"step": 12})
    fresh = {
        "G": build_generator(SMALL_GEN),
        "Q_real": build_q_network(SMALL_Q),
    }
    extra = load_checkpoint(path, fresh)
    assert extra == {"step": 12}
    for role in nets:
        assert parameter_hash(nets[role]) == parameter_hash(fresh[role])


def test_checkpoint_missing_role_rejected(tmp_path):
    torch.manual_seed(12)
    path = tmp_path / "ckpt.pt"
    save_checkpoint(path, {"G": build_generator(SMALL_GEN)})
    with pytest.raises(ValueError, match="Q_real"):
        load_checkpoint(path, {"Q_real": build_q_network(SMALL_Q)})


def test_checkpoint_version_check(tmp_path):
    path = tmp_path / "bad.pt"
    torch.save({"format_version": 99, "manifest": [], "tensors": {}, "extra": {}}, path)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path, {})
