import numpy as np
import pytest

from rl_cyclegan import data, env
from rl_cyclegan.data import (
    REAL_OFFPOLICY,
    SIM_ONPOLICY,
    EpisodeFileError,
    ReplayBuffer,
    load_episodes,
    quantize_image,
    read_header,
    save_episodes,
    subsample_dataset,
)


@pytest.fixture(scope="module")
def sim_episodes():
    return env.collect_episodes(env.scripted_policy_fn(0.2), env.sim_style(), 10, 3)


@pytest.fixture(scope="module")
def real_episodes():
    return env.collect_episodes(env.scripted_policy_fn(0.2), env.real_style(9), 10, 4)


def test_buffer_fifo_eviction(sim_episodes):
    buf = ReplayBuffer(capacity=5, stream_label=SIM_ONPOLICY)
    pushed = []
    for ep in sim_episodes:
        buf.push(ep)
        pushed.extend(ep.transitions)
        assert len(buf) <= 5
    assert list(buf.contents) == pushed[-5:]


def test_buffer_domain_mismatch(sim_episodes):
    buf = ReplayBuffer(capacity=100, stream_label=REAL_OFFPOLICY)
    with pytest.raises(ValueError):
        buf.push(sim_episodes[0])


def test_buffer_push_then_sample_all(sim_episodes):
    buf = ReplayBuffer(capacity=1000, stream_label=SIM_ONPOLICY)
    buf.push(sim_episodes[0])
    n = len(buf)
    sampled = buf.sample(10 * n, rng_seed=0)
    assert set(map(id, sampled)) == set(map(id, buf.contents))


def test_buffer_sample_degenerate(real_episodes):
    buf = ReplayBuffer(capacity=1, stream_label=REAL_OFFPOLICY)
    buf.push(real_episodes[0])
    sampled = buf.sample(3, rng_seed=1)
    assert len(sampled) == 3
    assert all(t is sampled[0] for t in sampled)


def test_buffer_sample_deterministic(real_episodes):
    buf = ReplayBuffer(stream_label=REAL_OFFPOLICY)
    for ep in real_episodes:
        buf.push(ep)
    a = buf.sample(16, rng_seed=7)
    b = buf.sample(16, rng_seed=7)
    assert all(x is y for x, y in zip(a, b))


def test_buffer_sample_uniformity():
    """Chi-square on 1e5 draws from a 10-element buffer."""
    eps = env.collect_episodes(env.scripted_policy_fn(0.0), env.sim_style(), 8, 11)
    transitions = [t for ep in eps for t in ep.transitions][:10]
    buf = ReplayBuffer(stream_label=SIM_ONPOLICY)
    buf.contents.extend(transitions)
    sampled = buf.sample(100_000, rng_seed=13)
    counts = np.zeros(10)
    index = {id(t): i for i, t in enumerate(transitions)}
    for t in sampled:
        counts[index[id(t)]] += 1
    expected = 10_000.0
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # chi-square df=9, p > 0.001 threshold
    assert chi2 < 27.88


def test_buffer_empty_sample_rejected():
    buf = ReplayBuffer(stream_label=SIM_ONPOLICY)
    with pytest.raises(ValueError):
        buf.sample(1, rng_seed=0)


def test_save_load_round_trip(tmp_path, real_episodes):
    path = tmp_path / "eps.bin"
    save_episodes(path, real_episodes)
    header = read_header(path)
    assert header["episode_count"] == len(real_episodes)
    assert header["domain_tag"] == env.REAL
    loaded = load_episodes(path)
    assert len(loaded) == len(real_episodes)
    for orig, got in zip(real_episodes, loaded):
        assert got.success == orig.success
        assert len(got.transitions) == len(orig.transitions)
        for to, tg in zip(orig.transitions, got.transitions):
            assert np.array_equal(quantize_image(to.observation.image),
                                  quantize_image(tg.observation.image))
            assert np.array_equal(quantize_image(to.next_observation.image),
                                  quantize_image(tg.next_observation.image))
            assert tg.action.displacement == pytest.approx(to.action.displacement)
            assert tg.action.close_gripper == to.action.close_gripper
            assert tg.action.terminate == to.action.terminate
            assert tg.reward == to.reward
            assert tg.terminal == to.terminal


def test_save_load_empty(tmp_path):
    path = tmp_path / "empty.bin"
    save_episodes(path, [])
    assert read_header(path)["episode_count"] == 0
    assert load_episodes(path) == []


def test_truncated_file_rejected_with_offset(tmp_path, sim_episodes):
    path = tmp_path / "eps.bin"
    save_episodes(path, sim_episodes[:3])
    blob = path.read_bytes()
    truncated = tmp_path / "trunc.bin"
    truncated.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(EpisodeFileError, match="byte offset"):
        load_episodes(truncated)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"\x00" * 64)
    with pytest.raises(EpisodeFileError, match="magic"):
        load_episodes(path)


def test_subsample_full_is_identity(sim_episodes):
    assert subsample_dataset(sim_episodes, len(sim_episodes), 0) == list(sim_episodes)


def test_subsample_empty(sim_episodes):
    assert subsample_dataset(sim_episodes, 0, 0) == []


def test_subsample_rejects_oversize(sim_episodes):
    with pytest.raises(ValueError):
        subsample_dataset(sim_episodes, len(sim_episodes) + 1, 0)


def test_subsample_seed_sensitivity():
    eps = env.collect_episodes(env.scripted_policy_fn(0.0), env.sim_style(), 50, 21)
    a = [id(e) for e in subsample_dataset(eps, 10, rng_seed=1)]
    b = [id(e) for e in subsample_dataset(eps, 10, rng_seed=2)]
    assert a != b
    assert [id(e) for e in subsample_dataset(eps, 10, rng_seed=1)] == a
