"""Replay buffers, binary episode serialization, and dataset subsampling."""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .env import (
    IMAGE_SIZE,
    LEARNED,
    REAL,
    SCRIPTED,
    SIM,
    Action,
    Episode,
    Observation,
    Transition,
)

FORMAT_VERSION = 1
MAGIC = b"RCG1"

REAL_OFFPOLICY = "REAL_OFFPOLICY"
SIM_ONPOLICY = "SIM_ONPOLICY"
SIM2REAL_ONPOLICY = "SIM2REAL_ONPOLICY"

STREAM_DOMAIN = {
    REAL_OFFPOLICY: REAL,
    SIM_ONPOLICY: SIM,
    SIM2REAL_ONPOLICY: SIM,
}

_DOMAIN_CODE = {SIM: 0, REAL: 1}
_DOMAIN_NAME = {v: k for k, v in _DOMAIN_CODE.items()}
_POLICY_CODE = {SCRIPTED: 0, LEARNED: 1}
_POLICY_NAME = {v: k for k, v in _POLICY_CODE.items()}


class EpisodeFileError(Exception):
    """Malformed or truncated episode file; message carries the byte offset."""


@dataclass
class ReplayBuffer:
    capacity: int = 50_000
    stream_label: str = REAL_OFFPOLICY
    contents: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.stream_label not in STREAM_DOMAIN:
            raise ValueError(f"unknown stream label: {self.stream_label}")

    def __len__(self):
        return len(self.contents)

    def push(self, episode: Episode) -> None:
        """Append an episode's transitions, evicting oldest beyond capacity."""
        expected = STREAM_DOMAIN[self.stream_label]
        for t in episode.transitions:
            if t.domain_tag != expected:
                raise ValueError(
                    f"{t.domain_tag} episode rejected by {self.stream_label} buffer")
        for t in episode.transitions:
            self.contents.append(t)
            if len(self.contents) > self.capacity:
                self.contents.popleft()

    def sample(self, count: int, rng_seed: int) -> list[Transition]:
        """Uniform with replacement; deterministic given the seed."""
        if not self.contents:
            raise ValueError("cannot sample from an empty buffer")
        rng = np.random.default_rng(rng_seed)
        indices = rng.integers(0, len(self.contents), size=count)
        items = list(self.contents)
        return [items[i] for i in indices]


def buffer_push(buffer: ReplayBuffer, episode: Episode) -> ReplayBuffer:
    buffer.push(episode)
    return buffer


def buffer_sample(buffer: ReplayBuffer, count: int, rng_seed: int) -> list[Transition]:
    return buffer.sample(count, rng_seed)


# ---------------------------------------------------------------------------
# Binary episode files
#
# Layout (all little-endian):
#   magic[4] | u32 version | u16 height | u16 width | u8 domain | u8 policy
#   | u32 episode_count
# then per episode:
#   u32 byte_length of the record that follows
#   u32 step_count | u8 success
#   step_count x ( image[h*w*3 u8] | 4 x f32 action | f32 reward | u8 terminal )
#   image[h*w*3 u8]   -- the final next-observation
# Intermediate next-observations are the following step's observation, so each
# image is stored once. Images are quantized to 8-bit.

_HEADER = struct.Struct("<4sIHHBBI")
_STEP_META = struct.Struct("<4ffB")


def quantize_image(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def dequantize_image(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float32) / 255.0)


def _encode_episode(episode: Episode) -> bytes:
    parts = [struct.pack("<IB", len(episode.transitions), int(episode.success))]
    for i, t in enumerate(episode.transitions[:-1]):
        nxt = episode.transitions[i + 1].observation
        if not np.array_equal(quantize_image(t.next_observation.image),
                              quantize_image(nxt.image)):
            raise ValueError("episode observations do not chain")
    for t in episode.transitions:
        parts.append(quantize_image(t.observation.image).tobytes())
        a = t.action
        parts.append(_STEP_META.pack(
            a.displacement[0], a.displacement[1],
            float(a.close_gripper), float(a.terminate),
            t.reward, int(t.terminal)))
    parts.append(quantize_image(episode.transitions[-1].next_observation.image).tobytes())
    return b"".join(parts)


def save_episodes(path, episodes: list[Episode]) -> None:
    if episodes:
        domain = episodes[0].transitions[0].domain_tag
        policy = episodes[0].policy_label
    else:
        domain, policy = SIM, SCRIPTED
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, IMAGE_SIZE, IMAGE_SIZE,
                              _DOMAIN_CODE[domain], _POLICY_CODE[policy],
                              len(episodes)))
        for episode in episodes:
            record = _encode_episode(episode)
            fh.write(struct.pack("<I", len(record)))
            fh.write(record)


def _read_exact(fh, size: int, what: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise EpisodeFileError(
            f"truncated {what} at byte offset {fh.tell() - len(data)}")
    return data


def load_episodes(path) -> list[Episode]:
    with open(path, "rb") as fh:
        raw = _read_exact(fh, _HEADER.size, "header")
        magic, version, height, width, domain_code, policy_code, count = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise EpisodeFileError("bad magic at byte offset 0")
        if version != FORMAT_VERSION:
            raise EpisodeFileError(f"unsupported format version {version}")
        if (height, width) != (IMAGE_SIZE, IMAGE_SIZE):
            raise EpisodeFileError(f"unexpected image size {height}x{width}")
        domain = _DOMAIN_NAME[domain_code]
        policy = _POLICY_NAME[policy_code]
        image_bytes = height * width * 3

        episodes = []
        for _ in range(count):
            (record_len,) = struct.unpack("<I", _read_exact(fh, 4, "record length"))
            record = _read_exact(fh, record_len, "episode record")
            pos = 0
            step_count, success = struct.unpack_from("<IB", record, pos)
            pos += 5
            expected = 5 + step_count * (image_bytes + _STEP_META.size) + image_bytes
            if record_len != expected:
                raise EpisodeFileError(
                    f"corrupt episode record at byte offset {fh.tell() - record_len}")
            images, metas = [], []
            for _ in range(step_count):
                img = np.frombuffer(record, dtype=np.uint8, count=image_bytes,
                                    offset=pos).reshape(height, width, 3)
                pos += image_bytes
                metas.append(_STEP_META.unpack_from(record, pos))
                pos += _STEP_META.size
                images.append(img)
            images.append(np.frombuffer(record, dtype=np.uint8, count=image_bytes,
                                        offset=pos).reshape(height, width, 3))
            transitions = []
            for i, (dx, dy, close, term, reward, terminal) in enumerate(metas):
                transitions.append(Transition(
                    observation=Observation(image=dequantize_image(images[i]),
                                            domain_tag=domain),
                    action=Action(displacement=(dx, dy),
                                  close_gripper=bool(close > 0.5),
                                  terminate=bool(term > 0.5)),
                    reward=float(reward),
                    next_observation=Observation(image=dequantize_image(images[i + 1]),
                                                 domain_tag=domain),
                    terminal=bool(terminal),
                    domain_tag=domain,
                ))
            episodes.append(Episode(transitions=tuple(transitions),
                                    success=bool(success), policy_label=policy))
        return episodes


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = _read_exact(fh, _HEADER.size, "header")
    magic, version, height, width, domain_code, policy_code, count = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise EpisodeFileError("bad magic at byte offset 0")
    return {
        "format_version": version,
        "image_height": height,
        "image_width": width,
        "domain_tag": _DOMAIN_NAME[domain_code],
        "policy_label": _POLICY_NAME[policy_code],
        "episode_count": count,
    }


def subsample_dataset(episodes: list[Episode], target_count: int,
                      rng_seed: int) -> list[Episode]:
    """Uniform subsample without replacement, original order preserved."""
    if target_count > len(episodes):
        raise ValueError("target_count exceeds available episodes")
    rng = np.random.default_rng(rng_seed)
    indices = rng.choice(len(episodes), size=target_count, replace=False)
    return [episodes[i] for i in sorted(indices)]
