"""The six trainable networks and their checkpoint container.

Generators are U-shaped encoder/decoders with additive skip connections,
nearest-neighbor upsampling, spectral normalization on every convolution and
instance normalization everywhere except the output convolution. The
discriminator scores an image at three spatial scales. Q-networks merge a
convolutional image trunk with a broadcast action encoding and emit two
sigmoid-bounded heads for the double-Q clip.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import spectral_norm

from .env import IMAGE_SIZE, Action, Observation

ACTION_DIM = 4
ROLES = ("G", "F", "D_X", "D_Y", "Q_sim", "Q_real")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GeneratorConfig:
    depth: int = 4
    base_width: int = 32


@dataclass(frozen=True)
class DiscriminatorConfig:
    base_width: int = 32


@dataclass(frozen=True)
class QConfig:
    base_width: int = 32
    hidden: int = 64


def _sn_conv(cin, cout, stride=1):
    # a few power iterations per forward keep the norm estimate tight while
    # the weights move during training
    return spectral_norm(nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1),
                         n_power_iterations=3)


class UNetGenerator(nn.Module):
    """Image-to-image map with additive skips; outputs bounded in [0, 1]."""

    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        if IMAGE_SIZE // (2 ** config.depth) < 4:
            raise ValueError("depth would reduce spatial size below 4x4")
        widths = [config.base_width * 2 ** i for i in range(config.depth + 1)]
        self.stem = _sn_conv(3, widths[0])
        self.stem_norm = nn.InstanceNorm2d(widths[0], affine=True)
        self.down = nn.ModuleList()
        self.down_norm = nn.ModuleList()
        for i in range(config.depth):
            self.down.append(_sn_conv(widths[i], widths[i + 1], stride=2))
            self.down_norm.append(nn.InstanceNorm2d(widths[i + 1], affine=True))
        self.bottleneck = _sn_conv(widths[-1], widths[-1])
        self.bottleneck_norm = nn.InstanceNorm2d(widths[-1], affine=True)
        self.up = nn.ModuleList()
        self.up_norm = nn.ModuleList()
        for i in reversed(range(config.depth)):
            self.up.append(_sn_conv(widths[i + 1], widths[i]))
            self.up_norm.append(nn.InstanceNorm2d(widths[i], affine=True))
        self.out = _sn_conv(widths[0], 3)  # no instance norm on the output conv

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.stem_norm(self.stem(x)))
        skips = [h]
        for conv, norm in zip(self.down, self.down_norm):
            h = F.relu(norm(conv(h)))
            skips.append(h)
        h = F.relu(self.bottleneck_norm(self.bottleneck(h)))
        for i, (conv, norm) in enumerate(zip(self.up, self.up_norm)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.relu(norm(conv(h)) + skips[-(i + 2)])
        return torch.sigmoid(self.out(h))


class MultiScaleDiscriminator(nn.Module):
    """Scores an image at full, 1/2 and 1/4 resolution; one logit per scale."""

    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.scales = nn.ModuleList([self._subnet(config.base_width) for _ in range(3)])

    @staticmethod
    def _subnet(width):
        return nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(4 * width, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        logits = []
        for i, subnet in enumerate(self.scales):
            scaled = F.avg_pool2d(x, 2 ** i) if i else x
            logits.append(subnet(scaled))
        return torch.cat(logits, dim=1)  # (B, 3)


class QNetwork(nn.Module):
    """Image + action value estimator with two sigmoid heads in [0, 1].

    The value of a displacement depends on where the gripper and objects sit
    relative to each other, which small-kernel convolutions plus global
    pooling cannot express: two fixed coordinate channels are appended to the
    input and the merged 4x4 feature map is flattened (not pooled) into the
    head so positions survive to the linear layers.
    """

    def __init__(self, config: QConfig = QConfig()):
        super().__init__()
        w = config.base_width
        coords = torch.stack(torch.meshgrid(
            torch.linspace(0.0, 1.0, IMAGE_SIZE),
            torch.linspace(0.0, 1.0, IMAGE_SIZE), indexing="ij"))
        self.register_buffer("coords", coords[None])  # (1, 2, H, W)
        self.trunk = nn.Sequential(
            nn.Conv2d(5, w, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.merge = nn.Sequential(
            nn.Conv2d(4 * w + ACTION_DIM, 4 * w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(4 * w, 4 * w, 3, stride=2, padding=1), nn.ReLU(),
            nn.Flatten(),
            nn.Linear(4 * w * (IMAGE_SIZE // 16) ** 2, config.hidden), nn.ReLU(),
        )
        self.heads = nn.Linear(config.hidden, 2)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Image trunk output at the 8x8 merge resolution."""
        if images.dim() != 4 or images.shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"images must be (B, 3, {IMAGE_SIZE}, {IMAGE_SIZE})")
        with_coords = torch.cat(
            [images, self.coords.expand(images.shape[0], -1, -1, -1)], dim=1)
        return self.trunk(with_coords)

    def values_from_features(self, feats: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        if actions.dim() != 2 or actions.shape[1] != ACTION_DIM:
            raise ValueError("actions must be (B, %d)" % ACTION_DIM)
        tiled = actions[:, :, None, None].expand(-1, -1, feats.shape[2], feats.shape[3])
        h = self.merge(torch.cat([feats, tiled], dim=1))
        return torch.sigmoid(self.heads(h))  # (B, 2)

    def forward(self, images: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        return self.values_from_features(self.features(images), actions)


def build_generator(config: GeneratorConfig = GeneratorConfig()) -> UNetGenerator:
    return UNetGenerator(config)


def build_discriminator(config: DiscriminatorConfig = DiscriminatorConfig()) -> MultiScaleDiscriminator:
    return MultiScaleDiscriminator(config)


def build_q_network(config: QConfig = QConfig()) -> QNetwork:
    return QNetwork(config)


@dataclass
class GeneratorPair:
    G: UNetGenerator  # Sim2Real
    F: UNetGenerator  # Real2Sim


@dataclass
class DiscriminatorPair:
    D_X: MultiScaleDiscriminator  # sim-domain realism
    D_Y: MultiScaleDiscriminator  # real-domain realism


@dataclass
class QPair:
    Q_sim: QNetwork
    Q_real: QNetwork


# ---------------------------------------------------------------------------
# Tensor plumbing


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """HxWx3 float array in [0,1] -> (1, 3, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(image)).float().permute(2, 0, 1)[None]


def images_to_tensor(images) -> torch.Tensor:
    return torch.stack([image_to_tensor(im)[0] for im in images])


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy()


def q_value(net: QNetwork, image, action, head: int = 1) -> float:
    """Scalar Q-value of one (image, action) pair from head 1 or 2."""
    if head not in (1, 2):
        raise ValueError("head must be 1 or 2")
    if isinstance(image, Observation):
        image = image.image
    if isinstance(action, Action):
        action = action.as_vector()
    img = image_to_tensor(np.asarray(image))
    act = torch.as_tensor(np.asarray(action, dtype=np.float32))[None]
    with torch.no_grad():
        values = net(img, act)
    return float(values[0, head - 1])


def sample_candidate_actions(rng: np.random.Generator, count: int) -> np.ndarray:
    cands = np.empty((count, ACTION_DIM), dtype=np.float32)
    cands[:, 0:2] = rng.uniform(-1.0, 1.0, size=(count, 2))
    cands[:, 2] = rng.integers(0, 2, size=count)
    cands[:, 3] = rng.integers(0, 2, size=count)
    return cands


def argmax_policy(net: QNetwork, image, candidate_count: int = 64,
                  rng_seed: int = 0) -> Action:
    """Sampled-argmax policy: best of uniformly drawn candidate actions.

    Ties break toward the lowest sample index. Deterministic given the seed.
    """
    if candidate_count < 1:
        raise ValueError("candidate_count must be >= 1")
    if isinstance(image, Observation):
        image = image.image
    rng = np.random.default_rng(rng_seed)
    cands = sample_candidate_actions(rng, candidate_count)
    with torch.no_grad():
        feats = net.features(image_to_tensor(np.asarray(image)))
        feats = feats.expand(candidate_count, -1, -1, -1)
        values = net.values_from_features(feats, torch.from_numpy(cands))[:, 0]
    best = int(torch.argmax(values))  # argmax returns the first maximum
    dx, dy, close, term = cands[best]
    return Action(displacement=(float(dx), float(dy)),
                  close_gripper=bool(close > 0.5), terminate=bool(term > 0.5))


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, networks: dict[str, nn.Module], extra: dict | None = None) -> None:
    """Write a versioned named-tensor container; round-trips bit-exactly."""
    manifest = []
    tensors = {}
    for role, net in networks.items():
        if role not in ROLES:
            raise ValueError(f"unknown network role: {role}")
        for name, tensor in net.state_dict().items():
            key = f"{role}.{name}"
            manifest.append({"name": key, "shape": tuple(tensor.shape), "role": role})
            tensors[key] = tensor.detach().clone()
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "manifest": manifest,
        "tensors": tensors,
        "extra": extra or {},
    }, path)


def load_checkpoint(path, networks: dict[str, nn.Module]) -> dict:
    """Restore networks in place from a checkpoint; returns the extra payload."""
    blob = torch.load(path, weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {blob.get('format_version')}")
    roles_present = {entry["role"] for entry in blob["manifest"]}
    for role, net in networks.items():
        if role not in roles_present:
            raise ValueError(f"checkpoint has no parameters for role {role}")
        prefix = f"{role}."
        state = {key[len(prefix):]: tensor for key, tensor in blob["tensors"].items()
                 if key.startswith(prefix)}
        net.load_state_dict(state)
    return blob["extra"]


def checkpoint_roles(path) -> set[str]:
    blob = torch.load(path, weights_only=False)
    return {entry["role"] for entry in blob["manifest"]}


def parameter_hash(net: nn.Module) -> str:
    """Stable digest of all parameters and buffers, for frozen-ness checks."""
    import hashlib
    h = hashlib.sha256()
    for name, tensor in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def estimated_spectral_norm(weight: torch.Tensor, iters: int = 50) -> float:
    """Power-iteration estimate of the spectral norm of a conv kernel."""
    mat = weight.detach().reshape(weight.shape[0], -1).double()
    v = torch.ones(mat.shape[1], dtype=torch.float64)
    v /= v.norm()
    for _ in range(iters):
        u = mat @ v
        u /= u.norm().clamp_min(1e-12)
        v = mat.t() @ u
        v /= v.norm().clamp_min(1e-12)
    return float(u @ (mat @ v))
