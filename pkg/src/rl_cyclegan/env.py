"""Synthetic 2-D grasping environment with two visual styles.

A scene is a bin full of procedurally generated blocky objects plus a
gripper. The same scene can be rendered in a clean "sim" style or a
perturbed "real" style (shifted palette, value-noise texture, lighting
gradient, pixel noise). Semantics (object and gripper placement) are
identical across styles, so a decoder can check that image translation
preserved them.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

IMAGE_SIZE = 64
WORKSPACE_SIZE = 16.0
PIXELS_PER_UNIT = IMAGE_SIZE / WORKSPACE_SIZE
GRASP_RADIUS = 2.0
MAX_EPISODE_LENGTH = 10
STEP_SCALE = 2.0  # workspace units moved per unit of displacement
MAX_OBJECTS = 6

SIM = "SIM"
REAL = "REAL"

SCRIPTED = "SCRIPTED"
LEARNED = "LEARNED"

SIM_PALETTE = {
    "background": (0.10, 0.10, 0.12),
    "gripper": (1.00, 1.00, 1.00),
    0: (0.90, 0.10, 0.10),
    1: (0.10, 0.80, 0.10),
    2: (0.15, 0.25, 0.90),
    3: (0.85, 0.80, 0.10),
    4: (0.80, 0.15, 0.80),
    5: (0.10, 0.80, 0.80),
}

REAL_PALETTE = {
    "background": (0.45, 0.40, 0.34),
    "gripper": (0.85, 0.88, 0.92),
    0: (0.95, 0.55, 0.15),
    1: (0.20, 0.55, 0.30),
    2: (0.50, 0.35, 0.75),
    3: (0.75, 0.65, 0.25),
    4: (0.70, 0.30, 0.45),
    5: (0.25, 0.60, 0.65),
}


class UndecodableImage(Exception):
    """Raised when no object blob can be recovered from an image."""


@dataclass(frozen=True)
class ObjectSpec:
    """One procedural object: rectangles glued around a centroid."""

    centroid: tuple[float, float]
    # each part: (offset_x, offset_y, width, height, rotation)
    parts: tuple[tuple[float, float, float, float, float], ...]
    color_index: int

    def __post_init__(self):
        if not self.parts:
            raise ValueError("object must have at least one part")


@dataclass(frozen=True)
class SceneState:
    gripper_position: tuple[float, float]
    gripper_closed: bool
    objects: tuple[ObjectSpec, ...]
    bin_bounds: tuple[float, float, float, float] = (0.0, 0.0, WORKSPACE_SIZE, WORKSPACE_SIZE)
    step_index: int = 0

    def __post_init__(self):
        x0, y0, x1, y1 = self.bin_bounds
        gx, gy = self.gripper_position
        if not (x0 <= gx <= x1 and y0 <= gy <= y1):
            raise ValueError("gripper outside bin bounds")
        if not 1 <= len(self.objects) <= MAX_OBJECTS:
            raise ValueError("object count must be in [1, %d]" % MAX_OBJECTS)
        for obj in self.objects:
            cx, cy = obj.centroid
            if not (x0 <= cx <= x1 and y0 <= cy <= y1):
                raise ValueError("object centroid outside bin bounds")
        if not 0 <= self.step_index <= MAX_EPISODE_LENGTH:
            raise ValueError("step_index out of range")


@dataclass(frozen=True)
class RenderStyle:
    style_tag: str
    texture_seed: int = 0
    lighting_direction: tuple[float, float] = (1.0, 0.0)
    lighting_strength: float = 0.0
    texture_strength: float = 0.0
    noise_level: float = 0.0
    palette: dict = field(default_factory=lambda: dict(SIM_PALETTE))

    def __post_init__(self):
        if self.style_tag not in (SIM, REAL):
            raise ValueError("style_tag must be SIM or REAL")
        if not 0.0 <= self.noise_level <= 0.1:
            raise ValueError("noise_level must be in [0, 0.1]")
        if self.style_tag == SIM and (self.noise_level != 0.0 or self.lighting_strength != 0.0):
            raise ValueError("SIM style must have zero noise and uniform lighting")
        if self.style_tag == REAL and self.noise_level <= 0.0:
            raise ValueError("REAL style must have noise_level > 0")


def sim_style() -> RenderStyle:
    return RenderStyle(style_tag=SIM)


def real_style(texture_seed: int = 0, noise_level: float = 0.03,
               lighting_strength: float = 0.25, texture_strength: float = 0.2) -> RenderStyle:
    return RenderStyle(
        style_tag=REAL,
        texture_seed=texture_seed,
        lighting_direction=(0.6, 0.8),
        lighting_strength=lighting_strength,
        texture_strength=texture_strength,
        noise_level=noise_level,
        palette=dict(REAL_PALETTE),
    )


@dataclass(frozen=True)
class Observation:
    image: np.ndarray  # HxWx3 float32 in [0, 1]
    domain_tag: str

    def __post_init__(self):
        if self.image.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise ValueError("image must be %dx%dx3" % (IMAGE_SIZE, IMAGE_SIZE))


@dataclass(frozen=True)
class Action:
    displacement: tuple[float, float]
    close_gripper: bool
    terminate: bool

    def __post_init__(self):
        dx, dy = self.displacement
        if not (-1.0 <= dx <= 1.0 and -1.0 <= dy <= 1.0):
            raise ValueError("displacement components must lie in [-1, 1]")

    def as_vector(self) -> np.ndarray:
        return np.array(
            [self.displacement[0], self.displacement[1],
             float(self.close_gripper), float(self.terminate)],
            dtype=np.float32,
        )


@dataclass(frozen=True)
class Transition:
    observation: Observation
    action: Action
    reward: float
    next_observation: Observation
    terminal: bool
    domain_tag: str

    def __post_init__(self):
        if self.reward not in (0.0, 1.0):
            raise ValueError("reward must be 0 or 1")
        if self.reward == 1.0 and not self.terminal:
            raise ValueError("reward 1 requires terminal")
        if not (self.observation.domain_tag == self.next_observation.domain_tag == self.domain_tag):
            raise ValueError("domain tags must agree")


@dataclass(frozen=True)
class Episode:
    transitions: tuple[Transition, ...]
    success: bool
    policy_label: str = SCRIPTED

    def __post_init__(self):
        n = len(self.transitions)
        if not 1 <= n <= MAX_EPISODE_LENGTH:
            raise ValueError("episode length must be in [1, %d]" % MAX_EPISODE_LENGTH)
        for i, t in enumerate(self.transitions):
            if t.terminal != (i == n - 1):
                raise ValueError("exactly the last transition must be terminal")


# ---------------------------------------------------------------------------
# Scene generation


def _object_extent(parts) -> float:
    extent = 0.0
    for ox, oy, w, h, _rot in parts:
        r = math.hypot(ox, oy) + 0.5 * math.hypot(w, h)
        extent = max(extent, r)
    return extent


def generate_scene(rng_seed: int, num_objects: int) -> SceneState:
    """Procedurally generate a scene, deterministic in the seed."""
    if not 1 <= num_objects <= MAX_OBJECTS:
        raise ValueError("num_objects must be in [1, %d]" % MAX_OBJECTS)
    rng = np.random.default_rng(rng_seed)
    # jittered 3x3 grid keeps objects well separated so their blobs never merge
    cells = [(3.0 + 5.0 * i, 3.0 + 5.0 * j) for i in range(3) for j in range(3)]
    chosen = rng.permutation(len(cells))[:num_objects]
    objects = []
    for cell_index in chosen:
        centroid = np.asarray(cells[cell_index]) + rng.uniform(-0.4, 0.4, size=2)
        num_parts = int(rng.integers(1, 4))
        parts = []
        # main part centered on the anchor, satellites touch its edge
        w0, h0 = rng.uniform(1.4, 2.2, size=2)
        parts.append([0.0, 0.0, w0, h0, float(rng.uniform(0, math.pi))])
        for _ in range(num_parts - 1):
            w, h = rng.uniform(0.6, 1.0, size=2)
            angle = float(rng.uniform(0, 2 * math.pi))
            dist = 0.5 * min(w0, h0)
            parts.append([dist * math.cos(angle), dist * math.sin(angle), w, h,
                          float(rng.uniform(0, math.pi))])
        # re-center so the area-weighted part centroid sits on the anchor
        areas = np.array([p[2] * p[3] for p in parts])
        mean_off = np.array([[p[0], p[1]] for p in parts]).T @ areas / areas.sum()
        for p in parts:
            p[0] -= mean_off[0]
            p[1] -= mean_off[1]
        objects.append(ObjectSpec(
            centroid=(float(centroid[0]), float(centroid[1])),
            parts=tuple(tuple(p) for p in parts),
            color_index=int(rng.integers(0, 6)),
        ))
    # start the gripper clear of every object so nothing is occluded at t=0
    gripper = rng.uniform(0.5, WORKSPACE_SIZE - 0.5, size=2)
    for _ in range(100):
        if all(np.linalg.norm(gripper - np.asarray(o.centroid)) >= 2.0 for o in objects):
            break
        gripper = rng.uniform(0.5, WORKSPACE_SIZE - 0.5, size=2)
    return SceneState(
        gripper_position=(float(gripper[0]), float(gripper[1])),
        gripper_closed=False,
        objects=tuple(objects),
    )


# ---------------------------------------------------------------------------
# Rendering


def _pixel_grid():
    # pixel-center coordinates in workspace units; row 0 is y=0
    coords = (np.arange(IMAGE_SIZE, dtype=np.float64) + 0.5) / PIXELS_PER_UNIT
    return np.meshgrid(coords, coords, indexing="xy")


_GRID_X, _GRID_Y = _pixel_grid()


def _object_mask(obj: ObjectSpec) -> np.ndarray:
    cx, cy = obj.centroid
    mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    for ox, oy, w, h, rot in obj.parts:
        px, py = cx + ox, cy + oy
        dx = _GRID_X - px
        dy = _GRID_Y - py
        c, s = math.cos(rot), math.sin(rot)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        mask |= (np.abs(u) <= w / 2) & (np.abs(v) <= h / 2)
    return mask


def _gripper_mask(position, closed: bool) -> np.ndarray:
    gx, gy = position
    dx = np.abs(_GRID_X - gx)
    dy = np.abs(_GRID_Y - gy)
    half = 0.55 if closed else 0.85
    thickness = 0.3
    outer = (dx <= half) & (dy <= half)
    inner = (dx <= half - thickness) & (dy <= half - thickness)
    return outer & ~inner


def _value_noise(seed: int, strength: float) -> np.ndarray:
    """Smooth multiplicative texture from a bilinearly upsampled coarse grid."""
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(-1.0, 1.0, size=(9, 9))
    ys = np.linspace(0, 8, IMAGE_SIZE)
    xs = np.linspace(0, 8, IMAGE_SIZE)
    y0 = np.floor(ys).astype(int).clip(0, 7)
    x0 = np.floor(xs).astype(int).clip(0, 7)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = coarse[np.ix_(y0, x0)]
    b = coarse[np.ix_(y0, x0 + 1)]
    c = coarse[np.ix_(y0 + 1, x0)]
    d = coarse[np.ix_(y0 + 1, x0 + 1)]
    noise = a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx
    return 1.0 + strength * noise


def _scene_digest(scene: SceneState) -> int:
    h = hashlib.sha256()
    h.update(np.array(scene.gripper_position, dtype=np.float64).tobytes())
    h.update(bytes([scene.step_index, int(scene.gripper_closed)]))
    for obj in scene.objects:
        h.update(np.array(obj.centroid, dtype=np.float64).tobytes())
        h.update(np.array(obj.parts, dtype=np.float64).tobytes())
        h.update(bytes([obj.color_index]))
    return int.from_bytes(h.digest()[:8], "little")


def render(scene: SceneState, style: RenderStyle) -> Observation:
    """Rasterize a scene under a style. Deterministic in (scene, style)."""
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float64)
    img[:] = style.palette["background"]
    for obj in scene.objects:
        img[_object_mask(obj)] = style.palette[obj.color_index]
    img[_gripper_mask(scene.gripper_position, scene.gripper_closed)] = style.palette["gripper"]

    if style.texture_strength > 0.0:
        img *= _value_noise(style.texture_seed, style.texture_strength)[:, :, None]
    if style.lighting_strength > 0.0:
        lx, ly = style.lighting_direction
        norm = math.hypot(lx, ly)
        proj = (_GRID_X * lx + _GRID_Y * ly) / (norm * WORKSPACE_SIZE)
        img *= (1.0 + style.lighting_strength * 2.0 * (proj - 0.5))[:, :, None]
    if style.noise_level > 0.0:
        rng = np.random.default_rng((style.texture_seed << 16) ^ _scene_digest(scene))
        gauss = rng.standard_normal(size=img.shape)
        img += style.noise_level * np.clip(gauss, -1.0, 1.0)

    return Observation(image=np.clip(img, 0.0, 1.0).astype(np.float32),
                       domain_tag=style.style_tag)


# ---------------------------------------------------------------------------
# Dynamics


def step(scene: SceneState, action: Action) -> tuple[SceneState, float, bool]:
    """Advance the MDP one step. Rejects stepping past the episode budget."""
    if scene.step_index >= MAX_EPISODE_LENGTH:
        raise ValueError("cannot step a terminal scene")
    dx = float(np.clip(action.displacement[0], -1.0, 1.0)) * STEP_SCALE
    dy = float(np.clip(action.displacement[1], -1.0, 1.0)) * STEP_SCALE
    x0, y0, x1, y1 = scene.bin_bounds
    gx = float(np.clip(scene.gripper_position[0] + dx, x0, x1))
    gy = float(np.clip(scene.gripper_position[1] + dy, y0, y1))
    new_scene = replace(
        scene,
        gripper_position=(gx, gy),
        gripper_closed=action.close_gripper,
        step_index=scene.step_index + 1,
    )
    near_object = any(
        math.hypot(gx - obj.centroid[0], gy - obj.centroid[1]) <= GRASP_RADIUS
        for obj in scene.objects
    )
    reward = 1.0 if (action.terminate and action.close_gripper and near_object) else 0.0
    terminal = action.terminate or new_scene.step_index >= MAX_EPISODE_LENGTH
    return new_scene, reward, terminal


def nearest_object_delta(scene: SceneState) -> np.ndarray:
    gp = np.array(scene.gripper_position)
    deltas = [np.array(obj.centroid) - gp for obj in scene.objects]
    return min(deltas, key=lambda d: float(np.linalg.norm(d)))


def scripted_policy(scene: SceneState, noise_scale: float = 0.0, rng_seed: int = 0) -> Action:
    """Move toward the nearest object; grasp when within reach."""
    if noise_scale < 0:
        raise ValueError("noise_scale must be non-negative")
    delta = nearest_object_delta(scene)
    within_reach = float(np.linalg.norm(delta)) <= GRASP_RADIUS
    move = np.zeros(2) if within_reach else delta / STEP_SCALE
    if noise_scale > 0:
        rng = np.random.default_rng(rng_seed)
        move = move + rng.uniform(-noise_scale, noise_scale, size=2)
    move = np.clip(move, -1.0, 1.0)
    return Action(displacement=(float(move[0]), float(move[1])),
                  close_gripper=within_reach, terminate=within_reach)


PolicyFn = Callable[[SceneState, int], Action]


def scripted_policy_fn(noise_scale: float = 0.0) -> PolicyFn:
    def policy(scene: SceneState, step_seed: int) -> Action:
        return scripted_policy(scene, noise_scale=noise_scale, rng_seed=step_seed)
    return policy


def run_episode(policy: PolicyFn, style: RenderStyle, scene_seed: int,
                policy_seed: int, num_objects: int = 3,
                policy_label: str = SCRIPTED) -> Episode:
    """Roll out one episode from a freshly generated scene."""
    scene = generate_scene(scene_seed, num_objects)
    transitions = []
    success = False
    seed_rng = np.random.default_rng(policy_seed)
    for _ in range(MAX_EPISODE_LENGTH):
        obs = render(scene, style)
        action = policy(scene, int(seed_rng.integers(0, 2**31)))
        scene, reward, terminal = step(scene, action)
        next_obs = render(scene, style)
        transitions.append(Transition(
            observation=obs, action=action, reward=reward,
            next_observation=next_obs, terminal=terminal,
            domain_tag=style.style_tag,
        ))
        if reward == 1.0:
            success = True
        if terminal:
            break
    return Episode(transitions=tuple(transitions), success=success,
                   policy_label=policy_label)


def collect_episodes(policy: PolicyFn, style: RenderStyle, count: int,
                     rng_seed: int, num_objects: int = 3,
                     policy_label: str = SCRIPTED) -> list[Episode]:
    """Collect episodes from independent scenes, deterministic in the seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    root = np.random.default_rng(rng_seed)
    episodes = []
    for _ in range(count):
        scene_seed = int(root.integers(0, 2**62))
        policy_seed = int(root.integers(0, 2**62))
        episodes.append(run_episode(policy, style, scene_seed, policy_seed,
                                    num_objects=num_objects,
                                    policy_label=policy_label))
    return episodes


# ---------------------------------------------------------------------------
# Semantic decoding (the evaluation oracle)


@dataclass(frozen=True)
class DecodedScene:
    object_centroids: tuple[tuple[float, float], ...]
    gripper_position: tuple[float, float] | None


def _median3(channel: np.ndarray) -> np.ndarray:
    padded = np.pad(channel, 1, mode="edge")
    stack = np.stack([padded[dy:dy + IMAGE_SIZE, dx:dx + IMAGE_SIZE]
                      for dy in range(3) for dx in range(3)])
    return np.median(stack, axis=0)


def _blob_centroids(mask: np.ndarray, min_area: int) -> list[tuple[float, float]]:
    # 4-connected flood fill; images are tiny so plain BFS is fine
    visited = np.zeros_like(mask, dtype=bool)
    centroids = []
    for sy, sx in zip(*np.nonzero(mask & ~visited)):
        if visited[sy, sx]:
            continue
        stack = [(sy, sx)]
        visited[sy, sx] = True
        pixels = []
        while stack:
            y, x = stack.pop()
            pixels.append((y, x))
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < IMAGE_SIZE and 0 <= nx < IMAGE_SIZE \
                        and mask[ny, nx] and not visited[ny, nx]:
                    visited[ny, nx] = True
                    stack.append((ny, nx))
        if len(pixels) >= min_area:
            ys = np.array([p[0] for p in pixels], dtype=np.float64)
            xs = np.array([p[1] for p in pixels], dtype=np.float64)
            # convert pixel centers back to workspace units
            centroids.append((float((xs.mean() + 0.5) / PIXELS_PER_UNIT),
                              float((ys.mean() + 0.5) / PIXELS_PER_UNIT)))
    return centroids


def decode_scene(observation: Observation | np.ndarray) -> DecodedScene:
    """Recover object centroids and gripper position from any style of render.

    Style-invariant by design: objects are the saturated blobs, the gripper is
    the bright low-saturation blob. Raises UndecodableImage when no object
    blob is found.
    """
    image = observation.image if isinstance(observation, Observation) else observation
    img = np.stack([_median3(image[:, :, c]) for c in range(3)], axis=-1)
    colorfulness = img.max(axis=-1) - img.min(axis=-1)
    luminance = img.mean(axis=-1)

    object_mask = colorfulness > 0.25
    gripper_mask = (luminance > 0.70) & (colorfulness < 0.25)

    objects = _blob_centroids(object_mask, min_area=12)
    if not objects:
        raise UndecodableImage("no object blob found")
    grippers = _blob_centroids(gripper_mask, min_area=8)
    gripper = grippers[0] if grippers else None
    return DecodedScene(object_centroids=tuple(objects), gripper_position=gripper)


def drift_counts(scene: SceneState, observation, tolerance_units: float = 0.5):
    """Compare decoded centroids against ground truth.

    Returns (matched, deleted, added); deletions are true objects with no
    decoded blob within tolerance, additions are decoded blobs matching no
    true object.
    """
    truth = [np.array(o.centroid) for o in scene.objects]
    try:
        decoded = [np.array(c) for c in decode_scene(observation).object_centroids]
    except UndecodableImage:
        return 0, len(truth), 0
    unmatched = list(range(len(decoded)))
    matched = 0
    for t in truth:
        best = None
        for i in unmatched:
            d = float(np.linalg.norm(decoded[i] - t))
            if d <= tolerance_units and (best is None or d < best[1]):
                best = (i, d)
        if best is not None:
            unmatched.remove(best[0])
            matched += 1
    deleted = len(truth) - matched
    added = len(unmatched)
    return matched, deleted, added
