"""Experiment runner: dataset collection, training, evaluation, and reports.

All commands are driven by one YAML config file. Exit codes: 0 on success,
2 on a config error, 3 on a runtime abort (NaN losses or mode collapse).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from . import env
from .data import load_episodes, read_header, save_episodes
from .losses import LossWeights
from .models import (
    DiscriminatorConfig,
    GeneratorConfig,
    QConfig,
    build_generator,
    build_q_network,
    checkpoint_roles,
    images_to_tensor,
    load_checkpoint,
    save_checkpoint,
    tensor_to_image,
)
from .trainer import (
    TrainConfig,
    TrainingAborted,
    q_policy_fn,
    train_phase2_qreal,
    train_q_single_stream,
    train_rl_cyclegan,
)

METHODS = ("SIM_ONLY", "REAL_ONLY", "GAN", "CYCLEGAN", "RL_CYCLEGAN")

# Reported real-robot grasp success rates that the toy trend table cites as
# reference points; REAL_ONLY has no comparable published row.
PAPER_REFERENCE = {
    "SIM_ONLY": "21",
    "REAL_ONLY": "-",
    "GAN": "29",
    "CYCLEGAN": "61",
    "RL_CYCLEGAN": "70",
}

# lambdas that must be zero for each reduced-objective method
METHOD_ZERO_LAMBDAS = {
    "GAN": ("lambda_cycle", "lambda_rl", "lambda_rl_scene"),
    "CYCLEGAN": ("lambda_rl", "lambda_rl_scene"),
    "RL_CYCLEGAN": (),
    "SIM_ONLY": (),
    "REAL_ONLY": (),
}


class ConfigError(Exception):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    method: str = "RL_CYCLEGAN"
    seed: int = 0
    run_dir: str = "runs/rl_cyclegan"

    # dataset collection
    sim_episodes: int = 200
    real_episodes: int = 200
    sim_seed: int = 1000
    real_seed: int = 2000
    scripted_noise: float = 0.3
    num_objects: int = 3
    real_texture_seed: int = 7
    real_noise_level: float = 0.03

    # training
    max_steps: int = 2000
    phase2_steps: int = 2000
    batch_sim: int = 8
    batch_real: int = 8
    learning_rate: float = 1e-4
    adam_beta1: float = 0.1
    adam_beta2: float = 0.999
    eval_every: int = 500
    refresh_every: int = 500
    refresh_episodes: int = 50
    refresh_epsilon: float = 0.0
    rl_scene_warmup: int = 0
    train_eval_episodes: int = 50
    candidate_count: int = 64
    generator_depth: int = 4
    generator_width: int = 32
    discriminator_width: int = 32
    q_width: int = 32
    q_hidden: int = 64
    lambda_gan: float = 1.0
    lambda_cycle: float = 10.0
    lambda_rl: float = 10.0
    lambda_rl_scene: float = 10.0
    lambda_rl_real: float = 0.1
    gamma: float = 0.9

    # evaluation
    eval_episodes: int = 500
    eval_seeds: tuple = (0, 1, 2)
    drift_images: int = 100

    # trend: paths to eval_report.json files of the compared methods
    trend_reports: tuple = ()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; pick one of {METHODS}")
        for name in METHOD_ZERO_LAMBDAS[self.method]:
            if getattr(self, name) != 0.0:
                raise ConfigError(
                    f"method {self.method} requires {name} = 0 "
                    f"(got {getattr(self, name)})")
        for name in ("sim_episodes", "real_episodes", "max_steps", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.sim_seed == self.real_seed:
            raise ConfigError("sim_seed and real_seed must differ so the SIM "
                              "and REAL scene-seed streams are disjoint")

    def train_config(self, seed_offset: int = 0) -> TrainConfig:
        weights = LossWeights(
            lambda_gan=self.lambda_gan, lambda_cycle=self.lambda_cycle,
            lambda_rl=self.lambda_rl, lambda_rl_scene=self.lambda_rl_scene,
            lambda_rl_real=self.lambda_rl_real, gamma=self.gamma)
        return TrainConfig(
            weights=weights, batch_sim=self.batch_sim, batch_real=self.batch_real,
            learning_rate=self.learning_rate, adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2, max_steps=self.max_steps,
            eval_every=self.eval_every, seed=self.seed + seed_offset,
            generator=GeneratorConfig(depth=self.generator_depth,
                                      base_width=self.generator_width),
            discriminator=DiscriminatorConfig(base_width=self.discriminator_width),
            q=QConfig(base_width=self.q_width, hidden=self.q_hidden),
            candidate_count=self.candidate_count,
            refresh_every=self.refresh_every,
            refresh_episodes=self.refresh_episodes,
            refresh_epsilon=self.refresh_epsilon,
            rl_scene_warmup=self.rl_scene_warmup,
            eval_episodes=self.train_eval_episodes,
            num_objects=self.num_objects)

    def real_style(self) -> env.RenderStyle:
        return env.real_style(texture_seed=self.real_texture_seed,
                              noise_level=self.real_noise_level)


def default_config_for(method: str) -> ExperimentConfig:
    config = ExperimentConfig(method=method, run_dir=f"runs/{method.lower()}")
    for name in METHOD_ZERO_LAMBDAS[method]:
        setattr(config, name, 0.0)
    return config


def config_to_yaml(config: ExperimentConfig) -> str:
    raw = asdict(config)
    raw["eval_seeds"] = list(config.eval_seeds)
    raw["trend_reports"] = list(config.trend_reports)
    return yaml.safe_dump(raw, sort_keys=False)


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config file: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a mapping")
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "eval_seeds" in raw:
        raw["eval_seeds"] = tuple(raw["eval_seeds"])
    if "trend_reports" in raw:
        raw["trend_reports"] = tuple(raw["trend_reports"])
    try:
        config = ExperimentConfig(**raw)
        config.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))
    return config


# ---------------------------------------------------------------------------
# Paths within a run directory


def run_paths(config: ExperimentConfig) -> dict[str, Path]:
    root = Path(config.run_dir)
    return {
        "root": root,
        "sim_data": root / "sim.episodes",
        "real_data": root / "real.episodes",
        "seed_manifest": root / "seed_manifest.json",
        "generator_ckpt": root / "generators.ckpt",
        "q_ckpt": root / "q.ckpt",
        "phase2_ckpt": root / "q_phase2.ckpt",
        "metrics": root / "metrics.txt",
        "phase2_metrics": root / "metrics_phase2.txt",
        "eval_report": root / "eval_report.json",
    }


def scene_seed_manifest(rng_seed: int, count: int) -> list[int]:
    """The scene seeds collect_episodes will derive from this root seed."""
    root = np.random.default_rng(rng_seed)
    seeds = []
    for _ in range(count):
        seeds.append(int(root.integers(0, 2**62)))
        root.integers(0, 2**62)  # the per-episode policy seed
    return seeds


# ---------------------------------------------------------------------------
# Commands


def cmd_print_config(args) -> int:
    config = default_config_for(args.method)
    sys.stdout.write(config_to_yaml(config))
    return 0


def cmd_collect(args) -> int:
    config = load_config(args.config)
    paths = run_paths(config)
    for key in ("sim_data", "real_data"):
        if paths[key].exists() and not args.overwrite:
            raise ConfigError(f"{paths[key]} exists; pass --overwrite to replace it")
    paths["root"].mkdir(parents=True, exist_ok=True)

    policy = env.scripted_policy_fn(config.scripted_noise)
    sim = env.collect_episodes(policy, env.sim_style(), config.sim_episodes,
                               config.sim_seed, num_objects=config.num_objects)
    real = env.collect_episodes(policy, config.real_style(), config.real_episodes,
                                config.real_seed, num_objects=config.num_objects)
    save_episodes(paths["sim_data"], sim)
    save_episodes(paths["real_data"], real)

    manifest = {
        "sim_scene_seeds": scene_seed_manifest(config.sim_seed, config.sim_episodes),
        "real_scene_seeds": scene_seed_manifest(config.real_seed, config.real_episodes),
    }
    overlap = set(manifest["sim_scene_seeds"]) & set(manifest["real_scene_seeds"])
    if overlap:
        raise ConfigError(f"SIM and REAL scene seeds overlap: {sorted(overlap)[:5]}")
    paths["seed_manifest"].write_text(json.dumps(manifest))

    print(f"collected {len(sim)} SIM episodes -> {paths['sim_data']}")
    print(f"collected {len(real)} REAL episodes -> {paths['real_data']}")
    for name in ("sim_data", "real_data"):
        header = read_header(paths[name])
        print(f"{paths[name]}: {header}")
    return 0


def _require_datasets(paths) -> tuple[list, list]:
    for key in ("sim_data", "real_data"):
        if not paths[key].exists():
            raise ConfigError(f"dataset missing: {paths[key]} (run collect first)")
    return load_episodes(paths["sim_data"]), load_episodes(paths["real_data"])


def _save_q(path, q_net, extra) -> None:
    save_checkpoint(path, {"Q_real": q_net}, extra=extra)


def cmd_train(args) -> int:
    config = load_config(args.config)
    paths = run_paths(config)
    sim, real = _require_datasets(paths)
    train_config = config.train_config()
    extra = {"method": config.method, "seed": config.seed}

    if config.method in ("SIM_ONLY", "REAL_ONLY"):
        data = sim if config.method == "SIM_ONLY" else real
        q_net, _ = train_q_single_stream(train_config, data,
                                         metrics_path=paths["metrics"])
        _save_q(paths["q_ckpt"], q_net, extra)
        print(f"trained {config.method} Q -> {paths['q_ckpt']}")
        return 0

    if config.method in ("GAN", "CYCLEGAN"):
        state = train_rl_cyclegan(train_config, sim, real,
                                  metrics_path=paths["metrics"])
        save_checkpoint(paths["generator_ckpt"],
                        {"G": state.net("G"), "F": state.net("F")}, extra=extra)
        generator = state.net("G")
        generator.eval()
        for p in generator.parameters():
            p.requires_grad_(False)
        q_config = config.train_config(seed_offset=17)
        q_net, _ = train_q_single_stream(q_config, sim, translate=generator,
                                         metrics_path=paths["phase2_metrics"])
        _save_q(paths["q_ckpt"], q_net, extra)
        print(f"trained {config.method} generators -> {paths['generator_ckpt']}")
        print(f"trained Q on translated sim -> {paths['q_ckpt']}")
        return 0

    # RL_CYCLEGAN: joint phase, then Q retrained from scratch with frozen G
    state = train_rl_cyclegan(train_config, sim, real, metrics_path=paths["metrics"])
    save_checkpoint(paths["generator_ckpt"],
                    {"G": state.net("G"), "F": state.net("F")}, extra=extra)
    _save_q(paths["q_ckpt"], state.net("Q_real"), extra)
    phase2_config = config.train_config()
    if config.phase2_steps != config.max_steps:
        from dataclasses import replace
        phase2_config = replace(phase2_config, max_steps=config.phase2_steps)
    q_phase2, _ = train_phase2_qreal(state.net("G"), phase2_config, sim, real,
                                     metrics_path=paths["phase2_metrics"])
    _save_q(paths["phase2_ckpt"], q_phase2, extra)
    print(f"joint checkpoints -> {paths['generator_ckpt']}, {paths['q_ckpt']}")
    print(f"phase-2 Q -> {paths['phase2_ckpt']}")
    return 0


def _load_q(config: ExperimentConfig, path) -> torch.nn.Module:
    if not Path(path).exists():
        raise ConfigError(f"checkpoint missing: {path}")
    roles = checkpoint_roles(path)
    if "Q_real" not in roles:
        raise ConfigError(f"{path} holds roles {sorted(roles)}, not a Q checkpoint")
    q_net = build_q_network(QConfig(base_width=config.q_width, hidden=config.q_hidden))
    extra = load_checkpoint(path, {"Q_real": q_net})
    if extra.get("method") != config.method:
        raise ConfigError(
            f"checkpoint was trained for method {extra.get('method')}, "
            f"config requests {config.method}")
    q_net.eval()
    return q_net


def _load_generators(config: ExperimentConfig, path):
    if not Path(path).exists():
        raise ConfigError(f"checkpoint missing: {path}")
    gen_config = GeneratorConfig(depth=config.generator_depth,
                                 base_width=config.generator_width)
    nets = {"G": build_generator(gen_config), "F": build_generator(gen_config)}
    load_checkpoint(path, nets)
    for net in nets.values():
        net.eval()
    return nets


def _policy_checkpoint(config: ExperimentConfig, paths) -> Path:
    if config.method == "RL_CYCLEGAN":
        return paths["phase2_ckpt"]
    return paths["q_ckpt"]


def generator_drift_stats(generator, count: int, seed: int,
                          num_objects: int = 3) -> dict:
    """Decode-based semantic drift of G on freshly generated held-out scenes."""
    rng = np.random.default_rng(seed)
    matched = deleted = added = total = 0
    within = []
    for _ in range(count):
        scene = env.generate_scene(int(rng.integers(0, 2**62)), num_objects)
        obs = env.render(scene, env.sim_style())
        with torch.no_grad():
            translated = tensor_to_image(generator(images_to_tensor([obs.image]))[0])
        m, d, a = env.drift_counts(scene, translated, tolerance_units=0.5)
        matched += m
        deleted += d
        added += a
        total += len(scene.objects)
        within.append(m / len(scene.objects))
    return {
        "images": count,
        "objects": total,
        "matched": matched,
        "deleted": deleted,
        "added": added,
        "matched_fraction": matched / total,
    }


def cmd_evaluate(args) -> int:
    config = load_config(args.config)
    paths = run_paths(config)
    ckpt = Path(args.checkpoint) if args.checkpoint else _policy_checkpoint(config, paths)
    q_net = _load_q(config, ckpt)

    style = config.real_style()
    per_seed = {}
    episode_log = []
    for seed in config.eval_seeds:
        policy = q_policy_fn(q_net, candidate_count=config.candidate_count,
                             style=style)
        episodes = env.collect_episodes(policy, style, config.eval_episodes,
                                        seed, num_objects=config.num_objects,
                                        policy_label=env.LEARNED)
        successes = sum(e.success for e in episodes)
        per_seed[str(seed)] = successes / config.eval_episodes
        episode_log.extend(episodes)

    total = len(episode_log)
    successes = sum(e.success for e in episode_log)
    report = {
        "method": config.method,
        "checkpoint": str(ckpt),
        "episode_count": total,
        "success_count": successes,
        "success_rate": successes / total,
        "per_seed": per_seed,
        "seed_list": list(config.eval_seeds),
    }
    if config.method in ("GAN", "CYCLEGAN", "RL_CYCLEGAN"):
        generators = _load_generators(config, paths["generator_ckpt"])
        report["semantic_drift"] = generator_drift_stats(
            generators["G"], config.drift_images, config.seed + 55,
            config.num_objects)
    paths["root"].mkdir(parents=True, exist_ok=True)
    paths["eval_report"].write_text(json.dumps(report, indent=2))
    print(json.dumps(report, indent=2))
    return 0


def _to_grid(rows) -> Image.Image:
    """rows: list of lists of HxWx3 float images -> one tiled PIL image."""
    tiles = [np.concatenate([np.clip(im, 0, 1) for im in row], axis=1)
             for row in rows]
    grid = (np.concatenate(tiles, axis=0) * 255).astype(np.uint8)
    return Image.fromarray(grid)


def cmd_translate(args) -> int:
    config = load_config(args.config)
    paths = run_paths(config)
    generators = _load_generators(config, args.checkpoint or paths["generator_ckpt"])
    G, F = generators["G"], generators["F"]
    episodes = load_episodes(args.episodes or paths["sim_data"])
    images = [e.transitions[0].observation.image for e in episodes[:args.rows]]
    domain = episodes[0].transitions[0].domain_tag

    first, second = (G, F) if domain == env.SIM else (F, G)
    rows = []
    stats = {"images": 0, "deleted": 0, "added": 0}
    for image in images:
        with torch.no_grad():
            translated = tensor_to_image(first(images_to_tensor([image]))[0])
            cycled = tensor_to_image(second(images_to_tensor([translated]))[0])
        rows.append([image, translated, cycled])
        try:
            original = env.decode_scene(image)
            decoded = env.decode_scene(translated)
            stats["deleted"] += max(
                0, len(original.object_centroids) - len(decoded.object_centroids))
            stats["added"] += max(
                0, len(decoded.object_centroids) - len(original.object_centroids))
        except env.UndecodableImage:
            stats["deleted"] += 1
        stats["images"] += 1

    out = Path(args.out or paths["root"] / f"translate_{domain.lower()}.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    _to_grid(rows).save(out)
    print(f"grid ({len(rows)} rows x 3 columns) -> {out}")
    print(json.dumps(stats))
    return 0


def cmd_trend(args) -> int:
    config = load_config(args.config)
    report_paths = [Path(p) for p in (args.reports or config.trend_reports)]
    if not report_paths:
        raise ConfigError("trend needs eval_report.json paths "
                          "(trend_reports in the config or --reports)")
    reports = {}
    for path in report_paths:
        if not path.exists():
            raise ConfigError(f"missing eval report: {path}")
        blob = json.loads(path.read_text())
        reports[blob["method"]] = blob
    missing = [m for m in METHODS if m not in reports and m != "REAL_ONLY"]
    if missing:
        raise ConfigError(f"trend table needs reports for: {missing}")

    print(f"{'method':<14}{'success':>10}{'episodes':>10}{'reference %':>13}")
    for method in METHODS:
        if method not in reports:
            print(f"{method:<14}{'absent':>10}{'-':>10}{PAPER_REFERENCE[method]:>13}")
            continue
        r = reports[method]
        print(f"{method:<14}{r['success_rate']:>10.3f}{r['episode_count']:>10}"
              f"{PAPER_REFERENCE[method]:>13}")
    print(f"{'RANDOMIZED_SIM':<14}{'absent':>10}{'-':>10}{'out of scope':>13}")

    rate = {m: reports[m]["success_rate"] for m in reports}
    ordered = (rate["RL_CYCLEGAN"] > rate["CYCLEGAN"] > rate["GAN"]
               >= rate["SIM_ONLY"])
    print(f"ordering RL_CYCLEGAN > CYCLEGAN > GAN >= SIM_ONLY: "
          f"{'holds' if ordered else 'VIOLATED'}")
    if not ordered:
        raise TrainingAborted("trend ordering violated")
    return 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rl-cyclegan",
        description="Sim-to-real image translation jointly trained with Q-learning "
                    "on a synthetic 2-D grasping task.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("print-config", help="emit a full default config as YAML")
    p.add_argument("--method", choices=METHODS, default="RL_CYCLEGAN")
    p.set_defaults(fn=cmd_print_config)

    p = sub.add_parser("collect", help="collect SIM and REAL scripted datasets")
    p.add_argument("--config", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(fn=cmd_collect)

    p = sub.add_parser("train", help="train the configured method")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="run the trained policy in the REAL-style env")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("translate", help="emit (x, G(x), F(G(x))) image grids")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--episodes", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--rows", type=int, default=8)
    p.set_defaults(fn=cmd_translate)

    p = sub.add_parser("trend", help="comparison table across trained methods")
    p.add_argument("--config", required=True)
    p.add_argument("--reports", nargs="*", default=None)
    p.set_defaults(fn=cmd_trend)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
