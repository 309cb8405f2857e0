"""Flat ``key = value`` run configuration shared by the CLI and the ablation bench.

Values are JSON literals (``0.5``, ``"tsf"``, ``[8, 16, 32]``, ``true``); a bare
word that is not valid JSON is read as a string.  ``#`` starts a comment.
Unknown keys are rejected so typos never silently fall back to defaults.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace

from .data import GeneratorConfig
from .model import ModelConfig
from .train import TrainSchedule


class RunConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    # dataset generator
    n_base: int = 10
    n_val: int = 0
    n_novel: int = 5
    images_per_class: int = 40
    channels: int = 1
    image_size: int = 32
    noise: float = 0.5
    clutter: float = 1.0
    neighbor_step: float = 0.35
    # model
    widths: tuple[int, ...] = (8, 16, 32)
    neck: str = "tsf"
    heads: int = 1
    n_filter: int = 5
    ffn_hidden: int | None = None
    scaled: bool = False
    temperature: float = 10.0
    lam: float = 0.5
    alpha_init: float = 1.0
    use_global: bool = True
    use_rotation: bool = True
    # optimizer / training episodes
    lr: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 0.0
    steps: int = 800
    decay_at: float = 2.0 / 3.0
    train_q_per_class: int = 3
    val_every: int = 0
    val_episodes: int = 100
    # evaluation protocol
    n_way: int = 5
    k_shot: int = 1
    q_per_class: int = 15
    episodes: int = 2000
    split: str = "novel"
    # ablation / bench / export
    ablate_axis: str = "neck_variant"
    ablate_values: tuple = ("none", "transformer", "tsf")
    ablate_seeds: tuple[int, ...] = (0, 1, 2)
    bench_h: int = 8
    bench_w: int = 8
    bench_c: int = 64
    bench_heads: tuple[int, ...] = (1,)
    bench_runs: int = 100
    export_count: int = 4
    # paths
    data: str | None = None
    ckpt: str | None = None
    out: str | None = None

    # ------------------------------------------------------------ derived configs

    def generator(self) -> GeneratorConfig:
        return GeneratorConfig(n_base=self.n_base, n_val=self.n_val, n_novel=self.n_novel,
                               images_per_class=self.images_per_class, channels=self.channels,
                               size=self.image_size, noise=self.noise, clutter=self.clutter,
                               neighbor_step=self.neighbor_step)

    def model(self, global_classes) -> ModelConfig:
        return ModelConfig(in_channels=self.channels, image_size=self.image_size, widths=tuple(self.widths),
                           neck=self.neck, heads=self.heads, n_filter=self.n_filter,
                           ffn_hidden=self.ffn_hidden, scaled=self.scaled, temperature=self.temperature,
                           lam=self.lam, alpha_init=self.alpha_init, use_global=self.use_global,
                           use_rotation=self.use_rotation,
                           global_classes=tuple(global_classes) if self.use_global else ())

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(steps=self.steps, lr=self.lr, momentum=self.momentum,
                             weight_decay=self.weight_decay, decay_at=self.decay_at, n_way=self.n_way,
                             k_shot=self.k_shot, q_per_class=self.train_q_per_class,
                             val_every=self.val_every, val_episodes=self.val_episodes,
                             val_q_per_class=self.q_per_class)

    # ------------------------------------------------------------ (de)serialization

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def dumps(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.to_dict().items())

    def merged(self, updates: dict) -> "RunConfig":
        """Copy with ``updates`` applied; unknown keys raise, list values become tuples."""
        known = {f.name for f in fields(self)}
        unknown = sorted(set(updates) - known)
        if unknown:
            raise RunConfigError(f"unknown config keys: {', '.join(unknown)}")
        clean = {k: tuple(v) if isinstance(v, list) else v for k, v in updates.items()}
        return replace(self, **clean)


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise RunConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        updates[key.strip()] = parse_value(value.strip())
    return (base or RunConfig()).merged(updates)


def _strip_comment(line: str) -> str:
    # a '#' inside a JSON string value is data, not a comment
    in_string = escaped = False
    for i, ch in enumerate(line):
        if escaped:
            escaped = False
        elif ch == "\\" and in_string:
            escaped = True
        elif ch == '"':
            in_string = not in_string
        elif ch == "#" and not in_string:
            return line[:i]
    return line


def load(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read(), base)


def dump(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.dumps())
