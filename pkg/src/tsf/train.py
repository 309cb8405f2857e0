"""Episodic training with SGD + momentum, and the ``TSFCKPT1`` checkpoint format.

Checkpoint layout (all text lines ASCII, ``\\n`` terminated)::

    TSFCKPT1
    config <ModelConfig as compact JSON, sorted keys>
    meta <metadata JSON, sorted keys>
    fingerprint <16 hex chars>
    records <count>
    then per record, in sorted name order:
        <name> <rank> <dim_1> ... <dim_rank>
        prod(dims) float64 values, little-endian, row-major
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import DatasetBundle, evaluate_protocol, rotate_queries, sample_episode
from .model import ModelConfig, PatchProto
from .rng import stream
from .tensor import Tensor

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainSchedule:
    steps: int = 400
    lr: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 0.0
    decay_at: float = 2.0 / 3.0
    n_way: int = 5
    k_shot: int = 1
    q_per_class: int = 3
    val_every: int = 0
    val_episodes: int = 100
    val_q_per_class: int = 15


@dataclass
class CheckpointBundle:
    config: ModelConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def to_model(self) -> PatchProto:
        return PatchProto(self.config, {k: Tensor(v, requires_grad=True) for k, v in self.params.items()})

    def fingerprint(self) -> str:
        return self.to_model().fingerprint()


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["widths"] = tuple(d["widths"])
    d["global_classes"] = tuple(d["global_classes"])
    return ModelConfig(**d)


def snapshot(model: PatchProto, meta: dict | None = None) -> CheckpointBundle:
    return CheckpointBundle(model.cfg, {k: v.data.copy() for k, v in model.params.items()}, dict(meta or {}))


def save_checkpoint(ckpt: CheckpointBundle, path) -> None:
    with open(path, "wb") as fh:
        fh.write(b"TSFCKPT1\n")
        fh.write(b"config " + json.dumps(asdict(ckpt.config), sort_keys=True, separators=(",", ":")).encode() + b"\n")
        fh.write(b"meta " + json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        fh.write(f"fingerprint {ckpt.fingerprint()}\n".encode())
        fh.write(f"records {len(ckpt.params)}\n".encode())
        for name in sorted(ckpt.params):
            arr = np.asarray(ckpt.params[name], dtype="<f8")
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"{name} {arr.ndim} {dims}".rstrip().encode() + b"\n")
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> CheckpointBundle:
    with open(path, "rb") as fh:
        if fh.readline() != b"TSFCKPT1\n":
            raise CheckpointError(f"{path}: not a TSFCKPT1 file")

        def field_line(key: str) -> str:
            line = fh.readline().decode().rstrip("\n")
            tag, _, rest = line.partition(" ")
            if tag != key:
                raise CheckpointError(f"{path}: expected {key!r} line, got {tag!r}")
            return rest

        config = config_from_dict(json.loads(field_line("config")))
        meta = json.loads(field_line("meta"))
        fingerprint = field_line("fingerprint")
        params = {}
        for _ in range(int(field_line("records"))):
            head = fh.readline().decode().split()
            name, rank = head[0], int(head[1])
            dims = tuple(int(d) for d in head[2:2 + rank])
            count = int(np.prod(dims)) if dims else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise CheckpointError(f"{path}: truncated record {name}")
            params[name] = np.frombuffer(buf, dtype="<f8").reshape(dims).astype(np.float64)
    ckpt = CheckpointBundle(config, params, meta)
    if ckpt.fingerprint() != fingerprint:
        raise CheckpointError(f"{path}: fingerprint mismatch")
    return ckpt


def _finite(losses: dict[str, Tensor]) -> bool:
    return all(np.isfinite(v.data).all() for v in losses.values())


def sgd_step(model: PatchProto, episode, lr: float, velocity: dict[str, np.ndarray], momentum: float = 0.9,
             weight_decay: float = 0.0) -> dict[str, Tensor]:
    """One SGD-with-momentum update of every learnable on ``episode``; returns the pre-update losses.

    ``velocity`` is updated in place.  Weight decay skips the alphas.
    """
    for p in model.params.values():
        p.zero_grad()
    losses = model.losses(episode)
    if not _finite(losses):
        snap = {"losses": {k: v.data.tolist() for k, v in losses.items()},
                "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in model.params.items()}}
        raise TrainingDiverged("non-finite loss", snap)
    T.backward(losses["total"])
    for k, p in model.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay and not k.startswith("alpha"):
            g = g + weight_decay * p.data
        velocity[k] = momentum * velocity.get(k, 0.0) + g
        p.data = p.data - lr * velocity[k]
    return losses


def train(model: PatchProto, bundle: DatasetBundle, schedule: TrainSchedule, seed: int = 0):
    """Episodic training on the base split.  Returns ``(CheckpointBundle, log)``.

    Every learnable (backbone, neck, heads, alphas) takes an SGD-with-momentum
    step on the multi-task loss; the learning rate drops by 10x at
    ``decay_at`` of the schedule.  With a val split of at least ``n_way``
    classes and ``val_every > 0``, the best-val parameters are returned.
    """
    rng = stream(seed, "train")
    velocity = {k: np.zeros_like(p.data) for k, p in model.params.items()}
    decay_step = int(schedule.decay_at * schedule.steps)
    use_val = schedule.val_every > 0 and len(bundle.classes("val")) >= schedule.n_way
    best = (-1.0, None, -1)
    log: list[dict] = []
    for step in range(schedule.steps):
        lr = schedule.lr * (0.1 if step >= decay_step else 1.0)
        ep = sample_episode(bundle, schedule.n_way, schedule.k_shot, schedule.q_per_class, rng, split="base")
        if model.cfg.use_rotation:
            ep = rotate_queries(ep)
        try:
            losses = sgd_step(model, ep, lr, velocity, schedule.momentum, schedule.weight_decay)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"non-finite loss at step {step}", dict(exc.snapshot, step=step)) from None
        entry = {"step": step, "lr": lr}
        entry.update({k: float(v.data) for k, v in losses.items()})
        for a in ("alpha_g", "alpha_r"):
            if a in model.params:
                entry[a] = float(model.params[a].data)
        log.append(entry)
        if use_val and ((step + 1) % schedule.val_every == 0 or step + 1 == schedule.steps):
            rec = evaluate_protocol(model, bundle, schedule.val_episodes, schedule.n_way, schedule.k_shot,
                                    schedule.val_q_per_class, seed=seed, split="val")
            log.append({"step": step, "val_accuracy": rec.mean_accuracy, "val_ci95": rec.ci95})
            logger.info("step %d val accuracy %.4f", step, rec.mean_accuracy)
            if rec.mean_accuracy > best[0]:
                best = (rec.mean_accuracy, {k: p.data.copy() for k, p in model.params.items()}, step)
    if best[1] is not None:
        for k, arr in best[1].items():
            model.params[k].data = arr
    meta = {"seed": seed, "steps": schedule.steps, "best_step": best[2] if best[1] is not None else schedule.steps - 1}
    return snapshot(model, meta), log
