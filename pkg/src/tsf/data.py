"""Synthetic base/val/novel datasets, episode sampling and the evaluation protocol.

Dataset file format ``TSFDS1``::

    TSFDS1 <num> <ch> <H> <W>\\n
    then, for each image in order:
        <class_id> <split>\\n
        ch*H*W float64 values, little-endian, row-major (ch, H, W)

``split`` is one of ``base``, ``val``, ``novel``.  The class catalog
(generator parameters) is not stored in the file.
"""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .rng import stream

SPLITS = ("base", "val", "novel")
FAMILIES = ("grating", "blob", "ring", "corner")


class DataConfigError(ValueError):
    pass


class SamplingError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    n_base: int = 10
    n_val: int = 0
    n_novel: int = 5
    images_per_class: int = 40
    channels: int = 1
    size: int = 32
    noise: float = 0.5
    clutter: float = 1.0
    neighbor_step: float = 0.35


@dataclass
class DatasetBundle:
    images: np.ndarray  # (num, ch, H, W) float64
    class_ids: np.ndarray  # (num,) int64
    splits: np.ndarray  # (num,) str
    class_catalog: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.images)
        if len(self.class_ids) != n or len(self.splits) != n:
            raise DataConfigError("images, class_ids and splits must have equal length")
        owner: dict[int, str] = {}
        for cid, sp in zip(self.class_ids.tolist(), self.splits.tolist()):
            if sp not in SPLITS:
                raise DataConfigError(f"unknown split {sp!r}")
            if owner.setdefault(cid, sp) != sp:
                raise DataConfigError(f"class {cid} appears in splits {owner[cid]!r} and {sp!r}")

    def classes(self, split: str) -> list[int]:
        return sorted({int(c) for c, s in zip(self.class_ids, self.splits) if s == split})

    def class_index(self, split: str) -> dict[int, np.ndarray]:
        mask = self.splits == split
        return {c: np.flatnonzero(mask & (self.class_ids == c)) for c in self.classes(split)}

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.class_ids.astype("<i8").tobytes())
        h.update("|".join(self.splits.tolist()).encode())
        return h.hexdigest()


# ---------------------------------------------------------------- generation


def _pattern(family: str, p: dict, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    if family == "grating":
        phase = 2 * np.pi * p["freq"] * (xx * np.cos(p["angle"]) + yy * np.sin(p["angle"]))
        return np.cos(phase + p["phase"])
    if family == "blob":
        d2 = (xx - p["cx"]) ** 2 + (yy - p["cy"]) ** 2
        return 2.0 * np.exp(-d2 / (2 * p["width"] ** 2)) - 0.5
    if family == "ring":
        r = np.sqrt((xx - p["cx"]) ** 2 + (yy - p["cy"]) ** 2)
        return 2.0 * np.exp(-((r - p["radius"]) ** 2) / (2 * p["width"] ** 2)) - 0.5
    if family == "corner":
        # an L-shaped bar pair meeting at (cx, cy), opening toward `quadrant`
        sx = 1 if p["quadrant"] in (0, 3) else -1
        sy = 1 if p["quadrant"] in (0, 1) else -1
        dx, dy = (xx - p["cx"]) * sx, (yy - p["cy"]) * sy
        arm = p["width"]
        h_bar = (np.abs(dy) < arm) & (dx > -arm) & (dx < p["length"])
        v_bar = (np.abs(dx) < arm) & (dy > -arm) & (dy < p["length"])
        return np.where(h_bar | v_bar, 1.5, -0.5)
    raise DataConfigError(f"unknown pattern family {family!r}")


def _random_params(family: str, rng: np.random.Generator) -> dict:
    if family == "grating":
        return {"angle": float(rng.uniform(0, np.pi)), "freq": float(rng.uniform(1.5, 4.0)),
                "phase": float(rng.uniform(0, 2 * np.pi))}
    if family == "blob":
        return {"cx": float(rng.uniform(0.25, 0.75)), "cy": float(rng.uniform(0.25, 0.75)),
                "width": float(rng.uniform(0.08, 0.18))}
    if family == "ring":
        return {"cx": float(rng.uniform(0.35, 0.65)), "cy": float(rng.uniform(0.35, 0.65)),
                "radius": float(rng.uniform(0.15, 0.3)), "width": float(rng.uniform(0.03, 0.06))}
    return {"cx": float(rng.uniform(0.25, 0.6)), "cy": float(rng.uniform(0.25, 0.6)),
            "quadrant": int(rng.integers(0, 4)), "width": float(rng.uniform(0.04, 0.07)),
            "length": float(rng.uniform(0.25, 0.4))}


def _neighbor(family: str, p: dict, step: float, rng: np.random.Generator) -> dict:
    """Perturb the shape-defining parameters by roughly ``step`` of their range."""
    q = dict(p)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    if family == "grating":
        q["angle"] = (p["angle"] + sign * step * np.pi / 2) % np.pi
        q["freq"] = float(np.clip(p["freq"] * (1 + sign * step * 0.5), 1.0, 5.0))
    elif family == "blob":
        q["width"] = float(np.clip(p["width"] * (1 + sign * step), 0.05, 0.25))
    elif family == "ring":
        q["radius"] = float(np.clip(p["radius"] + sign * step * 0.3, 0.1, 0.4))
    else:
        q["quadrant"] = (p["quadrant"] + 1) % 4
        q["length"] = float(np.clip(p["length"] * (1 + sign * step), 0.2, 0.5))
    return q


def synth_generate(config: GeneratorConfig, seed: int) -> DatasetBundle:
    """Generate a bundle of parameterised pattern classes.

    Base and val classes draw fresh parameters; each novel class is a
    parameter-space neighbour of a distinct base class.  With ``noise > 0``
    every image is its class prototype circularly shifted to a random
    position, plus ``noise`` times (Gaussian pixel noise + ``clutter`` times a
    randomly placed pattern of any family).  ``noise == 0`` disables all
    per-image variation, so every image equals its prototype.
    """
    if config.n_base < 1 or config.n_novel < 1:
        raise DataConfigError("need at least one base and one novel class")
    if config.n_novel > config.n_base:
        raise DataConfigError("each novel class needs its own base neighbour")
    if config.images_per_class < 2:
        raise DataConfigError("need at least two images per class")
    rng = stream(seed, "catalog")
    catalog: dict[int, dict] = {}
    cid = 0
    for k in range(config.n_base + config.n_val):
        family = FAMILIES[k % len(FAMILIES)]
        catalog[cid] = {"split": "base" if k < config.n_base else "val", "family": family,
                        "params": _random_params(family, rng)}
        cid += 1
    anchors = rng.permutation(config.n_base)[: config.n_novel]
    for a in anchors.tolist():
        base = catalog[a]
        catalog[cid] = {"split": "novel", "family": base["family"], "neighbor_of": a,
                        "params": _neighbor(base["family"], base["params"], config.neighbor_step, rng)}
        cid += 1

    ch, s, per = config.channels, config.size, config.images_per_class
    images = np.empty((len(catalog) * per, ch, s, s))
    ids = np.empty(len(catalog) * per, dtype=np.int64)
    splits = np.empty(len(catalog) * per, dtype=object)
    for i, (c, rec) in enumerate(catalog.items()):
        proto = _pattern(rec["family"], rec["params"], s)
        r = stream(seed, "images", c)
        for j in range(per):
            img = np.repeat(proto[None], ch, axis=0)
            if config.noise > 0:
                img = np.roll(img, tuple(r.integers(0, s, 2)), axis=(1, 2))
                fam = FAMILIES[int(r.integers(0, len(FAMILIES)))]
                clutter = np.roll(_pattern(fam, _random_params(fam, r), s), tuple(r.integers(0, s, 2)), axis=(0, 1))
                img = img + config.noise * (r.standard_normal((ch, s, s)) + config.clutter * clutter)
            images[i * per + j] = img
            ids[i * per + j] = c
            splits[i * per + j] = rec["split"]
    return DatasetBundle(images, ids, splits.astype(str), catalog)


# ---------------------------------------------------------------- file format


def write_dataset(bundle: DatasetBundle, path) -> None:
    num, ch, h, w = bundle.images.shape
    with open(path, "wb") as fh:
        fh.write(f"TSFDS1 {num} {ch} {h} {w}\n".encode("ascii"))
        for img, cid, sp in zip(bundle.images, bundle.class_ids, bundle.splits):
            fh.write(f"{int(cid)} {sp}\n".encode("ascii"))
            fh.write(np.ascontiguousarray(img, dtype="<f8").tobytes())


def read_dataset(path) -> DatasetBundle:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 5 or header[0] != "TSFDS1":
            raise DataConfigError(f"{path}: not a TSFDS1 file")
        num, ch, h, w = map(int, header[1:])
        nbytes = ch * h * w * 8
        images = np.empty((num, ch, h, w))
        ids = np.empty(num, dtype=np.int64)
        splits = []
        for i in range(num):
            cid, sp = fh.readline().decode("ascii").split()
            buf = fh.read(nbytes)
            if len(buf) != nbytes:
                raise DataConfigError(f"{path}: truncated at image {i}")
            images[i] = np.frombuffer(buf, dtype="<f8").reshape(ch, h, w)
            ids[i] = int(cid)
            splits.append(sp)
    return DatasetBundle(images, ids, np.array(splits, dtype=str), {})


# ---------------------------------------------------------------- episodes


@dataclass
class Episode:
    n_way: int
    support: np.ndarray  # (N*M, ch, H, W)
    support_labels: np.ndarray  # way labels
    query: np.ndarray
    query_labels: np.ndarray
    global_labels: np.ndarray  # original class id of each query
    support_index: np.ndarray  # bundle indices
    query_index: np.ndarray
    rotation_labels: np.ndarray | None = None


def sample_indices(index: dict[int, np.ndarray], n_way: int, k_shot: int, q_per_class: int,
                   rng: np.random.Generator):
    classes = sorted(index)
    if len(classes) < n_way:
        raise SamplingError(f"split has {len(classes)} classes, episode needs {n_way}")
    chosen = rng.choice(np.array(classes), size=n_way, replace=False)
    sup, qry, sl, ql, gl = [], [], [], [], []
    for way, c in enumerate(chosen.tolist()):
        pool = index[c]
        if len(pool) < k_shot + q_per_class:
            raise SamplingError(f"class {c} has {len(pool)} images, needs {k_shot + q_per_class}")
        pick = rng.permutation(pool)[: k_shot + q_per_class]
        sup.append(pick[:k_shot])
        qry.append(pick[k_shot:])
        sl += [way] * k_shot
        ql += [way] * q_per_class
        gl += [c] * q_per_class
    return (np.concatenate(sup), np.array(sl), np.concatenate(qry), np.array(ql), np.array(gl))


def sample_episode(bundle: DatasetBundle, n_way: int, k_shot: int, q_per_class: int,
                   rng: np.random.Generator, split: str = "novel") -> Episode:
    """Draw one N-way M-shot episode; way labels are a random bijection of classes."""
    si, sl, qi, ql, gl = sample_indices(bundle.class_index(split), n_way, k_shot, q_per_class, rng)
    return Episode(n_way, bundle.images[si], sl, bundle.images[qi], ql, gl, si, qi)


def rotate_images(images: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Clockwise rotation by quarter turns: pixel (r, c) -> (c, H-1-r) per turn."""
    if images.shape[-1] != images.shape[-2]:
        raise ProtocolError(f"rotation needs square images, got {images.shape[-2:]}")
    return np.rot90(images, k=-quarter_turns, axes=(-2, -1))


def rotate_queries(episode: Episode) -> Episode:
    """Expand queries to every 0/90/180/270 degree rotation, rotation-major order."""
    q = episode.query
    if q.shape[-1] != q.shape[-2]:
        raise ProtocolError(f"rotation needs square images, got {q.shape[-2:]}")
    m = len(q)
    return replace(
        episode,
        query=np.ascontiguousarray(np.concatenate([rotate_images(q, k) for k in range(4)])),
        query_labels=np.tile(episode.query_labels, 4),
        global_labels=np.tile(episode.global_labels, 4),
        query_index=np.tile(episode.query_index, 4),
        rotation_labels=np.repeat(np.arange(4), m),
    )


# ---------------------------------------------------------------- protocol


@dataclass(frozen=True)
class MetricsRecord:
    mean_accuracy: float
    ci95: float
    episodes: int
    config_hash: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def csv_header() -> str:
        return "mean_accuracy,ci95,episodes,config_hash"

    def to_csv_row(self) -> str:
        return f"{self.mean_accuracy!r},{self.ci95!r},{self.episodes},{self.config_hash}"


def summarize(accuracies, config_hash: str = "") -> MetricsRecord:
    """Mean and 95% half-width ``1.96 * s / sqrt(E)`` with the unbiased std."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size < 2:
        raise ProtocolError("at least two episodes are needed for a confidence interval")
    std = float(np.std(acc, ddof=1))
    return MetricsRecord(float(acc.mean()), 1.96 * std / math.sqrt(acc.size), int(acc.size), config_hash)


def evaluate_protocol(model, bundle: DatasetBundle, episodes: int = 2000, n_way: int = 5,
                      k_shot: int = 1, q_per_class: int = 15, seed: int = 0, split: str = "novel",
                      threads: int = 1) -> MetricsRecord:
    """Average accuracy and 95% interval over independently seeded episodes.

    ``model`` needs ``embed_array(images) -> ndarray`` and
    ``predict_from_embeddings(support, support_labels, query, n_way)``.  Each
    split image is embedded once (embeddings are per-image), then episode
    ``i`` is drawn from stream ``(seed, "episode", i)``, so the record does not
    depend on ``threads``.
    """
    if episodes < 2:
        raise ProtocolError("at least two episodes are needed for a confidence interval")
    index = bundle.class_index(split)
    rows = np.concatenate([index[c] for c in sorted(index)])
    emb = np.zeros((len(bundle.images),) + model.embedding_shape(bundle.images.shape[1:]))
    emb[rows] = model.embed_array(bundle.images[rows])

    def one(i: int) -> float:
        si, sl, qi, ql, _ = sample_indices(index, n_way, k_shot, q_per_class, stream(seed, "episode", i))
        pred = model.predict_from_embeddings(emb[si], sl, emb[qi], n_way)
        return float(np.mean(pred == ql))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accs = list(pool.map(one, range(episodes)))
    else:
        accs = [one(i) for i in range(episodes)]
    fp = json.dumps({"model": model.fingerprint(), "data": bundle.digest(), "episodes": episodes,
                     "n_way": n_way, "k_shot": k_shot, "q": q_per_class, "seed": seed,
                     "split": split}, sort_keys=True)
    return summarize(accs, hashlib.sha256(fp.encode()).hexdigest()[:16])
