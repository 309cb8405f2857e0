"""PatchProto: conv backbone, optional neck, cosine metric head and auxiliary heads."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .rng import stream
from .attention import NeckVariant, init_neck, to_tokens, variant_forward
from .tensor import Tensor

EMBED_CHUNK = 64


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    image_size: int = 32
    widths: tuple[int, ...] = (8, 16, 32)
    neck: str = "tsf"
    heads: int = 1
    n_filter: int = 5
    ffn_hidden: int | None = None
    scaled: bool = False
    temperature: float = 1.0
    lam: float = 0.5
    alpha_init: float = 1.0
    use_global: bool = True
    use_rotation: bool = True
    global_classes: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not 1 <= len(self.widths) <= 4:
            raise ModelConfigError("backbone needs between 1 and 4 conv blocks")
        side = self.image_size
        for _ in self.widths:
            if side % 2:
                raise ModelConfigError(f"spatial size {side} cannot be pooled by 2")
            side //= 2
        if side < 2:
            raise ModelConfigError(f"backbone collapses {self.image_size}px input to {side}x{side}")
        if self.lam < 0:
            raise ModelConfigError("lambda must be non-negative")
        if self.use_global and not self.global_classes:
            raise ModelConfigError("global head needs the list of base class ids")

    @property
    def c(self) -> int:
        return self.widths[-1]

    @property
    def feature_side(self) -> int:
        return self.image_size >> len(self.widths)

    def neck_variant(self) -> NeckVariant:
        return NeckVariant(self.neck, self.heads, self.n_filter, self.c, self.ffn_hidden, self.scaled)


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.widths):
        params[f"backbone.{i}.w"] = _param(rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), (cout, cin, 3, 3)))
        params[f"backbone.{i}.b"] = _param(np.zeros(cout))
        cin = cout
    for k, v in init_neck(cfg.neck_variant(), rng).items():
        params[f"neck.{k}"] = v
    c = cfg.c
    if cfg.use_global:
        params["head_g.w"] = _param(rng.normal(0.0, 1.0 / np.sqrt(c), (c, len(cfg.global_classes))))
        params["head_g.b"] = _param(np.zeros(len(cfg.global_classes)))
        params["alpha_g"] = _param(np.array(cfg.alpha_init))
    if cfg.use_rotation:
        params["head_r.w"] = _param(rng.normal(0.0, 1.0 / np.sqrt(c), (c, 4)))
        params["head_r.b"] = _param(np.zeros(4))
        params["alpha_r"] = _param(np.array(cfg.alpha_init))
    return params


def backbone_forward(cfg: ModelConfig, params: dict[str, Tensor], x: Tensor) -> Tensor:
    for i in range(len(cfg.widths)):
        x = T.max_pool2d(T.relu(T.conv2d(x, params[f"backbone.{i}.w"], params[f"backbone.{i}.b"])))
    return x


def neck_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k[5:]: v for k, v in params.items() if k.startswith("neck.")}


# ---------------------------------------------------------------- heads and losses


def build_prototypes(support: Tensor, way_labels, n_way: int) -> Tensor:
    """Per-way arithmetic mean of support embeddings: (m_s, ...) -> (N, ...)."""
    way_labels = np.asarray(way_labels)
    counts = np.bincount(way_labels, minlength=n_way)
    if len(counts) > n_way or np.any(counts[:n_way] == 0):
        raise T.ContractError(f"every way needs at least one support sample, counts={counts.tolist()}")
    avg = np.zeros((n_way, len(way_labels)))
    avg[way_labels, np.arange(len(way_labels))] = 1.0
    avg /= counts[:, None]
    flat = support.reshape(len(way_labels), -1)
    return T.matmul(Tensor._wrap(avg), flat).reshape((n_way,) + support.shape[1:])


def metric_logits(qfeat: Tensor, protos: Tensor, temperature: float = 1.0) -> Tensor:
    """``temperature * cos(Q_m, GAP(P_k))`` for every position: (..., hw, N)."""
    q = T.l2_normalize(to_tokens(qfeat))
    p = T.l2_normalize(T.global_avg_pool(protos))
    return T.scale(T.matmul(q, p.T), temperature)


def metric_predict(qfeat: Tensor, protos: Tensor, temperature: float = 1.0) -> Tensor:
    return T.softmax_rows(metric_logits(qfeat, protos, temperature))


def _reduce(total: Tensor, n_queries: int, reduction: str) -> Tensor:
    if reduction == "sum":
        return total
    if reduction == "per_query":
        return T.scale(total, 1.0 / n_queries)
    raise ValueError(f"unknown reduction {reduction!r}")


def metric_loss(predictions: Tensor, labels, reduction: str = "per_query") -> Tensor:
    """``-sum_queries sum_positions log p(y = label)``; ``per_query`` divides by the query count.

    ``predictions``: (hw, N) for one query or (Q, hw, N).
    """
    labels = np.atleast_1d(np.asarray(labels))
    if predictions.ndim == 2:
        predictions = predictions.reshape((1,) + predictions.shape)
    nq, hw, _ = predictions.shape
    if len(labels) != nq:
        raise T.ContractError(f"{len(labels)} labels for {nq} queries")
    idx = np.repeat(labels[:, None], hw, axis=1)
    picked = T.gather_last(T.log(predictions), idx)
    return _reduce(T.scale(T.sum_(picked), -1.0), nq, reduction)


def patch_ce_loss(qfeat: Tensor, weight: Tensor, bias: Tensor, labels, num_classes: int,
                  reduction: str = "per_query") -> Tensor:
    """Patch-wise cross-entropy of a linear head applied at every position."""
    labels = np.atleast_1d(np.asarray(labels))
    if weight.shape[-1] != num_classes:
        raise T.ShapeError(f"head has {weight.shape[-1]} outputs, expected {num_classes}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise T.ContractError(f"label out of range for {num_classes} classes")
    tok = to_tokens(qfeat)
    if tok.ndim == 2:
        tok = tok.reshape((1,) + tok.shape)
    nq, hw, _ = tok.shape
    logits = T.matmul(tok, weight) + bias
    total = T.cross_entropy(logits, np.repeat(labels[:, None], hw, axis=1), reduction="sum")
    return _reduce(total, nq, reduction)


def aux_coefficient(lam: float, alpha: Tensor) -> Tensor:
    """``lambda + 1 / (2 alpha^2)``."""
    w = T.div(0.5, T.mul(alpha, alpha))
    return T.add(lam, w)


def multitask_loss(l_m: Tensor, l_g: Tensor | None, l_r: Tensor | None, lam: float,
                   alpha_g: Tensor | None = None, alpha_r: Tensor | None = None) -> Tensor:
    """``L_M/2 + sum_j [(lam + w_j) L_j + log(1 / (lam + w_j))]`` over enabled heads."""
    total = T.scale(l_m, 0.5)
    for lj, alpha in ((l_g, alpha_g), (l_r, alpha_r)):
        if lj is None:
            continue
        coef = aux_coefficient(lam, alpha)
        if not np.all(coef.data > 0):
            raise T.ContractError("auxiliary coefficient must be positive")
        total = total + T.mul(coef, lj) - T.log(coef)
    return total


# ---------------------------------------------------------------- model


class PatchProto:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.variant = cfg.neck_variant()
        self.params = params if params is not None else init_params(cfg, stream(seed, "init"))
        self._gindex = {c: i for i, c in enumerate(cfg.global_classes)}

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(asdict(self.cfg), sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()[:16]

    def backbone(self, x: Tensor) -> Tensor:
        return backbone_forward(self.cfg, self.params, x)

    def neck(self, f: Tensor) -> Tensor:
        return variant_forward(self.variant, neck_params(self.params), f)

    def embed(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))
        return self.neck(self.backbone(x))

    def embedding_shape(self, image_shape=None) -> tuple[int, int, int]:
        s = self.cfg.feature_side
        return (self.cfg.c, s, s)

    def embed_array(self, images: np.ndarray) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(images), EMBED_CHUNK):
                out.append(self.embed(images[i:i + EMBED_CHUNK]).data)
        return np.concatenate(out)

    def predict_from_embeddings(self, support, support_labels, query, n_way: int) -> np.ndarray:
        """Argmax over ways of the position-summed log-probability; ties go to the lowest way."""
        with T.no_grad():
            protos = build_prototypes(Tensor._wrap(support), support_labels, n_way)
            logp = T.log_softmax(metric_logits(Tensor._wrap(query), protos, self.cfg.temperature))
        return np.argmax(logp.data.sum(axis=-2), axis=-1)

    def infer(self, episode) -> np.ndarray:
        return self.predict_from_embeddings(self.embed_array(episode.support), episode.support_labels,
                                            self.embed_array(episode.query), episode.n_way)

    def losses(self, episode) -> dict[str, Tensor]:
        """Component losses and the multi-task total for one (possibly rotated) episode."""
        cfg = self.cfg
        ns = len(episode.support)
        emb = self.embed(np.concatenate([episode.support, episode.query]))
        sup, qry = T.slice_rows(emb, 0, ns), T.slice_rows(emb, ns, emb.shape[0])
        protos = build_prototypes(sup, episode.support_labels, episode.n_way)
        out = {"metric": metric_loss(metric_predict(qry, protos, cfg.temperature), episode.query_labels)}
        l_g = l_r = None
        if cfg.use_global:
            glabels = np.array([self._gindex[int(c)] for c in episode.global_labels])
            l_g = out["global"] = patch_ce_loss(qry, self.params["head_g.w"], self.params["head_g.b"],
                                                glabels, len(cfg.global_classes))
        if cfg.use_rotation:
            l_r = out["rotation"] = patch_ce_loss(qry, self.params["head_r.w"], self.params["head_r.b"],
                                                  episode.rotation_labels, 4)
        out["total"] = multitask_loss(out["metric"], l_g, l_r, cfg.lam,
                                      self.params.get("alpha_g"), self.params.get("alpha_r"))
        return out

