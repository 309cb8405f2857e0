"""Installed-package sanity suite: loop oracles and finite-difference checks on small inputs."""
from __future__ import annotations

from fractions import Fraction

import numpy as np

from . import tensor as T
from .attention import NeckVariant, attention, count_attention_macs, count_parameters, init_neck, tsf_forward
from .data import summarize
from .model import metric_loss, metric_predict, multitask_loss, patch_ce_loss
from .rng import stream
from .tensor import Tensor, finite_diff_check


def _loop_attention(q, k, v):
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        s = [sum(q[i, t] * k[j, t] for t in range(q.shape[1])) for j in range(k.shape[0])]
        e = np.exp(np.array(s) - max(s))
        out[i] = (e / e.sum()) @ v
    return out


def check_attention(seeds=5):
    for s in range(seeds):
        rng = stream(s, "selftest", "attn")
        q, k, v = rng.normal(size=(6, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        got = attention(Tensor(q), Tensor(k), Tensor(v)).data
        if np.max(np.abs(got - _loop_attention(q, k, v))) > 1e-10:
            return False
    return True


def check_tsf(seeds=5):
    for s in range(seeds):
        rng = stream(s, "selftest", "tsf")
        f, theta = rng.normal(size=(4, 3, 3)), rng.normal(size=(5, 4))
        tok = f.reshape(4, 9).T
        want = (tok + _loop_attention(tok, theta, theta)).T.reshape(4, 3, 3)
        if np.max(np.abs(tsf_forward(Tensor(f), Tensor(theta)).data - want)) > 1e-10:
            return False
    return True


def check_gradients(seeds=3):
    for s in range(seeds):
        rng = stream(s, "selftest", "grad")
        x = Tensor(rng.normal(size=(2, 4, 3, 3)))
        variant = NeckVariant("tsf", 1, 3, 4)
        params = init_neck(variant, rng)
        labels = np.array([0, 1])
        head = Tensor(rng.normal(size=(4, 3)))
        bias = Tensor(np.zeros(3))

        def loss(t):
            out = tsf_forward(t, params["theta"], params)
            protos = T.slice_rows(out, 0, 2)
            lm = metric_loss(metric_predict(out, protos), labels)
            lg = patch_ce_loss(out, head, bias, labels, 3)
            return multitask_loss(lm, lg, None, 0.5, Tensor(np.array(1.3)))

        if finite_diff_check(loss, x) >= 1e-4:
            return False
    return True


def check_ci():
    rec = summarize([0.5, 0.7])
    return abs(rec.ci95 - 1.96 * np.std([0.5, 0.7], ddof=1) / np.sqrt(2)) <= 1e-12


def check_counts():
    for h in (4, 8, 16):
        for n in (1, 5, 16):
            ratio = Fraction(count_attention_macs("transformer", h, h, 64, n), count_attention_macs("tsf", h, h, 64, n))
            if ratio != Fraction(h * h, n):
                return False
    v = NeckVariant("tsf", 1, 5, 640, 640)
    return count_parameters(v, init_neck(v, stream(0, "selftest", "count"))) == 826_240


CHECKS = (("attention loop oracle", check_attention), ("tsf loop oracle", check_tsf),
          ("finite-difference gradients", check_gradients), ("confidence interval", check_ci),
          ("MAC ratio and parameter count", check_counts))


def run(echo=print) -> bool:
    ok = True
    for name, fn in CHECKS:
        try:
            passed = bool(fn())
        except Exception as exc:  # a crashing check is a failing check
            passed = False
            name = f"{name} ({type(exc).__name__}: {exc})"
        echo(f"{'PASS' if passed else 'FAIL'}  {name}")
        ok &= passed
    echo(f"selftest: {'all checks passed' if ok else 'FAILED'}")
    return ok
