"""Gated multi-instance attention over a study's view embeddings, and task heads."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, ParamSet, Tensor

VIEW_TAGS = ("2CH", "3CH", "4CH", "SAX")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HeadConfig:
    task: str = "regression"
    layernorm_pre: bool = False
    pos_weight: float = 1.0
    huber_delta: float = 1.0
    attn_hidden: int = None     # defaults to joint_dim // 2

    def validate(self):
        if self.task not in ("regression", "classification"):
            raise ContractError(f"unknown task {self.task!r}")
        if self.pos_weight <= 0 or self.huber_delta <= 0:
            raise ContractError("pos_weight and huber_delta must be positive")
        return self

    @classmethod
    def for_task(cls, task, **kw):
        return cls(task=task, layernorm_pre=(task == "classification"), **kw)


@dataclass
class Bag:
    H: Tensor                  # [K, d]
    view_tags: list = None

    def __post_init__(self):
        if not isinstance(self.H, Tensor):
            self.H = Tensor(np.asarray(self.H, dtype=np.float64))
        if self.H.ndim != 2 or self.H.shape[0] < 1:
            raise ContractError("a bag needs K >= 1 embeddings of equal dimension")
        if self.view_tags is not None and len(self.view_tags) != self.H.shape[0]:
            raise ContractError("view_tags length differs from K")


def init_head_params(joint_dim, cfg, rng, dtype=np.float32, params=None):
    p = ParamSet() if params is None else params
    m = cfg.attn_hidden or max(1, joint_dim // 2)
    s = 1.0 / math.sqrt(joint_dim)
    p.add("head.attn.V", (s * rng.standard_normal((m, joint_dim))).astype(dtype))
    p.add("head.attn.U", (s * rng.standard_normal((m, joint_dim))).astype(dtype))
    p.add("head.attn.w", (rng.standard_normal(m) / math.sqrt(m)).astype(dtype))
    if cfg.layernorm_pre:
        p.add("head.ln.gamma", np.ones(joint_dim, dtype=dtype))
        p.add("head.ln.beta", np.zeros(joint_dim, dtype=dtype))
    p.add("head.out.weight", (s * rng.standard_normal((joint_dim, 1))).astype(dtype))
    p.add("head.out.bias", np.zeros(1, dtype=dtype))
    return p


def _prepare(bag, params, cfg):
    H = bag.H
    if cfg.layernorm_pre:
        H = dc.layernorm(H, params["head.ln.gamma"], params["head.ln.beta"])
    return H


def attention_scores(H, params):
    """Pre-softmax scores w^T (tanh(V h) * sigm(U h)) for each row of H -> [K]."""
    V, U, w = params["head.attn.V"], params["head.attn.U"], params["head.attn.w"]
    gate = dc.tanh(dc.matmul(H, dc.transpose(V))) * dc.sigmoid(dc.matmul(H, dc.transpose(U)))
    return dc.matmul(gate, dc.reshape(w, (-1, 1)))[..., 0]


def gated_attention(bag, params, cfg):
    """Softmax-normalized attention weights [K]."""
    H = _prepare(bag, params, cfg)
    return dc.softmax(attention_scores(H, params), axis=-1)


def attention_pool(bag, a, tol=1e-6):
    """Attention-weighted average of the bag's embeddings."""
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=bag.H.dtype))
    if abs(float(a.data.sum()) - 1.0) > tol:
        raise ContractError(f"attention weights sum to {a.data.sum()}, not 1")
    return dc.reshape(dc.matmul(dc.reshape(a, (1, -1)), bag.H), (-1,))


def head_logit(feature, params):
    if not isinstance(feature, Tensor):
        feature = Tensor(np.asarray(feature, dtype=params["head.out.weight"].dtype))
    f = dc.reshape(feature, (1, -1)) if feature.ndim == 1 else feature
    return dc.linear(f, params["head.out.weight"], params["head.out.bias"])[..., 0]


def head_forward(feature, params, cfg):
    """Regression: linear output. Classification: sigmoid probability."""
    z = head_logit(feature, params)
    return dc.sigmoid(z) if cfg.task == "classification" else z


def bag_forward(H, params, cfg):
    """Full MIL pass over one bag [K, d] or equal-size bags [B, K, d].

    Returns (head logit / regression output, attention weights [..., K]).
    """
    if isinstance(H, Bag):
        H = H.H
    if cfg.layernorm_pre:
        H = dc.layernorm(H, params["head.ln.gamma"], params["head.ln.beta"])
    a = dc.softmax(attention_scores(H, params), axis=-1)
    a_row = dc.reshape(a, a.shape[:-1] + (1, a.shape[-1]))
    feature = dc.matmul(a_row, H)[..., 0, :]
    return head_logit(feature, params), a


def huber_loss(pred, target, delta=1.0):
    """Mean Huber loss: 0.5 e^2 inside |e| <= delta, delta (|e| - delta/2) outside."""
    if delta <= 0:
        raise ContractError("delta must be positive")
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    e = pred - target
    inside = np.abs(e.data) <= delta
    quad = dc.square(e) * 0.5
    lin = (dc.abs_(e) - 0.5 * delta) * delta
    return dc.mean(quad * inside.astype(pred.dtype) + lin * (~inside).astype(pred.dtype))


def _softplus(z):
    # max(z, 0) + log1p(exp(-|z|)); derivative is sigmoid(z)
    x = z.data
    e = np.exp(-np.abs(x))
    out = np.maximum(x, 0) + np.log1p(e)
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return dc._make(out, (z,), lambda g: (g * sig,), "softplus")


def weighted_bce_logits(logits, labels, pos_weight):
    """-[w_p y log p + (1-y) log(1-p)] with p = sigmoid(logit), batch mean."""
    logits = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float64))
    y = np.asarray(labels, dtype=logits.dtype).reshape(logits.shape)
    # -log p = softplus(-z); -log(1-p) = softplus(z)
    return dc.mean(_softplus(-logits) * (pos_weight * y) + _softplus(logits) * (1.0 - y))


def weighted_bce(p, labels, pos_weight):
    """Probability-space entry point; converts to logits and uses the stable form."""
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0) | (p >= 1)):
        raise ContractError("probabilities must lie strictly inside (0, 1)")
    return weighted_bce_logits(np.log(p) - np.log1p(-p), labels, pos_weight)


def pos_weight_from_labels(labels, name="label"):
    """(#negative) / (#positive) from a training split."""
    y = np.asarray(labels).astype(bool)
    npos = int(y.sum())
    if npos == 0:
        raise ConfigError(f"no positive examples for {name!r} in the training split")
    return (y.size - npos) / npos


