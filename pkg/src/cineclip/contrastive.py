"""Bidirectional InfoNCE, flooding, and pretraining batch construction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, Tensor


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1   # not reported for the reference model; configurable
    lam: float = 0.5           # video->text weight; likewise unreported
    flood_level: float = 0.5
    batch_size: int = 8
    sentences: int = 5

    def validate(self):
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError("lambda must lie in [0, 1]")
        if self.flood_level < 0:
            raise ContractError("flood level must be non-negative")
        if self.batch_size < 2:
            raise ContractError("batch size must be at least 2")
        return self


@dataclass
class JointBatch:
    V: Tensor
    U: Tensor
    study_ids: list = None

    def __post_init__(self):
        self.V = self.V if isinstance(self.V, Tensor) else Tensor(np.asarray(self.V, dtype=np.float64))
        self.U = self.U if isinstance(self.U, Tensor) else Tensor(np.asarray(self.U, dtype=self.V.dtype))
        if self.V.shape != self.U.shape or self.V.ndim != 2:
            raise ContractError(f"V {self.V.shape} and U {self.U.shape} must both be [N, d]")
        if self.V.shape[0] < 2:
            raise ContractError("InfoNCE needs N >= 2 pairs (no negatives otherwise)")
        if self.study_ids is not None and len(set(self.study_ids)) != len(self.study_ids):
            raise ContractError("a study appears twice in one batch")


def similarity(batch, temperature):
    return dc.matmul(batch.V, dc.transpose(batch.U)) * (1.0 / temperature)


def _diag_mean(s):
    n = s.shape[0]
    return dc.mean(s[np.arange(n), np.arange(n)])


def infonce_v2t(batch, temperature):
    """Mean over i of -log softmax_k(<v_i, u_k>/tau)[i]."""
    s = similarity(batch, temperature)
    return dc.mean(dc.logsumexp(s, axis=1)) - _diag_mean(s)


def infonce_t2v(batch, temperature):
    """Same similarity matrix, normalized over videos for each text."""
    s = similarity(batch, temperature)
    return dc.mean(dc.logsumexp(s, axis=0)) - _diag_mean(s)


def combined_loss(batch, cfg):
    s = similarity(batch, cfg.temperature)
    diag = _diag_mean(s)
    v2t = dc.mean(dc.logsumexp(s, axis=1)) - diag
    t2v = dc.mean(dc.logsumexp(s, axis=0)) - diag
    return v2t * cfg.lam + t2v * (1.0 - cfg.lam)


def flood(loss, b):
    """|loss - b| + b. At loss == b the slope is taken as +1."""
    if b < 0:
        raise ContractError("flood level must be non-negative")
    loss = loss if isinstance(loss, Tensor) else Tensor(np.asarray(loss, dtype=np.float64))
    return dc.abs_(loss - b) + b


def sample_sentences(report, k, rng):
    """k sentences in random order: without replacement if the report is long enough."""
    n = len(report)
    if n == 0:
        return []
    idx = rng.choice(n, size=k, replace=n < k)
    return [report[i] for i in idx]


def build_pretrain_batch(studies, rng, cfg, vocab, frames, policy=None, max_len=48):
    """Sample N distinct studies; one random view and a 5-sentence report subsample each.

    Returns (videos [N,C,T,H,W] float32, token ids [N,max_len], study ids).
    """
    from .synthdata import augment_video, temporal_subsample, tokenize

    n = cfg.batch_size
    by_id = {}
    for s in studies:
        by_id.setdefault(s.study_id, s)
    if len(by_id) < n:
        raise ContractError(f"need {n} distinct studies, have {len(by_id)}")
    pool = list(by_id.values())
    chosen = [pool[i] for i in rng.choice(len(pool), size=n, replace=False)]
    videos, ids = [], []
    for study in chosen:
        _, clip = study.videos[int(rng.integers(len(study.videos)))]
        clip = temporal_subsample(clip, frames)
        clip = augment_video(clip, policy, int(rng.integers(2 ** 31)))
        videos.append(clip)
        ids.append(tokenize(sample_sentences(study.report, cfg.sentences, rng), vocab, max_len))
    return np.stack(videos).astype(np.float32), np.stack(ids), [s.study_id for s in chosen]
