"""Pretraining, finetuning, zero-shot embedding, sweeps, and the checkpoint format.

Checkpoint directory layout::

    manifest.json   format_version, config echo, epoch, pretrain loss, rng state, optimizer scalars
    params.bin      b"CKPT", u32 format_version, then per parameter:
                    u32 name length, UTF-8 name, u32 rank, u32 dims[rank], little-endian fp32 data
    optim.bin       same layout holding AdamW moments as "m/<name>" and "v/<name>" (optional)
"""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import contrastive as ct
from . import diffcore as dc
from . import encoders as enc
from . import evalstats as ev
from . import milhead as mil
from . import synthdata as sd
from .diffcore import ContractError, NumericError, ParamSet, Tensor

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
CKPT_MAGIC = b"CKPT"


class TrainingAborted(RuntimeError):
    def __init__(self, msg, last_checkpoint=None):
        super().__init__(msg)
        self.last_checkpoint = last_checkpoint


@dataclass
class RunConfig:
    task: str = "pretrain"              # pretrain | lvef_regression | disease_classification | zero_shot_embed
    freeze_mode: str = "finetune"
    data_fraction: float = 1.0
    subsample_seed: int = 0
    seed: int = 0
    epochs: int = 30
    max_steps: int = 0                  # 0: run for `epochs`
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_epoch: int = 20
    decay_factor: float = 0.1
    checkpoint_interval: int = 10
    eval_interval: int = 50             # finetuning steps between validation passes
    temperature: float = 0.1
    lam: float = 0.5
    flood_level: float = 0.5
    augment: bool = True
    sax_fraction: float = 0.5           # regression bags keep this share of SAX slices
    huber_delta: float = 1.0
    disease_label: str = "hypertrophy"
    hfref_cutoff: float = 0.40
    max_tokens: int = 48

    def validate(self):
        if self.task not in ("pretrain", "lvef_regression", "disease_classification", "zero_shot_embed"):
            raise ContractError(f"unknown task {self.task!r}")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ContractError("data_fraction must lie in (0, 1]")
        if self.freeze_mode not in enc.FREEZE_MODES:
            raise ContractError(f"unknown freeze mode {self.freeze_mode!r}")
        return self

    def to_dict(self):
        return asdict(self)


def finetune_defaults(task="lvef_regression", **kw):
    """Downstream optimizer settings: lr 1e-4, weight decay 0.01 (regression) or 5e-4 (classification)."""
    base = dict(task=task, lr=1e-4, weight_decay=0.01 if task == "lvef_regression" else 5e-4,
                decay_epoch=10 ** 9, epochs=15)
    base.update(kw)
    return RunConfig(**base)


# ------------------------------------------------------------- checkpoints

def _write_tensors(path, arrays):
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<I", FORMAT_VERSION))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            f.write(struct.pack("<I", len(raw)) + raw)
            f.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes(order="C"))


def _read_tensors(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported format_version {version}")
    pos, out = 8, {}
    while pos < len(raw):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * count
    return out


@dataclass
class Checkpoint:
    params: ParamSet
    meta: dict
    optim: dc.OptimState = None
    path: Path = None

    @property
    def epoch(self):
        return self.meta.get("epoch")


def save_checkpoint(path, params, meta, optim=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _write_tensors(path / "params.bin", params.arrays())
    manifest = dict(meta)
    manifest["format_version"] = FORMAT_VERSION
    manifest["trainable"] = params.trainable_names()
    if optim is not None:
        manifest["optimizer"] = {k: getattr(optim, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "t")}
        moments = {f"m/{k}": v for k, v in optim.m.items()}
        moments.update({f"v/{k}": v for k, v in optim.v.items()})
        _write_tensors(path / "optim.bin", moments)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path):
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(str(path / "manifest.json"))
    meta = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported format_version {meta.get('format_version')}")
    arrays = _read_tensors(path / "params.bin")
    trainable = set(meta.get("trainable", arrays))
    params = ParamSet()
    for name, arr in arrays.items():
        params.add(name, arr, trainable=name in trainable)
    optim = None
    if "optimizer" in meta and (path / "optim.bin").exists():
        o = meta["optimizer"]
        optim = dc.OptimState(o["lr"], o["beta1"], o["beta2"], o["eps"], o["weight_decay"], o["t"])
        for key, arr in _read_tensors(path / "optim.bin").items():
            kind, name = key.split("/", 1)
            (optim.m if kind == "m" else optim.v)[name] = arr
    meta = {k: v for k, v in meta.items() if k not in ("format_version", "trainable", "optimizer")}
    return Checkpoint(params, meta, optim, path)


def list_checkpoints(run_dir):
    """Periodic checkpoints of a pretraining run in epoch order (``final`` excluded)."""
    return sorted(Path(run_dir).glob("ckpt_epoch*"), key=lambda p: int(p.name[len("ckpt_epoch"):]))


# ------------------------------------------------------------- utilities

def _index(studies):
    return {s.study_id: s for s in studies}


def subset_ids(ids, fraction, seed):
    """ceil(fraction * n) ids chosen by a seeded draw, kept in their original order."""
    ids = list(ids)
    k = max(1, math.ceil(fraction * len(ids) - 1e-9))
    if k >= len(ids):
        return ids
    pick = np.sort(np.random.default_rng(seed).choice(len(ids), size=k, replace=False))
    return [ids[i] for i in pick]


def write_run_manifest(out_dir, payload):
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_manifest.json").write_text(json.dumps(payload, indent=1, sort_keys=True, default=str) + "\n",
                                           encoding="utf-8")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])


def _optim(cfg, weight_decay=None):
    wd = cfg.weight_decay if weight_decay is None else weight_decay
    return dc.OptimState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, wd)


def _prep_clip(video, frames, policy, seed):
    clip = sd.temporal_subsample(video, frames)
    if policy is not None:
        clip = sd.augment_video(clip, policy, seed)
    return clip.astype(np.float32)


# ------------------------------------------------------------ pretraining

@dataclass
class PretrainResult:
    params: ParamSet
    checkpoints: list
    loss_log: list
    final: Path = None


def pretrain(cfg, studies, splits, enc_cfg=enc.DESK_PROFILE, out_dir=None, resume=None, stop_after=None):
    """Contrastive video-text pretraining on the train split.

    ``resume`` is a checkpoint path; parameters, optimizer moments and the rng
    state are restored so the run continues exactly. ``stop_after`` ends the
    run early after that many epochs (used to simulate interruption).
    """
    cfg.validate()
    enc_cfg.validate()
    ccfg = ct.ContrastiveConfig(cfg.temperature, cfg.lam, cfg.flood_level, cfg.batch_size).validate()
    sd.check_splits(splits, [s.study_id for s in studies])
    by_id = _index(studies)
    train = [by_id[i] for i in splits["train"]]
    if len(train) < cfg.batch_size:
        raise ContractError(f"{len(train)} training studies < batch size {cfg.batch_size}")
    vocab = sd.build_vocab()
    if len(vocab) > enc_cfg.text.vocab_size:
        raise ContractError(f"vocabulary of {len(vocab)} exceeds configured size {enc_cfg.text.vocab_size}")
    schedule = dc.LRSchedule(cfg.lr, cfg.decay_epoch, cfg.decay_factor)
    policy = sd.AugmentPolicy() if cfg.augment else None
    out = Path(out_dir) if out_dir is not None else None

    if resume is not None:
        ck = load_checkpoint(resume)
        params, state = ck.params, ck.optim
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.meta["rng_state"]
        start = int(ck.meta["epoch"])
    else:
        params = enc.init_encoder_params(enc_cfg, cfg.seed)
        enc.freeze_lower_text_layers(params, enc_cfg)
        state = _optim(cfg)
        rng = np.random.default_rng(cfg.seed + 1)
        start = 0

    meta_base = {"config": cfg.to_dict(), "encoder": enc_cfg.to_dict(), "kind": "pretrain"}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_run_manifest(out, dict(meta_base, n_train=len(train)))
    loss_log, ckpts = [], []
    last_good = Path(resume) if resume is not None else None
    end = cfg.epochs if stop_after is None else min(cfg.epochs, start + stop_after)
    steps_per_epoch = len(train) // cfg.batch_size
    epoch_loss = float("nan")
    for epoch in range(start, end):
        lr = dc.lr_at(epoch, schedule)
        order = rng.permutation(len(train))
        losses = []
        for step in range(steps_per_epoch):
            chunk = [train[i] for i in order[step * cfg.batch_size:(step + 1) * cfg.batch_size]]
            videos, ids, sids = ct.build_pretrain_batch(chunk, rng, ccfg, vocab, enc_cfg.video.frames,
                                                        policy, cfg.max_tokens)
            try:
                v = enc.project(enc.encode_video(videos, params, enc_cfg), params, "video")
                u = enc.project(enc.encode_text(ids, params, enc_cfg), params, "text")
                raw = ct.combined_loss(ct.JointBatch(v, u, sids), ccfg)
                flooded = ct.flood(raw, ccfg.flood_level)
                grads = dc.forward_backward(flooded, params)
            except (NumericError, enc.NormalizationError) as e:
                raise TrainingAborted(f"non-finite loss at epoch {epoch} step {step}: {e}", last_good) from e
            dc.adamw_step(params, grads, state, lr)
            loss_log.append((epoch, epoch * steps_per_epoch + step, raw.item(), flooded.item()))
            losses.append(raw.item())
        epoch_loss = float(np.mean(losses))
        log.info("epoch %d lr %.2e loss %.4f", epoch + 1, lr, epoch_loss)
        done = epoch + 1
        if out is not None and done % cfg.checkpoint_interval == 0:
            meta = dict(meta_base, epoch=done, pretrain_loss=epoch_loss, rng_state=rng.bit_generator.state)
            last_good = save_checkpoint(out / f"ckpt_epoch{done:04d}", params, meta, state)
            ckpts.append(last_good)
    final = None
    if out is not None:
        meta = dict(meta_base, epoch=end, pretrain_loss=epoch_loss, rng_state=rng.bit_generator.state)
        final = save_checkpoint(out / "final", params, meta, state)
        mode = "a" if resume is not None and (out / "loss_log.csv").exists() else "w"
        with open(out / "loss_log.csv", mode, newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            if mode == "w":
                w.writerow(["epoch", "step", "raw_loss", "flooded_loss"])
            for e, s, r, fl in loss_log:
                w.writerow([e, s, repr(r), repr(fl)])
    return PretrainResult(params, ckpts, loss_log, final)


# -------------------------------------------------------- downstream model

def downstream_params(enc_cfg, head_cfg, init=None, seed=0):
    """Video encoder (from ``init`` or random) plus a fresh MIL head, all float32."""
    rng = np.random.default_rng(seed)
    if init is None:
        params = enc.init_video_params(enc_cfg, rng)
    else:
        src = init.params if isinstance(init, Checkpoint) else init
        params = ParamSet()
        for name, t in src.items():
            if name.startswith("video."):
                params.add(name, t.data.astype(np.float32).copy())
    return mil.init_head_params(enc_cfg.joint_dim, head_cfg, np.random.default_rng(seed + 7919), params=params)


def expected_finetune_trainable(params):
    return int(sum(t.data.size for n, t in params.items() if n.startswith(enc.FINETUNE_TRAINABLE)))


def bag_views(study, sax_fraction, seed):
    """All long-axis views plus a seeded share of SAX slices (at least one when any exist)."""
    tags = study.view_tags
    long_axis = [t for t in tags if sd.view_kind(t) != "SAX"]
    sax = [t for t in tags if sd.view_kind(t) == "SAX"]
    if sax_fraction >= 1.0 or not sax:
        return long_axis + sax
    k = max(1, int(round(sax_fraction * len(sax))))
    pick = np.sort(np.random.default_rng(seed).choice(len(sax), size=k, replace=False))
    return long_axis + [sax[i] for i in pick]


def _study_seed(base, study_id):
    return int(np.random.SeedSequence([base, *study_id.encode("utf-8")]).generate_state(1)[0])


class _Model:
    """Encoder + MIL head forward for bags of equal size."""

    def __init__(self, params, enc_cfg, head_cfg, frozen_backbone):
        self.params = params
        self.enc_cfg = enc_cfg
        self.head_cfg = head_cfg
        self.frozen_backbone = frozen_backbone

    def embed(self, clips):
        if self.frozen_backbone:
            with dc.no_grad():
                rep = enc.encode_video(clips, self.params, self.enc_cfg)
            rep = Tensor(rep.data)
        else:
            rep = enc.encode_video(clips, self.params, self.enc_cfg)
        return enc.project(rep, self.params, "video")

    def forward(self, clips, n_bags):
        z = self.embed(clips)
        H = dc.reshape(z, (n_bags, -1, z.shape[-1]))
        return mil.bag_forward(H, self.params, self.head_cfg)


def _batched(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def predict_bags(model, bags, frames, batch_bags=16):
    """Deterministic predictions (head output) and attention weights for (study, tags) bags."""
    outs, attns = [], []
    with dc.no_grad():
        groups = {}
        for i, (study, tags) in enumerate(bags):
            groups.setdefault(len(tags), []).append(i)
        res = [None] * len(bags)
        for k, idxs in groups.items():
            for chunk in _batched(idxs, batch_bags):
                clips = np.stack([_prep_clip(bags[i][0].video(t), frames, None, 0)
                                  for i in chunk for t in bags[i][1]])
                out, a = model.forward(clips, len(chunk))
                for j, i in enumerate(chunk):
                    res[i] = (float(out.data[j]), a.data[j].copy())
    for o, a in res:
        outs.append(o)
        attns.append(a)
    return np.array(outs), attns


@dataclass
class FinetuneResult:
    params: ParamSet
    metrics: dict
    predictions: list          # rows for the prediction CSV
    attention: list            # (study_id, view_tag, weight)
    history: list = field(default_factory=list)
    best_step: int = 0


def _train_downstream(cfg, studies, splits, enc_cfg, init, head_cfg, out_dir):
    cfg.validate()
    sd.check_splits(splits, [s.study_id for s in studies])
    by_id = _index(studies)
    regression = cfg.task == "lvef_regression"
    if cfg.freeze_mode == "frozen":
        raise ContractError("freeze_mode=frozen leaves the downstream head untrained")
    train_ids = subset_ids(splits["train"], cfg.data_fraction, cfg.subsample_seed)
    sax_fraction = cfg.sax_fraction if regression else 1.0

    def bags_for(ids):
        return [(by_id[i], bag_views(by_id[i], sax_fraction, _study_seed(cfg.subsample_seed, i))) for i in ids]

    def target(study):
        if regression:
            return study.phenotype.ef
        return float(study.phenotype.flags[cfg.disease_label])

    train_bags = bags_for(train_ids)
    if not regression:
        if cfg.disease_label not in sd.FLAGS:
            raise ContractError(f"unknown disease label {cfg.disease_label!r}")
        pos_weight = mil.pos_weight_from_labels([target(s) for s, _ in train_bags], cfg.disease_label)
        head_cfg = replace(head_cfg, pos_weight=pos_weight)
    params = downstream_params(enc_cfg, head_cfg, init, cfg.seed)
    if regression:
        # start the linear output at the mean training target instead of zero
        params.set_value("head.out.bias", [np.mean([target(s) for s, _ in train_bags])])
    enc.freeze_plan(params, cfg.freeze_mode)
    n_trainable = params.n_trainable()
    if cfg.freeze_mode == "finetune" and n_trainable != expected_finetune_trainable(params):
        raise ContractError("trainable parameter count does not match the finetune plan")
    model = _Model(params, enc_cfg, head_cfg, frozen_backbone=cfg.freeze_mode == "finetune")
    state = _optim(cfg)
    schedule = dc.LRSchedule(cfg.lr, cfg.decay_epoch, cfg.decay_factor)
    policy = sd.AugmentPolicy() if cfg.augment else None
    rng = np.random.default_rng(cfg.seed + 2)
    frames = enc_cfg.video.frames
    val_bags = bags_for(splits["val"])
    test_bags = bags_for(splits["test"])

    steps_per_epoch = max(1, math.ceil(len(train_bags) / cfg.batch_size))
    total = cfg.max_steps if cfg.max_steps else cfg.epochs * steps_per_epoch
    eval_every = cfg.eval_interval if cfg.max_steps else steps_per_epoch

    def validate_score():
        preds, _ = predict_bags(model, val_bags, frames)
        truth = np.array([target(s) for s, _ in val_bags])
        if regression:
            m = ev.regression_metrics(preds, truth)
            return -m["mae"], m
        if truth.min() == truth.max():
            return 0.0, {"auc": float("nan")}
        auc = ev.auroc(preds, truth.astype(int)).auc
        return auc, {"auc": auc}

    best = (-np.inf, None, 0)
    history = []
    step = 0
    epoch = 0
    while step < total:
        order = rng.permutation(len(train_bags))
        groups = {}
        for i in order:
            groups.setdefault(len(train_bags[i][1]), []).append(i)
        batches = [chunk for k in sorted(groups) for chunk in _batched(groups[k], cfg.batch_size)]
        lr = dc.lr_at(epoch, schedule)
        for chunk in batches:
            if step >= total:
                break
            clips = np.stack([_prep_clip(train_bags[i][0].video(t), frames, policy, int(rng.integers(2 ** 31)))
                              for i in chunk for t in train_bags[i][1]])
            y = np.array([target(train_bags[i][0]) for i in chunk], dtype=np.float32)
            out, _ = model.forward(clips, len(chunk))
            if regression:
                loss = mil.huber_loss(out, y, cfg.huber_delta)
            else:
                loss = mil.weighted_bce_logits(out, y, head_cfg.pos_weight)
            grads = dc.forward_backward(loss, params)
            dc.adamw_step(params, grads, state, lr)
            step += 1
            if step % eval_every == 0 or step == total:
                score, m = validate_score()
                history.append(dict(step=step, train_loss=loss.item(), **m))
                if score > best[0]:
                    best = (score, {k: v.copy() for k, v in params.arrays().items()}, step)
        epoch += 1
    for name, arr in best[1].items():
        params[name].data = arr

    preds, attns = predict_bags(model, test_bags, frames)
    truth = np.array([target(s) for s, _ in test_bags])
    attention = [(s.study_id, t, float(w)) for (s, tags), a in zip(test_bags, attns) for t, w in zip(tags, a)]
    if regression:
        metrics = {"test": ev.regression_metrics(preds, truth),
                   "bland_altman": ev.bland_altman(preds, truth).to_dict()}
        hf = (truth < cfg.hfref_cutoff).astype(int)
        if 0 < hf.sum() < hf.size:
            roc = ev.delong_ci(-preds, hf) if min(hf.sum(), hf.size - hf.sum()) >= 2 else ev.auroc(-preds, hf)
            metrics["hfref_auroc"] = roc.to_dict()
        rows = [(s.study_id, float(p), float(t)) for (s, _), p, t in zip(test_bags, preds, truth)]
    else:
        prob = 1.0 / (1.0 + np.exp(-preds))
        y = truth.astype(int)
        roc = ev.delong_ci(prob, y) if min(y.sum(), y.size - y.sum()) >= 2 else ev.auroc(prob, y)
        metrics = {"test_auroc": roc.to_dict(), "pos_weight": head_cfg.pos_weight}
        rows = [(s.study_id, float(p), int(t)) for (s, _), p, t in zip(test_bags, prob, y)]
    val_hist = [h for h in history if h["step"] == best[2]]
    metrics.update(best_step=best[2], n_train=len(train_bags), n_trainable=n_trainable,
                   val=val_hist[0] if val_hist else {})
    result = FinetuneResult(params, metrics, rows, attention, history, best[2])
    if out_dir is not None:
        out = Path(out_dir)
        write_run_manifest(out, {"config": cfg.to_dict(), "encoder": enc_cfg.to_dict(),
                                 "head": asdict(head_cfg), "init": str(getattr(init, "path", None)),
                                 "train_ids": train_ids, "n_trainable": n_trainable})
        header = ["study_id", "pred", "truth"] if regression else ["study_id", "score", "label"]
        _write_csv(out / "predictions.csv", header, rows)
        _write_csv(out / "attention.csv", ["study_id", "view_tag", "weight"], attention)
        ev.write_json(out / "metrics.json", metrics)
        save_checkpoint(out / "model", params, {"kind": cfg.task, "config": cfg.to_dict(),
                                                "encoder": enc_cfg.to_dict(), "head": asdict(head_cfg),
                                                "epoch": epoch, "best_step": best[2]})
    return result


def finetune_regression(cfg, studies, splits, enc_cfg=enc.DESK_PROFILE, init=None, out_dir=None):
    """MIL regression of ef with Huber loss; best validation MAE is kept."""
    cfg = replace(cfg, task="lvef_regression")
    head_cfg = mil.HeadConfig.for_task("regression", huber_delta=cfg.huber_delta)
    return _train_downstream(cfg, studies, splits, enc_cfg, init, head_cfg, out_dir)


def finetune_classification(cfg, studies, splits, enc_cfg=enc.DESK_PROFILE, init=None, out_dir=None):
    """One binary MIL classifier for ``cfg.disease_label`` with split-derived pos_weight."""
    cfg = replace(cfg, task="disease_classification")
    head_cfg = mil.HeadConfig.for_task("classification")
    return _train_downstream(cfg, studies, splits, enc_cfg, init, head_cfg, out_dir)


# ------------------------------------------------------------- zero shot

def zero_shot_embed(init, studies, enc_cfg=enc.DESK_PROFILE, batch=32):
    """One joint embedding per video with every parameter frozen.

    Returns rows (study_id, view_tag, slice_index, vector); slice_index is -1 for long-axis views.
    """
    src = init.params if isinstance(init, Checkpoint) else init
    params = src.copy()
    enc.freeze_plan(params, "frozen")
    items = [(s.study_id, tag, vid) for s in studies for tag, vid in s.videos]
    rows = []
    with dc.no_grad():
        for chunk in _batched(items, batch):
            clips = np.stack([_prep_clip(v, enc_cfg.video.frames, None, 0) for _, _, v in chunk])
            z = enc.project(enc.encode_video(clips, params, enc_cfg), params, "video").data
            for (sid, tag, _), vec in zip(chunk, z):
                sl = int(tag[3:]) if sd.view_kind(tag) == "SAX" else -1
                rows.append((sid, tag, sl, vec.astype(np.float32)))
    return rows


def study_embeddings(rows):
    """Mean of the per-view embeddings of each study -> (ids, matrix)."""
    acc = {}
    for sid, _, _, vec in rows:
        acc.setdefault(sid, []).append(vec)
    ids = list(acc)
    return ids, np.stack([np.mean(acc[i], axis=0) for i in ids])


def write_embeddings_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        dim = len(rows[0][3]) if rows else 0
        w.writerow(["study_id", "view_tag", "slice"] + [f"e{i}" for i in range(dim)])
        for sid, tag, sl, vec in rows:
            w.writerow([sid, tag, sl] + [repr(float(x)) for x in vec])


def read_embeddings_csv(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        r = csv.reader(f)
        next(r)
        for row in r:
            rows.append((row[0], row[1], int(row[2]), np.array([float(x) for x in row[3:]], dtype=np.float32)))
    return rows


def probe_flag(rows, studies, splits, flag="low_ef", l2=1e-2):
    """Logistic probe on frozen study embeddings: fit on train, score the test split."""
    by_id = _index(studies)
    ids, X = study_embeddings(rows)
    pos = {sid: i for i, sid in enumerate(ids)}
    tr = [pos[i] for i in splits["train"] if i in pos]
    te = [pos[i] for i in splits["test"] if i in pos]
    y_tr = np.array([by_id[ids[i]].phenotype.flags[flag] for i in tr], dtype=int)
    y_te = np.array([by_id[ids[i]].phenotype.flags[flag] for i in te], dtype=int)
    scores = ev.logistic_probe(X[tr], y_tr, X[te], l2)
    return scores, y_te, [ids[i] for i in te]


# ------------------------------------------------------------------ sweeps

def sweep_pretrain_quality(checkpoints, cfg, studies, splits, enc_cfg=enc.DESK_PROFILE, out_csv=None):
    """Finetune from every checkpoint with one fixed seed and data fraction; tabulate val errors."""
    if len(checkpoints) < 3:
        raise ContractError("a pretrain-quality sweep needs at least 3 checkpoints")
    rows = []
    for path in checkpoints:
        ck = load_checkpoint(path)
        res = finetune_regression(cfg, studies, splits, enc_cfg, ck)
        val = res.metrics["val"]
        rows.append((int(ck.meta["epoch"]), float(ck.meta["pretrain_loss"]), float(val["mae"]), float(val["mse"])))
    if out_csv is not None:
        _write_csv(out_csv, ["pretrain_epoch", "pretrain_loss", "val_mae", "val_mse"], rows)
    return rows


def sweep_data_fraction(fractions, seeds, cfg, studies, splits, enc_cfg=enc.DESK_PROFILE, init=None, out_csv=None):
    """Validation/test MAE for each (data fraction, subsample seed)."""
    rows = []
    for frac in fractions:
        for s in seeds:
            res = finetune_regression(replace(cfg, data_fraction=frac, subsample_seed=s), studies, splits,
                                      enc_cfg, init)
            rows.append((float(frac), int(s), res.metrics["n_train"], float(res.metrics["val"]["mae"]),
                         float(res.metrics["test"]["mae"])))
    if out_csv is not None:
        _write_csv(out_csv, ["data_fraction", "subsample_seed", "n_train", "val_mae", "test_mae"], rows)
    return rows
