"""Command-line interface.

Exit codes: 0 success, 1 contract or configuration violation, 2 missing input.
Run commands read an optional TOML file (``--config``) whose top-level keys are
``RunConfig`` fields, with an optional ``[encoder]`` table mirroring
``EncoderConfig``; ``--set key=value`` overrides either (``encoder.joint_dim=32``).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:   # Python < 3.11
    import tomli as tomllib

from . import attnmaps
from . import encoders as enc
from . import evalstats as ev
from . import milhead as mil
from . import synthdata as sd
from . import training as tr
from .diffcore import ContractError

log = logging.getLogger("cineclip")

EXIT_OK, EXIT_CONTRACT, EXIT_MISSING = 0, 1, 2


class MissingInput(Exception):
    pass


# ------------------------------------------------------------------ config

def _parse_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _merge(base, over, where):
    out = dict(base)
    for k, v in over.items():
        if k not in base:
            raise ContractError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ContractError(f"config key {where}{k} must be a table")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(path=None, overrides=(), base=None):
    """Returns (RunConfig, EncoderConfig) after applying the file and ``--set`` overrides."""
    run = (base or tr.RunConfig()).to_dict()
    encoder = enc.DESK_PROFILE.to_dict()
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingInput(f"config file not found: {p}")
        doc = tomllib.loads(p.read_text(encoding="utf-8"))
    for item in overrides:
        if "=" not in item:
            raise ContractError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        node = doc
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_value(value.strip())
    enc_doc = doc.pop("encoder", {})
    run = _merge(run, doc, "")
    encoder = _merge(encoder, enc_doc, "encoder.")
    field_types = {f.name: f.type for f in fields(tr.RunConfig)}
    for k, v in run.items():
        default = getattr(tr.RunConfig, k, None)
        if isinstance(default, bool) and not isinstance(v, bool):
            raise ContractError(f"config key {k} must be a boolean")
        if isinstance(default, float) and isinstance(v, int) and not isinstance(v, bool):
            run[k] = float(v)
        elif isinstance(default, (int, float)) and not isinstance(v, (int, float)):
            raise ContractError(f"config key {k} must be numeric ({field_types[k]})")
    cfg = tr.RunConfig(**run).validate()
    return cfg, enc.EncoderConfig.from_dict(encoder).validate()


def _load_data(path):
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise MissingInput(f"dataset not found: {p}")
    return sd.load_dataset(p)


def _load_ckpt(path):
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise MissingInput(f"checkpoint not found: {p}")
    return tr.load_checkpoint(p)


def _require_file(path):
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"input not found: {p}")
    return p


def _write_config_echo(out, cfg, enc_cfg):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(
        json.dumps({"run": cfg.to_dict(), "encoder": enc_cfg.to_dict()}, indent=1, sort_keys=True) + "\n",
        encoding="utf-8")


# ----------------------------------------------------------------- commands

def cmd_gen(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ContractError(f"{out} exists and is not empty (use --force to overwrite)")
    prevalence = dict(sd.DEFAULT_PREVALENCE)
    for item in args.prevalence or []:
        k, _, v = item.partition("=")
        if k not in sd.FLAGS:
            raise ContractError(f"unknown flag {k!r} in --prevalence")
        prevalence[k] = float(v)
    studies = sd.sample_population(args.n, args.seed, prevalence, frames=args.frames, size=(args.size, args.size))
    splits = sd.make_splits([s.study_id for s in studies], args.seed)
    meta = {"n": args.n, "seed": args.seed, "prevalence": prevalence, "frames": args.frames,
            "size": args.size, "split_fractions": [0.5, 0.25, 0.25]}
    sd.save_dataset(out, studies, splits, meta)
    print(f"wrote {len(studies)} studies to {out}")
    return EXIT_OK


def cmd_check(args):
    studies, splits, meta = _load_data(args.data)
    ids = [s.study_id for s in studies]
    if len(set(ids)) != len(ids):
        raise ContractError("duplicate study ids in dataset")
    sd.check_splits(splits, ids)
    vocab = sd.build_vocab()
    for s in studies:
        if not s.videos:
            raise ContractError(f"study {s.study_id} has no videos")
        for tag, v in s.videos:
            if v.ndim != 4 or v.min() < 0 or v.max() > 1:
                raise ContractError(f"study {s.study_id} view {tag}: bad video")
        if sd.read_flags(s.report) != s.phenotype.flags:
            raise ContractError(f"study {s.study_id}: report disagrees with its labels")
        for sentence in s.report:
            if any(vocab.id(w) == vocab.unk_id for w in sentence.split()):
                raise ContractError(f"study {s.study_id}: out-of-vocabulary word in {sentence!r}")
    sizes = {k: len(v) for k, v in splits.items()}
    print(json.dumps({"studies": len(studies), "splits": sizes, "ok": True}, sort_keys=True))
    return EXIT_OK


def cmd_pretrain(args):
    cfg, enc_cfg = load_config(args.config, args.set)
    studies, splits, _ = _load_data(args.data)
    _write_config_echo(args.out, cfg, enc_cfg)
    res = tr.pretrain(cfg, studies, splits, enc_cfg, out_dir=args.out, resume=args.resume)
    print(json.dumps({"final": str(res.final), "checkpoints": [str(c) for c in res.checkpoints]}))
    return EXIT_OK


def cmd_finetune(args):
    base = tr.finetune_defaults(args.task)
    cfg, enc_cfg = load_config(args.config, args.set, base=base)
    cfg = replace(cfg, task=args.task)
    if args.freeze_mode:
        cfg = replace(cfg, freeze_mode=args.freeze_mode)
    if args.data_fraction is not None:
        cfg = replace(cfg, data_fraction=args.data_fraction)
    if args.label:
        cfg = replace(cfg, disease_label=args.label)
    init = None if args.init == "random" else _load_ckpt(args.init)
    studies, splits, _ = _load_data(args.data)
    _write_config_echo(args.out, cfg, enc_cfg)
    fn = tr.finetune_regression if cfg.task == "lvef_regression" else tr.finetune_classification
    res = fn(cfg, studies, splits, enc_cfg, init, out_dir=args.out)
    print(json.dumps({"metrics": str(Path(args.out) / "metrics.json"), "n_trainable": res.metrics["n_trainable"]}))
    return EXIT_OK


def cmd_embed(args):
    _, enc_cfg = load_config(args.config, args.set)
    studies, _, _ = _load_data(args.data)
    init = enc.init_encoder_params(enc_cfg, args.seed) if args.init == "random" else _load_ckpt(args.init)
    rows = tr.zero_shot_embed(init, studies, enc_cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    tr.write_embeddings_csv(args.out, rows)
    print(f"wrote {len(rows)} embeddings to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    src = _require_file(args.input)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "metrics":
        table = ev.read_predictions_csv(src)
        result = ev.evaluate_predictions(table)
        ev.write_json(out, result)
        if args.curve and table["kind"] == "classification":
            ev.write_curve_csv(args.curve, ev.auroc(table["score"], table["label"]))
    elif args.kind == "tsne":
        rows = tr.read_embeddings_csv(src)
        ids, X = (tr.study_embeddings(rows) if args.per_study
                  else ([f"{r[0]}/{r[1]}" for r in rows], np.stack([r[3] for r in rows])))
        Y, info = ev.tsne(X, perplexity=args.perplexity, iters=args.iters, seed=args.seed, return_info=True)
        ev.write_coords_csv(out, ids, Y)
        result = {"n": len(ids), "kl_initial": info.kl_initial, "kl_final": info.kl_final,
                  "perplexity": info.perplexity}
        ev.write_json(out.with_suffix(".json"), result)
    else:   # probe
        if not args.data:
            raise ContractError("eval probe needs --data")
        studies, splits, _ = _load_data(args.data)
        rows = tr.read_embeddings_csv(src)
        scores, y, ids = tr.probe_flag(rows, studies, splits, args.flag)
        result = {"flag": args.flag, "roc": ev.delong_ci(scores, y).to_dict()}
        ev.write_json(out, result)
    print(json.dumps(result, sort_keys=True, default=ev._jsonable))
    return EXIT_OK


def cmd_attn(args):
    ck = _load_ckpt(args.checkpoint)
    studies, _, _ = _load_data(args.data)
    enc_cfg = enc.EncoderConfig.from_dict(ck.meta["encoder"]) if "encoder" in ck.meta else enc.DESK_PROFILE
    by_id = {s.study_id: s for s in studies}
    if args.study not in by_id:
        raise MissingInput(f"study {args.study!r} not found in {args.data}")
    study = by_id[args.study]
    v = enc_cfg.video
    shape = (v.frames, v.height, v.width)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clips = {}
    counts = {}
    for tag, video in study.videos:
        clip = tr._prep_clip(video, v.frames, None, 0)
        if clip.shape[1:] != shape:
            raise ContractError(f"view {tag} has shape {clip.shape[1:]}, encoder expects {shape}")
        clips[tag] = clip
        maps = attnmaps.class_token_maps(clip, ck.params, enc_cfg)
        attnmaps.export_maps(maps, out / tag, shape)
        counts[tag] = len(maps)
    summary = {"study_id": study.study_id, "maps_per_view": counts}
    if "head.attn.w" in ck.params.names():
        task = "classification" if "head.ln.gamma" in ck.params.names() else "regression"
        head_cfg = mil.HeadConfig.for_task(task)
        model = tr._Model(ck.params, enc_cfg, head_cfg, frozen_backbone=True)
        tags = list(clips)
        pred, a = model.forward(np.stack([clips[t] for t in tags]), 1)
        with open(out / "mil_attention.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["study_id", "view_tag", "weight"])
            for t, wt in zip(tags, a.data[0]):
                w.writerow([study.study_id, t, repr(float(wt))])
        summary["mil_attention"] = str(out / "mil_attention.csv")
    ev.write_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args):
    base = tr.finetune_defaults("lvef_regression")
    cfg, enc_cfg = load_config(args.config, args.set, base=base)
    studies, splits, _ = _load_data(args.data)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "quality":
        run = Path(args.run)
        if not run.exists():
            raise MissingInput(f"pretraining run not found: {run}")
        ckpts = tr.list_checkpoints(run)
        rows = tr.sweep_pretrain_quality(ckpts, cfg, studies, splits, enc_cfg, out_csv=args.out)
    else:
        init = None if args.init == "random" else _load_ckpt(args.init)
        fractions = [float(x) for x in args.fractions.split(",")]
        seeds = [int(x) for x in args.seeds.split(",")]
        rows = tr.sweep_data_fraction(fractions, seeds, cfg, studies, splits, enc_cfg, init, out_csv=args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _add_config(p):
    p.add_argument("--config", metavar="PATH", help="TOML run configuration")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   help="override one config key (repeatable)")


def build_parser():
    ap = argparse.ArgumentParser(prog="cineclip", description="Contrastive video-report pretraining on "
                                 "synthetic cine studies, MIL finetuning and evaluation.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, metavar="DIR", help="output dataset directory")
    p.add_argument("--n", type=int, required=True, help="number of studies")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.add_argument("--prevalence", nargs="*", metavar="FLAG=P", help="flag prevalences, e.g. low_ef=0.3")
    p.add_argument("--frames", type=int, default=16, help="frames per video (default 16)")
    p.add_argument("--size", type=int, default=32, help="frame side in pixels (default 32)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("check", help="validate a dataset directory")
    p.add_argument("data", metavar="DIR", help="dataset directory")
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("pretrain", help="contrastive video-report pretraining")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory")
    p.add_argument("--out", required=True, metavar="DIR", help="run directory for checkpoints and logs")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint directory")
    _add_config(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="MIL regression or classification from a checkpoint")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory")
    p.add_argument("--init", required=True, metavar="CKPT", help="checkpoint directory or 'random'")
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.add_argument("--task", choices=["lvef_regression", "disease_classification"], default="lvef_regression",
                   help="downstream task (default lvef_regression)")
    p.add_argument("--freeze-mode", choices=list(enc.FREEZE_MODES), help="overrides freeze_mode")
    p.add_argument("--data-fraction", type=float, metavar="F", help="overrides data_fraction")
    p.add_argument("--label", choices=list(sd.FLAGS), help="disease label for classification")
    _add_config(p)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("embed", help="zero-shot embeddings of every video")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory")
    p.add_argument("--init", required=True, metavar="CKPT", help="checkpoint directory or 'random'")
    p.add_argument("--out", required=True, metavar="CSV", help="embeddings CSV")
    p.add_argument("--seed", type=int, default=0, help="initialization seed when --init random")
    _add_config(p)
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("eval", help="metrics, t-SNE or a linear probe")
    p.add_argument("kind", choices=["metrics", "tsne", "probe"], help="what to compute")
    p.add_argument("input", metavar="CSV", help="predictions CSV (metrics) or embeddings CSV (tsne, probe)")
    p.add_argument("--out", required=True, metavar="PATH", help="JSON (metrics, probe) or coordinates CSV (tsne)")
    p.add_argument("--curve", metavar="CSV", help="also write the ROC curve (metrics)")
    p.add_argument("--perplexity", type=float, help="t-SNE perplexity (default min(30, n/5))")
    p.add_argument("--iters", type=int, default=500, help="t-SNE iterations (default 500)")
    p.add_argument("--seed", type=int, default=0, help="t-SNE seed (default 0)")
    p.add_argument("--per-study", action="store_true", help="t-SNE on per-study mean embeddings")
    p.add_argument("--data", metavar="DIR", help="dataset directory (probe)")
    p.add_argument("--flag", choices=list(sd.FLAGS), default="low_ef", help="probe target (default low_ef)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("attn", help="export attention heatmaps for one study")
    p.add_argument("--checkpoint", required=True, metavar="CKPT", help="pretrained or finetuned checkpoint")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory")
    p.add_argument("--study", required=True, metavar="ID", help="study id")
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.set_defaults(fn=cmd_attn)

    p = sub.add_parser("sweep", help="pretrain-quality or data-fraction sweep")
    p.add_argument("kind", choices=["quality", "fraction"], help="which sweep to run")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory")
    p.add_argument("--out", required=True, metavar="CSV", help="result table")
    p.add_argument("--run", metavar="DIR", help="pretraining run directory (quality)")
    p.add_argument("--init", default="random", metavar="CKPT", help="checkpoint or 'random' (fraction)")
    p.add_argument("--fractions", default="0.1,0.5,1.0", help="comma-separated fractions (fraction)")
    p.add_argument("--seeds", default="0", help="comma-separated subsample seeds (fraction)")
    _add_config(p)
    p.set_defaults(fn=cmd_sweep)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    if args.command == "sweep" and args.kind == "quality" and not args.run:
        print("error: sweep quality needs --run", file=sys.stderr)
        return EXIT_CONTRACT
    try:
        return args.fn(args)
    except (MissingInput, FileNotFoundError) as e:
        print(f"error: missing input: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (ContractError, mil.ConfigError, tr.TrainingAborted, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
