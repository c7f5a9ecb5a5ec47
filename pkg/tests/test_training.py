import csv
import json
import math
from dataclasses import replace

import numpy as np
import pytest

from cineclip import diffcore as dc
from cineclip import encoders as enc
from cineclip import synthdata as sd
from cineclip import training as tr
from cineclip.diffcore import ContractError


@pytest.fixture(scope="module")
def corpus():
    studies = sd.sample_population(32, seed=11)
    splits = sd.make_splits([s.study_id for s in studies], 11)
    return studies, splits


def _cfg(**kw):
    base = dict(epochs=3, batch_size=4, checkpoint_interval=1, decay_epoch=2, lr=1e-3)
    base.update(kw)
    return tr.RunConfig(**base)


@pytest.fixture(scope="module")
def pretrained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    studies, splits = corpus
    res = tr.pretrain(_cfg(), studies, splits, out_dir=out)
    return out, res


def test_checkpoint_count_and_flood_bound(pretrained):
    out, res = pretrained
    assert len(tr.list_checkpoints(out)) == math.floor(3 / 1)
    assert (out / "final" / "params.bin").exists()
    with open(out / "loss_log.csv") as f:
        rows = list(csv.DictReader(f))
    assert rows and all(float(r["flooded_loss"]) >= 0.5 for r in rows)
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["config"]["epochs"] == 3


def test_checkpoint_roundtrip_byte_identical(pretrained, tmp_path):
    out, _ = pretrained
    ck = tr.load_checkpoint(out / "final")
    tr.save_checkpoint(tmp_path / "again", ck.params, ck.meta, ck.optim)
    for name in ("params.bin", "optim.bin", "manifest.json"):
        assert (tmp_path / "again" / name).read_bytes() == (out / "final" / name).read_bytes()


def test_checkpoint_layout(tmp_path):
    p = dc.ParamSet()
    p.add("a.w", np.arange(6, dtype=np.float32).reshape(2, 3))
    tr.save_checkpoint(tmp_path / "c", p, {"epoch": 1})
    raw = (tmp_path / "c" / "params.bin").read_bytes()
    assert raw[:4] == b"CKPT" and int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 3 and raw[12:15] == b"a.w"
    assert int.from_bytes(raw[15:19], "little") == 2
    assert np.frombuffer(raw[27:], "<f4").tolist() == list(range(6))


def test_unknown_format_version_rejected(pretrained, tmp_path):
    out, _ = pretrained
    ck = tr.load_checkpoint(out / "final")
    path = tr.save_checkpoint(tmp_path / "v", ck.params, ck.meta)
    m = json.loads((path / "manifest.json").read_text())
    m["format_version"] = 99
    (path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ContractError):
        tr.load_checkpoint(path)
    with pytest.raises(FileNotFoundError):
        tr.load_checkpoint(tmp_path / "missing")


def test_resume_reproduces_uninterrupted_run(corpus, pretrained, tmp_path):
    out, full = pretrained
    studies, splits = corpus
    tr.pretrain(_cfg(), studies, splits, out_dir=tmp_path, stop_after=1)
    resumed = tr.pretrain(_cfg(), studies, splits, out_dir=tmp_path, resume=tmp_path / "ckpt_epoch0001")
    for name in full.params.names():
        assert resumed.params[name].data.tobytes() == full.params[name].data.tobytes(), name


def test_pretrain_needs_enough_studies(corpus):
    studies, splits = corpus
    with pytest.raises(ContractError):
        tr.pretrain(_cfg(batch_size=64), studies, splits)


def test_overlapping_splits_abort(corpus):
    studies, splits = corpus
    bad = dict(splits, test=splits["test"] + splits["train"][:1])
    with pytest.raises(ContractError):
        tr.pretrain(_cfg(), studies, bad)


def test_subset_ids():
    ids = [f"s{i}" for i in range(200)]
    a = tr.subset_ids(ids, 0.01, 5)
    assert len(a) == 2 and a == tr.subset_ids(ids, 0.01, 5)
    assert len(tr.subset_ids(ids, 0.1, 5)) == 20
    assert tr.subset_ids(ids, 1.0, 5) == ids


def test_bag_views_keeps_half_the_sax_stack(corpus):
    study = corpus[0][0]
    tags = tr.bag_views(study, 0.5, 3)
    assert tags[:3] == ["2CH", "3CH", "4CH"] and len(tags) == 4
    assert tr.bag_views(study, 1.0, 3) == study.view_tags


def _snapshot(params):
    return {n: params[n].data.tobytes() for n in params.names()}


def test_finetune_freeze_contract(corpus, pretrained, tmp_path):
    studies, splits = corpus
    out, _ = pretrained
    ck = tr.load_checkpoint(out / "final")
    cfg = tr.finetune_defaults(epochs=2, batch_size=4, lr=1e-2)
    res = tr.finetune_regression(cfg, studies, splits, init=ck, out_dir=tmp_path)
    changed = {n for n in res.params.names() if n.startswith("video.")
               and res.params[n].data.tobytes() != ck.params[n].data.astype(np.float32).tobytes()}
    assert changed <= {"video.proj.weight", "video.proj.bias"} and changed
    assert res.metrics["n_trainable"] == tr.expected_finetune_trainable(res.params)
    manifest = json.loads((tmp_path / "run_manifest.json").read_text())
    assert manifest["n_trainable"] == res.metrics["n_trainable"]
    with open(tmp_path / "predictions.csv") as f:
        assert len(list(csv.reader(f))) == len(splits["test"]) + 1
    for key in ("test", "bland_altman", "hfref_auroc"):
        assert key in res.metrics


def test_frozen_mode_rejected_for_downstream(corpus):
    studies, splits = corpus
    with pytest.raises(ContractError):
        tr.finetune_regression(tr.finetune_defaults(freeze_mode="frozen"), studies, splits)


def test_classification_outputs(corpus, tmp_path):
    studies, splits = corpus
    cfg = tr.finetune_defaults("disease_classification", epochs=1, batch_size=4, disease_label="low_ef",
                               freeze_mode="transfer")
    res = tr.finetune_classification(cfg, studies, splits, out_dir=tmp_path)
    train_y = [s.phenotype.flags["low_ef"] for s in studies if s.study_id in set(splits["train"])]
    p = np.mean(train_y)
    assert res.metrics["pos_weight"] == pytest.approx((1 - p) / p, abs=1e-12)
    assert len(res.predictions) == len(splits["test"])
    assert all(0 < r[1] < 1 for r in res.predictions)
    n_views = {len(s.videos) for s in studies}
    assert len(res.attention) == len(splits["test"]) * n_views.pop()


def test_zero_positive_label_is_config_error(corpus):
    studies, splits = corpus
    neg = [s for s in studies if not s.phenotype.flags["dilation"]]
    ids = {s.study_id for s in neg}
    sp = {k: [i for i in v if i in ids] for k, v in splits.items()}
    from cineclip.milhead import ConfigError
    with pytest.raises(ConfigError, match="dilation"):
        tr.finetune_classification(tr.finetune_defaults("disease_classification", disease_label="dilation"),
                                   neg, sp)


def test_zero_shot_embed_table(corpus, pretrained, tmp_path):
    studies, _ = corpus
    out, _ = pretrained
    ck = tr.load_checkpoint(out / "final")
    rows = tr.zero_shot_embed(ck, studies[:4])
    assert len(rows) == sum(len(s.videos) for s in studies[:4])
    again = tr.zero_shot_embed(ck, studies[:4])
    assert all(a[3].tobytes() == b[3].tobytes() for a, b in zip(rows, again))
    tr.write_embeddings_csv(tmp_path / "e.csv", rows)
    back = tr.read_embeddings_csv(tmp_path / "e.csv")
    assert [r[:3] for r in back] == [r[:3] for r in rows]
    assert all(np.array_equal(a[3], b[3]) for a, b in zip(rows, back))


def test_sweep_needs_three_checkpoints(corpus, pretrained):
    studies, splits = corpus
    out, _ = pretrained
    with pytest.raises(ContractError):
        tr.sweep_pretrain_quality(tr.list_checkpoints(out)[:2], tr.finetune_defaults(), studies, splits)
