import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cineclip import synthdata as sd
from cineclip.diffcore import ContractError
from cineclip.synthdata import AugmentPolicy, Phenotype


def _clean_sax(pheno, T=16, tag="SAX0"):
    return sd.render_view(pheno, tag, T, 32, 32, rng=None, noise_sigma=0.0)


def test_ef_oracle_on_example():
    assert 0.58 <= sd.estimate_ef(_clean_sax(Phenotype(0.6))) <= 0.62


def test_ef_oracle_over_random_phenotypes():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(500):
        ph = Phenotype(float(rng.uniform(0.1, 0.8)), float(rng.uniform(0.04, 0.15)),
                       float(rng.uniform(0.8, 1.3)), 1.0)
        worst = max(worst, abs(sd.estimate_ef(_clean_sax(ph)) - ph.ef))
    assert worst <= 0.02


def test_low_ef_boundary_areas_nearly_equal():
    area = sd.measured_cavity_area(_clean_sax(Phenotype(0.05)))
    assert area.min() / area.max() >= 0.95


def test_generation_is_deterministic():
    a = sd.generate_study(Phenotype(0.5), seed=11)
    b = sd.generate_study(Phenotype(0.5), seed=11)
    assert a.report == b.report
    assert all(ta == tb and va.tobytes() == vb.tobytes() for (ta, va), (tb, vb) in zip(a.videos, b.videos))
    assert len(a.report) >= 6
    assert all(v.shape == (1, 16, 32, 32) and v.min() >= 0 and v.max() <= 1 for _, v in a.videos)


def test_generation_errors():
    with pytest.raises(ContractError):
        sd.generate_study(Phenotype(0.5), views=())
    with pytest.raises(ContractError):
        sd.generate_study(Phenotype(0.95, flags=None), seed=0)
    with pytest.raises(ContractError):
        Phenotype(0.3, flags={"low_ef": False, "hypertrophy": False, "dilation": False})


def test_population_prevalence_and_seeds():
    pop = sd.sample_population(1000, seed=5, prevalence={"hypertrophy": 0.1}, views=("SAX0",), frames=2, size=(8, 8))
    count = sum(s.phenotype.flags["hypertrophy"] for s in pop)
    assert 70 <= count <= 130
    assert sd.sample_population(0, seed=5) == []
    a = [s.study_id for s in sd.sample_population(3, 1, views=("SAX0",), frames=2, size=(8, 8))]
    b = [s.study_id for s in sd.sample_population(3, 2, views=("SAX0",), frames=2, size=(8, 8))]
    assert a != b
    with pytest.raises(ContractError):
        sd.sample_population(2, 0, prevalence={"low_ef": 1.5})


def test_reports_are_faithful_and_distractors_neutral():
    rng = np.random.default_rng(1)
    for s in sd.sample_population(300, seed=9, views=("SAX0",), frames=2, size=(8, 8)):
        assert sd.read_flags(s.report) == s.phenotype.flags
        core = [x for x in s.report if x not in sd._DISTRACTORS]
        shuffled = core + list(rng.permutation([x for x in s.report if x in sd._DISTRACTORS]))
        assert sd.read_flags(shuffled) == s.phenotype.flags
        assert sd.read_flags(core) == s.phenotype.flags


def test_identity_augmentation_is_bitwise():
    v = sd.generate_study(Phenotype(0.5), seed=2).videos[0][1]
    assert sd.augment_video(v, AugmentPolicy.identity(), seed=3).tobytes() == v.tobytes()
    assert sd.augment_video(v, None, seed=3).tobytes() == v.tobytes()


def test_augmentation_same_transform_every_frame():
    v = sd.generate_study(Phenotype(0.35), seed=4).videos[3][1]
    for seed in range(10):
        out, params = sd.augment_video(v, AugmentPolicy(), seed=seed, return_params=True)
        for k in range(v.shape[1]):
            assert np.max(np.abs(sd.apply_affine(v[0, k], params) - out[0, k])) < 1e-5


def test_full_turn_rotation():
    v = sd.generate_study(Phenotype(0.5), seed=5).videos[0][1][0, 0]
    params = dict(sd.IDENTITY_PARAMS, rotate=360.0)
    assert np.mean(np.abs(sd.apply_affine(v, params) - v)) < 0.02


@pytest.mark.parametrize("T,target,expected", [
    (32, 16, list(range(0, 32, 2))),
    (16, 16, list(range(16))),
    (8, 16, [i // 2 for i in range(16)]),
])
def test_temporal_subsample(T, target, expected):
    v = np.arange(T, dtype=np.float32).reshape(1, T, 1, 1)
    assert sd.temporal_subsample(v, target)[0, :, 0, 0].tolist() == expected


def test_tokenizer_examples():
    vocab = sd.build_vocab()
    assert len(vocab) <= 64
    ids = sd.tokenize([""], vocab, 8)
    assert ids.tolist() == [vocab.cls_id] + [0] * 7
    s = ["the walls are thickened", "the ejection fraction is 35 percent"]
    assert sd.detokenize(sd.tokenize(s, vocab, 48), vocab) == " ".join(s).split()
    long = sd.tokenize(["adult male"] * 40, vocab, 48)
    assert len(long) == 48 and long[0] == vocab.cls_id
    assert sd.tokenize(["zebra"], vocab, 3).tolist() == [1, vocab.unk_id, 0]


def test_every_report_word_in_vocab():
    vocab = sd.build_vocab()
    for s in sd.sample_population(100, seed=3, views=("SAX0",), frames=2, size=(8, 8)):
        for sent in s.report:
            assert all(vocab.id(w) != vocab.unk_id for w in sent.split()), sent


def test_splits():
    ids = [f"s{i}" for i in range(40)]
    sp = sd.make_splits(ids, 0)
    assert sd.check_splits(sp, ids)
    assert sorted(sum(sp.values(), [])) == sorted(ids)
    with pytest.raises(ContractError):
        sd.check_splits({"train": ["a"], "test": ["a"]})


def test_cine_roundtrip(tmp_path):
    v = np.random.default_rng(0).random((1, 4, 5, 6)).astype(np.float32)
    sd.write_cine(tmp_path / "x.cine", v)
    raw = (tmp_path / "x.cine").read_bytes()
    assert raw[:4] == b"CINE" and len(raw) == 20 + v.size * 4
    assert sd.read_cine(tmp_path / "x.cine").tobytes() == v.tobytes()


def test_dataset_roundtrip_bit_exact(tmp_path):
    studies = sd.sample_population(6, seed=1)
    splits = sd.make_splits([s.study_id for s in studies], 1)
    sd.save_dataset(tmp_path / "ds", studies, splits, {"seed": 1})
    back, sp, meta = sd.load_dataset(tmp_path / "ds")
    assert sp == splits and meta == {"seed": 1}
    for a, b in zip(studies, back):
        assert a.study_id == b.study_id and a.report == b.report and a.phenotype == b.phenotype
        for (ta, va), (tb, vb) in zip(a.videos, b.videos):
            assert ta == tb and va.tobytes() == vb.tobytes()
    with pytest.raises(FileNotFoundError):
        sd.load_dataset(tmp_path / "nope")


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 0.85), st.integers(0, 2 ** 31 - 1))
def test_render_stays_in_unit_interval(ef, seed):
    s = sd.generate_study(Phenotype(ef), views=("4CH", "SAX1"), seed=seed, frames=4)
    for _, v in s.videos:
        assert v.dtype == np.float32 and 0.0 <= v.min() and v.max() <= 1.0
