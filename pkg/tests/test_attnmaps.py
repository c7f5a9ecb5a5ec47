import numpy as np
import pytest

from cineclip import attnmaps as am
from cineclip import encoders as enc
from cineclip.diffcore import ContractError


def test_nearest_upsample_block_replication():
    m = np.zeros((2, 2))
    m[1, 0] = 1.0
    up = am.upsample_nearest(m, (8, 8))
    expected = np.zeros((8, 8))
    expected[4:, :4] = 1.0
    assert np.array_equal(up, expected)
    with pytest.raises(ContractError):
        am.upsample_nearest(m, (8,))


def test_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7)).astype(np.uint8)
    img[0, 0] = 10   # whitespace byte value at the raster start
    am.write_pgm(tmp_path / "x.pgm", img)
    raw = (tmp_path / "x.pgm").read_bytes()
    assert raw.startswith(b"P5\n7 5\n255\n")
    assert np.array_equal(am.read_pgm(tmp_path / "x.pgm"), img)


def test_quantization_within_one_level():
    m = np.random.default_rng(1).random((4, 8, 8)) * 0.3 + 0.01
    q, lo, hi = am.quantize(m)
    back = am.dequantize(q, lo, hi)
    assert np.max(np.abs(back - m)) <= (hi - lo) / 255.0
    q0, lo0, hi0 = am.quantize(np.full((2, 2), 0.25))
    assert np.all(q0 == 0) and am.dequantize(q0, lo0, hi0).tolist() == [[0.25, 0.25], [0.25, 0.25]]


def test_desk_maps_export_and_reload(tmp_path):
    cfg = enc.DESK_PROFILE
    params = enc.init_encoder_params(cfg, 0)
    video = np.random.default_rng(2).random((1, 8, 32, 32)).astype(np.float32)
    maps = am.class_token_maps(video, params, cfg)
    assert len(maps) == 15 == enc.attention_map_count(cfg)
    for m in maps[:-1]:
        assert 0 < m["map"].sum() <= 1 + 1e-6   # the class token keeps the remainder
    index = am.export_maps(maps, tmp_path, (8, 32, 32))
    assert len(index) == 15
    for entry, m in zip(index, maps):
        back = am.load_map(tmp_path, entry)
        up = am.upsample_nearest(m["map"], (8, 32, 32))
        assert back.shape == (8, 32, 32)
        assert np.max(np.abs(back - up)) <= (entry["max"] - entry["min"]) / 255.0 + 1e-12
