"""Attention heatmap export: class-token attention of every video-encoder head,
upsampled to the input grid and written as 8-bit PGM frame sequences."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import encoders as enc
from .diffcore import ContractError


def upsample_nearest(m, shape):
    """Nearest-neighbour resampling of an n-d array to ``shape`` (index floor(i * g / n))."""
    m = np.asarray(m)
    if m.ndim != len(shape):
        raise ContractError(f"cannot resample {m.shape} to {shape}")
    for axis, (g, n) in enumerate(zip(m.shape, shape)):
        idx = np.arange(n) * g // n
        m = np.take(m, idx, axis=axis)
    return m


def write_pgm(path, img):
    """Binary (P5) greyscale image with maxval 255."""
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ContractError("PGM frames must be 2-D uint8")
    H, W = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 4 or parts[0] != b"P5" or int(parts[3]) != 255:
        raise ContractError(f"{path}: only P5 with maxval 255 is supported")
    W, H = int(parts[1]), int(parts[2])
    # one whitespace byte separates maxval from the raster, so the raster is the tail
    return np.frombuffer(raw[len(raw) - W * H:], dtype=np.uint8).reshape(H, W)


def quantize(m):
    """Min-max normalize to 0..255; returns (uint8 array, lo, hi)."""
    lo, hi = float(m.min()), float(m.max())
    span = hi - lo
    q = np.zeros(m.shape, np.uint8) if span == 0 else np.rint((m - lo) / span * 255.0).astype(np.uint8)
    return q, lo, hi


def dequantize(q, lo, hi):
    return lo + q.astype(np.float64) / 255.0 * (hi - lo)


def class_token_maps(video, params, cfg):
    """One [T', H', W'] class-token-to-patch map per (layer, head), plus the aggregate.

    The aggregate is the head mean of the last block of the final stage.
    Returns a list of dicts with name, layer, head and map.
    """
    trace = []
    with dc.no_grad():
        enc.encode_video(video, params, cfg, trace=trace)
    maps = []
    for t in trace:
        attn = t["attn"][0]                 # [heads, Nq, Nk]
        grid = t["key_grid"]
        for h in range(attn.shape[0]):
            maps.append({"name": f"{t['name']}.h{h}", "layer": t["name"], "head": h,
                         "map": attn[h, 0, 1:].reshape(grid)})
    last = trace[-1]
    agg = last["attn"][0][:, 0, 1:].mean(axis=0).reshape(last["key_grid"])
    maps.append({"name": "aggregate", "layer": last["name"], "head": -1, "map": agg})
    if len(maps) != enc.attention_map_count(cfg):
        raise ContractError("attention map count disagrees with the encoder configuration")
    return maps


def export_maps(maps, out_dir, shape):
    """Write each map as per-frame PGMs under ``out_dir/NN_name/`` plus ``maps.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for i, m in enumerate(maps):
        up = upsample_nearest(m["map"], shape)
        q, lo, hi = quantize(up)
        d = out / f"{i:02d}_{m['name']}"
        d.mkdir(exist_ok=True)
        for t in range(q.shape[0]):
            write_pgm(d / f"frame{t:02d}.pgm", q[t])
        index.append({"index": i, "dir": d.name, "layer": m["layer"], "head": m["head"],
                      "grid": list(m["map"].shape), "min": lo, "max": hi})
    (out / "maps.json").write_text(json.dumps(index, indent=1) + "\n", encoding="utf-8")
    return index


def load_map(dir_path, entry):
    """Re-read one exported map and undo the normalization -> [T, H, W] floats."""
    d = Path(dir_path) / entry["dir"]
    frames = sorted(d.glob("frame*.pgm"))
    q = np.stack([read_pgm(f) for f in frames])
    return dequantize(q, entry["min"], entry["max"])
