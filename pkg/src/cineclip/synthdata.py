"""Synthetic cine studies: pulsating-cavity phantoms, template reports, tokenizer, augmentation.

Geometry is expressed as fractions of the frame side ``S = min(H, W)``:

* cavity radius at end-diastole  r_max = 0.18 * chamber_scale * S
* cavity area over time          A(t) = A_max * (1 - ef * (1 - cos(2 pi c t / T)) / 2)
  so frame 0 is end-diastole and 1 - A_min / A_max = ef whenever a frame lands
  on the trough (c = heart_rate_cycles)
* myocardial wall thickness      wall_thickness * S, constant through the cycle

Pixel intensities: background 0.10, myocardium 0.30, blood pool 0.85, plus
Gaussian noise (sigma 0.03) and clipping to [0, 1]. Edges are anti-aliased with
a one-pixel linear ramp, so summed cavity coverage tracks the analytic area.

Flag thresholds: low_ef <=> ef < 0.40; hypertrophy <=> wall_thickness >= 0.10;
dilation <=> chamber_scale >= 1.15.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .diffcore import ContractError

BACKGROUND, MYOCARDIUM, BLOOD = 0.10, 0.30, 0.85
NOISE_SIGMA = 0.03
LOW_EF_CUTOFF = 0.40
HYPERTROPHY_WALL = 0.10
DILATION_SCALE = 1.15

EF_RANGE = (0.05, 0.85)
WALL_RANGE = (0.03, 0.16)
SCALE_RANGE = (0.7, 1.4)
CYCLES_RANGE = (0.55, 1.5)

DEFAULT_VIEWS = ("2CH", "3CH", "4CH", "SAX0", "SAX1")
DEFAULT_PREVALENCE = {"low_ef": 0.3, "hypertrophy": 0.2, "dilation": 0.2}
FLAGS = ("low_ef", "hypertrophy", "dilation")

# long-axis views: (aspect a/b, orientation in degrees)
_LONG_AXIS = {"2CH": (1.8, 60.0), "3CH": (1.6, 30.0), "4CH": (2.0, 95.0)}
# SAX slice index -> radius factor (basal to mid)
_SAX_SCALE = (1.0, 0.85, 0.72, 0.6)


def view_kind(tag):
    return "SAX" if tag.startswith("SAX") else tag


@dataclass
class Phenotype:
    ef: float
    wall_thickness: float = 0.065
    chamber_scale: float = 1.0
    heart_rate_cycles: float = 1.0
    flags: dict = None

    def __post_init__(self):
        derived = {
            "low_ef": self.ef < LOW_EF_CUTOFF,
            "hypertrophy": self.wall_thickness >= HYPERTROPHY_WALL,
            "dilation": self.chamber_scale >= DILATION_SCALE,
        }
        if self.flags is None:
            self.flags = derived
        elif {k: bool(v) for k, v in self.flags.items()} != derived:
            raise ContractError(f"flags {self.flags} inconsistent with continuous fields {derived}")

    def validate(self):
        checks = [("ef", self.ef, EF_RANGE), ("wall_thickness", self.wall_thickness, WALL_RANGE),
                  ("chamber_scale", self.chamber_scale, SCALE_RANGE),
                  ("heart_rate_cycles", self.heart_rate_cycles, CYCLES_RANGE)]
        for name, val, (lo, hi) in checks:
            if not lo <= val <= hi:
                raise ContractError(f"{name}={val} outside [{lo}, {hi}]")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class Study:
    study_id: str
    videos: list                      # [(view_tag, float32 [1, T, H, W])]
    report: list
    phenotype: Phenotype
    seed: int = 0

    def video(self, tag):
        for t, v in self.videos:
            if t == tag:
                return v
        raise KeyError(tag)

    @property
    def view_tags(self):
        return [t for t, _ in self.videos]


# ---------------------------------------------------------------- rendering

def cavity_area_fraction(ef, cycles, T):
    """A(t)/A_max for t = 0..T-1."""
    phase = 2.0 * math.pi * cycles * np.arange(T) / T
    return 1.0 - ef * (1.0 - np.cos(phase)) / 2.0


def _coverage(signed_dist):
    return np.clip(0.5 - signed_dist, 0.0, 1.0)


def _ellipse_dist(x, y, a, b):
    """Approximate signed distance (pixels) to an axis-aligned ellipse boundary."""
    rho = np.sqrt((x / a) ** 2 + (y / b) ** 2)
    return (rho - 1.0) * math.sqrt(a * b)


def render_view(pheno, tag, T, H, W, rng=None, center_jitter=(0.0, 0.0), angle_jitter=0.0,
                noise_sigma=NOISE_SIGMA, return_cavity=False):
    """Render [1, T, H, W] float32 for one view; noise drawn from ``rng`` if given."""
    S = min(H, W)
    r_max = 0.18 * pheno.chamber_scale * S
    wall = pheno.wall_thickness * S
    frac = cavity_area_fraction(pheno.ef, pheno.heart_rate_cycles, T)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    x = xx - (W - 1) / 2.0 - center_jitter[1]
    y = yy - (H - 1) / 2.0 - center_jitter[0]
    kind = view_kind(tag)
    if kind == "SAX":
        k = int(tag[3:] or 0)
        r0 = r_max * _SAX_SCALE[min(k, len(_SAX_SCALE) - 1)]
        rho = np.sqrt(x * x + y * y)
    else:
        aspect, angle = _LONG_AXIS[kind]
        th = math.radians(angle + angle_jitter)
        xr = x * math.cos(th) + y * math.sin(th)
        yr = -x * math.sin(th) + y * math.cos(th)
        b0 = r_max / math.sqrt(aspect)
        a0 = b0 * aspect
    frames = np.empty((T, H, W))
    cavity = np.empty((T, H, W))
    for t in range(T):
        s = math.sqrt(frac[t])
        if kind == "SAX":
            cav = _coverage(rho - r0 * s)
            outer = _coverage(rho - (r0 * s + wall))
        else:
            a, b = a0 * s, b0 * s
            cav = _coverage(_ellipse_dist(xr, yr, a, b))
            outer = _coverage(_ellipse_dist(xr, yr, a + wall, b + wall))
        cavity[t] = cav
        frames[t] = BACKGROUND + (MYOCARDIUM - BACKGROUND) * outer + (BLOOD - MYOCARDIUM) * cav
    if rng is not None and noise_sigma > 0:
        frames = frames + noise_sigma * rng.standard_normal(frames.shape)
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)[None]
    if return_cavity:
        return frames, cavity
    return frames


def measured_cavity_area(frames):
    """Area-counting oracle: invert the blood/myocardium intensity mix per pixel."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 4:
        frames = frames[0]
    cov = np.clip((frames - MYOCARDIUM) / (BLOOD - MYOCARDIUM), 0.0, 1.0)
    return cov.reshape(frames.shape[0], -1).sum(axis=1)


def estimate_ef(frames):
    area = measured_cavity_area(frames)
    return 1.0 - area.min() / area.max()


# ------------------------------------------------------------------ reports

_DISTRACTORS = (
    "no pericardial effusion is seen",
    "the right ventricle is normal in size",
    "the aortic valve is trileaflet",
    "image quality is adequate",
    "the patient tolerated the exam well",
)


def ef_percent_token(ef):
    return str(int(math.floor(ef * 20)) * 5)


def systolic_grade(ef):
    if ef < 0.30:
        return "severely reduced"
    if ef < LOW_EF_CUTOFF:
        return "moderately reduced"
    if ef < 0.50:
        return "mildly reduced"
    return "normal"


def flag_sentences(pheno):
    return [
        f"the ejection fraction is {ef_percent_token(pheno.ef)} percent",
        f"systolic function is {systolic_grade(pheno.ef)}",
        "the left ventricle is dilated" if pheno.flags["dilation"] else "the left ventricle is normal in size",
        "the walls are thickened" if pheno.flags["hypertrophy"] else "wall thickness is normal",
    ]


def make_report(pheno, rng):
    sentences = flag_sentences(pheno)
    sentences.append("adult female" if rng.random() < 0.5 else "adult male")
    n_extra = int(rng.integers(2, len(_DISTRACTORS) + 1))
    sentences += [_DISTRACTORS[i] for i in sorted(rng.choice(len(_DISTRACTORS), n_extra, replace=False))]
    order = rng.permutation(len(sentences))
    return [sentences[i] for i in order]


def read_flags(report):
    """Rule-based reader recovering every flag from report text."""
    text = " | ".join(report)
    if "systolic function is" in text:
        low = ("moderately reduced" in text) or ("severely reduced" in text)
    else:
        low = False
        for s in report:
            w = s.split()
            if w[:4] == ["the", "ejection", "fraction", "is"] and len(w) >= 5 and w[4].isdigit():
                low = int(w[4]) < round(LOW_EF_CUTOFF * 100)
    return {
        "low_ef": low,
        "hypertrophy": "thickened" in text,
        "dilation": "ventricle is dilated" in text,
    }


# -------------------------------------------------------------- generation

def generate_study(pheno, views=DEFAULT_VIEWS, seed=0, frames=16, size=(32, 32), study_id=None,
                   noise_sigma=NOISE_SIGMA):
    """Render every requested view and write a report; a pure function of (inputs, seed)."""
    if not views:
        raise ContractError("at least one view is required")
    pheno.validate()
    rng = np.random.default_rng(seed)
    H, W = size
    jitter = tuple(rng.uniform(-1.0, 1.0, 2))
    angle = float(rng.uniform(-10.0, 10.0))
    videos = [(tag, render_view(pheno, tag, frames, H, W, rng, jitter, angle, noise_sigma)) for tag in views]
    report = make_report(pheno, rng)
    return Study(study_id or f"seed{seed}", videos, report, pheno, seed)


def sample_phenotype(rng, prevalence=None):
    prev = dict(DEFAULT_PREVALENCE, **(prevalence or {}))
    low = rng.random() < prev["low_ef"]
    hyp = rng.random() < prev["hypertrophy"]
    dil = rng.random() < prev["dilation"]
    ef = rng.uniform(0.10, LOW_EF_CUTOFF) if low else rng.uniform(LOW_EF_CUTOFF, 0.80)
    wall = rng.uniform(0.11, 0.15) if hyp else rng.uniform(0.05, 0.08)
    scale = rng.uniform(1.18, 1.32) if dil else rng.uniform(0.85, 1.10)
    cycles = rng.uniform(0.9, 1.3)
    return Phenotype(float(ef), float(wall), float(scale), float(cycles))


def sample_population(n, seed, prevalence=None, views=DEFAULT_VIEWS, frames=16, size=(32, 32)):
    """``n`` studies with flags drawn at the given prevalences (continuous fields follow the flag)."""
    prevalence = dict(DEFAULT_PREVALENCE, **(prevalence or {}))
    for k, v in prevalence.items():
        if not 0.0 <= v <= 1.0:
            raise ContractError(f"prevalence for {k} must lie in [0, 1]")
    if n == 0:
        return []
    root = np.random.SeedSequence(seed)
    children = root.spawn(n)
    studies = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        pheno = sample_phenotype(rng, prevalence)
        study_seed = int(child.generate_state(1)[0])
        studies.append(generate_study(pheno, views, study_seed, frames, size, study_id=f"s{seed}-{i:05d}"))
    return studies


def make_splits(study_ids, seed, fractions=(0.5, 0.25, 0.25)):
    """Study-level train/val/test split from a seeded permutation."""
    ids = list(study_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(fractions[0] * len(ids)))
    n_val = int(round(fractions[1] * len(ids)))
    pick = [ids[i] for i in order]
    return {"train": pick[:n_train], "val": pick[n_train:n_train + n_val], "test": pick[n_train + n_val:]}


def check_splits(splits, study_ids=None):
    seen = {}
    for name, ids in splits.items():
        for sid in ids:
            if sid in seen:
                raise ContractError(f"study {sid} appears in both {seen[sid]} and {name}")
            seen[sid] = name
    if study_ids is not None:
        missing = set(seen) - set(study_ids)
        if missing:
            raise ContractError(f"split references unknown studies: {sorted(missing)[:5]}")
    return True


# ------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentPolicy:
    max_rotate: float = 15.0          # degrees
    scale: tuple = (0.85, 1.15)
    max_translate: float = 0.10       # fraction of the frame side
    max_shear: float = 8.0            # degrees
    gain: tuple = (0.9, 1.1)

    @classmethod
    def identity(cls):
        return cls(0.0, (1.0, 1.0), 0.0, 0.0, (1.0, 1.0))

    def sample(self, rng):
        return {
            "rotate": float(rng.uniform(-self.max_rotate, self.max_rotate)),
            "scale": float(rng.uniform(*self.scale)),
            "translate": tuple(float(v) for v in rng.uniform(-self.max_translate, self.max_translate, 2)),
            "shear": float(rng.uniform(-self.max_shear, self.max_shear)),
            "gain": float(rng.uniform(*self.gain)),
        }


IDENTITY_PARAMS = {"rotate": 0.0, "scale": 1.0, "translate": (0.0, 0.0), "shear": 0.0, "gain": 1.0}


def _affine_matrix(params, H, W):
    """Output->input pixel map (matrix, offset) for a transform about the frame centre."""
    th = math.radians(params["rotate"])
    sh = math.tan(math.radians(params["shear"]))
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    fwd = rot @ np.array([[1.0, sh], [0.0, 1.0]]) * params["scale"]
    inv = np.linalg.inv(fwd)
    c = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
    shift = np.array(params["translate"]) * np.array([H, W])
    offset = c - inv @ (c + shift)
    return inv, offset


def apply_affine(frame, params):
    """Apply one sampled transform to a single [H, W] frame (bilinear)."""
    H, W = frame.shape
    m, off = _affine_matrix(params, H, W)
    out = ndimage.affine_transform(np.asarray(frame, dtype=np.float64), m, off, order=1, mode="nearest")
    return np.clip(out * params["gain"], 0.0, 1.0)


def augment_video(video, policy=None, seed=0, return_params=False):
    """Sample one spatial+intensity transform per clip and apply it to every frame."""
    video = np.asarray(video)
    params = IDENTITY_PARAMS if policy is None else policy.sample(np.random.default_rng(seed))
    if params == IDENTITY_PARAMS:
        out = video.copy()
    else:
        C, T, H, W = video.shape
        m2, off2 = _affine_matrix(params, H, W)
        m = np.eye(3)
        m[1:, 1:] = m2
        off = np.concatenate([[0.0], off2])
        out = np.empty(video.shape, dtype=video.dtype)
        for c in range(C):
            res = ndimage.affine_transform(video[c].astype(np.float64), m, off, order=1, mode="nearest")
            out[c] = np.clip(res * params["gain"], 0.0, 1.0)
    return (out, params) if return_params else out


def temporal_subsample(video, target_T):
    """Frames floor(i*T/target_T) mod T for i < target_T."""
    if target_T < 1:
        raise ContractError("target_T must be >= 1")
    T = video.shape[-3]
    idx = (np.arange(target_T) * T // target_T) % T
    return np.take(video, idx, axis=-3)


# ------------------------------------------------------------------ vocab

PAD, CLS, UNK = "<pad>", "<cls>", "<unk>"


@dataclass
class Vocab:
    tokens: list = field(default_factory=list)

    def __post_init__(self):
        if self.tokens[:3] != [PAD, CLS, UNK]:
            raise ContractError("vocabulary must start with <pad>, <cls>, <unk>")
        if len(set(self.tokens)) != len(self.tokens):
            raise ContractError("duplicate vocabulary entries")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    pad_id, cls_id, unk_id = 0, 1, 2

    def id(self, token):
        return self.index.get(token, self.unk_id)


def build_vocab():
    """Every word the report grammar can produce, in a fixed order."""
    words = []
    sentences = list(_DISTRACTORS) + ["adult female", "adult male"]
    for grade in ("severely reduced", "moderately reduced", "mildly reduced", "normal"):
        sentences.append(f"systolic function is {grade}")
    sentences += ["the left ventricle is dilated", "the left ventricle is normal in size",
                  "the walls are thickened", "wall thickness is normal",
                  "the ejection fraction is percent"]
    for s in sentences:
        for w in s.split():
            if w not in words:
                words.append(w)
    numbers = [str(v) for v in range(5, 90, 5)]
    return Vocab([PAD, CLS, UNK] + words + numbers)


def tokenize(sentences, vocab, max_len):
    """Lowercased whitespace tokens -> ids, class id first, truncated / zero-padded to max_len."""
    ids = [vocab.cls_id]
    for s in sentences:
        ids.extend(vocab.id(w) for w in s.lower().split())
    ids = ids[:max_len]
    return np.array(ids + [vocab.pad_id] * (max_len - len(ids)), dtype=np.int64)


def detokenize(ids, vocab):
    return [vocab.tokens[i] for i in ids if i not in (vocab.pad_id, vocab.cls_id)]


# ---------------------------------------------------------- serialization

CINE_MAGIC = b"CINE"


def write_cine(path, video):
    video = np.asarray(video, dtype="<f4")
    if video.ndim != 4:
        raise ContractError("cine files hold [C, T, H, W] arrays")
    with open(path, "wb") as f:
        f.write(CINE_MAGIC + struct.pack("<4I", *video.shape))
        f.write(video.tobytes(order="C"))


def read_cine(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CINE_MAGIC:
        raise ContractError(f"{path}: bad magic {raw[:4]!r}")
    dims = struct.unpack("<4I", raw[4:20])
    data = np.frombuffer(raw, dtype="<f4", offset=20)
    if data.size != int(np.prod(dims)):
        raise ContractError(f"{path}: payload size {data.size} != {dims}")
    return data.reshape(dims).astype(np.float32)


def save_dataset(out_dir, studies, splits, meta=None):
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)
    entries = []
    for s in studies:
        files = []
        for tag, vid in s.videos:
            name = f"videos/{s.study_id}_{tag}.cine"
            write_cine(out / name, vid)
            files.append([tag, name])
        report_name = f"reports/{s.study_id}.txt"
        (out / report_name).write_text("\n".join(s.report) + "\n", encoding="utf-8")
        entries.append({"study_id": s.study_id, "seed": s.seed, "phenotype": s.phenotype.to_dict(),
                        "videos": files, "report": report_name})
    manifest = {"format": "cine-dataset/1", "meta": meta or {}, "splits": splits, "studies": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_dataset(path):
    """Returns (studies, splits, meta)."""
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(str(mf))
    manifest = json.loads(mf.read_text(encoding="utf-8"))
    studies = []
    for e in manifest["studies"]:
        ph = e["phenotype"]
        pheno = Phenotype(ph["ef"], ph["wall_thickness"], ph["chamber_scale"], ph["heart_rate_cycles"], ph["flags"])
        videos = [(tag, read_cine(root / name)) for tag, name in e["videos"]]
        report = (root / e["report"]).read_text(encoding="utf-8").splitlines()
        studies.append(Study(e["study_id"], videos, report, pheno, e["seed"]))
    return studies, manifest["splits"], manifest["meta"]
