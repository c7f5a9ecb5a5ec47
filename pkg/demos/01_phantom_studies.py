# %% [markdown]
# # Synthetic cine studies
#
# Every study is a handful of pulsating-annulus phantoms (one per view plane)
# plus a short templated report. The cavity area follows a cosine over the
# cardiac cycle, so the ejection fraction can be read straight off the pixels.

# %%
import numpy as np

from cineclip import synthdata as sd

pheno = sd.Phenotype(ef=0.32, wall_thickness=0.12, chamber_scale=1.2)
study = sd.generate_study(pheno, seed=3)
print(study.study_id, study.view_tags)
print(pheno.flags)

# %% [markdown]
# The area-counting oracle recovers the ejection fraction from any view.

# %%
for tag, video in study.videos:
    print(f"{tag:5s} shape={video.shape}  measured ef={sd.estimate_ef(video):.3f}")

# %% [markdown]
# The report mixes label-bearing sentences with distractors. `read_flags`
# parses the flags back out, which is how the tests check that reports and
# phenotypes never disagree.

# %%
for line in study.report:
    print("  ", line)
print(sd.read_flags(study.report))

vocab = sd.build_vocab()
ids = sd.tokenize(study.report, vocab, max_len=48)
print(len(vocab), "tokens in the vocabulary")
print(ids)
print(" ".join(sd.detokenize(ids, vocab)))

# %% [markdown]
# Augmentation draws one affine warp and gain per clip and applies it to all
# frames, so the motion (and therefore the ejection fraction) survives.

# %%
video = study.video("SAX0")
aug, params = sd.augment_video(video, sd.AugmentPolicy(), seed=11, return_params=True)
print(params)
print("ef before", round(sd.estimate_ef(video), 3), "after", round(sd.estimate_ef(aug), 3))

# %% [markdown]
# A population sample with the default prevalences, and a 50:25:25 split.

# %%
studies = sd.sample_population(200, seed=7)
splits = sd.make_splits([s.study_id for s in studies], seed=7)
rates = {f: np.mean([s.phenotype.flags[f] for s in studies]) for f in sd.FLAGS}
print({k: round(float(v), 2) for k, v in rates.items()})
print({k: len(v) for k, v in splits.items()})
