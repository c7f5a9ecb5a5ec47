# %% [markdown]
# # Pretraining, zero-shot probe and finetuning
#
# The end-to-end experiment of the acceptance suite: 1024 studies (512 for
# training) and 30 epochs, about 7 minutes on one core. Shrinking it via
# CINECLIP_DEMO_STUDIES / CINECLIP_DEMO_EPOCHS is possible, but below roughly
# 900 optimizer steps the contrastive loss never leaves its ln(batch)
# plateau and the probe shows no gain over random init.

# %%
import os
import tempfile

from cineclip import encoders as enc
from cineclip import evalstats as ev
from cineclip import synthdata as sd
from cineclip import training as tr

n = int(os.environ.get("CINECLIP_DEMO_STUDIES", 1024))
epochs = int(os.environ.get("CINECLIP_DEMO_EPOCHS", 30))
studies = sd.sample_population(n, seed=7)
splits = sd.make_splits([s.study_id for s in studies], seed=7)
out = tempfile.mkdtemp(prefix="cineclip_demo_")

# %% [markdown]
# Contrastive pretraining on the train split. The loss sits near ln(batch)
# until video and report embeddings start to line up.

# %%
cfg = tr.RunConfig(epochs=epochs, lr=1e-3, decay_epoch=max(1, epochs * 2 // 3), checkpoint_interval=max(1, epochs // 4))
res = tr.pretrain(cfg, studies, splits, out_dir=out)
for row in res.loss_log[:: max(1, len(res.loss_log) // 6)]:
    print(row)

# %% [markdown]
# Zero-shot: freeze the encoder, average the view embeddings per study and fit
# a logistic probe for the low-EF flag. The baseline is the same network at its
# initialization.

# %%
ck = tr.load_checkpoint(res.final)
rand = enc.init_encoder_params(enc.DESK_PROFILE, cfg.seed)
sc, y, _ = tr.probe_flag(tr.zero_shot_embed(ck, studies), studies, splits)
sr, _, _ = tr.probe_flag(tr.zero_shot_embed(rand, studies), studies, splits)
print("probe AUROC contrastive", round(ev.auroc(sc, y).auc, 3), "random init", round(ev.auroc(sr, y).auc, 3))

# %% [markdown]
# Finetune mode trains only the video projection and the MIL head, here on
# 10% of the training labels.

# %%
ft = tr.finetune_defaults("lvef_regression", freeze_mode="finetune", data_fraction=0.1,
                          lr=1e-3, max_steps=200, eval_interval=50)
r = tr.finetune_regression(ft, studies, splits, init=ck)
print("trainable scalars", r.metrics["n_trainable"], "test MAE", round(r.metrics["test"]["mae"], 4))
print("Bland-Altman", {k: round(v, 4) for k, v in r.metrics["bland_altman"].items() if isinstance(v, float)})
