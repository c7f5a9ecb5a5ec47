# %% [markdown]
# # Contrastive loss, MIL head and gradient checks
#
# A quick tour of the differentiable pieces. Everything runs on the package's
# own reverse-mode engine.

# %%
import math

import numpy as np

from cineclip import contrastive as ct
from cineclip import diffcore as dc
from cineclip import encoders as enc
from cineclip import milhead as mh
from cineclip.contrastive import ContrastiveConfig, JointBatch
from cineclip.diffcore import ParamSet

# %% [markdown]
# With every pair equally similar, each row of the softmax is uniform and the
# loss is exactly ln N.

# %%
for n in (2, 4, 8, 32):
    v = np.tile([[0.6, 0.8]], (n, 1))
    print(n, ct.infonce_v2t(JointBatch(v, v), 0.1).item(), math.log(n))

# %% [markdown]
# Flooding reflects the loss about the level b: below b the gradient flips
# sign, which pushes training back up towards b.

# %%
for loss in (0.25, 0.5, 0.75):
    print(loss, "->", ct.flood(loss, 0.5).item())

# %% [markdown]
# Gradient check of the bidirectional loss with respect to the unnormalized
# embeddings.

# %%
rng = np.random.default_rng(0)
p = ParamSet()
p.add("V", rng.standard_normal((6, 4)))
p.add("U", rng.standard_normal((6, 4)))
cfg = ContrastiveConfig(temperature=0.2, lam=0.3)


def loss(ps):
    return ct.combined_loss(JointBatch(enc.l2_normalize(ps["V"]), enc.l2_normalize(ps["U"])), cfg)


report = dc.grad_check(loss, p)
print(report.passed, report.max_rel_err)

# %% [markdown]
# The gated attention head pools a bag of view embeddings. Weights sum to one
# and do not care about the order of the views.

# %%
hc = mh.HeadConfig.for_task("regression")
hp = mh.init_head_params(8, hc, rng, dtype=np.float64)
H = rng.standard_normal((5, 8))
out, a = mh.bag_forward(mh.Bag(H), hp, hc)
perm = rng.permutation(5)
out_p, a_p = mh.bag_forward(mh.Bag(H[perm]), hp, hc)
print("weights", np.round(a.data, 3), "sum", a.data.sum())
print("permuted output equal:", np.isclose(out.item(), out_p.item()))

# %% [markdown]
# The same harness on a small encoder. The key part of the qkv bias is left
# out: softmax ignores a constant shift of the scores, so its gradient is zero.

# %%
small = enc.EncoderConfig(
    video=enc.VideoConfig(frames=4, height=8, width=8, cube=(2, 2, 2), stride=(2, 2, 2),
                          stages=(enc.StageConfig(8, 1, 1, (1, 1, 1), (1, 2, 2)),
                                  enc.StageConfig(12, 2, 1, (1, 2, 2), (1, 2, 2)))),
    text=enc.TextConfig(vocab_size=12, max_tokens=6, layers=1, heads=2, hidden=8),
    joint_dim=8)
ep = enc.init_encoder_params(small, seed=1, dtype=np.float64)
for name in ep.names():
    ep.set_trainable(name, name.startswith("video.") and not name.endswith("qkv.bias"))
x = rng.random((2, 1, 4, 8, 8))
w = rng.standard_normal((2, 8))
rep = dc.grad_check(lambda ps: dc.sum_(enc.project(enc.encode_video(x, ps, small), ps, "video") * w),
                    ep, max_per_param=3, rng=rng)
print("encoder gradients pass:", rep.passed, "worst", rep.worst)
print("desk profile attention maps:", enc.attention_map_count(enc.DESK_PROFILE))
