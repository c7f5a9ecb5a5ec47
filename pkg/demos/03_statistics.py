# %% [markdown]
# # Evaluation statistics
#
# AUROC with DeLong and bootstrap intervals, the paired DeLong test,
# Bland-Altman agreement and exact t-SNE.

# %%
import numpy as np

from cineclip import evalstats as ev

print(ev.auroc([0.8, 0.4, 0.6, 0.2], [1, 1, 0, 0]).auc)

rng = np.random.default_rng(4)
y = np.r_[np.ones(100), np.zeros(100)].astype(int)
s = rng.standard_normal(200) + y
r = ev.delong_ci(s, y)
print("AUC", round(r.auc, 3), "DeLong", np.round(r.ci95, 3), "bootstrap", np.round(ev.bootstrap_ci(s, y), 3))

# %% [markdown]
# Two scorers on the same samples: the paired test uses the covariance of
# their structural components.

# %%
weak = rng.standard_normal(200)          # uninformative scorer
print("AUCs", round(ev.auroc(s, y).auc, 3), round(ev.auroc(weak, y).auc, 3), "p =", round(ev.delong_compare(s, weak, y), 4))

# %%
ba = ev.bland_altman([10, 20, 30], [12, 18, 30])
print(ba)

# %% [markdown]
# t-SNE on two well separated Gaussian clusters. KL divergence drops from
# the random start, and the clusters come out apart.

# %%
X = np.vstack([rng.standard_normal((50, 16)), rng.standard_normal((50, 16)) + 2.5])
Y, info = ev.tsne(X, seed=0, return_info=True)
print("KL", round(info.kl_initial, 3), "->", round(info.kl_final, 3))
print("cluster centres", Y[:50].mean(axis=0).round(1), Y[50:].mean(axis=0).round(1))
