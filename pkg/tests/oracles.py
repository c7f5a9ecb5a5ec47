"""Independent reference implementations used only by the tests."""
import numpy as np


def pairwise_auc(pos, neg):
    pos, neg = np.asarray(pos, float), np.asarray(neg, float)
    psi = (pos[:, None] > neg[None, :]) + 0.5 * (pos[:, None] == neg[None, :])
    return psi.mean()


def delong_bruteforce(pos, neg):
    """Structural components straight from the psi matrix."""
    pos, neg = np.asarray(pos, float), np.asarray(neg, float)
    psi = (pos[:, None] > neg[None, :]) + 0.5 * (pos[:, None] == neg[None, :])
    v10, v01 = psi.mean(axis=1), psi.mean(axis=0)
    return psi.mean(), v10.var(ddof=1) / pos.size + v01.var(ddof=1) / neg.size, v10, v01


def bootstrap_auc_ci(scores, labels, reps, seed):
    """Stratified percentile bootstrap of the AUC."""
    rng = np.random.default_rng(seed)
    scores, labels = np.asarray(scores, float), np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    aucs = np.empty(reps)
    for r in range(reps):
        p = pos[rng.integers(0, pos.size, pos.size)]
        n = neg[rng.integers(0, neg.size, neg.size)]
        aucs[r] = pairwise_auc(p, n)
    return np.percentile(aucs, [2.5, 97.5])


def paired_permutation_p(a, b, labels, reps, seed):
    """Swap the two predictors' scores per sample at random; two-sided p for the AUC difference."""
    rng = np.random.default_rng(seed)
    a, b, labels = np.asarray(a, float), np.asarray(b, float), np.asarray(labels).astype(bool)

    def diff(x, y):
        return pairwise_auc(x[labels], x[~labels]) - pairwise_auc(y[labels], y[~labels])

    obs = abs(diff(a, b))
    hits = 0
    for _ in range(reps):
        swap = rng.random(a.size) < 0.5
        hits += abs(diff(np.where(swap, b, a), np.where(swap, a, b))) >= obs - 1e-12
    return (hits + 1) / (reps + 1)
