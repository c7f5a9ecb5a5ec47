"""Evaluation statistics: empirical ROC, DeLong variance and paired test,
Bland-Altman agreement, regression errors, exact t-SNE, and a logistic probe."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, stats

from .diffcore import ContractError

Z95 = 1.959963984540054


@dataclass
class RocResult:
    auc: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    n_pos: int
    n_neg: int
    variance: float = None
    ci95: tuple = None
    degenerate: bool = False

    def to_dict(self):
        return {"auc": self.auc, "variance": self.variance, "ci95": list(self.ci95) if self.ci95 else None,
                "degenerate": self.degenerate, "n_pos": self.n_pos, "n_neg": self.n_neg}


@dataclass
class AgreementResult:
    bias: float
    sd_diff: float
    loa_low: float
    loa_high: float
    bias_ci: tuple
    n: int

    def to_dict(self):
        d = asdict(self)
        d["bias_ci"] = list(self.bias_ci)
        return d


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ContractError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise ContractError("scores must be finite")
    if not np.all(np.isin(labels, (0, 1))):
        raise ContractError("labels must be 0 or 1")
    labels = labels.astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0:
        raise ContractError("no positive samples (label 1) present")
    if neg.size == 0:
        raise ContractError("no negative samples (label 0) present")
    return pos, neg


def _placements(pos, neg):
    """Per-positive and per-negative structural components (ties count 1/2)."""
    # psi(x, y) = [x > y] + 0.5 [x == y], via ranks of the pooled sample
    m, n = pos.size, neg.size
    r_all = stats.rankdata(np.concatenate([pos, neg]))
    r_pos = stats.rankdata(pos)
    r_neg = stats.rankdata(neg)
    v10 = (r_all[:m] - r_pos) / n          # fraction of negatives below each positive
    v01 = 1.0 - (r_all[m:] - r_neg) / m    # fraction of positives above each negative
    return v10, v01


def auroc(scores, labels):
    """Empirical ROC and the Mann-Whitney AUC."""
    pos, neg = _split(scores, labels)
    v10, _ = _placements(pos, neg)
    auc = float(v10.mean())
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]   # end of each tie group
    tps = np.cumsum(y)[last]
    fps = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tps / pos.size]
    fpr = np.r_[0.0, fps / neg.size]
    thresholds = np.r_[np.inf, s[last]]
    return RocResult(auc, fpr, tpr, thresholds, int(pos.size), int(neg.size))


def delong_ci(scores, labels):
    """AUC with DeLong variance and a 95% normal CI clipped to [0, 1]."""
    pos, neg = _split(scores, labels)
    if pos.size < 2 or neg.size < 2:
        raise ContractError("DeLong variance needs at least 2 positives and 2 negatives")
    res = auroc(scores, labels)
    v10, v01 = _placements(pos, neg)
    var = float(np.var(v10, ddof=1) / pos.size + np.var(v01, ddof=1) / neg.size)
    half = Z95 * math.sqrt(var)
    res.variance = var
    res.ci95 = (max(0.0, res.auc - half), min(1.0, res.auc + half))
    res.degenerate = var == 0.0
    return res


def bootstrap_ci(scores, labels, reps=10_000, seed=0, chunk=1000):
    """Stratified percentile bootstrap 95% CI of the AUC.

    Positives and negatives are resampled separately, so every replicate keeps
    the original class counts.
    """
    pos, neg = _split(scores, labels)
    if reps < 1:
        raise ContractError("reps must be positive")
    rng = np.random.default_rng(seed)
    m, n = pos.size, neg.size
    aucs = []
    for start in range(0, reps, chunk):
        k = min(chunk, reps - start)
        p = pos[rng.integers(0, m, (k, m))]
        q = neg[rng.integers(0, n, (k, n))]
        r = stats.rankdata(np.concatenate([p, q], axis=1), axis=1)
        aucs.append((r[:, :m].sum(axis=1) - m * (m + 1) / 2) / (m * n))
    lo, hi = np.percentile(np.concatenate(aucs), [2.5, 97.5])
    return float(lo), float(hi)


def delong_compare(scores_a, scores_b, labels):
    """Two-sided p-value for equal AUCs of two predictors scored on the same samples.

    When the variance of the difference is zero: p = 1 if the AUCs are equal,
    otherwise p = 0.
    """
    pa, na = _split(scores_a, labels)
    pb, nb = _split(scores_b, labels)
    if pa.size < 2 or na.size < 2:
        raise ContractError("DeLong comparison needs at least 2 positives and 2 negatives")
    a10, a01 = _placements(pa, na)
    b10, b01 = _placements(pb, nb)
    auc_a, auc_b = a10.mean(), b10.mean()
    s10 = np.cov(np.vstack([a10, b10]), ddof=1)
    s01 = np.cov(np.vstack([a01, b01]), ddof=1)
    cov = s10 / pa.size + s01 / na.size
    var_diff = float(cov[0, 0] + cov[1, 1] - 2.0 * cov[0, 1])
    diff = float(auc_a - auc_b)
    if var_diff <= 1e-15:
        return 1.0 if abs(diff) < 1e-12 else 0.0
    z = diff / math.sqrt(var_diff)
    return float(2.0 * stats.norm.sf(abs(z)))


def bland_altman(preds, truths):
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    truths = np.asarray(truths, dtype=np.float64).reshape(-1)
    if preds.shape != truths.shape or preds.size < 2:
        raise ContractError("Bland-Altman needs two equal-length series with n >= 2")
    d = preds - truths
    n = d.size
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    half = Z95 * sd / math.sqrt(n)
    return AgreementResult(bias, sd, bias - 1.96 * sd, bias + 1.96 * sd, (bias - half, bias + half), n)


def regression_metrics(preds, truths):
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    truths = np.asarray(truths, dtype=np.float64).reshape(-1)
    if preds.shape != truths.shape or preds.size < 1:
        raise ContractError("need equal-length, non-empty predictions and targets")
    err = preds - truths
    ae = np.abs(err)
    return {"mae": float(ae.mean()), "mse": float((err ** 2).mean()),
            "sd_abs_err": float(ae.std(ddof=1)) if ae.size > 1 else 0.0, "n": int(ae.size)}


# ------------------------------------------------------------------ t-SNE

def _entropy_and_p(dist_row, beta):
    p = np.exp(-(dist_row - dist_row.min()) * beta)
    sp = p.sum()
    h = math.log(sp) + beta * float(np.sum((dist_row - dist_row.min()) * p)) / sp
    return h, p / sp


def conditional_p(X, perplexity, tol=1e-5, max_iter=200):
    """Row-stochastic P_{j|i} with per-point precision found by bisection on the entropy."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    sq = np.sum(X * X, axis=1)
    D = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
    target = math.log(perplexity)
    P = np.zeros((n, n))
    betas = np.ones(n)
    for i in range(n):
        row = np.delete(D[i], i)
        lo, hi, beta = 0.0, np.inf, 1.0 / max(np.median(row), 1e-12)
        for _ in range(max_iter):
            h, p = _entropy_and_p(row, beta)
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        betas[i] = beta
        P[i, np.arange(n) != i] = p
    return P, betas


def _kl(P, Y):
    sq = np.sum(Y * Y, axis=1)
    num = 1.0 / (1.0 + np.maximum(sq[:, None] + sq[None, :] - 2.0 * Y @ Y.T, 0.0))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-300)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask]))), num, Q


@dataclass
class TsneInfo:
    kl_initial: float
    kl_final: float
    perplexity: float
    betas: np.ndarray = field(repr=False, default=None)
    P: np.ndarray = field(repr=False, default=None)


def tsne(X, perplexity=None, iters=500, seed=0, learning_rate=200.0, exaggeration=12.0,
         exaggeration_iters=100, momentum=(0.5, 0.8), momentum_switch=250, return_info=False):
    """Exact t-SNE to two dimensions."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 4:
        raise ContractError("t-SNE needs at least 4 points")
    if perplexity is None:
        perplexity = min(30.0, n / 5.0)
    if not 0 < perplexity < n:
        raise ContractError("perplexity must lie in (0, n)")
    _, first = np.unique(X, axis=0, return_index=True)
    if first.size < n:
        warnings.warn("duplicate points in t-SNE input; jittering by 1e-9", RuntimeWarning)
        X = X + 1e-9 * np.random.default_rng(seed).standard_normal(X.shape)
    Pc, betas = conditional_p(X, perplexity)
    P = (Pc + Pc.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)
    np.fill_diagonal(P, 0.0)
    P /= P.sum()
    rng = np.random.default_rng(seed)
    Y = 1e-4 * rng.standard_normal((n, 2))
    kl0, _, _ = _kl(P, Y)
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    for it in range(iters):
        Pe = P * exaggeration if it < exaggeration_iters else P
        _, num, Q = _kl(P, Y)
        W = (Pe - Q) * num
        grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y
        mom = momentum[0] if it < momentum_switch else momentum[1]
        inc = np.sign(grad) != np.sign(update)
        gains = np.where(inc, gains + 0.2, gains * 0.8)
        gains = np.maximum(gains, 0.01)
        update = mom * update - learning_rate * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
    kl1, _, _ = _kl(P, Y)
    if return_info:
        return Y, TsneInfo(kl0, kl1, float(perplexity), betas, P)
    return Y


# ----------------------------------------------------------- linear probe

def logistic_probe(X_train, y_train, X_test, l2=1e-2):
    """L2-regularized logistic regression on standardized features; returns test scores."""
    X_train = np.asarray(X_train, dtype=np.float64)
    X_test = np.asarray(X_test, dtype=np.float64)
    y = np.asarray(y_train, dtype=np.float64)
    mu, sd = X_train.mean(axis=0), X_train.std(axis=0) + 1e-8
    A = (X_train - mu) / sd
    B = (X_test - mu) / sd
    d = A.shape[1]

    def f(wb):
        w, b = wb[:d], wb[d]
        z = A @ w + b
        loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * (w @ w)
        p = 1.0 / (1.0 + np.exp(-z))
        g = np.r_[A.T @ (p - y) / y.size + l2 * w, np.mean(p - y)]
        return loss, g

    res = optimize.minimize(f, np.zeros(d + 1), jac=True, method="L-BFGS-B")
    return B @ res.x[:d] + res.x[d]


# -------------------------------------------------------------------- io

def read_predictions_csv(path):
    """Columns of a ``study_id,score,label`` or ``study_id,pred,truth`` CSV."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        cols = reader.fieldnames or []
        if "study_id" not in cols:
            raise ContractError(f"{path}: header must start with study_id")
        rows = list(reader)
    out = {"study_id": [r["study_id"] for r in rows]}
    if {"score", "label"} <= set(cols):
        out["kind"] = "classification"
        out["score"] = np.array([float(r["score"]) for r in rows])
        out["label"] = np.array([int(r["label"]) for r in rows])
    elif {"pred", "truth"} <= set(cols):
        out["kind"] = "regression"
        out["pred"] = np.array([float(r["pred"]) for r in rows])
        out["truth"] = np.array([float(r["truth"]) for r in rows])
    else:
        raise ContractError(f"{path}: expected columns score,label or pred,truth; got {cols}")
    return out


def evaluate_predictions(table):
    if table["kind"] == "classification":
        y = table["label"]
        if min(y.sum(), (1 - y).sum()) < 2:
            return {"kind": "classification", "roc": auroc(table["score"], y).to_dict()}
        out = {"kind": "classification", "roc": delong_ci(table["score"], y).to_dict()}
        out["roc"]["bootstrap_ci95"] = list(bootstrap_ci(table["score"], y))
        return out
    return {"kind": "regression", "metrics": regression_metrics(table["pred"], table["truth"]),
            "bland_altman": bland_altman(table["pred"], table["truth"]).to_dict()}


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_jsonable)
        f.write("\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o))


def write_curve_csv(path, roc):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["fpr", "tpr", "threshold"])
        for a, b, t in zip(roc.fpr, roc.tpr, roc.thresholds):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(t))])


def write_coords_csv(path, ids, Y):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["id", "x", "y"])
        for i, (a, b) in zip(ids, Y):
            w.writerow([i, repr(float(a)), repr(float(b))])
