"""Metric harness: distributional fidelity, alignment, retrieval quality,
linear-probe control, leakage audit, and the ablation runners.

Every metric is a pure function over immutable arrays.  Reports serialize
as ``name=value`` text plus a JSON twin so they diff cleanly and machine
parse trivially.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .core import DimensionMismatch, SeededRng, as_feature_matrix, normalize_rows
from .retrieval import RETRIEVAL_MODES, RetrievalConfig, masked_config


class TooFewSamples(ValueError):
    """Metric needs more rows than were provided."""


class CountMismatch(ValueError):
    """Paired inputs disagree on the number of rows."""


class EmptyQuerySet(ValueError):
    """Retrieval metrics got zero queries."""


class SingleClass(ValueError):
    """Probe training data contains fewer than two classes."""


class DegenerateSplit(ValueError):
    """A probe split is empty or lost a class."""


class NonDivisibleKm(ValueError):
    """Prototype-budget ablation values must be multiples of 4 (or 0)."""


def _mean_cov(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False, ddof=1)
    return mu, np.atleast_2d(cov)


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(feats_a, feats_b) -> float:
    """Frechet distance between Gaussians fitted to two feature sets.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}); the matrix
    square root goes through the symmetric product S_a^{1/2} S_b S_a^{1/2}
    with eigenvalues clamped at zero, which keeps the result real and the
    function symmetric in its arguments.
    """
    a = as_feature_matrix(feats_a, "feats_a")
    b = as_feature_matrix(feats_b, "feats_b")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"dims differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise TooFewSamples("fid needs at least 2 rows per side")
    mu_a, cov_a = _mean_cov(a)
    mu_b, cov_b = _mean_cov(b)
    root_a = _sym_sqrt(cov_a)
    middle = _sym_sqrt(root_a @ cov_b @ root_a)
    value = float(np.sum((mu_a - mu_b) ** 2)
                  + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(middle))
    return max(value, 0.0)


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def _mmd2(x: np.ndarray, y: np.ndarray) -> float:
    m, n = x.shape[0], y.shape[0]
    kxx = _poly_kernel(x, x)
    kyy = _poly_kernel(y, y)
    kxy = _poly_kernel(x, y)
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    if m == n:
        # Diagonal excluded in the cross term too: the estimator cancels
        # exactly when the two sets are identical row-for-row.
        cross = (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
    else:
        cross = kxy.sum() / (m * n)
    return float(term_x + term_y - 2.0 * cross)


def kid(feats_a, feats_b, block_size: int | None = None, seed: int = 0) -> float:
    """Squared MMD with the polynomial kernel (x.y/d + 1)^3.

    With ``block_size`` unset the estimator runs over all samples in one
    block.  Otherwise rows of each side are shuffled with a seeded stream,
    split into consecutive blocks of that size (remainder dropped), and the
    per-block estimates are averaged.
    """
    a = as_feature_matrix(feats_a, "feats_a")
    b = as_feature_matrix(feats_b, "feats_b")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"dims differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise TooFewSamples("kid needs at least 2 rows per side")
    if block_size is None:
        return _mmd2(a, b)
    if block_size < 2:
        raise ValueError("block_size must be >= 2")
    n_blocks = min(a.shape[0], b.shape[0]) // block_size
    if n_blocks < 1:
        raise TooFewSamples(f"block_size {block_size} exceeds the smaller side")
    rng = SeededRng(seed)
    perm_a = rng.permutation(a.shape[0])
    perm_b = rng.permutation(b.shape[0])
    values = []
    for i in range(n_blocks):
        sl = slice(i * block_size, (i + 1) * block_size)
        values.append(_mmd2(a[perm_a[sl]], b[perm_b[sl]]))
    return float(np.mean(values))


def alignment_score(caption_embs, image_embs) -> float:
    """Mean cosine similarity over aligned (caption, image) embedding pairs."""
    caps = as_feature_matrix(caption_embs, "caption_embs")
    imgs = as_feature_matrix(image_embs, "image_embs")
    if caps.shape[0] != imgs.shape[0]:
        raise CountMismatch(f"pair counts differ: {caps.shape[0]} vs {imgs.shape[0]}")
    if caps.shape[1] != imgs.shape[1]:
        raise DimensionMismatch(f"dims differ: {caps.shape[1]} vs {imgs.shape[1]}")
    c = normalize_rows(caps, "caption_embs")
    i = normalize_rows(imgs, "image_embs")
    return float(np.mean(np.sum(c * i, axis=1)))


@dataclass
class RankedRetrieval:
    """Per-query ranked gallery ids plus the relevant-id sets."""

    rankings: list[list[int]]
    relevance: list[set[int]]

    def __post_init__(self):
        if len(self.rankings) != len(self.relevance):
            raise CountMismatch("rankings and relevance must align per query")
        for ranked in self.rankings:
            if len(ranked) != len(set(ranked)):
                raise ValueError("ranked lists must contain unique ids")


def retrieval_metrics(result: RankedRetrieval, ks: list[int]) -> dict[str, float]:
    """Recall@k and truncated mAP@k for every cutoff in ``ks``.

    AP@k sums precision at each relevant hit within the top k and divides
    by min(|relevant|, k) (the truncated normalization), so a single
    relevant item found at rank r contributes 1/r.
    """
    if not ks:
        raise ValueError("ks must be non-empty")
    if not result.rankings:
        raise EmptyQuerySet("no queries")
    out: dict[str, float] = {}
    for k in ks:
        recalls, aps = [], []
        for ranked, relevant in zip(result.rankings, result.relevance):
            top = ranked[:k]
            hits = 0
            precision_sum = 0.0
            for rank, ident in enumerate(top, start=1):
                if ident in relevant:
                    hits += 1
                    precision_sum += hits / rank
            recalls.append(1.0 if hits else 0.0)
            denom = min(len(relevant), k)
            aps.append(precision_sum / denom if denom else 0.0)
        out[f"recall@{k}"] = float(np.mean(recalls))
        out[f"map@{k}"] = float(np.mean(aps))
    return out


@dataclass
class ProbeSplit:
    """Stratified train/val/test feature splits for the linear probe."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    def __post_init__(self):
        for name in ("train", "val", "test"):
            if getattr(self, f"x_{name}").shape[0] != getattr(self, f"y_{name}").shape[0]:
                raise DegenerateSplit(f"{name} features and labels disagree")
        if self.x_train.shape[0] == 0 or self.x_test.shape[0] == 0:
            raise DegenerateSplit("train and test splits must be non-empty")

    @classmethod
    def make(cls, features, labels, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> "ProbeSplit":
        """Stratified split; guarantees every class appears in train."""
        feats = as_feature_matrix(features)
        y = np.asarray(labels, dtype=np.int64)
        if y.shape[0] != feats.shape[0]:
            raise CountMismatch("features and labels disagree on row count")
        if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3:
            raise ValueError("fractions must be three values summing to 1")
        rng = SeededRng(seed)
        tr, va, te = [], [], []
        for cls_label in np.unique(y):
            members = np.flatnonzero(y == cls_label)
            members = members[rng.permutation(len(members))]
            n = len(members)
            n_tr = max(1, round(fractions[0] * n))
            n_va = round(fractions[1] * n)
            n_tr = min(n_tr, n)
            n_va = min(n_va, n - n_tr)
            tr.extend(members[:n_tr])
            va.extend(members[n_tr:n_tr + n_va])
            te.extend(members[n_tr + n_va:])
        tr, va, te = sorted(tr), sorted(va), sorted(te)
        return cls(feats[tr], y[tr], feats[va], y[va], feats[te], y[te])


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _log_loss(probs: np.ndarray, y: np.ndarray) -> float:
    return float(-np.mean(np.log(np.clip(probs[np.arange(len(y)), y], 1e-300, None))))


def weighted_f1(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Per-class F1 weighted by true-class support."""
    total = len(y_true)
    score = 0.0
    for cls_label in np.unique(y_true):
        tp = np.sum((y_pred == cls_label) & (y_true == cls_label))
        fp = np.sum((y_pred == cls_label) & (y_true != cls_label))
        fn = np.sum((y_pred != cls_label) & (y_true == cls_label))
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom else 0.0
        score += (np.sum(y_true == cls_label) / total) * f1
    return float(score)


def _binary_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Rank-based AUC (Mann-Whitney with average ranks for ties)."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def weighted_ovr_auc(y_true: np.ndarray, probs: np.ndarray) -> float:
    """One-vs-rest AUC per class, weighted by true-class support.

    Classes absent from the test labels contribute nothing (their weight
    is zero anyway).
    """
    total = len(y_true)
    score = 0.0
    for cls_label in np.unique(y_true):
        auc = _binary_auc(probs[:, cls_label], y_true == cls_label)
        if not np.isnan(auc):
            score += (np.sum(y_true == cls_label) / total) * auc
    return float(score)


def linear_probe(split: ProbeSplit, seed: int = 0, *, l2: float = 1e-3,
                 lr: float = 0.25, max_iters: int = 500, patience: int = 20) -> dict[str, float]:
    """Multinomial logistic regression on frozen features.

    Full-batch gradient descent with an L2 penalty, early-stopped on
    validation loss; reports weighted F1 and weighted one-vs-rest AUC on
    the test split.  Fully deterministic given the split and seed.
    """
    classes = np.unique(split.y_train)
    if len(classes) < 2:
        raise SingleClass("probe needs at least 2 classes in train")
    n_classes = int(split.y_train.max()) + 1
    mu = split.x_train.mean(axis=0)
    sd = split.x_train.std(axis=0)
    sd[sd < 1e-12] = 1.0

    def design(x: np.ndarray) -> np.ndarray:
        z = (x - mu) / sd
        return np.hstack([z, np.ones((z.shape[0], 1))])

    x_tr = design(split.x_train)
    x_va = design(split.x_val) if split.x_val.shape[0] else None
    x_te = design(split.x_test)
    onehot = np.eye(n_classes)[split.y_train]
    w = np.zeros((x_tr.shape[1], n_classes))
    best_val = np.inf
    best_w = w.copy()
    stall = 0
    for _ in range(max_iters):
        probs = _softmax(x_tr @ w)
        grad = x_tr.T @ (probs - onehot) / x_tr.shape[0] + l2 * w
        w = w - lr * grad
        if x_va is None:
            continue
        val_loss = _log_loss(_softmax(x_va @ w), split.y_val)
        if val_loss < best_val - 1e-12:
            best_val, best_w, stall = val_loss, w.copy(), 0
        else:
            stall += 1
            if stall >= patience:
                break
    if x_va is not None:
        w = best_w
    probs_te = _softmax(x_te @ w)
    preds = probs_te.argmax(axis=1)
    return {
        "weighted_f1": weighted_f1(split.y_test, preds),
        "weighted_auc": weighted_ovr_auc(split.y_test, probs_te),
    }


@dataclass
class LeakageReport:
    """Exhaustive cross-set cosine audit between two feature sets."""

    max_similarity: float
    mean_similarity: float
    std_similarity: float
    threshold: float
    offending_pairs: list[tuple[int, int, float]]
    disjoint: bool


def leakage_check(feats_a, feats_b, threshold: float = 0.95,
                  block: int = 1024) -> LeakageReport:
    """All-pairs cosine between two sets; verdict "disjoint" iff the
    maximum stays strictly below the threshold.

    Pairs at or above the threshold are listed as (row_a, row_b, cosine).
    Statistics are exact over all |A| x |B| pairs.  The scan runs as a
    blocked matrix product for speed, but the maximum and the offending
    pairs are refined with per-pair dot products so the reported values
    match a plain double-loop computation bit for bit (blocked GEMM can
    drift by an ulp, which matters right at the threshold).
    """
    a = normalize_rows(feats_a, "feats_a")
    b = normalize_rows(feats_b, "feats_b")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"dims differ: {a.shape[1]} vs {b.shape[1]}")
    total = a.shape[0] * b.shape[0]
    refine = 1e-9  # >> gemm-vs-dot drift, << any meaningful gap
    acc = 0.0
    acc_sq = 0.0
    threshold_band: list[tuple[int, int]] = []
    max_band: list[tuple[int, int]] = []
    for start in range(0, a.shape[0], block):
        sims = a[start:start + block] @ b.T
        acc += float(sims.sum())
        acc_sq += float((sims ** 2).sum())
        hit_a, hit_b = np.nonzero(sims >= threshold - refine)
        threshold_band.extend((int(i) + start, int(j)) for i, j in zip(hit_a, hit_b))
        # The global argmax pair always lands inside its own block's band.
        hit_a, hit_b = np.nonzero(sims >= float(sims.max()) - refine)
        max_band.extend((int(i) + start, int(j)) for i, j in zip(hit_a, hit_b))
    pairs = []
    for i, j in threshold_band:
        exact = float(np.dot(a[i], b[j]))
        if exact >= threshold:
            pairs.append((i, j, exact))
    pairs.sort(key=lambda p: -p[2])
    max_sim = max(float(np.dot(a[i], b[j])) for i, j in max_band)
    mean = acc / total
    var = max(acc_sq / total - mean ** 2, 0.0)
    return LeakageReport(max_similarity=max_sim, mean_similarity=mean,
                         std_similarity=float(np.sqrt(var)), threshold=threshold,
                         offending_pairs=pairs, disjoint=bool(max_sim < threshold))


@dataclass
class MetricReport:
    """Named scalar results plus the run metadata needed to reproduce them."""

    name: str
    metrics: dict[str, float]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        bad = [k for k, v in self.metrics.items() if not np.isfinite(v)]
        if bad:
            raise ValueError(f"non-finite metric values: {bad}")

    def save(self, path: str | Path) -> None:
        """Write ``name=value`` lines plus a JSON twin next to it."""
        path = Path(path)
        lines = [f"# report: {self.name}"]
        for key in sorted(self.metadata):
            lines.append(f"# {key}={self.metadata[key]}")
        for key in sorted(self.metrics):
            lines.append(f"{key}={self.metrics[key]:.12g}")
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        twin = {"name": self.name, "metrics": self.metrics, "metadata": self.metadata}
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(twin, indent=2, sort_keys=True), encoding="utf-8")


class AblationPipeline(Protocol):
    """What the ablation runners need from a trained pipeline: a seed and a
    way to evaluate one retrieval configuration (optionally branch-masked)."""

    seed: int

    def evaluate(self, retrieval_cfg: RetrievalConfig,
                 mode: str | None = None) -> tuple[dict[str, float], dict]:
        ...


def km_allocation(km: int, seed: int = 0) -> RetrievalConfig:
    """Budget split for a prototype-count ablation: a quarter each to
    global text, global vision and keywords, two samples per keyword."""
    if km == 0:
        return RetrievalConfig(km=0, k_t=0, k_v=0, n_kw=0, n_per=2, seed=seed)
    if km % 4 != 0:
        raise NonDivisibleKm(f"km={km} is not a multiple of 4")
    return RetrievalConfig(km=km, k_t=km // 4, k_v=km // 4, n_kw=km // 4, n_per=2, seed=seed)


def ablate_km(pipeline: AblationPipeline, values: list[int]) -> list[MetricReport]:
    """Run the pipeline once per prototype budget in ``values``."""
    if not values:
        raise ValueError("values must be non-empty")
    reports = []
    for km in values:
        cfg = km_allocation(km, seed=pipeline.seed)
        metrics, flags = pipeline.evaluate(cfg)
        metadata = {"km": km, "allocation": (cfg.k_t, cfg.k_v, cfg.n_kw, cfg.n_per)}
        metadata.update(flags)
        reports.append(MetricReport(name=f"km={km}", metrics=metrics, metadata=metadata))
    return reports


def ablate_retrieval(pipeline: AblationPipeline,
                     modes: tuple[str, ...] = RETRIEVAL_MODES) -> list[MetricReport]:
    """Run the pipeline once per retrieval branch-masking mode."""
    base = km_allocation(16, seed=pipeline.seed)
    reports = []
    for mode in modes:
        cfg = masked_config(base, mode)
        metrics, flags = pipeline.evaluate(cfg, mode=mode)
        metadata = {"mode": mode,
                    "allocation": (cfg.k_t, cfg.k_v, cfg.n_kw, cfg.n_per)}
        metadata.update(flags)
        reports.append(MetricReport(name=f"retrieval={mode}", metrics=metrics,
                                    metadata=metadata))
    return reports
