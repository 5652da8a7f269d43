"""Quantitative evaluation of explanations and models: FID, counterfactual
validity, deletion curves, classifier-consistency curves, confounding bias,
and score-separation reports for uncertainty/OOD evaluation.

Pure functions over immutable inputs; parallel-safe across samples.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.stats import rankdata, spearmanr

from .classifier import ArgumentError, ClassifierModel


@dataclass(frozen=True)
class ActivationStats:
    """Gaussian fit (mean, covariance) of penultimate features of a feature net."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        sig = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        if sig.shape != (mu.size, mu.size):
            raise ArgumentError(f"covariance {sig.shape} does not match mean {mu.shape}")
        sig = 0.5 * (sig + sig.T)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sig)


def activation_stats(feature_model: ClassifierModel, images: np.ndarray) -> ActivationStats:
    """Fit ActivationStats from a feature network's tap-layer activations."""
    feats, _ = feature_model.tap(images)
    mu = feats.mean(axis=0)
    sigma = np.cov(feats, rowvar=False)
    return ActivationStats(mu, np.atleast_2d(sigma))


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(real_stats: ActivationStats, fake_stats: ActivationStats) -> float:
    """Frechet distance between two activation Gaussians.

    ||mu_r - mu_f||^2 + Tr(S_r + S_f - 2 (S_r S_f)^(1/2)), with the matrix
    square root computed by eigendecomposition of the symmetrized product
    sqrt(S_r) S_f sqrt(S_r); negative eigenvalues are clipped at zero. On a
    numerically ill-conditioned pair the diagonals are regularized by 1e-6
    with a warning.
    """
    if real_stats.mu.shape != fake_stats.mu.shape:
        raise ArgumentError("feature dimensions differ between stats")
    s1, s2 = real_stats.sigma, fake_stats.sigma
    try:
        root = _sqrtm_psd(s1)
        cross = _sqrtm_psd(root @ s2 @ root)
    except np.linalg.LinAlgError:
        warnings.warn("covariance eigendecomposition failed; regularizing diagonals by 1e-6")
        eye = np.eye(s1.shape[0]) * 1e-6
        root = _sqrtm_psd(s1 + eye)
        cross = _sqrtm_psd(root @ (s2 + eye) @ root)
    diff = real_stats.mu - fake_stats.mu
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))


def cv_score(
    classifier: ClassifierModel,
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    target_class: int = 1,
    flip_thresholds: tuple[float, float] = (0.2, 0.8),
) -> float:
    """Fraction of (input, counterfactual) pairs that flip the decision.

    An input on the negative side flips when the counterfactual's posterior
    exceeds the high threshold, and vice versa; sides are assigned by the 0.5
    midpoint.
    """
    if not pairs:
        raise ArgumentError("pairs must be nonempty")
    lo, hi = flip_thresholds
    flipped = 0
    for x, xc in pairs:
        fx = float(classifier.predict(x)[target_class])
        fxc = float(classifier.predict(xc)[target_class])
        if fx < 0.5:
            flipped += fxc >= hi
        else:
            flipped += fxc <= lo
    return flipped / len(pairs)


def counterfactual_importance_map(
    x: np.ndarray, x_neg: np.ndarray, x_pos: np.ndarray
) -> np.ndarray:
    """Absolute difference of the two extreme explanations, normalized to [0,1]."""
    x_neg, x_pos = np.asarray(x_neg), np.asarray(x_pos)
    if x_neg.shape != x_pos.shape or x_neg.shape != np.asarray(x).shape:
        raise ArgumentError("importance map inputs must share one shape")
    diff = np.abs(x_pos - x_neg)
    peak = diff.max()
    return diff / peak if peak > 0 else diff


def _fill_image(image: np.ndarray, filler: str) -> np.ndarray:
    if filler == "mean":
        return np.full_like(image, image.mean())
    if filler == "blur":
        return gaussian_filter(image, sigma=max(2.0, image.shape[0] / 8.0))
    raise ArgumentError(f"unknown filler strategy {filler!r}")


def deletion_auc(
    classifier: ClassifierModel,
    image: np.ndarray,
    importance_map: np.ndarray,
    removal_fractions: Sequence[float] | None = None,
    filler: str = "mean",
    target_class: int | None = None,
) -> float:
    """Area under the target-class probability curve as pixels are removed.

    Pixels are removed in descending importance and replaced by the filler
    image; the curve is recorded at each fraction and integrated by the
    trapezoid rule over the unit-normalized fraction range. Lower is better.
    """
    image = np.asarray(image, dtype=np.float64)
    imp = np.asarray(importance_map, dtype=np.float64)
    spatial = image.shape[:2] if image.ndim == 3 else image.shape
    if imp.shape != spatial:
        raise ArgumentError(f"importance map {imp.shape} != image spatial shape {spatial}")
    if removal_fractions is None:
        removal_fractions = np.linspace(0.0, 1.0, 11)
    fr = np.asarray(list(removal_fractions), dtype=np.float64)
    if len(fr) < 2 or np.any(np.diff(fr) <= 0) or fr[0] < 0 or fr[-1] > 1:
        raise ArgumentError("removal fractions must be increasing within [0, 1]")
    if target_class is None:
        target_class = int(np.argmax(classifier.predict(image)))
    order = np.argsort(imp.ravel())[::-1]
    fill = _fill_image(image, filler)
    n_pix = imp.size
    probs = []
    for f in fr:
        k = int(round(f * n_pix))
        mask = np.zeros(n_pix, dtype=bool)
        mask[order[:k]] = True
        mask = mask.reshape(spatial)
        mutated = image.copy()
        mutated[mask] = fill[mask]
        probs.append(float(classifier.predict(np.clip(mutated, 0, 1))[target_class]))
    return float(np.trapezoid(probs, fr) / (fr[-1] - fr[0]))


def probability_curve_auc(probs: Sequence[float], fractions: Sequence[float]) -> float:
    """AUC of an externally computed probability-vs-fraction curve."""
    fr = np.asarray(list(fractions), dtype=np.float64)
    return float(np.trapezoid(np.asarray(list(probs)), fr) / (fr[-1] - fr[0]))


def consistency_curve(
    classifier: ClassifierModel,
    explain_fn: Callable[[np.ndarray, float], np.ndarray],
    probe_images: np.ndarray,
    n_bins: int = 10,
    target_class: int = 1,
    bands: Sequence[tuple[float, float]] = ((0.0, 0.2), (0.2, 0.4), (0.4, 0.6), (0.6, 0.8), (0.8, 1.0)),
) -> dict:
    """Requested condition vs realized classifier response, per input band.

    Inputs are grouped into bands by f(x); for each band and each bin center
    c the mean realized f(x_c) is recorded, along with the band's Spearman
    correlation between c and the mean response. Degenerate (constant) curves
    report correlation 0 with a flag; empty bands are omitted with a warning.
    """
    from .data import bin_center

    probe_images = np.asarray(probe_images)
    fx = classifier.predict(probe_images)[:, target_class]
    centers = [bin_center(i, n_bins) for i in range(n_bins)]
    result: dict = {"bands": {}, "rows": [], "n_bins": n_bins}
    for lo, hi in bands:
        sel = (fx >= lo) & (fx < hi) if hi < 1.0 else (fx >= lo) & (fx <= hi)
        if not np.any(sel):
            warnings.warn(f"band [{lo},{hi}) has no probe samples; omitted")
            continue
        xs = probe_images[sel]
        means = []
        for c in centers:
            xc = np.stack([explain_fn(x, c) for x in xs])
            means.append(float(classifier.predict(xc)[:, target_class].mean()))
        degenerate = np.allclose(means, means[0])
        if degenerate:
            rho = 0.0
        else:
            rho = float(spearmanr(centers, means).statistic)
        band_key = f"[{lo:.1f},{hi:.1f})"
        result["bands"][band_key] = {
            "spearman": rho,
            "degenerate": bool(degenerate),
            "count": int(sel.sum()),
            "curve": list(zip(centers, means)),
        }
        result["rows"].extend(
            {"band": band_key, "c": c, "mean_f_xc": m, "count": int(sel.sum())}
            for c, m in zip(centers, means)
        )
    return result


def confounding_metric(
    oracle: ClassifierModel, pairs: Sequence[tuple[np.ndarray, np.ndarray]]
) -> float:
    """Fraction of pairs whose oracle-predicted attribute changed under the
    counterfactual; 0 under the identity explainer."""
    if not pairs:
        raise ArgumentError("pairs must be nonempty")
    changed = 0
    for x, xc in pairs:
        changed += int(np.argmax(oracle.predict(x))) != int(np.argmax(oracle.predict(xc)))
    return changed / len(pairs)


def rank_auc(scores_neg: np.ndarray, scores_pos: np.ndarray) -> float:
    """P(pos > neg) + 0.5 P(pos == neg), computed from midranks."""
    neg = np.asarray(scores_neg, dtype=np.float64).ravel()
    pos = np.asarray(scores_pos, dtype=np.float64).ravel()
    if neg.size == 0 or pos.size == 0:
        raise ArgumentError("both score groups must be nonempty")
    ranks = rankdata(np.concatenate([neg, pos]))
    r_pos = ranks[neg.size :].sum()
    u = r_pos - pos.size * (pos.size + 1) / 2.0
    return float(u / (neg.size * pos.size))


@dataclass(frozen=True)
class ScoreSeparationReport:
    """Separation between in-group and out-group score distributions."""

    auc_roc: float
    tnr_at_tpr95: float
    histogram_in: tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)
    histogram_out: tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)
    n_in: int = 0
    n_out: int = 0

    def __post_init__(self):
        if not (0.0 <= self.auc_roc <= 1.0) or not (0.0 <= self.tnr_at_tpr95 <= 1.0):
            raise ArgumentError("auc and tnr must lie in [0, 1]")


def separation_report(scores_in: np.ndarray, scores_out: np.ndarray,
                      tpr: float = 0.95, hist_bins: int = 20) -> ScoreSeparationReport:
    """AUC-ROC plus TNR at the threshold giving the stated recall on the
    positive (uncertain/OOD) group.

    Scores follow the convention that larger means more positive (more
    uncertain / more OOD). The threshold is the (1 - tpr) quantile of the
    positive group's scores; TNR is the fraction of in-group scores strictly
    below it.
    """
    s_in = np.asarray(scores_in, dtype=np.float64).ravel()
    s_out = np.asarray(scores_out, dtype=np.float64).ravel()
    if s_in.size == 0 or s_out.size == 0:
        raise ArgumentError("both score groups must be nonempty")
    auc = rank_auc(s_in, s_out)
    threshold = np.quantile(s_out, 1.0 - tpr)
    tnr = float((s_in < threshold).mean())
    lo = min(s_in.min(), s_out.min())
    hi = max(s_in.max(), s_out.max())
    edges = np.linspace(lo, hi if hi > lo else lo + 1.0, hist_bins + 1)
    h_in = np.histogram(s_in, bins=edges)[0]
    h_out = np.histogram(s_out, bins=edges)[0]
    return ScoreSeparationReport(
        auc_roc=auc,
        tnr_at_tpr95=tnr,
        histogram_in=(h_in, edges),
        histogram_out=(h_out, edges),
        n_in=int(s_in.size),
        n_out=int(s_out.size),
    )
