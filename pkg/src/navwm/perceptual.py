"""Frozen random-feature embedder and the distances built on it: a
layerwise feature-space distance (training loss / plan score) and a
Gaussian-moment Fréchet distance over embedding sets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class FeatureEmbedder:
    """Fixed random affine + tanh stack; never trained."""

    def __init__(self, in_dim: int, seed: int, widths=(64, 16)):
        if not widths:
            raise ValueError("embedder needs at least one layer")
        rng = np.random.default_rng(seed)
        self.in_dim = in_dim
        self.widths = tuple(widths)
        self.layers = []
        fan_in = in_dim
        for width in widths:
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, width))
            b = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(width,))
            self.layers.append((w, b))
            fan_in = width

    def activations(self, x: np.ndarray) -> list[np.ndarray]:
        """Per-layer post-tanh activations; x is (n, in_dim) or (in_dim,)."""
        h = np.asarray(x, dtype=np.float64)
        squeeze = h.ndim == 1
        if squeeze:
            h = h[None, :]
        out = []
        for w, b in self.layers:
            h = np.tanh(h @ w + b)
            out.append(h[0] if squeeze else h)
        return out

    def embed(self, x: np.ndarray) -> np.ndarray:
        """Final-layer embedding."""
        return self.activations(x)[-1]

    def activations_graph(self, x: ad.Tensor) -> list[ad.Tensor]:
        """Autodiff mirror of activations(); x is a rank-2 Tensor."""
        dtype = x.value.dtype
        h = x
        out = []
        for w, b in self.layers:
            h = ad.tanh(ad.add(ad.matmul(h, ad.constant(w.astype(dtype))),
                               ad.constant(b.astype(dtype))))
            out.append(h)
        return out


def _as_rank2_tensor(x) -> ad.Tensor:
    if isinstance(x, ad.Tensor):
        t = x
        if t.value.ndim == 1:
            t = ad.slice_(t, (None,))  # promote view (1, d) keeping grad
        return t
    arr = np.asarray(x)
    if arr.ndim == 1:
        arr = arr[None, :]
    return ad.constant(arr)


def perceptual_distance(a, b, embedder: FeatureEmbedder) -> ad.Tensor:
    """Layerwise mean squared difference of unit-normalized activations.

    Differentiable in both inputs; for batched rows the result is the
    batch mean of per-row distances.
    """
    ta, tb = _as_rank2_tensor(a), _as_rank2_tensor(b)
    total = None
    for ha, hb in zip(embedder.activations_graph(ta), embedder.activations_graph(tb)):
        diff = ad.sub(ad.l2norm(ha), ad.l2norm(hb))
        term = ad.mean_(ad.mul(diff, diff))
        total = term if total is None else ad.add(total, term)
    return total


def perceptual_distance_np(a: np.ndarray, b: np.ndarray,
                           embedder: FeatureEmbedder):
    """Pure-numpy distance; per-row for rank-2 inputs, scalar for rank-1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    squeeze = a.ndim == 1
    if squeeze:
        a, b = a[None, :], b[None, :]
    total = np.zeros(a.shape[0])
    for ha, hb in zip(embedder.activations(a), embedder.activations(b)):
        na = ha / np.maximum(np.linalg.norm(ha, axis=1, keepdims=True), 1e-12)
        nb = hb / np.maximum(np.linalg.norm(hb, axis=1, keepdims=True), 1e-12)
        total += ((na - nb) ** 2).mean(axis=1)
    return float(total[0]) if squeeze else total


# ---------------------------------------------------------------------------
# Frechet feature distance


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray


def feature_stats(embeddings: np.ndarray, shrinkage: float = 1e-6) -> FeatureStats:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"need (n, d) embeddings, got shape {x.shape}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / max(x.shape[0], 1)
    cov = cov + shrinkage * np.eye(x.shape[1])
    return FeatureStats(mean=mean, cov=cov)


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_from_stats(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})."""
    root_a = _sqrtm_psd(a.cov)
    inner = root_a @ b.cov @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def frechet_feature_distance(obs_a: np.ndarray, obs_b: np.ndarray,
                             embedder: FeatureEmbedder,
                             shrinkage: float = 1e-6) -> float:
    """Fréchet distance between the final-layer embedding sets of two
    observation collections."""
    ea = embedder.embed(np.asarray(obs_a))
    eb = embedder.embed(np.asarray(obs_b))
    if not (np.isfinite(ea).all() and np.isfinite(eb).all()):
        raise ValueError("non-finite embeddings")
    return frechet_from_stats(
        feature_stats(ea, shrinkage), feature_stats(eb, shrinkage)
    )
