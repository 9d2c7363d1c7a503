"""Fréchet distance between Gaussians fitted to embedded image sets.

The embedding is a fixed random convolution stack rather than a pretrained
network, so scores are comparable across runs of this package only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .nn import Conv2d, NetParams
from .render import check_images

DEFAULT_DIM = 64


@dataclass(frozen=True)
class FrechetStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64).reshape(-1)
        sigma = np.array(self.sigma, dtype=np.float64)
        if sigma.shape != (mu.size, mu.size):
            raise ValueError(f"covariance shape {sigma.shape} does not match mean of size {mu.size}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ValueError("statistics must be finite")
        sigma = 0.5 * (sigma + sigma.T)
        mu.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self) -> int:
        return self.mu.size


class Embedder(TransformerMixin, BaseEstimator):
    """Fixed-seed random conv features, mean- and max-pooled to ``dim`` values per image.

    ``fit`` is a no-op kept for pipeline compatibility; the weights depend only
    on ``dim`` and ``seed``.
    """

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def _net(self):
        key = (self.dim, self.seed)
        if getattr(self, "_cache_key", None) != key:
            if self.dim < 2 or self.dim % 2:
                raise ValueError("dim must be an even integer >= 2")
            rng = np.random.default_rng(self.seed)
            p = NetParams()
            layers = [Conv2d("e1", 4, 16, 4, stride=2, padding=1),
                      Conv2d("e2", 16, 32, 4, stride=2, padding=1),
                      Conv2d("e3", 32, self.dim // 2, 3, stride=1, padding=1)]
            for layer in layers:
                layer.init(p, rng)
            for v in p.values.values():
                v.setflags(write=False)
            self._cache_key, self._layers, self._params = key, layers, p
        return self._layers, self._params

    def fit(self, X=None, y=None):
        self._net()
        return self

    def transform(self, X) -> np.ndarray:
        images = check_images(X)
        layers, p = self._net()
        x = images.copy()
        # premultiplied color, so fully transparent pixels carry no color
        x[..., :3] *= x[..., 3:4]
        for i, layer in enumerate(layers):
            x, _ = layer.forward(p, x)
            if i < len(layers) - 1:
                x = np.tanh(x)
        return np.concatenate([x.mean(axis=(1, 2)), x.max(axis=(1, 2))], axis=1)


def embed(images, e: Embedder | None = None) -> np.ndarray:
    return (e or Embedder()).transform(images)


def fit_gaussian(features) -> FrechetStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("need a (n, d) feature matrix with n >= 2")
    mu = x.mean(axis=0)
    xc = x - mu
    return FrechetStats(mu, xc.T @ xc / (len(x) - 1))


def psd_sqrt(sigma) -> np.ndarray:
    """Symmetric square root of a PSD matrix; negative round-off eigenvalues are clipped to 0."""
    s = 0.5 * (np.asarray(sigma, dtype=np.float64) + np.asarray(sigma).T)
    w, v = np.linalg.eigh(s)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(a: FrechetStats, b: FrechetStats) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2), clamped at 0."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    ra = psd_sqrt(a.sigma)
    m = ra @ b.sigma @ ra
    w = np.linalg.eigvalsh(0.5 * (m + m.T))
    cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = a.mu - b.mu
    d = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * cross)
    return max(d, 0.0)


def fid(real, fake, e: Embedder | None = None) -> float:
    e = e or Embedder()
    return frechet_distance(fit_gaussian(e.transform(real)), fit_gaussian(e.transform(fake)))


def fid_report(real, fake, e: Embedder | None = None, real_labels=None, fake_labels=None) -> dict:
    """Pooled FID plus per-class values when labels are given (classes 'normal' and 'cancer').

    The 'normal' class is reported under the key ``regular``.
    """
    e = e or Embedder()
    real_f, fake_f = e.transform(real), e.transform(fake)
    out = {"total": frechet_distance(fit_gaussian(real_f), fit_gaussian(fake_f)),
           "regular": None, "cancer": None, "n_real": len(real_f), "n_fake": len(fake_f)}
    if real_labels is not None and fake_labels is not None:
        rl, fl = np.asarray(real_labels), np.asarray(fake_labels)
        if len(rl) != len(real_f) or len(fl) != len(fake_f):
            raise ValueError("label count does not match image count")
        for label, key in (("normal", "regular"), ("cancer", "cancer")):
            r, f = real_f[rl == label], fake_f[fl == label]
            if len(r) >= 2 and len(f) >= 2:
                out[key] = frechet_distance(fit_gaussian(r), fit_gaussian(f))
    return out


def fid_spread(real, fake, seeds=(0, 1, 2), dim: int = DEFAULT_DIM) -> tuple:
    """Mean and sample std of the pooled FID-proxy over several embedding seeds."""
    if len(seeds) < 2:
        raise ValueError("need at least 2 embedding seeds for a spread")
    values = np.array([fid(real, fake, Embedder(dim, s)) for s in seeds])
    return float(values.mean()), float(values.std(ddof=1))
