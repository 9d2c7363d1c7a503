"""Single-cell Wasserstein GAN: latent -> feature tails -> mesh -> rendered slice -> critic.

Meshing and rendering are not differentiable, so the generator receives the
critic's gradient with respect to each sample's features from a two-sided
simultaneous-perturbation estimate, then backpropagates it through its tails
and trunk as usual.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import hadamard
from sklearn.base import BaseEstimator

from .evaluation import Embedder, fit_gaussian, frechet_distance
from .features import (
    CellFeatures, ConstraintSet, FeatureLayout, clamp_features, denormalize, load_preset,
    pack_features, packed_bounds, unpack_features,
)
from .mesh import Scene, build_cell
from .nn import (
    Conv2d, Flatten, LeakyReLU, Linear, NetParams, Sequential, Sigmoid, load_params,
    optimizer_step, save_params,
)
from .render import CROSS_SECTION, MODES, check_images, cross_section, project

CLASSES = ("normal", "cancer")
METRIC_FIELDS = ("iter", "critic_loss", "gen_loss", "w_estimate", "fid_proxy")


# -- networks -----------------------------------------------------------------------

class GeneratorNet:
    """MLP trunk feeding one small MLP per tail; each tail emits a contiguous block of
    the packed feature vector in normalized [0, 1] coordinates."""

    def __init__(self, layout: FeatureLayout, latent_dim: int = 16, hidden: int = 64,
                 tail_hidden: int = 32, seed: int = 0):
        self.layout, self.latent_dim = layout, latent_dim
        self.trunk = Sequential([Linear("gen.trunk0", latent_dim, hidden), LeakyReLU(),
                                 Linear("gen.trunk1", hidden, hidden), LeakyReLU()])
        self.tails = [Sequential([Linear(f"gen.tail{k}.0", hidden, tail_hidden), LeakyReLU(),
                                  Linear(f"gen.tail{k}.1", tail_hidden, size), Sigmoid()])
                      for k, size in enumerate(layout.tail_sizes())]
        self.params = NetParams()
        rng = np.random.default_rng(seed)
        self.trunk.init(self.params, rng, "generator")
        for t in self.tails:
            t.init(self.params, rng, "generator")

    def forward(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.latent_dim:
            raise ValueError(f"latent vectors must have length {self.latent_dim}, got {z.shape[1]}")
        h, ct = self.trunk.forward(self.params, z)
        outs, caches = [], []
        for t in self.tails:
            o, c = t.forward(self.params, h)
            outs.append(o)
            caches.append(c)
        return np.concatenate(outs, axis=1), (ct, caches)

    def backward(self, du, cache):
        ct, caches = cache
        splits = np.cumsum(self.layout.tail_sizes())[:-1]
        dh = 0.0
        for t, c, d in zip(self.tails, caches, np.split(du, splits, axis=1)):
            dh = dh + t.backward(self.params, d, c)
        self.trunk.backward(self.params, dh, ct)


class CriticNet:
    """Two strided convolutions and a dense head; the score is an unbounded real."""

    def __init__(self, image_size: int = 32, channels=(8, 16), seed: int = 0):
        if image_size % 4:
            raise ValueError("image_size must be a multiple of 4")
        c1, c2 = channels
        flat = (image_size // 4) ** 2 * c2
        self.image_size = image_size
        self.net = Sequential([Conv2d("critic.conv0", 4, c1, 4, 2, 1), LeakyReLU(),
                               Conv2d("critic.conv1", c1, c2, 4, 2, 1), LeakyReLU(),
                               Flatten(), Linear("critic.head", flat, 1)])
        self.params = NetParams()
        self.net.init(self.params, np.random.default_rng(seed), "critic")

    def forward(self, images):
        x = check_images(images)
        if x.shape[1:3] != (self.image_size, self.image_size):
            raise ValueError(f"critic expects {self.image_size}px images, got {x.shape[1:3]}")
        y, cache = self.net.forward(self.params, x)
        return y[:, 0], cache

    def backward(self, dscore, cache):
        self.net.backward(self.params, np.asarray(dscore)[:, None], cache)

    def score(self, images) -> np.ndarray:
        return self.forward(images)[0]


# -- losses and helpers -------------------------------------------------------------

def wgan_losses(f_real, f_fake) -> tuple:
    """(critic_loss, gen_loss) = (-(mean real - mean fake), -mean fake)."""
    r, f = np.asarray(f_real, dtype=np.float64), np.asarray(f_fake, dtype=np.float64)
    if r.size == 0 or f.size == 0:
        raise ValueError("critic score lists must be nonempty")
    if r.shape != f.shape:
        raise ValueError("real and fake score lists must have equal length")
    return -(r.mean() - f.mean()), -f.mean()


def weight_clip(p: NetParams, c: float) -> None:
    if not c > 0:
        raise ValueError("clip value must be positive")
    for v in p.values.values():
        np.clip(v, -c, c, out=v)


def exact_w1_1d(a, b) -> float:
    """Exact 1-Wasserstein distance between two equal-size 1-D empirical distributions."""
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or a.size != b.size:
        raise ValueError("samples must be nonempty and of equal size")
    return float(np.abs(np.sort(a) - np.sort(b)).mean())


def probe_directions(n: int, probes: int, rng) -> np.ndarray:
    """±1 perturbation directions, shape (probes, n), built from rows of a Hadamard matrix.

    Columns are distinct Hadamard columns with random sign flips, so over any
    whole number of row cycles they are exactly orthogonal. When ``probes``
    reaches the Hadamard order, only whole cycles are used.
    """
    order = 1 << max(int(np.ceil(np.log2(max(n, 1)))), 1)
    h = hadamard(order).astype(np.float64)
    cols = rng.permutation(order)[:n]
    signs = rng.choice([-1.0, 1.0], size=n)
    if probes >= order:
        rows = np.tile(rng.permutation(order), probes // order)
    else:
        rows = rng.permutation(order)[:probes]
    return h[np.ix_(rows, cols)] * signs


def estimate_feature_grad(x, score, probes: int = 8, step: float = 1e-2, seed=0,
                          scale=None) -> np.ndarray:
    """Two-sided simultaneous-perturbation gradient of ``score`` at ``x``.

    ``x`` is a packed vector (or :class:`CellFeatures`, which is packed first and
    unpacked before each call to ``score``). Coordinate ``k`` is perturbed by
    ``step * scale[k]``, so passing the feature ranges as ``scale`` probes in
    normalized coordinates. Returns the gradient in the coordinates of ``x``.
    """
    if probes < 2 or not step > 0:
        raise ValueError("need probes >= 2 and step > 0")
    layout = x.layout if isinstance(x, CellFeatures) else None
    v = pack_features(x) if layout is not None else np.asarray(x, dtype=np.float64).ravel()
    call = (lambda w: score(unpack_features(w, layout))) if layout is not None else score
    scale = np.ones_like(v) if scale is None else np.asarray(scale, dtype=np.float64)
    delta = probe_directions(v.size, probes, np.random.default_rng(seed))
    h = step * scale
    diffs = np.array([call(v + h * d) - call(v - h * d) for d in delta])
    safe_h = np.where(h > 0, h, 1.0)
    g = (diffs[:, None] * delta).mean(axis=0) / (2 * safe_h)
    return np.where(h > 0, g, 0.0)


# -- training -----------------------------------------------------------------------

def default_thetas():
    return tuple(np.linspace(0, np.pi, 5)[1:-1])


def default_phis():
    return tuple(np.linspace(0, 2 * np.pi, 5)[:-1])


@dataclass
class TrainConfig:
    batch_size: int = 8
    clip: float = 0.01
    lr: float = 5e-5
    n_critic: int = 5
    probes: int = 8
    spsa_step: float = 1e-2
    seed: int = 0
    thetas: tuple = field(default_factory=default_thetas)
    phis: tuple = field(default_factory=default_phis)
    label: str = "normal"
    render_mode: str = CROSS_SECTION
    image_size: int = 32
    world_extent: float = 4.0
    subdivisions: int = 2

    def __post_init__(self):
        self.thetas, self.phis = tuple(map(float, self.thetas)), tuple(map(float, self.phis))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.clip > 0:
            raise ValueError("clip must be > 0")
        if self.probes < 2:
            raise ValueError("probes must be >= 2")
        if self.n_critic < 1 or not self.lr > 0 or not self.spsa_step > 0:
            raise ValueError("n_critic, lr and spsa_step must be positive")
        if self.label not in CLASSES:
            raise ValueError(f"label must be one of {CLASSES}")
        if self.render_mode not in MODES:
            raise ValueError(f"render_mode must be one of {MODES}")
        if not self.thetas or not self.phis:
            raise ValueError("angle grid must be nonempty")

    def to_dict(self) -> dict:
        return asdict(self)


def features_from_normalized(u, layout: FeatureLayout, c: ConstraintSet) -> CellFeatures:
    return clamp_features(unpack_features(denormalize(u, layout, c), layout), c)


def generator_forward(g: GeneratorNet, z, c: ConstraintSet) -> CellFeatures:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (g.latent_dim,):
        raise ValueError(f"latent vector must have shape ({g.latent_dim},)")
    u, _ = g.forward(z[None])
    return features_from_normalized(u[0], g.layout, c)


def render_features(f: CellFeatures, c: ConstraintSet, theta, phi, cfg: TrainConfig) -> np.ndarray:
    scene = Scene([build_cell(f, c, cfg.subdivisions)])
    fn = cross_section if cfg.render_mode == CROSS_SECTION else project
    return fn(scene, theta, phi, cfg.image_size, cfg.world_extent)


def _sample_angles(rng, cfg: TrainConfig, n: int) -> list:
    ti = rng.integers(len(cfg.thetas), size=n)
    pj = rng.integers(len(cfg.phis), size=n)
    return [(cfg.thetas[i], cfg.phis[j]) for i, j in zip(ti, pj)]


def critic_update(critic: CriticNet, real, fake, cfg: TrainConfig) -> float:
    """One backprop step on the critic loss followed by weight clipping."""
    critic.params.zero_grad()
    s_real, c_real = critic.forward(real)
    s_fake, c_fake = critic.forward(fake)
    loss, _ = wgan_losses(s_real, s_fake)
    critic.backward(np.full(len(real), -1.0 / len(real)), c_real)
    critic.backward(np.full(len(fake), 1.0 / len(fake)), c_fake)
    optimizer_step(critic.params, cfg.lr)
    weight_clip(critic.params, cfg.clip)
    return float(loss)


def train_step(gen: GeneratorNet, critic: CriticNet, real_images, cfg: TrainConfig,
               c: ConstraintSet, step: int = 0) -> dict:
    """``n_critic`` critic updates then one generator update; deterministic per (seed, step).

    The fake batch is rendered once per step and shared by the critic updates,
    since the generator does not change between them.
    """
    real = check_images(real_images)
    if real[..., 3].min() != 0:
        raise ValueError("real images must have a transparent background")
    rng = np.random.default_rng([cfg.seed, step])
    m = cfg.batch_size
    z = rng.normal(size=(m, gen.latent_dim))
    u, gcache = gen.forward(z)
    feats = [features_from_normalized(ui, gen.layout, c) for ui in u]
    angles = _sample_angles(rng, cfg, m)
    fake = np.stack([render_features(f, c, t, p, cfg) for f, (t, p) in zip(feats, angles)])

    for _ in range(cfg.n_critic):
        idx = rng.choice(len(real), size=m, replace=len(real) < m)
        critic_loss = critic_update(critic, real[idx], fake, cfg)

    # generator: d(-mean critic)/du through the renderer by simultaneous perturbation
    du = np.zeros_like(u)
    lo, hi = packed_bounds(gen.layout, c)
    for i, (ui, (t, p)) in enumerate(zip(u, angles)):
        def score(w, t=t, p=p):
            f = features_from_normalized(np.clip(w, 0.0, 1.0), gen.layout, c)
            return float(critic.score(render_features(f, c, t, p, cfg)[None])[0])
        du[i] = -estimate_feature_grad(ui, score, cfg.probes, cfg.spsa_step,
                                       seed=[cfg.seed, step, i]) / m
    # coordinates with an empty range never move
    du[:, hi - lo <= 0] = 0.0
    gen.params.zero_grad()
    gen.backward(du, gcache)
    optimizer_step(gen.params, cfg.lr)

    s_fake = critic.score(fake)
    s_real = critic.score(real[rng.choice(len(real), size=m, replace=len(real) < m)])
    _, gen_loss = wgan_losses(s_real, s_fake)
    return {"critic_loss": critic_loss, "gen_loss": float(gen_loss),
            "wasserstein_estimate": float(s_real.mean() - s_fake.mean())}


def format_metrics_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for row in history:
        w.writerow(["" if row.get(k) is None else (repr(float(row[k])) if k != "iter" else int(row[k]))
                    for k in METRIC_FIELDS])
    return buf.getvalue()


def write_metrics_csv(path, history) -> None:
    Path(path).write_text(format_metrics_csv(history))


def read_metrics_csv(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({k: (None if r[k] == "" else (int(r[k]) if k == "iter" else float(r[k])))
                         for k in METRIC_FIELDS})
    return rows


# -- estimator ----------------------------------------------------------------------

class CellGAN(BaseEstimator):
    """Estimator wrapper: ``fit(real_images)`` trains, ``sample_features``/``sample_images`` generate.

    ``history_`` holds one metrics dict per generator step; ``fid_proxy`` is
    filled every ``eval_every`` steps (and at step 0 and the last step) from
    ``eval_samples`` generated images against the training set.
    """

    def __init__(self, preset="table1-32", tails=None, latent_dim=16, hidden=64, batch_size=8,
                 clip=0.01, lr=5e-5, n_critic=5, probes=8, spsa_step=1e-2, iterations=100,
                 seed=0, label="normal", render_mode=CROSS_SECTION, image_size=32,
                 world_extent=4.0, subdivisions=2, eval_every=25, eval_samples=32, embed_dim=64):
        self.preset = preset
        self.tails = tails
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.batch_size = batch_size
        self.clip = clip
        self.lr = lr
        self.n_critic = n_critic
        self.probes = probes
        self.spsa_step = spsa_step
        self.iterations = iterations
        self.seed = seed
        self.label = label
        self.render_mode = render_mode
        self.image_size = image_size
        self.world_extent = world_extent
        self.subdivisions = subdivisions
        self.eval_every = eval_every
        self.eval_samples = eval_samples
        self.embed_dim = embed_dim

    def _config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, clip=self.clip, lr=self.lr,
                           n_critic=self.n_critic, probes=self.probes, spsa_step=self.spsa_step,
                           seed=self.seed, label=self.label, render_mode=self.render_mode,
                           image_size=self.image_size, world_extent=self.world_extent,
                           subdivisions=self.subdivisions)

    def _setup(self):
        layout, c = load_preset(self.preset)
        if self.tails is not None:
            layout = layout.with_tails(int(self.tails))
            c = c.for_layout(layout)
        self.layout_, self.constraints_ = layout, c
        self.config_ = self._config()
        self.generator_ = GeneratorNet(layout, self.latent_dim, self.hidden, seed=self.seed)
        self.critic_ = CriticNet(self.image_size, seed=self.seed + 1)
        weight_clip(self.critic_.params, self.clip)
        self.embedder_ = Embedder(dim=self.embed_dim, seed=0)

    def fit(self, X, y=None, callback=None):
        real = check_images(X)
        if real.shape[1:3] != (self.image_size, self.image_size):
            raise ValueError(f"real images must be {self.image_size}px")
        self._setup()
        self.real_stats_ = fit_gaussian(self.embedder_.transform(real))
        self.history_ = []
        for it in range(self.iterations + 1):
            row = {"iter": it, "critic_loss": None, "gen_loss": None, "w_estimate": None,
                   "fid_proxy": None}
            if it > 0:
                m = train_step(self.generator_, self.critic_, real, self.config_,
                               self.constraints_, it)
                row.update(critic_loss=m["critic_loss"], gen_loss=m["gen_loss"],
                           w_estimate=m["wasserstein_estimate"])
            if it % self.eval_every == 0 or it == self.iterations:
                row["fid_proxy"] = self.fid_proxy()
            self.history_.append(row)
            if callback is not None:
                callback(row)
        return self

    def fid_proxy(self, n=None, seed=12345) -> float:
        """FID-style distance of a fixed generated sample set to the training images."""
        imgs = self.sample_images(n or self.eval_samples, seed=seed)
        return frechet_distance(self.real_stats_, fit_gaussian(self.embedder_.transform(imgs)))

    def sample_features(self, n: int, seed: int = 0) -> list:
        rng = np.random.default_rng(seed)
        u, _ = self.generator_.forward(rng.normal(size=(n, self.latent_dim)))
        return [features_from_normalized(ui, self.layout_, self.constraints_) for ui in u]

    def sample_images(self, n: int, seed: int = 0) -> np.ndarray:
        feats = self.sample_features(n, seed)
        angles = _sample_angles(np.random.default_rng([seed, 1]), self.config_, n)
        return np.stack([render_features(f, self.constraints_, t, p, self.config_)
                         for f, (t, p) in zip(feats, angles)])

    @property
    def metrics_csv(self) -> str:
        return format_metrics_csv(self.history_)

    def save(self, prefix) -> None:
        """Writes ``{prefix}.generator.ckpt`` and ``{prefix}.critic.ckpt``."""
        meta = {"estimator": self.get_params(), "layout": self.layout_.to_dict()}
        save_params(f"{prefix}.generator.ckpt", self.generator_.params, meta)
        save_params(f"{prefix}.critic.ckpt", self.critic_.params, meta)

    @classmethod
    def load(cls, prefix) -> "CellGAN":
        gp, meta = load_params(f"{prefix}.generator.ckpt")
        cp, _ = load_params(f"{prefix}.critic.ckpt")
        est = cls(**meta["estimator"])
        est._setup()
        est.generator_.params, est.critic_.params = gp, cp
        return est
