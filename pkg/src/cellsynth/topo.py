"""Topology transformer: image patch tokens -> encoder -> frozen multi-tail decoder -> cluster features.

Training compares renders of the decoded cluster over an angle grid with the
input image and keeps the ``n`` best matches, plus a contractive penalty on the
mean-pooled encoder output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .features import (
    ClusterFeatures, ConstraintSet, FeatureLayout, clamp_cluster, cluster_bounds, cluster_size,
    load_preset, pack_cluster, unpack_cluster,
)
from .gan import estimate_feature_grad
from .mesh import assemble_cluster
from .nn import (
    LeakyReLU, Linear, NetParams, Sequential, Sigmoid, TransformerBlock, layer_stack_backward,
    layer_stack_forward, load_params, optimizer_step,
)
from .render import CROSS_SECTION, MODES, PROJECTION, ProjectionSpec, check_images, render_batch

DECODER = "decoder"
ENCODER = "encoder"


class TopoTransformer:
    """Patch-embedding transformer encoder with a frozen feature decoder.

    The decoder has, per cluster slot, a small adapter into the generator's
    hidden width followed by one MLP per tail; a separate head emits slot
    positions. All outputs are sigmoids in normalized feature coordinates.
    """

    def __init__(self, layout: FeatureLayout, slots: int = 3, image_size: int = 32,
                 patch_size: int = 8, d_model: int = 32, heads: int = 4, blocks: int = 2,
                 d_ff: int = 64, gen_hidden: int = 64, tail_hidden: int = 32, seed: int = 0,
                 generator_params: NetParams | None = None):
        if image_size % patch_size:
            raise ValueError(f"image_size {image_size} not divisible by patch_size {patch_size}")
        self.layout, self.slots = layout, slots
        self.image_size, self.patch_size, self.d_model = image_size, patch_size, d_model
        self.n_tokens = (image_size // patch_size) ** 2
        self.embed = Linear("enc.embed", patch_size * patch_size * 4, d_model)
        self.blocks = [TransformerBlock(f"enc.block{i}", d_model, heads, d_ff) for i in range(blocks)]
        self.adapters = [Sequential([Linear(f"dec.slot{s}.adapter", d_model, gen_hidden), LeakyReLU()])
                         for s in range(slots)]
        self.tails = [[Sequential([Linear(f"dec.slot{s}.tail{k}.0", gen_hidden, tail_hidden), LeakyReLU(),
                                   Linear(f"dec.slot{s}.tail{k}.1", tail_hidden, size), Sigmoid()])
                       for k, size in enumerate(layout.tail_sizes())] for s in range(slots)]
        self.position_head = Sequential([Linear("dec.position", d_model, 3 * slots), Sigmoid()])

        p = self.params = NetParams()
        rng = np.random.default_rng(seed)
        self.embed.init(p, rng, ENCODER)
        p.init_uniform("enc.pos", (self.n_tokens, d_model), d_model, rng, ENCODER)
        for b in self.blocks:
            b.init(p, rng, ENCODER)
        for s in range(slots):
            self.adapters[s].init(p, rng, DECODER)
            for t in self.tails[s]:
                t.init(p, rng, DECODER)
        self.position_head.init(p, rng, DECODER)
        if generator_params is not None:
            self._copy_tails(generator_params)
        p.freeze(DECODER)

    def _copy_tails(self, gp: NetParams) -> None:
        for s in range(self.slots):
            for k in range(len(self.layout.tail_sizes())):
                for part in ("0.W", "0.b", "1.W", "1.b"):
                    src, dst = f"gen.tail{k}.{part}", f"dec.slot{s}.tail{k}.{part}"
                    if src not in gp:
                        raise ValueError(f"generator checkpoint lacks {src}")
                    if gp[src].shape != self.params[dst].shape:
                        raise ValueError(f"{src}: shape {gp[src].shape} does not match {self.params[dst].shape}")
                    self.params.add(dst, gp[src].copy(), DECODER)

    # -- encoder ----------------------------------------------------------------------

    def patches(self, x) -> np.ndarray:
        """(B, H, W, 4) -> (B, tokens, p*p*4), tokens in row-major patch order."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        B, H, W, C = x.shape
        ps = self.patch_size
        if H % ps or W % ps:
            raise ValueError(f"image {H}x{W} not divisible by patch size {ps}")
        if (H // ps) * (W // ps) != self.n_tokens:
            raise ValueError(f"expected {self.image_size}px images, got {H}x{W}")
        t = x.reshape(B, H // ps, ps, W // ps, ps, C).transpose(0, 1, 3, 2, 4, 5)
        return t.reshape(B, -1, ps * ps * C)

    def unpatch(self, d) -> np.ndarray:
        B = d.shape[0]
        g, ps = self.image_size // self.patch_size, self.patch_size
        t = d.reshape(B, g, g, ps, ps, 4).transpose(0, 1, 3, 2, 4, 5)
        return t.reshape(B, self.image_size, self.image_size, 4)

    def forward_encoder(self, p, x):
        """Returns (latent tokens, pooled hidden layer, block outputs, cache)."""
        patches = self.patches(x)
        emb, ce = self.embed.forward(p, patches)
        tokens = emb + p["enc.pos"]
        latent, hidden, cb = layer_stack_forward(tokens, p, self.blocks)
        return latent, latent.mean(axis=1), hidden, (ce, cb)

    def backward_encoder(self, p, dpooled, cache):
        """Backpropagate a gradient on the pooled layer; returns the gradient on the input image."""
        ce, cb = cache
        dlatent = np.repeat(dpooled[:, None, :] / self.n_tokens, self.n_tokens, axis=1)
        dtokens = layer_stack_backward(dlatent, p, self.blocks, cb)
        p.accumulate("enc.pos", dtokens.sum(axis=0))
        return self.unpatch(self.embed.backward(p, dtokens, ce))

    # -- decoder ----------------------------------------------------------------------

    def forward_decoder(self, p, pooled):
        """Pooled (B, d) -> normalized cluster vector (B, cluster_size) in packing order."""
        pos, cpos = self.position_head.forward(p, pooled)
        parts, caches = [], []
        for s in range(self.slots):
            h, ca = self.adapters[s].forward(p, pooled)
            outs, ct = [], []
            for t in self.tails[s]:
                o, c = t.forward(p, h)
                outs.append(o)
                ct.append(c)
            parts.extend([*outs, pos[:, 3 * s:3 * s + 3]])
            caches.append((ca, ct))
        return np.concatenate(parts, axis=1), (cpos, caches)

    def backward_decoder(self, p, du, cache):
        cpos, caches = cache
        n = self.layout.total_features
        splits = np.cumsum(self.layout.tail_sizes())[:-1]
        per_slot = du.reshape(len(du), self.slots, n + 3)
        dpooled = self.position_head.backward(p, per_slot[:, :, n:].reshape(len(du), -1), cpos)
        for s, (ca, ct) in enumerate(caches):
            dh = 0.0
            for t, c, d in zip(self.tails[s], ct, np.split(per_slot[:, s, :n], splits, axis=1)):
                dh = dh + t.backward(p, d, c)
            dpooled = dpooled + self.adapters[s].backward(p, dh, ca)
        return dpooled

    def forward(self, x):
        p = self.params
        _, pooled, _, cenc = self.forward_encoder(p, x)
        u, cdec = self.forward_decoder(p, pooled)
        return u, (cenc, cdec)

    def backward(self, du, cache):
        cenc, cdec = cache
        return self.backward_encoder(self.params, self.backward_decoder(self.params, du, cdec), cenc)

    def decoder_bytes(self) -> bytes:
        return b"".join(self.params[n].tobytes() for n in self.params.names(DECODER))


def patch_embed(x, t: TopoTransformer) -> np.ndarray:
    """Tokens ``linear(flatten(patch)) + position`` for one image, shape (tokens, d_model)."""
    emb, _ = t.embed.forward(t.params, t.patches(x))
    return (emb + t.params["enc.pos"])[0]


def encode(x, t: TopoTransformer) -> tuple:
    """Latent tokens of one image and the per-block hidden activations."""
    latent, _, hidden, _ = t.forward_encoder(t.params, x)
    return latent[0], [h[0] for h in hidden]


def decode_features(latent, t: TopoTransformer, c: ConstraintSet) -> ClusterFeatures:
    pooled = np.asarray(latent, dtype=np.float64).mean(axis=0)[None]
    u, _ = t.forward_decoder(t.params, pooled)
    return cluster_from_normalized(u[0], t.layout, c, t.slots)


def cluster_from_normalized(u, layout: FeatureLayout, c: ConstraintSet, slots: int) -> ClusterFeatures:
    lo, hi = cluster_bounds(layout, c, slots)
    v = lo + np.clip(u, 0.0, 1.0) * (hi - lo)
    return clamp_cluster(unpack_cluster(v, layout, slots), c)


# -- losses ---------------------------------------------------------------------------

def pair_loss(x, y) -> float:
    """Masked RGB mean squared error over pixels where either alpha is nonzero, plus the
    mean squared alpha difference."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    mask = (x[..., 3] > 0) | (y[..., 3] > 0)
    rgb = ((x[..., :3] - y[..., :3]) ** 2).mean(axis=-1)[mask].mean() if mask.any() else 0.0
    return float(rgb + ((x[..., 3] - y[..., 3]) ** 2).mean())


def min_n_loss(x, projections, n: int) -> float:
    """Sum of the ``n`` smallest pair losses between ``x`` and the projected images.

    ``projections`` is a list of ``(theta, phi, image)``; ties are broken by list order.
    """
    if not projections:
        raise ValueError("empty projection list")
    if not 1 <= n <= len(projections):
        raise ValueError(f"n must be in [1, {len(projections)}]")
    losses = np.array([pair_loss(x, img) for _, _, img in projections])
    return float(np.sort(losses, kind="stable")[:n].sum())


def hidden_jacobian_sq(t: TopoTransformer, x) -> float:
    """Exact squared Frobenius norm of d(pooled encoder output)/d(image)."""
    p = t.params.shadow()
    x = np.asarray(x, dtype=np.float64)
    batch = np.repeat(x[None] if x.ndim == 3 else x[:1], t.d_model, axis=0)
    _, pooled, _, cache = t.forward_encoder(p, batch)
    dx = t.backward_encoder(p, np.eye(t.d_model), cache)
    return float((dx ** 2).sum())


def contractive_penalty(t: TopoTransformer, x, lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return 0.0 if lam == 0 else lam * hidden_jacobian_sq(t, x)


def stochastic_penalty_backward(t: TopoTransformer, x, lam: float, rng, samples: int = 2,
                                sigma: float = 1e-3) -> float:
    """Accumulate the parameter gradient of a finite-difference estimate of the penalty.

    Uses E ||a(x + s e) - a(x)||^2 / s^2 = ||J||_F^2 for standard normal e, so the
    gradient needs only first-order backprop. Returns the estimate's value.
    """
    if lam == 0:
        return 0.0
    x = np.asarray(x, dtype=np.float64)
    noise = rng.normal(size=(samples, *x.shape))
    batch = np.concatenate([x[None], x[None] + sigma * noise])
    _, pooled, _, cache = t.forward_encoder(t.params, batch)
    diff = (pooled[1:] - pooled[0]) / sigma
    value = lam * float((diff ** 2).sum()) / samples
    dp = np.zeros_like(pooled)
    dp[1:] = 2 * lam * diff / (samples * sigma)
    dp[0] = -dp[1:].sum(axis=0)
    t.backward_encoder(t.params, dp, cache)
    return value


# -- training -------------------------------------------------------------------------

def default_topo_thetas():
    return tuple(np.deg2rad([0.0, 45.0, 90.0, 135.0]))


def default_topo_phis():
    return tuple(np.deg2rad([0.0, 60.0, 120.0]))


@dataclass
class TopoConfig:
    thetas: tuple = field(default_factory=default_topo_thetas)
    phis: tuple = field(default_factory=default_topo_phis)
    min_n: int = 3
    lam: float = 1e-3
    lr: float = 1e-3
    probes: int = 4
    spsa_step: float = 0.05
    steps: int = 100
    seed: int = 0
    render_mode: str = PROJECTION
    world_extent: float = 8.0
    subdivisions: int = 1
    penalty_samples: int = 2

    def __post_init__(self):
        self.thetas, self.phis = tuple(map(float, self.thetas)), tuple(map(float, self.phis))
        if not self.thetas or not self.phis:
            raise ValueError("angle grid must be nonempty")
        if not 1 <= self.min_n <= len(self.thetas) * len(self.phis):
            raise ValueError("min_n must be between 1 and the number of grid angles")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.probes < 2 or not self.spsa_step > 0 or not self.lr > 0:
            raise ValueError("need probes >= 2 and positive spsa_step and lr")
        if self.render_mode not in MODES:
            raise ValueError(f"render_mode must be one of {MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


def render_cluster(g: ClusterFeatures, c: ConstraintSet, spec: ProjectionSpec, subdivisions: int) -> list:
    return render_batch(assemble_cluster(g, c, subdivisions), spec)


def _spec(t: TopoTransformer, cfg: TopoConfig) -> ProjectionSpec:
    return ProjectionSpec(cfg.thetas, cfg.phis, t.image_size, cfg.render_mode, cfg.world_extent)


def reconstruction_loss(t: TopoTransformer, x, u, c: ConstraintSet, cfg: TopoConfig) -> float:
    g = cluster_from_normalized(u, t.layout, c, t.slots)
    return min_n_loss(x, render_cluster(g, c, _spec(t, cfg), cfg.subdivisions), cfg.min_n)


def topo_loss(t: TopoTransformer, x, c: ConstraintSet, cfg: TopoConfig) -> float:
    """Reconstruction term plus exact contractive penalty for one image."""
    u, _ = t.forward(x)
    return reconstruction_loss(t, x, u[0], c, cfg) + contractive_penalty(t, x, cfg.lam)


def mean_topo_loss(t: TopoTransformer, images, c: ConstraintSet, cfg: TopoConfig) -> float:
    return float(np.mean([topo_loss(t, x, c, cfg) for x in check_images(images)]))


def train_transformer(t: TopoTransformer, images, c: ConstraintSet, cfg: TopoConfig,
                      callback=None) -> list:
    """SGD over random single images; returns one metrics dict per step."""
    images = check_images(images)
    if images.shape[1:3] != (t.image_size, t.image_size):
        raise ValueError(f"images must be {t.image_size}px")
    history = []
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        x = images[rng.integers(len(images))]
        t.params.zero_grad()
        u, cache = t.forward(x)
        rec = reconstruction_loss(t, x, u[0], c, cfg)
        du = estimate_feature_grad(u[0], lambda w: reconstruction_loss(t, x, w, c, cfg),
                                   cfg.probes, cfg.spsa_step, seed=[cfg.seed, step])
        t.backward(du[None], cache)
        pen = stochastic_penalty_backward(t, x, cfg.lam, rng, cfg.penalty_samples)
        optimizer_step(t.params, cfg.lr)
        row = {"step": step, "reconstruction": rec, "penalty": pen, "loss": rec + pen}
        if not np.isfinite(row["loss"]):
            raise FloatingPointError(f"non-finite loss at step {step}")
        history.append(row)
        if callback is not None:
            callback(row)
    return history


class TopologyTransformer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit(images)`` trains the encoder, ``transform`` returns packed cluster features."""

    def __init__(self, preset="table1-5", slots=3, image_size=32, patch_size=8, d_model=32,
                 heads=4, blocks=2, thetas=None, phis=None, min_n=3, lam=1e-3, lr=1e-3,
                 probes=4, spsa_step=0.05, steps=100, seed=0, render_mode=PROJECTION,
                 world_extent=8.0, subdivisions=1, decoder_ckpt=None):
        self.preset = preset
        self.slots = slots
        self.image_size = image_size
        self.patch_size = patch_size
        self.d_model = d_model
        self.heads = heads
        self.blocks = blocks
        self.thetas = thetas
        self.phis = phis
        self.min_n = min_n
        self.lam = lam
        self.lr = lr
        self.probes = probes
        self.spsa_step = spsa_step
        self.steps = steps
        self.seed = seed
        self.render_mode = render_mode
        self.world_extent = world_extent
        self.subdivisions = subdivisions
        self.decoder_ckpt = decoder_ckpt

    def _setup(self):
        gen_params, gen_hidden, layout = None, 64, None
        if self.decoder_ckpt:
            gen_params, meta = load_params(self.decoder_ckpt)
            layout = FeatureLayout.from_dict(meta["layout"])
            gen_hidden = meta.get("estimator", {}).get("hidden", gen_hidden)
        preset_layout, c = load_preset(self.preset)
        layout = layout or preset_layout
        self.layout_, self.constraints_ = layout, c.for_layout(layout)
        kw = {} if self.thetas is None else {"thetas": self.thetas}
        if self.phis is not None:
            kw["phis"] = self.phis
        self.config_ = TopoConfig(min_n=self.min_n, lam=self.lam, lr=self.lr, probes=self.probes,
                                  spsa_step=self.spsa_step, steps=self.steps, seed=self.seed,
                                  render_mode=self.render_mode, world_extent=self.world_extent,
                                  subdivisions=self.subdivisions, **kw)
        self.model_ = TopoTransformer(layout, self.slots, self.image_size, self.patch_size,
                                      self.d_model, self.heads, self.blocks, gen_hidden=gen_hidden,
                                      seed=self.seed, generator_params=gen_params)

    def fit(self, X, y=None, callback=None):
        self._setup()
        self.history_ = train_transformer(self.model_, X, self.constraints_, self.config_, callback)
        return self

    def predict_clusters(self, X) -> list:
        u, _ = self.model_.forward(check_images(X))
        return [cluster_from_normalized(ui, self.layout_, self.constraints_, self.slots) for ui in u]

    def transform(self, X) -> np.ndarray:
        return np.stack([pack_cluster(g) for g in self.predict_clusters(X)])

    def score_loss(self, X) -> float:
        return mean_topo_loss(self.model_, X, self.constraints_, self.config_)

    @property
    def n_features_out_(self) -> int:
        return cluster_size(self.layout_, self.slots)
