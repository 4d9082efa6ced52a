"""Voxel denoising diffusion with classifier-free guidance.

The denoiser is a small 3-D U-Net over ±1 occupancy volumes: a stride-2 patch
convolution, one residual stage per resolution (R/2 then R/4), attention at
the lowest resolution, and a mirrored decoder with skip connections. It
predicts the noise added by the forward process.

Conditioning enters three ways: the joint image embedding is projected and
added to the timestep embedding; in the attention block it is projected into
4 extra key/value tokens; and a small trainable image encoder contributes 8
more context tokens. Each conditioning stream has a learned null stand-in,
substituted with probability p (independently per stream) during training so
one network serves both the conditional and unconditional roles. Sampling
combines the two predictions as uncond + w*(cond - uncond); w=1 and
no-conditioning short-circuit to a single branch, exactly.

The noise schedule is linear in beta over the configured step count, with
endpoints scaled by 1000/steps so that shorter schedules traverse the same
total noise as the 1000-step reference; at 1000 steps it is the canonical
1e-4..0.02 line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import encoders as enc
from . import gradcore as gc
from .errors import ConfigError, ShapeError
from .voxelgeom import VoxelGrid, binarize

Array = np.ndarray

BASE_STEPS = 1000


# --------------------------------------------------------------------------
# noise schedule

@dataclass(frozen=True)
class NoiseSchedule:
    steps: int
    betas: Array       # (steps,), t = 1..steps at index t-1
    alphas: Array      # 1 - betas
    alpha_bar: Array   # (steps+1,), alpha_bar[0] = 1, alpha_bar[t] = prod alphas[:t]

    def abar(self, t) -> Array:
        """Cumulative signal fraction at step t (t may be scalar or array, 0..steps)."""
        t = np.asarray(t)
        if t.min() < 0 or t.max() > self.steps:
            raise ConfigError(f"timestep {t} outside [0, {self.steps}]")
        return self.alpha_bar[t]


def make_schedule(steps: int = BASE_STEPS, beta_min: float = 1e-4,
                  beta_max: float = 0.02) -> NoiseSchedule:
    """Linear-beta schedule; endpoints scale by 1000/steps to match the reference."""
    if steps < 1:
        raise ConfigError(f"schedule needs at least 1 step, got {steps}")
    scale = BASE_STEPS / steps
    betas = np.linspace(beta_min * scale, beta_max * scale, steps, dtype=np.float64)
    if betas[0] <= 0 or betas[-1] >= 1:
        raise ConfigError(f"schedule betas [{betas[0]:.3g}, {betas[-1]:.3g}] leave (0, 1); "
                          f"too few steps for the endpoint scaling")
    alphas = 1.0 - betas
    alpha_bar = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(steps=steps, betas=betas, alphas=alphas, alpha_bar=alpha_bar)


def diffuse(x0: Array, abar, eps: Array) -> Array:
    """Closed-form forward noising: sqrt(abar)*x0 + sqrt(1-abar)*eps."""
    abar = np.asarray(abar, dtype=np.float32)
    if abar.ndim == 1:
        abar = abar.reshape((-1,) + (1,) * (np.asarray(x0).ndim - 1))
    return (np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps).astype(np.float32)


def q_sample(x0: Array, t, eps: Array, schedule: NoiseSchedule) -> Array:
    """Noise a clean volume to step t of the schedule."""
    x0 = np.asarray(x0, dtype=np.float32)
    if np.asarray(eps).shape != x0.shape:
        raise ShapeError(f"noise shape {np.asarray(eps).shape} does not match {x0.shape}")
    return diffuse(x0, schedule.abar(t), eps)


# --------------------------------------------------------------------------
# timestep embedding

def timestep_embedding(t, dim: int) -> Array:
    """Sinusoidal encoding of integer timesteps: half sines, half cosines.

    Frequencies run geometrically from 1 down to 1e-4. t may be a scalar
    (returns (dim,)) or a vector (returns (len(t), dim)).
    """
    if dim % 2 != 0 or dim < 2:
        raise ConfigError(f"timestep embedding dim must be even and >= 2, got {dim}")
    tv = np.asarray(t, dtype=np.float64)
    if tv.min() < 0:
        raise ConfigError(f"timestep must be >= 0, got {tv.min()}")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = np.exp(-math.log(1e4) * np.arange(half) / (half - 1))
    ang = tv[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(np.float32)


# --------------------------------------------------------------------------
# model configuration and parameters

@dataclass(frozen=True)
class DiffusionConfig:
    resolution: int = 16
    c0: int = 8          # decode width at full resolution
    c1: int = 24         # channels at R/2
    c2: int = 48         # channels at R/4 (attention width)
    temb: int = 96       # timestep embedding width after the MLP
    sin_dim: int = 64    # raw sinusoidal width
    heads: int = 4
    d: int = 32          # joint embedding dim
    ctx_image: enc.EncoderConfig = field(default_factory=lambda: enc.DESK_IMAGE)
    ctx_layers: int = 2
    ctx_tokens: int = 8
    joint_tokens: int = 4
    steps: int = BASE_STEPS
    beta_min: float = 1e-4
    beta_max: float = 0.02
    p_drop: float = 0.1
    w: float = 1.5
    batch: int = 16
    epochs: int = 40
    lr: float = 2e-4

    def __post_init__(self):
        if self.resolution % 4 != 0:
            raise ConfigError(f"resolution {self.resolution} must be divisible by 4 "
                              f"(two stride-2 stages)")
        if self.c2 % self.heads != 0:
            raise ConfigError(f"attention width {self.c2} not divisible by heads {self.heads}")
        if self.sin_dim % 2 != 0:
            raise ConfigError(f"sinusoidal width {self.sin_dim} must be even")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ConfigError(f"drop probability {self.p_drop} outside [0, 1]")
        if self.w < 1.0:
            raise ConfigError(f"guidance scale {self.w} < 1")
        if min(self.c0, self.c1, self.c2, self.temb, self.d, self.steps,
               self.batch, self.epochs) < 1 or self.lr <= 0:
            raise ConfigError("diffusion config fields must be positive")

    @property
    def ctx_h(self) -> int:
        return self.ctx_image.h


def _res_params(r, prefix: str, c_in: int, c_out: int, temb: int, out: dict) -> None:
    out[f"{prefix}.ln1.g"] = np.ones(c_in, dtype=np.float32)
    out[f"{prefix}.ln1.b"] = np.zeros(c_in, dtype=np.float32)
    out[f"{prefix}.conv1.w"] = (r.standard_normal((3, 3, 3, c_in, c_out))
                                * enc.INIT_STD).astype(np.float32)
    out[f"{prefix}.conv1.b"] = np.zeros(c_out, dtype=np.float32)
    out[f"{prefix}.temb.w"] = (r.standard_normal((temb, c_out)) * enc.INIT_STD).astype(np.float32)
    out[f"{prefix}.temb.b"] = np.zeros(c_out, dtype=np.float32)
    out[f"{prefix}.ln2.g"] = np.ones(c_out, dtype=np.float32)
    out[f"{prefix}.ln2.b"] = np.zeros(c_out, dtype=np.float32)
    out[f"{prefix}.conv2.w"] = (r.standard_normal((3, 3, 3, c_out, c_out))
                                * enc.INIT_STD).astype(np.float32)
    out[f"{prefix}.conv2.b"] = np.zeros(c_out, dtype=np.float32)
    if c_in != c_out:
        out[f"{prefix}.skip.w"] = (r.standard_normal((1, 1, 1, c_in, c_out))
                                   * enc.INIT_STD).astype(np.float32)
        out[f"{prefix}.skip.b"] = np.zeros(c_out, dtype=np.float32)


def init_denoiser(cfg: DiffusionConfig, seed: int) -> dict:
    """All trainable state: U-Net, conditioning projections, context encoder, nulls.

    The final output convolution starts at zero so the untrained model
    predicts zero noise (MSE against unit noise starts at 1).
    """
    r = gc.rng(seed, "init-ddpm")
    p: dict = {}
    p["temb.w1"] = (r.standard_normal((cfg.sin_dim, cfg.temb)) * enc.INIT_STD).astype(np.float32)
    p["temb.b1"] = np.zeros(cfg.temb, dtype=np.float32)
    p["temb.w2"] = (r.standard_normal((cfg.temb, cfg.temb)) * enc.INIT_STD).astype(np.float32)
    p["temb.b2"] = np.zeros(cfg.temb, dtype=np.float32)
    p["cond.w"] = (r.standard_normal((cfg.d, cfg.temb)) * enc.INIT_STD).astype(np.float32)
    p["cond.b"] = np.zeros(cfg.temb, dtype=np.float32)

    p["patch.w"] = (r.standard_normal((2, 2, 2, 1, cfg.c1)) * enc.INIT_STD).astype(np.float32)
    p["patch.b"] = np.zeros(cfg.c1, dtype=np.float32)
    _res_params(r, "res1", cfg.c1, cfg.c1, cfg.temb, p)
    p["down1.w"] = (r.standard_normal((2, 2, 2, cfg.c1, cfg.c2)) * enc.INIT_STD).astype(np.float32)
    p["down1.b"] = np.zeros(cfg.c2, dtype=np.float32)
    _res_params(r, "res2", cfg.c2, cfg.c2, cfg.temb, p)

    c2 = cfg.c2
    p["attn.ln.g"] = np.ones(c2, dtype=np.float32)
    p["attn.ln.b"] = np.zeros(c2, dtype=np.float32)
    for nm in ("wq", "wk", "wv", "wo"):
        p[f"attn.{nm}"] = (r.standard_normal((c2, c2)) * enc.INIT_STD).astype(np.float32)
    for nm in ("bq", "bk", "bv", "bo"):
        p[f"attn.{nm}"] = np.zeros(c2, dtype=np.float32)
    p["attn.joint.w"] = (r.standard_normal((cfg.d, cfg.joint_tokens * c2))
                         * enc.INIT_STD).astype(np.float32)
    p["attn.joint.b"] = np.zeros(cfg.joint_tokens * c2, dtype=np.float32)
    p["attn.ctx.w"] = (r.standard_normal((cfg.ctx_h, c2)) * enc.INIT_STD).astype(np.float32)
    p["attn.ctx.b"] = np.zeros(c2, dtype=np.float32)

    _res_params(r, "res3", cfg.c2, cfg.c2, cfg.temb, p)
    p["up1.proj.w"] = (r.standard_normal((1, 1, 1, cfg.c2, cfg.c1))
                       * enc.INIT_STD).astype(np.float32)
    p["up1.proj.b"] = np.zeros(cfg.c1, dtype=np.float32)
    _res_params(r, "up1", 2 * cfg.c1, cfg.c1, cfg.temb, p)
    p["dec.ln.g"] = np.ones(cfg.c1, dtype=np.float32)
    p["dec.ln.b"] = np.zeros(cfg.c1, dtype=np.float32)
    # decode stays at R/2: the conv emits 8 subvoxel channels per output channel
    # which a pixel shuffle rearranges to full resolution
    p["dec.w"] = (r.standard_normal((3, 3, 3, cfg.c1, 8 * cfg.c0))
                  * enc.INIT_STD).astype(np.float32)
    p["dec.b"] = np.zeros(8 * cfg.c0, dtype=np.float32)
    p["out.w"] = np.zeros((1, 1, 1, cfg.c0, 1), dtype=np.float32)
    p["out.b"] = np.zeros(1, dtype=np.float32)

    rc = gc.rng(seed, "init-ctx")
    for name, arr in enc.init_context_encoder(cfg.ctx_image, rc, layers=cfg.ctx_layers,
                                              n_tokens=cfg.ctx_tokens).items():
        p[f"ctx.{name}"] = arr

    rn = gc.rng(seed, "init-null")
    p["null.joint"] = (rn.standard_normal(cfg.d) * enc.INIT_STD).astype(np.float32)
    p["null.ctx"] = (rn.standard_normal((cfg.ctx_tokens, cfg.ctx_h))
                     * enc.INIT_STD).astype(np.float32)
    return p


# --------------------------------------------------------------------------
# forward pass

def _pixel_shuffle3d(x: gc.Tensor, c_out: int) -> gc.Tensor:
    """(B, n, n, n, 8*c) -> (B, 2n, 2n, 2n, c): each channel group fills a 2x2x2 cell."""
    B, n, _, _, c8 = x.dims
    y = gc.reshape(x, (B, n, n, n, 2, 2, 2, c_out))
    y = gc.transpose(y, (0, 1, 4, 2, 5, 3, 6, 7))
    return gc.reshape(y, (B, 2 * n, 2 * n, 2 * n, c_out))


def _res_block(lv: dict, prefix: str, x: gc.Tensor, temb: gc.Tensor) -> gc.Tensor:
    B = x.dims[0]
    c_out = lv[f"{prefix}.conv1.w"].dims[-1]
    h = gc.gelu(gc.layernorm(x, lv[f"{prefix}.ln1.g"], lv[f"{prefix}.ln1.b"]))
    h = gc.add(gc.conv3d_batch(h, lv[f"{prefix}.conv1.w"], 1, "same"), lv[f"{prefix}.conv1.b"])
    shift = gc.add(gc.matmul(temb, lv[f"{prefix}.temb.w"]), lv[f"{prefix}.temb.b"])
    h = gc.add(h, gc.reshape(shift, (B, 1, 1, 1, c_out)))
    h = gc.gelu(gc.layernorm(h, lv[f"{prefix}.ln2.g"], lv[f"{prefix}.ln2.b"]))
    h = gc.add(gc.conv3d_batch(h, lv[f"{prefix}.conv2.w"], 1, "same"), lv[f"{prefix}.conv2.b"])
    if f"{prefix}.skip.w" in lv:
        x = gc.add(gc.conv3d_batch(x, lv[f"{prefix}.skip.w"], 1, "valid"),
                   lv[f"{prefix}.skip.b"])
    return gc.add(x, h)


def _attn_block(lv: dict, cfg: DiffusionConfig, x: gc.Tensor, e: gc.Tensor,
                ctx: gc.Tensor, probe: dict | None) -> gc.Tensor:
    B, n = x.dims[0], x.dims[1]
    c = x.dims[-1]
    tokens = gc.reshape(x, (B, n * n * n, c))
    tn = gc.layernorm(tokens, lv["attn.ln.g"], lv["attn.ln.b"])
    jt = gc.reshape(gc.add(gc.matmul(e, lv["attn.joint.w"]), lv["attn.joint.b"]),
                    (B, cfg.joint_tokens, c))
    ct = gc.add(gc.matmul(ctx, lv["attn.ctx.w"]), lv["attn.ctx.b"])
    kv = gc.concat([tn, jt, ct], axis=1)
    if probe is not None:
        probe["attn_context_len"] = kv.dims[1]
    q = gc.add(gc.matmul(tn, lv["attn.wq"]), lv["attn.bq"])
    k = gc.add(gc.matmul(kv, lv["attn.wk"]), lv["attn.bk"])
    v = gc.add(gc.matmul(kv, lv["attn.wv"]), lv["attn.bv"])
    a = gc.attention(q, k, v, cfg.heads)
    out = gc.add(gc.matmul(a, lv["attn.wo"]), lv["attn.bo"])
    return gc.add(x, gc.reshape(out, x.dims))


def denoise_tensor(g: gc.Graph, lv: dict, cfg: DiffusionConfig, x_t: Array, t,
                   e: gc.Tensor, ctx: gc.Tensor, probe: dict | None = None) -> gc.Tensor:
    """Graph-building noise prediction; x_t is data, e/ctx are graph tensors."""
    x_t = np.asarray(x_t, dtype=np.float32)
    single = x_t.ndim == 3
    if single:
        x_t = x_t[None]
    R = cfg.resolution
    if x_t.shape[1:] != (R, R, R):
        raise ShapeError(f"volume shape {x_t.shape[1:]} does not match configured {R}^3")
    B = x_t.shape[0]

    sin = timestep_embedding(np.broadcast_to(np.asarray(t), (B,)), cfg.sin_dim)
    temb = gc.add(gc.matmul(gc.gelu(gc.add(gc.matmul(g.constant(sin), lv["temb.w1"]),
                                           lv["temb.b1"])), lv["temb.w2"]), lv["temb.b2"])
    temb = gc.add(temb, gc.add(gc.matmul(e, lv["cond.w"]), lv["cond.b"]))

    h0 = gc.add(gc.conv3d_batch(g.constant(x_t[..., None]), lv["patch.w"], 2, "valid"),
                lv["patch.b"])
    h1 = _res_block(lv, "res1", h0, temb)
    h2 = gc.add(gc.conv3d_batch(h1, lv["down1.w"], 2, "valid"), lv["down1.b"])
    h3 = _res_block(lv, "res2", h2, temb)
    h4 = _attn_block(lv, cfg, h3, e, ctx, probe)
    h5 = _res_block(lv, "res3", h4, temb)

    hp = gc.add(gc.conv3d_batch(h5, lv["up1.proj.w"], 1, "valid"), lv["up1.proj.b"])
    u = gc.concat([gc.nearest_upsample3d(hp, 2), h1], axis=4)
    h6 = _res_block(lv, "up1", u, temb)
    d = gc.gelu(gc.layernorm(h6, lv["dec.ln.g"], lv["dec.ln.b"]))
    d = gc.add(gc.conv3d_batch(d, lv["dec.w"], 1, "same"), lv["dec.b"])
    d = gc.gelu(_pixel_shuffle3d(d, cfg.c0))
    out = gc.add(gc.conv3d_batch(d, lv["out.w"], 1, "valid"), lv["out.b"])
    out = gc.reshape(out, (B, R, R, R))
    return gc.reshape(out, (R, R, R)) if single else out


def _context_tensors(g: gc.Graph, lv: dict, cfg: DiffusionConfig, B: int,
                     e_joint: Array | None, images: Array | None):
    """Conditioning tensors for one forward pass; None streams use the nulls."""
    if e_joint is None:
        e = gc.broadcast_to(gc.reshape(lv["null.joint"], (1, cfg.d)), (B, cfg.d))
    else:
        e = g.constant(np.broadcast_to(np.asarray(e_joint, dtype=np.float32),
                                       (B, cfg.d)).copy())
    if images is None:
        ctx = gc.broadcast_to(gc.reshape(lv["null.ctx"], (1, cfg.ctx_tokens, cfg.ctx_h)),
                              (B, cfg.ctx_tokens, cfg.ctx_h))
    else:
        imgs = np.asarray(images, dtype=np.float32)
        if imgs.ndim == 2:
            imgs = np.broadcast_to(imgs, (B,) + imgs.shape).copy()
        ctx = enc.encode_context(g, imgs, cfg.ctx_image, _ctx_subset(lv),
                                 layers=cfg.ctx_layers)
    return e, ctx


def _ctx_subset(lv: dict) -> dict:
    return {k[4:]: v for k, v in lv.items() if k.startswith("ctx.")}


def denoise_predict(params: dict, cfg: DiffusionConfig, x_t: Array, t,
                    e_joint: Array | None = None, images: Array | None = None,
                    probe: dict | None = None) -> Array:
    """Inference-mode noise prediction; null tokens stand in for absent streams."""
    g = gc.Graph(grad=False)
    lv = gc.leaves(g, params)
    B = 1 if np.asarray(x_t).ndim == 3 else np.asarray(x_t).shape[0]
    e, ctx = _context_tensors(g, lv, cfg, B, e_joint, images)
    return denoise_tensor(g, lv, cfg, x_t, t, e, ctx, probe).data


# --------------------------------------------------------------------------
# classifier-free guidance

def cfg_combine(y_uncond, y_cond, w: float):
    """uncond + w*(cond - uncond), computed as written."""
    return y_uncond + w * (y_cond - y_uncond)


def cfg_predict(params: dict, cfg: DiffusionConfig, x_t: Array, t,
                e_joint: Array | None, images: Array | None, w: float) -> Array:
    """Guided prediction; w=1 and fully-null conditioning collapse to one branch."""
    if w < 1.0:
        raise ConfigError(f"guidance scale {w} < 1")
    if e_joint is None and images is None:
        return denoise_predict(params, cfg, x_t, t, None, None)
    if w == 1.0:
        return denoise_predict(params, cfg, x_t, t, e_joint, images)
    y_c = denoise_predict(params, cfg, x_t, t, e_joint, images)
    y_u = denoise_predict(params, cfg, x_t, t, None, None)
    return cfg_combine(y_u, y_c, np.float32(w))


# --------------------------------------------------------------------------
# training

def draw_drop_masks(r: np.random.Generator, n: int, p: float):
    """Independent per-sample Bernoulli(p) drops for the two conditioning streams."""
    return r.random(n) < p, r.random(n) < p


def _mix_null(g: gc.Graph, null: gc.Tensor, real: gc.Tensor, drop: Array) -> gc.Tensor:
    """Per-row select: dropped rows take the (broadcast) null, others the real value."""
    mask = np.asarray(drop, dtype=np.float32).reshape((-1,) + (1,) * (real.ndim - 1))
    m = g.constant(mask)
    dims = real.dims
    null_b = gc.broadcast_to(gc.reshape(null, (1,) + null.dims), dims)
    return gc.add(gc.mul(null_b, m), gc.mul(real, gc.sub(g.constant(np.float32(1.0)), m)))


def train_step(opt: gc.Adam, cfg: DiffusionConfig, schedule: NoiseSchedule,
               volumes: Array, images: Array, e_joint: Array, p: float,
               r: np.random.Generator) -> float:
    """One optimizer step of noise-prediction MSE on a matched batch.

    volumes: (B, R, R, R) in ±1; images: (B, Ri, Ri); e_joint: (B, d) frozen
    joint embeddings. Per sample draws t, the noise, and two independent
    Bernoulli(p) conditioning drops from r.
    """
    volumes = np.asarray(volumes, dtype=np.float32)
    B = volumes.shape[0]
    if B < 1:
        raise ShapeError("empty training batch")
    t = r.integers(1, schedule.steps + 1, size=B)
    eps = r.standard_normal(volumes.shape, dtype=np.float32)
    x_t = q_sample(volumes, t, eps, schedule)
    drop_e, drop_c = draw_drop_masks(r, B, p)

    g = gc.Graph()
    lv = gc.leaves(g, opt.params)
    e_real = g.constant(np.asarray(e_joint, dtype=np.float32))
    e = _mix_null(g, lv["null.joint"], e_real, drop_e)
    ctx_real = enc.encode_context(g, images, cfg.ctx_image, _ctx_subset(lv),
                                  layers=cfg.ctx_layers)
    ctx = _mix_null(g, lv["null.ctx"], ctx_real, drop_c)

    pred = denoise_tensor(g, lv, cfg, x_t, t, e, ctx)
    diff = gc.sub(pred, g.constant(eps))
    loss = gc.mean(gc.mul(diff, diff))
    gc.assert_finite(loss.data, "diffusion loss")
    grads = gc.grads_by_name(lv, gc.backward(g, loss))
    opt.step(grads)
    return float(loss.data)


def train_ddpm(dataset, embeddings: Array, cfg: DiffusionConfig, seed: int,
               params: dict | None = None, opt_state: dict | None = None,
               start_epoch: int = 0):
    """Train the denoiser on the dataset's train split with frozen joint embeddings.

    embeddings must hold one (d,) row per dataset row. Returns (params, opt,
    history) with history one mean loss per epoch starting at start_epoch;
    pass params/opt_state/start_epoch from a checkpoint to resume (epoch
    numbering, and hence shuffles and noise draws, continue where they left
    off).
    """
    train_idx = dataset.train_indices
    if len(train_idx) < cfg.batch:
        raise ConfigError(f"train split has {len(train_idx)} rows, smaller than one "
                          f"batch of {cfg.batch}")
    if np.asarray(embeddings).shape != (len(dataset.ids), cfg.d):
        raise ConfigError(f"embeddings shape {np.asarray(embeddings).shape} does not "
                          f"match ({len(dataset.ids)}, {cfg.d})")
    if params is None:
        params = init_denoiser(cfg, seed)
    opt = gc.Adam(params, lr=cfg.lr)
    if opt_state is not None:
        opt.load_state(opt_state)
    schedule = make_schedule(cfg.steps, cfg.beta_min, cfg.beta_max)
    volumes = enc.occupancy_to_pm1(dataset.voxels)
    embeddings = np.asarray(embeddings, dtype=np.float32)
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        perm = gc.rng(seed, "ddpm-shuffle", epoch).permutation(len(train_idx))
        order = train_idx[perm]
        losses = []
        for step, start in enumerate(range(0, len(order) - cfg.batch + 1, cfg.batch)):
            rows = order[start:start + cfg.batch]
            r = gc.rng(seed, "ddpm-noise", epoch, step)
            losses.append(train_step(opt, cfg, schedule, volumes[rows],
                                     dataset.images[rows], embeddings[rows],
                                     cfg.p_drop, r))
        history.append(float(np.mean(losses)))
    return params, opt, history


# --------------------------------------------------------------------------
# sampling

@dataclass(frozen=True)
class Conditioning:
    """One sample's guidance: the joint embedding, optionally its source image."""
    e: Array
    image: Array | None = None


def _stack_conditioning(cfg: DiffusionConfig, conds) -> tuple:
    es = np.stack([np.asarray(c.e, dtype=np.float32) for c in conds])
    if es.shape[1] != cfg.d:
        raise ShapeError(f"conditioning dim {es.shape[1]} does not match configured {cfg.d}")
    has_img = [c.image is not None for c in conds]
    if any(has_img) and not all(has_img):
        raise ConfigError("mixed image/no-image conditioning in one batch")
    images = np.stack([np.asarray(c.image, dtype=np.float32) for c in conds]) \
        if all(has_img) else None
    return es, images


def generate_batch(params: dict, cfg: DiffusionConfig, conds=None, count: int | None = None,
                   w: float | None = None, steps: int | None = None, seed: int = 0,
                   hook=None) -> Array:
    """Ancestral sampling of a batch; returns (B, R, R, R) boolean occupancy.

    conds: list of Conditioning for guided sampling, or None with count set
    for unconditional sampling. Each slot's noise trajectory derives from
    (seed, slot index), so slot i's randomness does not depend on the rest of
    the batch. hook(t, x) runs once per step with the post-update state.
    """
    if conds is None:
        if count is None or count < 1:
            raise ConfigError("unconditional sampling needs a positive count")
        B = count
        es, images = None, None
    else:
        if count is not None and count != len(conds):
            raise ConfigError(f"count {count} disagrees with {len(conds)} conditionings")
        B = len(conds)
        if B < 1:
            raise ConfigError("empty conditioning list")
        es, images = _stack_conditioning(cfg, conds)
    w = cfg.w if w is None else float(w)
    if w < 1.0:
        raise ConfigError(f"guidance scale {w} < 1")
    schedule = make_schedule(cfg.steps if steps is None else steps,
                             cfg.beta_min, cfg.beta_max)
    R = cfg.resolution
    streams = [gc.rng(seed, "gen", i) for i in range(B)]
    x = np.stack([s.standard_normal((R, R, R), dtype=np.float32) for s in streams])

    ab = schedule.alpha_bar
    for t in range(schedule.steps, 0, -1):
        eps = cfg_predict(params, cfg, x, t, es, images, w)
        x0 = (x - np.sqrt(1.0 - ab[t], dtype=np.float32) * eps) \
            / np.sqrt(ab[t], dtype=np.float32)
        np.clip(x0, -1.0, 1.0, out=x0)
        beta = schedule.betas[t - 1]
        mean = (np.sqrt(ab[t - 1]) * beta / (1.0 - ab[t])) * x0 \
            + (np.sqrt(schedule.alphas[t - 1]) * (1.0 - ab[t - 1]) / (1.0 - ab[t])) * x
        if t > 1:
            sigma = np.sqrt(beta * (1.0 - ab[t - 1]) / (1.0 - ab[t]))
            z = np.stack([s.standard_normal((R, R, R), dtype=np.float32) for s in streams])
            x = (mean + sigma * z).astype(np.float32)
        else:
            x = mean.astype(np.float32)
        if hook is not None:
            hook(t, x)
    return np.stack([binarize(v, 0.0).occ for v in x])


def generate(params: dict, cfg: DiffusionConfig, cond: Conditioning | None = None,
             w: float | None = None, steps: int | None = None, seed: int = 0,
             hook=None) -> VoxelGrid:
    """Sample one shape; unconditional when cond is None."""
    occ = generate_batch(params, cfg, conds=None if cond is None else [cond],
                         count=1 if cond is None else None,
                         w=w, steps=steps, seed=seed, hook=hook)
    return VoxelGrid(occ[0])
