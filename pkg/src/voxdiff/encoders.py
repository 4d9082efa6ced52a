"""Transformer encoders: image tower E_i, voxel tower E_s, conditioning encoder E_c.

Both embedding towers share one architecture after patchification: learned
patch projection plus positional embedding, a learned readout token prepended,
L pre-norm transformer blocks, a final layernorm, and a linear h -> d head
read from the readout position. The towers differ only in the patch embedding
(2-D linear on p x p pixels vs stride-p 3-D convolution on the ±1 occupancy
volume); a structural test can assert the parameter-shape isomorphism.

E_c is a reduced two-block transformer over image patches with 8 learnable
tokens prepended; its outputs at those 8 positions serve as extra attention
context for the diffusion denoiser. It has no readout, head, or final norm,
so zeroing its weights passes the learnable tokens straight through.

Parameters live in flat {name: float32 array} dicts; forward passes build
onto a caller-supplied Graph so training composes across modules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, NumericalError, ShapeError

Array = np.ndarray

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    h: int          # hidden width
    layers: int
    heads: int
    patch: int      # patch edge (pixels for 2-D, voxels for 3-D)
    d: int          # output embedding dim
    resolution: int

    def __post_init__(self):
        if self.h % self.heads != 0:
            raise ConfigError(f"hidden dim {self.h} not divisible by heads {self.heads}")
        if self.resolution % self.patch != 0:
            raise ConfigError(f"resolution {self.resolution} not divisible by patch {self.patch}")
        if self.d < 8:
            raise ConfigError(f"embedding dim {self.d} < 8")
        if min(self.h, self.layers, self.heads, self.patch, self.d, self.resolution) < 1:
            raise ConfigError("encoder config fields must be positive")


DESK_IMAGE = EncoderConfig(h=64, layers=4, heads=4, patch=8, d=32, resolution=32)
DESK_SHAPE = EncoderConfig(h=64, layers=4, heads=4, patch=4, d=32, resolution=16)
PAPER_IMAGE = EncoderConfig(h=768, layers=12, heads=12, patch=16, d=256, resolution=224)


def token_count(cfg: EncoderConfig, kind: str) -> int:
    n = cfg.resolution // cfg.patch
    return n * n if kind == "2d" else n * n * n


def _block_params(r, h: int, prefix: str, out: dict) -> None:
    out[f"{prefix}.ln1.g"] = np.ones(h, dtype=np.float32)
    out[f"{prefix}.ln1.b"] = np.zeros(h, dtype=np.float32)
    for nm in ("wq", "wk", "wv", "wo"):
        out[f"{prefix}.attn.{nm}"] = (r.standard_normal((h, h)) * INIT_STD).astype(np.float32)
    for nm in ("bq", "bk", "bv", "bo"):
        out[f"{prefix}.attn.{nm}"] = np.zeros(h, dtype=np.float32)
    out[f"{prefix}.ln2.g"] = np.ones(h, dtype=np.float32)
    out[f"{prefix}.ln2.b"] = np.zeros(h, dtype=np.float32)
    out[f"{prefix}.mlp.w1"] = (r.standard_normal((h, 4 * h)) * INIT_STD).astype(np.float32)
    out[f"{prefix}.mlp.b1"] = np.zeros(4 * h, dtype=np.float32)
    out[f"{prefix}.mlp.w2"] = (r.standard_normal((4 * h, h)) * INIT_STD).astype(np.float32)
    out[f"{prefix}.mlp.b2"] = np.zeros(h, dtype=np.float32)


def init_tower(cfg: EncoderConfig, kind: str, r: np.random.Generator) -> dict:
    """Random init (normal, std 0.02) of one embedding tower; kind is '2d' or '3d'."""
    if kind not in ("2d", "3d"):
        raise ConfigError(f"tower kind must be '2d' or '3d', got {kind!r}")
    h, p = cfg.h, cfg.patch
    T = token_count(cfg, kind)
    out: dict = {}
    if kind == "2d":
        out["patch.w"] = (r.standard_normal((p * p, h)) * INIT_STD).astype(np.float32)
    else:
        out["patch.w"] = (r.standard_normal((p, p, p, 1, h)) * INIT_STD).astype(np.float32)
    out["patch.b"] = np.zeros(h, dtype=np.float32)
    out["patch.pos"] = (r.standard_normal((T, h)) * INIT_STD).astype(np.float32)
    out["readout"] = (r.standard_normal((1, 1, h)) * INIT_STD).astype(np.float32)
    for i in range(cfg.layers):
        _block_params(r, h, f"blk{i}", out)
    out["final_ln.g"] = np.ones(h, dtype=np.float32)
    out["final_ln.b"] = np.zeros(h, dtype=np.float32)
    out["proj.w"] = (r.standard_normal((h, cfg.d)) * INIT_STD).astype(np.float32)
    out["proj.b"] = np.zeros(cfg.d, dtype=np.float32)
    return out


def init_context_encoder(cfg: EncoderConfig, r: np.random.Generator, layers: int = 2,
                         n_tokens: int = 8) -> dict:
    """Init E_c: patch embedding, n learnable tokens, `layers` blocks, no head."""
    h, p = cfg.h, cfg.patch
    T = token_count(cfg, "2d")
    out: dict = {}
    out["patch.w"] = (r.standard_normal((p * p, h)) * INIT_STD).astype(np.float32)
    out["patch.b"] = np.zeros(h, dtype=np.float32)
    out["patch.pos"] = (r.standard_normal((T, h)) * INIT_STD).astype(np.float32)
    out["ctx_tokens"] = (r.standard_normal((n_tokens, h)) * INIT_STD).astype(np.float32)
    for i in range(layers):
        _block_params(r, h, f"blk{i}", out)
    return out


def structure_map(params: dict) -> dict:
    """{name: shape} for every parameter outside the patch-embedding layer."""
    return {k: tuple(v.shape) for k, v in params.items() if not k.startswith("patch.")}


# --------------------------------------------------------------------------
# forward passes

def _to_batch(arr: Array, want_ndim: int):
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == want_ndim - 1:
        return arr[None, ...], True
    if arr.ndim == want_ndim:
        return arr, False
    raise ShapeError(f"input rank {arr.ndim} not {want_ndim - 1} or {want_ndim}")


def _standardize(arr: Array) -> Array:
    """Zero-mean/unit-variance per example over all spatial positions.

    Renders are nonnegative with an exactly-zero background, so raw inputs of
    any two examples share a large positive component; mean-like attention
    pooling then amplifies that shared part until embeddings start out nearly
    parallel. Standardizing per example zeroes the pooled mean, so the token
    stream carries shape rather than shared luminance.
    """
    flat = arr.reshape(arr.shape[0], -1)
    mu = flat.mean(axis=1).reshape((-1,) + (1,) * (arr.ndim - 1))
    sd = flat.std(axis=1).reshape((-1,) + (1,) * (arr.ndim - 1))
    return ((arr - mu) / (sd + np.float32(1e-6))).astype(np.float32)


def patch_embed_2d(g: gc.Graph, image, cfg: EncoderConfig, lv: dict) -> gc.Tensor:
    """Tokenize grayscale images: (R, R) -> (T, h) or (B, R, R) -> (B, T, h)."""
    img, single = _to_batch(image, 3)
    B, Ri, Rj = img.shape
    if Ri != cfg.resolution or Rj != cfg.resolution:
        raise ConfigError(f"image resolution {Ri}x{Rj} does not match configured "
                          f"{cfg.resolution}")
    p = cfg.patch
    n = cfg.resolution // p
    x = g.constant(_standardize(img))
    x = gc.reshape(x, (B, n, p, n, p))
    x = gc.transpose(x, (0, 1, 3, 2, 4))
    x = gc.reshape(x, (B, n * n, p * p))
    tok = gc.add(gc.add(gc.matmul(x, lv["patch.w"]), lv["patch.b"]), lv["patch.pos"])
    return gc.reshape(tok, (n * n, cfg.h)) if single else tok


def patch_embed_3d(g: gc.Graph, volume, cfg: EncoderConfig, lv: dict) -> gc.Tensor:
    """Tokenize ±1 occupancy volumes via a stride-p 3-D convolution.

    (R, R, R) -> (T, h) or (B, R, R, R) -> (B, T, h), T = (R/p)^3.
    """
    vol, single = _to_batch(volume, 4)
    B = vol.shape[0]
    if vol.shape[1:] != (cfg.resolution,) * 3:
        raise ConfigError(f"volume resolution {vol.shape[1:]} does not match configured "
                          f"{cfg.resolution}^3")
    p = cfg.patch
    n = cfg.resolution // p
    x = g.constant(_standardize(vol)[..., None])
    y = gc.conv3d_batch(x, lv["patch.w"], stride=p, padding="valid")  # (B, n, n, n, h)
    tok = gc.reshape(y, (B, n * n * n, cfg.h))
    tok = gc.add(gc.add(tok, lv["patch.b"]), lv["patch.pos"])
    return gc.reshape(tok, (n * n * n, cfg.h)) if single else tok


def occupancy_to_pm1(occ: Array) -> Array:
    """Boolean occupancy to the ±1 float volume the shape tower consumes."""
    return np.where(np.asarray(occ, dtype=bool), 1.0, -1.0).astype(np.float32)


def _transformer_block(lv: dict, prefix: str, x: gc.Tensor, heads: int) -> gc.Tensor:
    pre = gc.layernorm(x, lv[f"{prefix}.ln1.g"], lv[f"{prefix}.ln1.b"])
    q = gc.add(gc.matmul(pre, lv[f"{prefix}.attn.wq"]), lv[f"{prefix}.attn.bq"])
    k = gc.add(gc.matmul(pre, lv[f"{prefix}.attn.wk"]), lv[f"{prefix}.attn.bk"])
    v = gc.add(gc.matmul(pre, lv[f"{prefix}.attn.wv"]), lv[f"{prefix}.attn.bv"])
    a = gc.attention(q, k, v, heads)
    x = gc.add(x, gc.add(gc.matmul(a, lv[f"{prefix}.attn.wo"]), lv[f"{prefix}.attn.bo"]))
    pre2 = gc.layernorm(x, lv[f"{prefix}.ln2.g"], lv[f"{prefix}.ln2.b"])
    hmid = gc.gelu(gc.add(gc.matmul(pre2, lv[f"{prefix}.mlp.w1"]), lv[f"{prefix}.mlp.b1"]))
    return gc.add(x, gc.add(gc.matmul(hmid, lv[f"{prefix}.mlp.w2"]), lv[f"{prefix}.mlp.b2"]))


def encode(g: gc.Graph, tokens: gc.Tensor, cfg: EncoderConfig, lv: dict) -> gc.Tensor:
    """Run the tower on positioned tokens; returns the pre-normalization embedding.

    tokens: (T, h) or (B, T, h); output (d,) or (B, d).
    """
    single = tokens.ndim == 2
    if single:
        tokens = gc.reshape(tokens, (1,) + tokens.dims)
    B, T, h = tokens.dims
    if h != cfg.h:
        raise ShapeError(f"token width {h} does not match configured hidden dim {cfg.h}")
    readout = gc.broadcast_to(lv["readout"], (B, 1, h))
    x = gc.concat([readout, tokens], axis=1)
    for i in range(cfg.layers):
        x = _transformer_block(lv, f"blk{i}", x, cfg.heads)
    x = gc.layernorm(x, lv["final_ln.g"], lv["final_ln.b"])
    head = gc.reshape(gc.slice_axis(x, 1, 0, 1), (B, h))
    e = gc.add(gc.matmul(head, lv["proj.w"]), lv["proj.b"])
    return gc.reshape(e, (cfg.d,)) if single else e


def encode_context(g: gc.Graph, image, cfg: EncoderConfig, lv: dict,
                   layers: int = 2) -> gc.Tensor:
    """E_c forward: outputs at the 8 learnable-token positions, (B, 8, h) or (8, h)."""
    img, single = _to_batch(image, 3)
    B = img.shape[0]
    tokens = patch_embed_2d(g, img, cfg, lv)
    n_tok, h = lv["ctx_tokens"].data.shape
    ctx = gc.broadcast_to(gc.reshape(lv["ctx_tokens"], (1, n_tok, h)), (B, n_tok, h))
    x = gc.concat([ctx, tokens], axis=1)
    for i in range(layers):
        x = _transformer_block(lv, f"blk{i}", x, cfg.heads)
    out = gc.slice_axis(x, 1, 0, n_tok)
    return gc.reshape(out, (n_tok, h)) if single else out


def normalize_embedding(g: gc.Graph, e: gc.Tensor) -> gc.Tensor:
    """Scale an embedding (or rows of a batch) to unit L2 norm."""
    try:
        return gc.l2_normalize(e, axis=-1)
    except NumericalError:
        raise NumericalError("degenerate embedding: zero norm") from None
