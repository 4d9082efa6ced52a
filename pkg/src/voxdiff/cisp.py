"""Contrastive image-shape pretraining: loss, temperature, training, retrieval.

The objective is a symmetric InfoNCE over a batch of N matched (image, shape)
pairs: with unit-norm embeddings stacked as rows, the similarity matrix
S[j, k] = (e_i^j . e_s^k) / T has the matched pair on its diagonal, where the
learned temperature enters as T = 1/exp(tau). The loss is the mean of the
row-wise cross-entropy of S (image -> shape) and of S^T (shape -> image),
each against diagonal targets, weighted half and half.

tau trains jointly with the towers; after every optimizer step exp(tau) is
clipped into [1e-3, 100] (ceiling per the contrastive-pretraining lineage
this follows, floor for numerical safety). exp(tau_0) = 1/0.07.

Embeddings interchange through the CEMB container (little-endian):

    magic "CEMB" | u32 count | u32 d | count*d float32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import encoders as enc
from . import gradcore as gc
from .errors import ConfigError, DataError, ShapeError

Array = np.ndarray

TAU_INIT = float(np.log(1.0 / 0.07))
TAU_MIN = float(np.log(1e-3))
TAU_MAX = float(np.log(100.0))


def clamp_tau(tau: Array) -> Array:
    """Clip tau in place so exp(tau) lies in [1e-3, 100]; returns the array."""
    np.clip(tau, TAU_MIN, TAU_MAX, out=tau)
    return tau


def cisp_loss(g: gc.Graph, e_img: gc.Tensor, e_shp: gc.Tensor, tau: gc.Tensor) -> gc.Tensor:
    """Symmetric contrastive loss over matched unit-norm embedding rows."""
    if e_img.dims != e_shp.dims or e_img.ndim != 2:
        raise ShapeError(f"embedding batches must share dims (N, d), got "
                         f"{e_img.dims} and {e_shp.dims}")
    N = e_img.dims[0]
    if N < 2:
        raise ShapeError("contrastive loss undefined for N<2")
    for name, t in (("image", e_img), ("shape", e_shp)):
        norms = np.linalg.norm(t.data.astype(np.float64), axis=1)
        if np.abs(norms - 1.0).max() > 1e-4:
            raise ShapeError(f"{name} embedding rows are not unit-norm within 1e-4")
    sims = gc.matmul(e_img, gc.transpose(e_shp, (1, 0)))
    logits = gc.mul(sims, gc.exp(tau))  # S / T with T = 1/exp(tau)
    targets = np.arange(N)
    l_i2s = gc.softmax_cross_entropy(logits, targets)
    l_s2i = gc.softmax_cross_entropy(gc.transpose(logits, (1, 0)), targets)
    return gc.add(gc.mul(l_i2s, 0.5), gc.mul(l_s2i, 0.5))


def temperature_step(tau: Array, grad: Array, opt: gc.Adam) -> Array:
    """One optimizer update of tau followed by the exp-range clamp."""
    opt.step({"tau": np.asarray(grad, dtype=np.float32)})
    return clamp_tau(opt.params["tau"])


def top_k_retrieval(e_img: Array, e_shp: Array, k: int) -> float:
    """Mean of image->shape and shape->image top-k retrieval accuracy.

    Rows are matched pairs; similarity is cosine; ties resolve to the lower
    index (stable argsort), making the result deterministic.
    """
    e_img = np.asarray(e_img, dtype=np.float64)
    e_shp = np.asarray(e_shp, dtype=np.float64)
    if e_img.shape != e_shp.shape or e_img.ndim != 2:
        raise ShapeError(f"embedding batches must share dims (B, d), got "
                         f"{e_img.shape} and {e_shp.shape}")
    B = e_img.shape[0]
    if not (1 <= k <= B):
        raise ConfigError(f"retrieval k={k} outside [1, {B}]")
    ni = np.linalg.norm(e_img, axis=1, keepdims=True)
    ns = np.linalg.norm(e_shp, axis=1, keepdims=True)
    if (ni == 0).any() or (ns == 0).any():
        raise ShapeError("zero-norm embedding row in retrieval batch")
    sim = (e_img / ni) @ (e_shp / ns).T
    truth = np.arange(B)

    def hit_rate(s):
        order = np.argsort(-s, axis=1, kind="stable")
        return float((order[:, :k] == truth[:, None]).any(axis=1).mean())

    return 0.5 * (hit_rate(sim) + hit_rate(sim.T))


# --------------------------------------------------------------------------
# training

@dataclass
class CispConfig:
    image: enc.EncoderConfig = enc.DESK_IMAGE
    shape: enc.EncoderConfig = enc.DESK_SHAPE
    batch: int = 32
    epochs: int = 60
    lr: float = 1e-3
    warmup: int = 10     # epochs of linear lr ramp from lr/warmup to lr
    decay: float = 0.99  # per-epoch multiplicative lr decay (1.0 disables)

    def __post_init__(self):
        if self.image.d != self.shape.d:
            raise ConfigError(f"towers disagree on embedding dim: "
                              f"{self.image.d} vs {self.shape.d}")
        if self.batch < 2:
            raise ConfigError(f"contrastive batch must be >= 2, got {self.batch}")
        if self.epochs < 1 or self.lr <= 0:
            raise ConfigError("epochs must be >= 1 and lr > 0")
        if self.warmup < 1 or not (0.0 < self.decay <= 1.0):
            raise ConfigError("warmup must be >= 1 and decay in (0, 1]")

    def epoch_lr(self, epoch: int) -> float:
        """lr at an absolute epoch index: linear warmup then exponential decay.

        A function of the index alone (never of the total epoch count), so a
        resumed run retraces the uninterrupted schedule exactly.
        """
        ramp = min(1.0, (epoch + 1) / self.warmup)
        return self.lr * ramp * self.decay ** epoch


def init_cisp_params(cfg: CispConfig, seed: int) -> dict:
    params = {}
    for name, arr in enc.init_tower(cfg.image, "2d", gc.rng(seed, "init-img")).items():
        params[f"img.{name}"] = arr
    for name, arr in enc.init_tower(cfg.shape, "3d", gc.rng(seed, "init-shp")).items():
        params[f"shp.{name}"] = arr
    params["tau"] = np.asarray(TAU_INIT, dtype=np.float32)
    return params


def _subset(lv: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in lv.items() if k.startswith(prefix)}


def encode_batch(g: gc.Graph, params_or_leaves, cfg: CispConfig,
                 images: Array, volumes: Array):
    """Embed matched image and ±1 volume batches; returns unit-norm (N, d) pair."""
    lv = params_or_leaves
    if lv and not isinstance(next(iter(lv.values())), gc.Tensor):
        lv = gc.leaves(g, lv)
    tok_i = enc.patch_embed_2d(g, images, cfg.image, _subset(lv, "img."))
    e_i = enc.encode(g, tok_i, cfg.image, _subset(lv, "img."))
    tok_s = enc.patch_embed_3d(g, volumes, cfg.shape, _subset(lv, "shp."))
    e_s = enc.encode(g, tok_s, cfg.shape, _subset(lv, "shp."))
    return (enc.normalize_embedding(g, e_i), enc.normalize_embedding(g, e_s), lv)


def embed_images(params: dict, cfg: CispConfig, images: Array, batch: int = 64) -> Array:
    """Unit-norm image-tower embeddings for (N, R_img, R_img) images."""
    outs = []
    for start in range(0, len(images), batch):
        g = gc.Graph(grad=False)
        lv = _subset(gc.leaves(g, params), "img.")
        tok = enc.patch_embed_2d(g, images[start:start + batch], cfg.image, lv)
        e = enc.encode(g, tok, cfg.image, lv)
        outs.append(enc.normalize_embedding(g, e).data.copy())
    return np.concatenate(outs)


def train_cisp(dataset, cfg: CispConfig, seed: int, params: dict | None = None,
               opt_state: dict | None = None, start_epoch: int = 0):
    """Train both towers plus tau on the dataset's train split.

    Returns (params, opt, history) with one mean loss per epoch starting at
    start_epoch. Deterministic in (dataset, cfg, seed): shuffles, init, and
    arithmetic all derive from the seed. Partial trailing batches are dropped
    so every step sees the same N. The learning rate follows cfg.epoch_lr
    (warmup then decay, keyed by absolute epoch). Pass params/opt_state/
    start_epoch from a checkpoint to resume; epoch numbering, and with it the
    shuffles and the lr schedule, continues where it left off.
    """
    train_idx = dataset.train_indices
    if len(train_idx) < cfg.batch:
        raise ConfigError(f"train split has {len(train_idx)} pairs, smaller than one "
                          f"batch of {cfg.batch}")
    if params is None:
        params = init_cisp_params(cfg, seed)
    opt = gc.Adam(params, lr=cfg.lr)
    if opt_state is not None:
        opt.load_state(opt_state)
    volumes = enc.occupancy_to_pm1(dataset.voxels)
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        # warmup is load-bearing: at full lr from epoch 0 the towers fall into
        # the collapsed fixed point (all rows equal -> exactly zero gradient)
        opt.lr = cfg.epoch_lr(epoch)
        perm = gc.rng(seed, "cisp-shuffle", epoch).permutation(len(train_idx))
        order = train_idx[perm]
        losses = []
        for start in range(0, len(order) - cfg.batch + 1, cfg.batch):
            rows = order[start:start + cfg.batch]
            g = gc.Graph()
            e_i, e_s, lv = encode_batch(g, params, cfg, dataset.images[rows], volumes[rows])
            loss = cisp_loss(g, e_i, e_s, lv["tau"])
            gc.assert_finite(loss.data, "contrastive loss")
            grads = gc.grads_by_name(lv, gc.backward(g, loss))
            opt.step(grads)
            clamp_tau(params["tau"])
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
    return params, opt, history


def embed_dataset(params: dict, cfg: CispConfig, images: Array, volumes_pm1: Array,
                  batch: int = 64):
    """Unit-norm embeddings for every row, in chunks; returns (E_img, E_shp)."""
    outs_i, outs_s = [], []
    for start in range(0, len(images), batch):
        g = gc.Graph(grad=False)
        e_i, e_s, _ = encode_batch(g, params, cfg, images[start:start + batch],
                                   volumes_pm1[start:start + batch])
        outs_i.append(e_i.data.copy())
        outs_s.append(e_s.data.copy())
    return np.concatenate(outs_i), np.concatenate(outs_s)


# --------------------------------------------------------------------------
# CEMB container

_CEMB_MAGIC = b"CEMB"


def save_cemb(path, embeddings: Array) -> None:
    e = np.asarray(embeddings, dtype=np.float32)
    if e.ndim != 2:
        raise ShapeError(f"CEMB expects (count, d) embeddings, got {e.shape}")
    with open(path, "wb") as f:
        f.write(_CEMB_MAGIC)
        f.write(struct.pack("<II", e.shape[0], e.shape[1]))
        f.write(e.astype("<f4").tobytes())


def load_cemb(path) -> Array:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise DataError(f"CEMB file too short ({len(blob)} bytes)")
    if blob[:4] != _CEMB_MAGIC:
        raise DataError(f"bad CEMB magic {blob[:4]!r}")
    count, d = struct.unpack("<II", blob[4:12])
    expect = 12 + 4 * count * d
    if len(blob) != expect:
        raise DataError(f"CEMB payload is {len(blob)} bytes, expected {expect} "
                        f"for {count}x{d}")
    return np.frombuffer(blob, dtype="<f4", offset=12).reshape(count, d).copy()
