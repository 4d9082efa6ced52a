"""Command-line surface: dataset builds, training, sampling, and evaluation.

Configuration is plain key=value text (dotted keys for nesting, # comments);
`--set key=value` overrides win over the config file. Model state persists in
the CKP1 container: named f32 tensors plus a config echo block, closed by a
CRC32 so truncated or corrupted files are rejected instead of half-loaded.

Exit codes are a stable contract: 0 success, 2 configuration or validation
failure, 3 file or data failure, 4 numerical failure.
"""

import argparse
import os
import struct
import sys
import zlib
from pathlib import Path

import numpy as np

from . import cisp
from . import diffusion as dd
from . import encoders as enc
from . import gradcore as gc
from . import interp
from . import metrics as mx
from . import synthdata
from . import voxelgeom as vg
from .errors import ConfigError, DataError, NumericalError, ShapeError

Array = np.ndarray

# --------------------------------------------------------------------------
# CKP1 checkpoint container

_CKP_MAGIC = b"CKP1"
_CKP_VERSION = 1


def save_checkpoint(path, tensors: dict, config: dict) -> None:
    """Write named f32 tensors plus a config echo, CRC32-sealed.

    Tensor names and config keys are written sorted, so saving what
    load_checkpoint returned reproduces the file byte for byte.
    """
    blob = bytearray()
    blob += _CKP_MAGIC
    blob += struct.pack("<H", _CKP_VERSION)
    text = "".join(f"{k}={config[k]}\n" for k in sorted(config)).encode("utf-8")
    blob += struct.pack("<I", len(text))
    blob += text
    blob += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        if not 0 < len(nb) <= 0xFFFF:
            raise ConfigError(f"tensor name length {len(nb)} outside [1, 65535]")
        if arr.ndim > 255:
            raise ConfigError(f"tensor {name!r} rank {arr.ndim} exceeds 255")
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes(order="C")
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_checkpoint(path):
    """Read a CKP1 file; returns (tensors, config) or raises DataError."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 14:
        raise DataError(f"{path}: too short for a CKP1 header ({len(blob)} bytes)")
    if blob[:4] != _CKP_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    stored = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored:
        raise DataError(f"{path}: checksum mismatch (corrupted or truncated)")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != _CKP_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 6

    def take(n, what):
        nonlocal off
        if off + n > len(blob) - 4:
            raise DataError(f"{path}: truncated while reading {what}")
        out = blob[off:off + n]
        off += n
        return out

    (text_len,) = struct.unpack("<I", take(4, "config length"))
    config = {}
    for line in take(text_len, "config block").decode("utf-8").splitlines():
        key, val = line.split("=", 1)
        config[key] = val
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        if name in tensors:
            raise DataError(f"{path}: duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = take(4 * size, f"tensor {name!r} data")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if off != len(blob) - 4:
        raise DataError(f"{path}: {len(blob) - 4 - off} trailing bytes after tensors")
    return tensors, config


# --------------------------------------------------------------------------
# key=value configuration

_REQUIRED = object()


def parse_kv_text(text: str, source: str = "config") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _pos_int(s: str) -> int:
    v = int(s)
    if v <= 0:
        raise ValueError(f"must be > 0, got {v}")
    return v


def _nonneg_int(s: str) -> int:
    v = int(s)
    if v < 0:
        raise ValueError(f"must be >= 0, got {v}")
    return v


def _pos_float(s: str) -> float:
    v = float(s)
    if not v > 0:
        raise ValueError(f"must be > 0, got {v}")
    return v


def _str_list(s: str) -> list:
    items = [part.strip() for part in s.split(",") if part.strip()]
    if not items:
        raise ValueError("empty list")
    return items


def resolve(cfg: dict, schema: dict, allow_prefixes: tuple = ()) -> dict:
    """Cast cfg through schema {key: (caster, default)}; unknown keys rejected.

    Keys under an allowed prefix pass through uncast (the command interprets
    them). A default of _REQUIRED makes the key mandatory.
    """
    known = set(schema)
    extra = {}
    for key in cfg:
        if key in known:
            continue
        if any(key.startswith(p) for p in allow_prefixes):
            extra[key] = cfg[key]
            continue
        raise ConfigError(f"unknown config key {key!r} (expected one of "
                          f"{sorted(known)})")
    out = {}
    for key, (cast, default) in schema.items():
        if key in cfg:
            try:
                out[key] = cast(cfg[key])
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad value for {key}: {cfg[key]!r} ({e})") from e
        elif default is _REQUIRED:
            raise ConfigError(f"missing required config key {key!r}")
        else:
            out[key] = default
    out.update(extra)
    return out


def _enc_echo(prefix: str, cfg: enc.EncoderConfig) -> dict:
    return {f"{prefix}.h": str(cfg.h), f"{prefix}.layers": str(cfg.layers),
            f"{prefix}.heads": str(cfg.heads), f"{prefix}.patch": str(cfg.patch),
            f"{prefix}.d": str(cfg.d), f"{prefix}.resolution": str(cfg.resolution)}


def _enc_from_echo(echo: dict, prefix: str) -> enc.EncoderConfig:
    try:
        return enc.EncoderConfig(h=int(echo[f"{prefix}.h"]),
                                 layers=int(echo[f"{prefix}.layers"]),
                                 heads=int(echo[f"{prefix}.heads"]),
                                 patch=int(echo[f"{prefix}.patch"]),
                                 d=int(echo[f"{prefix}.d"]),
                                 resolution=int(echo[f"{prefix}.resolution"]))
    except KeyError as e:
        raise DataError(f"checkpoint config echo lacks {e.args[0]!r}") from e


def _split_tensors(tensors: dict) -> tuple:
    """Split a loaded checkpoint into (trainable params, opt state, extras)."""
    params, opt_state, extras = {}, {}, {}
    for k, v in tensors.items():
        if k.startswith("opt."):
            opt_state[k] = v
        elif k.startswith("cisp."):
            extras[k] = v
        else:
            params[k] = v
    return params, opt_state, extras


def _write_loss_log(path, history, start_epoch: int) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for i, loss in enumerate(history):
            f.write(f"{start_epoch + i}\t{loss!r}\n")


# --------------------------------------------------------------------------
# commands

def cmd_dataset(cfg: dict) -> int:
    schema = {
        "out": (str, _REQUIRED),
        "count": (_pos_int, _REQUIRED),
        "resolution": (_pos_int, 16),
        "image_resolution": (_pos_int, 32),
        "seed": (_nonneg_int, 0),
    }
    c = resolve(cfg, schema, allow_prefixes=("weights.",))
    weights = {k[len("weights."):]: float(v) for k, v in c.items()
               if k.startswith("weights.")} or None
    os.makedirs(c["out"], exist_ok=True)
    ds = synthdata.build_dataset(c["out"], count=c["count"], R=c["resolution"],
                                 R_img=c["image_resolution"], seed=c["seed"],
                                 weights=weights)
    print(f"dataset: {len(ds)} shapes at R={c['resolution']} under {c['out']}")
    return 0


def cmd_train_cisp(cfg: dict) -> int:
    schema = {
        "dataset": (str, _REQUIRED),
        "out": (str, _REQUIRED),
        "seed": (_nonneg_int, 0),
        "epochs": (_pos_int, 60),
        "batch": (_pos_int, 32),
        "lr": (_pos_float, 1e-3),
        "warmup": (_pos_int, 10),
        "decay": (_pos_float, 0.99),
        "d": (_pos_int, 32),
        "image.h": (_pos_int, 64), "image.layers": (_pos_int, 4),
        "image.heads": (_pos_int, 4), "image.patch": (_pos_int, 8),
        "shape.h": (_pos_int, 64), "shape.layers": (_pos_int, 4),
        "shape.heads": (_pos_int, 4), "shape.patch": (_pos_int, 4),
        "resume": (str, None),
    }
    c = resolve(cfg, schema)
    ds = synthdata.load_dataset(c["dataset"])
    params = opt_state = None
    start = 0
    if c["resume"]:
        tensors, echo = load_checkpoint(c["resume"])
        params, opt_state, _ = _split_tensors(tensors)
        start = int(echo["epochs_done"])
        seed = int(echo["seed"])
        ccfg = cisp.CispConfig(image=_enc_from_echo(echo, "image"),
                               shape=_enc_from_echo(echo, "shape"),
                               batch=int(echo["batch"]), epochs=c["epochs"],
                               lr=float(echo["lr"]),
                               warmup=int(echo["warmup"]),
                               decay=float(echo["decay"]))
        if c["epochs"] <= start:
            raise ConfigError(f"resume at epoch {start} needs epochs > {start}, "
                              f"got {c['epochs']}")
    else:
        seed = c["seed"]
        image = enc.EncoderConfig(h=c["image.h"], layers=c["image.layers"],
                                  heads=c["image.heads"], patch=c["image.patch"],
                                  d=c["d"], resolution=ds.images.shape[1])
        shape = enc.EncoderConfig(h=c["shape.h"], layers=c["shape.layers"],
                                  heads=c["shape.heads"], patch=c["shape.patch"],
                                  d=c["d"], resolution=ds.voxels.shape[1])
        ccfg = cisp.CispConfig(image=image, shape=shape, batch=c["batch"],
                               epochs=c["epochs"], lr=c["lr"],
                               warmup=c["warmup"], decay=c["decay"])
    params, opt, history = cisp.train_cisp(ds, ccfg, seed, params=params,
                                           opt_state=opt_state, start_epoch=start)
    out = Path(c["out"])
    os.makedirs(out, exist_ok=True)
    echo = {"command": "train-cisp", "seed": str(seed),
            "epochs_done": str(ccfg.epochs), "batch": str(ccfg.batch),
            "epochs": str(ccfg.epochs), "lr": repr(ccfg.lr),
            "warmup": str(ccfg.warmup), "decay": repr(ccfg.decay),
            "d": str(ccfg.image.d)}
    echo.update(_enc_echo("image", ccfg.image))
    echo.update(_enc_echo("shape", ccfg.shape))
    save_checkpoint(out / "cisp.ckp", {**params, **opt.state()}, echo)
    _write_loss_log(out / "cisp_loss.tsv", history, start)
    print(f"cisp: epochs {start}..{ccfg.epochs - 1} trained, "
          f"final loss {history[-1]:.4f}, checkpoint {out / 'cisp.ckp'}")
    return 0


def _load_cisp_tower(tensors: dict, echo: dict):
    """CISP params + config from a cisp checkpoint's tensors and echo."""
    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    ccfg = cisp.CispConfig(image=_enc_from_echo(echo, "image"),
                           shape=_enc_from_echo(echo, "shape"),
                           batch=int(echo["batch"]), epochs=int(echo["epochs"]),
                           lr=float(echo["lr"]), warmup=int(echo["warmup"]),
                           decay=float(echo["decay"]))
    return params, ccfg


def cmd_train_ddpm(cfg: dict) -> int:
    schema = {
        "dataset": (str, _REQUIRED),
        "out": (str, _REQUIRED),
        "seed": (_nonneg_int, 0),
        "cisp_checkpoint": (str, None),
        "cemb": (str, None),
        "epochs": (_pos_int, 40),
        "batch": (_pos_int, 16),
        "lr": (_pos_float, 2e-4),
        "steps": (_pos_int, 1000),
        "beta_min": (_pos_float, 1e-4),
        "beta_max": (_pos_float, 0.02),
        "p_drop": (float, 0.1),
        "w": (_pos_float, 1.5),
        "c0": (_pos_int, 8), "c1": (_pos_int, 24), "c2": (_pos_int, 48),
        "temb": (_pos_int, 96), "sin_dim": (_pos_int, 64),
        "heads": (_pos_int, 4), "d": (_pos_int, 32),
        "ctx.h": (_pos_int, 64), "ctx.heads": (_pos_int, 4),
        "ctx.patch": (_pos_int, 8), "ctx_layers": (_pos_int, 2),
        "resume": (str, None),
    }
    c = resolve(cfg, schema)
    if (c["cisp_checkpoint"] is None) == (c["cemb"] is None):
        raise ConfigError("exactly one embedding source required: "
                          "cisp_checkpoint or cemb")
    ds = synthdata.load_dataset(c["dataset"])

    params = opt_state = None
    start = 0
    if c["resume"]:
        tensors, echo = load_checkpoint(c["resume"])
        params, opt_state, prev_tower = _split_tensors(tensors)
        start = int(echo["epochs_done"])
        seed = int(echo["seed"])
        if c["epochs"] <= start:
            raise ConfigError(f"resume at epoch {start} needs epochs > {start}, "
                              f"got {c['epochs']}")
        dcfg = _diffusion_cfg_from_echo(echo, epochs=c["epochs"])
    else:
        prev_tower = {}
        echo = {}
        seed = c["seed"]
        ctx_image = enc.EncoderConfig(h=c["ctx.h"], layers=c["ctx_layers"],
                                      heads=c["ctx.heads"], patch=c["ctx.patch"],
                                      d=c["d"], resolution=ds.images.shape[1])
        dcfg = dd.DiffusionConfig(resolution=ds.voxels.shape[1], c0=c["c0"],
                                  c1=c["c1"], c2=c["c2"], temb=c["temb"],
                                  sin_dim=c["sin_dim"], heads=c["heads"], d=c["d"],
                                  ctx_image=ctx_image, ctx_layers=c["ctx_layers"],
                                  steps=c["steps"], beta_min=c["beta_min"],
                                  beta_max=c["beta_max"], p_drop=c["p_drop"],
                                  w=c["w"], batch=c["batch"], epochs=c["epochs"],
                                  lr=c["lr"])

    tower_tensors, tower_echo = {}, {}
    if c["cisp_checkpoint"]:
        tensors_c, echo_c = load_checkpoint(c["cisp_checkpoint"])
        cisp_params, ccfg = _load_cisp_tower(tensors_c, echo_c)
        if ccfg.image.d != dcfg.d:
            raise ConfigError(f"embedding dimension mismatch: cisp checkpoint "
                              f"d={ccfg.image.d}, denoiser d={dcfg.d}")
        embeddings = cisp.embed_images(cisp_params, ccfg, ds.images)
        source = "cisp"
        tower_tensors = {f"cisp.{k}": v for k, v in cisp_params.items()
                         if k.startswith("img.")}
        tower_echo = {f"cisp.{k}": v for k, v in _enc_echo("image", ccfg.image).items()}
    else:
        embeddings = cisp.load_cemb(c["cemb"])
        if embeddings.ndim != 2 or embeddings.shape[1] != dcfg.d:
            raise ConfigError(f"embedding dimension mismatch: CEMB holds "
                              f"{embeddings.shape}, denoiser d={dcfg.d}")
        source = "cemb"
    if not tower_tensors and prev_tower:
        tower_tensors = prev_tower
        tower_echo = {k: v for k, v in echo.items()
                      if k.startswith("cisp.image.")}
    params, opt, history = dd.train_ddpm(ds, embeddings, dcfg, seed, params=params,
                                         opt_state=opt_state, start_epoch=start)
    out = Path(c["out"])
    os.makedirs(out, exist_ok=True)
    echo = _diffusion_echo(dcfg, seed=seed, source=source)
    echo.update(tower_echo)
    save_checkpoint(out / "ddpm.ckp",
                    {**params, **opt.state(), **tower_tensors}, echo)
    _write_loss_log(out / "ddpm_loss.tsv", history, start)
    print(f"ddpm: epochs {start}..{dcfg.epochs - 1} trained, "
          f"final loss {history[-1]:.4f}, embedding source {source}, "
          f"checkpoint {out / 'ddpm.ckp'}")
    return 0


def _diffusion_echo(dcfg: dd.DiffusionConfig, seed: int, source: str) -> dict:
    echo = {"command": "train-ddpm", "seed": str(seed),
            "epochs_done": str(dcfg.epochs), "embedding_source": source,
            "resolution": str(dcfg.resolution), "c0": str(dcfg.c0),
            "c1": str(dcfg.c1), "c2": str(dcfg.c2), "temb": str(dcfg.temb),
            "sin_dim": str(dcfg.sin_dim), "heads": str(dcfg.heads),
            "d": str(dcfg.d), "ctx_layers": str(dcfg.ctx_layers),
            "ctx_tokens": str(dcfg.ctx_tokens),
            "joint_tokens": str(dcfg.joint_tokens), "steps": str(dcfg.steps),
            "beta_min": repr(dcfg.beta_min), "beta_max": repr(dcfg.beta_max),
            "p_drop": repr(dcfg.p_drop), "w": repr(dcfg.w),
            "batch": str(dcfg.batch), "epochs": str(dcfg.epochs),
            "lr": repr(dcfg.lr)}
    echo.update(_enc_echo("ctx", dcfg.ctx_image))
    return echo


def _diffusion_cfg_from_echo(echo: dict, epochs: int | None = None) -> dd.DiffusionConfig:
    try:
        return dd.DiffusionConfig(
            resolution=int(echo["resolution"]), c0=int(echo["c0"]),
            c1=int(echo["c1"]), c2=int(echo["c2"]), temb=int(echo["temb"]),
            sin_dim=int(echo["sin_dim"]), heads=int(echo["heads"]),
            d=int(echo["d"]), ctx_image=_enc_from_echo(echo, "ctx"),
            ctx_layers=int(echo["ctx_layers"]), ctx_tokens=int(echo["ctx_tokens"]),
            joint_tokens=int(echo["joint_tokens"]), steps=int(echo["steps"]),
            beta_min=float(echo["beta_min"]), beta_max=float(echo["beta_max"]),
            p_drop=float(echo["p_drop"]), w=float(echo["w"]),
            batch=int(echo["batch"]),
            epochs=int(echo["epochs"]) if epochs is None else epochs,
            lr=float(echo["lr"]))
    except KeyError as e:
        raise DataError(f"checkpoint config echo lacks {e.args[0]!r}") from e


def _embedded_tower(tensors: dict, echo: dict):
    """Image tower packed inside a ddpm checkpoint, as (params, CispConfig)."""
    params = {k[len("cisp."):]: v for k, v in tensors.items()
              if k.startswith("cisp.img.")}
    if not params:
        raise ConfigError("checkpoint lacks an embedded image tower (trained "
                          "from a CEMB file); pass cisp_checkpoint")
    image = _enc_from_echo(echo, "cisp.image")
    return params, cisp.CispConfig(image=image, shape=image)


def cmd_generate(cfg: dict) -> int:
    schema = {
        "checkpoint": (str, _REQUIRED),
        "out": (str, _REQUIRED),
        "image": (str, None),
        "unconditional": (_bool, False),
        "w": (_pos_float, None),
        "steps": (_pos_int, None),
        "count": (_pos_int, 1),
        "seed": (_nonneg_int, 0),
    }
    c = resolve(cfg, schema)
    tensors, echo = load_checkpoint(c["checkpoint"])
    params, _, _ = _split_tensors(tensors)
    dcfg = _diffusion_cfg_from_echo(echo)
    out = Path(c["out"])
    os.makedirs(out, exist_ok=True)

    if c["unconditional"]:
        if c["image"]:
            print("warning: --unconditional set, ignoring image argument",
                  file=sys.stderr)
        conditioning = "unconditional"
        occ = dd.generate_batch(params, dcfg, count=c["count"], w=c["w"],
                                steps=c["steps"], seed=c["seed"])
    else:
        if not c["image"]:
            raise ConfigError("generate needs image=<path> or unconditional=true")
        img = synthdata.load_pgm(c["image"])
        tower, tcfg = _embedded_tower(tensors, echo)
        e = cisp.embed_images(tower, tcfg, img[None])[0]
        conds = [dd.Conditioning(e=e, image=img)] * c["count"]
        conditioning = c["image"]
        occ = dd.generate_batch(params, dcfg, conds=conds, w=c["w"],
                                steps=c["steps"], seed=c["seed"])
    vg.save_cvx(out / "generated.cvx", occ)
    meta = {"checkpoint": c["checkpoint"], "conditioning": conditioning,
            "count": str(c["count"]), "seed": str(c["seed"]),
            "w": repr(dcfg.w if c["w"] is None else c["w"]),
            "steps": str(dcfg.steps if c["steps"] is None else c["steps"])}
    (out / "generated.meta.txt").write_text(
        "".join(f"{k}={meta[k]}\n" for k in sorted(meta)), encoding="utf-8")
    print(f"generated {c['count']} grid(s) -> {out / 'generated.cvx'}")
    return 0


def _reference_volumes(ref: str, split: str) -> Array:
    """Reference occupancy from a CVX1 file, or from a dataset manifest."""
    path = Path(ref)
    if path.is_dir() or path.name == "manifest.tsv":
        ds = synthdata.load_dataset(path if path.is_dir() else path.parent)
        pools = {"all": np.arange(len(ds)), "train": ds.train_indices,
                 "test": ds.test_indices}
        if split not in pools:
            raise ConfigError(f"reference_split must be all|train|test, "
                              f"got {split!r}")
        return ds.voxels[pools[split]]
    return vg.load_cvx(path)


def cmd_evaluate(cfg: dict) -> int:
    schema = {
        "generated": (str, _REQUIRED),
        "reference": (str, _REQUIRED),
        "out": (str, _REQUIRED),
        "metrics": (_str_list, ["iou", "fscore"]),
        "dist": (str, "cd"),
        "points": (_pos_int, 2048),
        "tau": (_pos_float, mx.F_SCORE_TAU),
        "emd_mode": (str, "exact"),
        "reference_split": (str, "all"),
        "seed": (_nonneg_int, 0),
    }
    c = resolve(cfg, schema)
    known = {"iou", "fscore", "cd", "emd", "1nna"}
    bad = [m for m in c["metrics"] if m not in known]
    if bad:
        raise ConfigError(f"unknown metrics {bad}; expected subset of {sorted(known)}")
    gen = vg.load_cvx(c["generated"])
    ref = _reference_volumes(c["reference"], c["reference_split"])
    gen_grids = [vg.VoxelGrid(gen[i]) for i in range(gen.shape[0])]
    ref_grids = [vg.VoxelGrid(ref[i]) for i in range(ref.shape[0])]
    paired = [m for m in c["metrics"] if m != "1nna"]
    if paired and len(gen_grids) != len(ref_grids):
        raise ShapeError(f"paired metrics {paired} need equal counts, got "
                         f"{len(gen_grids)} vs {len(ref_grids)}")

    def clouds(grids, tag):
        return [vg.surface_sample(g, c["points"], gc.rng(c["seed"], "eval-pts", tag, i))
                for i, g in enumerate(grids)]

    need_points = set(c["metrics"]) - {"iou"}
    gen_pts = clouds(gen_grids, "gen") if need_points else []
    ref_pts = clouds(ref_grids, "ref") if need_points else []

    names = (os.path.basename(c["generated"]), os.path.basename(c["reference"]))
    reports = []
    for m in c["metrics"]:
        if m == "iou":
            vals = [mx.iou(a, b) for a, b in zip(gen_grids, ref_grids)]
            reports.append(mx.MetricReport("iou", {"mean": float(np.mean(vals))},
                                           *names, seed=c["seed"]))
        elif m == "fscore":
            vals = [mx.fscore(a, b, c["tau"]) for a, b in zip(gen_pts, ref_pts)]
            reports.append(mx.MetricReport(
                "fscore", {"mean": float(np.mean(vals)), "tau_d": c["tau"]},
                *names, seed=c["seed"]))
        elif m == "cd":
            vals = [mx.chamfer(a, b) for a, b in zip(gen_pts, ref_pts)]
            reports.append(mx.MetricReport("cd", {"mean": float(np.mean(vals))},
                                           *names, seed=c["seed"]))
        elif m == "emd":
            vals = [mx.emd(a, b, c["emd_mode"]) for a, b in zip(gen_pts, ref_pts)]
            reports.append(mx.MetricReport("emd", {"mean": float(np.mean(vals))},
                                           *names, seed=c["seed"]))
        else:
            pct = mx.one_nna(gen_pts, ref_pts, c["dist"])
            reports.append(mx.MetricReport("1nna", {c["dist"]: pct}, *names,
                                           dist=c["dist"], seed=c["seed"]))
    out = Path(c["out"])
    os.makedirs(out, exist_ok=True)
    mx.write_reports(out / "reports.txt", reports)
    for rep in reports:
        summary = ", ".join(f"{k}={v:.6g}" for k, v in sorted(rep.values.items()))
        print(f"{rep.metric}: {summary}")
    return 0


def cmd_interpolate(cfg: dict) -> int:
    schema = {
        "ddpm_checkpoint": (str, _REQUIRED),
        "image_a": (str, _REQUIRED),
        "image_b": (str, _REQUIRED),
        "out": (str, _REQUIRED),
        "cisp_checkpoint": (str, None),
        "steps": (_pos_int, 6),
        "w": (_pos_float, None),
        "seed": (_nonneg_int, 0),
    }
    c = resolve(cfg, schema)
    tensors, echo = load_checkpoint(c["ddpm_checkpoint"])
    params, _, _ = _split_tensors(tensors)
    dcfg = _diffusion_cfg_from_echo(echo)
    if c["cisp_checkpoint"]:
        tensors_c, echo_c = load_checkpoint(c["cisp_checkpoint"])
        tower, tcfg = _load_cisp_tower(tensors_c, echo_c)
    else:
        tower, tcfg = _embedded_tower(tensors, echo)
    img_a = synthdata.load_pgm(c["image_a"])
    img_b = synthdata.load_pgm(c["image_b"])
    sweep = interp.interpolation_sweep(img_a, img_b, tower, tcfg, params, dcfg,
                                       steps=c["steps"], w=c["w"], seed=c["seed"])
    out = Path(c["out"])
    os.makedirs(out, exist_ok=True)
    interp.save_sweep(out, sweep)
    print(f"sweep: {c['steps']} grids, theta {sweep.theta:.4f} rad -> {out}")
    return 0


def cmd_ablate(cfg: dict) -> int:
    schema = {
        "selftest": (_bool, False),
        "cisp_checkpoint": (str, None),
        "dataset": (str, None),
        "split": (str, "test"),
        "batch": (_pos_int, 128),
        "trials": (_pos_int, 8),
        "seed": (_nonneg_int, 0),
        "out": (str, None),
    }
    c = resolve(cfg, schema)
    ks = (1, 2, 3, 4, 5)
    if c["selftest"]:
        e = gc.rng(c["seed"], "ablate-selftest").standard_normal((c["batch"], 32))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        row = [cisp.top_k_retrieval(e, e, k) for k in ks]
    else:
        if not c["cisp_checkpoint"] or not c["dataset"]:
            raise ConfigError("ablate needs cisp_checkpoint and dataset "
                              "(or selftest=true)")
        tensors, echo = load_checkpoint(c["cisp_checkpoint"])
        params, ccfg = _load_cisp_tower(tensors, echo)
        ds = synthdata.load_dataset(c["dataset"])
        if c["split"] == "test":
            idx = ds.test_indices
        elif c["split"] == "train":
            idx = ds.train_indices
        elif c["split"] == "all":
            idx = np.arange(len(ds))
        else:
            raise ConfigError(f"split must be test|train|all, got {c['split']!r}")
        if len(idx) < c["batch"]:
            raise ConfigError(f"split {c['split']!r} has {len(idx)} rows, fewer "
                              f"than batch={c['batch']}; lower batch or use "
                              f"split=all")
        volumes = enc.occupancy_to_pm1(ds.voxels)
        acc = np.zeros(len(ks))
        for t in range(c["trials"]):
            rows = gc.rng(c["seed"], "ablate", t).choice(idx, size=c["batch"],
                                                         replace=False)
            e_i, e_s = cisp.embed_dataset(params, ccfg, ds.images[rows],
                                          volumes[rows])
            acc += [cisp.top_k_retrieval(e_i, e_s, k) for k in ks]
        row = list(acc / c["trials"])
    header = "\t".join(f"Top-{k}" for k in ks)
    line = "\t".join(f"{v:.4f}" for v in row)
    table = f"{header}\n{line}\n"
    print(table, end="")
    if c["out"]:
        Path(c["out"]).write_text(table, encoding="utf-8")
    return 0


def cmd_embed(cfg: dict) -> int:
    schema = {
        "cisp_checkpoint": (str, _REQUIRED),
        "dataset": (str, _REQUIRED),
        "out": (str, _REQUIRED),
    }
    c = resolve(cfg, schema)
    tensors, echo = load_checkpoint(c["cisp_checkpoint"])
    params, ccfg = _load_cisp_tower(tensors, echo)
    ds = synthdata.load_dataset(c["dataset"])
    e_img, e_shp = cisp.embed_dataset(params, ccfg, ds.images,
                                      enc.occupancy_to_pm1(ds.voxels))
    out = Path(c["out"])
    os.makedirs(out, exist_ok=True)
    cisp.save_cemb(out / "images.cemb", e_img)
    cisp.save_cemb(out / "shapes.cemb", e_shp)
    print(f"embedded {len(ds)} rows -> {out / 'images.cemb'}, {out / 'shapes.cemb'}")
    return 0


COMMANDS = {
    "dataset": cmd_dataset,
    "train-cisp": cmd_train_cisp,
    "train-ddpm": cmd_train_ddpm,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "interpolate": cmd_interpolate,
    "ablate": cmd_ablate,
    "embed": cmd_embed,
}


def gather_config(args) -> dict:
    cfg = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise DataError(f"cannot read config {args.config}: {e}") from e
        cfg.update(parse_kv_text(text, source=args.config))
    if args.seed is not None:
        cfg["seed"] = str(args.seed)
    if args.out is not None:
        cfg["out"] = args.out
    for item in args.set:
        cfg.update(parse_kv_text(item, source="--set"))
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="voxdiff",
        description="Image-conditioned voxel shape generation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="override the seed key")
        p.add_argument("--out", help="override the out key")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a single config key (repeatable)")
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](gather_config(args))
    except (ConfigError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
