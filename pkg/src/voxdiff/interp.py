"""Great-circle interpolation between two image embeddings.

Both guiding images are embedded on the unit sphere, so intermediate
conditions follow the spherical linear interpolation path between them. One
shape is generated per interpolation factor with the noise draw held fixed
across the sweep: every change in the output is then attributable to the
moving embedding, not to resampled noise. The blended embedding matches no
single image, so the per-image context tokens stay at their learned null for
the whole sweep.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cisp
from . import diffusion as dd
from . import voxelgeom as vg
from .errors import ConfigError, NumericalError

Array = np.ndarray

PARALLEL_EPS = 1e-4  # radians; below this sin(theta) is too small to divide by


def _unit(e, name: str) -> Array:
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 1:
        raise ConfigError(f"{name} must be a vector, got shape {e.shape}")
    n = float(np.linalg.norm(e))
    if abs(n - 1.0) > 1e-3:
        raise ConfigError(f"{name} must be unit-norm, got |{name}| = {n:.6f}")
    return e


def angle_between(e_a, e_b) -> float:
    e_a, e_b = _unit(e_a, "e_a"), _unit(e_b, "e_b")
    return float(np.arccos(np.clip(e_a @ e_b, -1.0, 1.0)))


def slerp(e_a, e_b, alpha: float) -> Array:
    """Point at fraction alpha along the shorter great-circle arc from e_a to e_b.

    Near-parallel inputs fall back to a normalized straight-line blend, which
    the arc formula degenerates to there anyway. Antipodal inputs have no
    shorter arc and are rejected.
    """
    e_a, e_b = _unit(e_a, "e_a"), _unit(e_b, "e_b")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    theta = angle_between(e_a, e_b)
    if theta > np.pi - PARALLEL_EPS:
        raise NumericalError("slerp undefined for antipodal embeddings")
    if theta < PARALLEL_EPS:
        v = (1.0 - alpha) * e_a + alpha * e_b
        return v / np.linalg.norm(v)
    s = np.sin(theta)
    return (np.sin((1.0 - alpha) * theta) / s) * e_a + (np.sin(alpha * theta) / s) * e_b


@dataclass
class InterpolationSweep:
    """One generated shape per interpolation factor, endpoints included."""

    e_a: Array
    e_b: Array
    alphas: Array       # ascending, alphas[0] == 0, alphas[-1] == 1
    grids: list         # one VoxelGrid per alpha
    theta: float        # radians between e_a and e_b
    seed: int
    w: float

    def __post_init__(self):
        if len(self.grids) != len(self.alphas):
            raise ConfigError(f"{len(self.grids)} grids for {len(self.alphas)} alphas")
        a = np.asarray(self.alphas, dtype=np.float64)
        if a[0] != 0.0 or a[-1] != 1.0 or (np.diff(a) <= 0).any():
            raise ConfigError(f"alphas must ascend from 0 to 1, got {a}")


def interpolation_sweep(img_a, img_b, cisp_params: dict, cisp_cfg,
                        diff_params: dict, diff_cfg, steps: int = 6,
                        w: float | None = None, seed: int = 0) -> InterpolationSweep:
    """Embed both images, then generate along evenly spaced blend factors."""
    if steps < 2:
        raise ConfigError(f"sweep needs at least the two endpoints, got steps={steps}")
    emb = cisp.embed_images(cisp_params, cisp_cfg, np.stack([img_a, img_b]))
    e_a, e_b = emb[0].astype(np.float64), emb[1].astype(np.float64)
    if w is None:
        w = diff_cfg.w
    alphas = np.linspace(0.0, 1.0, steps)
    grids = []
    for alpha in alphas:
        e = slerp(e_a, e_b, float(alpha)).astype(np.float32)
        grids.append(dd.generate(diff_params, diff_cfg, dd.Conditioning(e=e),
                                 w=w, seed=seed))
    return InterpolationSweep(e_a=e_a, e_b=e_b, alphas=alphas, grids=grids,
                              theta=angle_between(e_a, e_b), seed=seed, w=float(w))


def _alpha_names(alphas) -> list:
    for fmt in ("{:.1f}", "{:.2f}", "{:.3f}"):
        names = [fmt.format(a) for a in alphas]
        if len(set(names)) == len(names):
            return names
    raise ConfigError(f"cannot name {len(alphas)} alphas distinctly")


def save_sweep(out_dir, sweep: InterpolationSweep) -> None:
    """One CVX1 file per alpha plus a manifest tying them together."""
    out = Path(out_dir)
    names = _alpha_names(sweep.alphas)
    files = []
    for name, grid in zip(names, sweep.grids):
        fname = f"alpha_{name}.cvx"
        vg.save_cvx(out / fname, grid)
        files.append(fname)
    lines = [f"theta={sweep.theta!r}",
             f"seed={sweep.seed}",
             f"w={sweep.w!r}",
             "alphas=" + ",".join(repr(float(a)) for a in sweep.alphas),
             "files=" + ",".join(files)]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
