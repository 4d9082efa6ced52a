"""Quantitative evaluation of generated shape sets.

Distribution-level: Chamfer distance, earth mover's distance (exact
assignment or an auction approximation), and leave-one-out 1-NN
classification accuracy between a generated and a reference set. Per-shape
coherence against a target: voxel IoU and point-cloud F-score, plus the
best-of-k protocol that reports the maximum over k conditioned generations.

Point clouds are (n, 3) float arrays in the [-1, 1]^3 frame. The Chamfer
distance here sums the two directional means of squared nearest-neighbor
distances; EMD is the mean Euclidean length of the optimal one-to-one
matching. Both conventions follow the reference evaluation code that the
numbers are meant to be comparable against.
"""

import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import gradcore as gc
from . import voxelgeom as vg
from .errors import ConfigError, DataError, ShapeError

Array = np.ndarray

# metric name -> inclusive value range for report validation
_RANGES = {
    "cd": (0.0, np.inf),
    "emd": (0.0, np.inf),
    "1nna": (0.0, 100.0),
    "iou": (0.0, 1.0),
    "fscore": (0.0, 1.0),
    "coherence": (0.0, 1.0),
}

F_SCORE_TAU = 0.02  # 1% of the [-1, 1] frame side


def _cloud(p, name: str) -> Array:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ShapeError(f"{name} must be (n, 3), got {p.shape}")
    if p.shape[0] == 0:
        raise ShapeError(f"{name} is empty")
    return p


def pairwise_sq(p: Array, q: Array) -> Array:
    """(|P|, |Q|) squared Euclidean distances from explicit differences.

    Chunked over rows to bound the broadcast scratch; the direct form keeps
    duplicate points at exactly zero, which the expanded inner-product trick
    does not.
    """
    out = np.empty((p.shape[0], q.shape[0]))
    step = max(1, (1 << 22) // max(q.shape[0], 1))
    for i in range(0, p.shape[0], step):
        diff = p[i:i + step, None, :] - q[None, :, :]
        out[i:i + step] = np.square(diff).sum(axis=2)
    return out


def chamfer(p, q) -> float:
    """Sum of the two directional means of squared nearest-neighbor distances."""
    p, q = _cloud(p, "P"), _cloud(q, "Q")
    d2 = pairwise_sq(p, q)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


# --------------------------------------------------------------------------
# earth mover's distance

def _auction_assign(cost: Array, eps_end: float) -> Array:
    """Assignment by forward auction with epsilon scaling.

    Maximizes total -cost. Prices persist across scaling rounds; epsilon
    starts at half the cost range and divides by 5 until eps_end, where the
    standard bound caps the total suboptimality at n * eps_end. Returns the
    matched column for each row; the assignment is feasible, so its cost can
    never undercut the optimum.
    """
    n = cost.shape[0]
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    a = -cost
    prices = np.zeros(n)
    spread = float(cost.max() - cost.min())
    eps = max(spread / 2.0, eps_end)
    while True:
        owner = np.full(n, -1, dtype=np.int64)
        matched = np.full(n, -1, dtype=np.int64)
        while (matched < 0).any():
            bidders = np.flatnonzero(matched < 0)
            v = a[bidders] - prices
            best = np.argmax(v, axis=1)
            rows = np.arange(len(bidders))
            best_v = v[rows, best]
            v[rows, best] = -np.inf
            second_v = v.max(axis=1)
            bids = prices[best] + (best_v - second_v) + eps
            for j in np.unique(best):
                sel = np.flatnonzero(best == j)
                top = sel[np.argmax(bids[sel])]
                prices[j] = bids[top]
                if owner[j] >= 0:
                    matched[owner[j]] = -1
                owner[j] = bidders[top]
                matched[bidders[top]] = j
        if eps <= eps_end:
            return matched
        eps = max(eps / 5.0, eps_end)


def emd(p, q, mode: str = "exact") -> float:
    """Mean Euclidean distance under the optimal one-to-one matching.

    exact solves the assignment problem outright; approx runs the auction
    solver, landing within eps_end = 1e-4 * max distance of the optimum
    (per point) while never returning less than it.
    """
    p, q = _cloud(p, "P"), _cloud(q, "Q")
    if p.shape[0] != q.shape[0]:
        raise ShapeError(f"EMD requires equal cardinality: {p.shape[0]} vs {q.shape[0]}")
    cost = np.sqrt(pairwise_sq(p, q))
    if mode == "exact":
        r, c = linear_sum_assignment(cost)
        return float(cost[r, c].mean())
    if mode == "approx":
        cols = _auction_assign(cost, eps_end=max(1e-4 * float(cost.max()), 1e-12))
        return float(cost[np.arange(cost.shape[0]), cols].mean())
    raise ConfigError(f"EMD mode must be 'exact' or 'approx', got {mode!r}")


# --------------------------------------------------------------------------
# 1-NN accuracy

def _shape_distance_matrix(clouds: list, dist: str) -> Array:
    n = len(clouds)
    d = np.zeros((n, n))
    fn = chamfer if dist == "cd" else (lambda a, b: emd(a, b, "exact"))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = fn(clouds[i], clouds[j])
    return d


def one_nna(s_g, s_r, dist: str = "cd") -> float:
    """Leave-one-out 1-NN classification accuracy between the two sets, in percent.

    Every sample's nearest neighbor among all remaining samples votes for its
    own set; 50% means the classifier cannot tell generated from reference.
    A sample counts as correctly classified only when its nearest same-set
    distance is strictly below the nearest cross-set distance, so exact ties
    (duplicated shapes) push toward 50% rather than away.
    """
    dist = dist.lower()
    if dist not in ("cd", "emd"):
        raise ConfigError(f"distance kind must be 'cd' or 'emd', got {dist!r}")
    s_g, s_r = list(s_g), list(s_r)
    if len(s_g) != len(s_r):
        raise ShapeError(f"1-NNA needs equal set sizes, got {len(s_g)} vs {len(s_r)}")
    if not s_g:
        raise ShapeError("1-NNA needs nonempty sets")
    clouds = [_cloud(c, f"shape {i}") for i, c in enumerate(s_g + s_r)]
    sizes = {c.shape[0] for c in clouds}
    if len(sizes) > 1:
        raise ShapeError(f"shapes must share one point count, got {sorted(sizes)}")
    n = len(s_g)
    d = _shape_distance_matrix(clouds, dist)
    np.fill_diagonal(d, np.inf)
    correct = 0
    for x in range(2 * n):
        same = slice(0, n) if x < n else slice(n, 2 * n)
        other = slice(n, 2 * n) if x < n else slice(0, n)
        if d[x, same].min() < d[x, other].min():
            correct += 1
    return 100.0 * correct / (2 * n)


# --------------------------------------------------------------------------
# per-shape coherence

def iou(a, b) -> float:
    """Voxel intersection over union; both-empty counts as identical."""
    if not a.occ.any() and not b.occ.any():
        warnings.warn("IoU of two empty grids defined as 1.0", stacklevel=2)
    return vg.iou_voxels(a, b)


def fscore(p_pred, p_gt, tau_d: float = F_SCORE_TAU) -> float:
    """Harmonic mean of point precision and recall at distance tau_d (inclusive)."""
    if tau_d <= 0:
        raise ConfigError(f"fscore threshold must be > 0, got {tau_d}")
    p_pred, p_gt = _cloud(p_pred, "P_pred"), _cloud(p_gt, "P_gt")
    d2 = pairwise_sq(p_pred, p_gt)
    t2 = tau_d * tau_d
    precision = float((d2.min(axis=1) <= t2).mean())
    recall = float((d2.min(axis=0) <= t2).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def coherence_best_of_k(generator, image, target: vg.VoxelGrid, k: int, seed: int,
                        n_points: int = 2048, tau_d: float = F_SCORE_TAU) -> tuple:
    """Best IoU and best F-score over k conditioned generations.

    generator(image, seed) -> VoxelGrid runs once per derived seed, so the k
    draws are independent but the whole protocol replays from `seed`. A
    generation with no occupied voxels has no surface to sample and scores
    zero on both metrics (unless the target is also empty). The two maxima
    may come from different draws.
    """
    if k < 1:
        raise ConfigError(f"best-of-k needs k >= 1, got {k}")
    target_pts = None
    if target.occ.any():
        target_pts = vg.surface_sample(target, n_points,
                                       gc.rng(seed, "coherence-pts", "target"))
    best_iou, best_f = 0.0, 0.0
    for i in range(k):
        child = int(gc.rng(seed, "coherence", i).integers(2 ** 63))
        grid = generator(image, child)
        best_iou = max(best_iou, iou(grid, target))
        if target_pts is not None and grid.occ.any():
            pts = vg.surface_sample(grid, n_points, gc.rng(seed, "coherence-pts", i))
            best_f = max(best_f, fscore(pts, target_pts, tau_d))
    return best_iou, best_f


# --------------------------------------------------------------------------
# report records

def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class MetricReport:
    """One evaluation result with enough identity to trace where it came from."""

    metric: str
    values: dict
    set_a: str = ""
    set_b: str = ""
    dist: str | None = None
    k: int | None = None
    seed: int | None = None
    timestamp: str = field(default_factory=_utc_now)

    def __post_init__(self):
        if self.metric not in _RANGES:
            raise ConfigError(f"unknown metric {self.metric!r}; "
                              f"expected one of {sorted(_RANGES)}")
        lo, hi = _RANGES[self.metric]
        for key, v in self.values.items():
            if not np.isfinite(v):
                raise ConfigError(f"{self.metric}[{key}] = {v} is not finite")
            # keys like tau_d echo a metric parameter, not a result
            if not key.startswith("tau") and not (lo <= v <= hi):
                raise ConfigError(f"{self.metric}[{key}] = {v} outside [{lo}, {hi}]")

    def to_lines(self) -> list:
        out = [f"metric={self.metric}", f"set_a={self.set_a}", f"set_b={self.set_b}"]
        if self.dist is not None:
            out.append(f"dist={self.dist}")
        if self.k is not None:
            out.append(f"k={self.k}")
        if self.seed is not None:
            out.append(f"seed={self.seed}")
        out.append(f"timestamp={self.timestamp}")
        for key in sorted(self.values):
            out.append(f"value.{key}={self.values[key]!r}")
        out.append("---")
        return out


def write_reports(path, reports) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rep in reports:
            f.write("\n".join(rep.to_lines()) + "\n")


def read_reports(path) -> list:
    """Parse a report file back into MetricReport records (round-trips to_lines)."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    reports = []
    fields: dict = {"values": {}}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line == "---":
            if "metric" not in fields:
                raise DataError(f"{path}:{lineno}: record without a metric line")
            reports.append(MetricReport(**fields))
            fields = {"values": {}}
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        if key.startswith("value."):
            fields["values"][key[len("value."):]] = float(val)
        elif key in ("k", "seed"):
            fields[key] = int(val)
        elif key in ("metric", "set_a", "set_b", "dist", "timestamp"):
            fields[key] = val
        else:
            raise DataError(f"{path}:{lineno}: unknown report key {key!r}")
    if "metric" in fields:
        raise DataError(f"{path}: trailing record without '---' terminator")
    return reports
