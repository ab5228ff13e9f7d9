"""Sphere-set proxy: SDF, fitting losses with analytic gradients, fitting.

The proxy SDF at a point is the min over per-sphere SDFs
``|p - z_i| - r_i``. Fitting minimizes

    L = L_sdf + lambda_emptiness * L_emptiness + lambda_is * L_is

over centers and radii with Adam; radii stay positive because the
optimizer works on log r. Gradients are hand-derived subgradients: at
the kinks of max/abs and at exact min/argmin ties the contribution is 0.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NonFiniteLoss
from .sdf import AMBIENT, DETAIL, SURFACE, SdfSampleSet

_CHUNK = 8192  # rows per distance-matrix chunk


@dataclass
class SphereSet:
    """S spheres in rest pose: centers (S, 3) and radii (S,)."""

    centers: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float64)
        self.radii = np.ascontiguousarray(self.radii, dtype=np.float64)
        if self.centers.ndim != 2 or self.centers.shape[1] != 3:
            raise ConfigError(f"centers must be (S, 3), got {self.centers.shape}")
        if self.radii.shape != (len(self.centers),):
            raise ConfigError("radii must be (S,)")
        if len(self.centers) < 1:
            raise ConfigError("need at least one sphere")
        if not np.all(np.isfinite(self.centers)):
            raise ConfigError("non-finite sphere center")
        if np.any(self.radii <= 0) or not np.all(np.isfinite(self.radii)):
            raise ConfigError("radii must be positive and finite")

    @property
    def count(self) -> int:
        return len(self.radii)

    def to_json(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(
                {
                    "spheres": [
                        {"c": c.tolist(), "r": float(r)}
                        for c, r in zip(self.centers, self.radii)
                    ]
                },
                fh,
            )

    @classmethod
    def from_json(cls, path: str | Path) -> "SphereSet":
        with open(path) as fh:
            data = json.load(fh)
        spheres = data["spheres"]
        return cls(
            np.array([s["c"] for s in spheres], dtype=np.float64),
            np.array([s["r"] for s in spheres], dtype=np.float64),
        )


def sphere_set_sdf(spheres: SphereSet, points: np.ndarray) -> float | np.ndarray:
    """min over spheres of ``|p - z_i| - r_i``, batched over points."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = np.empty(len(p))
    for s in range(0, len(p), _CHUNK):
        block = p[s : s + _CHUNK]
        d = np.linalg.norm(
            block[:, None, :] - spheres.centers[None, :, :], axis=2
        )
        out[s : s + _CHUNK] = (d - spheres.radii[None, :]).min(axis=1)
    return float(out[0]) if np.asarray(points).ndim == 1 else out


def _center_distances(spheres: SphereSet, points: np.ndarray) -> np.ndarray:
    """(K, S) distances from sample points to sphere centers."""
    return np.linalg.norm(
        points[:, None, :] - spheres.centers[None, :, :], axis=2
    )


# ---------------------------------------------------------------------------
# Loss terms: each returns (value, grad_centers (S, 3), grad_radii (S,))
# ---------------------------------------------------------------------------


def loss_sdf(spheres: SphereSet, batch: SdfSampleSet):
    """Surface-fitting term.

    Inside samples (d_X < 0) contribute max(d_S, 0): the proxy is only
    pushed to cover them, never to match the interior distance. Outside
    samples contribute |d_S - d_X|.
    """
    if len(batch) == 0:
        raise ConfigError("empty batch")
    pts, dx = batch.points, batch.distances
    k = len(pts)
    dists = _center_distances(spheres, pts)  # (K, S)
    per = dists - spheres.radii[None, :]
    winner = np.argmin(per, axis=1)
    ds = per[np.arange(k), winner]
    # exact min ties get subgradient 0
    tied = (per == ds[:, None]).sum(axis=1) > 1

    inside = dx < 0.0
    residual = np.where(inside, np.maximum(ds, 0.0), np.abs(ds - dx))
    value = float(residual.mean())

    # d residual / d ds: step for the truncated branch, sign for the abs
    dres = np.where(inside, (ds > 0.0).astype(np.float64), np.sign(ds - dx))
    dres[tied] = 0.0
    dwin = dists[np.arange(k), winner]
    ok = dwin > 0.0  # coincident point/center has no defined direction
    coeff = np.where(ok, dres / k, 0.0)
    unit = np.zeros_like(pts)
    unit[ok] = (spheres.centers[winner[ok]] - pts[ok]) / dwin[ok, None]

    grad_c = np.zeros_like(spheres.centers)
    np.add.at(grad_c, winner, coeff[:, None] * unit)
    grad_r = np.zeros_like(spheres.radii)
    np.add.at(grad_r, winner, -coeff)
    return value, grad_c, grad_r


def loss_emptiness(spheres: SphereSet, batch: SdfSampleSet):
    """Pulls every sphere to contain its nearest inside sample.

    For each sphere the nearest sample point (argmin over the batch,
    held constant for the gradient) must lie inside the sphere when it
    is an interior point of the mesh; the excess distance is penalized.
    """
    if len(batch) == 0:
        raise ConfigError("empty batch")
    pts, dx = batch.points, batch.distances
    s_count = spheres.count
    dists = _center_distances(spheres, pts)  # (K, S)
    kappa = np.argmin(dists, axis=0)  # (S,)
    d_near = dists[kappa, np.arange(s_count)]
    excess = d_near - spheres.radii
    active = (dx[kappa] < 0.0) & (excess > 0.0)

    value = float(np.where(active, excess, 0.0).sum() / s_count)

    grad_c = np.zeros_like(spheres.centers)
    grad_r = np.zeros_like(spheres.radii)
    ok = active & (d_near > 0.0)
    diff = spheres.centers[ok] - pts[kappa[ok]]
    grad_c[ok] = diff / d_near[ok, None] / s_count
    grad_r[ok] = -1.0 / s_count
    return value, grad_c, grad_r


def intersection_distance(a: tuple, b: tuple) -> float:
    """Overlap depth of two spheres: max(r_a + r_b - |z_a - z_b|, 0)."""
    (za, ra), (zb, rb) = a, b
    gap = np.linalg.norm(np.asarray(za, dtype=np.float64) - np.asarray(zb))
    return float(max(ra + rb - gap, 0.0))


def pairwise_intersection_distances(spheres: SphereSet):
    """Upper-triangle (i < j) overlap depths and the pair index arrays."""
    iu, ju = np.triu_indices(spheres.count, k=1)
    diff = spheres.centers[iu] - spheres.centers[ju]
    gap = np.linalg.norm(diff, axis=1)
    overlap = np.maximum(spheres.radii[iu] + spheres.radii[ju] - gap, 0.0)
    return iu, ju, gap, overlap


def loss_is(spheres: SphereSet):
    """Mutual-intersection term that spreads the spheres apart."""
    if spheres.count < 2:
        raise ConfigError("intersection loss needs at least 2 spheres")
    iu, ju, gap, overlap = pairwise_intersection_distances(spheres)
    s2 = spheres.count**2
    value = float(overlap.sum() / s2)

    grad_c = np.zeros_like(spheres.centers)
    grad_r = np.zeros_like(spheres.radii)
    act = (overlap > 0.0) & (gap > 0.0)  # coincident centers: subgradient 0
    if np.any(act):
        unit = (spheres.centers[iu[act]] - spheres.centers[ju[act]]) / gap[
            act, None
        ]
        np.add.at(grad_c, iu[act], -unit / s2)
        np.add.at(grad_c, ju[act], unit / s2)
    np.add.at(grad_r, iu[overlap > 0.0], 1.0 / s2)
    np.add.at(grad_r, ju[overlap > 0.0], 1.0 / s2)
    return value, grad_c, grad_r


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


@dataclass
class FitConfig:
    sphere_count: int = 192
    lambda_emptiness: float = 10.0
    lambda_is: float = 0.1
    epochs: int = 2800
    batch_size: int = 16384
    lr: float = 5e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 700
    # ambient / surface / detail shares of each batch
    batch_fractions: tuple[float, float, float] = (0.10, 0.45, 0.45)
    seed: int = 0

    def validate(self) -> None:
        if self.sphere_count < 1:
            raise ConfigError("sphere_count must be >= 1")
        if self.lambda_emptiness < 0 or self.lambda_is < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.lr_decay <= 0 or self.lr_decay_every < 1:
            raise ConfigError("invalid learning-rate schedule")
        if abs(sum(self.batch_fractions) - 1.0) > 1e-9:
            raise ConfigError("batch fractions must sum to 1")
        if min(self.batch_fractions) < 0:
            raise ConfigError("batch fractions must be >= 0")


@dataclass
class FitReport:
    """Per-epoch loss components plus final quality numbers."""

    l_sdf: np.ndarray = field(default_factory=lambda: np.empty(0))
    l_emptiness: np.ndarray = field(default_factory=lambda: np.empty(0))
    l_is: np.ndarray = field(default_factory=lambda: np.empty(0))
    l_sp: np.ndarray = field(default_factory=lambda: np.empty(0))
    surface: float = float("nan")
    voldev: float = float("nan")
    wall_time: float = 0.0

    def to_csv(self, path: str | Path, header_lines: list[str] | None = None):
        lines = list(header_lines or [])
        lines.append("epoch,l_sdf,l_empty,l_is,l_sp")
        for e in range(len(self.l_sp)):
            lines.append(
                f"{e},{self.l_sdf[e]!r},{self.l_emptiness[e]!r},"
                f"{self.l_is[e]!r},{self.l_sp[e]!r}"
            )
        Path(path).write_text("\n".join(lines) + "\n")


class Adam:
    """Plain Adam over a list of arrays (canonical defaults)."""

    def __init__(self, shapes, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def init_spheres(
    samples: SdfSampleSet, count: int, bounding_radius: float, seed: int = 0
) -> SphereSet:
    """Centers drawn uniformly from inside-tagged samples, uniform radii."""
    inside = np.nonzero(samples.distances < 0.0)[0]
    if len(inside) == 0:
        raise ConfigError("no inside samples to seed sphere centers")
    rng = np.random.default_rng(seed)
    replace = len(inside) < count
    pick = rng.choice(inside, size=count, replace=replace)
    radius = 0.5 * bounding_radius / np.cbrt(count)
    return SphereSet(samples.points[pick].copy(), np.full(count, radius))


def _batch_indices(samples: SdfSampleSet, cfg: FitConfig, rng) -> np.ndarray:
    pools = {
        AMBIENT: np.nonzero(samples.tags == AMBIENT)[0],
        SURFACE: np.nonzero(samples.tags == SURFACE)[0],
        DETAIL: np.nonzero(samples.tags == DETAIL)[0],
    }
    fractions = dict(zip((AMBIENT, SURFACE, DETAIL), cfg.batch_fractions))
    # fold shares of empty pools into the surface share
    for tag in (AMBIENT, DETAIL):
        if len(pools[tag]) == 0:
            fractions[SURFACE] += fractions[tag]
            fractions[tag] = 0.0
    if len(pools[SURFACE]) == 0 and fractions[SURFACE] > 0:
        raise ConfigError("sample set has no surface samples")
    counts = {
        tag: int(round(frac * cfg.batch_size)) for tag, frac in fractions.items()
    }
    counts[SURFACE] += cfg.batch_size - sum(counts.values())
    picks = [
        rng.choice(pools[tag], size=n, replace=len(pools[tag]) < n)
        for tag, n in counts.items()
        if n > 0
    ]
    return np.concatenate(picks)


def fit_sphere_proxy(
    mesh,
    samples: SdfSampleSet,
    cfg: FitConfig,
) -> tuple[SphereSet, FitReport]:
    """Adam minimization of the combined proxy loss over (centers, log r)."""
    cfg.validate()
    t0 = time.perf_counter()
    box = mesh.aabb()
    bounding_radius = float(
        np.linalg.norm(mesh.vertices - box.center, axis=1).max()
    )
    start = init_spheres(samples, cfg.sphere_count, bounding_radius, cfg.seed)
    centers = start.centers.copy()
    log_r = np.log(start.radii.copy())

    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam([centers.shape, log_r.shape], lr=cfg.lr)
    hist = {k: np.zeros(cfg.epochs) for k in ("sdf", "empty", "is", "sp")}

    for epoch in range(cfg.epochs):
        batch = samples.subset(_batch_indices(samples, cfg, rng))
        spheres = SphereSet(centers, np.exp(log_r))

        v_sdf, gc_sdf, gr_sdf = loss_sdf(spheres, batch)
        v_emp, gc_emp, gr_emp = loss_emptiness(spheres, batch)
        if cfg.sphere_count >= 2 and cfg.lambda_is > 0:
            v_is, gc_is, gr_is = loss_is(spheres)
        else:
            v_is, gc_is, gr_is = 0.0, 0.0, 0.0

        value = v_sdf + cfg.lambda_emptiness * v_emp + cfg.lambda_is * v_is
        if not np.isfinite(value):
            exc = NonFiniteLoss(f"loss became {value!r} at epoch {epoch}")
            exc.report = _make_report(hist, epoch, t0)  # partial history
            raise exc

        grad_c = gc_sdf + cfg.lambda_emptiness * gc_emp + cfg.lambda_is * gc_is
        grad_r = gr_sdf + cfg.lambda_emptiness * gr_emp + cfg.lambda_is * gr_is
        grad_log_r = grad_r * spheres.radii  # d/d(log r) = r * d/dr

        opt.lr = cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)
        opt.step([centers, log_r], [grad_c, grad_log_r])

        hist["sdf"][epoch] = v_sdf
        hist["empty"][epoch] = v_emp
        hist["is"][epoch] = v_is
        hist["sp"][epoch] = value

    fitted = SphereSet(centers, np.exp(log_r))
    report = _make_report(hist, cfg.epochs, t0)
    report.surface = float(np.abs(sphere_set_sdf(fitted, mesh.vertices)).sum())
    return fitted, report


def _make_report(hist, epochs, t0) -> FitReport:
    return FitReport(
        l_sdf=hist["sdf"][:epochs].copy(),
        l_emptiness=hist["empty"][:epochs].copy(),
        l_is=hist["is"][:epochs].copy(),
        l_sp=hist["sp"][:epochs].copy(),
        wall_time=time.perf_counter() - t0,
    )
