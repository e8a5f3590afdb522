"""Pinhole ray generation, sampling along rays and volumetric compositing."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .fields import FieldModel
from .numerics import ConfigError, Graph, ParamStore, Tensor

log = logging.getLogger(__name__)

DEPTH_OPACITY_MIN = 0.05


@dataclass
class Rays:
    """A batch of rays in scene units; ``valid`` is False where the ray misses the box."""

    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray
    valid: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)

    def subset(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx], self.valid[idx])


@dataclass
class RaySamples:
    t: np.ndarray  # (R, N)
    deltas: np.ndarray  # (R, N)

    @property
    def count(self) -> int:
        return self.t.shape[1]


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")


def ray_box(origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Slab test; returns ``(t_near, t_far)`` with ``t_near`` clipped at 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    return np.maximum(tmin, 0.0), tmax


def check_pose(pose: np.ndarray, tol: float = 1e-6) -> None:
    pose = np.asarray(pose, dtype=float)
    if pose.shape != (4, 4):
        raise ConfigError(f"pose must be 4x4, got {pose.shape}")
    r = pose[:3, :3]
    if np.abs(r.T @ r - np.eye(3)).max() > tol:
        raise ConfigError("pose rotation is not orthonormal")


def generate_rays(
    pose: np.ndarray,
    intrinsics: Intrinsics,
    pixels: np.ndarray,
    bbox: tuple[np.ndarray, np.ndarray],
) -> Rays:
    """Rays through pixel centers; ``pixels`` holds ``(row, col)`` pairs.

    Camera convention: x right, y down, z forward. Pixel ``(r, c)`` has its
    center at image coordinates ``(c + 0.5, r + 0.5)``.
    """
    check_pose(pose)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    u = pixels[:, 1] + 0.5
    v = pixels[:, 0] + 0.5
    dc = np.stack([(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, np.ones_like(u)], axis=1)
    dirs = dc @ pose[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose[:3, 3], dirs.shape).copy()
    lo, hi = (np.asarray(b, dtype=float) for b in bbox)
    near, far = ray_box(origins, dirs, lo, hi)
    valid = far > near
    return Rays(origins, dirs, np.where(valid, near, 0.0), np.where(valid, far, 1.0), valid)


def sample_rays(rays: Rays, n: int, stratified: bool, rng: np.random.Generator | None = None) -> RaySamples:
    """``n`` samples in equal bins of ``[near, far]``; jittered when ``stratified``."""
    if n < 2:
        raise ConfigError("need at least two samples per ray")
    width = (rays.far - rays.near) / n
    if stratified:
        if rng is None:
            raise ConfigError("stratified sampling needs an rng")
        offs = rng.random((len(rays), n))
    else:
        offs = np.full((len(rays), n), 0.5)
    t = rays.near[:, None] + (np.arange(n)[None, :] + offs) * width[:, None]
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=1)
    deltas[:, -1] = width
    return RaySamples(t, deltas)


def transmittance(sigmas: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """``T_i = exp(-sum_{j<i} sigma_j delta_j)`` along the last axis."""
    sd = np.asarray(sigmas, dtype=float) * np.asarray(deltas, dtype=float)
    return np.exp(-(np.cumsum(sd, axis=-1) - sd))


def render_weights(sigma: Tensor, deltas: np.ndarray) -> Tensor:
    """Compositing weights ``T_i (1 - exp(-sigma_i delta_i))`` for ``(R, N)`` densities."""
    sd = nx.mul(sigma, deltas)
    trans = nx.exp(nx.mul(nx.exclusive_cumsum(sd, axis=1), -1.0))
    alpha = nx.sub(1.0, nx.exp(nx.mul(sd, -1.0)))
    return nx.mul(trans, alpha)


def composite(weights: Tensor, values: Tensor) -> Tensor:
    """``sum_i w_i f_i`` for weights ``(R, N)`` and per-sample values ``(R, N, C)``."""
    r, n = weights.shape
    w = nx.reshape(weights, (r, n, 1))
    return nx.sum_(nx.mul(w, values), axis=1)


@dataclass
class RenderOutput:
    weights: Tensor
    opacity: Tensor
    depth: Tensor
    depth_valid: np.ndarray
    color: Tensor | None = None
    semantic: Tensor | None = None
    instance: Tensor | None = None


def render_rays(
    model: FieldModel,
    rays: Rays,
    samples: RaySamples,
    graph: Graph | None,
    bbox: tuple[np.ndarray, np.ndarray],
    color: bool = True,
    semantic: bool = True,
    instance: bool = True,
    instance_store: ParamStore | None = None,
) -> RenderOutput:
    """Render every requested channel for a batch of rays."""
    r, n = samples.t.shape
    pts = rays.origins[:, None, :] + samples.t[:, :, None] * rays.directions[:, None, :]
    lo, hi = (np.asarray(b, dtype=float) for b in bbox)
    unit = ((pts - lo) / (hi - lo)).reshape(-1, 3)
    dirs = np.repeat(rays.directions, n, axis=0) if color else None
    heads = model.forward_points(
        unit, graph, dirs=dirs, semantic=semantic, instance=instance, instance_store=instance_store
    )
    sigma = nx.reshape(heads["sigma"], (r, n))
    weights = render_weights(sigma, samples.deltas)
    opacity = nx.sum_(weights, axis=1)
    depth_sum = nx.sum_(nx.mul(weights, samples.t), axis=1)
    valid = opacity.value > DEPTH_OPACITY_MIN
    denom = nx.add(nx.mul(opacity, valid.astype(float)), (~valid).astype(float))
    depth = nx.mul(nx.div(depth_sum, denom), valid.astype(float))
    out = RenderOutput(weights=weights, opacity=opacity, depth=depth, depth_valid=valid)

    def channel(t: Tensor) -> Tensor:
        return composite(weights, nx.reshape(t, (r, n, t.shape[1])))

    if color:
        out.color = channel(heads["color"])
    if semantic:
        out.semantic = channel(heads["semantic"])
    if instance:
        out.instance = channel(heads["instance"])
    return out


def render_ray(model: FieldModel, ray: Rays, samples: RaySamples, graph: Graph | None, bbox) -> RenderOutput:
    """Single-ray convenience wrapper around :func:`render_rays`."""
    return render_rays(model, ray, samples, graph, bbox)


def render_image(
    model: FieldModel,
    pose: np.ndarray,
    intrinsics: Intrinsics,
    height: int,
    width: int,
    bbox: tuple[np.ndarray, np.ndarray],
    n_samples: int = 128,
    chunk: int = 1024,
    threads: int = 1,
    channels: tuple[str, ...] = ("color", "depth", "semantic", "instance"),
) -> dict[str, np.ndarray]:
    """Gradient-free render of a full view.

    Pixels are split into fixed chunks and rendered independently, so results do
    not depend on ``threads``.
    """
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    pixels = np.stack([rows.ravel(), cols.ravel()], axis=1)
    rays = generate_rays(pose, intrinsics, pixels, bbox)
    starts = list(range(0, len(rays), chunk))

    def work(s: int) -> dict[str, np.ndarray]:
        sub = rays.subset(slice(s, s + chunk))
        smp = sample_rays(sub, n_samples, stratified=False)
        o = render_rays(
            model,
            sub,
            smp,
            None,
            bbox,
            color="color" in channels,
            semantic="semantic" in channels,
            instance="instance" in channels,
        )
        res = {"opacity": o.opacity.value, "depth": o.depth.value}
        for name in ("color", "semantic", "instance"):
            t = getattr(o, name)
            if t is not None:
                res[name] = t.value
        invalid = ~sub.valid
        for v in res.values():
            v[invalid] = 0.0
        return res

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    out = {}
    for key in parts[0]:
        arr = np.concatenate([p[key] for p in parts], axis=0)
        out[key] = arr.reshape((height, width) + arr.shape[1:])
    return out
