"""Analytic synthetic scenes standing in for real RGB-D captures.

A scene is a set of spheres and axis-aligned boxes inside an optional
enclosing room (the inside of the scene box, labeled as background stuff).
Each frame is ray cast analytically. Per-pixel "vision-language" embeddings
are noisy class unit vectors, and mask proposals come from the ground-truth
segments through a corruption model that splits, drops, erodes and emits
multi-level (part + whole) masks.
"""

from __future__ import annotations

import json
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from ..rendering import Intrinsics, ray_box
from .formats import MaskProposal, write_feature_map, write_masks

log = logging.getLogger(__name__)

LIGHT = np.array([0.3, 0.5, 1.0]) / np.linalg.norm([0.3, 0.5, 1.0])


class SpecError(ValueError):
    pass


@dataclass
class Primitive:
    kind: str  # "sphere" | "box"
    center: tuple[float, float, float]
    size: tuple[float, ...]  # radius, or half extents
    class_id: int
    instance: int = 0
    parent: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("sphere", "box"):
            raise SpecError(f"unknown primitive kind {self.kind!r}")
        want = 1 if self.kind == "sphere" else 3
        if len(self.size) != want:
            raise SpecError(f"{self.kind} needs {want} size values, got {len(self.size)}")

    @property
    def gt_instance(self) -> int:
        return self.parent if self.parent is not None else self.instance

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=float)
        half = np.full(3, self.size[0]) if self.kind == "sphere" else np.asarray(self.size, dtype=float)
        return c - half, c + half


@dataclass
class ClassInfo:
    name: str
    thing: bool


@dataclass
class CorruptionConfig:
    split_prob: float = 0.0
    drop_prob: float = 0.0
    erosion_radius: int = 0
    multi_level: bool = False


@dataclass
class SyntheticSceneSpec:
    classes: list[ClassInfo]
    primitives: list[Primitive]
    aabb: tuple[tuple[float, float, float], tuple[float, float, float]] = ((-2.0, -2.0, 0.0), (2.0, 2.0, 2.5))
    enclosure: bool = True
    height: int = 64
    width: int = 64
    views: int = 24
    fov_deg: float = 70.0
    orbit_radius: float = 1.7
    orbit_heights: tuple[float, ...] = (1.3, 1.6)
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.5)
    semantic_dim: int = 16
    embed_noise: float = 0.1
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)

    def validate(self) -> None:
        if not self.classes or self.classes[0].thing:
            raise SpecError("class 0 must exist and be the background stuff class")
        lo, hi = (np.asarray(b, dtype=float) for b in self.aabb)
        if np.any(hi <= lo):
            raise SpecError("scene box is degenerate")
        if self.views < 1:
            raise SpecError("need at least one camera")
        if len(self.classes) > self.semantic_dim:
            raise SpecError("more classes than embedding dimensions")
        for i, p in enumerate(self.primitives):
            plo, phi = p.bounds()
            if np.any(plo < lo - 1e-9) or np.any(phi > hi + 1e-9):
                raise SpecError(f"primitive {i} leaves the scene box")
            if not 0 <= p.class_id < len(self.classes):
                raise SpecError(f"primitive {i} has unknown class {p.class_id}")
            thing = self.classes[p.class_id].thing
            if thing and p.gt_instance <= 0:
                raise SpecError(f"primitive {i}: thing classes need a positive instance id")
            if not thing and (p.instance or p.parent):
                raise SpecError(f"primitive {i}: stuff classes carry no instance id")
        owner: dict[int, int] = {}
        for p in self.primitives:
            if p.gt_instance > 0 and owner.setdefault(p.gt_instance, p.class_id) != p.class_id:
                raise SpecError(f"instance {p.gt_instance} is used by two classes")


# ---------------------------------------------------------------------------
# presets and the text spec format
# ---------------------------------------------------------------------------


def desk_scene() -> SyntheticSceneSpec:
    """Six primitives, four classes plus background stuff."""
    classes = [
        ClassInfo("background", False),
        ClassInfo("table", True),
        ClassInfo("ball", True),
        ClassInfo("cube", True),
        ClassInfo("rug", False),
    ]
    prims = [
        Primitive("box", (0.0, 0.0, 0.35), (0.7, 0.45, 0.35), 1, 1),
        Primitive("sphere", (0.3, 0.1, 0.95), (0.25,), 2, 2),
        Primitive("sphere", (-1.1, 0.9, 0.3), (0.3,), 2, 3),
        Primitive("box", (-0.35, -0.1, 0.85), (0.15, 0.15, 0.15), 3, 4),
        Primitive("box", (1.1, -1.0, 0.25), (0.25, 0.25, 0.25), 3, 5),
        Primitive("box", (0.9, 1.0, 0.05), (0.6, 0.5, 0.05), 4, 0),
    ]
    return SyntheticSceneSpec(
        classes,
        prims,
        corruption=CorruptionConfig(split_prob=0.5, drop_prob=0.2, erosion_radius=1, multi_level=True),
    )


def part_whole_scene() -> SyntheticSceneSpec:
    """One object made of two parts (seat + back) sharing a parent instance, plus a ball."""
    classes = [ClassInfo("background", False), ClassInfo("chair", True), ClassInfo("ball", True)]
    prims = [
        Primitive("box", (0.0, 0.0, 0.3), (0.45, 0.45, 0.3), 1, 11, parent=10),
        Primitive("box", (-0.35, 0.0, 0.95), (0.1, 0.45, 0.35), 1, 12, parent=10),
        Primitive("sphere", (1.0, -0.9, 0.3), (0.3,), 2, 20),
    ]
    return SyntheticSceneSpec(
        classes,
        prims,
        views=16,
        height=48,
        width=48,
        corruption=CorruptionConfig(split_prob=0.0, drop_prob=0.0, erosion_radius=0, multi_level=True),
    )


PRESETS = {"desk": desk_scene, "part_whole": part_whole_scene}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise SpecError(f"not a boolean: {text!r}")


def parse_scene_spec(text: str) -> SyntheticSceneSpec:
    """Parse the ``key = value`` scene description.

    ``class`` and ``primitive`` may repeat; the first ``class`` line is id 0.
    ``primitive = box|sphere <center xyz> <size...> class=<id> [instance=<id>] [parent=<id>]``.
    """
    base = SyntheticSceneSpec([], [])
    classes: list[ClassInfo] = []
    prims: list[Primitive] = []
    kw: dict = {}
    corr = CorruptionConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise SpecError(f"line {lineno}: expected key = value")
        key, value = key.strip(), value.strip()
        try:
            if key == "preset":
                preset = PRESETS[value]()
                classes, prims = preset.classes, preset.primitives
                kw.update({k: v for k, v in asdict(preset).items() if k not in ("classes", "primitives", "corruption")})
                corr = preset.corruption
            elif key == "class":
                name, kind = value.split()
                if kind not in ("thing", "stuff"):
                    raise SpecError("class kind must be thing or stuff")
                classes.append(ClassInfo(name, kind == "thing"))
            elif key == "primitive":
                tokens = value.split()
                opts = dict(t.split("=", 1) for t in tokens if "=" in t)
                nums = [float(t) for t in tokens[1:] if "=" not in t]
                kind = tokens[0]
                prims.append(
                    Primitive(
                        kind,
                        tuple(nums[:3]),
                        tuple(nums[3:]),
                        int(opts["class"]),
                        int(opts.get("instance", 0)),
                        int(opts["parent"]) if "parent" in opts else None,
                    )
                )
            elif key == "aabb":
                v = _floats(value)
                if len(v) != 6:
                    raise SpecError("aabb needs 6 numbers")
                kw["aabb"] = (v[:3], v[3:])
            elif key in ("look_at",):
                kw[key] = _floats(value)
            elif key == "orbit_heights":
                kw[key] = _floats(value)
            elif key in ("height", "width", "views", "semantic_dim"):
                kw[key] = int(value)
            elif key in ("fov_deg", "orbit_radius", "embed_noise"):
                kw[key] = float(value)
            elif key == "enclosure":
                kw[key] = _bool(value)
            elif key in ("split_prob", "drop_prob"):
                setattr(corr, key, float(value))
            elif key == "erosion_radius":
                corr.erosion_radius = int(value)
            elif key == "multi_level":
                corr.multi_level = _bool(value)
            else:
                raise SpecError(f"unknown key {key!r}")
        except (ValueError, KeyError) as exc:
            raise SpecError(f"line {lineno}: {exc}") from exc
    for k, v in kw.items():
        setattr(base, k, v)
    base.classes, base.primitives, base.corruption = classes, prims, corr
    base.validate()
    return base


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------


def look_at_pose(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix with x right, y down, z forward."""
    f = np.asarray(target, float) - np.asarray(eye, float)
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = r, d, f, eye
    return pose


def orbit_poses(spec: SyntheticSceneSpec) -> list[np.ndarray]:
    target = np.asarray(spec.look_at, float)
    poses = []
    for i in range(spec.views):
        a = 2 * np.pi * i / spec.views
        h = spec.orbit_heights[i % len(spec.orbit_heights)]
        eye = np.array([spec.orbit_radius * np.cos(a), spec.orbit_radius * np.sin(a), h])
        poses.append(look_at_pose(eye, target))
    return poses


def intrinsics_for(spec: SyntheticSceneSpec) -> Intrinsics:
    f = 0.5 * spec.width / np.tan(np.radians(spec.fov_deg) / 2)
    return Intrinsics(f, f, spec.width / 2, spec.height / 2)


# ---------------------------------------------------------------------------
# analytic ray casting
# ---------------------------------------------------------------------------


def _hit_sphere(o, d, center, radius):
    oc = o - np.asarray(center, float)
    b = np.einsum("ij,ij->i", oc, d)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    t = np.full(len(o), np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(ok & (t0 > 1e-9), t0, np.where(ok & (t1 > 1e-9), t1, np.inf))
    return t


def _hit_box(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        a = (lo - o) * inv
        b = (hi - o) * inv
    tmin = np.nanmax(np.minimum(a, b), axis=1)
    tmax = np.nanmin(np.maximum(a, b), axis=1)
    t = np.where(tmin > 1e-9, tmin, tmax)
    return np.where((tmax >= tmin) & (t > 1e-9), t, np.inf)


def _box_normal(p, lo, hi):
    c = (lo + hi) / 2
    half = (hi - lo) / 2
    q = (p - c) / half
    axis = np.argmax(np.abs(q), axis=1)
    n = np.zeros_like(p)
    n[np.arange(len(p)), axis] = np.sign(q[np.arange(len(p)), axis])
    return n


@dataclass
class FrameRender:
    rgb: np.ndarray  # float (H, W, 3)
    depth: np.ndarray  # float (H, W), 0 = invalid
    gt_class: np.ndarray
    gt_instance: np.ndarray
    part: np.ndarray  # primitive-level instance (parts), 0 = none


def cast_frame(spec: SyntheticSceneSpec, pose: np.ndarray, colors: dict[int, np.ndarray]) -> FrameRender:
    """Nearest-hit analytic render of one view."""
    h, w = spec.height, spec.width
    intr = intrinsics_for(spec)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    u, v = cols.ravel() + 0.5, rows.ravel() + 0.5
    dc = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=1)
    d = dc @ pose[:3, :3].T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(pose[:3, 3], d.shape)
    n = len(d)
    best_t = np.full(n, np.inf)
    best = np.full(n, -1)  # primitive index, -2 = enclosure
    for i, p in enumerate(spec.primitives):
        if p.kind == "sphere":
            t = _hit_sphere(o, d, p.center, p.size[0])
        else:
            lo, hi = p.bounds()
            t = _hit_box(o, d, lo, hi)
        closer = t < best_t
        best_t[closer] = t[closer]
        best[closer] = i
    lo, hi = (np.asarray(b, float) for b in spec.aabb)
    if spec.enclosure:
        _, t_exit = ray_box(o, d, lo, hi)
        closer = (t_exit > 0) & (t_exit < best_t)
        best_t[closer] = t_exit[closer]
        best[closer] = -2

    hit = np.isfinite(best_t)
    pts = o + d * np.where(hit, best_t, 0.0)[:, None]
    normal = np.zeros_like(pts)
    rgb = np.zeros((n, 3))
    gt_class = np.zeros(n, dtype=np.int64)
    gt_inst = np.zeros(n, dtype=np.int64)
    part = np.zeros(n, dtype=np.int64)
    for i, p in enumerate(spec.primitives):
        m = best == i
        if not m.any():
            continue
        if p.kind == "sphere":
            nn = pts[m] - np.asarray(p.center)
            normal[m] = nn / np.linalg.norm(nn, axis=1, keepdims=True)
        else:
            plo, phi = p.bounds()
            normal[m] = _box_normal(pts[m], plo, phi)
        gt_class[m] = p.class_id
        gt_inst[m] = p.gt_instance
        part[m] = p.instance
        rgb[m] = colors[i]
    m = best == -2
    if m.any():
        normal[m] = -_box_normal(pts[m], lo, hi)
        # checker on the room so the photometric term sees texture
        cells = np.floor(pts[m] * 2.0 + 1e-6).astype(int)
        cells[normal[m] != 0] = 0
        checker = (cells.sum(axis=1) % 2)[:, None]
        rgb[m] = colors[-2] * (0.8 + 0.2 * checker)
    shade = 0.35 + 0.65 * np.clip(normal @ LIGHT, 0.0, 1.0)
    rgb = np.clip(rgb * shade[:, None], 0.0, 1.0)
    rgb[~hit] = 0.0
    depth = np.where(hit, best_t, 0.0)
    return FrameRender(
        rgb.reshape(h, w, 3),
        depth.reshape(h, w),
        gt_class.reshape(h, w),
        gt_inst.reshape(h, w),
        part.reshape(h, w),
    )


# ---------------------------------------------------------------------------
# mask proposals
# ---------------------------------------------------------------------------


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


def _line_cut(mask: np.ndarray, angle: float) -> tuple[np.ndarray, np.ndarray]:
    rr, cc = np.nonzero(mask)
    proj = rr * np.sin(angle) + cc * np.cos(angle)
    split = np.median(proj)
    a = np.zeros_like(mask)
    a[rr[proj < split], cc[proj < split]] = True
    return a, mask & ~a


def corrupt_masks(
    instance_map: np.ndarray,
    config: CorruptionConfig,
    seed,
    class_map: np.ndarray | None = None,
    part_map: np.ndarray | None = None,
    stuff_classes: set[int] | None = None,
    frame: int = 0,
) -> list[MaskProposal]:
    """SAM-like proposals from ground-truth segments.

    Segments are thing instances (``instance_map > 0``) and, when ``class_map``
    is given, one region per stuff class. For each segment in ascending key
    order three uniforms are drawn (drop, split, cut angle); a dropped segment
    emits nothing, a split one emits two halves of a straight-line cut, or its
    true parts when ``part_map`` shows more than one part. With ``multi_level``
    the whole mask is emitted alongside its pieces. Every emitted mask is eroded
    by ``erosion_radius``; emptied masks are skipped. Ids are frame-local.
    """
    rng = np.random.default_rng(seed)
    segments: list[np.ndarray] = []
    parts_of: list[list[np.ndarray]] = []
    for inst in np.unique(instance_map):
        if inst <= 0:
            continue
        m = instance_map == inst
        segments.append(m)
        pieces = []
        if part_map is not None:
            for pid in np.unique(part_map[m]):
                if pid > 0 and pid != inst:
                    pieces.append(m & (part_map == pid))
        parts_of.append(pieces if len(pieces) > 1 else [])
    if class_map is not None:
        stuff = stuff_classes if stuff_classes is not None else set()
        for c in np.unique(class_map):
            if int(c) in stuff:
                m = (class_map == c) & (instance_map <= 0)
                if m.any():
                    segments.append(m)
                    parts_of.append([])

    emitted: list[np.ndarray] = []
    for m, pieces in zip(segments, parts_of):
        u_drop, u_split, u_angle = rng.random(3)
        if u_drop < config.drop_prob:
            continue
        if pieces:
            out = list(pieces)
        elif u_split < config.split_prob and m.sum() >= 2:
            out = [p for p in _line_cut(m, np.pi * u_angle) if p.any()]
        else:
            out = []
        if len(out) < 2 or config.multi_level:
            out.append(m)
        emitted.extend(out)

    proposals = []
    for m in emitted:
        if config.erosion_radius > 0:
            m = ndimage.binary_erosion(m, structure=_disk(config.erosion_radius))
        if m.any():
            proposals.append(MaskProposal(frame, len(proposals) + 1, m))
    return proposals


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------


def class_embeddings(n_classes: int, dim: int, seed: int) -> np.ndarray:
    """Mutually distinct unit vectors per class, deterministic in ``seed``."""
    rng = np.random.default_rng([seed, 1])
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q[:n_classes].copy()


def _palette(spec: SyntheticSceneSpec, seed: int) -> dict[int, np.ndarray]:
    rng = np.random.default_rng([seed, 2])
    colors = {i: rng.uniform(0.15, 0.95, size=3) for i in range(len(spec.primitives))}
    colors[-2] = np.array([0.7, 0.68, 0.62])
    return colors


def generate_scene(spec: SyntheticSceneSpec, out: str | Path, seed: int = 0, threads: int = 1) -> Path:
    """Write a complete scene directory; byte-identical for equal ``(spec, seed)``."""
    spec.validate()
    out = Path(out)
    if out.exists():
        shutil.rmtree(out)
    for sub in ("poses", "rgb", "depth", "embed", "masks", "gt_class", "gt_instance"):
        (out / sub).mkdir(parents=True)
    poses = orbit_poses(spec)
    intr = intrinsics_for(spec)
    emb = class_embeddings(len(spec.classes), spec.semantic_dim, seed)
    colors = _palette(spec, seed)
    stuff = {i for i, c in enumerate(spec.classes) if not c.thing}

    def frame(i: int) -> int:
        fr = cast_frame(spec, poses[i], colors)
        rng = np.random.default_rng([seed, 3, i])
        name = f"{i:05d}"
        np.savetxt(out / "poses" / f"{name}.txt", poses[i], fmt="%.17g")
        Image.fromarray(np.round(fr.rgb * 255).astype(np.uint8)).save(out / "rgb" / f"{name}.png")
        write_feature_map(out / "depth" / f"{name}.pvfm", fr.depth.astype(np.float32))
        e = emb[fr.gt_class] + spec.embed_noise * rng.standard_normal(fr.gt_class.shape + (spec.semantic_dim,))
        e /= np.linalg.norm(e, axis=-1, keepdims=True)
        write_feature_map(out / "embed" / f"{name}.pvfm", e.astype(np.float32))
        write_feature_map(out / "gt_class" / f"{name}.pvfm", fr.gt_class.astype(np.uint16))
        write_feature_map(out / "gt_instance" / f"{name}.pvfm", fr.gt_instance.astype(np.uint16))
        props = corrupt_masks(
            fr.gt_instance,
            spec.corruption,
            [seed, 4, i],
            class_map=fr.gt_class,
            part_map=fr.part,
            stuff_classes=stuff,
            frame=i,
        )
        write_masks(out / "masks" / f"{name}.bin", props)
        return len(props)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            counts = list(pool.map(frame, range(spec.views)))
    else:
        counts = [frame(i) for i in range(spec.views)]
    log.info("generated %d frames, %d proposals", spec.views, sum(counts))

    manifest = {
        "format": "pvlff-scene",
        "version": 1,
        "height": spec.height,
        "width": spec.width,
        "frames": spec.views,
        "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy},
        "poses": [f"poses/{i:05d}.txt" for i in range(spec.views)],
        "semantic_dim": spec.semantic_dim,
        "classes": [
            {"id": i, "name": c.name, "thing": c.thing, "embedding": emb[i].tolist()}
            for i, c in enumerate(spec.classes)
        ],
        "aabb": {"lo": list(spec.aabb[0]), "hi": list(spec.aabb[1])},
        "generator": {
            "seed": seed,
            "embed_noise": spec.embed_noise,
            **asdict(spec.corruption),
            "primitives": [asdict(p) for p in spec.primitives],
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out
