"""Loading and validating a scene directory."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..rendering import Intrinsics
from .formats import FormatError, MaskProposal, read_feature_map, read_masks
from .synthetic import ClassInfo


class SceneError(ValueError):
    pass


@dataclass
class Frame:
    index: int
    pose: np.ndarray
    rgb: np.ndarray  # float (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W), 0 = invalid
    embed: np.ndarray  # (H, W, C)
    gt_class: np.ndarray
    gt_instance: np.ndarray
    proposals: list[MaskProposal] = field(default_factory=list)


@dataclass
class Scene:
    root: Path
    height: int
    width: int
    intrinsics: Intrinsics
    lo: np.ndarray
    hi: np.ndarray
    classes: list[ClassInfo]
    class_embeddings: np.ndarray
    frames: list[Frame]
    manifest: dict

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lo, self.hi

    @property
    def semantic_dim(self) -> int:
        return self.class_embeddings.shape[1]

    def to_unit(self, x: np.ndarray) -> np.ndarray:
        """Map scene coordinates to the unit cube of the scene box."""
        return (np.asarray(x, float) - self.lo) / (self.hi - self.lo)

    @property
    def thing_classes(self) -> set[int]:
        return {i for i, c in enumerate(self.classes) if c.thing}


def _need(d: dict, key: str, source: Path):
    if key not in d:
        raise SceneError(f"{source}: missing field {key!r}")
    return d[key]


def load_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise SceneError(f"{path}: manifest not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: invalid JSON ({exc})") from exc


def load_scene(root: str | Path, load_gt: bool = True) -> Scene:
    root = Path(root)
    man = load_manifest(root)
    mpath = root / "manifest.json"
    h, w = int(_need(man, "height", mpath)), int(_need(man, "width", mpath))
    intr_d = _need(man, "intrinsics", mpath)
    intr = Intrinsics(float(intr_d["fx"]), float(intr_d["fy"]), float(intr_d["cx"]), float(intr_d["cy"]))
    aabb = _need(man, "aabb", mpath)
    lo, hi = np.asarray(aabb["lo"], float), np.asarray(aabb["hi"], float)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
        raise SceneError(f"{mpath}: field 'aabb' is degenerate")
    classes_d = _need(man, "classes", mpath)
    classes = [ClassInfo(c["name"], bool(c["thing"])) for c in classes_d]
    names = [c.name for c in classes]
    if len(set(names)) != len(names):
        raise SceneError(f"{mpath}: class names are not unique")
    emb = np.asarray([c["embedding"] for c in classes_d], float)
    if emb.ndim != 2 or emb.shape[1] != int(_need(man, "semantic_dim", mpath)):
        raise SceneError(f"{mpath}: field 'classes' embeddings do not match semantic_dim")
    n = int(_need(man, "frames", mpath))
    pose_files = _need(man, "poses", mpath)
    if len(pose_files) != n:
        raise SceneError(f"{mpath}: field 'poses' lists {len(pose_files)} files for {n} frames")

    frames = []
    for i in range(n):
        name = f"{i:05d}"
        ppath = root / pose_files[i]
        _exists(ppath)
        pose = np.loadtxt(ppath).reshape(4, 4)
        r = pose[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
            raise SceneError(f"{ppath}: rotation is not orthonormal")
        rgb_path = root / "rgb" / f"{name}.png"
        _exists(rgb_path)
        rgb = np.asarray(Image.open(rgb_path).convert("RGB"), dtype=np.float64) / 255.0
        depth = _raster(root / "depth" / f"{name}.pvfm", (h, w))
        embed = _raster(root / "embed" / f"{name}.pvfm", (h, w), squeeze=False)
        if embed.shape[2] != emb.shape[1]:
            raise SceneError(f"{root / 'embed' / name}.pvfm: {embed.shape[2]} channels, expected {emb.shape[1]}")
        if load_gt:
            gt_c = _raster(root / "gt_class" / f"{name}.pvfm", (h, w)).astype(np.int64)
            gt_i = _raster(root / "gt_instance" / f"{name}.pvfm", (h, w)).astype(np.int64)
        else:
            gt_c = gt_i = np.zeros((h, w), np.int64)
        mpth = root / "masks" / f"{name}.bin"
        _exists(mpth)
        try:
            props = read_masks(mpth, (h, w), frame=i)
        except FormatError as exc:
            raise SceneError(str(exc)) from exc
        if rgb.shape[:2] != (h, w):
            raise SceneError(f"{rgb_path}: size {rgb.shape[:2]} != manifest {(h, w)}")
        frames.append(Frame(i, pose, rgb, depth.astype(np.float64), embed.astype(np.float64), gt_c, gt_i, props))
    return Scene(root, h, w, intr, lo, hi, classes, emb, frames, man)


def _exists(path: Path) -> None:
    if not path.is_file():
        raise SceneError(f"{path}: file missing")


def _raster(path: Path, hw: tuple[int, int], squeeze: bool = True) -> np.ndarray:
    _exists(path)
    try:
        arr = read_feature_map(path, squeeze=squeeze)
    except FormatError as exc:
        raise SceneError(str(exc)) from exc
    if arr.shape[:2] != hw:
        raise SceneError(f"{path}: size {arr.shape[:2]} != manifest {hw}")
    return arr
