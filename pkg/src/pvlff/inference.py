"""Open-vocabulary semantic assignment, instance segmentation and panoptic fusion."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clustering import NOISE, assign_noise, hdbscan, nearest_centroid, normalize_rows, cluster_centroids
from .fields import FieldModel
from .rendering import render_image


class PromptError(ValueError):
    pass


@dataclass
class PromptSet:
    names: list[str]
    thing: np.ndarray  # bool (K,)
    embeddings: np.ndarray  # (K, C)

    def __post_init__(self) -> None:
        self.thing = np.asarray(self.thing, bool)
        self.embeddings = np.asarray(self.embeddings, float)
        if len(set(self.names)) != len(self.names):
            raise PromptError("prompt names must be unique")
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.names) or len(self.thing) != len(self.names):
            raise PromptError("prompt names, flags and embeddings disagree in length")
        if np.any(np.linalg.norm(self.embeddings, axis=1) == 0):
            raise PromptError("prompt embeddings must be nonzero")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def stuff_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.thing)

    def subset(self, names: list[str]) -> "PromptSet":
        idx = [self.names.index(n) for n in names]
        return PromptSet([self.names[i] for i in idx], self.thing[idx], self.embeddings[idx])

    def to_text(self) -> str:
        lines = []
        for n, t, e in zip(self.names, self.thing, self.embeddings):
            lines.append(" ".join([n, "thing" if t else "stuff"] + [repr(float(v)) for v in e]))
        return "\n".join(lines) + "\n"


def parse_prompts(text: str, source: str = "<prompts>") -> PromptSet:
    """One prompt per line: ``name thing|stuff v1 ... vC``; ``#`` starts a comment."""
    names, flags, embs = [], [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) < 3:
            raise PromptError(f"{source}:{lineno}: expected 'name thing|stuff v1 ... vC'")
        if tok[1] not in ("thing", "stuff"):
            raise PromptError(f"{source}:{lineno}: kind must be 'thing' or 'stuff', got {tok[1]!r}")
        try:
            vec = [float(v) for v in tok[2:]]
        except ValueError as exc:
            raise PromptError(f"{source}:{lineno}: bad embedding value ({exc})") from exc
        if embs and len(vec) != len(embs[0]):
            raise PromptError(f"{source}:{lineno}: embedding width {len(vec)} != {len(embs[0])}")
        names.append(tok[0])
        flags.append(tok[1] == "thing")
        embs.append(vec)
    if not names:
        raise PromptError(f"{source}: no prompts")
    try:
        return PromptSet(names, np.array(flags), np.array(embs))
    except PromptError as exc:
        raise PromptError(f"{source}: {exc}") from exc


def read_prompts(path: str | Path) -> PromptSet:
    return parse_prompts(Path(path).read_text(), str(path))


def scene_prompts(scene) -> PromptSet:
    """Prompts from a scene's own class table."""
    return PromptSet([c.name for c in scene.classes], np.array([c.thing for c in scene.classes]), scene.class_embeddings)


# ---------------------------------------------------------------------------
# semantics
# ---------------------------------------------------------------------------


def assign_semantics(features: np.ndarray, prompts: PromptSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cosine-argmax class per feature; ties go to the lowest class id.

    Returns ``(classes, similarity, valid)`` shaped like ``features[..., 0]``.
    Zero-norm features are invalid (class 0, similarity 0).
    """
    f = np.asarray(features, float)
    if f.shape[-1] != prompts.embeddings.shape[1]:
        raise PromptError(f"feature width {f.shape[-1]} != prompt width {prompts.embeddings.shape[1]}")
    flat = f.reshape(-1, f.shape[-1])
    norm = np.linalg.norm(flat, axis=1)
    valid = norm > 0
    unit = np.zeros_like(flat)
    unit[valid] = flat[valid] / norm[valid, None]
    e = prompts.embeddings / np.linalg.norm(prompts.embeddings, axis=1, keepdims=True)
    sims = unit @ e.T
    cls = np.argmax(sims, axis=1)
    best = sims[np.arange(len(cls)), cls]
    cls[~valid] = 0
    best[~valid] = 0.0
    shape = f.shape[:-1]
    return cls.reshape(shape), best.reshape(shape), valid.reshape(shape)


def denoise_semantics(classes: np.ndarray, instances: np.ndarray, thing: np.ndarray | None = None) -> np.ndarray:
    """Within each instance segment (id > 0) every pixel takes the modal class, lowest id on ties.

    With a per-class ``thing`` flag only thing pixels vote and only thing
    pixels are relabeled, and segments whose overall modal class is stuff are
    left as they are. Stuff seen along object silhouettes keeps its class.
    """
    c = np.asarray(classes, np.int64).ravel()
    i = np.asarray(instances, np.int64).ravel()
    out = c.copy()
    seg = i > 0
    if not seg.any():
        return out.reshape(np.shape(classes))
    k = int(c.max()) + 1
    ids, inv = np.unique(i[seg], return_inverse=True)
    inv = inv.ravel()
    counts = np.zeros((len(ids), k), np.int64)
    np.add.at(counts, (inv, c[seg]), 1)
    if thing is None:
        out[seg] = np.argmax(counts, axis=1)[inv]
        return out.reshape(np.shape(classes))
    thing = np.asarray(thing, bool)[:k]
    keep = thing[np.argmax(counts, axis=1)]  # segments that fuse into a thing
    votes = np.where(thing, counts, 0)
    where = np.flatnonzero(seg)
    move = keep[inv] & thing[c[where]]
    out[where[move]] = np.argmax(votes, axis=1)[inv[move]]
    return out.reshape(np.shape(classes))


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------


@dataclass
class ClusterConfig:
    min_samples: int = 10
    min_cluster_size: int = 50
    max_points: int = 3000  # larger inputs are clustered on a seeded subsample
    seed: int = 0


def effective_cluster_size(config: ClusterConfig, n_clustered: int, n_valid: int, views: int = 1) -> int:
    """``min_cluster_size`` counts pixels of one view; rescale it to the clustered set.

    A segment of that size seen in each of ``views`` frames keeps about
    ``m * views * n_clustered / n_valid`` points after subsampling.
    """
    if n_valid <= 0:
        return config.min_cluster_size
    scale = min(1.0, views * n_clustered / n_valid)
    return max(2, int(round(config.min_cluster_size * scale)))


def segment_instances(features: np.ndarray, valid: np.ndarray | None, config: ClusterConfig) -> np.ndarray:
    """Instance ids ``1..K`` over valid entries of ``features`` (``(..., C)``), 0 elsewhere.

    Features are L2-normalized, clustered with HDBSCAN (on a subsample when
    there are many), and every valid entry not in the clustered set, or left
    as noise, joins its nearest cluster centroid.
    """
    f = np.asarray(features, float)
    views = f.shape[0] if f.ndim == 4 else 1
    flat = f.reshape(-1, f.shape[-1])
    v = np.ones(len(flat), bool) if valid is None else np.asarray(valid, bool).ravel()
    out = np.zeros(len(flat), np.int64)
    idx = np.flatnonzero(v)
    if idx.size == 0:
        return out.reshape(f.shape[:-1])
    pts = normalize_rows(flat[idx])
    if len(idx) > config.max_points:
        rng = np.random.default_rng([config.seed, 29])
        pick = np.sort(rng.choice(len(idx), size=config.max_points, replace=False))
    else:
        pick = np.arange(len(idx))
    res = hdbscan(pts[pick], config.min_samples, effective_cluster_size(config, len(pick), len(idx), views))
    lab = assign_noise(res.labeling, pts[pick])
    labels = lab.labels
    k = int(labels.max()) + 1 if labels.size else 1
    if len(pick) < len(idx):
        cents = cluster_centroids(pts[pick], labels, k)
        full = nearest_centroid(pts, cents)
        full[pick] = labels
        labels = full
    # dense 1..K in order of label value
    _, dense = np.unique(labels, return_inverse=True)
    out[idx] = dense.ravel() + 1
    return out.reshape(f.shape[:-1])


# ---------------------------------------------------------------------------
# panoptic
# ---------------------------------------------------------------------------


@dataclass
class PanopticMap:
    semantic: np.ndarray
    instance: np.ndarray
    valid: np.ndarray

    def check(self, thing: np.ndarray) -> None:
        bad = (self.instance > 0) & ~np.asarray(thing, bool)[self.semantic]
        if bad.any():
            raise AssertionError(f"{int(bad.sum())} pixels carry an instance id on a stuff class")


def fuse_panoptic(
    classes: np.ndarray,
    instances: np.ndarray,
    prompts: PromptSet,
    valid: np.ndarray | None = None,
) -> PanopticMap:
    """Combine a class map and an instance map into a panoptic map.

    Segments whose modal class is stuff lose their id, stuff pixels get id 0,
    and thing pixels keep their segment with ids renumbered ``1..n`` per class.
    Works on any shape, so stacking frames gives scene-consistent ids.
    """
    c = np.asarray(classes, np.int64)
    i = np.asarray(instances, np.int64).copy()
    v = np.ones(c.shape, bool) if valid is None else np.asarray(valid, bool)
    thing = prompts.thing
    modal = denoise_semantics(c, i)
    i[~thing[modal]] = 0
    i[~thing[c]] = 0
    i[~v] = 0
    out = np.zeros_like(i)
    for cls in np.unique(c[i > 0]):
        m = (c == cls) & (i > 0)
        _, dense = np.unique(i[m], return_inverse=True)
        out[m] = dense.ravel() + 1
    return PanopticMap(np.where(v, c, 0), out, v)


# ---------------------------------------------------------------------------
# scene-level prediction
# ---------------------------------------------------------------------------


@dataclass
class ScenePrediction:
    frames: list[int]
    semantic_raw: np.ndarray  # (F, H, W)
    semantic: np.ndarray  # denoised
    instance: np.ndarray  # scene-consistent ids
    panoptic: PanopticMap
    valid: np.ndarray
    extras: dict = field(default_factory=dict)


def render_features(
    model: FieldModel, scene, frames: list[int], n_samples: int = 64, threads: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rendered semantic features, instance features and opacity for the given frames."""
    sem, ins, opa = [], [], []
    for fi in frames:
        out = render_image(
            model,
            scene.frames[fi].pose,
            scene.intrinsics,
            scene.height,
            scene.width,
            scene.bbox,
            n_samples=n_samples,
            threads=threads,
            channels=("semantic", "instance"),
        )
        sem.append(out["semantic"])
        ins.append(out["instance"])
        opa.append(out["opacity"])
    return np.stack(sem), np.stack(ins), np.stack(opa)


def predict_scene(
    model: FieldModel,
    scene,
    prompts: PromptSet,
    cluster: ClusterConfig,
    frames: list[int] | None = None,
    n_samples: int = 64,
    threads: int = 1,
    min_opacity: float = 0.5,
) -> ScenePrediction:
    """Semantic, instance and panoptic maps for a set of views.

    Instance features of all views are clustered jointly, so ids agree across
    frames.
    """
    frames = list(range(len(scene.frames))) if frames is None else list(frames)
    sem_f, ins_f, opa = render_features(model, scene, frames, n_samples, threads)
    cls, _, sem_valid = assign_semantics(sem_f, prompts)
    valid = sem_valid & (opa > min_opacity)
    inst = segment_instances(ins_f, valid, cluster)
    den = denoise_semantics(cls, inst, prompts.thing)
    pan = fuse_panoptic(den, inst, prompts, valid)
    return ScenePrediction(frames, cls, den, inst, pan, valid, {"instance_features": ins_f})
