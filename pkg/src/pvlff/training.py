"""Training objective, pair sampling, slow centers and the optimization loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .clustering import normalize_rows
from .data.formats import MaskProposal
from .data.scene import Scene
from .fields import FieldModel, ModelConfig, instance_branch_names
from .numerics import ConfigError, Graph, NumericsError, ParamStore, Tensor
from .rendering import RaySamples, Rays, generate_rays, render_rays, sample_rays

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    rgb: float = 1.0
    depth: float = 0.1
    semantic: float = 1.0
    contrastive: float = 0.1
    slow_center: float = 0.01
    tau: float = 0.1

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ConfigError("temperature must be positive")
        for k, v in asdict(self).items():
            if v < 0:
                raise ConfigError(f"loss weight {k} must be non-negative")


@dataclass
class TrainConfig:
    steps: int = 5000
    pixel_batch: int = 256
    anchors_per_step: int = 32
    negs_per_anchor: int = 16
    samples: int = 48
    stratified: bool = True
    lr_hash: float = 1e-2
    lr_mlp: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    center_decay: float = 0.9
    param_decay: float = 0.99
    pixels_per_mask: int = 32
    steps_per_epoch: int = 0  # 0: one pass over all pixels of all frames
    log_every: int = 100
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def semantic_loss(rendered: Tensor, target: np.ndarray) -> Tensor:
    """Batch mean of ``|rendered - target|_1 / C``."""
    target = np.asarray(target, dtype=float)
    if rendered.shape != target.shape:
        raise ConfigError(f"semantic width mismatch {rendered.shape} vs {target.shape}")
    return nx.mean(nx.absolute(nx.sub(rendered, target)))


def photometric_loss(rendered: Tensor, target: np.ndarray) -> Tensor:
    return nx.mean(nx.square(nx.sub(rendered, np.asarray(target, dtype=float))))


def depth_loss(rendered: Tensor, target: np.ndarray, valid: np.ndarray) -> tuple[Tensor, int]:
    """Mean L1 over valid pixels; returns ``(loss, count)`` and a zero loss when none are valid."""
    valid = np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        return nx.constant(0.0), 0
    diff = nx.absolute(nx.sub(rendered, np.where(valid, target, 0.0)))
    return nx.mul(nx.sum_(nx.mul(diff, valid.astype(float))), 1.0 / count), count


def contrastive_loss(anchors: Tensor, positives: Tensor, negatives: Tensor, tau: float) -> Tensor:
    """Single-positive InfoNCE over L2-normalized features.

    ``anchors`` and ``positives`` are ``(A, C)``, ``negatives`` is ``(A, K, C)``;
    positives and negatives are detached so only anchors receive gradient. The
    denominator runs over each anchor's own negatives.
    """
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    a = nx.l2_normalize(anchors)
    p = nx.detach(nx.l2_normalize(positives))
    n = nx.detach(nx.l2_normalize(negatives))
    A, K, C = negatives.shape
    pos = nx.mul(nx.dot_rows(a, p), 1.0 / tau)
    neg = nx.mul(nx.sum_(nx.mul(nx.reshape(a, (A, 1, C)), n), axis=2), 1.0 / tau)
    return nx.mean(nx.sub(nx.logsumexp(neg, axis=1), pos))


def slow_center_loss(anchors: Tensor, centers: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
    """Mean over anchors with a known center of ``|anchor - center|_1``; centers are constants."""
    centers = np.asarray(centers, dtype=float)
    valid = np.ones(len(centers), bool) if valid is None else np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        return nx.constant(0.0)
    l1 = nx.sum_(nx.absolute(nx.sub(anchors, np.where(valid[:, None], centers, 0.0))), axis=1)
    return nx.mul(nx.sum_(nx.mul(l1, valid.astype(float))), 1.0 / count)


# ---------------------------------------------------------------------------
# pair sampling
# ---------------------------------------------------------------------------


@dataclass
class PairBatch:
    frame: int
    anchors: np.ndarray  # (A,) flat pixel index
    anchor_source: np.ndarray  # (A,) index into the frame's proposal list
    positives: np.ndarray  # (A,)
    negatives: np.ndarray  # (A, K)
    negative_source: np.ndarray  # (A, K)


def sample_pairs(
    proposals: list[MaskProposal],
    anchors_per_step: int,
    negs_per_anchor: int,
    rng: np.random.Generator,
) -> PairBatch | None:
    """Proposal-balanced anchors, one positive each and ``negs_per_anchor`` negatives.

    Returns None when the frame has fewer than two proposals.
    """
    P = len(proposals)
    if P < 2:
        return None
    pix = [p.pixels() for p in proposals]
    lengths = np.array([len(x) for x in pix])
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    flat = np.concatenate(pix)
    A, K = anchors_per_step, negs_per_anchor

    src = rng.integers(0, P, size=A)
    n = lengths[src]
    a_idx = np.floor(rng.random(A) * n).astype(np.int64)
    # positive differs from the anchor pixel unless the proposal has a single pixel
    p_idx = np.floor(rng.random(A) * np.maximum(n - 1, 1)).astype(np.int64)
    p_idx = np.where(n > 1, p_idx + (p_idx >= a_idx), a_idx)
    neg_src = rng.integers(0, P - 1, size=(A, K))
    neg_src += neg_src >= src[:, None]
    n_idx = np.floor(rng.random((A, K)) * lengths[neg_src]).astype(np.int64)
    return PairBatch(
        frame=proposals[0].frame,
        anchors=flat[offsets[src] + a_idx],
        anchor_source=src,
        positives=flat[offsets[src] + p_idx],
        negatives=flat[offsets[neg_src] + n_idx],
        negative_source=neg_src,
    )


# ---------------------------------------------------------------------------
# slow centers
# ---------------------------------------------------------------------------


class SlowCenterRegistry:
    """Per-proposal EMA centers of normalized instance features rendered by an EMA model copy."""

    def __init__(self, model: FieldModel, center_decay: float = 0.9, param_decay: float = 0.99) -> None:
        self.center_decay = center_decay
        self.param_decay = param_decay
        self.names = instance_branch_names(model.store, model.config.architecture)
        self.ema = ParamStore()
        for n in self.names:
            self.ema.params[n] = model.store[n].copy()
        self.centers: dict[tuple[int, int], np.ndarray] = {}

    @property
    def initialized(self) -> bool:
        return bool(self.centers)

    def track(self, store: ParamStore) -> None:
        """EMA the live instance-branch parameters into the evaluation copy."""
        d = self.param_decay
        for n in self.names:
            e = self.ema.params[n]
            e *= d
            e += (1.0 - d) * store[n]

    def center(self, frame: int, proposal: int) -> np.ndarray | None:
        return self.centers.get((frame, proposal))

    def push(self, frame: int, proposal: int, average: np.ndarray) -> None:
        key = (frame, proposal)
        old = self.centers.get(key)
        if old is None:
            self.centers[key] = np.array(average, dtype=float)
        else:
            self.centers[key] = self.center_decay * old + (1.0 - self.center_decay) * np.asarray(average, float)

    def update(
        self,
        model: FieldModel,
        scene: Scene,
        pixels_per_mask: int,
        samples: int,
        rng: np.random.Generator,
    ) -> None:
        """Re-estimate every proposal's mean feature without recording gradients."""
        for fr in scene.frames:
            if not fr.proposals:
                continue
            picks = [rng.choice(p.pixels(), size=pixels_per_mask, replace=True) for p in fr.proposals]
            flat = np.concatenate(picks)
            feats = render_instance(model, scene, fr.index, flat, samples, ema=self.ema)
            feats = normalize_rows(feats)
            for k, p in enumerate(fr.proposals):
                self.push(fr.index, p.id, feats[k * pixels_per_mask : (k + 1) * pixels_per_mask].mean(axis=0))


def frame_rays(scene: Scene, frame: int, flat_pixels: np.ndarray) -> Rays:
    w = scene.width
    pix = np.stack([flat_pixels // w, flat_pixels % w], axis=1)
    return generate_rays(scene.frames[frame].pose, scene.intrinsics, pix, scene.bbox)


def render_instance(
    model: FieldModel,
    scene: Scene,
    frame: int,
    flat_pixels: np.ndarray,
    samples: int,
    ema: ParamStore | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    rays = frame_rays(scene, frame, flat_pixels)
    smp = sample_rays(rays, samples, stratified=rng is not None, rng=rng)
    out = render_rays(model, rays, smp, None, scene.bbox, color=False, semantic=False, instance_store=ema)
    return out.instance.value


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------


@dataclass
class StepBatch:
    """Everything one loss evaluation needs, fixed so the loss is a pure function of parameters."""

    rays: Rays
    samples: RaySamples
    rgb: np.ndarray
    depth: np.ndarray
    embed: np.ndarray
    anchor_rays: Rays | None = None
    anchor_samples: RaySamples | None = None
    positive_feats: np.ndarray | None = None  # (A, C) detached renders
    negative_feats: np.ndarray | None = None  # (A, K, C)
    centers: np.ndarray | None = None  # (A, C)
    center_valid: np.ndarray | None = None


def composite_loss(
    model: FieldModel,
    batch: StepBatch,
    weights: LossWeights,
    bbox,
    graph: Graph | None,
) -> tuple[Tensor, dict[str, Tensor]]:
    out = render_rays(model, batch.rays, batch.samples, graph, bbox, instance=False)
    terms: dict[str, Tensor] = {
        "rgb": photometric_loss(out.color, batch.rgb),
        "depth": depth_loss(out.depth, batch.depth, (batch.depth > 0) & out.depth_valid)[0],
        "semantic": semantic_loss(out.semantic, batch.embed),
    }
    zero = nx.constant(0.0)
    terms["contrastive"] = zero
    terms["slow_center"] = zero
    if batch.anchor_rays is not None:
        a_out = render_rays(model, batch.anchor_rays, batch.anchor_samples, graph, bbox, color=False, semantic=False)
        anchors = a_out.instance
        terms["contrastive"] = contrastive_loss(
            anchors, nx.constant(batch.positive_feats), nx.constant(batch.negative_feats), weights.tau
        )
        if batch.centers is not None and weights.slow_center > 0:
            terms["slow_center"] = slow_center_loss(nx.l2_normalize(anchors), batch.centers, batch.center_valid)
    total = nx.constant(0.0)
    for key, lam in (
        ("rgb", weights.rgb),
        ("depth", weights.depth),
        ("semantic", weights.semantic),
        ("contrastive", weights.contrastive),
        ("slow_center", weights.slow_center),
    ):
        if lam > 0:
            total = nx.add(total, nx.mul(terms[key], lam))
    return total, terms


def make_batch(
    model: FieldModel,
    scene: Scene,
    cfg: TrainConfig,
    rng: np.random.Generator,
    registry: SlowCenterRegistry | None,
    use_centers: bool,
) -> StepBatch:
    fi = int(rng.integers(len(scene.frames)))
    fr = scene.frames[fi]
    npx = scene.height * scene.width
    px = rng.choice(npx, size=min(cfg.pixel_batch, npx), replace=False)
    rays = frame_rays(scene, fi, px)
    smp = sample_rays(rays, cfg.samples, cfg.stratified, rng)
    batch = StepBatch(
        rays,
        smp,
        fr.rgb.reshape(-1, 3)[px],
        fr.depth.reshape(-1)[px],
        fr.embed.reshape(npx, -1)[px],
    )
    w = cfg.weights
    if w.contrastive <= 0 and w.slow_center <= 0:
        return batch
    pairs = sample_pairs(fr.proposals, cfg.anchors_per_step, cfg.negs_per_anchor, rng)
    if pairs is None:
        return batch
    A, K = pairs.negatives.shape
    batch.anchor_rays = frame_rays(scene, fi, pairs.anchors)
    batch.anchor_samples = sample_rays(batch.anchor_rays, cfg.samples, cfg.stratified, rng)
    refs = np.concatenate([pairs.positives, pairs.negatives.ravel()])
    feats = render_instance(model, scene, fi, refs, cfg.samples, rng=rng if cfg.stratified else None)
    batch.positive_feats = feats[:A]
    batch.negative_feats = feats[A:].reshape(A, K, -1)
    if use_centers and registry is not None and registry.initialized:
        C = feats.shape[1]
        centers = np.zeros((A, C))
        valid = np.zeros(A, bool)
        for i, s in enumerate(pairs.anchor_source):
            c = registry.center(fi, fr.proposals[s].id)
            if c is not None:
                centers[i], valid[i] = c, True
        batch.centers, batch.center_valid = centers, valid
    return batch


def train_step(
    model: FieldModel,
    scene: Scene,
    cfg: TrainConfig,
    rng: np.random.Generator,
    registry: SlowCenterRegistry | None = None,
    use_centers: bool = False,
) -> dict[str, float]:
    batch = make_batch(model, scene, cfg, rng, registry, use_centers)
    weights = cfg.weights if use_centers else _without_centers(cfg.weights)
    store = model.store
    store.zero_grad()
    graph = Graph()
    total, terms = composite_loss(model, batch, weights, scene.bbox, graph)
    report = {k: float(v.value) for k, v in terms.items()}
    report["total"] = float(total.value)
    bad = [k for k, v in report.items() if not np.isfinite(v)]
    if bad:
        raise NumericsError(f"non-finite loss terms: {', '.join(f'{k}={report[k]}' for k in bad)}")
    if total.tracked:
        nx.backward(graph, total, store)
    nx.adam_step(store, {"hash": cfg.lr_hash, "mlp": cfg.lr_mlp}, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    if registry is not None:
        registry.track(store)
    return report


def _without_centers(w: LossWeights) -> LossWeights:
    return LossWeights(w.rgb, w.depth, w.semantic, w.contrastive, 0.0, w.tau)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

LOSS_COLUMNS = ("rgb", "depth", "semantic", "contrastive", "slow_center", "total")


@dataclass
class TrainResult:
    model: FieldModel
    history: list[dict[str, float]]
    registry: SlowCenterRegistry


def checkpoint_header(model: FieldModel, scene: Scene) -> dict[str, str]:
    header = model.header()
    header["aabb"] = " ".join(repr(float(v)) for v in np.concatenate([scene.lo, scene.hi]))
    return header


def train(
    scene: Scene,
    model_config: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    progress=None,
) -> TrainResult:
    """Run ``cfg.steps`` steps with slow-center refreshes at epoch boundaries.

    Writes ``model.pvlf`` and ``loss.csv`` into ``out_dir`` when given.
    """
    if model_config.semantic_dim != scene.semantic_dim:
        raise ConfigError(f"model semantic_dim {model_config.semantic_dim} != scene {scene.semantic_dim}")
    model = FieldModel(model_config, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 17])
    registry = SlowCenterRegistry(model, cfg.center_decay, cfg.param_decay)
    epoch_len = cfg.steps_per_epoch or max(1, len(scene.frames) * scene.height * scene.width // cfg.pixel_batch)
    history: list[dict[str, float]] = []
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        rep = train_step(model, scene, cfg, rng, registry, use_centers=registry.initialized)
        rep["step"] = step
        history.append(rep)
        if step % epoch_len == 0 and step < cfg.steps:
            registry.update(model, scene, cfg.pixels_per_mask, cfg.samples, rng)
        if progress is not None and (step % cfg.log_every == 0 or step == cfg.steps):
            progress(step, rep, time.perf_counter() - t0)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        nx.save_checkpoint(out / "model.pvlf", model.store, checkpoint_header(model, scene))
        write_loss_log(out / "loss.csv", history)
    return TrainResult(model, history, registry)


def write_loss_log(path: Path, history: list[dict[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("step",) + LOSS_COLUMNS)
        for rep in history:
            w.writerow([rep["step"]] + [repr(rep[k]) for k in LOSS_COLUMNS])


def load_model(path: str | Path) -> tuple[FieldModel, dict[str, str]]:
    params, header = nx.load_checkpoint(path)
    config = ModelConfig.from_header(header)
    model = FieldModel(config)
    expected = set(model.store.params)
    if set(params) != expected:
        raise ConfigError(f"{path}: checkpoint tensors do not match architecture {config.architecture!r}")
    for name, value in params.items():
        if model.store[name].shape != value.shape:
            raise ConfigError(f"{path}: tensor {name!r} has shape {value.shape}, expected {model.store[name].shape}")
        model.store.params[name][...] = value
    return model, header
