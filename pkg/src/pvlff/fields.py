"""Panoptic feature field: density, color, semantic and instance heads over two hash grids."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx
from .encoding import HashGrid, HashGridConfig
from .numerics import ConfigError, Graph, ParamStore, Tensor

log = logging.getLogger(__name__)

ARCHITECTURES = ("decoupled", "shared_hhe", "stacked")

# real spherical harmonics up to degree 2
_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, 0.31539156525252005, 0.5462742152960396)


def sh_encode(d: np.ndarray) -> np.ndarray:
    """Degree-2 real SH basis (9 values) of unit directions ``(P, 3)``."""
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    return np.stack(
        [
            np.full_like(x, _SH_C0),
            _SH_C1 * y,
            _SH_C1 * z,
            _SH_C1 * x,
            _SH_C2[0] * x * y,
            _SH_C2[0] * y * z,
            _SH_C2[1] * (3.0 * z * z - 1.0),
            _SH_C2[0] * x * z,
            _SH_C2[2] * (x * x - y * y),
        ],
        axis=1,
    )


@dataclass(frozen=True)
class ModelConfig:
    grid: HashGridConfig = field(default_factory=HashGridConfig)
    geo_dim: int = 16
    hidden: int = 64
    semantic_dim: int = 16
    instance_dim: int = 8
    architecture: str = "decoupled"

    def __post_init__(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")

    def to_header(self) -> dict[str, str]:
        flat = {f"grid.{k}": str(v) for k, v in asdict(self.grid).items()}
        flat.update({k: str(v) for k, v in asdict(self).items() if k != "grid"})
        return flat

    @classmethod
    def from_header(cls, header: Mapping[str, str]) -> "ModelConfig":
        g = HashGridConfig(
            levels=int(header["grid.levels"]),
            base_resolution=int(header["grid.base_resolution"]),
            growth=float(header["grid.growth"]),
            features_per_level=int(header["grid.features_per_level"]),
            table_size=int(header["grid.table_size"]),
            dense_threshold=int(header["grid.dense_threshold"]),
        )
        return cls(
            grid=g,
            geo_dim=int(header["geo_dim"]),
            hidden=int(header["hidden"]),
            semantic_dim=int(header["semantic_dim"]),
            instance_dim=int(header["instance_dim"]),
            architecture=header["architecture"],
        )


# parameters the EMA copy of the instance branch tracks
def instance_branch_names(store: ParamStore, architecture: str) -> list[str]:
    names = [n for n in store.names() if n.startswith("instance.")]
    if architecture == "decoupled":
        names += [n for n in store.names() if n.startswith("hhe2.")]
    return names


class FieldModel:
    def __init__(self, config: ModelConfig, seed: int = 0, store: ParamStore | None = None) -> None:
        self.config = config
        self.hhe1 = HashGrid("hhe1", config.grid)
        self.hhe2 = HashGrid("hhe2", config.grid)
        if store is not None:
            self.store = store
            return
        rng = np.random.default_rng(seed)
        self.store = ParamStore()
        c, h, enc = config, config.hidden, config.grid.output_width
        self.hhe1.init(self.store, rng)
        nx.init_mlp(self.store, "geometry", [enc, h, h, c.geo_dim + 1], rng)
        nx.init_mlp(self.store, "color", [c.geo_dim + 9, h, h, 3], rng)
        nx.init_mlp(self.store, "semantic", [c.geo_dim, h, h, c.semantic_dim], rng)
        inst_in = c.geo_dim if c.architecture == "stacked" else enc
        if c.architecture == "decoupled":
            self.hhe2.init(self.store, rng)
        nx.init_mlp(self.store, "instance", [inst_in, h, h, c.instance_dim], rng)

    # -- pieces -----------------------------------------------------------

    def _geometry(self, enc1: Tensor, graph: Graph | None) -> tuple[Tensor, Tensor]:
        out = nx.mlp_forward(self.store, "geometry", enc1, graph)
        g = self.config.geo_dim
        fg = nx.columns(out, 0, g)
        sigma = nx.softplus(nx.reshape(nx.columns(out, g, g + 1), (out.shape[0],)))
        return sigma, fg

    def query_geometry(self, x: np.ndarray, graph: Graph | None) -> tuple[Tensor, Tensor]:
        """Density ``(P,)`` and geometric feature ``(P, geo_dim)``."""
        return self._geometry(self.hhe1.encode(self.store, x, graph), graph)

    def query_color(self, fg: Tensor, d: np.ndarray, graph: Graph | None) -> Tensor:
        d = np.asarray(d, dtype=nx.DTYPE)
        if d.ndim == 1:
            d = np.broadcast_to(d, (fg.shape[0], 3))
        norm = np.linalg.norm(d, axis=1, keepdims=True)
        if np.any(np.abs(norm - 1.0) > 1e-6):
            log.warning("query_color: normalizing %d non-unit directions", int((np.abs(norm - 1.0) > 1e-6).sum()))
            d = d / norm
        inp = nx.concat([fg, nx.constant(sh_encode(d))], axis=1)
        return nx.sigmoid(nx.mlp_forward(self.store, "color", inp, graph))

    def query_semantic(self, fg: Tensor, graph: Graph | None) -> Tensor:
        return nx.mlp_forward(self.store, "semantic", fg, graph)

    def query_instance(
        self,
        x: np.ndarray,
        graph: Graph | None,
        fg: Tensor | None = None,
        enc1: Tensor | None = None,
        store: ParamStore | None = None,
    ) -> Tensor:
        """Instance feature ``(P, instance_dim)``.

        ``store`` substitutes the instance-branch parameters (the EMA copy); the
        geometry feeding the stacked/shared variants always comes from the live model.
        """
        arch = self.config.architecture
        params = store if store is not None else self.store
        if arch == "decoupled":
            inp = self.hhe2.encode(params, x, graph if store is None else None)
        elif arch == "shared_hhe":
            inp = enc1 if enc1 is not None else self.hhe1.encode(self.store, x, graph)
        else:
            inp = fg if fg is not None else self.query_geometry(x, graph)[1]
        return nx.mlp_forward(params, "instance", inp, graph if store is None else None)

    # -- combined pass ----------------------------------------------------

    def forward_points(
        self,
        x: np.ndarray,
        graph: Graph | None,
        dirs: np.ndarray | None = None,
        semantic: bool = True,
        instance: bool = True,
        instance_store: ParamStore | None = None,
    ) -> dict[str, Tensor]:
        """Evaluate every requested head on points ``(P, 3)`` sharing the encodings."""
        enc1 = self.hhe1.encode(self.store, x, graph)
        sigma, fg = self._geometry(enc1, graph)
        out = {"sigma": sigma, "fg": fg}
        if dirs is not None:
            out["color"] = self.query_color(fg, dirs, graph)
        if semantic:
            out["semantic"] = self.query_semantic(fg, graph)
        if instance:
            out["instance"] = self.query_instance(x, graph, fg=fg, enc1=enc1, store=instance_store)
        return out

    def header(self) -> dict[str, str]:
        return self.config.to_header()

