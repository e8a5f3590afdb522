"""Scene files, loading and the synthetic generator."""

from .formats import (
    FormatError,
    MaskProposal,
    read_feature_map,
    read_masks,
    rle_decode,
    rle_encode,
    write_feature_map,
    write_masks,
)
from .scene import Frame, Scene, SceneError, load_scene
from .synthetic import (
    PRESETS,
    SpecError,
    ClassInfo,
    CorruptionConfig,
    Primitive,
    SyntheticSceneSpec,
    corrupt_masks,
    desk_scene,
    generate_scene,
    parse_scene_spec,
    part_whole_scene,
)
