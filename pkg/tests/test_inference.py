import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pvlff.encoding import HashGridConfig
from pvlff.fields import FieldModel, ModelConfig
from pvlff.inference import (
    ClusterConfig,
    PromptError,
    PromptSet,
    assign_semantics,
    denoise_semantics,
    effective_cluster_size,
    fuse_panoptic,
    parse_prompts,
    predict_scene,
    scene_prompts,
    segment_instances,
)

PROMPTS = PromptSet(["floor", "cup", "box"], np.array([False, True, True]), np.eye(3))


def test_parse_prompts_round_trip():
    text = "# classes\nfloor stuff 1 0 0\ncup thing 0 1 0  # a mug\n\nbox thing 0 0 1\n"
    p = parse_prompts(text)
    assert p.names == ["floor", "cup", "box"] and p.thing.tolist() == [False, True, True]
    q = parse_prompts(p.to_text())
    assert q.names == p.names and np.array_equal(q.embeddings, p.embeddings)
    assert p.subset(["box", "floor"]).names == ["box", "floor"]
    assert p.stuff_ids.tolist() == [0]


@pytest.mark.parametrize(
    "text,line",
    [
        ("a stuff 1 0\nb kind 0 1\n", 2),
        ("a stuff 1 0\nb thing 0 1 2\n", 2),
        ("a stuff 1 x\n", 1),
        ("a stuff\n", 1),
    ],
)
def test_parse_prompts_errors_carry_line(text, line):
    with pytest.raises(PromptError, match=f":{line}:"):
        parse_prompts(text)


def test_prompt_set_validation():
    with pytest.raises(PromptError):
        parse_prompts("# nothing\n")
    with pytest.raises(PromptError):
        PromptSet(["a", "a"], np.array([True, True]), np.eye(2))
    with pytest.raises(PromptError):
        PromptSet(["a"], np.array([True]), np.zeros((1, 2)))


def test_assign_semantics_cosine_argmax():
    f = np.array([[2.0, 0.1, 0.0], [0.0, 0.0, 5.0], [0.0, 0.0, 0.0], [1.0, 1.0, 0.0]])
    cls, sim, valid = assign_semantics(f, PROMPTS)
    assert cls.tolist() == [0, 2, 0, 0]  # the last row ties and takes the lower id
    assert valid.tolist() == [True, True, False, True]
    assert sim[1] == pytest.approx(1.0) and sim[2] == 0.0
    with pytest.raises(PromptError):
        assign_semantics(np.ones((2, 4)), PROMPTS)


def test_assign_semantics_scale_invariant(rng):
    f = rng.normal(size=(5, 6, 3))
    a = assign_semantics(f, PROMPTS)[0]
    b = assign_semantics(f * 7.5, PROMPTS)[0]
    np.testing.assert_array_equal(a, b)


def test_denoise_modal_class():
    classes = np.array([1, 1, 2, 2, 2, 0, 1, 2])
    inst = np.array([1, 1, 1, 1, 1, 0, 2, 2])
    assert denoise_semantics(classes, inst).tolist() == [2, 2, 2, 2, 2, 0, 1, 1]
    # background pixels keep their class; identity when every segment is pure
    pure = np.array([1, 1, 2, 2])
    assert denoise_semantics(pure, np.array([1, 1, 2, 2])).tolist() == [1, 1, 2, 2]


def test_denoise_with_thing_flags_leaves_stuff_alone():
    classes = np.array([0, 0, 1, 1, 1, 2, 0, 0, 1, 2, 2])
    inst = np.array([1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 3])
    thing = np.array([False, True, True])
    # segment 1: stuff pixels keep class 0, thing pixels vote 3-1 for class 1
    # segment 2 is mostly stuff, so nothing in it moves
    assert denoise_semantics(classes, inst, thing).tolist() == [0, 0, 1, 1, 1, 1, 0, 0, 1, 2, 2]


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.int64, 30, elements=st.integers(0, 3)),
    arrays(np.int64, 30, elements=st.integers(0, 4)),
    st.lists(st.booleans(), min_size=4, max_size=4),
)
def test_denoise_is_idempotent(classes, inst, flags):
    for thing in (None, np.array(flags)):
        once = denoise_semantics(classes, inst, thing)
        assert np.array_equal(denoise_semantics(once, inst, thing), once)
        assert np.array_equal(once[inst == 0], classes[inst == 0])


def test_effective_cluster_size_scales_with_subsample():
    cfg = ClusterConfig(min_cluster_size=50)
    assert effective_cluster_size(cfg, 1000, 1000) == 50
    assert effective_cluster_size(cfg, 3000, 40000, views=10) == 38
    assert effective_cluster_size(cfg, 10, 100000) == 2


def test_segment_instances_blobs(rng):
    centers = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 1.0, 0]])
    f = np.concatenate([c + 0.02 * rng.normal(size=(80, 4)) for c in centers])
    valid = np.ones(len(f), bool)
    valid[::17] = False
    ids = segment_instances(f, valid, ClusterConfig(min_samples=5, min_cluster_size=20))
    assert np.all(ids[~valid] == 0)
    assert set(ids[valid]) == {1, 2, 3}
    for k in range(3):
        block = ids[k * 80 : (k + 1) * 80]
        assert len(set(block[block > 0])) == 1


def test_segment_instances_subsample_is_deterministic(rng):
    centers = np.eye(4)[:2]
    f = np.concatenate([c + 0.05 * rng.normal(size=(300, 4)) for c in centers])
    cfg = ClusterConfig(min_samples=5, min_cluster_size=20, max_points=200, seed=3)
    a = segment_instances(f, None, cfg)
    b = segment_instances(f.copy(), None, cfg)
    np.testing.assert_array_equal(a, b)
    assert set(a) == {1, 2} and len(set(a[:300])) == 1


def test_fuse_panoptic_rules():
    classes = np.array([0, 0, 1, 1, 2, 2, 1, 2])
    inst = np.array([0, 5, 7, 7, 9, 9, 4, 4])
    pan = fuse_panoptic(classes, inst, PROMPTS)
    pan.check(PROMPTS.thing)
    assert pan.instance[:2].tolist() == [0, 0]  # stuff carries no id
    assert pan.instance[2] == pan.instance[3] and pan.instance[4] == pan.instance[5]
    # ids are dense per class
    for c in (1, 2):
        ids = set(pan.instance[(classes == c) & (pan.instance > 0)].tolist())
        assert ids == set(range(1, len(ids) + 1))


def test_fuse_panoptic_invalid_pixels():
    classes = np.array([1, 1, 2])
    inst = np.array([3, 3, 4])
    valid = np.array([True, False, True])
    pan = fuse_panoptic(classes, inst, PROMPTS, valid)
    assert pan.instance.tolist() == [1, 0, 1] and pan.semantic.tolist() == [1, 0, 2]


def test_scene_prompts_match_scene(tiny_scene):
    p = scene_prompts(tiny_scene)
    assert len(p) == len(tiny_scene.classes)
    assert p.embeddings.shape[1] == tiny_scene.semantic_dim


def test_predict_scene_shapes_and_consistency(tiny_scene):
    model = FieldModel(
        ModelConfig(grid=HashGridConfig(levels=4, table_size=2**10), semantic_dim=tiny_scene.semantic_dim), seed=0
    )
    pred = predict_scene(
        model, tiny_scene, scene_prompts(tiny_scene), ClusterConfig(5, 10), frames=[0, 2], n_samples=8,
        min_opacity=0.0,
    )
    shape = (2, tiny_scene.height, tiny_scene.width)
    assert pred.semantic.shape == pred.instance.shape == pred.valid.shape == shape
    assert pred.frames == [0, 2]
    pred.panoptic.check(scene_prompts(tiny_scene).thing)
    assert np.all(pred.instance[~pred.valid] == 0)
