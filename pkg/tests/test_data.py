"""Synthetic dataset generation, augmentation, memory selection, disk layout."""

import numpy as np
import pytest

from cilseg.data import (MemoryStore, SceneSpec, StagePlan, Subset, augment,
                         default_plan, generate, load_dataset,
                         relabel_for_stage, save_dataset, select_memory,
                         to_input)
from cilseg.losses import IGNORE, LabelMap
from cilseg.model import NetConfig, build


def tiny_plan(seed=0):
    return StagePlan(((0, 1, 2), (3, 4, 5), (6, 7, 8)), (8, 8, 8, 6), seed)


@pytest.fixture(scope="module")
def tiny_subsets():
    return generate(SceneSpec(image_size=(32, 32)), tiny_plan())


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(class_universe=(0, 1, IGNORE), background_classes=(0,))
    with pytest.raises(ValueError):
        SceneSpec(class_universe=(0, 1), background_classes=(5,))


def test_stage_plan_validation_and_json():
    with pytest.raises(ValueError):
        StagePlan(((0, 1), (1, 2), (3,)), (2, 2, 2, 2))
    with pytest.raises(ValueError):
        StagePlan(((0,), (1,), (2,)), (2, 0, 2, 2))
    plan = default_plan(seed=3)
    assert StagePlan.from_json(plan.to_json()) == plan
    assert plan.universe == tuple(range(9))


def test_generate_subset_shapes_and_types(tiny_subsets):
    assert set(tiny_subsets) == {"d1", "d2", "d3", "test"}
    for name, sub in tiny_subsets.items():
        want = 6 if name == "test" else 8
        assert len(sub) == want
        for img, lab, full in zip(sub.images, sub.labels, sub.full_labels):
            assert img.dtype == np.uint8 and img.shape == (32, 32, 3)
            assert lab.dtype == np.uint8 and lab.shape == (32, 32)
            assert full.dtype == np.uint8 and full.shape == (32, 32)


def test_training_labels_are_stage_restricted(tiny_subsets):
    plan = tiny_plan()
    for si, name in enumerate(("d1", "d2", "d3")):
        allowed = set(plan.class_partition[si]) | {IGNORE}
        for lab, full in zip(tiny_subsets[name].labels,
                             tiny_subsets[name].full_labels):
            assert set(np.unique(lab)) <= allowed
            keep = lab != IGNORE
            np.testing.assert_array_equal(lab[keep], full[keep])


def test_test_labels_cover_full_universe(tiny_subsets):
    present = set(np.unique(np.stack(tiny_subsets["test"].labels)))
    assert set(range(9)) <= present


def test_training_coverage_floor(tiny_subsets):
    plan = tiny_plan()
    for si, name in enumerate(("d1", "d2", "d3")):
        labs = np.stack(tiny_subsets[name].labels)
        for c in plan.class_partition[si]:
            assert (labs == c).mean() >= 0.05


def test_generate_is_deterministic():
    spec = SceneSpec(image_size=(32, 32))
    a = generate(spec, tiny_plan(seed=4))
    b = generate(spec, tiny_plan(seed=4))
    for name in a:
        for x, y in zip(a[name].images, b[name].images):
            np.testing.assert_array_equal(x, y)


def test_generate_seed_changes_content():
    spec = SceneSpec(image_size=(32, 32))
    a = generate(spec, tiny_plan(seed=4))
    b = generate(spec, tiny_plan(seed=5))
    assert any(not np.array_equal(x, y)
               for x, y in zip(a["d1"].images, b["d1"].images))


def test_generate_rejects_plan_outside_universe():
    plan = StagePlan(((0, 1), (2,), (9,)), (2, 2, 2, 2))
    with pytest.raises(ValueError):
        generate(SceneSpec(), plan)


def test_relabel_for_stage():
    full = LabelMap(np.array([[0, 3], [4, IGNORE]]), frozenset(range(9)))
    out = relabel_for_stage(full, (3, 4, 5))
    np.testing.assert_array_equal(out.values, [[IGNORE, 3], [4, IGNORE]])
    assert out.class_universe == frozenset({3, 4, 5})


def test_augment_synchronized_and_deterministic():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 255, size=(16, 16, 3), dtype=np.uint8)
    lab = rng.integers(0, 4, size=(16, 16), dtype=np.uint8)
    # labels follow the image pixel for pixel under any seed
    marker = lab.astype(np.int64) * 1000 + np.arange(256).reshape(16, 16)
    for seed in range(10):
        a_img, a_lab = augment(img, lab, seed, crop_size=(8, 8))
        b_img, b_lab = augment(img, lab, seed, crop_size=(8, 8))
        np.testing.assert_array_equal(a_img, b_img)
        np.testing.assert_array_equal(a_lab, b_lab)
        assert a_img.shape == (8, 8, 3) and a_lab.shape == (8, 8)
    # flip-only path keeps the multiset of pixels
    f_img, f_lab = augment(img, lab, seed=1, crop_size=None, flip=True)
    assert sorted(f_lab.ravel()) == sorted(lab.ravel())


def test_augment_rejects_oversized_crop():
    img = np.zeros((8, 8, 3), dtype=np.uint8)
    lab = np.zeros((8, 8), dtype=np.uint8)
    with pytest.raises(ValueError):
        augment(img, lab, seed=0, crop_size=(16, 8))


def test_to_input_range_and_layout():
    img = np.zeros((4, 6, 3), dtype=np.uint8)
    img[0, 0] = (255, 0, 127)
    x = to_input(img)
    assert x.shape == (3, 4, 6)
    assert x.dtype == np.float64
    assert x[0, 0, 0] == 1.0 and x[1, 0, 0] == 0.0
    assert x[2, 0, 0] == pytest.approx(127 / 255)


def test_select_memory_budget_and_ordering(tiny_subsets):
    model = build(NetConfig(class_count=3, base_width=4, depth=2), seed=1)
    snap = model.snapshot()
    store = select_memory(tiny_subsets["d1"], snap, budget=3)
    assert len(store) == 3
    assert store.indices == sorted(store.indices)
    picked = {store.scores[i] for i in store.indices}
    skipped = [store.scores[i] for i in range(8) if i not in store.indices]
    assert min(picked) >= max(skipped) - 1e-12
    for slot, idx in enumerate(store.indices):
        np.testing.assert_array_equal(store.images[slot],
                                      tiny_subsets["d1"].images[idx])


def test_select_memory_rejects_oversized_budget(tiny_subsets):
    model = build(NetConfig(class_count=3, base_width=4, depth=2), seed=1)
    with pytest.raises(ValueError):
        select_memory(tiny_subsets["d1"], model.snapshot(), budget=99)


def test_dataset_disk_roundtrip(tmp_path, tiny_subsets):
    plan = tiny_plan()
    save_dataset(tmp_path, tiny_subsets, plan)
    back, got_plan = load_dataset(tmp_path)
    assert got_plan == plan
    assert set(back) == set(tiny_subsets)
    for name in tiny_subsets:
        for field in ("images", "labels", "full_labels"):
            for x, y in zip(getattr(tiny_subsets[name], field),
                            getattr(back[name], field)):
                np.testing.assert_array_equal(x, y)
