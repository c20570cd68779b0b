"""Generator tests: region-mask geometry, identity sampling, doppelganger
containment under augmentation, dataset determinism and manifest I/O."""

import itertools

import numpy as np
import pytest

from facelens import synth
from facelens.manifest import REGIONS, DatasetManifest, ManifestError
from facelens.synth import (
    IdentityParams, Nuisance, RenderConfig, face_mask, generate_dataset,
    make_doppelganger, region_masks, render_face, sample_identity,
    sample_nuisance, to_chw_float,
)


TINY_CONFIG = RenderConfig(train_identities=2, train_images=2,
                           calibration_identities=2, calibration_images=2,
                           eval_identities=1, seed=3)


# ---------------------------------------------------------------------------
# Region geometry


def test_region_masks_cover_all_regions_nonempty():
    masks = region_masks()
    assert set(masks) == set(REGIONS)
    for name, m in masks.items():
        assert m.shape == (64, 64)
        assert m.any(), name


def test_region_masks_pairwise_disjoint():
    masks = region_masks()
    for a, b in itertools.combinations(REGIONS, 2):
        assert not (masks[a] & masks[b]).any(), (a, b)


def test_region_masks_inside_face():
    face = face_mask()
    for name, m in region_masks().items():
        assert not (m & ~face).any(), name


# ---------------------------------------------------------------------------
# Identities and doppelgangers


def test_sample_identity_deterministic_and_in_range():
    a = sample_identity(np.random.default_rng(5))
    b = sample_identity(np.random.default_rng(5))
    assert np.array_equal(a.skin, b.skin)
    assert 0.0 <= a.skin.min() and a.skin.max() <= 1.0
    for region in REGIONS:
        assert np.array_equal(a.regions[region], b.regions[region])
        assert a.regions[region].shape == (synth.PARAMS_PER_REGION,)
        assert a.regions[region].min() >= 0.0
        assert a.regions[region].max() <= 1.0


def test_identity_params_round_trip():
    a = sample_identity(np.random.default_rng(8))
    b = IdentityParams.from_dict(a.to_dict())
    assert np.array_equal(a.skin, b.skin)
    assert all(np.array_equal(a.regions[r], b.regions[r]) for r in REGIONS)


def test_doppelganger_changes_only_named_region():
    identity = sample_identity(np.random.default_rng(0))
    doppel = make_doppelganger(identity, "nose", 1.0, np.random.default_rng(1))
    assert np.array_equal(doppel.skin, identity.skin)
    for region in REGIONS:
        same = np.array_equal(doppel.regions[region], identity.regions[region])
        assert same == (region != "nose"), region
    dist = np.linalg.norm(doppel.regions["nose"] - identity.regions["nose"])
    assert dist >= 1.0
    # the source identity is untouched
    assert not np.array_equal(identity.regions["nose"], doppel.regions["nose"])


def test_doppelganger_unknown_region():
    identity = sample_identity(np.random.default_rng(0))
    with pytest.raises(ValueError, match="unknown region"):
        make_doppelganger(identity, "forehead", 1.0, np.random.default_rng(1))


def test_doppelganger_zero_distance_warns():
    identity = sample_identity(np.random.default_rng(0))
    with pytest.warns(UserWarning, match="degenerate"):
        make_doppelganger(identity, "mouth", 0.0, np.random.default_rng(1))


def test_doppelganger_unreachable_distance():
    identity = sample_identity(np.random.default_rng(0))
    # parameter vectors live in [0,1]^6, so distances above sqrt(6) cannot occur
    with pytest.raises(ValueError, match="distance"):
        make_doppelganger(identity, "mouth", 10.0, np.random.default_rng(1),
                          max_tries=50)


# ---------------------------------------------------------------------------
# Rendering


def test_render_deterministic():
    identity = sample_identity(np.random.default_rng(2))
    nuis = Nuisance(tx=1.5, ty=-2.0, angle=4.0, brightness=1.05, noise_seed=9)
    cfg = RenderConfig()
    a, masks_a = render_face(identity, nuis, cfg)
    b, masks_b = render_face(identity, nuis, cfg)
    assert np.array_equal(a, b)
    for r in REGIONS:
        assert np.array_equal(masks_a[r], masks_b[r])


def test_render_output_shape_and_range():
    identity = sample_identity(np.random.default_rng(2))
    img, masks = render_face(identity, Nuisance(), RenderConfig())
    assert img.shape == (64, 64, 3) and img.dtype == np.uint8
    chw = to_chw_float(img)
    assert chw.shape == (3, 64, 64) and chw.dtype == np.float32
    assert chw.min() >= 0.0 and chw.max() <= 1.0


@pytest.mark.parametrize("region", ["nose", "mouth", "left-eye"])
def test_doppelganger_pixels_contained_in_warped_mask(region):
    """Probe and inpainted probe share the nuisance draw, so they differ
    only inside the warped ground-truth mask, even with noise and
    rotation applied."""
    identity = sample_identity(np.random.default_rng(4))
    doppel = make_doppelganger(identity, region, 1.0, np.random.default_rng(5))
    cfg = RenderConfig()
    nuis = sample_nuisance(np.random.default_rng(6), cfg)
    probe, masks = render_face(identity, nuis, cfg)
    inpainted, masks2 = render_face(doppel, nuis, cfg)
    for r in REGIONS:
        assert np.array_equal(masks[r], masks2[r])
    diff = (probe != inpainted).any(axis=2)
    assert diff.any()  # the region actually changed appearance
    assert not (diff & ~masks[region]).any()


def test_sample_nuisance_respects_config_bounds():
    cfg = RenderConfig(translate=2.0, rotate=3.0, brightness=0.2)
    for seed in range(20):
        n = sample_nuisance(np.random.default_rng(seed), cfg)
        assert abs(n.tx) <= 2.0 and abs(n.ty) <= 2.0
        assert abs(n.angle) <= 3.0
        assert 0.8 <= n.brightness <= 1.2


def test_render_config_validation():
    with pytest.raises(ValueError):
        RenderConfig(train_identities=0)
    with pytest.raises(ValueError):
        RenderConfig(noise_sigma=-0.1)


# ---------------------------------------------------------------------------
# Dataset generation


def test_generate_dataset_counts(small_dataset):
    cfg = RenderConfig(**small_dataset.meta["config"])
    assert len(small_dataset.triplets) == cfg.eval_identities * len(REGIONS)
    assert len(small_dataset.split_images("train")) == (
        cfg.train_identities * cfg.train_images)
    assert len(small_dataset.split_images("calibration")) == (
        cfg.calibration_identities * cfg.calibration_images)
    per_triplet = 2 + cfg.mate_refs + cfg.nonmate_refs
    assert len(small_dataset.split_images("evaluation")) == (
        len(small_dataset.triplets) * per_triplet)
    assert len(small_dataset.masks) == len(small_dataset.triplets)


def test_default_config_triplet_count_formula():
    cfg = RenderConfig()
    assert cfg.eval_identities * len(REGIONS) == 192


def test_generate_dataset_byte_identical(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_dataset(TINY_CONFIG, a)
    generate_dataset(TINY_CONFIG, b)
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_generated_triplet_containment(small_dataset):
    """On-disk probe vs inpainted probe differ only inside the stored
    ground-truth mask (PNG round trip included)."""
    for t in small_dataset.triplets[:6]:
        probe = small_dataset.load_image(t.probe)
        inpainted = small_dataset.load_image(t.inpainted_probe)
        gt = small_dataset.load_mask(t.mask)
        diff = (probe != inpainted).any(axis=0)
        assert diff.any()
        assert not (diff & ~gt).any()


def test_generated_subject_assignments(small_dataset):
    for t in small_dataset.triplets:
        assert small_dataset.images[t.probe].subject == t.subject
        assert small_dataset.images[t.inpainted_probe].subject == t.doppelganger
        for i in t.mate_refs:
            assert small_dataset.images[i].subject == t.subject
        for i in t.nonmate_refs:
            assert small_dataset.images[i].subject == t.doppelganger


# ---------------------------------------------------------------------------
# Manifest I/O


def test_manifest_round_trip(small_dataset, tmp_path):
    path = tmp_path / "man.jsonl"
    small_dataset.save(path)
    back = DatasetManifest.load(path, root=small_dataset.root)
    assert set(back.images) == set(small_dataset.images)
    assert set(back.masks) == set(small_dataset.masks)
    assert [t.id for t in back.triplets] == [t.id for t in small_dataset.triplets]
    assert back.meta["config"] == small_dataset.meta["config"]


def test_manifest_validate_unknown_image(small_dataset):
    import dataclasses
    man = DatasetManifest(root=small_dataset.root,
                          images=dict(small_dataset.images),
                          masks=dict(small_dataset.masks),
                          triplets=[dataclasses.replace(small_dataset.triplets[0],
                                                        probe="missing_id")])
    with pytest.raises(ManifestError, match="unknown image"):
        man.validate()


def test_manifest_validate_split_leak(small_dataset):
    man = DatasetManifest(root=small_dataset.root,
                          images=dict(small_dataset.images))
    rec = next(iter(man.images.values()))
    import dataclasses
    leaked = dataclasses.replace(rec, id="leak", split="evaluation"
                                 if rec.split != "evaluation" else "train")
    man.add_image(leaked)
    with pytest.raises(ManifestError, match="two splits"):
        man.validate()


def test_manifest_rejects_unknown_schema(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"record": "meta", "schema_version": 999}\n')
    with pytest.raises(ManifestError, match="schema"):
        DatasetManifest.load(path)
