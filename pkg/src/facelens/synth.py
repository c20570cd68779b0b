"""Procedural synthetic-identity generator.

Renders parameterized face-like images on a canonical 64x64 layout with
eight fixed facial regions, produces doppelgangers that differ from an
identity only inside one region, and emits exact ground-truth masks.
Nuisance transforms (translate/rotate/brightness/noise) are applied
identically to the image and its masks with nearest-neighbor warps, so
pixel differences between an image and its doppelganger stay exactly
inside the region mask even after augmentation."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import binary_erosion

from facelens.manifest import (
    REGIONS, DatasetManifest, ImageRecord, MaskRecord, TripletRecord,
)

SIZE = 64
BACKGROUND = np.array([0.15, 0.15, 0.17], dtype=np.float64)
PARAMS_PER_REGION = 6
CONFIG_VERSION = 1

_YY, _XX = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)


def _ellipse(cx, cy, rx, ry):
    return ((_XX - cx) / rx) ** 2 + ((_YY - cy) / ry) ** 2 <= 1.0


@lru_cache(maxsize=1)
def region_masks():
    """The eight canonical region masks (mutually disjoint, all inside
    the face ellipse)."""
    face = _ellipse(32, 34, 22, 26)
    left_eye = _ellipse(23, 26, 5, 3)
    right_eye = _ellipse(41, 26, 5, 3)
    brows = (_YY >= 18) & (_YY <= 21) & (((_XX >= 16) & (_XX <= 30)) | ((_XX >= 34) & (_XX <= 48)))
    brows &= face
    nose = (_YY >= 29) & (_YY <= 40) & (np.abs(_XX - 32) <= 1.0 + (_YY - 29) * 0.45)
    mouth = _ellipse(32, 47, 8, 3)
    cheeks = face & (_YY >= 53)
    features = left_eye | right_eye | brows | nose | mouth | cheeks
    side = face & (_YY >= 14) & (_YY <= 52) & ~features
    left_face = side & (_XX <= 31)
    right_face = side & (_XX >= 33)
    masks = {
        "cheeks-jaw": cheeks,
        "mouth": mouth,
        "nose": nose,
        "left-eye": left_eye,
        "right-eye": right_eye,
        "eyebrows": brows,
        "left-face": left_face,
        "right-face": right_face,
    }
    assert set(masks) == set(REGIONS)
    for name, m in masks.items():
        assert m.any(), name
    return masks


@lru_cache(maxsize=1)
def face_mask():
    return _ellipse(32, 34, 22, 26)


# ---------------------------------------------------------------------------
# Identity parameters


@dataclass
class IdentityParams:
    """Per-region appearance vectors plus a global skin tone, all in
    [0, 1]."""

    skin: np.ndarray                       # (2,): tone, redness
    regions: dict                          # region -> (6,) parameter vector

    def copy(self):
        return IdentityParams(self.skin.copy(),
                              {k: v.copy() for k, v in self.regions.items()})

    def to_dict(self):
        return {"skin": self.skin.tolist(),
                "regions": {k: v.tolist() for k, v in self.regions.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["skin"], dtype=np.float64),
                   {k: np.asarray(v, dtype=np.float64) for k, v in d["regions"].items()})


def sample_identity(rng):
    return IdentityParams(rng.uniform(size=2),
                          {r: rng.uniform(size=PARAMS_PER_REGION) for r in REGIONS})


def make_doppelganger(identity, region, distance, rng, max_tries=1000):
    """Copy of the identity with only the named region's parameters
    resampled at L2 distance >= `distance` in parameter space."""
    if region not in REGIONS:
        raise ValueError(f"unknown region {region!r}")
    if distance == 0:
        warnings.warn("doppelganger distance 0 is degenerate")
    out = identity.copy()
    old = identity.regions[region]
    for _ in range(max_tries):
        cand = rng.uniform(size=PARAMS_PER_REGION)
        if np.linalg.norm(cand - old) >= distance:
            out.regions[region] = cand
            return out
    raise ValueError(f"could not reach parameter distance {distance}")


# ---------------------------------------------------------------------------
# Rendering


def _palette(h):
    ang = 2.0 * np.pi * (h + np.array([0.0, 1.0 / 3.0, 2.0 / 3.0]))
    return 0.5 + 0.5 * np.sin(ang)


def _region_texture(params):
    hue, shade, _, fx, fy, phase = params
    base = _palette(hue) * (0.45 + 0.5 * shade)
    wx = np.sin(2.0 * np.pi * ((1.0 + 4.0 * fx) * _XX / SIZE + phase))
    wy = np.sin(2.0 * np.pi * ((1.0 + 4.0 * fy) * _YY / SIZE + 0.7 * phase))
    wave = 1.0 + 0.35 * wx * wy
    return np.clip(base[None, None, :] * wave[:, :, None], 0.0, 1.0)


def _render_canonical(identity):
    tone, redness = identity.skin
    skin = np.array([0.80, 0.62, 0.50]) * (0.65 + 0.35 * tone)
    skin = skin + np.array([0.12 * (redness - 0.5), 0.0, 0.0])
    img = np.tile(BACKGROUND, (SIZE, SIZE, 1))
    img[face_mask()] = np.clip(skin, 0.0, 1.0)
    for region in REGIONS:
        params = identity.regions[region]
        paint = region_masks()[region]
        if params[2] < 0.5:  # shape-scale parameter shrinks the painted area
            paint = binary_erosion(paint)
            if not paint.any():
                paint = region_masks()[region]
        tex = _region_texture(params)
        img[paint] = tex[paint]
    return img


@dataclass
class Nuisance:
    tx: float = 0.0
    ty: float = 0.0
    angle: float = 0.0        # degrees
    brightness: float = 1.0   # multiplicative
    noise_seed: int = 0


@dataclass
class RenderConfig:
    translate: float = 3.0
    rotate: float = 5.0
    brightness: float = 0.10
    noise_sigma: float = 0.008
    train_identities: int = 200
    train_images: int = 6
    calibration_identities: int = 200
    calibration_images: int = 3
    eval_identities: int = 24
    mate_refs: int = 2
    nonmate_refs: int = 2
    doppelganger_distance: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("train_identities", "train_images", "calibration_identities",
                     "calibration_images", "eval_identities", "mate_refs", "nonmate_refs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("translate", "rotate", "brightness", "noise_sigma",
                     "doppelganger_distance"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def sample_nuisance(rng, config):
    return Nuisance(
        tx=float(rng.uniform(-config.translate, config.translate)),
        ty=float(rng.uniform(-config.translate, config.translate)),
        angle=float(rng.uniform(-config.rotate, config.rotate)),
        brightness=float(1.0 + rng.uniform(-config.brightness, config.brightness)),
        noise_seed=int(rng.integers(2 ** 31)),
    )


def _warp_indices(nuisance):
    # inverse map: output pixel -> nearest source pixel
    cx = cy = (SIZE - 1) / 2.0
    th = np.deg2rad(nuisance.angle)
    c, s = np.cos(th), np.sin(th)
    xo = _XX - cx - nuisance.tx
    yo = _YY - cy - nuisance.ty
    sx = np.rint(c * xo + s * yo + cx).astype(int)
    sy = np.rint(-s * xo + c * yo + cy).astype(int)
    valid = (sx >= 0) & (sx < SIZE) & (sy >= 0) & (sy < SIZE)
    return sy, sx, valid


def render_face(identity, nuisance, config):
    """Render one image (uint8 HWC) and its eight region masks, with the
    nuisance transform applied identically to both."""
    canon = _render_canonical(identity)
    sy, sx, valid = _warp_indices(nuisance)
    img = np.tile(BACKGROUND, (SIZE, SIZE, 1))
    img[valid] = canon[sy[valid], sx[valid]]
    img *= nuisance.brightness
    rng = np.random.default_rng(nuisance.noise_seed)
    img += rng.normal(0.0, config.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    img_u8 = np.round(img * 255.0).astype(np.uint8)
    masks = {}
    for region, m in region_masks().items():
        warped = np.zeros((SIZE, SIZE), dtype=bool)
        warped[valid] = m[sy[valid], sx[valid]]
        masks[region] = warped
    return img_u8, masks


def to_chw_float(img_u8):
    return (img_u8.astype(np.float32) / 255.0).transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# Dataset generation


def _save_image(root, rel, img_u8):
    path = Path(root) / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img_u8, "RGB").save(path)


def _save_mask(root, rel, mask):
    path = Path(root) / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask.astype(np.uint8)) * 255, "L").save(path)


_SPLIT_CODE = {"train": 0, "calibration": 1, "evaluation": 2}


def generate_dataset(config, out_dir):
    """Render all splits to disk and write the JSON-lines manifest.
    Fully seed-deterministic; per-image random streams are derived from
    (seed, split, subject index, image index)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    man = DatasetManifest(root=out_dir)
    identities = {}

    def subject_identity(split, idx):
        rng = np.random.default_rng([config.seed, _SPLIT_CODE[split], idx])
        return sample_identity(rng)

    def image_rng(split, idx, image_idx):
        return np.random.default_rng([config.seed, _SPLIT_CODE[split], idx, image_idx])

    for split, n_ids, n_imgs in (("train", config.train_identities, config.train_images),
                                 ("calibration", config.calibration_identities,
                                  config.calibration_images)):
        for s in range(n_ids):
            subject = f"{split}_{s:04d}"
            identity = subject_identity(split, s)
            identities[subject] = identity.to_dict()
            for j in range(n_imgs):
                nuis = sample_nuisance(image_rng(split, s, j), config)
                img, _ = render_face(identity, nuis, config)
                image_id = f"{subject}_img{j}"
                rel = f"images/{split}/{image_id}.png"
                _save_image(out_dir, rel, img)
                man.add_image(ImageRecord(image_id, rel, subject, split))

    for s in range(config.eval_identities):
        subject = f"eval_{s:04d}"
        identity = subject_identity("evaluation", s)
        identities[subject] = identity.to_dict()
        for ri, region in enumerate(REGIONS):
            doppel_rng = np.random.default_rng([config.seed, 3, s, ri])
            doppel = make_doppelganger(identity, region,
                                       config.doppelganger_distance, doppel_rng)
            doppel_id = f"{subject}_{region}"
            identities[doppel_id] = doppel.to_dict()
            base = f"{subject}_{region}"

            # probe and inpainted probe share one nuisance draw
            probe_nuis = sample_nuisance(image_rng("evaluation", s, ri * 100), config)
            probe_img, probe_masks = render_face(identity, probe_nuis, config)
            inpaint_img, _ = render_face(doppel, probe_nuis, config)

            probe_id = f"{base}_probe"
            inpaint_id = f"{base}_inpainted_probe"
            _save_image(out_dir, f"images/evaluation/{probe_id}.png", probe_img)
            _save_image(out_dir, f"images/evaluation/{inpaint_id}.png", inpaint_img)
            man.add_image(ImageRecord(probe_id, f"images/evaluation/{probe_id}.png",
                                      subject, "evaluation"))
            man.add_image(ImageRecord(inpaint_id, f"images/evaluation/{inpaint_id}.png",
                                      doppel_id, "evaluation"))

            mask_id = f"{base}_mask"
            _save_mask(out_dir, f"masks/{mask_id}.png", probe_masks[region])
            man.add_mask(MaskRecord(mask_id, f"masks/{mask_id}.png", region))

            mates, nonmates = [], []
            for j in range(config.mate_refs):
                nuis = sample_nuisance(image_rng("evaluation", s, ri * 100 + 1 + j), config)
                img, _ = render_face(identity, nuis, config)
                image_id = f"{base}_mate{j}"
                _save_image(out_dir, f"images/evaluation/{image_id}.png", img)
                man.add_image(ImageRecord(image_id, f"images/evaluation/{image_id}.png",
                                          subject, "evaluation"))
                mates.append(image_id)
            for j in range(config.nonmate_refs):
                nuis = sample_nuisance(image_rng("evaluation", s, ri * 100 + 50 + j), config)
                img, _ = render_face(doppel, nuis, config)
                image_id = f"{base}_nonmate{j}"
                _save_image(out_dir, f"images/evaluation/{image_id}.png", img)
                man.add_image(ImageRecord(image_id, f"images/evaluation/{image_id}.png",
                                          doppel_id, "evaluation"))
                nonmates.append(image_id)

            man.triplets.append(TripletRecord(
                id=base, probe=probe_id, mate_refs=mates, nonmate_refs=nonmates,
                inpainted_probe=inpaint_id, mask=mask_id, region=region,
                subject=subject, doppelganger=doppel_id))

    man.meta = {"generator": "facelens-synth",
                "config": asdict(config),
                "identities": identities}
    with open(out_dir / "config.json", "w") as f:
        json.dump({"config_version": CONFIG_VERSION, **asdict(config)}, f, indent=2)
    man.validate()
    man.save(out_dir / "manifest.jsonl")
    return man
