"""Dataset manifest: JSON-lines file tying image ids to files, triplets
to their images and ground-truth masks, and subjects to splits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

SCHEMA_VERSION = 1

REGIONS = ("cheeks-jaw", "mouth", "nose", "left-eye", "right-eye",
           "eyebrows", "left-face", "right-face")

SPLITS = ("train", "calibration", "evaluation")


class ManifestError(ValueError):
    pass


@dataclass
class ImageRecord:
    id: str
    path: str
    subject: str
    split: str


@dataclass
class MaskRecord:
    id: str
    path: str
    region: str


@dataclass
class TripletRecord:
    id: str
    probe: str
    mate_refs: list
    nonmate_refs: list
    inpainted_probe: str
    mask: str
    region: str
    subject: str
    doppelganger: str


@dataclass
class DatasetManifest:
    root: Path
    images: dict = field(default_factory=dict)      # id -> ImageRecord
    masks: dict = field(default_factory=dict)       # id -> MaskRecord
    triplets: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add_image(self, rec):
        self.images[rec.id] = rec

    def add_mask(self, rec):
        self.masks[rec.id] = rec

    def image_path(self, image_id):
        return Path(self.root) / self.images[image_id].path

    def mask_path(self, mask_id):
        return Path(self.root) / self.masks[mask_id].path

    def load_image(self, image_id):
        """Image as float32 CHW in [0, 1]."""
        arr = np.asarray(Image.open(self.image_path(image_id)).convert("RGB"))
        return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)

    def load_mask(self, mask_id):
        """Ground-truth region mask as a boolean array."""
        arr = np.asarray(Image.open(self.mask_path(mask_id)).convert("L"))
        return arr >= 128

    def split_images(self, split):
        return [rec for rec in self.images.values() if rec.split == split]

    def subjects(self, split):
        return sorted({rec.subject for rec in self.images.values() if rec.split == split})

    def validate(self):
        for t in self.triplets:
            refs = [t.probe, t.inpainted_probe, *t.mate_refs, *t.nonmate_refs]
            for image_id in refs:
                if image_id not in self.images:
                    raise ManifestError(f"triplet {t.id}: unknown image {image_id}")
            if t.mask not in self.masks:
                raise ManifestError(f"triplet {t.id}: unknown mask {t.mask}")
            if t.region not in REGIONS:
                raise ManifestError(f"triplet {t.id}: unknown region {t.region}")
        seen = {}
        for rec in self.images.values():
            if rec.split not in SPLITS:
                raise ManifestError(f"image {rec.id}: unknown split {rec.split}")
            prev = seen.setdefault(rec.subject, rec.split)
            if prev != rec.split:
                raise ManifestError(f"subject {rec.subject} appears in two splits")
        return self

    def save(self, path):
        path = Path(path)
        with open(path, "w") as f:
            f.write(json.dumps({"record": "meta", "schema_version": SCHEMA_VERSION,
                                **self.meta}) + "\n")
            for rec in self.images.values():
                f.write(json.dumps({"record": "image", **asdict(rec)}) + "\n")
            for rec in self.masks.values():
                f.write(json.dumps({"record": "mask", **asdict(rec)}) + "\n")
            for rec in self.triplets:
                f.write(json.dumps({"record": "triplet", **asdict(rec)}) + "\n")

    @classmethod
    def load(cls, path, root=None):
        path = Path(path)
        man = cls(root=Path(root) if root else path.parent)
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                kind = obj.pop("record")
                if kind == "meta":
                    version = obj.pop("schema_version", None)
                    if version != SCHEMA_VERSION:
                        raise ManifestError(f"unsupported manifest schema {version}")
                    man.meta = obj
                elif kind == "image":
                    man.add_image(ImageRecord(**obj))
                elif kind == "mask":
                    man.add_mask(MaskRecord(**obj))
                elif kind == "triplet":
                    man.triplets.append(TripletRecord(**obj))
                else:
                    raise ManifestError(f"unknown record kind {kind!r}")
        return man.validate()
