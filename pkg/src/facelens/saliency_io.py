"""Saliency map files: 16-bit grayscale PNG (max-normalized values) plus
a JSON sidecar carrying the method, parameters, dropped mass and raw sum."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from facelens.attribution import SaliencyMap

SIDECAR_SUFFIX = ".json"


def save_saliency(smap, png_path):
    png_path = Path(png_path)
    if smap.normalization != "max-normalized":
        smap = smap.max_normalized()
    arr = np.clip(np.round(smap.values * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(png_path)
    sidecar = {
        "method": smap.method,
        "params": smap.params,
        "raw_sum": smap.raw_sum,
        "dropped_mass": smap.dropped_mass,
        "normalization": smap.normalization,
    }
    with open(png_path.with_suffix(SIDECAR_SUFFIX), "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)


def load_saliency(png_path):
    png_path = Path(png_path)
    arr = np.asarray(Image.open(png_path), dtype=np.float32) / 65535.0
    meta = {}
    sidecar = png_path.with_suffix(SIDECAR_SUFFIX)
    if sidecar.exists():
        with open(sidecar) as f:
            meta = json.load(f)
    return SaliencyMap(arr, meta.get("normalization", "max-normalized"),
                       raw_sum=meta.get("raw_sum", 0.0),
                       dropped_mass=meta.get("dropped_mass", 0.0),
                       method=meta.get("method", ""),
                       params=meta.get("params", {}))
