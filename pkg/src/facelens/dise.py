"""Density-based input sampling: sparse occlusion masks drawn from an
attention-derived prior, weighted by the numerical triplet-loss gradient
and accumulated into a saliency map."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from facelens import attribution, netcore
from facelens.attribution import MAP_SIZE, SaliencyMap, bilinear_resize

BLUR_SIGMA = 8.0
MID_GRAY = 0.5


class DegenerateSamplingPrior(ValueError):
    pass


@dataclass
class MaskSpec:
    rows: int = 6
    cols: int = 6
    elements: int = 2            # occluded cells per mask
    element_size: int = 12       # pixels per grid cell before smoothing
    fill: str = "blur"           # "blur" | "gray"

    def __post_init__(self):
        if self.elements < 1 or self.elements > self.rows * self.cols:
            raise ValueError("elements per mask must be in [1, grid cell count]")
        if self.element_size < 1:
            raise ValueError("element size must be >= 1")
        if self.fill not in ("blur", "gray"):
            raise ValueError(f"unknown fill mode {self.fill!r}")


@dataclass
class SamplingPrior:
    probs: np.ndarray            # (rows, cols), non-negative, sums to 1


def ebp_sampling_prior(saliency, spec, percentile=50.0):
    """Zero the saliency below its percentile, average over grid cells
    and normalize to a distribution. Cell means (not sums) keep the
    prior uniform for a uniform map even when the grid does not divide
    the map evenly."""
    vals = np.asarray(saliency.values, dtype=np.float64)
    cut = np.percentile(vals, percentile)
    kept = np.where(vals >= cut, vals, 0.0)
    cell = np.zeros((spec.rows, spec.cols), dtype=np.float64)
    rs = np.minimum((np.arange(MAP_SIZE) * spec.rows) // MAP_SIZE, spec.rows - 1)
    cs = np.minimum((np.arange(MAP_SIZE) * spec.cols) // MAP_SIZE, spec.cols - 1)
    for r in range(spec.rows):
        for c in range(spec.cols):
            cell[r, c] = kept[np.ix_(rs == r, cs == c)].mean()
    total = cell.sum()
    if total <= 0.0:
        raise DegenerateSamplingPrior("degenerate sampling prior")
    return SamplingPrior(cell / total)


def _sample_cells(prior, spec, count, seed):
    """Cell index tuples for `count` masks, drawn without replacement
    from the prior. The random stream is split per sample index so
    parallel and serial runs agree."""
    probs = prior.probs.reshape(-1)
    supported = int((probs > 0).sum())
    if supported < spec.elements:
        raise ValueError(
            f"prior supports {supported} cells, need {spec.elements} per mask")
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        cells = rng.choice(probs.size, size=spec.elements, replace=False, p=probs)
        out.append(tuple(int(c) for c in cells))
    return out


def _cells_to_mask(cells, spec):
    # paint element-size squares on the full-resolution grid, then smooth
    # to pixel resolution; painting the squares first (rather than
    # upsampling the cell indicator directly) keeps each element's support
    # at element size instead of spreading a tent over neighboring cells
    canvas = np.zeros((spec.rows * spec.element_size,
                       spec.cols * spec.element_size), dtype=np.float64)
    for c in cells:
        r, q = divmod(int(c), spec.cols)
        canvas[r * spec.element_size:(r + 1) * spec.element_size,
               q * spec.element_size:(q + 1) * spec.element_size] = 1.0
    return bilinear_resize(canvas, (MAP_SIZE, MAP_SIZE)).astype(np.float32)


def sample_masks(prior, spec, count, seed):
    """Draw `count` binary cell masks from the prior and smooth them to
    pixel resolution (values in [0, 1])."""
    cells = _sample_cells(prior, spec, count, seed)
    masks = np.zeros((count, MAP_SIZE, MAP_SIZE), dtype=np.float32)
    for i, c in enumerate(cells):
        masks[i] = _cells_to_mask(c, spec)
    return masks


def apply_mask(image, mask, fill_mode="blur", fill=None):
    """out = image * (1 - mask) + fill * mask, channelwise."""
    image = np.asarray(image)
    if mask.shape != image.shape[-2:]:
        raise ValueError("mask shape does not match image")
    if fill is None:
        fill = make_fill(image, fill_mode)
    return (image * (1.0 - mask) + fill * mask).astype(image.dtype)


def make_fill(image, fill_mode):
    if fill_mode == "blur":
        return np.stack([gaussian_filter(ch, BLUR_SIGMA) for ch in image])
    if fill_mode == "gray":
        return np.full_like(image, MID_GRAY)
    raise ValueError(f"unknown fill mode {fill_mode!r}")


def dise_weight(net, p_embed, m, n, alpha, masked_probe_image, orientation="drop"):
    """Numerical loss gradient for one mask. Default is the rectified
    loss drop max(0, L(p) - L(p_hat)); orientation="raise" rectifies
    the loss increase instead."""
    p_hat = netcore.embed_batch(net, np.asarray(masked_probe_image)[None])[0]
    return _weight_from_losses(
        netcore.triplet_loss(p_embed, m, n, alpha),
        netcore.triplet_loss(p_hat, m, n, alpha),
        orientation)


def _weight_from_losses(loss_ref, loss_masked, orientation):
    if orientation == "drop":
        return max(0.0, loss_ref - loss_masked)
    if orientation == "raise":
        return max(0.0, loss_masked - loss_ref)
    raise ValueError(f"unknown orientation {orientation!r}")


def dise(net, probe_image, m, n, alpha=0.2, spec=None, count=2000, seed=0,
         orientation="drop", prior_percentile=50.0, batch_size=256):
    """Full pipeline: triplet-EBP sampling prior, sparse mask sampling,
    numerical-gradient weighting and convex accumulation. Deterministic
    given the seed."""
    spec = spec or MaskSpec()
    probe_image = np.asarray(probe_image, dtype=np.float32)
    p_embed, trace = netcore.forward(net, probe_image)
    base = attribution.ebp(net, trace, attribution.ebp_prior_triplet(m, n))
    prior = ebp_sampling_prior(base, spec, prior_percentile)
    cells = _sample_cells(prior, spec, count, seed)

    # identical cell sets give identical masks, so weigh each distinct
    # mask once and accumulate with multiplicities
    distinct = sorted(set(map(tuple, (sorted(c) for c in cells))))
    dmasks = np.stack([_cells_to_mask(c, spec) for c in distinct]) if distinct \
        else np.zeros((0, MAP_SIZE, MAP_SIZE), np.float32)
    fill = make_fill(probe_image, spec.fill)
    loss_ref = netcore.triplet_loss(p_embed, m, n, alpha)
    dweights = np.zeros(len(distinct), dtype=np.float64)
    for start in range(0, len(distinct), batch_size):
        chunk = dmasks[start:start + batch_size]
        batch = probe_image[None] * (1.0 - chunk[:, None]) + fill[None] * chunk[:, None]
        embs = netcore.embed_batch(net, batch.astype(np.float32))
        for j, e in enumerate(embs):
            dweights[start + j] = _weight_from_losses(
                loss_ref, netcore.triplet_loss(e, m, n, alpha), orientation)

    index = {c: i for i, c in enumerate(distinct)}
    weights = np.array([dweights[index[tuple(sorted(c))]] for c in cells])
    total = weights.sum()
    zero_frac = float((weights == 0).mean()) if count else 1.0
    multiplicity = np.zeros(len(distinct), dtype=np.float64)
    for c in cells:
        multiplicity[index[tuple(sorted(c))]] += 1.0
    params = {"rows": spec.rows, "cols": spec.cols, "elements": spec.elements,
              "element_size": spec.element_size, "fill": spec.fill,
              "count": count, "seed": seed, "orientation": orientation,
              "zero_weight_fraction": zero_frac}
    if total <= 0.0:
        warnings.warn("all mask weights are zero; returning an empty saliency map")
        return SaliencyMap(np.zeros((MAP_SIZE, MAP_SIZE), np.float32),
                           "max-normalized", method="dise", params=params)
    acc = np.tensordot(dweights * multiplicity, dmasks.astype(np.float64),
                       axes=(0, 0)) / total
    out = SaliencyMap(acc.astype(np.float32), "raw-probability",
                      raw_sum=float(acc.sum()), method="dise", params=params)
    return out.max_normalized()
