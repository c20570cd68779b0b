"""The region-swap evaluation game: verification-threshold calibration,
triplet filtering, saliency-threshold sweep with probe blending,
identity-flip classification and curve metrics."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from facelens import netcore
from facelens.manifest import REGIONS, DatasetManifest

DEFAULT_THRESHOLDS = 256
DEFAULT_OPERATING_FPRS = (1e-2, 5e-2)


class CalibrationError(ValueError):
    pass


def similarity(a, b):
    """Verification similarity: negative squared Euclidean distance on
    unit embeddings (monotone in cosine)."""
    d = np.asarray(a) - np.asarray(b)
    return float(-(d * d).sum())


def gallery_embedding(embeddings):
    """Renormalized mean of reference embeddings."""
    m = np.mean(np.asarray(embeddings), axis=0)
    norm = np.linalg.norm(m)
    if norm == 0:
        raise ValueError("degenerate gallery: zero mean embedding")
    return m / norm


def calibrate_verification_threshold(impostor_scores, far):
    """Smallest threshold t such that fraction(score >= t) <= far."""
    scores = np.sort(np.asarray(impostor_scores, dtype=np.float64))[::-1]
    n = scores.size
    required = math.ceil(1.0 / far)
    if n < required:
        raise CalibrationError(
            f"need at least {required} impostor scores for far={far}, got {n}")
    k = int(math.floor(far * n))
    if k >= n:
        return float(scores[-1])
    return float(np.nextafter(scores[k], np.inf))


def impostor_scores(net, man, split="calibration"):
    """All between-subject similarity scores for a split, in a
    deterministic pair order."""
    records = sorted(man.split_images(split), key=lambda r: r.id)
    images = np.stack([man.load_image(r.id) for r in records])
    embs = netcore.embed_batch(net, images)
    subjects = np.asarray([r.subject for r in records])
    sq = (embs * embs).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (embs @ embs.T)
    iu, ju = np.triu_indices(len(records), k=1)
    keep = subjects[iu] != subjects[ju]
    return -d[iu[keep], ju[keep]]


# ---------------------------------------------------------------------------
# Filtering


@dataclass
class TripletContext:
    """Embeddings and galleries for one triplet, shared by the filter
    and the evaluation sweep."""

    probe: np.ndarray
    inpainted: np.ndarray
    mate_gallery: np.ndarray
    nonmate_gallery: np.ndarray


def triplet_context(net, man, triplet):
    ids = [triplet.probe, triplet.inpainted_probe, *triplet.mate_refs, *triplet.nonmate_refs]
    embs = netcore.embed_batch(net, np.stack([man.load_image(i) for i in ids]))
    n_mates = len(triplet.mate_refs)
    return TripletContext(
        probe=embs[0],
        inpainted=embs[1],
        mate_gallery=gallery_embedding(embs[2:2 + n_mates]),
        nonmate_gallery=gallery_embedding(embs[2 + n_mates:]),
    )


def triplet_passes_filter(ctx, threshold):
    """Both inclusion criteria: the probe must verify as the mate and be
    nearer the mate gallery; the inpainted probe must verify as the
    nonmate and be nearer the nonmate gallery."""
    s_pm = similarity(ctx.probe, ctx.mate_gallery)
    s_pn = similarity(ctx.probe, ctx.nonmate_gallery)
    s_im = similarity(ctx.inpainted, ctx.mate_gallery)
    s_in = similarity(ctx.inpainted, ctx.nonmate_gallery)
    return (s_pm > s_pn and s_pm >= threshold
            and s_in > s_im and s_in >= threshold)


def filter_triplets(man, net, threshold):
    """Keep triplets satisfying both criteria at the calibrated
    threshold. Returns (filtered manifest, per-region kept/dropped)."""
    kept = []
    stats = {region: {"kept": 0, "dropped": 0} for region in REGIONS}
    for triplet in man.triplets:
        ctx = triplet_context(net, man, triplet)
        if triplet_passes_filter(ctx, threshold):
            kept.append(triplet)
            stats[triplet.region]["kept"] += 1
        else:
            stats[triplet.region]["dropped"] += 1
    if not kept:
        warnings.warn("no triplets survive filtering")
    meta = dict(man.meta)
    meta["filter"] = {"threshold": threshold, "stats": stats}
    filtered = DatasetManifest(root=man.root, images=dict(man.images),
                               masks=dict(man.masks), triplets=kept, meta=meta)
    return filtered, stats


# ---------------------------------------------------------------------------
# Blending and classification


def binarize_saliency(saliency, t):
    """Pixel is salient iff its (max-normalized) value >= t."""
    vals = saliency.values if hasattr(saliency, "values") else np.asarray(saliency)
    return vals >= t


def blend_probe(probe, inpainted, mask):
    """Hard per-pixel replacement of probe pixels where mask is set."""
    probe = np.asarray(probe)
    inpainted = np.asarray(inpainted)
    if probe.shape != inpainted.shape or mask.shape != probe.shape[-2:]:
        raise ValueError("probe/inpainted/mask shape mismatch")
    return np.where(mask[None, :, :], inpainted, probe)


def classify_blended(net, blended, mate_gallery, nonmate_gallery):
    """Nearer-gallery classification of a blended probe; exact ties go
    to the mate so flips are never awarded on ties."""
    emb = netcore.embed_batch(net, np.asarray(blended)[None])[0]
    if similarity(emb, nonmate_gallery) > similarity(emb, mate_gallery):
        return "nonmate"
    return "mate"


# ---------------------------------------------------------------------------
# Threshold sweep


@dataclass
class EvalCurve:
    """Sweep results ordered by descending saliency threshold, i.e.
    non-decreasing pixel false-positive rate."""

    thresholds: np.ndarray
    fpr: np.ndarray
    macro_rate: np.ndarray
    micro_rate: np.ndarray
    region_rates: dict                  # region -> array over thresholds
    region_counts: dict                 # region -> triplet count
    averaging: str = "macro"

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["threshold", "fpr", "macro_rate", "micro_rate"]
                       + [f"rate_{r}" for r in REGIONS])
            for i in range(len(self.thresholds)):
                w.writerow([f"{self.thresholds[i]:.8g}", f"{self.fpr[i]:.8g}",
                            f"{self.macro_rate[i]:.8g}", f"{self.micro_rate[i]:.8g}"]
                           + [f"{self.region_rates[r][i]:.8g}" if r in self.region_rates
                              else "" for r in REGIONS])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        thresholds = np.array([float(r["threshold"]) for r in rows])
        fpr = np.array([float(r["fpr"]) for r in rows])
        macro = np.array([float(r["macro_rate"]) for r in rows])
        micro = np.array([float(r["micro_rate"]) for r in rows])
        region_rates = {}
        for region in REGIONS:
            col = f"rate_{region}"
            if rows and rows[0].get(col, "") != "":
                region_rates[region] = np.array([float(r[col]) for r in rows])
        return cls(thresholds, fpr, macro, micro, region_rates, {})


def default_threshold_schedule(n=DEFAULT_THRESHOLDS):
    """n uniform thresholds on [0, 1] plus one just above 1 so the curve
    reaches the empty-mask endpoint."""
    return np.append(np.linspace(0.0, 1.0, n), 1.0 + 1e-6)


def evaluate(saliency_maps, man, net, thresholds=None, contexts=None):
    """Sweep thresholds over all kept triplets: pixel FPR is pooled
    across triplets (micro); flip rates are reported per region, as
    their unweighted mean (macro, headline) and pooled (micro)."""
    if thresholds is None:
        thresholds = default_threshold_schedule()
    thresholds = np.sort(np.asarray(thresholds, dtype=np.float64))[::-1]
    missing = [t.id for t in man.triplets if t.id not in saliency_maps]
    if missing:
        raise ValueError(f"missing saliency maps for triplets: {missing}")

    n_t = thresholds.size
    salient_outside = np.zeros(n_t, dtype=np.int64)
    outside_total = 0
    flips = {region: np.zeros(n_t, dtype=np.int64) for region in REGIONS}
    counts = {region: 0 for region in REGIONS}

    for triplet in man.triplets:
        smap = saliency_maps[triplet.id]
        vals = smap.values if hasattr(smap, "values") else np.asarray(smap)
        probe = man.load_image(triplet.probe)
        inpainted = man.load_image(triplet.inpainted_probe)
        gt = man.load_mask(triplet.mask)
        ctx = (contexts or {}).get(triplet.id) or triplet_context(net, man, triplet)

        masks = vals[None, :, :] >= thresholds[:, None, None]     # (T, H, W)
        outside = ~gt
        salient_outside += (masks & outside[None]).sum(axis=(1, 2))
        outside_total += int(outside.sum())

        blends = np.where(masks[:, None, :, :], inpainted[None], probe[None])
        embs = netcore.embed_batch(net, blends.astype(np.float32))
        d_mate = ((embs - ctx.mate_gallery[None]) ** 2).sum(axis=1)
        d_non = ((embs - ctx.nonmate_gallery[None]) ** 2).sum(axis=1)
        flips[triplet.region] += (d_non < d_mate).astype(np.int64)
        counts[triplet.region] += 1

    fpr = salient_outside / max(outside_total, 1)
    present = [r for r in REGIONS if counts[r] > 0]
    region_rates = {r: flips[r] / counts[r] for r in present}
    macro = (np.mean([region_rates[r] for r in present], axis=0)
             if present else np.zeros(n_t))
    total = sum(counts.values())
    micro = sum(flips[r] for r in present) / max(total, 1)
    return EvalCurve(thresholds, fpr, macro, micro, region_rates, counts)


def operating_points(curve, fprs=DEFAULT_OPERATING_FPRS):
    """Linear interpolation of flip rates at the requested pixel FPRs.
    FPRs outside the curve's range are clamped with a warning."""
    if curve.thresholds.size == 0:
        raise ValueError("empty curve")
    order = np.argsort(curve.fpr, kind="stable")
    xs = curve.fpr[order]
    out = {}
    for f in fprs:
        if f < xs[0] or f > xs[-1]:
            warnings.warn(f"operating FPR {f} outside curve range; clamped")
        entry = {
            "macro": float(np.interp(f, xs, curve.macro_rate[order])),
            "micro": float(np.interp(f, xs, curve.micro_rate[order])),
            "regions": {r: float(np.interp(f, xs, curve.region_rates[r][order]))
                        for r in curve.region_rates},
        }
        out[float(f)] = entry
    return out
