"""Command-line entry point wiring generation, training, calibration,
filtering, attribution, evaluation and reporting into reproducible runs.

Every subcommand writes a run.json record (full config + seed) into its
output directory; all randomness is surfaced as an explicit --seed."""

from __future__ import annotations

import argparse
import json
import os
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from facelens import attribution, dise, game, netcore, report, saliency_io, subtree, training
from facelens.manifest import REGIONS, DatasetManifest
from facelens.synth import RenderConfig, generate_dataset

METHODS = ("ebp", "cebp", "tcebp", "subtree", "dise", "random")

# alpha large enough that the hinge is active for every kept triplet
# (squared distances on unit embeddings never exceed 4), so gradient
# methods always have an explanation signal
DEFAULT_METHOD_ALPHA = 5.0

ENV_DATASET = "FACELENS_DATASET"
ENV_WEIGHTS = "FACELENS_WEIGHTS"


def _atomic_write_text(path, text):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_run_record(out_dir, command, config):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(out_dir / "run.json",
                       json.dumps({"command": command, "config": config},
                                  indent=2, sort_keys=True))


def _require(path, what):
    if path is None:
        raise SystemExit(f"error: {what} not given (flag or environment variable)")
    path = Path(path)
    if not path.exists():
        raise SystemExit(f"error: {what} {path} does not exist")
    return path


def _load_manifest(args):
    dataset = _require(args.dataset, "dataset directory")
    manifest_path = Path(args.manifest) if getattr(args, "manifest", None) \
        else dataset / "manifest.jsonl"
    if not manifest_path.exists():
        raise SystemExit(f"error: manifest {manifest_path} does not exist")
    return DatasetManifest.load(manifest_path, root=dataset)


def _load_net(args):
    weights = _require(args.weights, "weights file")
    return netcore.load_weights(weights)


def _triplet_seed(seed, triplet_id):
    return (int(seed) * 1000003 + zlib.crc32(triplet_id.encode())) % (2 ** 31)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args):
    config = RenderConfig(
        seed=args.seed,
        train_identities=args.train_identities,
        calibration_identities=args.calibration_identities,
        eval_identities=args.eval_identities,
        doppelganger_distance=args.doppelganger_distance,
    )
    man = generate_dataset(config, args.out)
    _write_run_record(args.out, "synth", asdict(config))
    print(f"wrote {len(man.images)} images, {len(man.triplets)} candidate triplets "
          f"to {args.out}")
    return 0


def cmd_train(args):
    man = _load_manifest(args)
    config = training.TrainConfig(epochs=args.epochs, lr=args.lr, seed=args.seed)
    net = training.train_matcher(man, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    netcore.save_weights(net, out)
    _write_run_record(out.parent, "train", {**asdict(config), "out": str(out)})
    print(f"wrote weights to {out}")
    return 0


def cmd_calibrate(args):
    man = _load_manifest(args)
    net = _load_net(args)
    scores = game.impostor_scores(net, man, split="calibration")
    threshold = game.calibrate_verification_threshold(scores, args.far)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    record = {"threshold": threshold, "far": args.far, "impostor_pairs": int(scores.size)}
    _atomic_write_text(out, json.dumps(record, indent=2, sort_keys=True))
    _write_run_record(out.parent, "calibrate", record)
    print(f"threshold {threshold:.6f} at far {args.far} "
          f"from {scores.size} impostor pairs")
    return 0


def cmd_filter(args):
    man = _load_manifest(args)
    net = _load_net(args)
    with open(_require(args.calibration, "calibration record")) as f:
        threshold = json.load(f)["threshold"]
    filtered, stats = game.filter_triplets(man, net, threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    filtered.save(out)
    _write_run_record(out.parent, "filter", {"threshold": threshold, "stats": stats})
    total_kept = sum(s["kept"] for s in stats.values())
    total = total_kept + sum(s["dropped"] for s in stats.values())
    for region in REGIONS:
        s = stats[region]
        print(f"{region:>12}: kept {s['kept']:3d} dropped {s['dropped']:3d}")
    print(f"kept {total_kept} of {total} triplets -> {out}")
    return 0


def _compute_saliency(net, man, triplet, method, args, seed):
    ctx = game.triplet_context(net, man, triplet)
    m, n = ctx.mate_gallery, ctx.nonmate_gallery
    if method == "random":
        rng = np.random.default_rng(seed)
        vals = rng.random((attribution.MAP_SIZE, attribution.MAP_SIZE)).astype(np.float32)
        smap = attribution.SaliencyMap(vals, "raw-probability", method="random",
                                       params={"seed": seed})
        return smap.max_normalized()
    probe = man.load_image(triplet.probe)
    if method == "dise":
        spec = dise.MaskSpec(elements=args.dise_elements, fill=args.dise_fill)
        return dise.dise(net, probe, m, n, alpha=args.alpha, spec=spec,
                         count=args.dise_count, seed=seed,
                         orientation=args.dise_orientation)
    _, trace = netcore.forward(net, probe)
    if method == "ebp":
        return attribution.ebp(net, trace, attribution.ebp_prior_triplet(m, n))
    if method == "cebp":
        return attribution.contrastive_ebp(net, trace, m, n)
    if method == "tcebp":
        return attribution.truncated_contrastive_ebp(net, trace, m, n, k=args.tcebp_k)
    if method == "subtree":
        return subtree.subtree_ebp(net, trace, m, n, alpha=args.alpha, k=args.subtree_k)
    raise SystemExit(f"error: unknown method {method!r}")


_WORKER = {}


def _worker_init(weights, manifest, dataset, args_dict):
    _WORKER["net"] = netcore.load_weights(weights)
    _WORKER["man"] = DatasetManifest.load(manifest, root=dataset)
    _WORKER["args"] = argparse.Namespace(**args_dict)


def _worker_run(job):
    triplet_id, method, seed, out_path = job
    man = _WORKER["man"]
    triplet = next(t for t in man.triplets if t.id == triplet_id)
    smap = _compute_saliency(_WORKER["net"], man, triplet, method, _WORKER["args"], seed)
    saliency_io.save_saliency(smap, out_path)
    return triplet_id


def cmd_saliency(args):
    man = _load_manifest(args)
    net = _load_net(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for triplet in man.triplets:
        seed = _triplet_seed(args.seed, triplet.id)
        out_path = out_dir / f"{triplet.id}__{args.method}.png"
        jobs.append((triplet.id, args.method, seed, out_path))
    if args.jobs > 1:
        manifest_path = Path(args.manifest) if args.manifest \
            else Path(args.dataset) / "manifest.jsonl"
        with ProcessPoolExecutor(
                max_workers=args.jobs, initializer=_worker_init,
                initargs=(str(args.weights), str(manifest_path),
                          str(args.dataset), vars(args))) as pool:
            list(pool.map(_worker_run, jobs))
    else:
        for triplet_id, method, seed, out_path in jobs:
            triplet = next(t for t in man.triplets if t.id == triplet_id)
            smap = _compute_saliency(net, man, triplet, method, args, seed)
            saliency_io.save_saliency(smap, out_path)
    _write_run_record(out_dir, "saliency",
                      {"method": args.method, "seed": args.seed,
                       "triplets": len(jobs), "jobs": args.jobs})
    print(f"wrote {len(jobs)} saliency maps to {out_dir}")
    return 0


def cmd_eval(args):
    man = _load_manifest(args)
    net = _load_net(args)
    sal_dir = _require(args.saliency, "saliency directory")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    methods = args.methods.split(",")
    contexts = {t.id: game.triplet_context(net, man, t) for t in man.triplets}
    curves = {}
    for method in methods:
        maps = {}
        for triplet in man.triplets:
            path = sal_dir / f"{triplet.id}__{method}.png"
            if not path.exists():
                raise SystemExit(f"error: missing saliency map {path}")
            maps[triplet.id] = saliency_io.load_saliency(path)
        curve = game.evaluate(maps, man, net, contexts=contexts)
        curve.to_csv(out_dir / f"curve_{method}.csv")
        curves[method] = curve

    fprs = [float(v) for v in args.fprs.split(",")]
    rows = []
    for method in methods:
        points = game.operating_points(curves[method], fprs)
        for f in fprs:
            entry = points[float(f)]
            rows.append([method, f"{f:g}", f"{entry['macro']:.6f}", f"{entry['micro']:.6f}"]
                        + [f"{entry['regions'].get(r, float('nan')):.6f}" for r in REGIONS])
    header = ["method", "fpr", "macro_rate", "micro_rate"] + [f"rate_{r}" for r in REGIONS]
    lines = [",".join(header)] + [",".join(r) for r in rows]
    _atomic_write_text(out_dir / "operating_points.csv", "\n".join(lines) + "\n")
    report.plot_curves(curves, out_dir / "curves.png")
    _write_run_record(out_dir, "eval",
                      {"methods": methods, "fprs": fprs, "saliency": str(sal_dir),
                       "triplets": len(man.triplets)})
    print(f"wrote curves and operating points to {out_dir}")
    return 0


def cmd_montage(args):
    man = _load_manifest(args)
    sal_dir = _require(args.saliency, "saliency directory")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    methods = args.methods.split(",")
    cells, titles = [], []
    for triplet in man.triplets[:args.limit]:
        probe = man.load_image(triplet.probe)
        cells.append(probe.transpose(1, 2, 0))
        titles.append(triplet.id)
        for method in methods:
            path = sal_dir / f"{triplet.id}__{method}.png"
            if not path.exists():
                raise SystemExit(f"error: missing saliency map {path}")
            smap = saliency_io.load_saliency(path)
            cells.append(report.saliency_overlay(probe, smap.values))
            titles.append(method)
    out_path = out_dir / "montage.png"
    report.montage(cells, out_path, n_cols=len(methods) + 1, cell_titles=titles)
    _write_run_record(out_dir, "montage",
                      {"methods": methods, "limit": args.limit})
    print(f"wrote {out_path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="facelens")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_dataset(p, manifest=True):
        p.add_argument("--dataset", default=os.environ.get(ENV_DATASET),
                       help="dataset directory (env FACELENS_DATASET)")
        if manifest:
            p.add_argument("--manifest", default=None,
                           help="manifest path (default: <dataset>/manifest.jsonl)")

    def add_weights(p):
        p.add_argument("--weights", default=os.environ.get(ENV_WEIGHTS),
                       help="weights file (env FACELENS_WEIGHTS)")

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--train-identities", type=int, default=200)
    p.add_argument("--calibration-identities", type=int, default=200)
    p.add_argument("--eval-identities", type=int, default=24)
    p.add_argument("--doppelganger-distance", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the reference matcher")
    add_dataset(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.05)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="calibrate the verification threshold")
    add_dataset(p)
    add_weights(p)
    p.add_argument("--far", type=float, default=1e-4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("filter", help="filter triplets the matcher can discriminate")
    add_dataset(p)
    add_weights(p)
    p.add_argument("--calibration", required=True, help="calibrate output json")
    p.add_argument("--out", required=True, help="filtered manifest path")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("saliency", help="compute saliency maps for kept triplets")
    add_dataset(p)
    add_weights(p)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--alpha", type=float, default=DEFAULT_METHOD_ALPHA)
    p.add_argument("--subtree-k", type=int, default=27)
    p.add_argument("--tcebp-k", type=float, default=50.0)
    p.add_argument("--dise-count", type=int, default=2000)
    p.add_argument("--dise-elements", type=int, default=2)
    p.add_argument("--dise-fill", choices=("blur", "gray"), default="blur")
    p.add_argument("--dise-orientation", choices=("drop", "raise"), default="drop")
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("eval", help="run the threshold sweep and emit curves")
    add_dataset(p)
    add_weights(p)
    p.add_argument("--saliency", type=Path, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--methods", default="ebp")
    p.add_argument("--fprs", default="1e-2,5e-2")
    p.add_argument("--jobs", type=int, default=1)  # accepted for symmetry; eval is order-independent
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("montage", help="probe x saliency overlay grids")
    add_dataset(p)
    p.add_argument("--saliency", type=Path, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--methods", default="ebp")
    p.add_argument("--limit", type=int, default=8)
    p.set_defaults(func=cmd_montage)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except Exception as e:  # surface failures with a nonzero exit code
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
