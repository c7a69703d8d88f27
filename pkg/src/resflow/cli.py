"""Command-line front end.

Commands operate on a workspace directory with a fixed layout:

    <ws>/scenes/      scene rasters, truth masks, manifest.txt, gen_records.json
    <ws>/partition/   hash.hsh1, centroids.txt, image_gallery.igal, bucket_counts.txt
    <ws>/models/      model_gallery.mgal plus per-bucket artifacts
    <ws>/<out>/       masks, bucket sidecars, metrics.json (infer; default "infer")

Exit codes: 0 success, 2 config error, 3 data error, 4 pipeline error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, emit_config, load_config
from .embedding import (
    ClusterError,
    FeatureConfig,
    extract_features,
    fit_clusters,
    intra_cluster_variance,
    select_bucket_count,
)
from .executor import (
    DeviceCostModel,
    ExecutorConfig,
    PipelineAssets,
    PipelineError,
    make_virtual_scenes,
    run_pipeline,
)
from .gallery import (
    GalleryError,
    GalleryRecord,
    ImageGallery,
    ModelGallery,
    ModelRecord,
)
from .hashing import (
    CentroidTable,
    HashError,
    assign_bucket,
    bucket_centroids,
    encode_many,
    fit_hash,
    load_hash,
    save_hash,
)
from .models import (
    ModelError,
    TrainConfig,
    load_model,
    save_model,
    seg_metrics,
    train_bucket_model,
)
from .pool import DevicePool, PoolError
from .raster import (
    Mask,
    RasterError,
    ReadLedger,
    SceneCatalog,
    load_scene_header,
    read_window,
    tile_extents,
    write_bucket_sidecar,
    write_mask,
)
from .synth import generate_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_PIPELINE = 4


def _ws_paths(workspace) -> dict[str, Path]:
    ws = Path(workspace)
    return {
        "root": ws,
        "scenes": ws / "scenes",
        "manifest": ws / "scenes" / "manifest.txt",
        "partition": ws / "partition",
        "hash": ws / "partition" / "hash.hsh1",
        "centroids": ws / "partition" / "centroids.txt",
        "gallery": ws / "partition" / "image_gallery.igal",
        "counts": ws / "partition" / "bucket_counts.txt",
        "models": ws / "models",
        "model_gallery": ws / "models" / "model_gallery.mgal",
    }


def _cost_model(config: RunConfig) -> DeviceCostModel:
    return DeviceCostModel(
        base_ms=config.cost_base_ms,
        ms_per_megapixel=config.cost_ms_per_megapixel,
        io_ms_per_megabyte=config.cost_io_ms_per_megabyte,
    )


def _executor_config(config: RunConfig, pool: DevicePool, workers: int | None = None) -> ExecutorConfig:
    return ExecutorConfig(
        pool=pool,
        workers=workers if workers is not None else config.workers,
        batch=config.batch,
        tile_px=config.tile_px,
        overlap_px=config.overlap_px,
        simulate=config.simulate,
        cost_model=_cost_model(config),
        task=config.task,
        scheduler_seed=config.seed,
        ticket_timeout_s=config.ticket_timeout_s,
        sim_buckets=max(config.distributions, 1),
    )


def _scan_embeddings(catalog, config: RunConfig, stage: str):
    """Row-major descriptor pass over every tile of every scene."""
    feat = FeatureConfig(dim=config.feature_dim)
    ledger = ReadLedger()
    keys, rows = [], []
    for scene in catalog:
        for ext in tile_extents(scene, config.tile_px, config.overlap_px):
            tile = read_window(scene, ext, ledger, stage)
            keys.append((scene, ext))
            rows.append(extract_features(tile, feat))
    return keys, np.array(rows)


def cmd_synth(config: RunConfig, workspace) -> int:
    paths = _ws_paths(workspace)
    dataset = generate_dataset(paths["scenes"], config)
    print(f"wrote {len(dataset.scene_paths)} scenes to {dataset.out_dir}")
    print(f"manifest: {dataset.manifest_path}")
    return EXIT_OK


def cmd_partition(config: RunConfig, workspace, dump_embeddings=None) -> int:
    paths = _ws_paths(workspace)
    catalog = SceneCatalog.from_manifest(paths["manifest"])
    keys, embeddings = _scan_embeddings(catalog, config, stage="partition")
    if dump_embeddings:
        with open(dump_embeddings, "w", encoding="ascii") as f:
            dim = embeddings.shape[1]
            f.write("scene_id,x0,y0," + ",".join(f"v{i + 1}" for i in range(dim)) + "\n")
            for (scene, ext), row in zip(keys, embeddings):
                f.write(f"{scene.scene_id},{ext.x0},{ext.y0}," + ",".join(repr(v) for v in row) + "\n")

    if config.k > 0:
        k = config.k
    else:
        k_hi = min(config.k_max, len(embeddings))
        k = select_bucket_count(
            embeddings,
            range(config.k_min, k_hi + 1),
            method=config.cluster_method,
            seed=config.seed,
        )
    clusters = fit_clusters(embeddings, k, method=config.cluster_method, seed=config.seed)
    vk = intra_cluster_variance(clusters, embeddings)
    min_d2 = min(
        float(((clusters.centroids[i] - clusters.centroids[j]) ** 2).sum())
        for i in range(k)
        for j in range(i + 1, k)
    ) if k > 1 else float("inf")
    # Well-separated buckets keep centroids far apart relative to their spread.
    if min_d2 < 100.0 * max(vk, 1e-12):
        print(
            f"warning: weak cluster separation "
            f"(min centroid distance^2 {min_d2:.4g} vs within-variance {vk:.4g})",
            file=sys.stderr,
        )

    hash_fn = fit_hash(embeddings, clusters.labels, config.n_bits, seed=config.seed)
    codes = encode_many(hash_fn, embeddings)
    table = bucket_centroids(codes, clusters.labels)

    paths["partition"].mkdir(parents=True, exist_ok=True)
    save_hash(paths["hash"], hash_fn)
    table.save(paths["centroids"])
    if paths["gallery"].exists():
        paths["gallery"].unlink()
    counts: dict[int, int] = {bid: 0 for bid, _ in table.items()}
    with ImageGallery(paths["gallery"], n_bits=config.n_bits, centroids=table) as gallery:
        for (scene, ext), code in zip(keys, codes):
            bucket = assign_bucket(code, table)
            counts[bucket] += 1
            gallery.insert(
                GalleryRecord(
                    code=code,
                    bucket_id=bucket,
                    scene_id=scene.scene_id,
                    extent=ext,
                    storage_path=scene.path,
                )
            )
    lines = [f"{bid} {counts[bid]}\n" for bid, _ in table.items()]
    paths["counts"].write_text("".join(lines), encoding="ascii")
    print(f"partitioned {len(keys)} tiles into {len(table)} buckets:")
    for bid, _ in table.items():
        print(f"  bucket {bid}: {counts[bid]} tiles")
    return EXIT_OK


def _truth_ref(paths, scene):
    return load_scene_header(paths["scenes"] / f"{scene.scene_id}.truth.rsr")


def cmd_train(config: RunConfig, workspace) -> int:
    paths = _ws_paths(workspace)
    catalog = SceneCatalog.from_manifest(paths["manifest"])
    table = CentroidTable.load(paths["centroids"])
    paths["models"].mkdir(parents=True, exist_ok=True)
    ledger = ReadLedger()
    truth_refs = {s.scene_id: _truth_ref(paths, s) for s in catalog}
    with ImageGallery(paths["gallery"], centroids=table) as gallery, ModelGallery(
        paths["model_gallery"], table
    ) as registry:
        for bucket_id, centroid in table.items():
            records = gallery.query_by_bucket(bucket_id)
            if not records:
                print(f"warning: bucket {bucket_id} has no tiles; skipped", file=sys.stderr)
                continue
            samples = []
            for r in records:
                scene = catalog.get(r.scene_id)
                tile = read_window(scene, r.extent, ledger, "train")
                truth = truth_refs[r.scene_id]
                t_ext = replace(r.extent, scene_id=truth.scene_id)
                truth_tile = read_window(truth, t_ext, ledger, "train")
                samples.append(
                    (tile, Mask(w=r.extent.w, h=r.extent.h, labels=truth_tile.pixels[:, :, 0]))
                )
            if len(samples) >= 8:
                val = samples[::4]
                train = [s for i, s in enumerate(samples) if i % 4 != 0]
            else:
                val = samples
                train = samples
            try:
                model = train_bucket_model(train, TrainConfig(seed=config.seed))
            except ModelError as e:
                print(f"warning: bucket {bucket_id} skipped: {e}", file=sys.stderr)
                continue
            tp = fp = fn = 0
            for tile, truth_mask in val:
                m = seg_metrics(model.infer(tile), truth_mask)
                tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
            f1 = 1.0 if (2 * tp + fp + fn) == 0 else 2 * tp / (2 * tp + fp + fn)
            version = registry.next_version(centroid, config.task)
            artifact = paths["models"] / f"{config.task}_b{bucket_id}_v{version}.lpm1"
            save_model(artifact, model)
            registry.register(
                ModelRecord(
                    bucket_code=centroid,
                    task=config.task,
                    version=version,
                    artifact_path=str(artifact),
                    train_stats={"samples": len(train), "f1": f1},
                )
            )
            print(f"bucket {bucket_id}: version {version}, {len(train)} tiles, val F1 {f1:.4f}")
    return EXIT_OK


def cmd_infer(config: RunConfig, workspace, out_name="infer", event_log=None, workers=None) -> int:
    paths = _ws_paths(workspace)
    catalog = SceneCatalog.from_manifest(paths["manifest"])
    scenes = list(catalog)
    table = CentroidTable.load(paths["centroids"])
    hash_fn = load_hash(paths["hash"])
    out_dir = paths["root"] / out_name
    out_dir.mkdir(parents=True, exist_ok=True)
    run_gallery_path = out_dir / "image_gallery.igal"
    if run_gallery_path.exists():
        run_gallery_path.unlink()
    pool = DevicePool(config.devices, config.tickets_per_device)
    ledger = ReadLedger()
    with ModelGallery(paths["model_gallery"], table) as registry, ImageGallery(
        run_gallery_path, n_bits=config.n_bits, centroids=table
    ) as run_gallery:
        assets = PipelineAssets(
            hash_fn=hash_fn,
            centroids=table,
            model_gallery=registry,
            image_gallery=run_gallery,
            feature_config=FeatureConfig(dim=config.feature_dim),
        )
        result = run_pipeline(scenes, _executor_config(config, pool, workers), assets, ledger)
    centroid_hex = {bid: code.to_hex() for bid, code in table.items()}
    for scene in scenes:
        if scene.scene_id not in result.masks:
            continue
        mask = result.masks[scene.scene_id]
        write_mask(out_dir / f"{scene.scene_id}.mask.rsr", mask, scene.gsd_m, scene.scene_id)
        entries = [(ext, centroid_hex[bucket]) for ext, bucket in mask.provenance.items()]
        write_bucket_sidecar(out_dir / f"{scene.scene_id}.buckets.txt", entries)
    metrics = result.metrics.finalize(config.baseline_s_per_scene)
    (out_dir / "metrics.json").write_text(metrics.to_json(), encoding="ascii")
    if event_log:
        pool.write_event_log(event_log)
    for scene_id, problems in sorted(result.failures.items()):
        for p in problems:
            print(f"warning: scene {scene_id}: {p}", file=sys.stderr)
    print(f"wrote {len(result.masks)} masks and metrics.json to {out_dir}")
    return EXIT_OK


BENCH_COLUMNS = [
    "workers",
    "scenes",
    "gb",
    "sqkm",
    "wall_s",
    "speedup",
    "sqkm_per_s",
    "gb_per_s",
    "images_per_s",
    "per_day",
]


def cmd_bench(config: RunConfig, workspace, workers_list, scene_counts, out_path=None) -> int:
    if not workers_list or not scene_counts:
        raise ConfigError("bench sweep must list at least one workers and scenes value")
    paths = _ws_paths(workspace)
    out_path = Path(out_path) if out_path else paths["root"] / "bench.csv"
    assets = None
    all_scenes = None
    if not config.simulate:
        catalog = SceneCatalog.from_manifest(paths["manifest"])
        all_scenes = list(catalog)
        table = CentroidTable.load(paths["centroids"])
        assets = PipelineAssets(
            hash_fn=load_hash(paths["hash"]),
            centroids=table,
            model_gallery=ModelGallery(paths["model_gallery"], table),
            image_gallery=None,
            feature_config=FeatureConfig(dim=config.feature_dim),
        )
    rows = []
    for n_scenes in scene_counts:
        if config.simulate:
            scenes = make_virtual_scenes(n_scenes, config.scene_px, config.scene_px, gsd_m=config.gsd_m)
        else:
            if n_scenes > len(all_scenes):
                raise ConfigError(f"manifest has {len(all_scenes)} scenes, sweep asks for {n_scenes}")
            scenes = all_scenes[:n_scenes]
        for workers in workers_list:
            pool = DevicePool(config.devices, config.tickets_per_device)
            result = run_pipeline(scenes, _executor_config(config, pool, workers), assets)
            m = result.metrics.finalize(config.baseline_s_per_scene)
            rows.append(
                {
                    "workers": workers,
                    "scenes": n_scenes,
                    "gb": m.bytes_read / 1e9,
                    "sqkm": m.area_sqkm,
                    "wall_s": m.wall_s,
                    "speedup": m.speedup,
                    "sqkm_per_s": m.sqkm_per_s,
                    "gb_per_s": m.gb_per_s,
                    "images_per_s": m.images_per_s,
                    "per_day": m.sqkm_per_s * 86_400.0,
                }
            )
    with open(out_path, "w", newline="", encoding="ascii") as f:
        writer = csv.DictWriter(f, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} bench rows to {out_path}")
    return EXIT_OK


def cmd_report(metrics_path) -> int:
    metrics_path = Path(metrics_path)
    if not metrics_path.exists():
        raise FileNotFoundError(f"metrics file not found: {metrics_path}")
    data = json.loads(metrics_path.read_text(encoding="ascii"))
    day = 86_400.0
    print(f"{'':28s}{'per second':>16s}{'per day':>18s}")
    print(f"{'area mapped (sq.km)':28s}{data['sqkm_per_s']:16.4f}{data['sqkm_per_s'] * day:18.1f}")
    print(f"{'number of images':28s}{data['images_per_s']:16.4f}{data['images_per_s'] * day:18.1f}")
    print(f"{'total image data (GB)':28s}{data['gb_per_s']:16.4f}{data['gb_per_s'] * day:18.1f}")
    print(f"speedup over baseline: {data['speedup']:.2f}x")
    print(f"wall seconds: {data['wall_s']:.3f} over {data['scenes']} scenes, {data['tiles']} tiles")
    return EXIT_OK


def _int_list(raw: str) -> list[int]:
    try:
        return [int(v) for v in raw.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", help="config file (key = value lines)")
        p.add_argument("-w", "--workspace", default="workspace", help="workspace directory")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config key",
        )

    p = sub.add_parser("synth", help="generate seeded synthetic scenes and truth masks")
    common(p)
    p = sub.add_parser("partition", help="embed tiles, fit hash and buckets, build the gallery")
    common(p)
    p.add_argument("--dump-embeddings", help="also write embeddings as CSV")
    p = sub.add_parser("train", help="train and register one model per bucket")
    common(p)
    p = sub.add_parser("infer", help="run the full pipeline and write masks + metrics")
    common(p)
    p.add_argument("--out", default="infer", help="output subdirectory name")
    p.add_argument("--event-log", help="write the ticket event log here")
    p.add_argument("--workers", type=int, help="override config workers")
    p = sub.add_parser("bench", help="sweep workers and scene counts, write CSV")
    common(p)
    p.add_argument("--workers-list", default="1,2,4,8", help="comma-separated worker counts")
    p.add_argument("--scene-counts", default="1,12", help="comma-separated scene counts")
    p.add_argument("--out", help="CSV output path")
    p = sub.add_parser("report", help="print throughput arithmetic from a metrics file")
    common(p)
    p.add_argument("--metrics", help="metrics.json path (default <ws>/infer/metrics.json)")
    p = sub.add_parser("config", help="print the effective configuration")
    common(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config, args.overrides)
        if args.command == "synth":
            return cmd_synth(config, args.workspace)
        if args.command == "partition":
            return cmd_partition(config, args.workspace, dump_embeddings=args.dump_embeddings)
        if args.command == "train":
            return cmd_train(config, args.workspace)
        if args.command == "infer":
            return cmd_infer(
                config,
                args.workspace,
                out_name=args.out,
                event_log=args.event_log,
                workers=args.workers,
            )
        if args.command == "bench":
            return cmd_bench(
                config,
                args.workspace,
                _int_list(args.workers_list),
                _int_list(args.scene_counts),
                out_path=args.out,
            )
        if args.command == "report":
            metrics = args.metrics or Path(args.workspace) / "infer" / "metrics.json"
            return cmd_report(metrics)
        if args.command == "config":
            sys.stdout.write(emit_config(config))
            return EXIT_OK
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, OSError, json.JSONDecodeError, RasterError, GalleryError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (PipelineError, PoolError, HashError, ClusterError, ModelError, LookupError) as e:
        print(f"pipeline error: {e}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
