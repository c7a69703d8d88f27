import numpy as np
import pytest

from resflow.embedding import FeatureConfig, extract_features, fit_clusters
from resflow.executor import (
    DeviceCostModel,
    ExecutorConfig,
    PipelineAssets,
    PipelineError,
    RunMetrics,
    area_rate,
    compute_speedup,
    group_by_scene,
    make_virtual_scenes,
    predicted_wall_s,
    run_pipeline,
)
from resflow.gallery import ImageGallery, ModelGallery, ModelRecord
from resflow.hashing import bucket_centroids, encode_many, fit_hash
from resflow.models import save_model, train_bucket_model
from resflow.pool import DevicePool
from resflow.raster import (
    Mask,
    ReadLedger,
    TileExtent,
    read_window,
    tile_extents,
    write_scene,
)
from resflow.synth import make_texture_tiles

from conftest import make_mask


class TestSpeedupArithmetic:
    def test_table_cell_nine_x(self):
        m = RunMetrics(wall_s=3.81 * 60, scenes=1)
        assert compute_speedup(m, 35 * 60) == pytest.approx(9.19, abs=0.01)

    def test_unit_speedup(self):
        m = RunMetrics(wall_s=4200.0, scenes=2)
        assert compute_speedup(m, 2100.0) == 1.0

    def test_twelve_scene_cell(self):
        m = RunMetrics(wall_s=7.73 * 60, scenes=12)
        assert compute_speedup(m, 35 * 60) == pytest.approx(54.3, abs=0.05)

    def test_zero_wall_time(self):
        with pytest.raises(PipelineError):
            compute_speedup(RunMetrics(wall_s=0.0, scenes=1), 2100.0)


class TestAreaRate:
    def test_published_relation(self):
        m = RunMetrics(wall_s=1.0, area_sqkm=5.245)
        rate, per_day = area_rate(m)
        assert rate == pytest.approx(5.245)
        assert per_day == pytest.approx(453_168.0, abs=1.0)

    def test_small_example(self):
        m = RunMetrics(wall_s=1.0, area_sqkm=0.25)
        assert area_rate(m)[1] == pytest.approx(21_600.0)

    def test_inverse_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m = RunMetrics(wall_s=float(rng.uniform(0.1, 50)), area_sqkm=float(rng.uniform(0.1, 500)))
            rate, per_day = area_rate(m)
            assert per_day / 86_400.0 == pytest.approx(rate)


class TestGroupByScene:
    def test_empty(self):
        assert group_by_scene([]) == {}

    def test_two_scenes_sorted(self):
        tiles = []
        for sid in ("b", "a"):
            for y in (32, 0):
                for x in (32, 0):
                    ext = TileExtent(sid, x, y, 32, 32)
                    tiles.append((sid, ext, make_mask(np.zeros((32, 32)))))
        grouped = group_by_scene(tiles)
        assert set(grouped) == {"a", "b"}
        for sid in grouped:
            keys = [(e.y0, e.x0) for e, _ in grouped[sid]]
            assert keys == [(0, 0), (0, 32), (32, 0), (32, 32)]

    def test_arrival_order_independent(self):
        rng = np.random.default_rng(1)
        tiles = []
        for sid in ("s0", "s1", "s2"):
            for i in range(40):
                ext = TileExtent(sid, (i % 8) * 10, (i // 8) * 10, 10, 10)
                tiles.append((sid, ext, make_mask(np.full((10, 10), i % 5))))
        reference = group_by_scene(tiles)
        for _ in range(10):
            shuffled = list(tiles)
            rng.shuffle(shuffled)
            got = group_by_scene(shuffled)
            assert list(got) != [] and all(
                [e for e, _ in got[s]] == [e for e, _ in reference[s]] for s in reference
            )


def build_assets(tmp_path, tiles, labels, task="building", skip_bucket=None):
    """Fit hash + centroids + per-bucket models from labeled tiles."""
    embeddings = np.array([extract_features(t) for t in tiles])
    clusters = fit_clusters(embeddings, len(set(labels)), method="agglomerative", seed=0)
    hash_fn = fit_hash(embeddings, clusters.labels, 32, seed=0)
    codes = encode_many(hash_fn, embeddings)
    table = bucket_centroids(codes, clusters.labels)
    registry = ModelGallery(tmp_path / "m.mgal", table)
    for bucket_id, centroid in table.items():
        if bucket_id == skip_bucket:
            continue
        members = [t for t, c in zip(tiles, clusters.labels) if c == bucket_id]
        samples = []
        for t in members:
            truth = (t.pixels.astype(np.float64).mean(axis=2) > t.pixels.mean() + 25).astype(np.uint8)
            samples.append((t, Mask(w=t.extent.w, h=t.extent.h, labels=truth)))
        if not any(s[1].labels.any() for s in samples):
            samples[0][1].labels[0, 0] = 1
        model = train_bucket_model(samples)
        artifact = tmp_path / f"b{bucket_id}.lpm1"
        save_model(artifact, model)
        registry.register(ModelRecord(centroid, task, 0, str(artifact), {"f1": 1.0}))
    return hash_fn, table, registry


def write_synthetic_scene(tmp_path, scene_id, px=128, seed=0):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 255, size=(px, px, 3), dtype=np.uint8)
    return write_scene(tmp_path / f"{scene_id}.rsr", pixels, 0.5, scene_id)


@pytest.fixture
def real_setup(tmp_path):
    tiles, labels = make_texture_tiles(3, 30, tile_px=32, seed=4, with_buildings=True)
    hash_fn, table, registry = build_assets(tmp_path, tiles, labels)
    scenes = [write_synthetic_scene(tmp_path, f"s{i}", px=128, seed=i) for i in range(3)]
    return hash_fn, table, registry, scenes


def run_once(tmp_path, hash_fn, table, registry, scenes, workers, seed=0, gallery_name=None):
    gallery = None
    if gallery_name is not None:
        path = tmp_path / gallery_name
        if path.exists():
            path.unlink()
        gallery = ImageGallery(path, n_bits=32, centroids=table)
    assets = PipelineAssets(
        hash_fn=hash_fn,
        centroids=table,
        model_gallery=registry,
        image_gallery=gallery,
        feature_config=FeatureConfig(),
    )
    pool = DevicePool(4, 2)
    config = ExecutorConfig(
        pool=pool, workers=workers, batch=3, tile_px=64, scheduler_seed=seed
    )
    out = run_pipeline(scenes, config, assets, ReadLedger())
    if gallery is not None:
        gallery.close()
    return out


class TestRunPipelineReal:
    def test_read_twice_and_shapes(self, tmp_path, real_setup):
        hash_fn, table, registry, scenes = real_setup
        out = run_once(tmp_path, hash_fn, table, registry, scenes, workers=1)
        assert set(out.metrics.reads_per_scene.values()) == {2.0}
        for scene in scenes:
            mask = out.masks[scene.scene_id]
            assert (mask.w, mask.h) == (scene.width_px, scene.height_px)
            assert len(mask.provenance) == 4  # 128 px scene in 64 px tiles
        assert out.metrics.tiles == 12
        assert not out.failures

    def test_schedule_independence(self, tmp_path, real_setup):
        hash_fn, table, registry, scenes = real_setup
        reference = run_once(
            tmp_path, hash_fn, table, registry, scenes, workers=1, gallery_name="ref.igal"
        )
        ref_bytes = (tmp_path / "ref.igal").read_bytes()
        for workers, seed in [(4, 1), (8, 2), (8, 3)]:
            out = run_once(
                tmp_path, hash_fn, table, registry, scenes,
                workers=workers, seed=seed, gallery_name="run.igal",
            )
            for scene in scenes:
                assert np.array_equal(
                    out.masks[scene.scene_id].labels,
                    reference.masks[scene.scene_id].labels,
                )
                assert (
                    out.masks[scene.scene_id].provenance
                    == reference.masks[scene.scene_id].provenance
                )
            assert (tmp_path / "run.igal").read_bytes() == ref_bytes

    def test_model_gap_fails_partition_not_run(self, tmp_path):
        tiles, labels = make_texture_tiles(3, 30, tile_px=32, seed=4, with_buildings=True)
        hash_fn, table, registry = build_assets(tmp_path, tiles, labels, skip_bucket=1)
        scenes = [write_synthetic_scene(tmp_path, f"s{i}", px=128, seed=i) for i in range(3)]
        out = run_once(tmp_path, hash_fn, table, registry, scenes, workers=2)
        # every scene that hit bucket 1 is reported and unmerged; others merged
        assert out.failures
        for scene_id, problems in out.failures.items():
            assert scene_id not in out.masks
            assert any("model gap" in p for p in problems)
        for scene in scenes:
            assert scene.scene_id in out.masks or scene.scene_id in out.failures

    def test_requires_assets_in_real_mode(self):
        scenes = make_virtual_scenes(1, 64, 64)
        config = ExecutorConfig(pool=DevicePool(1, 1), workers=1, tile_px=32)
        with pytest.raises(PipelineError):
            run_pipeline(scenes, config)


class TestRunPipelineSimulate:
    def test_metrics_and_masks(self):
        scenes = make_virtual_scenes(2, 256, 256)
        config = ExecutorConfig(
            pool=DevicePool(2, 2),
            workers=4,
            batch=2,
            tile_px=64,
            simulate=True,
            cost_model=DeviceCostModel(base_ms=1.0, ms_per_megapixel=0.0),
        )
        out = run_pipeline(scenes, config)
        m = out.metrics
        assert m.scenes == 2 and m.tiles == 32
        assert set(m.reads_per_scene.values()) == {2.0}
        assert m.bytes_read == 2 * 2 * 256 * 256 * 3
        for mask in out.masks.values():
            assert (mask.labels == 0).all()
        assert m.wall_s > 0 and m.stage_a_s > 0 and m.stage_b_s > 0

    def test_scaling_matches_queue_model(self):
        # base 5 ms / 1 ms per megapixel, 12 scenes, sweep of worker counts
        cost = DeviceCostModel(base_ms=5.0, ms_per_megapixel=1.0)
        scenes = make_virtual_scenes(12, 400, 400)
        for workers in (1, 4, 8, 16):
            config = ExecutorConfig(
                pool=DevicePool(4, 2),
                workers=workers,
                batch=1,
                tile_px=100,
                simulate=True,
                cost_model=cost,
                scheduler_seed=workers,
            )
            m = run_pipeline(scenes, config).metrics
            pred = predicted_wall_s(
                scenes, cost, tile_px=100, workers=workers, tickets_total=8
            )
            assert abs(m.wall_s - pred) / pred <= 0.15

    def test_ticket_log_is_clean(self):
        scenes = make_virtual_scenes(3, 128, 128)
        pool = DevicePool(2, 2)
        config = ExecutorConfig(
            pool=pool, workers=8, batch=2, tile_px=32, simulate=True,
            cost_model=DeviceCostModel(base_ms=0.2, ms_per_megapixel=0.0),
        )
        run_pipeline(scenes, config)
        from resflow.pool import audit_events

        report = audit_events(pool.events, tickets_per_device=2)
        assert report.ok
