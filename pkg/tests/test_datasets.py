import numpy as np
import pytest

from icplab.datasets import (
    FactorDataset,
    FactorSpec,
    batch_at,
    batches,
    generate_synthetic,
    load_cache,
    load_dsprites,
    make_classification_set,
    recover_square_factors,
    rule_from_name,
    save_cache,
    DSPRITES_CARDINALITIES,
)
from icplab.errors import (
    ConfigurationError,
    ContractViolationError,
    GenerationError,
    IngestionError,
)

SMOKE = FactorSpec(factors=(("scale", 4), ("posX", 8), ("posY", 8)), image_size=(32, 32))


class TestFactorSpec:
    def test_cardinality_below_two_rejected(self):
        with pytest.raises(ConfigurationError):
            FactorSpec(factors=(("scale", 1),))

    def test_duplicate_names_rejected(self):
        with pytest.raises(ConfigurationError):
            FactorSpec(factors=(("posX", 4), ("posX", 4)))

    def test_combination_count(self):
        assert SMOKE.num_combinations == 4 * 8 * 8


class TestGenerateSynthetic:
    def test_exhaustive_product(self):
        ds = generate_synthetic(SMOKE)
        assert len(ds) == 256
        assert ds.images.shape == (256, 1, 32, 32)
        assert ds.factor_values.shape == (256, 3)
        combos = {tuple(r) for r in ds.factor_values.tolist()}
        assert len(combos) == 256

    def test_deterministic(self):
        a = generate_synthetic(SMOKE)
        b = generate_synthetic(SMOKE)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.factor_values, b.factor_values)

    def test_pixel_range(self):
        ds = generate_synthetic(SMOKE)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert ds.images.max() == 1.0  # sprites are white on black

    def test_posx_centroid_strictly_increasing(self):
        ds = generate_synthetic(SMOKE)
        ix = SMOKE.index_of("posX")
        cols = np.arange(32)[None, :]
        centroids = []
        for px in range(8):
            mask = ds.factor_values[:, ix] == px
            img = ds.images[mask][0, 0]
            centroids.append(float((img.sum(axis=0) * cols).sum() / img.sum()))
        assert all(a < b for a, b in zip(centroids, centroids[1:]))

    def test_factor_recovery_exact(self):
        ds = generate_synthetic(SMOKE)
        for i in range(0, len(ds), 17):
            rec = recover_square_factors(ds.images[i], SMOKE)
            expect = dict(zip(SMOKE.names, ds.factor_values[i].tolist()))
            assert rec == expect

    def test_unknown_factor_rejected(self):
        with pytest.raises(ConfigurationError):
            generate_synthetic(FactorSpec(factors=(("hue", 3),)))

    def test_out_of_frame_rejected(self):
        bad = FactorSpec(factors=(("scale", 12), ("posX", 16)), image_size=(32, 32))
        with pytest.raises(GenerationError):
            generate_synthetic(bad)

    def test_rotation_and_ellipse_render(self):
        spec = FactorSpec(
            factors=(("scale", 2), ("rotation", 4), ("posX", 2), ("posY", 2)),
            image_size=(32, 32),
            renderer="ellipse",
        )
        ds = generate_synthetic(spec)
        assert len(ds) == 2 * 4 * 2 * 2
        assert ds.images.max() <= 1.0 and ds.images.min() >= 0.0
        # Rotating an ellipse changes the image; rotation index is meaningful.
        base = ds.images[(ds.factor_values[:, 1] == 0).nonzero()[0][0]]
        rot = ds.images[(ds.factor_values[:, 1] == 1).nonzero()[0][0]]
        assert not np.array_equal(base, rot)

    def test_rotated_square_mass_approximately_preserved(self):
        spec = FactorSpec(factors=(("scale", 2), ("rotation", 8)), image_size=(32, 32))
        ds = generate_synthetic(spec)
        for s in range(2):
            masses = [img.sum() for img, f in zip(ds.images[:, 0], ds.factor_values) if f[0] == s]
            assert max(masses) / min(masses) < 1.05


class TestClassificationSet:
    def test_scale_mod_balanced(self):
        rule = rule_from_name("scale_mod", SMOKE, 4)
        ds = make_classification_set(SMOKE, 4, rule)
        counts = np.bincount(ds.labels)
        assert counts.tolist() == [64, 64, 64, 64]

    def test_quadrant_rule(self):
        rule = rule_from_name("quadrant", SMOKE, 4)
        ds = make_classification_set(SMOKE, 4, rule)
        assert set(ds.labels.tolist()) == {0, 1, 2, 3}
        assert np.bincount(ds.labels).tolist() == [64, 64, 64, 64]

    def test_single_class_rejected(self):
        with pytest.raises(ConfigurationError):
            make_classification_set(SMOKE, 1, lambda t: 0)

    def test_rule_out_of_range_rejected(self):
        with pytest.raises(ConfigurationError):
            make_classification_set(SMOKE, 2, lambda t: 5)

    def test_deterministic(self):
        rule = rule_from_name("posX_mod", SMOKE, 2)
        a = make_classification_set(SMOKE, 2, rule)
        b = make_classification_set(SMOKE, 2, rule)
        assert np.array_equal(a.labels, b.labels)

    def test_unknown_rule_rejected(self):
        with pytest.raises(ConfigurationError):
            rule_from_name("nope", SMOKE, 4)


class TestBatches:
    def test_batch_count(self):
        ds = generate_synthetic(SMOKE)
        got = list(batches(ds, 64, seed=0, epochs=1))
        assert len(got) == 4

    def test_same_seed_same_order(self):
        ds = generate_synthetic(SMOKE)
        a = [x for x, _ in batches(ds, 32, seed=5, epochs=2)]
        b = [x for x, _ in batches(ds, 32, seed=5, epochs=2)]
        for xa, xb in zip(a, b):
            assert np.array_equal(xa, xb)

    def test_self_supervised_target_is_input(self):
        ds = generate_synthetic(SMOKE)
        x, t = next(batches(ds, 16, seed=0, epochs=1))
        assert t is x

    def test_supervised_target_is_labels(self):
        ds = make_classification_set(SMOKE, 4, rule_from_name("scale_mod", SMOKE, 4))
        x, t = next(batches(ds, 16, seed=0, epochs=1))
        assert t.shape == (16,) and t.dtype == np.int64

    def test_epoch_covers_dataset_minus_remainder(self):
        spec = FactorSpec(factors=(("posX", 5), ("posY", 5)), image_size=(32, 32))
        ds = generate_synthetic(spec)  # 25 samples
        seen = []
        for x, _ in batches(ds, 4, seed=3, epochs=1):
            seen.extend(x[:, 0].sum(axis=(1, 2)).tolist())
        assert len(seen) == 24  # final short batch dropped
        all_masses = ds.images[:, 0].sum(axis=(1, 2))
        # every drawn sample is a dataset sample, no duplicates within epoch
        perm_masses = sorted(seen)
        assert all(m in all_masses for m in perm_masses)

    def test_batch_too_large_rejected(self):
        ds = generate_synthetic(SMOKE)
        with pytest.raises(ConfigurationError):
            next(batches(ds, 10_000, seed=0, epochs=1))

    def test_batch_below_two_rejected(self):
        ds = generate_synthetic(SMOKE)
        with pytest.raises(ContractViolationError):
            next(batches(ds, 1, seed=0, epochs=1))

    def test_batch_at_matches_generator(self):
        ds = generate_synthetic(SMOKE)
        gen = list(batches(ds, 64, seed=9, epochs=2))
        for step, (x, _) in enumerate(gen):
            xa, _ = batch_at(ds, 64, seed=9, step=step)
            assert np.array_equal(x, xa)


class TestCache:
    def test_round_trip(self, tmp_path):
        ds = make_classification_set(SMOKE, 4, rule_from_name("scale_mod", SMOKE, 4))
        save_cache(ds, tmp_path / "cache")
        back = load_cache(tmp_path / "cache")
        assert np.array_equal(back.images, ds.images)
        assert np.array_equal(back.factor_values, ds.factor_values)
        assert np.array_equal(back.labels, ds.labels)
        assert back.factor_spec == ds.factor_spec

    def test_files_exist(self, tmp_path):
        ds = generate_synthetic(SMOKE)
        save_cache(ds, tmp_path / "c")
        assert (tmp_path / "c" / "data.bin").exists()
        assert (tmp_path / "c" / "factors.bin").exists()
        assert (tmp_path / "c" / "spec.json").exists()

    def test_missing_cache_rejected(self, tmp_path):
        with pytest.raises(IngestionError):
            load_cache(tmp_path / "nope")


def write_fake_dsprites(path, cards=(1, 3, 6, 8, 4, 4), size=(64, 64)):
    """Miniature archive with the standard container layout."""
    grids = np.meshgrid(*[np.arange(c) for c in cards], indexing="ij")
    latents = np.stack([g.ravel() for g in grids], axis=1)
    n = latents.shape[0]
    rng = np.random.default_rng(0)
    imgs = (rng.random((n, *size)) < 0.2).astype(np.uint8)
    np.savez(path, imgs=imgs, latents_classes=latents)
    return n


class TestDspritesIngestion:
    def test_fake_archive_layout(self, tmp_path):
        p = tmp_path / "mini.npz"
        n = write_fake_dsprites(p)
        ds = load_dsprites(p, strict=False)
        assert len(ds) == n
        assert ds.images.shape == (n, 1, 64, 64)
        assert ds.factor_values.shape == (n, 5)
        assert ds.factor_spec.names == ("shape", "scale", "rotation", "posX", "posY")
        assert ds.nuisance == ("shape",)
        assert set(np.unique(ds.images)) <= {0.0, 1.0}

    def test_strict_rejects_wrong_cardinalities(self, tmp_path):
        p = tmp_path / "mini.npz"
        write_fake_dsprites(p)
        with pytest.raises(IngestionError, match=r"expected \(3, 6, 40, 32, 32\)"):
            load_dsprites(p, strict=True)

    def test_missing_array_rejected(self, tmp_path):
        p = tmp_path / "broken.npz"
        np.savez(p, imgs=np.zeros((4, 64, 64), dtype=np.uint8))
        with pytest.raises(IngestionError, match="latents_classes"):
            load_dsprites(p)

    def test_wrong_image_shape_rejected(self, tmp_path):
        p = tmp_path / "broken.npz"
        np.savez(
            p,
            imgs=np.zeros((4, 32, 32), dtype=np.uint8),
            latents_classes=np.zeros((4, 6), dtype=np.int64),
        )
        with pytest.raises(IngestionError, match=r"expected \(N, 64, 64\)"):
            load_dsprites(p)

    def test_published_cardinalities_imply_archive_size(self):
        n = 1
        for c in DSPRITES_CARDINALITIES:
            n *= c
        assert n == 737_280

    @pytest.mark.skipif(
        not __import__("pathlib").Path("/root/data/dsprites.npz").exists(),
        reason="real archive not present",
    )
    def test_real_archive(self):
        ds = load_dsprites("/root/data/dsprites.npz")
        assert len(ds) == 737_280
