import numpy as np
import pytest

from pame.data import (DISTORTIONS, SYNTH_KINDS, Manifest, ManifestEntry, distortion_strength, load_cloud,
                       make_dataset, pseudo_mos, split_holdout, split_kfold, synth_cloud, synth_distort)


def refs(n):
    return [f"r{i:02d}" for i in range(n)]


class TestKFold:
    @pytest.mark.parametrize("n,ratio,n_test", [(9, (7, 2), 2), (20, (16, 4), 4), (20, (4, 1), 4)])
    def test_shapes_and_disjointness(self, n, ratio, n_test):
        plan = split_kfold(refs(n), folds=5, ratio=ratio, seed=3)
        assert plan.fold_count == 5
        for f in plan.folds:
            assert len(f.test) == n_test and len(f.train) == n - n_test
            assert set(f.train).isdisjoint(f.test)
            assert set(f.train) | set(f.test) == set(refs(n))

    def test_wpc_folds_partition_references(self):
        plan = split_kfold(refs(20), folds=5, ratio=(4, 1), seed=0)
        tested = [r for f in plan.folds for r in f.test]
        assert sorted(tested) == refs(20)

    def test_test_coverage_is_balanced(self):
        plan = split_kfold(refs(9), folds=5, ratio=(7, 2), seed=1)
        counts = {r: 0 for r in refs(9)}
        for f in plan.folds:
            for r in f.test:
                counts[r] += 1
        assert max(counts.values()) <= 2 and sum(counts.values()) == 10

    def test_seed_determinism(self):
        assert split_kfold(refs(9), seed=4) == split_kfold(refs(9), seed=4)
        assert split_kfold(refs(9), seed=4).to_dict() != split_kfold(refs(9), seed=5).to_dict()

    def test_infeasible(self):
        with pytest.raises(ValueError):
            split_kfold(refs(1), ratio=(7, 2))
        with pytest.raises(ValueError):
            split_kfold(refs(3), ratio=(1, 10))


class TestHoldout:
    def test_8_1_1(self):
        (f,) = split_holdout(refs(10), seed=0).folds
        assert (len(f.train), len(f.val), len(f.test)) == (8, 1, 1)
        assert set(f.train).isdisjoint(f.val) and set(f.train).isdisjoint(f.test) and set(f.val).isdisjoint(f.test)
        assert set(f.train) | set(f.val) | set(f.test) == set(refs(10))

    def test_determinism_and_infeasible(self):
        assert split_holdout(refs(30), seed=2) == split_holdout(refs(30), seed=2)
        with pytest.raises(ValueError):
            split_holdout(refs(3))


class TestManifest:
    def entries(self):
        return [ManifestEntry("a_1", "d/a_1.ply", "a", "r/a.ply", 4.2, "geom-noise", 1),
                ManifestEntry("a_2", "d/a_2.ply", "a", None, None, "downsample", 2),
                ManifestEntry("b_1", "d/b_1.ply", "b", "r/b.ply", 1.5, "color-noise", 7)]

    def test_roundtrip(self, tmp_path):
        m = Manifest(self.entries())
        m.save(tmp_path / "m.jsonl")
        back = Manifest.load(tmp_path / "m.jsonl")
        assert back.entries == m.entries
        assert back.root == tmp_path

    def test_duplicate_ids(self):
        e = self.entries()
        with pytest.raises(ValueError):
            Manifest(e + [e[0]])

    def test_subset_follows_reference(self):
        m = Manifest(self.entries())
        assert [e.sample_id for e in m.subset(["a"])] == ["a_1", "a_2"]
        assert m.reference_ids == ["a", "b"]
        assert not m.labeled() and m.subset(["b"]).labeled()

    def test_split_from_manifest(self):
        m = Manifest(self.entries())
        plan = split_kfold(m, folds=2, ratio=(1, 1), seed=0)
        for f in plan.folds:
            assert len(f.test) == 1 and set(f.train).isdisjoint(f.test)


class TestSynth:
    def test_sphere_unit_norm_and_count(self):
        pc = synth_cloud("sphere", 500, seed=0)
        assert pc.n == 500
        np.testing.assert_allclose(np.linalg.norm(pc.coords, axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("kind", SYNTH_KINDS)
    def test_kinds_deterministic(self, kind):
        a, b = synth_cloud(kind, 300, 5), synth_cloud(kind, 300, 5)
        assert a.n == 300
        np.testing.assert_array_equal(a.coords, b.coords)
        np.testing.assert_array_equal(a.colors, b.colors)
        assert a.colors.min() >= 0 and a.colors.max() <= 1

    def test_errors(self):
        with pytest.raises(ValueError):
            synth_cloud("teapot", 10)
        with pytest.raises(ValueError):
            synth_cloud("sphere", 0)
        pc = synth_cloud("cube", 50)
        with pytest.raises(ValueError):
            synth_distort(pc, "blur", 1)
        with pytest.raises(ValueError):
            synth_distort(pc, "geom-noise", 8)

    def test_level_monotonicity(self):
        for d in DISTORTIONS:
            s = [distortion_strength(d, lv) for lv in range(1, 8)]
            assert all(x < y for x, y in zip(s, s[1:]))
        assert all(pseudo_mos(a) > pseudo_mos(a + 1) for a in range(1, 7))
        assert pseudo_mos(1) == 5.0

    def test_downsample_keeps_fewer(self):
        pc = synth_cloud("sphere", 1000, 1)
        lo, _ = synth_distort(pc, "downsample", 1, seed=0)
        hi, _ = synth_distort(pc, "downsample", 7, seed=0)
        assert hi.n < lo.n < pc.n

    def test_color_noise_keeps_geometry(self):
        pc = synth_cloud("checker-torus", 400, 2)
        out, mos = synth_distort(pc, "color-noise", 3, seed=1)
        np.testing.assert_array_equal(out.coords, pc.coords)
        assert mos == pseudo_mos(3)

    def test_distort_deterministic(self):
        pc = synth_cloud("gaussian-blob", 300, 3)
        a, _ = synth_distort(pc, "geom-noise", 4, seed=9)
        b, _ = synth_distort(pc, "geom-noise", 4, seed=9)
        np.testing.assert_array_equal(a.coords, b.coords)


def test_make_dataset(tmp_path):
    m = make_dataset(tmp_path, kinds=("sphere", "cube"), contents_per_kind=1, distortions=("downsample",),
                     levels=(1, 7), n_points=200, seed=0)
    assert len(m) == 4 and m.reference_ids == ["cube-0", "sphere-0"]
    again = Manifest.load(tmp_path / "manifest.jsonl")
    assert again.entries == m.entries
    pc = load_cloud(again, again.entries[0].distorted_path)
    assert pc.n == round(200 * (1 - 0.12))
