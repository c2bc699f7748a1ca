import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pame.patches import (MaskPlan, PatchEmbed, PatchGrid, embed_visible, patchify, patchify_batch, sample_mask,
                          sincos_pos_embed_2d, unpatchify, unpatchify_batch)


def test_patchify_shapes():
    grid = patchify(np.zeros((224, 224, 3)))
    assert grid.grid == (14, 14)
    assert grid.patches.shape == (196, 16, 16, 3)


def test_patch_is_exact_block():
    img = np.random.default_rng(0).random((224, 224, 3))
    grid = patchify(img)
    # patch 15 is row 1, column 1
    np.testing.assert_array_equal(grid.patches[15], img[16:32, 16:32])
    np.testing.assert_array_equal(grid.patches[13], img[0:16, 208:224])


def test_constant_image_gives_identical_patches():
    grid = patchify(np.full((224, 224, 3), 0.3))
    assert all(np.array_equal(p, grid.patches[0]) for p in grid.patches)


def test_roundtrip_random():
    rng = np.random.default_rng(1)
    for _ in range(5):
        img = rng.random((224, 224, 3))
        np.testing.assert_array_equal(unpatchify(patchify(img)), img)


def test_single_patch_image():
    img = np.random.default_rng(2).random((16, 16, 3))
    np.testing.assert_array_equal(unpatchify(patchify(img)), img)


def test_replacing_one_patch_is_local():
    img = np.random.default_rng(3).random((224, 224, 3))
    grid = patchify(img)
    grid.patches[40] = 0.0
    out = unpatchify(grid)
    r, c = divmod(40, 14)
    changed = np.nonzero((out != img).any(axis=2))
    assert changed[0].min() >= r * 16 and changed[0].max() < (r + 1) * 16
    assert changed[1].min() >= c * 16 and changed[1].max() < (c + 1) * 16


def test_indivisible_and_incomplete():
    with pytest.raises(ValueError):
        patchify(np.zeros((225, 224, 3)))
    grid = patchify(np.zeros((32, 32, 3)))
    with pytest.raises(ValueError):
        unpatchify(PatchGrid(16, (2, 2), grid.patches[:3]))


def test_batch_helpers_match_numpy():
    img = np.random.default_rng(4).random((2, 64, 48, 3))
    flat = patchify_batch(torch.from_numpy(img))
    for b in range(2):
        np.testing.assert_array_equal(flat[b].numpy(), patchify(img[b]).flat())
    np.testing.assert_array_equal(unpatchify_batch(flat, (4, 3)).numpy(), img)


class TestMask:
    def test_half_of_196(self):
        plan = sample_mask(196, 0.5, seed=0)
        assert len(plan.masked_idx) == 98 and len(plan.visible_idx) == 98

    def test_ratio_zero(self):
        plan = sample_mask(196, 0.0, seed=0)
        assert plan.masked_idx == () and plan.visible_idx == tuple(range(196))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 400), st.floats(0.0, 0.99), st.integers(0, 2**31))
    def test_partition(self, total, ratio, seed):
        plan = sample_mask(total, ratio, seed)
        assert set(plan.visible_idx).isdisjoint(plan.masked_idx)
        assert sorted(plan.visible_idx + plan.masked_idx) == list(range(total))
        assert len(plan.masked_idx) == int(np.floor(ratio * total))

    def test_seed_reproducible(self):
        assert sample_mask(196, 0.5, 17) == sample_mask(196, 0.5, 17)
        assert sample_mask(196, 0.5, 17) != sample_mask(196, 0.5, 18)

    def test_invalid_ratio(self):
        for r in (-0.1, 1.0):
            with pytest.raises(ValueError):
                sample_mask(196, r, 0)

    def test_json_roundtrip(self):
        plan = sample_mask(196, 0.5, 5)
        assert MaskPlan.from_json(plan.to_json()) == plan

    def test_per_index_frequency(self):
        counts = np.zeros(196)
        for seed in range(10_000):
            counts[list(sample_mask(196, 0.5, seed).masked_idx)] += 1
        freq = counts / 10_000
        assert np.all(np.abs(freq - 0.5) <= 0.02)


class TestPositionalEmbedding:
    def test_injective(self):
        pe = sincos_pos_embed_2d(64, (14, 14))
        for i, j in itertools.combinations(range(196), 2):
            assert not np.allclose(pe[i], pe[j])

    def test_shape_and_width_check(self):
        assert sincos_pos_embed_2d(768, (14, 14)).shape == (196, 768)
        with pytest.raises(ValueError):
            sincos_pos_embed_2d(30, (14, 14))


class TestEmbed:
    def setup_method(self):
        torch.manual_seed(0)
        self.embed = PatchEmbed(32, (14, 14)).double()

    def test_zero_patch_gives_pe(self):
        torch.nn.init.zeros_(self.embed.proj.bias)
        grid = patchify(np.zeros((224, 224, 3)))
        plan = sample_mask(196, 0.5, 1)
        out = embed_visible(grid, plan, self.embed)
        np.testing.assert_allclose(out.vectors.detach().numpy(),
                                   sincos_pos_embed_2d(32, (14, 14))[list(plan.visible_idx)], atol=1e-12)
        assert out.positions == plan.visible_idx

    def test_identical_patches_differ_by_pe(self):
        grid = patchify(np.full((224, 224, 3), 0.7))
        plan = sample_mask(196, 0.0, 0)
        v = embed_visible(grid, plan, self.embed).vectors.detach().numpy()
        pe = sincos_pos_embed_2d(32, (14, 14))
        np.testing.assert_allclose(v[5] - v[100], pe[5] - pe[100], atol=1e-12)

    def test_dense_loop_oracle(self):
        rng = np.random.default_rng(9)
        img = rng.random((224, 224, 3))
        plan = sample_mask(196, 0.5, 3)
        got = embed_visible(patchify(img), plan, self.embed).vectors.detach().numpy()
        w = self.embed.proj.weight.detach().numpy()
        b = self.embed.proj.bias.detach().numpy()
        pe = sincos_pos_embed_2d(32, (14, 14))
        for k, pos in enumerate(plan.visible_idx):
            r, c = divmod(pos, 14)
            block = img[r * 16:(r + 1) * 16, c * 16:(c + 1) * 16]
            flat = [block[y, x, ch] for y in range(16) for x in range(16) for ch in range(3)]
            for d in range(32):
                expect = sum(w[d, j] * flat[j] for j in range(768)) + b[d] + pe[pos, d]
                assert abs(got[k, d] - expect) < 1e-6

    def test_affine_in_pixels(self):
        rng = np.random.default_rng(2)
        img = rng.random((224, 224, 3))
        plan = sample_mask(196, 0.5, 8)
        pe = sincos_pos_embed_2d(32, (14, 14))[list(plan.visible_idx)]
        torch.nn.init.zeros_(self.embed.proj.bias)
        base = embed_visible(patchify(img), plan, self.embed).vectors.detach().numpy() - pe
        scaled = embed_visible(patchify(2.5 * img), plan, self.embed).vectors.detach().numpy() - pe
        np.testing.assert_allclose(scaled, 2.5 * base, atol=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            self.embed(torch.zeros(1, 196, 10, dtype=torch.float64))
        grid = patchify(np.zeros((32, 32, 3)))
        with pytest.raises(ValueError):
            embed_visible(grid, sample_mask(196, 0.5, 0), self.embed)
