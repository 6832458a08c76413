import numpy as np
import pytest

from sdfrecon.adversary import (
    AdvLossMode,
    Discriminator,
    MapTooSmall,
    discriminate,
    discriminator_gradient,
    discriminator_loss,
    discriminator_step,
    generator_adv_loss,
    patches_backprop,
    split_patches,
)
from sdfrecon.geom import Rng
from sdfrecon.normalmap import NormalMap

MSE, BCE = AdvLossMode("mse"), AdvLossMode("bce")


def random_map(size=48, seed=0, cover=0.6):
    gen = Rng(seed).generator
    n = gen.normal(size=(size, size, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return NormalMap(n, gen.random((size, size)) < cover)


def constant_disc(value):
    d = Discriminator.create(Rng(0))
    for k in d.params:
        d.params[k][:] = 0.0
    d.params["b1"][:] = value
    return d


def loop_score(d, nmap):
    tiles = split_patches(nmap)
    scores = []
    for t in tiles:
        z = t.reshape(-1) @ d.params["W0"] + d.params["b0"]
        a = np.where(z > 0, z, 0.2 * z)
        scores.append(a @ d.params["W1"][:, 0] + d.params["b1"][0])
    return np.mean(scores)


class TestPatches:
    def test_exact_division(self):
        m = random_map()
        tiles = split_patches(m)
        assert tiles.shape == (9, 16, 16, 3)
        np.testing.assert_array_equal(tiles[5], m.normals[16:32, 32:48])

    def test_constant_foreground(self):
        n = np.zeros((60, 72, 3))
        n[..., 1] = 1.0
        tiles = split_patches(NormalMap(n, np.ones((60, 72), dtype=bool)))
        for t in tiles:
            np.testing.assert_allclose(t, tiles[0], atol=1e-15)

    def test_checkerboard_coverage(self):
        h, w = 61, 50
        mask = (np.add.outer(np.arange(h) // 3, np.arange(w) // 2) % 2).astype(bool)
        n = np.zeros((h, w, 3))
        n[..., 2] = 1.0
        tiles = split_patches(NormalMap(n, mask))
        rows = [(0, 20), (20, 40), (40, 61)]
        cols = [(0, 16), (16, 32), (32, 50)]
        k = 0
        for r0, r1 in rows:
            for c0, c1 in cols:
                assert tiles[k, ..., 2].mean() == pytest.approx(mask[r0:r1, c0:c1].mean(), abs=1e-6)
                k += 1

    def test_too_small(self):
        with pytest.raises(MapTooSmall):
            split_patches(NormalMap.empty(40, 48))

    @pytest.mark.parametrize("shape", [(48, 48), (64, 53)])
    def test_backprop_is_adjoint(self, shape):
        gen = Rng(1).generator
        x = gen.normal(size=shape + (3,))
        y = gen.normal(size=(9, 16, 16, 3))
        lhs = np.sum(split_patches(NormalMap(x, np.ones(shape, dtype=bool))) * y)
        rhs = np.sum(x * patches_backprop(y, shape))
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestDiscriminate:
    def test_zero_weights(self):
        assert discriminate(constant_disc(0.3), random_map()) == pytest.approx(0.3)

    def test_loop_oracle(self):
        d = Discriminator.create(Rng(2))
        m = random_map(seed=3)
        assert discriminate(d, m) == pytest.approx(loop_score(d, m), abs=1e-12)

    def test_patch_order_invariance(self):
        d = Discriminator.create(Rng(4))
        tiles = split_patches(random_map(seed=5))
        perm = Rng(6).generator.permutation(9)
        assert d.patch_scores(tiles).mean() == pytest.approx(d.patch_scores(tiles[perm]).mean(), abs=1e-14)


class TestLosses:
    def test_half_everywhere(self):
        d = constant_disc(0.5)
        maps = [random_map(seed=i) for i in range(3)]
        assert discriminator_loss(d, maps[:2], maps[2:], MSE) == 0.5

    def test_perfect_discriminator(self):
        d = Discriminator.create(Rng(0))
        fake, real = random_map(seed=1), random_map(seed=2)
        sf, sr = d.scores([fake])[0], d.scores([real])[0]
        # an affine change of the output layer maps fake -> 0 and real -> 1
        a = 1.0 / (sr - sf)
        d.params["W1"] *= a
        d.params["b1"] = a * d.params["b1"] - a * sf
        assert discriminator_loss(d, [fake], [real], MSE) == pytest.approx(0.0, abs=1e-20)

    def test_loop_oracle(self):
        d = Discriminator.create(Rng(7))
        fakes = [random_map(seed=i) for i in range(3)]
        reals = [random_map(seed=10 + i) for i in range(2)]
        ref = np.mean([loop_score(d, m) ** 2 for m in fakes]) + np.mean([(loop_score(d, m) - 1) ** 2 for m in reals])
        assert discriminator_loss(d, fakes, reals, MSE) == pytest.approx(ref, abs=1e-12)

    def test_non_negative(self):
        d = Discriminator.create(Rng(8))
        for mode in (MSE, BCE):
            assert discriminator_loss(d, [random_map(seed=1)], [random_map(seed=2)], mode) >= 0

    def test_mode_validation(self):
        with pytest.raises(ValueError):
            AdvLossMode("hinge")
        with pytest.raises(ValueError):
            AdvLossMode("mse", "all")
        assert AdvLossMode("mse", "four_views").views == (0, 90, 180, 270)


class TestGenerator:
    def test_constant_one(self):
        loss, pixels = generator_adv_loss(constant_disc(1.0), [random_map()], MSE)
        assert loss == 0.0
        assert np.all(pixels[0] == 0.0)

    @pytest.mark.parametrize("mode", [MSE, BCE])
    def test_pixel_finite_difference(self, mode):
        d = Discriminator.create(Rng(9))
        maps = [random_map(seed=4), random_map(seed=5)]
        _, pixels = generator_adv_loss(d, maps, mode)
        m = maps[1]
        i, j = np.argwhere(m.mask)[7]
        h = 1e-6
        for c in range(3):
            up = NormalMap(m.normals.copy(), m.mask)
            dn = NormalMap(m.normals.copy(), m.mask)
            up.normals[i, j, c] += h
            dn.normals[i, j, c] -= h
            fd = (generator_adv_loss(d, [maps[0], up], mode)[0] - generator_adv_loss(d, [maps[0], dn], mode)[0]) / (2 * h)
            assert abs(pixels[1][i, j, c] - fd) <= 1e-4 * max(abs(fd), 1e-9)

    def test_masked_pixels_have_no_gradient(self):
        d = Discriminator.create(Rng(10))
        m = random_map(seed=6)
        _, pixels = generator_adv_loss(d, [m], MSE)
        assert np.all(pixels[0][~m.mask] == 0.0)

    def test_monotone_along_bias_sweep(self):
        m = random_map()
        losses = [generator_adv_loss(constant_disc(b), [m], MSE)[0] for b in np.linspace(-1, 1, 9)]
        assert np.all(np.diff(losses) < 0)


class TestParameterGradients:
    @pytest.mark.parametrize("mode", [MSE, BCE])
    def test_finite_differences(self, mode):
        d = Discriminator.create(Rng(11))
        fakes = [random_map(seed=20), random_map(seed=21)]
        reals = [random_map(seed=22)]
        _, g = discriminator_gradient(d, fakes, reals, mode)
        gen = Rng(12).generator
        h = 1e-6
        for _ in range(20):
            key = ["W0", "b0", "W1", "b1"][gen.integers(4)]
            idx = tuple(gen.integers(s) for s in d.params[key].shape)
            dp, dm = d.copy(), d.copy()
            dp.params[key][idx] += h
            dm.params[key][idx] -= h
            fd = (discriminator_loss(dp, fakes, reals, mode) - discriminator_loss(dm, fakes, reals, mode)) / (2 * h)
            if abs(fd) > 1e-9:
                assert abs(g[key][idx] - fd) / abs(fd) < 1e-4


class TestStep:
    def test_zero_learning_rate(self):
        d = Discriminator.create(Rng(0))
        new = discriminator_step(d, [random_map(seed=1)], [random_map(seed=2)], MSE, 0.0)
        for k in d.params:
            np.testing.assert_array_equal(new.params[k], d.params[k])

    def test_training_reduces_loss_deterministically(self):
        fakes = [random_map(seed=i, cover=0.3) for i in range(4)]
        reals = [NormalMap(np.tile([0.0, 0.0, 1.0], (48, 48, 1)), np.ones((48, 48), dtype=bool))] * 4

        def run():
            d = Discriminator.create(Rng(3))
            start = discriminator_loss(d, fakes, reals, MSE)
            for _ in range(200):
                d = discriminator_step(d, fakes, reals, MSE, 1e-3)
            return start, d

        start, d1 = run()
        _, d2 = run()
        assert discriminator_loss(d1, fakes, reals, MSE) < start
        for k in d1.params:
            np.testing.assert_array_equal(d1.params[k], d2.params[k])
