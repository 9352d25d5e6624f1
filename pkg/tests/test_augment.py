import numpy as np
import pytest

from gradcheck import dot_test, rel_err
from latentsteer.augment import (AugChain, AugmentationConfig, apply_chain,
                                 apply_chain_vjp, bilinear_resize,
                                 bilinear_sample, bilinear_scatter,
                                 sample_crop_batch)
from latentsteer.errors import ContractError
from latentsteer.rng import DeterministicStream

IDENTITY_AFFINE = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
IDENTITY_PERSP = np.eye(3)


def plain_chain(top=0, left=0, side=64, res=None, **kw):
    params = dict(crop_top=top, crop_left=left, crop_side=side, flip=False,
                  affine=IDENTITY_AFFINE, perspective=IDENTITY_PERSP,
                  brightness=0.0, contrast=1.0, noise_key=None)
    params.update(kw)
    return AugChain(**params)


def all_off(res=64, cuts=1, frac=(1.0, 1.0)):
    return AugmentationConfig(cuts=cuts, resolution=res, crop_frac=frac,
                              flip=False, affine=False, perspective=False,
                              color_jitter=False, noise=False)


def random_image(gen, h=64, w=64):
    return gen.uniform(0.0, 1.0, (h, w, 3))


def test_identity_chain_is_exact():
    gen = np.random.default_rng(0)
    img = random_image(gen)
    cfg = all_off()
    chains = sample_crop_batch(DeterministicStream(1), 1, (64, 64), cfg)
    assert len(chains) == 1
    c = chains[0]
    assert (c.crop_top, c.crop_left, c.crop_side) == (0, 0, 64)
    assert not c.flip and c.noise_key is None
    np.testing.assert_array_equal(apply_chain(img, c, cfg), img)


def test_identity_chain_resizes_full_frame():
    gen = np.random.default_rng(1)
    img = random_image(gen, 48, 48)
    cfg = all_off(res=32)
    chain = plain_chain(side=48)
    np.testing.assert_allclose(apply_chain(img, chain, cfg),
                               bilinear_resize(img, 32, 32), rtol=1e-12)


def test_flip_is_involution():
    gen = np.random.default_rng(2)
    img = random_image(gen)
    cfg = all_off()
    flipped = apply_chain(img, plain_chain(flip=True), cfg)
    back = apply_chain(flipped, plain_chain(flip=True), cfg)
    assert np.max(np.abs(back - img)) < 1e-6


def test_jitter_constant_image():
    cfg = all_off()
    img = np.full((64, 64, 3), 0.5)
    out = apply_chain(img, plain_chain(brightness=0.1, contrast=1.0), cfg)
    np.testing.assert_allclose(out, 0.6, rtol=1e-12)


def test_noise_field_is_replayable():
    gen = np.random.default_rng(3)
    img = random_image(gen)
    cfg = AugmentationConfig(cuts=1, resolution=64)
    chain = plain_chain(noise_key=12345)
    a = apply_chain(img, chain, cfg)
    b = apply_chain(img, chain, cfg)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, img)
    # sigma scales the perturbation linearly
    cfg2 = AugmentationConfig(cuts=1, resolution=64, noise_sigma=0.2)
    c = apply_chain(img, chain, cfg2)
    np.testing.assert_allclose(c - img, 2.0 * (a - img), rtol=1e-9)


def test_sampling_is_deterministic_per_iteration():
    cfg = AugmentationConfig(cuts=4, resolution=32)
    s = DeterministicStream(9)
    a = sample_crop_batch(s, 5, (64, 64), cfg)
    b = sample_crop_batch(DeterministicStream(9), 5, (64, 64), cfg)
    for ca, cb in zip(a, b):
        assert ca.crop_top == cb.crop_top and ca.crop_side == cb.crop_side
        np.testing.assert_array_equal(ca.affine, cb.affine)
        np.testing.assert_array_equal(ca.perspective, cb.perspective)
        assert ca.noise_key == cb.noise_key
    c = sample_crop_batch(s, 6, (64, 64), cfg)
    assert any(ca.crop_top != cc.crop_top or ca.crop_left != cc.crop_left
               for ca, cc in zip(a, c))


def test_crop_bounds_and_side_range():
    cfg = AugmentationConfig(cuts=64, resolution=16, crop_frac=(0.25, 1.0))
    for seed in range(5):
        for h, w in ((64, 64), (48, 96), (17, 31)):
            chains = sample_crop_batch(DeterministicStream(seed), 1, (h, w), cfg)
            short = min(h, w)
            for c in chains:
                assert 1 <= c.crop_side <= short
                assert c.crop_side >= round(0.25 * short) - 1
                assert 0 <= c.crop_top <= h - c.crop_side
                assert 0 <= c.crop_left <= w - c.crop_side


def test_disabled_stages_stay_identity():
    cfg = AugmentationConfig(cuts=8, resolution=32).disable(
        ["flip", "affine", "perspective", "color_jitter", "noise"])
    chains = sample_crop_batch(DeterministicStream(4), 1, (64, 64), cfg)
    for c in chains:
        assert not c.flip
        np.testing.assert_array_equal(c.affine, IDENTITY_AFFINE)
        np.testing.assert_array_equal(c.perspective, IDENTITY_PERSP)
        assert (c.brightness, c.contrast) == (0.0, 1.0)
        assert c.noise_key is None
    with pytest.raises(ContractError):
        cfg.disable(["crop"])


def test_toggling_one_stage_preserves_other_draws():
    base = AugmentationConfig(cuts=4, resolution=32)
    no_persp = base.disable(["perspective"])
    a = sample_crop_batch(DeterministicStream(7), 3, (64, 64), base)
    b = sample_crop_batch(DeterministicStream(7), 3, (64, 64), no_persp)
    for ca, cb in zip(a, b):
        assert (ca.crop_top, ca.crop_left, ca.crop_side) == \
            (cb.crop_top, cb.crop_left, cb.crop_side)
        np.testing.assert_array_equal(ca.affine, cb.affine)
        assert ca.noise_key == cb.noise_key


# ---------------------------------------------------------------------------
# adjoint exactness


def linear_part(chain, cfg, img_hw):
    zero = np.zeros(img_hw + (3,))
    base = apply_chain(zero, chain, cfg)

    def apply_lin(x):
        return apply_chain(x, chain, cfg) - base
    return apply_lin


def run_dot_test(chain, cfg, img_hw=(64, 64), seed=0):
    gen = np.random.default_rng(seed)
    x = gen.standard_normal(img_hw + (3,))
    y = gen.standard_normal((cfg.resolution, cfg.resolution, 3))
    apply_lin = linear_part(chain, cfg, img_hw)
    return dot_test(apply_lin,
                    lambda cot: apply_chain_vjp(cot, chain, img_hw, cfg), x, y)


def test_dot_test_crop_resize_only():
    cfg = all_off(res=32)
    assert run_dot_test(plain_chain(top=5, left=9, side=40), cfg) < 1e-6


def test_dot_test_flip():
    cfg = all_off(res=32)
    assert run_dot_test(plain_chain(side=64, flip=True), cfg) < 1e-6


def test_dot_test_affine():
    cfg = all_off(res=32)
    theta = np.deg2rad(12.0)
    lin = np.array([[np.cos(theta), np.sin(theta)],
                    [-np.sin(theta), np.cos(theta)]]) / 1.05
    aff = np.hstack([lin, (-lin @ np.array([2.0, -3.0]))[:, None]])
    assert run_dot_test(plain_chain(side=64, affine=aff), cfg) < 1e-6


def test_dot_test_perspective():
    cfg = AugmentationConfig(cuts=1, resolution=32, flip=False, affine=False,
                             color_jitter=False, noise=False,
                             perspective_prob=1.0)
    chains = sample_crop_batch(DeterministicStream(11), 1, (64, 64), cfg)
    assert not np.array_equal(chains[0].perspective, IDENTITY_PERSP)
    assert run_dot_test(chains[0], cfg) < 1e-6


def test_dot_test_jitter_and_noise():
    cfg = AugmentationConfig(cuts=1, resolution=32)
    chain = plain_chain(side=64, brightness=0.07, contrast=1.06,
                        noise_key=777)
    assert run_dot_test(chain, cfg) < 1e-6


def test_dot_test_full_random_chains():
    cfg = AugmentationConfig(cuts=6, resolution=48)
    chains = sample_crop_batch(DeterministicStream(21), 2, (64, 80), cfg)
    for i, chain in enumerate(chains):
        assert run_dot_test(chain, cfg, img_hw=(64, 80), seed=i) < 1e-6


def test_bilinear_scatter_matches_sample_adjoint():
    gen = np.random.default_rng(5)
    img = gen.standard_normal((10, 12, 3))
    ys = gen.uniform(-1.0, 10.5, (7, 7))
    xs = gen.uniform(-1.0, 12.5, (7, 7))
    x = gen.standard_normal((10, 12, 3))
    y = gen.standard_normal((7, 7, 3))
    err = dot_test(lambda v: bilinear_sample(v, ys, xs),
                   lambda cot: bilinear_scatter(cot, ys, xs, 10, 12), x, y)
    assert err < 1e-12


def test_resize_preserves_constant():
    img = np.full((20, 30, 3), 0.37)
    np.testing.assert_allclose(bilinear_resize(img, 13, 7), 0.37, rtol=1e-12)


def test_vjp_rejects_bad_cotangent_shape():
    cfg = all_off(res=32)
    with pytest.raises(ContractError):
        apply_chain_vjp(np.zeros((16, 16, 3)), plain_chain(), (64, 64), cfg)


def test_config_validation():
    with pytest.raises(ContractError):
        AugmentationConfig(cuts=0)
    with pytest.raises(ContractError):
        AugmentationConfig(crop_frac=(0.0, 1.0))
    with pytest.raises(ContractError):
        AugmentationConfig(crop_frac=(0.9, 0.2))
    with pytest.raises(ContractError):
        AugmentationConfig(perspective_prob=1.5)
    with pytest.raises(ContractError):
        AugmentationConfig(noise_sigma=-0.1)


# ---------------------------------------------------------------------------
# batched path equivalence


def test_batched_apply_matches_per_chain():
    from latentsteer.augment import apply_chain_batch

    gen = np.random.default_rng(7)
    img = random_image(gen, 48, 64)
    cfg = AugmentationConfig(cuts=12, resolution=32)
    for it in (1, 2, 9):
        chains = sample_crop_batch(DeterministicStream(3), it, (48, 64), cfg)
        batched = apply_chain_batch(img, chains, cfg)
        for v, chain in enumerate(chains):
            np.testing.assert_array_equal(batched[v],
                                          apply_chain(img, chain, cfg))


def test_batched_apply_matches_with_stages_disabled():
    from latentsteer.augment import apply_chain_batch

    gen = np.random.default_rng(8)
    img = random_image(gen)
    cfg = AugmentationConfig(cuts=6, resolution=24).disable(
        ["noise", "color_jitter"])
    chains = sample_crop_batch(DeterministicStream(5), 4, (64, 64), cfg)
    batched = apply_chain_batch(img, chains, cfg)
    for v, chain in enumerate(chains):
        np.testing.assert_array_equal(batched[v], apply_chain(img, chain, cfg))


def test_batched_vjp_matches_per_chain():
    from latentsteer.augment import apply_chain_batch_vjp

    gen = np.random.default_rng(9)
    cfg = AugmentationConfig(cuts=10, resolution=32)
    chains = sample_crop_batch(DeterministicStream(11), 2, (48, 64), cfg)
    cots = gen.standard_normal((10, 32, 32, 3))
    batched = apply_chain_batch_vjp(cots, chains, (48, 64), cfg)
    for v, chain in enumerate(chains):
        np.testing.assert_array_equal(
            batched[v], apply_chain_vjp(cots[v], chain, (48, 64), cfg))


def test_batched_vjp_rejects_bad_shape():
    from latentsteer.augment import apply_chain_batch_vjp

    cfg = AugmentationConfig(cuts=2, resolution=16)
    chains = sample_crop_batch(DeterministicStream(1), 1, (32, 32), cfg)
    with pytest.raises(ContractError):
        apply_chain_batch_vjp(np.zeros((2, 8, 8, 3)), chains, (32, 32), cfg)
