"""End-to-end run tests: full-chain gradients, quantizer crossing,
determinism, checkpoints, image injection, and config validation."""

import numpy as np
import pytest

from latentsteer.adamopt import alpha_at
from latentsteer.augment import AugmentationConfig
from latentsteer.errors import CheckpointError, ContractError
from latentsteer.loss import PromptSpec
from latentsteer.pipeline import (Run, RunConfig, image_to_png_bytes,
                                  init_noise_image, png_bytes_to_image,
                                  validate_config)
from latentsteer.toy import ToyBackend
from latentsteer.vq import quantize_grid

from gradcheck import rel_err


def small_config(**overrides) -> RunConfig:
    base = dict(
        prompts=(PromptSpec("red"),),
        size=(32, 32),
        iterations=8,
        save_every=4,
        alpha0=0.3,
        seed=11,
        aug=AugmentationConfig(cuts=4),
    )
    base.update(overrides)
    return RunConfig(**base)


def make_run(**overrides) -> Run:
    config = small_config(**overrides)
    backend = ToyBackend(image_hw=config.size,
                         latent_hw=(4, 4)) if config.size == (32, 32) else None
    return Run(config, backend=backend)


# ---------------------------------------------------------------------------
# config validation

def test_validate_config_minimal_and_roundtrip():
    config, problems = validate_config({"prompts": [{"text": "red"}]})
    assert problems == []
    assert config.prompts == (PromptSpec("red", 1.0),)
    assert config.iterations == 400 and config.lr == 0.15

    again, problems = validate_config(config.to_dict())
    assert problems == []
    assert again == config


def test_validate_config_roundtrips_aug():
    config, problems = validate_config({
        "prompts": [{"text": "red"}],
        "aug": {"cuts": 4, "flip": False},
    })
    assert problems == []
    assert config.aug == AugmentationConfig(cuts=4, flip=False)
    again, problems = validate_config(config.to_dict())
    assert problems == [] and again == config


@pytest.mark.parametrize("patch,field", [
    ({"prompts": []}, "prompts"),
    ({"prompts": [{"text": ""}]}, "prompts[0].text"),
    ({"prompts": [{"weight": 2.0}]}, "prompts[0]"),
    ({"prompts": [{"text": "red", "weight": "x"}]}, "prompts[0].weight"),
    ({"prompts": [{"text": "red", "weight": 0.0}]}, "prompts"),
    ({"mode": "retrograde"}, "mode"),
    ({"iterations": 0}, "iterations"),
    ({"iterations": 2.5}, "iterations"),
    ({"lr": 0.0}, "lr"),
    ({"lr": "fast"}, "lr"),
    ({"beta1": 1.5}, "beta1"),
    ({"alpha0": -0.1}, "alpha0"),
    ({"alpha_decay": 1.0}, "alpha_decay"),
    ({"decay_kind": "exponential-ish"}, "decay_kind"),
    ({"size": [64]}, "size"),
    ({"size": [0, 64]}, "size"),
    ({"size": "64x64"}, "size"),
    ({"save_every": 0}, "save_every"),
    ({"quantize": "yes"}, "quantize"),
    ({"backend": ""}, "backend"),
    ({"self_mask_phrase": "x"}, "self_mask_phrase"),
    ({"aug": {"cuts": 0}}, "aug"),
    ({"aug": {"nonsense": 1}}, "aug"),
    ({"surprise": 1}, "surprise"),
])
def test_validate_config_rejections(patch, field):
    data = {"prompts": [{"text": "red"}]}
    data.update(patch)
    config, problems = validate_config(data)
    assert config is None
    assert field in [name for name, _ in problems]


def test_validate_config_negative_weight_alone_is_fine():
    config, problems = validate_config(
        {"prompts": [{"text": "green", "weight": -1.0}]})
    assert problems == [] and config.prompts[0].weight == -1.0


# ---------------------------------------------------------------------------
# gradient through the full chain

def test_full_chain_gradient_matches_fd_with_quantize_off():
    run = make_run(quantize=False)
    iteration = 3
    report, grad = run.loss_and_gradient(run.z, iteration)
    assert np.isfinite(grad).all() and float(np.abs(grad).max()) > 0.0

    gen = np.random.default_rng(5)
    h = 1e-5
    worst = 0.0
    for _ in range(4):
        d = gen.standard_normal(run.z.shape)
        d /= np.linalg.norm(d.ravel())
        fp = run.evaluate(run.z + h * d, iteration).total
        fm = run.evaluate(run.z - h * d, iteration).total
        fd = (fp - fm) / (2.0 * h)
        analytic = float(np.sum(grad * d))
        denom = max(abs(fd), abs(analytic), 1e-12)
        worst = max(worst, abs(fd - analytic) / denom)
    assert worst <= 1e-4, f"directional FD mismatch {worst:.3e}"


def test_gradient_is_pure_and_repeatable():
    run = make_run(quantize=False)
    r1, g1 = run.loss_and_gradient(run.z, 2)
    r2, g2 = run.loss_and_gradient(run.z, 2)
    assert r1 == r2
    assert g1.tobytes() == g2.tobytes()
    # a different iteration draws different views
    r3, _ = run.loss_and_gradient(run.z, 3)
    assert r3.l_clip != r1.l_clip


def test_straight_through_crosses_flat_quantizer():
    """With quantization on, the loss is locally constant in z (FD says
    zero) yet the pass-through gradient is not."""
    run = make_run(quantize=True, alpha0=0.0)
    codebook = run.info.codebook
    gen = np.random.default_rng(3)
    h_, w_, d_ = 4, 4, run.info.latent_dim
    picks = gen.integers(0, codebook.size, size=(h_, w_))
    z = codebook.vectors[picks] + 0.05 * gen.standard_normal((h_, w_, d_))

    d = gen.standard_normal(z.shape)
    d /= np.linalg.norm(d.ravel())
    h = 1e-6
    # the perturbation is far too small to change any cell's code...
    assert np.array_equal(quantize_grid(z + h * d, codebook).indices,
                          quantize_grid(z - h * d, codebook).indices)
    fp = run.evaluate(z + h * d, 1).total
    fm = run.evaluate(z - h * d, 1).total
    assert fp == fm  # loss is flat across the quantizer plateau

    _, grad = run.loss_and_gradient(z, 1)
    assert float(np.sum(grad * d)) != 0.0


def test_loss_report_accounting():
    run = make_run()
    report = run.evaluate(run.z, 1)
    assert report.total == report.l_clip + report.l_reg
    assert report.l_reg == pytest.approx(
        run.config.alpha0 * float(np.mean(run.z * run.z)), rel=1e-12)

    # after two completed steps the third evaluation uses a decayed weight
    run.step()
    run.step()
    report3 = run.evaluate(run.z, 3)
    expected_alpha = alpha_at(run.reg, 2)
    assert report3.l_reg == pytest.approx(
        expected_alpha * float(np.mean(run.z * run.z)), rel=1e-12)


# ---------------------------------------------------------------------------
# determinism and checkpoints

def test_two_runs_same_config_bitwise_identical():
    frames_a, frames_b = [], []
    run_a = make_run()
    final_a = run_a.run(on_frame=lambda i, img: frames_a.append((i, img)))
    run_b = make_run()
    final_b = run_b.run(on_frame=lambda i, img: frames_b.append((i, img)))

    assert run_a.z.tobytes() == run_b.z.tobytes()
    assert image_to_png_bytes(final_a) == image_to_png_bytes(final_b)
    assert [i for i, _ in frames_a] == [i for i, _ in frames_b]
    for (_, fa), (_, fb) in zip(frames_a, frames_b):
        assert image_to_png_bytes(fa) == image_to_png_bytes(fb)


def test_frame_callback_fires_on_schedule():
    seen = []
    run = make_run(iterations=10, save_every=4)
    run.run(on_frame=lambda i, img: seen.append(i))
    assert seen == [4, 8]
    assert run.iteration == 10


def test_checkpoint_resume_is_bit_exact():
    straight = make_run(iterations=12)
    straight.run()

    first_half = make_run(iterations=12)
    for _ in range(6):
        first_half.step()
    blob = first_half.checkpoint_bytes()

    resumed = Run.restore(blob, first_half.config,
                          backend=ToyBackend(image_hw=(32, 32),
                                             latent_hw=(4, 4)))
    assert resumed.iteration == 6 and resumed.adam.t == 6
    resumed.run()

    assert resumed.z.tobytes() == straight.z.tobytes()
    assert resumed.adam.m.tobytes() == straight.adam.m.tobytes()
    assert resumed.adam.v.tobytes() == straight.adam.v.tobytes()
    assert image_to_png_bytes(resumed.frame_image()) == \
        image_to_png_bytes(straight.frame_image())


def test_checkpoint_roundtrip_preserves_reports():
    run = make_run()
    run.step()
    blob = run.checkpoint_bytes()
    copy = Run.restore(blob, run.config,
                       backend=ToyBackend(image_hw=(32, 32), latent_hw=(4, 4)))
    a = run.step()
    b = copy.step()
    assert a == b


@pytest.mark.parametrize("mutate", [
    lambda blob: b"junk" + blob[4:],
    lambda blob: blob[:len(blob) // 2],
    lambda blob: blob[:4] + (99).to_bytes(4, "little") + blob[8:],
    lambda blob: blob[:8],
])
def test_checkpoint_rejects_corruption(mutate):
    run = make_run()
    run.step()
    blob = run.checkpoint_bytes()
    with pytest.raises(CheckpointError):
        Run.restore(mutate(blob), run.config,
                    backend=ToyBackend(image_hw=(32, 32), latent_hw=(4, 4)))


def test_checkpoint_rejects_structural_mismatch():
    run = make_run()
    run.step()
    blob = run.checkpoint_bytes()
    other = small_config(size=(64, 64))
    with pytest.raises(CheckpointError):
        Run.restore(blob, other)


# ---------------------------------------------------------------------------
# image injection

def blocky_image(h: int, w: int, block: int, seed: int) -> np.ndarray:
    gen = np.random.default_rng(seed)
    small = gen.uniform(0.05, 0.95, size=(h // block, w // block, 3))
    return np.repeat(np.repeat(small, block, axis=0), block, axis=1)


def test_inject_resets_optimizer_but_not_schedule():
    run = make_run(quantize=False)
    for _ in range(5):
        run.step()
    assert run.iteration == 5 and run.adam.t == 5
    assert float(np.abs(run.adam.m).max()) > 0.0

    handed = blocky_image(32, 32, 8, seed=7)
    run.inject_image(handed)
    assert run.iteration == 5          # schedules continue where they were
    assert run.adam.t == 0             # momentum starts over
    assert not run.adam.m.any() and not run.adam.v.any()
    # the latent now decodes back to the handed image
    np.testing.assert_allclose(run.frame_image(), handed, atol=1e-9)
    # and the run keeps stepping from there
    run.step()
    assert run.iteration == 6 and run.adam.t == 1


def test_inject_rejects_wrong_shape():
    run = make_run()
    with pytest.raises(ContractError):
        run.inject_image(np.zeros((16, 16, 3)))


def test_first_step_after_inject_moves_at_learning_rate():
    """Freshly reset moments make the first Adam step near +-lr per cell."""
    run = make_run(quantize=False)
    for _ in range(3):
        run.step()
    run.inject_image(blocky_image(32, 32, 8, seed=1))
    before = run.z.copy()
    run.step()
    moved = np.abs(run.z - before)
    significant = moved[moved > 1e-6]
    assert significant.size > 0
    np.testing.assert_allclose(significant, run.config.lr, rtol=1e-4)


# ---------------------------------------------------------------------------
# masking and modes

def test_masked_cells_never_move():
    mask = np.ones((4, 4))
    mask[1:3, 1:3] = 0.0
    config = small_config()
    run = Run(config, backend=ToyBackend(image_hw=(32, 32), latent_hw=(4, 4)),
              latent_mask=mask)
    before = run.z.copy()
    for _ in range(5):
        run.step()
    frozen = mask == 0.0
    assert run.z[frozen].tobytes() == before[frozen].tobytes()
    assert np.abs(run.z[~frozen] - before[~frozen]).max() > 0.0


def test_edit_mode_requires_image():
    with pytest.raises(ContractError):
        Run(small_config(mode="edit"),
            backend=ToyBackend(image_hw=(32, 32), latent_hw=(4, 4)))


def test_edit_mode_starts_from_the_image():
    handed = blocky_image(32, 32, 8, seed=3)
    run = Run(small_config(mode="edit", quantize=False),
              backend=ToyBackend(image_hw=(32, 32), latent_hw=(4, 4)),
              init_image=handed)
    np.testing.assert_allclose(run.frame_image(), handed, atol=1e-9)


def test_masked_edit_derives_mask_from_phrase(planted_square):
    image = planted_square
    config = RunConfig(prompts=(PromptSpec("red"),), mode="masked_edit",
                       size=(64, 64), self_mask_phrase="red", k_sigma=1.0,
                       iterations=4, aug=AugmentationConfig(cuts=4))
    run = Run(config, init_image=image)
    assert run.latent_mask is not None
    hot = float(run.latent_mask.sum())
    assert 0.0 < hot < run.latent_mask.size
    before = run.z.copy()
    for _ in range(2):
        run.step()
    frozen = run.latent_mask == 0.0
    assert run.z[frozen].tobytes() == before[frozen].tobytes()


def test_structure_target_added_for_edits():
    handed = blocky_image(32, 32, 8, seed=4)
    run = Run(small_config(mode="edit", struct_weight=0.5),
              backend=ToyBackend(image_hw=(32, 32), latent_hw=(4, 4)),
              init_image=handed)
    labels = [t.label for t in run.targets]
    assert labels == ["red", "image-structure"]
    assert run.targets[1].weight == 0.5


def test_size_mismatch_with_backend_raises():
    with pytest.raises(ContractError):
        Run(small_config(size=(48, 48)),
            backend=ToyBackend(image_hw=(32, 32), latent_hw=(4, 4)))


# ---------------------------------------------------------------------------
# init noise and png helpers

def test_init_noise_is_uniform_and_seeded():
    a = init_noise_image(9, (64, 64))
    b = init_noise_image(9, (64, 64))
    c = init_noise_image(10, (64, 64))
    assert a.shape == (64, 64, 3)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()
    assert a.min() >= 0.0 and a.max() < 1.0
    assert abs(a.mean() - 0.5) < 0.02


def test_png_helpers_roundtrip_and_deterministic():
    gen = np.random.default_rng(0)
    image = gen.uniform(0.0, 1.0, size=(32, 32, 3))
    blob = image_to_png_bytes(image)
    assert blob == image_to_png_bytes(image.copy())
    back = png_bytes_to_image(blob)
    assert np.abs(back - np.clip(image, 0, 1)).max() <= (0.5 / 255.0) + 1e-9


def test_png_clamps_out_of_range():
    image = np.full((8, 8, 3), 2.0)
    back = png_bytes_to_image(image_to_png_bytes(image))
    assert np.all(back == 1.0)
