"""The optimization run: latent state, step loop, checkpoints, frames.

A run owns a continuous latent grid and walks it downhill on the
guidance objective.  Every step decodes the (quantized) latent, renders
augmented views, embeds them, aggregates the loss against the targets,
and backpropagates through the whole chain by explicit adjoints; the
quantizer is crossed with the straight-through estimator.  All
randomness is counter-keyed by (seed, iteration), so a run restored
from a checkpoint continues bit-exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import struct
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from . import wire
from .adamopt import AdamState, RegSchedule, adam_step, alpha_at, \
    mask_gradients, reg_gradient
from .augment import AugmentationConfig, apply_chain_batch, \
    apply_chain_batch_vjp, bilinear_resize, sample_crop_batch
from .backend import Backend, attach, check_unit_embedding
from .errors import CheckpointError, ContractError, DivergedError
from .loss import GuidanceTarget, PromptSpec, aggregate_loss, \
    aggregate_loss_grad, unit_vjp
from .rng import DeterministicStream
from .selfmask import EditSpec, selfmask_for_image
from .vq import quantize_grid, straight_through_adjoint

MODES = ("generate", "edit", "masked_edit")

CHECKPOINT_MAGIC = b"SLCK"
CHECKPOINT_VERSION = 1

# lanes 0.. of iteration 0 are reserved for the init noise image
_INIT_ITERATION = 0


@dataclass(frozen=True)
class RunConfig:
    prompts: tuple[PromptSpec, ...] = ()
    mode: str = "generate"
    iterations: int = 400
    lr: float = 0.15
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha0: float = 0.5
    alpha_decay: float = 0.005
    decay_kind: str = "multiplicative"
    seed: int = 0
    size: tuple[int, int] = (64, 64)
    backend: str = "toy"
    quantize: bool = True
    save_every: int = 10
    struct_weight: float = 0.0
    self_mask_phrase: str | None = None
    k_sigma: float = -2.0
    aug: AugmentationConfig | None = None

    def schedule(self) -> RegSchedule:
        return RegSchedule(alpha0=self.alpha0, decay=self.alpha_decay,
                           kind=self.decay_kind)

    def to_dict(self) -> dict:
        out = {
            "prompts": [{"text": p.text, "weight": p.weight}
                        for p in self.prompts],
            "mode": self.mode,
            "iterations": self.iterations,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "alpha0": self.alpha0,
            "alpha_decay": self.alpha_decay,
            "decay_kind": self.decay_kind,
            "seed": self.seed,
            "size": list(self.size),
            "backend": self.backend,
            "quantize": self.quantize,
            "save_every": self.save_every,
            "struct_weight": self.struct_weight,
            "self_mask_phrase": self.self_mask_phrase,
            "k_sigma": self.k_sigma,
        }
        if self.aug is not None:
            aug = dataclasses.asdict(self.aug)
            aug["crop_frac"] = list(aug["crop_frac"])
            aug["scale_range"] = list(aug["scale_range"])
            aug["contrast_range"] = list(aug["contrast_range"])
            out["aug"] = aug
        return out


def validate_config(data: dict) -> tuple[RunConfig | None, list[tuple[str, str]]]:
    """Build a RunConfig from a plain dict, collecting field problems."""
    problems: list[tuple[str, str]] = []
    if not isinstance(data, dict):
        return None, [("config", "must be an object")]
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in known:
            problems.append((key, "unknown field"))

    def number(name, default, lo=None, hi=None, integer=False, strict_lo=False):
        value = data.get(name, default)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append((name, "must be a number"))
            return default
        if integer and int(value) != value:
            problems.append((name, "must be an integer"))
            return default
        if lo is not None and (value <= lo if strict_lo else value < lo):
            problems.append((name, f"must be {'>' if strict_lo else '>='} {lo}"))
            return default
        if hi is not None and value > hi:
            problems.append((name, f"must be <= {hi}"))
            return default
        return int(value) if integer else float(value)

    prompts = []
    raw_prompts = data.get("prompts", [])
    if not isinstance(raw_prompts, list):
        problems.append(("prompts", "must be a list"))
    else:
        for i, item in enumerate(raw_prompts):
            if not isinstance(item, dict) or "text" not in item:
                problems.append((f"prompts[{i}]", "must be {text, weight}"))
                continue
            text = item["text"]
            weight = item.get("weight", 1.0)
            if not isinstance(text, str) or not text.strip():
                problems.append((f"prompts[{i}].text", "must be non-empty"))
                continue
            if isinstance(weight, bool) or not isinstance(weight, (int, float)):
                problems.append((f"prompts[{i}].weight", "must be a number"))
                continue
            prompts.append(PromptSpec(text=text, weight=float(weight)))

    mode = data.get("mode", "generate")
    if mode not in MODES:
        problems.append(("mode", f"must be one of {MODES}"))
        mode = "generate"
    if not prompts:
        problems.append(("prompts", "at least one prompt is required"))
    elif all(p.weight == 0.0 for p in prompts) and data.get("struct_weight", 0.0) == 0.0:
        problems.append(("prompts", "all guidance weights are zero"))

    iterations = number("iterations", 400, lo=1, integer=True)
    lr = number("lr", 0.15, lo=0.0, strict_lo=True)
    beta1 = number("beta1", 0.9, lo=0.0, hi=1.0)
    beta2 = number("beta2", 0.999, lo=0.0, hi=1.0)
    eps = number("eps", 1e-8, lo=0.0, strict_lo=True)
    alpha0 = number("alpha0", 0.5, lo=0.0)
    alpha_decay = number("alpha_decay", 0.005, lo=0.0, hi=0.999999)
    decay_kind = data.get("decay_kind", "multiplicative")
    if decay_kind not in ("multiplicative", "linear"):
        problems.append(("decay_kind", "must be multiplicative or linear"))
        decay_kind = "multiplicative"
    seed = number("seed", 0, integer=True)
    save_every = number("save_every", 10, lo=1, integer=True)
    struct_weight = number("struct_weight", 0.0)
    k_sigma = number("k_sigma", -2.0)

    size = data.get("size", [64, 64])
    if (not isinstance(size, (list, tuple)) or len(size) != 2 or
            any(isinstance(v, bool) or not isinstance(v, int) or v < 1
                for v in size)):
        problems.append(("size", "must be [height, width] positive integers"))
        size = (64, 64)
    else:
        size = (int(size[0]), int(size[1]))

    backend = data.get("backend", "toy")
    if not isinstance(backend, str) or not backend:
        problems.append(("backend", "must be a selector string"))
        backend = "toy"

    quantize = data.get("quantize", True)
    if not isinstance(quantize, bool):
        problems.append(("quantize", "must be a boolean"))
        quantize = True

    phrase = data.get("self_mask_phrase")
    if phrase is not None and (not isinstance(phrase, str) or not phrase.strip()):
        problems.append(("self_mask_phrase", "must be a non-empty string"))
        phrase = None
    if mode == "generate" and phrase is not None:
        problems.append(("self_mask_phrase", "only valid for masked_edit"))

    aug = None
    if "aug" in data:
        raw = data["aug"]
        if not isinstance(raw, dict):
            problems.append(("aug", "must be an object"))
        else:
            try:
                fields = {f.name for f in dataclasses.fields(AugmentationConfig)}
                unknown = set(raw) - fields
                if unknown:
                    raise ContractError(f"unknown fields {sorted(unknown)}")
                kwargs = dict(raw)
                for tup in ("crop_frac", "scale_range", "contrast_range"):
                    if tup in kwargs:
                        kwargs[tup] = tuple(kwargs[tup])
                aug = AugmentationConfig(**kwargs)
            except (ContractError, TypeError, ValueError) as exc:
                problems.append(("aug", str(exc)))

    if problems:
        return None, problems
    return RunConfig(
        prompts=tuple(prompts), mode=mode, iterations=iterations, lr=lr,
        beta1=beta1, beta2=beta2, eps=eps, alpha0=alpha0,
        alpha_decay=alpha_decay, decay_kind=decay_kind, seed=seed, size=size,
        backend=backend, quantize=quantize, save_every=save_every,
        struct_weight=struct_weight, self_mask_phrase=phrase, k_sigma=k_sigma,
        aug=aug), []


@dataclass(frozen=True)
class LossReport:
    iteration: int
    l_clip: float
    l_reg: float
    total: float


# ---------------------------------------------------------------------------
# image <-> png helpers

def image_to_png_bytes(image: np.ndarray) -> bytes:
    """Clamp to [0, 1], quantize to 8-bit RGB, and PNG-encode.

    Identical float images produce identical bytes.
    """
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    as_u8 = np.round(arr * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(as_u8, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_image(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
    return rgb / 255.0


def init_noise_image(seed: int, size: tuple[int, int]) -> np.ndarray:
    """Uniform [0, 1) pixel noise from the run's counter stream."""
    h, w = size
    stream = DeterministicStream(seed)
    draws = stream.uniform_block(_INIT_ITERATION, 0, h * w * 3)
    return draws.reshape(h, w, 3)


def structural_hash(backend: Backend) -> bytes:
    """Hash of the shape-defining facts a checkpoint must agree on."""
    info = backend.info()
    blob = json.dumps({
        "image": [info.image_h, info.image_w],
        "latent": [info.latent_h, info.latent_w, info.latent_dim],
        "codebook": info.codebook.size,
        "backend": info.name,
    }, sort_keys=True).encode()
    return hashlib.sha256(blob).digest()


def _require_finite(arr: np.ndarray, stage: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise DivergedError(stage)
    return arr


class Run:
    """One optimization job over an attached backend."""

    def __init__(self, config: RunConfig, backend: Backend | None = None,
                 init_image: np.ndarray | None = None,
                 latent_mask: np.ndarray | None = None,
                 _restoring: bool = False):
        self.config = config
        self.backend = backend or attach(config.backend, config.size)
        info = self.backend.info()
        if (info.image_h, info.image_w) != tuple(config.size):
            raise ContractError(
                f"config size {config.size} does not match backend image "
                f"{(info.image_h, info.image_w)}")
        self.info = info
        base_aug = config.aug or AugmentationConfig()
        self.aug = replace(base_aug, resolution=info.input_size)
        self.reg = config.schedule()
        self.stream = DeterministicStream(config.seed)
        self.iteration = 0

        if config.mode in ("edit", "masked_edit"):
            if init_image is None:
                raise ContractError(f"mode '{config.mode}' needs an init image")
            init_image = np.asarray(init_image, dtype=np.float64)
            if init_image.shape != (info.image_h, info.image_w, 3):
                init_image = bilinear_resize(init_image, info.image_h,
                                             info.image_w)
        self.init_image = init_image

        self.latent_mask = None
        if latent_mask is not None:
            self.latent_mask = np.asarray(latent_mask, dtype=np.float64)
        elif config.mode == "masked_edit" and config.self_mask_phrase:
            spec = EditSpec(phrase=config.self_mask_phrase,
                            k_sigma=config.k_sigma)
            self.latent_mask, self.pixel_mask, _ = selfmask_for_image(
                self.backend, init_image, spec,
                (info.latent_h, info.latent_w))
        if (self.latent_mask is not None and
                self.latent_mask.shape != (info.latent_h, info.latent_w)):
            raise ContractError(
                f"latent mask shape {self.latent_mask.shape} != "
                f"{(info.latent_h, info.latent_w)}")

        self.targets = self._build_targets()

        if not _restoring:
            if config.mode == "generate":
                start = init_noise_image(config.seed, config.size)
            else:
                start = self.init_image
            self.z = self.backend.encode(start)
            self.adam = AdamState.zeros(self.z.shape)

    def _build_targets(self) -> list[GuidanceTarget]:
        targets = [
            GuidanceTarget(
                embedding=check_unit_embedding(
                    self.backend.embed_text(p.text), f"prompt '{p.text}'"),
                weight=p.weight, label=p.text)
            for p in self.config.prompts
        ]
        if self.config.struct_weight != 0.0 and self.init_image is not None:
            res = self.info.input_size
            src = bilinear_resize(self.init_image, res, res)
            targets.append(GuidanceTarget(
                embedding=check_unit_embedding(
                    self.backend.embed_image(src), "structure embedding"),
                weight=self.config.struct_weight, label="image-structure"))
        return targets

    # -- pure per-iteration math -------------------------------------------

    def _decode_current(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        zq = quantize_grid(z, self.info.codebook).values \
            if self.config.quantize else z
        return zq, _require_finite(self.backend.decode(zq), "decode")

    def evaluate(self, z: np.ndarray, iteration: int) -> LossReport:
        """Loss at ``z`` using iteration's sampled views; no state change."""
        _, image = self._decode_current(z)
        chains = sample_crop_batch(self.stream, iteration,
                                   self.config.size, self.aug)
        views = _require_finite(apply_chain_batch(image, chains, self.aug),
                                "augment")
        embeds = []
        for view in views:
            raw = _require_finite(self.backend.embed_image(view), "embed")
            embeds.append(check_unit_embedding(raw, "crop embedding"))
        l_clip = float(aggregate_loss(np.stack(embeds), self.targets))
        alpha = alpha_at(self.reg, iteration - 1)
        l_reg = float(alpha * np.mean(z * z))
        total = l_clip + l_reg
        if not np.isfinite(total):
            raise DivergedError("loss")
        return LossReport(iteration=iteration, l_clip=l_clip, l_reg=l_reg,
                          total=total)

    def loss_and_gradient(self, z: np.ndarray,
                          iteration: int) -> tuple[LossReport, np.ndarray]:
        """Loss plus its gradient w.r.t. the continuous latent."""
        zq, image = self._decode_current(z)
        h, w = self.config.size
        chains = sample_crop_batch(self.stream, iteration,
                                   self.config.size, self.aug)
        views = _require_finite(apply_chain_batch(image, chains, self.aug),
                                "augment")
        raws, units = [], []
        for view in views:
            raw = _require_finite(self.backend.embed_image(view), "embed")
            raws.append(raw)
            units.append(check_unit_embedding(raw, "crop embedding"))
        unit_batch = np.stack(units)
        l_clip = float(aggregate_loss(unit_batch, self.targets))
        alpha = alpha_at(self.reg, iteration - 1)
        l_reg = float(alpha * np.mean(z * z))
        total = l_clip + l_reg
        if not np.isfinite(total):
            raise DivergedError("loss")

        grad_units = aggregate_loss_grad(unit_batch, self.targets)
        cot_views = np.stack([
            self.backend.embed_image_vjp(view, unit_vjp(raw, cot_u))
            for view, raw, cot_u in zip(views, raws, grad_units)])
        per_view = apply_chain_batch_vjp(cot_views, chains, (h, w), self.aug)
        grad_image = np.zeros_like(image)
        for piece in per_view:
            grad_image += piece
        _require_finite(grad_image, "augment-adjoint")
        grad_dec = self.backend.decode_vjp(zq, grad_image)
        grad_z = straight_through_adjoint(grad_dec) if self.config.quantize \
            else grad_dec
        grad_z = grad_z + reg_gradient(z, alpha)
        _require_finite(grad_z, "gradient")
        report = LossReport(iteration=iteration, l_clip=l_clip, l_reg=l_reg,
                            total=total)
        return report, grad_z

    # -- stateful stepping ---------------------------------------------------

    def step(self) -> LossReport:
        iteration = self.iteration + 1
        report, grad = self.loss_and_gradient(self.z, iteration)
        grad = mask_gradients(grad, self.latent_mask)
        self.z = adam_step(self.z, grad, self.adam, lr=self.config.lr,
                           beta1=self.config.beta1, beta2=self.config.beta2,
                           eps=self.config.eps)
        self.iteration = iteration
        return report

    def frame_image(self) -> np.ndarray:
        """What the user would get right now: decode of the quantized
        latent (or the raw latent when quantization is bypassed)."""
        _, image = self._decode_current(self.z)
        return image

    def finished(self) -> bool:
        return self.iteration >= self.config.iterations

    def run(self, on_report=None, on_frame=None):
        """Drive to completion; returns the final frame image.

        on_frame fires at every save_every boundary; the final frame is
        the caller's to persist (it is also returned).
        """
        while not self.finished():
            report = self.step()
            if on_report is not None:
                on_report(report)
            if on_frame is not None and \
                    self.iteration % self.config.save_every == 0:
                on_frame(self.iteration, self.frame_image())
        return self.frame_image()

    def inject_image(self, image: np.ndarray) -> None:
        """Replace the latent with the encoding of a hand-edited image.

        Optimizer moments reset (stale momentum would drag the new
        latent back toward the old trajectory); the iteration counter
        and therefore the augmentation/decay schedules are preserved.
        """
        image = np.asarray(image, dtype=np.float64)
        h, w = self.config.size
        if image.shape != (h, w, 3):
            raise ContractError(
                f"image shape {image.shape} != {(h, w, 3)}")
        self.z = self.backend.encode(image)
        self.adam.reset()

    # -- checkpointing ---------------------------------------------------------

    def checkpoint_bytes(self) -> bytes:
        scalars = struct.pack("<QQ", self.iteration, self.adam.t)
        counters = struct.pack("<QQ", self.stream.seed, self.iteration)
        sections = [
            wire.encode_tensor(self.z),
            wire.encode_tensor(self.adam.m),
            wire.encode_tensor(self.adam.v),
            scalars,
            counters,
            structural_hash(self.backend),
        ]
        out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
        for section in sections:
            out.append(struct.pack("<I", len(section)))
            out.append(section)
        return b"".join(out)

    @classmethod
    def restore(cls, data: bytes, config: RunConfig,
                backend: Backend | None = None,
                init_image: np.ndarray | None = None,
                latent_mask: np.ndarray | None = None) -> "Run":
        sections = _split_checkpoint(data)
        try:
            z, _ = wire.decode_tensor(sections[0], 0)
            m, _ = wire.decode_tensor(sections[1], 0)
            v, _ = wire.decode_tensor(sections[2], 0)
            iteration, adam_t = struct.unpack("<QQ", sections[3])
            seed, _counter = struct.unpack("<QQ", sections[4])
            stored_hash = sections[5]
        except Exception as exc:
            raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
        run = cls(config, backend=backend, init_image=init_image,
                  latent_mask=latent_mask, _restoring=True)
        if stored_hash != structural_hash(run.backend):
            raise CheckpointError(
                "checkpoint belongs to a different structural config")
        if z.shape != (run.info.latent_h, run.info.latent_w,
                       run.info.latent_dim) or m.shape != z.shape or \
                v.shape != z.shape:
            raise CheckpointError("checkpoint tensor shapes are wrong")
        run.z = z
        run.adam = AdamState(m=m, v=v, t=int(adam_t))
        run.iteration = int(iteration)
        run.stream = DeterministicStream(int(seed))
        return run


def _split_checkpoint(data: bytes) -> list[bytes]:
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    sections = []
    offset = 8
    while offset < len(data):
        if offset + 4 > len(data):
            raise CheckpointError("truncated section header")
        (length,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + length > len(data):
            raise CheckpointError("truncated section payload")
        sections.append(data[offset:offset + length])
        offset += length
    if len(sections) != 6:
        raise CheckpointError(f"expected 6 sections, found {len(sections)}")
    return sections
