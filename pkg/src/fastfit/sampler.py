"""Conditioning assembly, noise schedule, and the guided denoising loop.

Three execution modes share one loop:

  cached          — reference K/V precomputed once, then step-count-
                    independent denoising (the production path)
  uncached-joint  — the joint sequence is rebuilt and the reference branches
                    recomputed inside every step (ablation)
  full-attention  — joint sequence under an all-true mask; reference features
                    become step-dependent, so caching is impossible (ablation)

Classifier-free guidance runs an unconditional branch with an empty
reference set and the same person condition.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .denoiser import (
    DenoiserParams,
    ModelConfig,
    PseudoVae,
    ReferenceItem,
    forward_denoise,
    forward_joint,
    sort_items,
)
from .refcache import ReferenceKVCache, fingerprint_for, precompute_cache

MODES = ("cached", "uncached-joint", "full-attention")


class NoiseSchedule:
    """Linear-beta schedule; alphas_bar[0] is defined as 1 (clean data)."""

    def __init__(self, T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02):
        if T < 2 or not (0.0 < beta_start < beta_end < 1.0):
            raise ValueError("need T >= 2 and 0 < beta_start < beta_end < 1")
        self.T = T
        self.betas = np.zeros(T + 1, dtype=np.float64)
        self.betas[1:] = beta_start + (beta_end - beta_start) * np.arange(T) / (T - 1)
        self.alphas_bar = np.concatenate([[1.0], np.cumprod(1.0 - self.betas[1:])])
        assert np.all(np.diff(self.alphas_bar) < 0)

    def alpha_bar(self, t: int) -> float:
        if not (0 <= t <= self.T):
            raise IndexError(f"schedule index {t} outside [0, {self.T}]")
        return float(self.alphas_bar[t])

    def add_noise(self, z0: np.ndarray, eps: np.ndarray, t: int) -> np.ndarray:
        ab = self.alpha_bar(t)
        return np.sqrt(ab) * nk.as_tensor(z0) + np.sqrt(1.0 - ab) * nk.as_tensor(eps)


def inference_timesteps(T: int, steps: int) -> list[tuple[int, int]]:
    """Uniform-stride (t, t_prev) pairs: T=100, steps=20 visits 99, 94, ..., 4."""
    if not (1 <= steps <= T):
        raise ValueError(f"steps must be in [1, {T}]")
    stride = T // steps
    visits = [T - 1 - k * stride for k in range(steps)]
    pairs = []
    for i, t in enumerate(visits):
        t_prev = visits[i + 1] if i + 1 < len(visits) else 0
        pairs.append((t, t_prev))
    return pairs


def ddim_step(z_t, eps_hat, t: int, t_prev: int, schedule: NoiseSchedule):
    """Deterministic update: z0_hat from the eps parameterization, then
    re-noise to the target level. At t_prev=0 this returns z0_hat exactly."""
    if t_prev > t:
        raise ValueError(f"t_prev {t_prev} must not exceed t {t}")
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    z_t = nk.as_tensor(z_t)
    eps_hat = nk.as_tensor(eps_hat)
    z0_hat = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    out = np.sqrt(ab_prev) * z0_hat + np.sqrt(1.0 - ab_prev) * eps_hat
    return nk.check_finite(out, "ddim_step")


def cfg_combine(eps_cond, eps_uncond, s: float):
    """eps_uncond + s * (eps_cond - eps_uncond)."""
    eps_cond = nk.as_tensor(eps_cond)
    eps_uncond = nk.as_tensor(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise nk.ShapeError("guidance branches must have the same shape")
    return eps_uncond + s * (eps_cond - eps_uncond)


# ---------------------------------------------------------------------------
# Conditioning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PersonCondition:
    """Downsampled garment mask plus the encoded masked-person composite."""

    mask_channel: np.ndarray      # (n_X, 1), values in [0, 1]
    composite_latent: np.ndarray  # (n_X, d_lat)

    def __post_init__(self):
        if self.mask_channel.ndim != 2 or self.mask_channel.shape[1] != 1:
            raise ValueError("mask_channel must be (n_X, 1)")
        if np.min(self.mask_channel) < 0.0 or np.max(self.mask_channel) > 1.0:
            raise ValueError("mask values must lie in [0, 1]")
        if self.composite_latent.shape[0] != self.mask_channel.shape[0]:
            raise ValueError("mask and composite token counts differ")


def assemble_person_condition(
    person_image: np.ndarray,
    mask: np.ndarray,
    pose: np.ndarray,
    cfg: ModelConfig,
    vae: PseudoVae | None = None,
) -> PersonCondition:
    """Zero the person where the mask is on, overlay the pose raster, encode,
    and area-average the mask down to the token grid."""
    vae = vae or PseudoVae.for_config(cfg)
    person_image = nk.as_tensor(person_image)
    pose = nk.as_tensor(pose)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2 or person_image.shape[:2] != mask.shape or pose.shape != person_image.shape:
        raise nk.ShapeError("person image, mask, and pose shapes are inconsistent")
    if mask.min() < 0.0 or mask.max() > 1.0:
        raise ValueError("mask values must lie in [0, 1]")
    composite_image = person_image * (1.0 - mask[:, :, None]) + pose
    p = cfg.patch
    h, w = mask.shape[0] // p, mask.shape[1] // p
    if (h, w) != cfg.latent_grid:
        raise nk.ShapeError(f"mask {mask.shape} does not map to grid {cfg.latent_grid}")
    mask_tokens = mask.reshape(h, p, w, p).mean(axis=(1, 3)).reshape(h * w, 1)
    return PersonCondition(
        mask_channel=nk.as_tensor(mask_tokens),
        composite_latent=vae.encode(composite_image),
    )


def encode_references(
    images: list[np.ndarray],
    categories: list[int | str],
    cfg: ModelConfig,
    vae: PseudoVae | None = None,
) -> list[ReferenceItem]:
    """Encode reference images into latent items; one per distinct category."""
    vae = vae or PseudoVae.for_config(cfg)
    if len(images) != len(categories):
        raise ValueError("images and categories must pair up")
    if len(images) > len(cfg.categories):
        raise ValueError(f"at most {len(cfg.categories)} references supported")
    idxs = []
    for c in categories:
        idx = cfg.categories.index(c) if isinstance(c, str) else int(c)
        if not (0 <= idx < len(cfg.categories)):
            raise ValueError(f"unknown category {c!r}")
        idxs.append(idx)
    if len(set(idxs)) != len(idxs):
        raise ValueError("duplicate reference category")
    return [ReferenceItem(latent=vae.encode(img), category=i) for img, i in zip(images, idxs)]


def x_tokens_for(z: np.ndarray, person: PersonCondition) -> np.ndarray:
    """Channel concatenation fed to the input projection at every step:
    [noisy latent | mask channel | composite latent]."""
    return np.hstack([nk.as_tensor(z), nk.as_tensor(person.mask_channel), nk.as_tensor(person.composite_latent)])


# ---------------------------------------------------------------------------
# Sampler
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 20
    guidance_scale: float = 2.0
    mode: str = "cached"
    cfg: bool = True
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_scale < 0.0:
            raise ValueError("guidance scale must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.eta != 0.0:
            raise ValueError("only the deterministic sampler (eta=0) is supported")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "guidance_scale": self.guidance_scale,
            "mode": self.mode,
            "cfg": self.cfg,
            "eta": self.eta,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SamplerConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown sampler config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class SampleResult:
    z0: np.ndarray
    decoded: np.ndarray
    mode: str
    step_times: list[float]
    precompute_time: float

    @property
    def total_time(self) -> float:
        return self.precompute_time + sum(self.step_times)


def sample(
    z_init: np.ndarray,
    person: PersonCondition,
    items: list[ReferenceItem],
    params: DenoiserParams,
    config: SamplerConfig,
    schedule: NoiseSchedule | None = None,
    cache: ReferenceKVCache | None = None,
) -> SampleResult:
    """Run the N-step guided denoising loop in the configured mode and decode.

    A prebuilt cache may be passed for cross-request reuse; its fingerprint
    must match (params, items) or the call is rejected.
    """
    mcfg = params.config
    schedule = schedule or NoiseSchedule(T=mcfg.t_max)
    if config.steps > schedule.T:
        raise ValueError(f"steps {config.steps} exceed schedule length {schedule.T}")
    z = nk.as_tensor(z_init)
    if z.shape != (mcfg.n_tokens, mcfg.d_lat):
        raise nk.ShapeError(f"z has shape {z.shape}, expected {(mcfg.n_tokens, mcfg.d_lat)}")
    items = sort_items(items, mcfg)

    precompute_time = 0.0
    cache_layers = None
    if config.mode == "cached":
        t0 = time.perf_counter()
        if cache is not None:
            if cache.fingerprint != fingerprint_for(items, params):
                raise ValueError("provided cache does not match these references/weights")
        else:
            cache = precompute_cache(items, params)
        cache_layers = cache.layers if cache.num_references else None
        precompute_time = time.perf_counter() - t0
    elif cache is not None:
        raise ValueError(f"mode {config.mode!r} does not accept a KV cache")

    step_times = []
    for t, t_prev in inference_timesteps(schedule.T, config.steps):
        t0 = time.perf_counter()
        x = x_tokens_for(z, person)
        if config.mode == "cached":
            eps_cond = forward_denoise(x, t, cache_layers, params)
        elif config.mode == "uncached-joint":
            eps_cond = forward_joint(x, t, items, params)
        else:
            eps_cond = forward_joint(x, t, items, params, full_attention=True)
        if config.cfg:
            eps_uncond = forward_denoise(x, t, None, params)
            eps = cfg_combine(eps_cond, eps_uncond, config.guidance_scale)
        else:
            eps = eps_cond
        z = ddim_step(z, eps, t, t_prev, schedule)
        step_times.append(time.perf_counter() - t0)

    vae = PseudoVae.for_config(mcfg)
    return SampleResult(
        z0=z,
        decoded=vae.decode(z, mcfg.latent_grid),
        mode=config.mode,
        step_times=step_times,
        precompute_time=precompute_time,
    )


# ---------------------------------------------------------------------------
# Synthetic conditioning (stand-ins for external perception systems)
# ---------------------------------------------------------------------------

_REGION_ANCHORS = 5  # corner/center layout below assumes five categories


def category_region(
    grid: tuple[int, int], region: tuple[int, int], category: int
) -> tuple[int, int]:
    """Deterministic (row, col) anchor of a category's region on the token
    grid: four corners plus a centered region, cycling past five."""
    h, w = grid
    rh, rw = region
    if rh > h or rw > w:
        raise ValueError(f"region {region} does not fit grid {grid}")
    anchors = [
        (0, 0),
        (h - rh, 0),
        ((h - rh) // 2, (w - rw) // 2),
        (h - rh, w - rw),
        (0, w - rw),
    ]
    return anchors[category % _REGION_ANCHORS]


def pose_raster(shape: tuple[int, int, int]) -> np.ndarray:
    """Fixed sparse skeleton: spine, shoulder and hip bars, two legs."""
    H, W, c = shape
    pose = np.zeros((H, W, c), dtype=np.float64)
    col = W // 2
    pose[H // 5 : 4 * H // 5, col, 0] = 1.0
    pose[H // 4, W // 4 : 3 * W // 4 + 1, 0] = 1.0
    pose[3 * H // 5, W // 3 : 2 * W // 3 + 1, 0] = 1.0
    pose[3 * H // 5 : 9 * H // 10, W // 3, 0] = 1.0
    pose[3 * H // 5 : 9 * H // 10, 2 * W // 3, 0] = 1.0
    return nk.as_tensor(pose)


def synthetic_person_inputs(
    cfg: ModelConfig, rng: nk.Rng, categories: list[int], ref_grid: tuple[int, int] = (8, 6)
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random person image, random rectangle masks inside each requested
    category's region, and the fixed pose raster."""
    H, W, c = cfg.image_shape
    p = cfg.patch
    person = rng.uniform((H, W, c), -1.0, 1.0)
    mask = np.zeros((H, W), dtype=np.float64)
    for cat in categories:
        r0, c0 = category_region(cfg.latent_grid, ref_grid, cat)
        rh, rw = ref_grid
        top = r0 + int(rng.integers(0, max(1, rh // 4)))
        left = c0 + int(rng.integers(0, max(1, rw // 4)))
        bot = r0 + rh - int(rng.integers(0, max(1, rh // 4)))
        right = c0 + rw - int(rng.integers(0, max(1, rw // 4)))
        mask[top * p : bot * p, left * p : right * p] = 1.0
    return person, nk.as_tensor(mask), pose_raster((H, W, c))


def synthetic_reference_images(
    cfg: ModelConfig, rng: nk.Rng, categories: list[int], ref_grid: tuple[int, int] = (8, 6)
) -> list[np.ndarray]:
    rh, rw = ref_grid
    p = cfg.patch
    return [rng.uniform((rh * p, rw * p, cfg.channels), -1.0, 1.0) for _ in categories]
