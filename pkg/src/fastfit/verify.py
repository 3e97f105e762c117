"""Weight-independent property suites behind the `verify` command.

Each suite compares two independently computed routes (cached vs joint,
blockwise vs dense-masked, autodiff vs finite differences) on fresh random
weights, in 64-bit, and reports the worst deviation it saw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .autodiff import Tape, finite_diff_check
from .denoiser import (
    AttentionWeights,
    ModelConfig,
    ParamHandles,
    ReferenceItem,
    build_semi_attention_mask,
    class_embedding_ops,
    dense_attention_weights,
    dense_masked_attention,
    forward_joint,
    init_params,
    output_head_ops,
    reference_tokens,
    stack_forward,
    timestep_embedding_ops,
)
from .refcache import cached_attention, concat_kv, precompute_cache
from .sampler import (
    NoiseSchedule,
    PersonCondition,
    SamplerConfig,
    inference_timesteps,
    sample,
)

TOL_LOSSLESS_64 = 1e-10
TOL_GRAD = 1e-4


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_dev: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{status}  {self.name:24s} max deviation {self.max_dev:.3e}{extra}"


def _small_config(seed: int = 0) -> ModelConfig:
    return ModelConfig(width=32, heads=4, blocks=2, latent_grid=(6, 4), t_max=100)


def _random_case(cfg: ModelConfig, seed: int, k: int):
    rng = nk.Rng(seed).derive("verify-case")
    params = init_params(cfg, rng.derive("weights"), zero_init=False)
    items = []
    if k:
        cats = sorted(int(c) for c in rng.choice(len(cfg.categories), size=k, replace=False))
        items = [
            ReferenceItem(rng.uniform((12, cfg.d_lat), -1.0, 1.0), category=c)
            for c in cats
        ]
    mask = (rng.uniform((cfg.n_tokens, 1)) < 0.5).astype(nk.get_dtype())
    person_latent = rng.uniform((cfg.n_tokens, cfg.d_lat), -1.0, 1.0)
    person = PersonCondition(mask, nk.as_tensor(person_latent * (1.0 - mask)))
    z_init = rng.normal((cfg.n_tokens, cfg.d_lat))
    return rng, params, items, person, z_init


def losslessness_suite(seed: int = 0, cases: int = 6, tol: float = TOL_LOSSLESS_64) -> SuiteResult:
    """Cached sampling equals joint (uncached) sampling, and cached attention
    equals the X-rows of dense-masked joint attention, per layer."""
    with nk.use_dtype("float64"):
        cfg = _small_config()
        worst = 0.0
        for i in range(cases):
            k = i % (len(cfg.categories) + 1)
            rng, params, items, person, z_init = _random_case(cfg, seed + i, k)
            base = dict(steps=8, guidance_scale=1.7, cfg=True, seed=seed)
            out_c = sample(z_init, person, items, params, SamplerConfig(mode="cached", **base))
            out_u = sample(z_init, person, items, params, SamplerConfig(mode="uncached-joint", **base))
            worst = max(worst, float(np.max(np.abs(out_c.z0 - out_u.z0))))

            # layer-level oracle: cached attention vs dense-masked joint rows
            if k:
                cache = precompute_cache(items, params)
                x = np.hstack([z_init, person.mask_channel, person.composite_latent])
                collect: dict = {}
                forward_joint(x, 42, items, params, collect=collect)
                seq_lens = [cfg.n_tokens] + [it.latent.shape[0] for it in items]
                mask_obj = build_semi_attention_mask(seq_lens)
                for layer in range(cfg.blocks):
                    qs = collect["q"][layer]
                    kvs = collect["kv"][layer]
                    dense = dense_masked_attention(
                        np.vstack(qs),
                        np.vstack([kv[0] for kv in kvs]),
                        np.vstack([kv[1] for kv in kvs]),
                        mask_obj,
                        cfg.heads,
                    )
                    k_full, v_full = concat_kv(kvs[0], cache.layers[layer])
                    got = cached_attention(qs[0], k_full, v_full, cfg.heads)
                    worst = max(worst, float(np.max(np.abs(got - dense[: cfg.n_tokens]))))
        return SuiteResult("losslessness", worst <= tol, worst, f"tol {tol:g}")


def mask_suite(seed: int = 0, break_mask: bool = False) -> SuiteResult:
    """Reference isolation is exact: X perturbations leave every reference's
    features bit-identical, R_j perturbations leave R_i (i != j)
    bit-identical, and disallowed dense attention weights are exactly zero."""
    with nk.use_dtype("float64"):
        cfg = _small_config()
        rng, params, items, person, z_init = _random_case(cfg, seed, 3)
        mask_kind = "leaky" if break_mask else None
        x = np.hstack([z_init, person.mask_channel, person.composite_latent])

        def ref_features(x_tokens, items_):
            collect: dict = {}
            forward_joint(x_tokens, 7, items_, params, collect=collect, mask_kind=mask_kind)
            return [
                [seg.copy() for seg in layer[1:]] for layer in collect["features"]
            ]

        base = ref_features(x, items)
        worst = 0.0

        x2 = x.copy()
        x2[:, : cfg.d_lat] += 0.37
        pert_x = ref_features(x2, items)
        for lb, lp in zip(base, pert_x):
            for a, b in zip(lb, lp):
                worst = max(worst, float(np.max(np.abs(a - b))))

        items2 = [
            ReferenceItem(
                it.latent + (1.0 if i == 0 else 0.0), it.category
            )
            for i, it in enumerate(items)
        ]
        pert_r = ref_features(x, items2)
        for lb, lp in zip(base, pert_r):
            for a, b in zip(lb[1:], lp[1:]):  # untouched references only
                worst = max(worst, float(np.max(np.abs(a - b))))

        # disallowed weights are exactly zero on the dense route
        seq_lens = [cfg.n_tokens] + [it.latent.shape[0] for it in items]
        mask_obj = build_semi_attention_mask(seq_lens)
        seq = rng.normal((mask_obj.total, cfg.width))
        w = dense_attention_weights(seq, mask_obj, AttentionWeights.from_params(params, 0), cfg.heads)
        allowed = mask_obj.dense()
        leak = float(np.max(np.abs(w[:, ~allowed]))) if (~allowed).any() else 0.0
        worst = max(worst, leak)

        return SuiteResult("mask-semantics", worst == 0.0, worst, "must be exactly 0")


def timestep_independence_suite(seed: int = 0) -> SuiteResult:
    """Reference K/V computed once match the R-segment K/V of joint passes at
    every sampled timestep."""
    with nk.use_dtype("float64"):
        cfg = _small_config()
        rng, params, items, person, z_init = _random_case(cfg, seed, 4)
        cache = precompute_cache(items, params)
        schedule = NoiseSchedule(T=cfg.t_max)
        worst = 0.0
        x = np.hstack([z_init, person.mask_channel, person.composite_latent])
        for t, _ in inference_timesteps(schedule.T, 20):
            collect: dict = {}
            forward_joint(x, t, items, params, collect=collect)
            for layer in range(cfg.blocks):
                for j in range(len(items)):
                    k_joint, v_joint = collect["kv"][layer][j + 1]
                    k_cache, v_cache = cache.layers[layer][j]
                    worst = max(worst, float(np.max(np.abs(k_joint - k_cache))))
                    worst = max(worst, float(np.max(np.abs(v_joint - v_cache))))
        return SuiteResult(
            "timestep-independence", worst <= TOL_LOSSLESS_64, worst, f"tol {TOL_LOSSLESS_64:g}"
        )


def gradient_suite(seed: int = 0) -> SuiteResult:
    """Autodiff vs central finite differences on a 1-block width-16 model."""
    with nk.use_dtype("float64"):
        cfg = ModelConfig(width=16, heads=2, blocks=1, latent_grid=(3, 2), t_max=100)
        rng = nk.Rng(seed).derive("grad")
        params = init_params(cfg, rng.derive("weights"), zero_init=False)
        items = [
            ReferenceItem(rng.uniform((4, cfg.d_lat), -1.0, 1.0), category=1),
            ReferenceItem(rng.uniform((4, cfg.d_lat), -1.0, 1.0), category=3),
        ]
        x = rng.uniform((cfg.n_tokens, cfg.in_channels), -1.0, 1.0)
        target = rng.normal((cfg.n_tokens, cfg.d_lat))
        t = 31

        def loss_fn(tensors: dict[str, np.ndarray]) -> float:
            p = params.with_tensors(dict(tensors))
            tape = Tape()
            ph = ParamHandles(tape, p)
            segs = [tape.leaf(x)]
            embs = [timestep_embedding_ops(tape, ph, t)]
            for it in items:
                segs.append(tape.leaf(reference_tokens(it)))
                embs.append(class_embedding_ops(tape, ph, it.category))
            hs = stack_forward(tape, ph, segs, embs)
            eps_hat = output_head_ops(tape, ph, hs[0])
            return float(tape.value(tape.mse(eps_hat, tape.leaf(target))))

        tape = Tape()
        ph = ParamHandles(tape, params)
        segs = [tape.leaf(x)]
        embs = [timestep_embedding_ops(tape, ph, t)]
        for it in items:
            segs.append(tape.leaf(reference_tokens(it)))
            embs.append(class_embedding_ops(tape, ph, it.category))
        hs = stack_forward(tape, ph, segs, embs)
        loss_id = tape.mse(output_head_ops(tape, ph, hs[0]), tape.leaf(target))
        raw = tape.backward(loss_id)
        grads = {
            name: raw.get(h, np.zeros_like(params.tensors[name]))
            for name, h in ph.handles.items()
        }
        report = finite_diff_check(
            loss_fn, params.tensors, grads, step=1e-5, rng=rng.derive("coords")
        )
        return SuiteResult(
            "gradient-check", report.max_rel_err <= TOL_GRAD, report.max_rel_err,
            f"tol {TOL_GRAD:g}, step 1e-5",
        )


def run_all(seed: int = 0, break_mask: bool = False) -> list[SuiteResult]:
    return [
        losslessness_suite(seed),
        mask_suite(seed, break_mask=break_mask),
        timestep_independence_suite(seed),
        gradient_suite(seed),
    ]
