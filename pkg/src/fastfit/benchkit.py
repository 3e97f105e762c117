"""Analytical cost model and paired wall-clock measurement for the three
execution modes.

The FLOPs model counts multiply-adds of matmul-bearing ops only (projections,
attention logits, attention-value products, mixers, the embedding MLP);
normalizations, activations, and softmax are excluded by design, which keeps
the closed forms auditable. One matmul of (m x k) by (k x n) counts 2*m*k*n.
"""

from __future__ import annotations

import json
import statistics
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .denoiser import ModelConfig, ReferenceItem, init_params, param_count
from .sampler import (
    MODES,
    NoiseSchedule,
    SamplerConfig,
    PersonCondition,
    sample,
)


class BenchError(RuntimeError):
    """Measurement could not produce a trustworthy result."""


@dataclass(frozen=True)
class BenchSettings:
    runs: int = 10
    warmup: int = 3
    modes: tuple[str, ...] = MODES
    ref_grid: tuple[int, int] = (16, 12)
    num_refs: int = 5
    dtype: str = "float32"

    def __post_init__(self):
        if self.runs < 10:
            raise ValueError("need runs >= 10")
        if self.warmup < 3:
            raise ValueError("need warmup >= 3")
        for m in self.modes:
            if m not in MODES:
                raise ValueError(f"unknown mode {m!r}")

    def to_dict(self) -> dict:
        return {
            "runs": self.runs,
            "warmup": self.warmup,
            "modes": list(self.modes),
            "ref_grid": list(self.ref_grid),
            "num_refs": self.num_refs,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BenchSettings":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown bench config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("modes", "ref_grid"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Closed-form FLOPs
# ---------------------------------------------------------------------------

def _mm(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def _segment_flops(cfg: ModelConfig, n: int, kv: int) -> int:
    """Full tower cost for one segment of n tokens whose attention reads kv
    keys: input projection, per-block modulation/mixer/QKV/logits/AV/output."""
    d, e = cfg.width, cfg.emb
    per_block = (
        2 * _mm(1, e, d)        # scale and shift projections of the embedding
        + _mm(n, d, d)          # mixer
        + 3 * _mm(n, d, d)      # q/k/v
        + 2 * n * kv * d        # logits (all heads together)
        + 2 * n * kv * d        # attention-value product
        + _mm(n, d, d)          # output projection
    )
    return _mm(n, cfg.in_channels, d) + cfg.blocks * per_block


def _time_mlp_flops(cfg: ModelConfig) -> int:
    return 2 * _mm(1, cfg.emb, cfg.emb)


def _head_flops(cfg: ModelConfig) -> int:
    return _mm(cfg.n_tokens, cfg.width, cfg.d_lat)


def flops(
    cfg: ModelConfig,
    ref_lens: list[int],
    steps: int,
    cfg_on: bool,
    mode: str,
) -> dict[str, int]:
    """Per-step, one-time, and total multiply-add counts for one mode.

    cached:         one-time reference cost + N * (X-only step)
    uncached-joint: N * (X step over the joint keys + fresh reference towers)
    full-attention: N * (every segment attending over the full sequence)
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    n_x = cfg.n_tokens
    total_ref = sum(ref_lens)
    L = n_x + total_ref
    one_time = 0
    if mode == "cached":
        one_time = sum(_segment_flops(cfg, n_r, n_r) for n_r in ref_lens)
        cond = _segment_flops(cfg, n_x, L)
    elif mode == "uncached-joint":
        cond = _segment_flops(cfg, n_x, L) + sum(
            _segment_flops(cfg, n_r, n_r) for n_r in ref_lens
        )
    else:
        cond = _segment_flops(cfg, n_x, L) + sum(
            _segment_flops(cfg, n_r, L) for n_r in ref_lens
        )
    cond += _head_flops(cfg) + _time_mlp_flops(cfg)
    per_step = cond
    if cfg_on:
        per_step += _segment_flops(cfg, n_x, n_x) + _head_flops(cfg) + _time_mlp_flops(cfg)
    return {
        "per_step": per_step,
        "one_time": one_time,
        "total": one_time + steps * per_step,
    }


# ---------------------------------------------------------------------------
# Measurement
# ---------------------------------------------------------------------------

def timer_resolution_ns(samples: int = 2000) -> int:
    """Smallest observed positive increment of the monotonic clock."""
    best = None
    prev = time.perf_counter_ns()
    for _ in range(samples):
        cur = time.perf_counter_ns()
        if cur > prev:
            delta = cur - prev
            best = delta if best is None else min(best, delta)
        prev = cur
    return best if best is not None else 1


@dataclass
class ModeStats:
    mode: str
    runs: int
    warmup: int
    mean_s: float
    stdev_s: float
    per_step_ms: float
    flops_per_step: int
    flops_one_time: int
    flops_total: int
    measured_ratio: float
    analytic_ratio: float
    peak_bytes: int
    valid: bool


@dataclass
class BenchReport:
    model: dict
    sampler: dict
    settings: dict
    params_count: int
    timer_tick_ns: int
    dtype: str
    modes: dict[str, ModeStats] = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return all(m.valid for m in self.modes.values())

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "sampler": self.sampler,
            "settings": self.settings,
            "params_count": self.params_count,
            "timer_tick_ns": self.timer_tick_ns,
            "dtype": self.dtype,
            "valid": self.valid,
            "modes": {k: vars(v) for k, v in self.modes.items()},
        }


def _bench_inputs(cfg: ModelConfig, settings: BenchSettings, seed: int):
    rng = nk.Rng(seed).derive("bench")
    params = init_params(cfg, rng.derive("weights"), zero_init=False)
    rh, rw = settings.ref_grid
    n_ref = rh * rw
    items = [
        ReferenceItem(rng.uniform((n_ref, cfg.d_lat), -1.0, 1.0), category=c)
        for c in range(settings.num_refs)
    ]
    mask = (rng.uniform((cfg.n_tokens, 1)) < 0.5).astype(nk.get_dtype())
    person_latent = rng.uniform((cfg.n_tokens, cfg.d_lat), -1.0, 1.0)
    person = PersonCondition(mask, nk.as_tensor(person_latent * (1.0 - mask)))
    z_init = rng.normal((cfg.n_tokens, cfg.d_lat))
    return params, person, items, z_init


def run_benchmark(
    cfg: ModelConfig,
    sampler_cfg: SamplerConfig,
    settings: BenchSettings,
    seed: int = 0,
) -> BenchReport:
    """Paired-run protocol: the requested modes alternate within one process
    on identical inputs; timings use the monotonic clock; the workspace
    high-water mark is taken in a separate non-timed pass."""
    if settings.num_refs > len(cfg.categories):
        raise ValueError("num_refs exceeds the category table")
    tick = timer_resolution_ns()
    with nk.use_dtype(settings.dtype):
        params, person, items, z_init = _bench_inputs(cfg, settings, seed)
        schedule = NoiseSchedule(T=cfg.t_max)
        ref_lens = [it.latent.shape[0] for it in items]

        def one_run(mode: str):
            mode_cfg = SamplerConfig(
                steps=sampler_cfg.steps,
                guidance_scale=sampler_cfg.guidance_scale,
                mode=mode,
                cfg=sampler_cfg.cfg,
                seed=sampler_cfg.seed,
            )
            t0 = time.perf_counter()
            result = sample(z_init, person, items, params, mode_cfg, schedule)
            return time.perf_counter() - t0, result

        for _ in range(settings.warmup):
            for mode in settings.modes:
                one_run(mode)

        totals: dict[str, list[float]] = {m: [] for m in settings.modes}
        steps_ms: dict[str, list[float]] = {m: [] for m in settings.modes}
        for _ in range(settings.runs):
            for mode in settings.modes:
                dt, result = one_run(mode)
                totals[mode].append(dt)
                steps_ms[mode].extend(1e3 * t for t in result.step_times)

        peaks: dict[str, int] = {}
        for mode in settings.modes:
            tracemalloc.start()
            one_run(mode)
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            peaks[mode] = peak

    analytic = {
        m: flops(cfg, ref_lens, sampler_cfg.steps, sampler_cfg.cfg, m)
        for m in settings.modes
    }
    base_mode = "cached" if "cached" in settings.modes else settings.modes[0]
    base_mean = statistics.fmean(totals[base_mode])
    report = BenchReport(
        model=cfg.to_dict(),
        sampler=sampler_cfg.to_dict(),
        settings=settings.to_dict(),
        params_count=param_count(cfg),
        timer_tick_ns=tick,
        dtype=settings.dtype,
    )
    for mode in settings.modes:
        mean = statistics.fmean(totals[mode])
        stdev = statistics.stdev(totals[mode]) if len(totals[mode]) > 1 else 0.0
        step_mean_ms = statistics.fmean(steps_ms[mode])
        if step_mean_ms * 1e6 < 100 * tick:
            raise BenchError(
                f"timer resolution insufficient: per-step {step_mean_ms:.6f} ms "
                f"< 100 ticks of {tick} ns"
            )
        report.modes[mode] = ModeStats(
            mode=mode,
            runs=settings.runs,
            warmup=settings.warmup,
            mean_s=mean,
            stdev_s=stdev,
            per_step_ms=step_mean_ms,
            flops_per_step=analytic[mode]["per_step"],
            flops_one_time=analytic[mode]["one_time"],
            flops_total=analytic[mode]["total"],
            measured_ratio=mean / base_mean,
            analytic_ratio=analytic[mode]["total"] / analytic[base_mode]["total"],
            peak_bytes=peaks[mode],
            valid=(stdev / mean) <= 0.1,
        )
    return report


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

CSV_HEADER = "mode,runs,mean_s,stdev_s,flops,ratio"


def emit_report(report: BenchReport, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if fmt == "csv":
        lines = [CSV_HEADER]
        for mode, st in report.modes.items():
            lines.append(
                f"{mode},{st.runs},{st.mean_s:.6f},{st.stdev_s:.6f},"
                f"{st.flops_total},{st.measured_ratio:.4f}"
            )
        return "\n".join(lines) + "\n"
    if fmt == "markdown-table":
        lines = [
            "| Variant | Params(M) | Time(s) | Step(ms) | GFLOPs | Ratio | Valid |",
            "|---|---|---|---|---|---|---|",
        ]
        pm = report.params_count / 1e6
        for mode, st in report.modes.items():
            lines.append(
                f"| {mode} | {pm:.3f} | {st.mean_s:.3f} | {st.per_step_ms:.2f} "
                f"| {st.flops_total / 1e9:.2f} | {st.measured_ratio:.2f} "
                f"| {'yes' if st.valid else 'no'} |"
            )
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def load_report(text: str) -> dict:
    data = json.loads(text)
    for key in ("model", "sampler", "modes", "params_count"):
        if key not in data:
            raise ValueError(f"report is missing {key!r}")
    return data
