"""Command-line surface: verify | bench | train-demo | sample.

All commands read one JSON config (validated strictly: unknown keys are
rejected) and are bit-reproducible for a fixed seed, timing fields aside.
FASTFIT_SEED overrides the config seed. Exit codes: 0 success,
1 verification/measurement failure, 2 usage or config error, 3 numeric fault.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import numkernel as nk


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass(frozen=True)
class PathSettings:
    weights_in: str | None = None
    weights_out: str = "weights.bin"
    loss_csv: str = "loss.csv"
    sample_out: str = "sample"
    report_out: str = "report.json"

    def to_dict(self) -> dict:
        return {
            "weights_in": self.weights_in,
            "weights_out": self.weights_out,
            "loss_csv": self.loss_csv,
            "sample_out": self.sample_out,
            "report_out": self.report_out,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PathSettings":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown paths keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class SampleSettings:
    num_refs: int = 3
    ref_grid: tuple[int, int] = (8, 6)
    probe_equivalence: bool = True

    def to_dict(self) -> dict:
        return {
            "num_refs": self.num_refs,
            "ref_grid": list(self.ref_grid),
            "probe_equivalence": self.probe_equivalence,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SampleSettings":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown sample keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "ref_grid" in kwargs:
            kwargs["ref_grid"] = tuple(kwargs["ref_grid"])
        return cls(**kwargs)


class RunConfig:
    """Validated bundle of model/sampler/train/bench/sample/paths settings."""

    SECTIONS = ("model", "sampler", "train", "bench", "sample", "paths")

    def __init__(self, model, sampler, train, bench, sample_, paths, seed=0, dtype="float64"):
        self.model = model
        self.sampler = sampler
        self.train = train
        self.bench = bench
        self.sample = sample_
        self.paths = paths
        self.seed = int(seed)
        if dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {dtype!r}")
        self.dtype = dtype

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        from .benchkit import BenchSettings
        from .denoiser import ModelConfig
        from .sampler import SamplerConfig
        from .traindemo import TrainConfig

        unknown = set(data) - set(cls.SECTIONS) - {"seed", "dtype"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(
                model=ModelConfig.from_dict(data.get("model", {})),
                sampler=SamplerConfig.from_dict(data.get("sampler", {})),
                train=TrainConfig.from_dict(data.get("train", {})),
                bench=BenchSettings.from_dict(data.get("bench", {})),
                sample_=SampleSettings.from_dict(data.get("sample", {})),
                paths=PathSettings.from_dict(data.get("paths", {})),
                seed=data.get("seed", 0),
                dtype=data.get("dtype", "float64"),
            )
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "dtype": self.dtype,
            "model": self.model.to_dict(),
            "sampler": self.sampler.to_dict(),
            "train": self.train.to_dict(),
            "bench": self.bench.to_dict(),
            "sample": self.sample.to_dict(),
            "paths": self.paths.to_dict(),
        }


def load_run_config(path: str | None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    config = RunConfig.from_dict(data)
    env_seed = os.environ.get("FASTFIT_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"FASTFIT_SEED must be an integer, got {env_seed!r}") from exc
        config.seed = seed
        from .sampler import SamplerConfig

        config.sampler = SamplerConfig.from_dict({**config.sampler.to_dict(), "seed": seed})
    return config


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_verify(config: RunConfig, break_mask: bool = False) -> int:
    from .verify import run_all

    results = run_all(seed=config.seed, break_mask=break_mask)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return 1 if failed else 0


def cmd_bench(config: RunConfig, mode: str | None, runs: int | None,
              warmup: int | None, out: str | None) -> int:
    from .benchkit import BenchError, BenchSettings, emit_report, run_benchmark

    settings = config.bench
    alias = {"cached": "cached", "uncached": "uncached-joint", "full-attn": "full-attention"}
    if mode and mode != "all":
        if mode not in alias:
            raise ConfigError(f"--mode must be cached|uncached|full-attn|all, got {mode!r}")
        settings = BenchSettings.from_dict({**settings.to_dict(), "modes": [alias[mode]]})
    overrides = {}
    if runs is not None:
        overrides["runs"] = runs
    if warmup is not None:
        overrides["warmup"] = warmup
    if overrides:
        settings = BenchSettings.from_dict({**settings.to_dict(), **overrides})
    try:
        report = run_benchmark(config.model, config.sampler, settings, seed=config.seed)
    except BenchError as exc:
        print(f"benchmark aborted: {exc}", file=sys.stderr)
        return 1
    out_path = Path(out or config.paths.report_out)
    fmt = {".json": "json", ".csv": "csv", ".md": "markdown-table"}.get(out_path.suffix)
    if fmt is None:
        raise ConfigError(f"report path must end in .json/.csv/.md, got {out_path.name}")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(emit_report(report, fmt))
    print(emit_report(report, "markdown-table"))
    print(f"report written to {out_path}")
    if not report.valid:
        print("warning: timing spread exceeded stdev/mean 0.1; report marked invalid")
        return 1
    return 0


def _load_or_init_params(config: RunConfig, rng: nk.Rng):
    from .denoiser import DenoiserParams, init_params

    if config.paths.weights_in:
        return DenoiserParams.load(config.paths.weights_in)
    return init_params(config.model, rng.derive("weights"))


def cmd_train_demo(config: RunConfig) -> int:
    from .denoiser import DenoiserParams, init_params
    from .traindemo import train

    with nk.use_dtype(config.dtype):
        rng = nk.Rng(config.seed)
        start_step = 0
        csv_path = Path(config.paths.loss_csv)
        if config.paths.weights_in:
            params = DenoiserParams.load(config.paths.weights_in)
            if csv_path.exists():
                with open(csv_path) as fh:
                    rows = list(csv.reader(fh))[1:]
                if rows:
                    start_step = int(rows[-1][0]) + 1
        else:
            params = init_params(config.model, rng.derive("weights"))
            if csv_path.exists():
                csv_path.unlink()
        tcfg = config.train
        print(f"training {tcfg.steps} steps (batch {tcfg.batch}, lr {tcfg.lr}) from step {start_step}")

        def on_step(step, loss):
            if step % tcfg.log_every == 0 or step == start_step + tcfg.steps - 1:
                print(f"  step {step:6d}  loss {loss:.5f}")

        params, curve = train(params, tcfg, rng, start_step=start_step, on_step=on_step)
        out_path = Path(config.paths.weights_out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        params.save(out_path)
        new_file = not csv_path.exists()
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if new_file:
                writer.writerow(["step", "loss"])
            for step, loss in curve:
                writer.writerow([step, f"{loss:.8f}"])
        print(f"weights written to {out_path}, loss curve to {csv_path}")
        return 0


def cmd_sample(config: RunConfig) -> int:
    import numpy as np

    from . import weightsio
    from .sampler import (
        SamplerConfig,
        assemble_person_condition,
        encode_references,
        sample,
        synthetic_person_inputs,
        synthetic_reference_images,
    )

    with nk.use_dtype(config.dtype):
        scfg = config.sampler
        rng = nk.Rng(scfg.seed)
        params = _load_or_init_params(config, rng)
        mcfg = params.config
        cats = list(range(config.sample.num_refs))
        person_img, mask, pose = synthetic_person_inputs(
            mcfg, rng.derive("person"), cats, config.sample.ref_grid
        )
        person = assemble_person_condition(person_img, mask, pose, mcfg)
        images = synthetic_reference_images(mcfg, rng.derive("refs"), cats, config.sample.ref_grid)
        items = encode_references(images, cats, mcfg)
        z_init = rng.derive("noise").normal((mcfg.n_tokens, mcfg.d_lat))

        result = sample(z_init, person, items, params, scfg)
        probe = None
        if config.sample.probe_equivalence and scfg.mode in ("cached", "uncached-joint"):
            other = "uncached-joint" if scfg.mode == "cached" else "cached"
            other_cfg = SamplerConfig.from_dict({**scfg.to_dict(), "mode": other})
            other_result = sample(z_init, person, items, params, other_cfg)
            probe = {
                "other_mode": other,
                "max_abs_diff": float(np.max(np.abs(result.z0 - other_result.z0))),
            }

        out_base = Path(config.paths.sample_out)
        out_base.parent.mkdir(parents=True, exist_ok=True)
        tensor_path = out_base.with_suffix(".tensors")
        weightsio.save_tensors(
            tensor_path,
            {"z0": result.z0, "decoded": result.decoded},
            meta={"model": mcfg.to_dict(), "seed": scfg.seed, "mode": scfg.mode},
        )
        meta = {
            "mode": scfg.mode,
            "seed": scfg.seed,
            "steps": scfg.steps,
            "guidance_scale": scfg.guidance_scale,
            "cfg": scfg.cfg,
            "dtype": config.dtype,
            "num_refs": len(items),
            "shapes": {
                "z0": list(result.z0.shape),
                "decoded": list(result.decoded.shape),
            },
            "equivalence_probe": probe,
            "timings": {
                "precompute_s": result.precompute_time,
                "total_s": result.total_time,
                "per_step_s": result.step_times,
            },
        }
        meta_path = out_base.with_suffix(".json")
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
        print(f"sample written to {tensor_path} / {meta_path}")
        if probe:
            print(f"equivalence probe vs {probe['other_mode']}: max abs diff {probe['max_abs_diff']:.3e}")
        return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fastfit",
        description="Cacheable-conditioning diffusion demo: verification, "
        "benchmarks, training demo, and sampling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_verify = sub.add_parser("verify", help="run the invariant suites (64-bit)")
    p_verify.add_argument("--config", default=None, help="JSON run config")
    p_verify.add_argument(
        "--break-mask", action="store_true",
        help="test hook: corrupt the attention mask; the mask suite must fail",
    )

    p_bench = sub.add_parser("bench", help="measure the execution modes")
    p_bench.add_argument("--config", default=None)
    p_bench.add_argument("--mode", default="all", choices=["cached", "uncached", "full-attn", "all"])
    p_bench.add_argument("--runs", type=int, default=None)
    p_bench.add_argument("--warmup", type=int, default=None)
    p_bench.add_argument("--out", default=None, help="report path (.json/.csv/.md)")

    p_train = sub.add_parser("train-demo", help="run the synthetic training demo")
    p_train.add_argument("--config", default=None)

    p_sample = sub.add_parser("sample", help="generate one latent and decode it")
    p_sample.add_argument("--config", default=None)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_run_config(args.config)
        if args.command == "verify":
            return cmd_verify(config, break_mask=args.break_mask)
        if args.command == "bench":
            return cmd_bench(config, args.mode, args.runs, args.warmup, args.out)
        if args.command == "train-demo":
            return cmd_train_demo(config)
        if args.command == "sample":
            return cmd_sample(config)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except nk.NumericError as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return 3
    except nk.ShapeError as exc:
        print(f"shape error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
