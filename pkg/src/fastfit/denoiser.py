"""Cacheable denoiser at desk scale.

A token-sequence model of stacked (modulated resblock, attention) pairs.
Denoising tokens are modulated by a sinusoidal-plus-MLP timestep embedding;
reference tokens are modulated by a static per-category class embedding and
attend only within themselves, which makes their features independent of the
timestep and therefore cacheable. The attention rule over the joint sequence
[X; R_1; ...; R_K]: X rows attend to every token, each R_i row attends only
to its own segment.

Both the direct and the recording backend run the same forward code, so the
training path and the inference path cannot drift apart.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numkernel as nk
from . import weightsio
from .autodiff import NumpyOps, attention_core

DEFAULT_CATEGORIES = ("top", "bottom", "dress", "shoes", "bag")

# Fixed basis seed for the pseudo-VAE; part of the file-format contract.
_VAE_BASIS_SEED = 0x0FA57F17


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    width: int = 64
    heads: int = 4
    blocks: int = 2
    latent_grid: tuple[int, int] = (16, 12)
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    t_max: int = 100
    patch: int = 2
    channels: int = 3
    emb_dim: int | None = None
    use_class_embed: bool = True

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if len(set(self.categories)) != len(self.categories) or not self.categories:
            raise ValueError("categories must be non-empty and distinct")
        if self.t_max < 2:
            raise ValueError("t_max must be >= 2")
        if min(self.latent_grid) < 1 or self.patch < 1 or self.channels < 1:
            raise ValueError("latent_grid/patch/channels must be positive")
        if self.emb % 2 != 0:
            raise ValueError("embedding width must be even")

    @property
    def emb(self) -> int:
        return self.emb_dim if self.emb_dim is not None else self.width

    @property
    def d_lat(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def in_channels(self) -> int:
        # noisy latent + mask channel + composite latent
        return 2 * self.d_lat + 1

    @property
    def n_tokens(self) -> int:
        return self.latent_grid[0] * self.latent_grid[1]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        h, w = self.latent_grid
        return (h * self.patch, w * self.patch, self.channels)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "heads": self.heads,
            "blocks": self.blocks,
            "latent_grid": list(self.latent_grid),
            "categories": list(self.categories),
            "t_max": self.t_max,
            "patch": self.patch,
            "channels": self.channels,
            "emb_dim": self.emb_dim,
            "use_class_embed": self.use_class_embed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("latent_grid", "categories"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _tensor_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init scheme) for every tensor, in a fixed order."""
    d, e = cfg.width, cfg.emb
    specs: list[tuple[str, tuple[int, ...], str]] = [
        ("input_proj.w", (cfg.in_channels, d), "uniform-fan-in"),
        ("input_proj.b", (d,), "zeros"),
        ("time_mlp.w1", (e, e), "uniform-fan-in"),
        ("time_mlp.b1", (e,), "zeros"),
        ("time_mlp.w2", (e, e), "uniform-fan-in"),
        ("time_mlp.b2", (e,), "zeros"),
    ]
    if cfg.use_class_embed:
        specs.append(("class_embed.table", (len(cfg.categories), e), "uniform-fan-in"))
    for i in range(cfg.blocks):
        p = f"block{i}"
        specs += [
            (f"{p}.res.norm_gain", (d,), "ones"),
            (f"{p}.res.norm_bias", (d,), "zeros"),
            (f"{p}.res.scale_w", (e, d), "residual-zero"),
            (f"{p}.res.scale_b", (d,), "zeros"),
            (f"{p}.res.shift_w", (e, d), "residual-zero"),
            (f"{p}.res.shift_b", (d,), "zeros"),
            (f"{p}.res.mixer_w", (d, d), "residual-zero"),
            (f"{p}.res.mixer_b", (d,), "zeros"),
            (f"{p}.attn.norm_gain", (d,), "ones"),
            (f"{p}.attn.norm_bias", (d,), "zeros"),
            (f"{p}.attn.wq", (d, d), "uniform-fan-in"),
            (f"{p}.attn.wk", (d, d), "uniform-fan-in"),
            (f"{p}.attn.wv", (d, d), "uniform-fan-in"),
            (f"{p}.attn.wo", (d, d), "residual-zero"),
        ]
    specs += [
        ("output_proj.w", (d, cfg.d_lat), "residual-zero"),
        ("output_proj.b", (cfg.d_lat,), "zeros"),
    ]
    return specs


def param_count(cfg: ModelConfig) -> int:
    """Closed-form scalar count; must equal the allocated parameter count."""
    d, e = cfg.width, cfg.emb
    n = cfg.in_channels * d + d          # input projection
    n += 2 * (e * e + e)                 # timestep MLP
    if cfg.use_class_embed:
        n += len(cfg.categories) * e     # class-embedding table
    per_block = (
        2 * d                            # resblock norm
        + 2 * (e * d + d)                # modulation scale/shift projections
        + d * d + d                      # mixer
        + 2 * d                          # attention norm
        + 4 * d * d                      # q/k/v/o projections
    )
    n += cfg.blocks * per_block
    n += d * cfg.d_lat + cfg.d_lat       # output head
    return n


def class_embed_param_count(cfg: ModelConfig) -> int:
    """Parameters the class-embedding mechanism adds over the same model
    without it. There are no per-reference network weights anywhere."""
    return len(cfg.categories) * cfg.emb


class DenoiserParams:
    """Immutable-by-convention weight set; shareable across threads."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        expected = _tensor_specs(config)
        names = [n for n, _, _ in expected]
        if list(tensors.keys()) != names:
            missing = set(names) - set(tensors)
            extra = set(tensors) - set(names)
            raise ValueError(f"bad tensor set: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape, _ in expected:
            if tuple(tensors[name].shape) != shape:
                raise ValueError(f"{name}: shape {tensors[name].shape}, expected {shape}")
        self.tensors = {n: nk.as_tensor(t) for n, t in tensors.items()}
        actual = sum(t.size for t in self.tensors.values())
        assert actual == param_count(config), (actual, param_count(config))

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in self.tensors:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name], dtype="<f8").tobytes())
        return h.hexdigest()

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "DenoiserParams":
        merged = dict(self.tensors)
        merged.update(tensors)
        return DenoiserParams(self.config, merged)

    def save(self, path) -> None:
        weightsio.save_tensors(path, self.tensors, meta={"model": self.config.to_dict()})

    @classmethod
    def load(cls, path) -> "DenoiserParams":
        tensors, meta = weightsio.load_tensors(path)
        cfg = ModelConfig.from_dict(meta["model"])
        return cls(cfg, {n: nk.as_tensor(t) for n, t in tensors.items()})


def init_params(cfg: ModelConfig, rng: nk.Rng, zero_init: bool = True) -> DenoiserParams:
    """Deterministic init. `zero_init` keeps residual-path output weights at
    zero (each block starts as identity); pass False for fully live weights."""
    tensors = {}
    for name, shape, scheme in _tensor_specs(cfg):
        sub = rng.derive(name)
        if scheme == "ones":
            tensors[name] = np.ones(shape, dtype=nk.get_dtype())
        elif scheme == "residual-zero":
            scheme2 = "zeros" if zero_init else "uniform-fan-in"
            tensors[name] = nk.init_weights(shape, sub, scheme2)
        else:
            tensors[name] = nk.init_weights(shape, sub, scheme)
    return DenoiserParams(cfg, tensors)


class ParamHandles:
    """Backend handles (arrays or tape leaves) for every parameter tensor."""

    def __init__(self, ops, params: DenoiserParams):
        self.ops = ops
        self.config = params.config
        self.handles = {n: ops.leaf(t, n) for n, t in params.tensors.items()}

    def __getitem__(self, name: str):
        return self.handles[name]

    def __contains__(self, name: str) -> bool:
        return name in self.handles


# ---------------------------------------------------------------------------
# Instrumentation
# ---------------------------------------------------------------------------

@dataclass
class Counters:
    reference_branch_calls: int = 0
    joint_reference_encodes: int = 0
    reference_kernel_calls: int = 0

    def reset(self):
        self.reference_branch_calls = 0
        self.joint_reference_encodes = 0
        self.reference_kernel_calls = 0


counters = Counters()


def reset_counters() -> None:
    counters.reset()


# ---------------------------------------------------------------------------
# Reference items and attention masks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceItem:
    """One reference's latent token grid plus its category index."""

    latent: np.ndarray  # (n_r, d_lat)
    category: int

    def __post_init__(self):
        if self.latent.ndim != 2 or self.latent.shape[0] < 1:
            raise ValueError(f"reference latent must be a non-empty 2-D grid, got {self.latent.shape}")


def sort_items(items: list[ReferenceItem], cfg: ModelConfig) -> list[ReferenceItem]:
    """Canonical category-table order; duplicates and bad indices rejected."""
    cats = [it.category for it in items]
    for c in cats:
        if not (0 <= c < len(cfg.categories)):
            raise ValueError(f"unknown category index {c}")
    if len(set(cats)) != len(cats):
        raise ValueError("at most one reference per category")
    return sorted(items, key=lambda it: it.category)


@dataclass(frozen=True)
class SemiAttentionMask:
    """Block-structured attention predicate over [X; R_1; ...; R_K].

    kind "semi": X rows see every column, R_i rows see only their own block.
    kind "full": every row sees every column.
    kind "leaky" is a test hook: R rows also see X (deliberately wrong).
    The mask depends only on the segment lengths, never on token values.
    """

    segment_lengths: tuple[int, ...]
    kind: str = "semi"

    def __post_init__(self):
        if not self.segment_lengths or any(n < 1 for n in self.segment_lengths):
            raise ValueError("all segments must be non-empty")
        if self.kind not in ("semi", "full", "leaky"):
            raise ValueError(f"unknown mask kind {self.kind!r}")

    @property
    def total(self) -> int:
        return sum(self.segment_lengths)

    def _segment_of(self, idx: int) -> int:
        edge = 0
        for s, n in enumerate(self.segment_lengths):
            edge += n
            if idx < edge:
                return s
        raise IndexError(idx)

    def allowed(self, q: int, k: int) -> bool:
        if not (0 <= q < self.total and 0 <= k < self.total):
            raise IndexError((q, k))
        if self.kind == "full":
            return True
        sq, sk = self._segment_of(q), self._segment_of(k)
        if sq == 0:
            return True
        if self.kind == "leaky" and sk == 0:
            return True
        return sq == sk

    def dense(self) -> np.ndarray:
        L = self.total
        if self.kind == "full":
            return np.ones((L, L), dtype=bool)
        m = np.zeros((L, L), dtype=bool)
        n0 = self.segment_lengths[0]
        m[:n0, :] = True
        edge = n0
        for n in self.segment_lengths[1:]:
            m[edge : edge + n, edge : edge + n] = True
            if self.kind == "leaky":
                m[edge : edge + n, :n0] = True
            edge += n
        return m


def build_semi_attention_mask(segment_lengths) -> SemiAttentionMask:
    return SemiAttentionMask(tuple(int(n) for n in segment_lengths))


def full_attention_mask(segment_lengths) -> SemiAttentionMask:
    return SemiAttentionMask(tuple(int(n) for n in segment_lengths), kind="full")


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

def sinusoidal_embedding(t: int, dim: int) -> np.ndarray:
    """Interleaved (sin, cos) pairs at geometric frequencies from 1 to 1e-4."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    if half == 1:
        freqs = np.array([1.0])
    else:
        freqs = 10000.0 ** (-np.arange(half) / (half - 1))
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(t * freqs)
    out[1::2] = np.cos(t * freqs)
    return nk.as_tensor(out)


def _check_t(t: int, cfg: ModelConfig) -> None:
    if not (0 <= t < cfg.t_max):
        raise ValueError(f"timestep {t} outside [0, {cfg.t_max})")


def timestep_embedding_ops(ops, ph: ParamHandles, t: int):
    """gamma(t): sinusoidal vector through the learned 2-layer silu MLP; (1, e)."""
    cfg = ph.config
    _check_t(t, cfg)
    base = ops.leaf(sinusoidal_embedding(t, cfg.emb).reshape(1, -1))
    h = ops.add_bias(ops.matmul(base, ph["time_mlp.w1"]), ph["time_mlp.b1"])
    h = ops.silu(h)
    return ops.add_bias(ops.matmul(h, ph["time_mlp.w2"]), ph["time_mlp.b2"])


def class_embedding_ops(ops, ph: ParamHandles, category: int):
    """Static per-category embedding row; never depends on the timestep; (1, e)."""
    cfg = ph.config
    if not (0 <= category < len(cfg.categories)):
        raise ValueError(f"unknown category index {category}")
    if not cfg.use_class_embed:
        return ops.leaf(np.zeros((1, cfg.emb), dtype=nk.get_dtype()))
    return ops.slice_rows(ph["class_embed.table"], category, category + 1)


def timestep_embed(t: int, params: DenoiserParams) -> np.ndarray:
    ops = NumpyOps()
    return timestep_embedding_ops(ops, ParamHandles(ops, params), t).reshape(-1)


def class_embed(category: int, params: DenoiserParams) -> np.ndarray:
    ops = NumpyOps()
    return class_embedding_ops(ops, ParamHandles(ops, params), category).reshape(-1)


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

def modulated_resblock_ops(ops, x, emb, ph: ParamHandles, prefix: str):
    """x + mixer(silu(norm(x)) * (1 + scale(emb)) + shift(emb))."""
    a = ops.silu(ops.layer_norm(x, ph[f"{prefix}.norm_gain"], ph[f"{prefix}.norm_bias"]))
    scale = ops.add_bias(ops.matmul(emb, ph[f"{prefix}.scale_w"]), ph[f"{prefix}.scale_b"])
    shift = ops.add_bias(ops.matmul(emb, ph[f"{prefix}.shift_w"]), ph[f"{prefix}.shift_b"])
    m = ops.scale_shift(a, scale, shift)
    out = ops.add_bias(ops.matmul(m, ph[f"{prefix}.mixer_w"]), ph[f"{prefix}.mixer_b"])
    return ops.add(x, out)


def modulated_resblock(x, emb, params: DenoiserParams, block: int = 0) -> np.ndarray:
    """Direct-evaluation convenience wrapper over one resblock."""
    ops = NumpyOps()
    ph = ParamHandles(ops, params)
    return modulated_resblock_ops(ops, nk.as_tensor(x), nk.as_tensor(emb).reshape(1, -1), ph, f"block{block}.res")


def stack_forward(
    ops,
    ph: ParamHandles,
    segs: list,
    embs: list,
    cache_layers=None,
    full_attention: bool = False,
    mask_kind: str | None = None,
    collect: dict | None = None,
):
    """Run the block stack over per-segment token handles.

    segs[0] is the denoising segment (queries over everything); segs[1:] are
    reference segments (self-attention only). `cache_layers`, when given, is a
    per-layer list of (K, V) pairs appended to segment 0's attention keys.
    Returns the final per-segment feature handles.
    """
    cfg = ph.config
    if cache_layers is not None and len(cache_layers) != cfg.blocks:
        raise ValueError(
            f"cache has {len(cache_layers)} layers, model has {cfg.blocks}"
        )
    kind = mask_kind or ("full" if full_attention else "semi")
    hs = [
        ops.add_bias(ops.matmul(s, ph["input_proj.w"]), ph["input_proj.b"])
        for s in segs
    ]
    for i in range(cfg.blocks):
        p = f"block{i}"
        hs = [
            modulated_resblock_ops(ops, h, emb, ph, f"{p}.res")
            for h, emb in zip(hs, embs)
        ]
        hns = [
            ops.layer_norm(h, ph[f"{p}.attn.norm_gain"], ph[f"{p}.attn.norm_bias"])
            for h in hs
        ]
        qs = [ops.matmul(hn, ph[f"{p}.attn.wq"]) for hn in hns]
        ks = [ops.matmul(hn, ph[f"{p}.attn.wk"]) for hn in hns]
        vs = [ops.matmul(hn, ph[f"{p}.attn.wv"]) for hn in hns]
        if kind == "full":
            outs = [ops.attention(q, ks, vs, cfg.heads) for q in qs]
        else:
            k0, v0 = list(ks), list(vs)
            if cache_layers is not None:
                for k_c, v_c in cache_layers[i]:
                    k0.append(ops.leaf(k_c))
                    v0.append(ops.leaf(v_c))
            outs = [ops.attention(qs[0], k0, v0, cfg.heads)]
            for j in range(1, len(segs)):
                if kind == "leaky":
                    outs.append(
                        ops.attention(qs[j], [ks[j], ks[0]], [vs[j], vs[0]], cfg.heads)
                    )
                else:
                    outs.append(ops.attention(qs[j], [ks[j]], [vs[j]], cfg.heads))
        hs = [
            ops.add(h, ops.matmul(o, ph[f"{p}.attn.wo"]))
            for h, o in zip(hs, outs)
        ]
        if collect is not None:
            collect.setdefault("q", []).append([ops.value(q) for q in qs])
            collect.setdefault("kv", []).append(
                [(ops.value(k), ops.value(v)) for k, v in zip(ks, vs)]
            )
            collect.setdefault("features", []).append([ops.value(h) for h in hs])
    return hs


def output_head_ops(ops, ph: ParamHandles, h):
    return ops.add_bias(ops.matmul(h, ph["output_proj.w"]), ph["output_proj.b"])


def reference_tokens(item: ReferenceItem) -> np.ndarray:
    """Input-projection channels for a reference: its latent, a zero mask
    channel, and its own latent again in the composite slot."""
    lat = nk.as_tensor(item.latent)
    zeros = np.zeros((lat.shape[0], 1), dtype=lat.dtype)
    return np.hstack([lat, zeros, lat])


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def forward_reference_branch(item: ReferenceItem, params: DenoiserParams):
    """Run one reference through the stack under its class embedding.

    Takes no timestep by construction. Returns (features_per_layer,
    kv_per_layer) where kv_per_layer[i] is the (K, V) pair exported by
    attention layer i.
    """
    kernel_base = nk.total_kernel_calls()
    ops = NumpyOps()
    ph = ParamHandles(ops, params)
    cfg = params.config
    if item.latent.shape[1] != cfg.d_lat:
        raise ValueError(
            f"reference latent width {item.latent.shape[1]} != d_lat {cfg.d_lat}"
        )
    emb = class_embedding_ops(ops, ph, item.category)
    collect: dict = {}
    stack_forward(ops, ph, [ops.leaf(reference_tokens(item))], [emb], collect=collect)
    features = [layer[0] for layer in collect["features"]]
    kv = [layer[0] for layer in collect["kv"]]
    counters.reference_branch_calls += 1
    counters.reference_kernel_calls += nk.total_kernel_calls() - kernel_base
    return features, kv


def forward_denoise(
    x_tokens: np.ndarray,
    t: int,
    cache_layers,
    params: DenoiserParams,
) -> np.ndarray:
    """Noise prediction for the denoising tokens, attending over [K_X | cached K].

    `cache_layers` is a per-layer list of per-reference (K, V) pairs (empty
    list of layers, or None, for the unconditional branch).
    """
    ops = NumpyOps()
    ph = ParamHandles(ops, params)
    cfg = params.config
    x_tokens = nk.as_tensor(x_tokens)
    if x_tokens.shape[1] != cfg.in_channels:
        raise ValueError(
            f"x tokens have {x_tokens.shape[1]} channels, expected {cfg.in_channels}"
        )
    if cache_layers is not None and len(cache_layers) == 0:
        cache_layers = None
    emb = timestep_embedding_ops(ops, ph, t)
    hs = stack_forward(ops, ph, [ops.leaf(x_tokens)], [emb], cache_layers=cache_layers)
    return output_head_ops(ops, ph, hs[0])


def forward_joint(
    x_tokens: np.ndarray,
    t: int,
    items: list[ReferenceItem],
    params: DenoiserParams,
    full_attention: bool = False,
    collect: dict | None = None,
    mask_kind: str | None = None,
) -> np.ndarray:
    """Single-sequence pass over [X; R_1; ...; R_K] (canonical category order).

    With the block mask this recomputes the reference branches in place; with
    `full_attention` every token attends to every other, which makes the
    reference features depend on X and t (the uncacheable ablation).
    """
    ops = NumpyOps()
    ph = ParamHandles(ops, params)
    cfg = params.config
    items = sort_items(items, cfg)
    segs = [ops.leaf(nk.as_tensor(x_tokens))]
    embs = [timestep_embedding_ops(ops, ph, t)]
    for it in items:
        segs.append(ops.leaf(reference_tokens(it)))
        embs.append(class_embedding_ops(ops, ph, it.category))
    if items:
        counters.joint_reference_encodes += 1
    hs = stack_forward(
        ops, ph, segs, embs,
        full_attention=full_attention, mask_kind=mask_kind, collect=collect,
    )
    return output_head_ops(ops, ph, hs[0])


# ---------------------------------------------------------------------------
# Standalone attention layer (single joint sequence + mask)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttentionWeights:
    norm_gain: np.ndarray
    norm_bias: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    @classmethod
    def from_params(cls, params: DenoiserParams, block: int) -> "AttentionWeights":
        p = f"block{block}.attn"
        t = params.tensors
        return cls(
            t[f"{p}.norm_gain"], t[f"{p}.norm_bias"],
            t[f"{p}.wq"], t[f"{p}.wk"], t[f"{p}.wv"], t[f"{p}.wo"],
        )


def semi_attention_joint(
    seq: np.ndarray,
    mask: SemiAttentionMask,
    weights: AttentionWeights,
    heads: int,
    dense: bool = False,
) -> np.ndarray:
    """One attention layer over the joint sequence with residual add.

    The default path computes only the allowed blocks; `dense=True` computes
    the full logit matrix and applies the mask as -inf before the softmax
    (the independent reference route — same result, different arithmetic).
    """
    seq = nk.as_tensor(seq)
    if seq.shape[0] != mask.total:
        raise nk.ShapeError(
            f"sequence rows {seq.shape[0]} != mask total {mask.total}"
        )
    hn = nk.layer_norm(seq, weights.norm_gain, weights.norm_bias)
    q = nk.matmul(hn, weights.wq)
    k = nk.matmul(hn, weights.wk)
    v = nk.matmul(hn, weights.wv)
    if dense:
        out = dense_masked_attention(q, k, v, mask, heads)
    else:
        lens = mask.segment_lengths
        edges = np.cumsum([0] + list(lens))
        out = np.empty_like(q)
        for j in range(len(lens)):
            rows = slice(edges[j], edges[j + 1])
            if mask.kind == "full":
                ks, vs = [k], [v]
            elif j == 0:
                ks, vs = [k], [v]  # X attends over the whole (canonical) sequence
            elif mask.kind == "leaky":
                ks = [k[rows], k[: edges[1]]]
                vs = [v[rows], v[: edges[1]]]
            else:
                ks, vs = [k[rows]], [v[rows]]
            out[rows], _ = attention_core(q[rows], ks, vs, heads)
    return seq + nk.matmul(out, weights.wo)


def dense_masked_attention(q, k, v, mask: SemiAttentionMask, heads: int) -> np.ndarray:
    """Reference route: full logit matrix, -inf at disallowed pairs, softmax.

    Same result as the blockwise computation, reached through different
    arithmetic; q rows must cover the whole mask."""
    dk = q.shape[1] // heads
    allowed = mask.dense()
    neg_inf = np.array(-np.inf, dtype=q.dtype)
    out = np.empty_like(q)
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        logits = nk.matmul(q[:, sl], k[:, sl].T) / np.sqrt(dk)
        w = nk.softmax_rows(np.where(allowed, logits, neg_inf))
        out[:, sl] = nk.matmul(w, v[:, sl])
    return nk.check_finite(out, "dense_masked_attention")


def dense_attention_weights(
    seq: np.ndarray, mask: SemiAttentionMask, weights: AttentionWeights, heads: int
) -> np.ndarray:
    """Per-head attention weight matrices of the dense masked route."""
    seq = nk.as_tensor(seq)
    hn = nk.layer_norm(seq, weights.norm_gain, weights.norm_bias)
    q = nk.matmul(hn, weights.wq)
    k = nk.matmul(hn, weights.wk)
    dk = q.shape[1] // heads
    L = mask.total
    allowed = mask.dense()
    neg_inf = np.array(-np.inf, dtype=q.dtype)
    ws = np.empty((heads, L, L), dtype=q.dtype)
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        logits = nk.matmul(q[:, sl], k[:, sl].T) / np.sqrt(dk)
        ws[h] = nk.softmax_rows(np.where(allowed, logits, neg_inf))
    return ws


# ---------------------------------------------------------------------------
# Pseudo-VAE: fixed orthonormal patch transform
# ---------------------------------------------------------------------------

class PseudoVae:
    """Non-overlapping patchify followed by a fixed seeded orthonormal map.

    decode is the exact inverse (transpose), so round-trips are lossless up
    to float precision and per-patch norms are preserved.
    """

    def __init__(self, patch: int, channels: int):
        self.patch = patch
        self.channels = channels
        self.d_lat = patch * patch * channels
        gauss = nk.Rng(_VAE_BASIS_SEED)._gen.standard_normal((self.d_lat, self.d_lat))
        q, r = np.linalg.qr(gauss)
        self._basis64 = q * np.sign(np.diag(r))

    @classmethod
    def for_config(cls, cfg: ModelConfig) -> "PseudoVae":
        return cls(cfg.patch, cfg.channels)

    @property
    def basis(self) -> np.ndarray:
        return nk.as_tensor(self._basis64)

    def encode(self, image: np.ndarray) -> np.ndarray:
        image = nk.as_tensor(image)
        if image.ndim != 3 or image.shape[2] != self.channels:
            raise nk.ShapeError(f"expected (H, W, {self.channels}) image, got {image.shape}")
        H, W, c = image.shape
        p = self.patch
        if H % p or W % p:
            raise nk.ShapeError(f"image dims {H}x{W} not divisible by patch {p}")
        h, w = H // p, W // p
        patches = image.reshape(h, p, w, p, c).transpose(0, 2, 1, 3, 4).reshape(h * w, p * p * c)
        return nk.matmul(patches, self.basis)

    def decode(self, tokens: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
        tokens = nk.as_tensor(tokens)
        h, w = grid
        if tokens.shape != (h * w, self.d_lat):
            raise nk.ShapeError(f"tokens {tokens.shape} do not match grid {grid}")
        p, c = self.patch, self.channels
        patches = nk.matmul(tokens, self.basis.T)
        return patches.reshape(h, w, p, p, c).transpose(0, 2, 1, 3, 4).reshape(h * p, w * p, c)


def pseudo_vae_encode(image: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    return PseudoVae.for_config(cfg).encode(image)


def pseudo_vae_decode(tokens: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    return PseudoVae.for_config(cfg).decode(tokens, cfg.latent_grid)
