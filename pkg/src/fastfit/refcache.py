"""Reference KV cache: one-time precompute, concatenation, cached attention.

Because reference features depend only on their latents, their class
embeddings, and the weights — never on the timestep or the denoising tokens —
their per-layer K/V matrices can be computed once per request and reused in
every denoising step without changing the result.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from . import weightsio
from .autodiff import attention_core
from .denoiser import DenoiserParams, ReferenceItem, forward_reference_branch, sort_items


@dataclass(frozen=True)
class ReferenceKVCache:
    """Per-layer, per-reference (K, V) pairs in canonical category order."""

    layers: tuple[tuple[tuple[np.ndarray, np.ndarray], ...], ...]
    segment_lengths: tuple[int, ...]
    categories: tuple[int, ...]
    fingerprint: str

    def __post_init__(self):
        for layer in self.layers:
            if len(layer) != len(self.segment_lengths):
                raise ValueError("per-layer reference count mismatch")
            for (k, v), n in zip(layer, self.segment_lengths):
                if k.shape[0] != n or v.shape[0] != n:
                    raise ValueError("cached K/V rows do not match segment lengths")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_references(self) -> int:
        return len(self.segment_lengths)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for layer in self.layers:
            for k, v in layer:
                h.update(np.ascontiguousarray(k).tobytes())
                h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        tensors = {}
        for i, layer in enumerate(self.layers):
            for j, (k, v) in enumerate(layer):
                tensors[f"layer{i}.ref{j}.k"] = k
                tensors[f"layer{i}.ref{j}.v"] = v
        weightsio.save_tensors(
            path,
            tensors,
            meta={
                "segment_lengths": list(self.segment_lengths),
                "categories": list(self.categories),
                "fingerprint": self.fingerprint,
            },
        )


def fingerprint_for(items: list[ReferenceItem], params: DenoiserParams) -> str:
    """Hash of (weights, reference latents, categories); identifies a cache."""
    items = sort_items(items, params.config)
    h = hashlib.sha256()
    h.update(params.fingerprint().encode())
    for it in items:
        h.update(bytes([it.category]))
        h.update(np.ascontiguousarray(it.latent, dtype="<f8").tobytes())
    return h.hexdigest()


def precompute_cache(items: list[ReferenceItem], params: DenoiserParams) -> ReferenceKVCache:
    """One forward pass per reference; cost independent of the step count.

    K=0 yields an empty cache (layers of empty tuples) and the denoiser falls
    back to plain self-attention.
    """
    items = sort_items(items, params.config)
    per_item_kv = []
    for it in items:
        if it.latent.shape[0] < 1:
            raise ValueError("empty reference latent")
        _, kv = forward_reference_branch(it, params)
        per_item_kv.append(kv)
    layers = []
    for layer_idx in range(params.config.blocks):
        layer = tuple(
            (_freeze(kv[layer_idx][0]), _freeze(kv[layer_idx][1]))
            for kv in per_item_kv
        )
        layers.append(layer)
    return ReferenceKVCache(
        layers=tuple(layers),
        segment_lengths=tuple(it.latent.shape[0] for it in items),
        categories=tuple(it.category for it in items),
        fingerprint=fingerprint_for(items, params),
    )


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def concat_kv(dynamic: tuple[np.ndarray, np.ndarray], cache_layer) -> tuple[np.ndarray, np.ndarray]:
    """[K_X; K_1; ...; K_K] and [V_X; V_1; ...; V_K], canonical order."""
    k_x, v_x = (nk.as_tensor(dynamic[0]), nk.as_tensor(dynamic[1]))
    for k_c, v_c in cache_layer:
        if k_c.shape[1] != k_x.shape[1] or v_c.shape[1] != v_x.shape[1]:
            raise nk.ShapeError("cached K/V width does not match the dynamic tensors")
    k_full = np.vstack([k_x] + [k for k, _ in cache_layer])
    v_full = np.vstack([v_x] + [v for _, v in cache_layer])
    return k_full, v_full


def cached_attention(q_x: np.ndarray, k_full: np.ndarray, v_full: np.ndarray, heads: int) -> np.ndarray:
    """softmax(Q_X K_fullᵀ / sqrt(d_k)) V_full per head, queries X-only.

    No mask is needed: the denoising rows attend to everything.
    """
    out, _ = attention_core(nk.as_tensor(q_x), [nk.as_tensor(k_full)], [nk.as_tensor(v_full)], heads)
    return out
