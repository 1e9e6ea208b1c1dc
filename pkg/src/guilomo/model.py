"""Desk-scale causal transformer whose weight matrices carry LoRA-MoE adapters.

The base network (embeddings, attention and feed-forward matrices, output
head) is frozen at random initialization and stands in for a pretrained
backbone. Any subset of the seven per-layer matrices -- q, k, v, o in
attention and gate, up, down in the feed-forward block -- can be adapted,
each with its own router, expert bank, and selection vectors. The model
runs in one of two modes: ``search`` (masked experts, selection vectors
trainable) or ``final`` (pruned experts from an allocation plan).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gsv import init_gsv
from .lora_moe import (
    LoRAMoELayerState,
    MaterializedModule,
    Router,
    RoutingStats,
    layer_forward_final,
    layer_forward_search,
    make_expert,
)
from .numerics import Tensor, embedding, gelu, linear, matmul, reshape, softmax, transpose
from .seeding import derive_seed, rng_for

__all__ = ["ToyTransformerConfig", "ToyTransformer", "ALL_TARGETS", "MHA_TARGETS", "FFN_TARGETS"]

MHA_TARGETS = ("q", "k", "v", "o")
FFN_TARGETS = ("gate", "up", "down")
ALL_TARGETS = MHA_TARGETS + FFN_TARGETS


@dataclass
class ToyTransformerConfig:
    layers: int = 4
    d_model: int = 32
    d_ff: int = 64
    heads: int = 4
    vocab: int = 32
    max_seq: int = 32
    lora_targets: tuple[str, ...] = ALL_TARGETS

    def __post_init__(self):
        self.lora_targets = tuple(self.lora_targets)
        if self.d_ff <= self.d_model:
            raise ValueError("ToyTransformerConfig: d_ff must exceed d_model")
        if self.d_model % self.heads != 0:
            raise ValueError("ToyTransformerConfig: d_model must be divisible by heads")
        unknown = set(self.lora_targets) - set(ALL_TARGETS)
        if unknown:
            raise ValueError(f"ToyTransformerConfig: unknown lora targets {sorted(unknown)}")

    def target_dims(self, name: str) -> tuple[int, int]:
        """(output dim, input dim) of a per-layer weight matrix."""
        if name in ("q", "k", "v", "o"):
            return self.d_model, self.d_model
        if name in ("gate", "up"):
            return self.d_ff, self.d_model
        if name == "down":
            return self.d_model, self.d_ff
        raise ValueError(f"unknown target matrix {name!r}")


def _rmsnorm(x: Tensor, eps: float = 1e-6) -> Tensor:
    scale = ((x * x).mean(axis=-1, keepdims=True) + eps) ** -0.5
    return x * scale


def _causal_bias(t: int) -> Tensor:
    bias = np.triu(np.full((t, t), -1e9), k=1)
    return Tensor(bias.reshape(1, 1, t, t))


class ToyTransformer:
    """Frozen-base transformer with per-matrix LoRA-MoE adapters."""

    def __init__(self, config: ToyTransformerConfig, e_max: int = 8, r_max: int = 8,
                 lora_alpha: float = 16.0, scale_mode: str = "alpha_over_r",
                 routing_k: int = 2, seed: int = 0):
        self.config = config
        self.e_max = e_max
        self.r_max = r_max
        self.lora_alpha = lora_alpha
        self.scale_mode = scale_mode
        self.routing_k = routing_k
        self.seed = seed
        self.mode = "search"
        self._build_base(seed)
        self.adapters: dict[tuple[int, str], LoRAMoELayerState | MaterializedModule] = {}
        for layer in range(config.layers):
            for name in config.lora_targets:
                self.adapters[(layer, name)] = self._build_search_module(layer, name)

    # -- construction ----------------------------------------------------

    def _build_base(self, seed: int) -> None:
        cfg = self.config
        d, d_ff = cfg.d_model, cfg.d_ff

        def frozen(label, shape, std):
            values = rng_for(seed, "base", label).normal(0.0, std, size=shape)
            return Tensor(values, name=f"base.{label}")

        self.base: dict[str, Tensor] = {
            "tok_emb": frozen("tok_emb", (cfg.vocab, d), 0.02),
            "pos_emb": frozen("pos_emb", (cfg.max_seq, d), 0.02),
            "head": frozen("head", (cfg.vocab, d), d ** -0.5),
        }
        for layer in range(cfg.layers):
            for name in ALL_TARGETS:
                d1, d2 = cfg.target_dims(name)
                self.base[f"layer{layer}.{name}"] = frozen(
                    f"layer{layer}.{name}", (d1, d2), d2 ** -0.5
                )

    def _build_search_module(self, layer: int, name: str) -> LoRAMoELayerState:
        d1, d2 = self.config.target_dims(name)
        label = f"layer{layer}.{name}"
        base_seed = derive_seed(self.seed, "adapter", label)
        experts = [
            make_expert(d1, d2, self.r_max, self.lora_alpha,
                        derive_seed(base_seed, "expert", j), name=f"{label}.expert{j}")
            for j in range(self.e_max)
        ]
        router = Router(Tensor(
            rng_for(base_seed, "router").normal(0.0, 0.02, size=(d2, self.e_max)),
            requires_grad=True, name=f"{label}.router",
        ))
        expert_gsv = init_gsv(self.e_max, derive_seed(base_seed, "gsv_expert"),
                              "expert", name=f"{label}.gsv_expert")
        rank_gsvs = [
            init_gsv(self.r_max, derive_seed(base_seed, "gsv_rank", j), "rank",
                     name=f"{label}.gsv_rank{j}")
            for j in range(self.e_max)
        ]
        return LoRAMoELayerState(
            W0=self.base[label], router=router, experts=experts,
            expert_gsv=expert_gsv, rank_gsvs=rank_gsvs,
            routing_k=self.routing_k, scale_mode=self.scale_mode, name=label,
        )

    # -- parameter access --------------------------------------------------

    def search_modules(self) -> dict[tuple[int, str], LoRAMoELayerState]:
        if self.mode != "search":
            raise RuntimeError("model is not in search mode")
        return self.adapters  # type: ignore[return-value]

    def named_model_parameters(self) -> dict[str, Tensor]:
        """Trainable adapter parameters (experts and routers), no GSVs."""
        params: dict[str, Tensor] = {}
        for (layer, name), module in self.adapters.items():
            prefix = f"layer{layer}.{name}"
            params[f"{prefix}.router"] = module.router.weight
            for j, expert in enumerate(module.experts):
                params[f"{prefix}.expert{j}.P"] = expert.P
                params[f"{prefix}.expert{j}.lam"] = expert.lam
                params[f"{prefix}.expert{j}.Q"] = expert.Q
        return params

    def named_gsv_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        if self.mode != "search":
            return params
        for (layer, name), module in self.adapters.items():
            prefix = f"layer{layer}.{name}"
            params[f"{prefix}.gsv_expert"] = module.expert_gsv.logits
            for j, gsv in enumerate(module.rank_gsvs):
                params[f"{prefix}.gsv_rank{j}"] = gsv.logits
        return params

    def named_base(self) -> dict[str, Tensor]:
        return dict(self.base)

    def selections(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        """Current (n_star, active rank choices) per adapted module."""
        if self.mode != "search":
            raise RuntimeError("selections are only defined in search mode")
        return {
            f"layer{layer}.{name}": module.selections()
            for (layer, name), module in self.adapters.items()
        }

    def base_fingerprint(self) -> int:
        import zlib
        crc = 0
        for name in sorted(self.base):
            crc = zlib.crc32(self.base[name].values.tobytes(), crc)
        return crc

    # -- forward -----------------------------------------------------------

    def _apply(self, layer: int, name: str, x: Tensor,
               stats: list[RoutingStats] | None) -> Tensor:
        module = self.adapters.get((layer, name))
        if module is None:
            return linear(x, self.base[f"layer{layer}.{name}"])
        if self.mode == "search":
            out, st = layer_forward_search(x, module)
        else:
            out, st = layer_forward_final(x, module)
        if stats is not None:
            stats.append(st)
        return out

    def forward(self, tokens: np.ndarray) -> tuple[Tensor, list[RoutingStats]]:
        """Logits over the vocabulary for a (batch, time) token array."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError(f"forward: tokens must be 2-D, got shape {tokens.shape}")
        cfg = self.config
        batch, time = tokens.shape
        if time > cfg.max_seq:
            raise ValueError(f"forward: sequence length {time} exceeds max_seq {cfg.max_seq}")
        stats: list[RoutingStats] = []
        x = embedding(self.base["tok_emb"], tokens) + embedding(
            self.base["pos_emb"], np.arange(time)
        )
        heads, d_head = cfg.heads, cfg.d_model // cfg.heads
        bias = _causal_bias(time)
        for layer in range(cfg.layers):
            h = _rmsnorm(x)
            q = self._split_heads(self._apply(layer, "q", h, stats), batch, time, heads, d_head)
            k = self._split_heads(self._apply(layer, "k", h, stats), batch, time, heads, d_head)
            v = self._split_heads(self._apply(layer, "v", h, stats), batch, time, heads, d_head)
            scores = matmul(q, k.swap_last_axes()) * (d_head ** -0.5) + bias
            ctx = matmul(softmax(scores), v)
            merged = reshape(transpose(ctx, (0, 2, 1, 3)), (batch, time, cfg.d_model))
            x = x + self._apply(layer, "o", merged, stats)
            h = _rmsnorm(x)
            inner = gelu(self._apply(layer, "gate", h, stats)) * self._apply(layer, "up", h, stats)
            x = x + self._apply(layer, "down", inner, stats)
        logits = linear(_rmsnorm(x), self.base["head"])
        return logits, stats

    @staticmethod
    def _split_heads(t: Tensor, batch: int, time: int, heads: int, d_head: int) -> Tensor:
        return transpose(reshape(t, (batch, time, heads, d_head)), (0, 2, 1, 3))
