"""Causal decoder-only transformer (GPT-style) on the autodiff tensors.

Pre-norm residual blocks, learned absolute position embeddings are added by
the caller (inputs arrive already embedded), ReLU MLP with 4x expansion.
Every forward pass updates instrumentation counters (token positions seen,
attention multiply-accumulates) so cost accounting can be checked exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, dropout, layer_norm, linear, relu, softmax, swapaxes


@dataclass
class TransformerConfig:
    n_layers: int = 3
    n_heads: int = 3
    embed_dim: int = 128
    max_tokens: int = 4096
    dropout_p: float = 0.1
    activation: str = "relu"

    def __post_init__(self):
        if self.n_layers < 0 or self.n_heads < 1 or self.embed_dim < 1:
            raise ValueError("invalid transformer dimensions")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation: {self.activation}")
        if self.embed_dim // self.n_heads < 1:
            raise ValueError("more heads than embedding dimensions")

    @property
    def head_dim(self) -> int:
        # floor division keeps 3-head/128-dim configs legal; heads are
        # concatenated to n_heads*head_dim and projected back to embed_dim
        return self.embed_dim // self.n_heads


@dataclass
class Counters:
    token_positions: int = 0
    attn_macs: int = 0

    def reset(self) -> None:
        self.token_positions = 0
        self.attn_macs = 0

    def snapshot(self) -> dict:
        return {"token_positions": self.token_positions, "attn_macs": self.attn_macs}


class Module:
    """Minimal parameter container; attribute order fixes checkpoint layout."""

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self.__dict__.setdefault("_params", {})[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            self.__dict__.setdefault("_childlists", {})[name] = list(value)
        object.__setattr__(self, name, value)

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in self.__dict__.get("_params", {}).items():
            out[prefix + name] = p
        for name, child in self.__dict__.get("_children", {}).items():
            out.update(child.named_parameters(prefix + name + "."))
        for name, children in self.__dict__.get("_childlists", {}).items():
            for i, child in enumerate(children):
                out.update(child.named_parameters(f"{prefix}{name}.{i}."))
        return out


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.weight = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias)


class PositionEmbedding(Module):
    """Learned absolute position table, indexed by token position."""

    def __init__(self, max_tokens: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = Tensor((rng.standard_normal((max_tokens, dim)) * 0.02).astype(dtype),
                             requires_grad=True)

    def __call__(self, length: int) -> Tensor:
        if length > self.weight.shape[0]:
            raise ValueError("context overflow")
        return self.weight[:length]


_MASK_CACHE: dict[tuple[int, str], np.ndarray] = {}


def _causal_mask(length: int, dtype) -> np.ndarray:
    key = (length, np.dtype(dtype).str)
    mask = _MASK_CACHE.get(key)
    if mask is None:
        mask = np.triu(np.full((length, length), -np.inf, dtype=dtype), k=1)
        if len(_MASK_CACHE) > 32:
            _MASK_CACHE.clear()
        _MASK_CACHE[key] = mask
    return mask


class CausalSelfAttention(Module):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator,
                 counters: Counters, dtype=np.float32):
        self.cfg = cfg
        self.counters = counters
        width = cfg.n_heads * cfg.head_dim
        self.qkv = Linear(cfg.embed_dim, 3 * width, rng, dtype)
        self.proj = Linear(width, cfg.embed_dim, rng, dtype)

    def __call__(self, x: Tensor, rng: np.random.Generator | None, train: bool) -> Tensor:
        b, l, _ = x.shape
        h, hd = self.cfg.n_heads, self.cfg.head_dim
        qkv = self.qkv(x).reshape(b, l, 3, h, hd)
        q = swapaxes(qkv[:, :, 0], 1, 2)  # [b, h, l, hd]
        k = swapaxes(qkv[:, :, 1], 1, 2)
        v = swapaxes(qkv[:, :, 2], 1, 2)
        scale = 1.0 / np.sqrt(hd)
        scores = (q @ swapaxes(k, 2, 3)) * scale
        scores = scores + Tensor(_causal_mask(l, x.dtype))
        att = softmax(scores, axis=-1, check_finite=False)
        att = dropout(att, self.cfg.dropout_p, rng, train)
        out = att @ v  # [b, h, l, hd]
        self.counters.attn_macs += 2 * b * h * l * l * hd
        out = swapaxes(out, 1, 2).reshape(b, l, h * hd)
        return self.proj(out)


class Block(Module):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator,
                 counters: Counters, dtype=np.float32):
        self.cfg = cfg
        self.ln1 = LayerNorm(cfg.embed_dim, dtype)
        self.attn = CausalSelfAttention(cfg, rng, counters, dtype)
        self.ln2 = LayerNorm(cfg.embed_dim, dtype)
        self.fc1 = Linear(cfg.embed_dim, 4 * cfg.embed_dim, rng, dtype)
        self.fc2 = Linear(4 * cfg.embed_dim, cfg.embed_dim, rng, dtype)

    def __call__(self, x: Tensor, rng: np.random.Generator | None, train: bool) -> Tensor:
        x = x + dropout(self.attn(self.ln1(x), rng, train), self.cfg.dropout_p, rng, train)
        h = self.fc2(relu(self.fc1(self.ln2(x))))
        return x + dropout(h, self.cfg.dropout_p, rng, train)


class Transformer(Module):
    """Stack of pre-norm blocks plus final layer norm.

    Inputs must already carry modality and position embeddings. Output
    position i depends only on input positions <= i.
    """

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.counters = Counters()
        self.blocks = [Block(cfg, rng, self.counters, dtype) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.embed_dim, dtype)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None,
                 train: bool = False) -> Tensor:
        if x.ndim != 3:
            raise ValueError("expected [batch, length, embed_dim] input")
        b, l, d = x.shape
        if d != self.cfg.embed_dim:
            raise ValueError(f"embedding dim {d} does not match config {self.cfg.embed_dim}")
        if l < 1:
            raise ValueError("empty sequence")
        if l > self.cfg.max_tokens:
            raise ValueError("context overflow")
        self.counters.token_positions += b * l
        for block in self.blocks:
            x = block(x, rng, train)
        return self.ln_f(x)
