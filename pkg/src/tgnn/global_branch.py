"""Source-replies transformer: multi-head self-attention with a skip connection."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True, name=name)


@dataclass
class MultiHeadAttentionParams:
    """Per-head input projections (d x d_h), per-head value maps W'_i (d_h x d_h)
    and the output map W^o ((h*d_h) x d)."""

    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    w_head: list[Tensor]
    w_out: Tensor

    def __post_init__(self):
        h = len(self.wq)
        if not (len(self.wk) == len(self.wv) == len(self.w_head) == h) or h == 0:
            raise ValueError("inconsistent head count")
        d, dh = self.wq[0].shape
        for w in (*self.wq, *self.wk, *self.wv):
            if w.shape != (d, dh):
                raise DimensionError(f"input projection shape {w.shape}, expected {(d, dh)}")
        for w in self.w_head:
            if w.shape != (dh, dh):
                raise DimensionError(f"head map shape {w.shape}, expected {(dh, dh)}")
        if self.w_out.shape != (h * dh, d):
            raise DimensionError(f"output map shape {self.w_out.shape}, expected {(h * dh, d)}")

    @property
    def heads(self) -> int:
        return len(self.wq)

    @property
    def dim(self) -> int:
        return self.wq[0].shape[0]

    @property
    def head_dim(self) -> int:
        return self.wq[0].shape[1]

    @classmethod
    def init(cls, d: int, heads: int, rng: np.random.Generator, prefix: str = "mha"):
        if heads < 1 or d % heads:
            raise ValueError(f"head count {heads} must divide model dim {d}")
        dh = d // heads
        mk = lambda tag, i, a, b: xavier(rng, a, b, f"{prefix}.{tag}.{i}")  # noqa: E731
        return cls(
            wq=[mk("wq", i, d, dh) for i in range(heads)],
            wk=[mk("wk", i, d, dh) for i in range(heads)],
            wv=[mk("wv", i, d, dh) for i in range(heads)],
            w_head=[mk("w_head", i, dh, dh) for i in range(heads)],
            w_out=xavier(rng, heads * dh, d, f"{prefix}.w_out"),
        )

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for w in (*self.wq, *self.wk, *self.wv, *self.w_head, self.w_out):
            out[w.name] = w
        return out


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Return the score matrix S = softmax(q k^T / sqrt(d_k)) and S v."""
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"query/key width mismatch: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"key/value length mismatch: {k.shape} vs {v.shape}")
    scores = ad.softmax(ad.scale(q @ k.T, 1.0 / np.sqrt(k.shape[1])), axis=-1)
    return scores, scores @ v


def multi_head_attention(params: MultiHeadAttentionParams, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    outs = []
    for wq, wk, wv, wh in zip(params.wq, params.wk, params.wv, params.w_head):
        _, attended = scaled_dot_product_attention(q @ wq, k @ wk, v @ wv)
        outs.append(attended @ wh)
    cat = outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)
    return cat @ params.w_out


@dataclass
class TransformerBlock:
    attention: MultiHeadAttentionParams
    # optional post-norm feed-forward sublayer; absent by default
    ffn_in: Optional[Tensor] = None
    ffn_out: Optional[Tensor] = None

    @classmethod
    def init(cls, d: int, heads: int, rng, prefix: str, norm_ffn: bool = False):
        attn = MultiHeadAttentionParams.init(d, heads, rng, f"{prefix}.attn")
        if not norm_ffn:
            return cls(attn)
        return cls(attn, xavier(rng, d, 2 * d, f"{prefix}.ffn_in"), xavier(rng, 2 * d, d, f"{prefix}.ffn_out"))

    def __call__(self, x: Tensor) -> Tensor:
        x = multi_head_attention(self.attention, x, x, x) + x
        if self.ffn_in is not None:
            x = ad.layer_norm(x)
            x = ad.layer_norm(x + ad.relu(x @ self.ffn_in) @ self.ffn_out)
        return x

    def parameters(self) -> dict[str, Tensor]:
        out = self.attention.parameters()
        if self.ffn_in is not None:
            out[self.ffn_in.name] = self.ffn_in
            out[self.ffn_out.name] = self.ffn_out
        return out


@dataclass
class GlobalBranchOutput:
    F_g: Tensor  # d x n
    f_g: Tensor  # d

    rows: Tensor = field(repr=False, default=None)


def global_forward(F: Tensor, blocks) -> GlobalBranchOutput:
    """Self-attention over node features (Q = K = V = F^T) with skip connection.

    ``blocks`` is a :class:`TransformerBlock`, a bare
    :class:`MultiHeadAttentionParams`, or a list of blocks applied in turn.
    """
    if isinstance(blocks, MultiHeadAttentionParams):
        blocks = [TransformerBlock(blocks)]
    elif isinstance(blocks, TransformerBlock):
        blocks = [blocks]
    x = F.T
    for block in blocks:
        x = block(x)
    F_g = x.T
    return GlobalBranchOutput(F_g=F_g, f_g=F_g[:, 0], rows=x)
