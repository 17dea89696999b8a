"""Source-replies graph attention with dot-product coefficients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .global_branch import xavier


@dataclass(frozen=True)
class Neighborhood:
    """Sorted neighbour lists N(i), self-loops included, symmetric."""

    neighbors: tuple[tuple[int, ...], ...]

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]]) -> "Neighborhood":
        sets = [{i} for i in range(n)]
        for a, b in edges:
            if not (0 <= a < n and 0 <= b < n):
                raise IndexError(f"edge ({a}, {b}) out of range for {n} nodes")
            sets[a].add(b)
            sets[b].add(a)
        return cls(tuple(tuple(sorted(s)) for s in sets))

    @property
    def n(self) -> int:
        return len(self.neighbors)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbors], dtype=np.float64)

    def mask(self) -> np.ndarray:
        m = np.zeros((self.n, self.n), dtype=bool)
        for i, nb in enumerate(self.neighbors):
            m[i, list(nb)] = True
        return m

    def permuted(self, perm: Sequence[int]) -> "Neighborhood":
        """Relabel so that old node ``perm[k]`` becomes new node ``k``."""
        inv = np.argsort(perm)
        edges = [(inv[i], inv[j]) for i, nb in enumerate(self.neighbors) for j in nb]
        return Neighborhood.from_edges(self.n, edges)


@dataclass
class GatParams:
    W: Tensor

    def __post_init__(self):
        if self.W.ndim != 2 or self.W.shape[0] != self.W.shape[1]:
            raise DimensionError(f"GAT weight must be square, got {self.W.shape}")

    @classmethod
    def init(cls, d: int, rng, name: str = "gat.W") -> "GatParams":
        return cls(xavier(rng, d, d, name))


def gat_scores(F: Tensor, W: GatParams) -> Tensor:
    """Dense n x n matrix of (W f_i)^T (W f_j)."""
    P = ad.matmul_ordered(W.W, F)
    Pt = P.T
    return ad.matmul_ordered(Pt, P)


def gat_coefficients(F: Tensor, nb: Neighborhood, W: GatParams) -> dict[tuple[int, int], float]:
    E = gat_scores(F, W).data
    return {(i, j): float(E[i, j]) for i, js in enumerate(nb.neighbors) for j in js}


def gat_attention(F: Tensor, nb: Neighborhood, W: GatParams) -> Tensor:
    """Row-normalised coefficients alpha (n x n, zero off the neighbourhood)."""
    if nb.n != F.shape[1]:
        raise DimensionError(f"neighbourhood has {nb.n} nodes, features have {F.shape[1]}")
    return ad.masked_softmax(gat_scores(F, W), nb.mask())


def gat_forward(F: Tensor, nb: Neighborhood, W: GatParams, strict_eq7: bool = True,
                mask: np.ndarray | None = None, degree_scale: np.ndarray | None = None) -> Tensor:
    """f'_i = (1/K_i) sum_j alpha_ij f_j; drop the 1/K_i with ``strict_eq7=False``.

    ``mask`` and ``degree_scale`` (d x n matrix of 1/K_i) can be passed in
    precomputed.
    """
    if nb.n != F.shape[1]:
        raise DimensionError(f"neighbourhood has {nb.n} nodes, features have {F.shape[1]}")
    alpha = ad.masked_softmax(gat_scores(F, W), nb.mask() if mask is None else mask)
    out = ad.matmul_ordered(F, alpha.T, sort_terms=True)
    if not strict_eq7:
        return out
    if degree_scale is None:
        degree_scale = np.broadcast_to(1.0 / nb.sizes, F.shape)
    return ad.mul(out, Tensor(degree_scale))


@dataclass
class LocalBranch:
    """Stack of GAT layers; each layer averages its heads."""

    layers: list[list[GatParams]]
    strict_eq7: bool = True

    @classmethod
    def init(cls, d: int, rng, n_layers: int = 1, heads: int = 1, strict_eq7: bool = True):
        layers = [[GatParams.init(d, rng, f"local.{l}.{h}.W") for h in range(heads)] for l in range(n_layers)]
        return cls(layers, strict_eq7)

    def __call__(self, F: Tensor, nb: Neighborhood, mask=None, degree_scale=None) -> Tensor:
        x = F
        for heads in self.layers:
            outs = [gat_forward(x, nb, w, self.strict_eq7, mask, degree_scale) for w in heads]
            x = outs[0]
            for o in outs[1:]:
                x = x + o
            if len(outs) > 1:
                x = ad.scale(x, 1.0 / len(outs))
        return x

    def parameters(self) -> dict[str, Tensor]:
        return {g.W.name: g.W for heads in self.layers for g in heads}
