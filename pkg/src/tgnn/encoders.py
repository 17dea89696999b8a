"""Message and image encoders.

These are small trainable stand-ins for a pretrained sentence encoder and a
pretrained CNN. Anything exposing the same ``encode`` methods can be swapped
in; :class:`PrecomputedMessageEncoder` and :class:`PrecomputedImageEncoder`
read vectors exported by an external model.
"""
from __future__ import annotations

import hashlib
import unicodedata
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np

from .autodiff import DimensionError, DomainError, Tensor, embedding_bag, matmul, stack


class _Blank:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "BLANK"


#: Placeholder for a missing image; encoded as an all-zero image.
BLANK = _Blank()


def _strip_punct(token: str) -> str:
    start, end = 0, len(token)
    while start < end and unicodedata.category(token[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(token[end - 1]).startswith("P"):
        end -= 1
    return token[start:end]


def tokenize(text: str) -> list[str]:
    """Lowercase, split on unicode whitespace, strip leading/trailing punctuation."""
    out = []
    for raw in text.lower().split():
        tok = _strip_punct(raw)
        if tok:
            out.append(tok)
    return out


def token_bucket(token: str, seed: int, n_buckets: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")).digest()
    return int.from_bytes(digest, "little") % n_buckets


class MessageEncoder(Protocol):
    dim: int

    def encode(self, text: str, key: Optional[str] = None) -> Tensor: ...

    def parameters(self) -> dict[str, Tensor]: ...


class ImageEncoder(Protocol):
    dim: int

    def encode(self, image, key: Optional[str] = None) -> Tensor: ...

    def parameters(self) -> dict[str, Tensor]: ...


class HashedBagEncoder:
    """Mean of hashed-token embeddings. Empty text encodes to the zero vector."""

    def __init__(self, dim: int = 32, n_buckets: int = 4096, hash_seed: int = 0,
                 rng: Optional[np.random.Generator] = None, trainable: bool = True,
                 init_std: float = 1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.n_buckets = n_buckets
        self.hash_seed = hash_seed
        self.table = Tensor(init_std * rng.standard_normal((n_buckets, dim)), requires_grad=trainable,
                            name="encoder.table")
        self._cache: dict[str, list[int]] = {}

    def buckets(self, text: str) -> list[int]:
        hit = self._cache.get(text)
        if hit is None:
            hit = [token_bucket(t, self.hash_seed, self.n_buckets) for t in tokenize(text)]
            self._cache[text] = hit
        return hit

    def encode(self, text: str, key: Optional[str] = None) -> Tensor:
        return embedding_bag(self.table, self.buckets(text))

    def parameters(self) -> dict[str, Tensor]:
        return {"encoder.table": self.table} if self.table.requires_grad else {}

    def state(self) -> dict[str, Tensor]:
        return {"encoder.table": self.table}


def _read_vectors(path) -> dict[str, np.ndarray]:
    """Parse ``id<TAB>dim<TAB>v1 v2 ...`` records; ``#`` lines are comments."""
    out: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            key, dim, values = line.split("\t")
            vec = np.array([float(x) for x in values.split()], dtype=np.float64)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed embedding record") from exc
        if vec.size != int(dim):
            raise DimensionError(f"{path}:{lineno}: declared dim {dim}, found {vec.size}")
        out[key] = vec
    return out


def write_vectors(path, vectors: Mapping[str, Sequence[float]]) -> None:
    lines = ["# tgnn-embeddings 1"]
    for key, vec in vectors.items():
        vec = np.asarray(vec, dtype=np.float64)
        lines.append(f"{key}\t{vec.size}\t" + " ".join(repr(float(x)) for x in vec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class PrecomputedMessageEncoder:
    """Looks message vectors up by key (``<conversation id>:<message id>``)."""

    def __init__(self, vectors: Mapping[str, np.ndarray]):
        dims = {v.size for v in vectors.values()}
        if len(dims) != 1:
            raise DimensionError(f"precomputed vectors have mixed dims {sorted(dims)}")
        self.dim = dims.pop()
        self.vectors = dict(vectors)

    @classmethod
    def from_file(cls, path) -> "PrecomputedMessageEncoder":
        return cls(_read_vectors(path))

    def encode(self, text: str, key: Optional[str] = None) -> Tensor:
        if key is None or key not in self.vectors:
            raise KeyError(f"no precomputed embedding for {key!r}")
        return Tensor(self.vectors[key])

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def state(self) -> dict[str, Tensor]:
        return {}


def patch_stats(image: np.ndarray, grid: int) -> np.ndarray:
    """Per-patch mean and variance for each channel, on a ``grid`` x ``grid`` layout.

    Output order: patch row, patch column, then (mean, var) per channel.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise DimensionError(f"image must be HxWxC, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise DomainError("image contains non-finite pixels")
    H, W, C = img.shape
    rows = np.array_split(np.arange(H), grid)
    cols = np.array_split(np.arange(W), grid)
    out = np.empty((grid, grid, C, 2))
    for a, r in enumerate(rows):
        for b, c in enumerate(cols):
            patch = img[r[0] : r[-1] + 1, c[0] : c[-1] + 1].reshape(-1, C)
            out[a, b, :, 0] = patch.mean(axis=0)
            out[a, b, :, 1] = patch.var(axis=0)
    return out.reshape(-1)


class PatchStatsEncoder:
    """Grid patch statistics followed by a trainable affine map to ``dim``."""

    def __init__(self, dim: int = 16, grid: int = 4, image_shape=(32, 32, 3),
                 rng: Optional[np.random.Generator] = None, trainable: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.grid = grid
        self.image_shape = tuple(image_shape)
        n_stats = grid * grid * self.image_shape[2] * 2
        bound = np.sqrt(6.0 / (n_stats + dim))
        self.weight = Tensor(rng.uniform(-bound, bound, (dim, n_stats)), requires_grad=trainable,
                             name="image.weight")
        b = 1.0 / np.sqrt(n_stats)
        self.bias = Tensor(rng.uniform(-b, b, dim), requires_grad=trainable, name="image.bias")
        self._blank_stats = patch_stats(np.zeros(self.image_shape), grid)

    def stats(self, image) -> np.ndarray:
        if image is BLANK or image is None:
            return self._blank_stats
        return patch_stats(image, self.grid)

    def encode_stats(self, stats: np.ndarray) -> Tensor:
        return matmul(self.weight, Tensor(stats)) + self.bias

    def encode(self, image, key: Optional[str] = None) -> Tensor:
        return self.encode_stats(self.stats(image))

    def parameters(self) -> dict[str, Tensor]:
        if not self.weight.requires_grad:
            return {}
        return {"image.weight": self.weight, "image.bias": self.bias}

    def state(self) -> dict[str, Tensor]:
        return {"image.weight": self.weight, "image.bias": self.bias}


class PrecomputedImageEncoder:
    """Looks raw visual features up by conversation id; BLANK maps to ``blank_vector``."""

    def __init__(self, vectors: Mapping[str, np.ndarray], blank_vector: Optional[np.ndarray] = None):
        dims = {v.size for v in vectors.values()}
        if len(dims) != 1:
            raise DimensionError(f"precomputed vectors have mixed dims {sorted(dims)}")
        self.dim = dims.pop()
        self.vectors = dict(vectors)
        self.blank = np.zeros(self.dim) if blank_vector is None else np.asarray(blank_vector, float)

    @classmethod
    def from_file(cls, path) -> "PrecomputedImageEncoder":
        vecs = _read_vectors(path)
        blank = vecs.pop("BLANK", None)
        return cls(vecs, blank)

    def encode(self, image, key: Optional[str] = None) -> Tensor:
        if image is BLANK or image is None:
            return Tensor(self.blank)
        if key is None or key not in self.vectors:
            raise KeyError(f"no precomputed image feature for {key!r}")
        return Tensor(self.vectors[key])

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def state(self) -> dict[str, Tensor]:
        return {}


def encode_message(text: str, enc: MessageEncoder, key: Optional[str] = None) -> Tensor:
    return enc.encode(text, key)


def encode_image(image, enc: ImageEncoder, key: Optional[str] = None) -> Tensor:
    return enc.encode(image, key)


def embed_conversation(graph, enc: MessageEncoder) -> Tensor:
    """Node feature matrix (d x n): source in column 0, replies in stored order."""
    cols = [enc.encode(m.text, f"{graph.id}:{m.id}") for m in graph.messages]
    return stack(cols, axis=1)
