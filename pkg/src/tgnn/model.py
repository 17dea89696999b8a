"""The TGNN model: teacher (text + image) and student (text only) variants."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .config import ModelConfig
from .data import ConversationGraph, Dataset, build_connectivity
from .encoders import BLANK, HashedBagEncoder, PatchStatsEncoder
from .fusion import (
    GlobalLocalAttentionReport,
    Prediction,
    classify,
    conversation_representation,
    fuse_global,
    global_local_attention,
    project_visual,
)
from .global_branch import GlobalBranchOutput, TransformerBlock, global_forward, xavier
from .local_branch import LocalBranch, Neighborhood


@dataclass
class PreparedConversation:
    """Per-conversation inputs that do not depend on parameters."""

    graph: ConversationGraph
    nb: Neighborhood
    mask: np.ndarray
    degree_scale: np.ndarray
    image_input: object  # patch statistics, raw pixels, or BLANK


@dataclass
class ForwardResult:
    prediction: Prediction
    F: Tensor
    global_out: GlobalBranchOutput
    F_local: Tensor
    v: Optional[Tensor]
    f_g_fused: Tensor
    f_c: Tensor
    f: Tensor
    report: GlobalLocalAttentionReport

    @property
    def probs(self) -> Tensor:
        return self.prediction.probs


class TgnnModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0, message_encoder=None, image_encoder=None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = message_encoder or HashedBagEncoder(
            cfg.d, cfg.n_buckets, cfg.hash_seed, rng, trainable=not cfg.freeze_encoder,
            init_std=cfg.embed_init_std)
        if self.encoder.dim != cfg.d:
            raise ValueError(f"message encoder dim {self.encoder.dim} != model dim {cfg.d}")
        self.image_encoder = None
        if cfg.multimodal:
            self.image_encoder = image_encoder or PatchStatsEncoder(
                cfg.d_v, cfg.patch_grid, (cfg.image_size, cfg.image_size, cfg.image_channels), rng,
                trainable=not cfg.freeze_encoder)
            if self.image_encoder.dim != cfg.d_v:
                raise ValueError(f"image encoder dim {self.image_encoder.dim} != d_v {cfg.d_v}")
        self.blocks = [TransformerBlock.init(cfg.d, cfg.heads, rng, f"global.{i}", cfg.global_norm_ffn)
                       for i in range(cfg.global_depth)]
        self.local = LocalBranch.init(cfg.d, rng, cfg.gat_layers, cfg.gat_heads, cfg.strict_eq7)
        self.W_v = xavier(rng, cfg.d, cfg.d_v, "visual.W_v") if cfg.multimodal else None
        # zero head: predictions start at [0.5, 0.5]; see README "Initialisation"
        self.W_c = Tensor(np.zeros((2, cfg.d)), requires_grad=True, name="classifier.W_c")
        self.b_c = Tensor(np.zeros(2), requires_grad=True, name="classifier.b_c")
        self._prepared: dict[str, PreparedConversation] = {}

    # ------------------------------------------------------------ parameters
    def parameters(self) -> dict[str, Tensor]:
        """Trainable tensors by name, in a fixed order."""
        out: dict[str, Tensor] = dict(self.encoder.parameters())
        if self.image_encoder is not None:
            out.update(self.image_encoder.parameters())
        for block in self.blocks:
            out.update(block.parameters())
        out.update(self.local.parameters())
        if self.W_v is not None:
            out["visual.W_v"] = self.W_v
        out["classifier.W_c"] = self.W_c
        out["classifier.b_c"] = self.b_c
        return out

    def _all_tensors(self) -> dict[str, Tensor]:
        out = dict(getattr(self.encoder, "state", self.encoder.parameters)())
        if self.image_encoder is not None:
            out.update(getattr(self.image_encoder, "state", self.image_encoder.parameters)())
        out.update({k: v for k, v in self.parameters().items() if k not in out})
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._all_tensors().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        tensors = self._all_tensors()
        missing = set(tensors) - set(state)
        extra = set(state) - set(tensors)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in tensors.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def save(self, path, meta: Optional[dict] = None) -> str:
        return checkpoint.save(path, self.state_dict(), {"model": asdict(self.cfg), **(meta or {})})

    def fingerprint(self) -> str:
        return checkpoint.fingerprint(self.state_dict(), {"model": asdict(self.cfg)})

    @classmethod
    def load(cls, path) -> tuple["TgnnModel", dict]:
        state, meta = checkpoint.load(path)
        model = cls(ModelConfig(**meta["model"]))
        model.load_state_dict(state)
        return model, meta

    def text_only_copy(self) -> "TgnnModel":
        """A student-variant model sharing no storage, with this model's text weights."""
        cfg = ModelConfig(**{**asdict(self.cfg), "multimodal": False})
        student = TgnnModel(cfg)
        mine = self.state_dict()
        student.load_state_dict({k: mine[k] for k in student.state_dict()})
        return student

    # ---------------------------------------------------------------- forward
    def prepare(self, graph: ConversationGraph, dataset: Optional[Dataset] = None) -> PreparedConversation:
        hit = self._prepared.get(graph.id)
        if hit is not None and hit.graph is graph:
            return hit
        nb = build_connectivity(graph)
        image_input = BLANK
        if self.image_encoder is not None:
            image = dataset.image(graph) if dataset is not None else None
            image = BLANK if image is None else image
            stats = getattr(self.image_encoder, "stats", None)
            image_input = stats(image) if stats is not None else image
        prep = PreparedConversation(graph, nb, nb.mask(), np.broadcast_to(1.0 / nb.sizes, (self.cfg.d, nb.n)),
                                    image_input)
        self._prepared[graph.id] = prep
        return prep

    def embed(self, graph: ConversationGraph) -> Tensor:
        cols = [self.encoder.encode(m.text, f"{graph.id}:{m.id}") for m in graph.messages]
        return ad.stack(cols, axis=1)

    def visual(self, prep: PreparedConversation) -> Tensor:
        enc = self.image_encoder
        if hasattr(enc, "encode_stats") and not isinstance(prep.image_input, type(BLANK)):
            raw = enc.encode_stats(prep.image_input)
        else:
            raw = enc.encode(prep.image_input, prep.graph.id)
        return project_visual(raw, self.W_v)

    def forward(self, prep: PreparedConversation, training: bool = False,
                rng: Optional[np.random.Generator] = None, dropout: float = 0.0,
                zero_visual: bool = False) -> ForwardResult:
        cfg = self.cfg
        F = self.embed(prep.graph)
        g = global_forward(F, self.blocks)
        F_local = self.local(F, prep.nb, prep.mask, prep.degree_scale)
        v = None
        f_g_fused = g.f_g
        if self.image_encoder is not None:
            v = Tensor(np.zeros(cfg.d)) if zero_visual else self.visual(prep)
            f_g_fused = fuse_global(v, g.f_g)
        f_c, report = global_local_attention(F_local, F, f_g_fused, cfg.aggregate_local)
        f = f_g_fused if prep.graph.n == 1 else conversation_representation(f_c, f_g_fused)
        pred = classify(f, self.W_c, self.b_c, dropout, rng, training, prep.graph.id)
        return ForwardResult(pred, F, g, F_local, v, f_g_fused, f_c, f, report)

    def predict(self, graph: ConversationGraph, dataset: Optional[Dataset] = None) -> ForwardResult:
        return self.forward(self.prepare(graph, dataset))
