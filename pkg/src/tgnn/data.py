"""Conversation graphs, dataset files, the synthetic generator and split plans.

Dataset file (``.jsonl``)::

    {"format": "tgnn-conversations", "version": 1}
    {"id": ..., "event": ..., "label": "rumour"|"non-rumour",
     "messages": [{"id": ..., "text": ..., "parent": null|<id>}, ...],
     "image": null|"<relative path>", "language": "en"|"zh"}
    ...

Images live next to the dataset file as raw little-endian float64 arrays
in row-major H x W x C order, preceded by a 12-byte header: the magic
``b"TGIM"`` and four uint16 values H, W, C, reserved (0). Synthetic pixels
are mean-centred (roughly in [-0.5, 0.5]), so the blank all-zero image is
the "average" picture.
"""
from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError
from .local_branch import Neighborhood

DATASET_FORMAT = "tgnn-conversations"
SPLIT_FORMAT = "tgnn-splits"
FORMAT_VERSION = 1
LABELS = ("non-rumour", "rumour")
IMAGE_MAGIC = b"TGIM"
_IMAGE_HEADER = struct.Struct("<4sHHHH")


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class Message:
    id: str
    text: str
    parent: Optional[str] = None


@dataclass
class ConversationGraph:
    id: str
    event: str
    label: str
    messages: list[Message]
    image: Optional[str] = None
    language: str = "en"

    @property
    def n(self) -> int:
        return len(self.messages)

    @property
    def source(self) -> Message:
        return self.messages[0]

    @property
    def y(self) -> int:
        return LABELS.index(self.label)


def _validate(graph: ConversationGraph) -> None:
    if graph.label not in LABELS:
        raise ParseError(f"{graph.id}: unknown label {graph.label!r}")
    if not graph.messages:
        raise ParseError(f"{graph.id}: missing source message")
    if graph.messages[0].parent is not None:
        raise ParseError(f"{graph.id}: first message {graph.messages[0].id!r} must be the source (parent null)")
    position: dict[str, int] = {}
    for k, m in enumerate(graph.messages):
        if m.id in position:
            raise ParseError(f"{graph.id}: duplicate message id {m.id!r}")
        position[m.id] = k
    parents = {m.id: m.parent for m in graph.messages}
    for k, m in enumerate(graph.messages[1:], 1):
        if m.parent is None:
            raise ParseError(f"{graph.id}: message {m.id!r} has no parent (second source)")
        if m.parent == m.id:
            raise ParseError(f"{graph.id}: message {m.id!r} is its own parent (cycle)")
        if m.parent not in position:
            raise ParseError(f"{graph.id}: message {m.id!r} has dangling parent {m.parent!r}")
        if position[m.parent] > k:
            seen, cur = {m.id}, m.parent
            while cur is not None and cur not in seen:
                seen.add(cur)
                cur = parents[cur]
            if cur is not None:
                raise ParseError(f"{graph.id}: message {m.id!r} is on a parent cycle")
            raise ParseError(f"{graph.id}: message {m.id!r} replies to later message {m.parent!r}")


def parse_conversation(document) -> ConversationGraph:
    """Build a validated graph from a JSON record (string or already-decoded dict)."""
    rec = json.loads(document) if isinstance(document, str) else document
    try:
        graph = ConversationGraph(
            id=str(rec["id"]),
            event=str(rec["event"]),
            label=rec["label"],
            messages=[Message(str(m["id"]), m["text"], None if m["parent"] is None else str(m["parent"]))
                      for m in rec["messages"]],
            image=rec.get("image"),
            language=rec.get("language", "en"),
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed conversation record: missing {exc}") from exc
    _validate(graph)
    return graph


def serialize_conversation(graph: ConversationGraph) -> str:
    rec = {
        "id": graph.id,
        "event": graph.event,
        "label": graph.label,
        "messages": [{"id": m.id, "text": m.text, "parent": m.parent} for m in graph.messages],
        "image": graph.image,
        "language": graph.language,
    }
    return json.dumps(rec, ensure_ascii=False, separators=(",", ":"))


def build_connectivity(graph: ConversationGraph) -> Neighborhood:
    index = {m.id: k for k, m in enumerate(graph.messages)}
    edges = [(k, index[m.parent]) for k, m in enumerate(graph.messages) if m.parent is not None]
    return Neighborhood.from_edges(graph.n, edges)


# ---------------------------------------------------------------- image files

def write_image(path, image: np.ndarray) -> None:
    img = np.ascontiguousarray(image, dtype="<f8")
    if img.ndim != 3:
        raise ValueError(f"image must be HxWxC, got {img.shape}")
    H, W, C = img.shape
    with open(path, "wb") as fh:
        fh.write(_IMAGE_HEADER.pack(IMAGE_MAGIC, H, W, C, 0))
        fh.write(img.tobytes())


def read_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _IMAGE_HEADER.size:
        raise ParseError(f"{path}: truncated image header")
    magic, H, W, C, _ = _IMAGE_HEADER.unpack_from(raw)
    if magic != IMAGE_MAGIC:
        raise ParseError(f"{path}: bad image magic {magic!r}")
    body = raw[_IMAGE_HEADER.size :]
    if len(body) != H * W * C * 8:
        raise ParseError(f"{path}: expected {H * W * C} pixels")
    return np.frombuffer(body, dtype="<f8").reshape(H, W, C).astype(np.float64)


# -------------------------------------------------------------------- dataset

@dataclass
class Dataset:
    graphs: list[ConversationGraph]
    images: dict[str, np.ndarray] = field(default_factory=dict)
    root: Optional[Path] = None

    def __post_init__(self):
        ids = [g.id for g in self.graphs]
        dup = [k for k, c in Counter(ids).items() if c > 1]
        if dup:
            raise ParseError(f"duplicate conversation ids: {dup[:5]}")
        self._by_id = {g.id: g for g in self.graphs}

    def __len__(self):
        return len(self.graphs)

    def __getitem__(self, cid: str) -> ConversationGraph:
        return self._by_id[cid]

    def ids(self) -> list[str]:
        return [g.id for g in self.graphs]

    def events(self) -> list[str]:
        return sorted({g.event for g in self.graphs})

    def manifest(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for g in self.graphs:
            counts = out.setdefault(g.event, {"rumour": 0, "non-rumour": 0})
            counts[g.label] += 1
        return dict(sorted(out.items()))

    def image(self, graph: ConversationGraph):
        """Pixel array for the graph's image, or None when it has none."""
        if graph.image is None:
            return None
        if graph.image not in self.images:
            if self.root is None:
                raise ParseError(f"{graph.id}: image {graph.image!r} not loaded and no dataset root")
            self.images[graph.image] = read_image(self.root / graph.image)
        return self.images[graph.image]

    def subset(self, ids: Sequence[str]) -> "Dataset":
        return Dataset([self._by_id[i] for i in ids], self.images, self.root)


def dumps_dataset(dataset: Dataset) -> str:
    header = json.dumps({"format": DATASET_FORMAT, "version": FORMAT_VERSION})
    return "\n".join([header, *(serialize_conversation(g) for g in dataset.graphs)]) + "\n"


def loads_dataset(text: str, root: Optional[Path] = None) -> Dataset:
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise ParseError("empty dataset file")
    header = json.loads(lines[0])
    if header.get("format") != DATASET_FORMAT or header.get("version") != FORMAT_VERSION:
        raise ParseError(f"unsupported dataset header {header}")
    graphs = []
    for lineno, line in enumerate(lines[1:], 2):
        try:
            graphs.append(parse_conversation(line))
        except ParseError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
    return Dataset(graphs, {}, root)


def save_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_dataset(dataset), encoding="utf-8")
    for g in dataset.graphs:
        if g.image is not None:
            target = path.parent / g.image
            target.parent.mkdir(parents=True, exist_ok=True)
            write_image(target, dataset.image(g))


def load_dataset(path) -> Dataset:
    path = Path(path)
    return loads_dataset(path.read_text(encoding="utf-8"), path.parent)


# ------------------------------------------------------------------ synthetic

# Doubt replies all share "fake"/"real"-style markers so the planted signal
# has a consistent footprint even in an untrained embedding space.
DOUBT_PHRASES = {
    "en": ["is it real or fake?", "fake", "fake news", "this is fake", "is this real?", "real or fake?",
           "fake!!", "so fake"],
    "zh": ["是 真的 吗", "假 的", "假 消息", "这 是 假 的", "真的 假的", "假 的 吧"],
}
PLAIN_PHRASES = {
    "en": ["so sad", "stay safe", "sad news", "so sad :(", "stay safe everyone", "sad"],
    "zh": ["难过", "平安", "好 难过", "大家 平安", "祈祷 平安"],
}
HEDGE_CUES = {"en": ["reportedly", "unconfirmed: reportedly"], "zh": ["网传", "网传 据说"]}
OFFICIAL_CUES = {"en": ["officials confirm", "confirmed: officials say"], "zh": ["官方 通报", "警方 通报"]}

_SYLLABLES = ["ka", "lo", "mi", "ren", "tus", "vo", "bel", "dra", "fin", "gor", "hal", "jun",
              "ple", "qua", "sor", "tre", "umb", "wex", "yal", "zen", "cor", "nid", "pax", "rio"]


def _pseudo_words(rng: np.random.Generator, count: int, language: str) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < count:
        if language == "zh":
            w = "".join(chr(0x4E00 + int(rng.integers(0, 20000))) for _ in range(int(rng.integers(1, 3))))
        else:
            w = "".join(_SYLLABLES[int(i)] for i in rng.integers(0, len(_SYLLABLES), int(rng.integers(2, 4))))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


@dataclass
class GeneratorConfig:
    """Synthetic benchmark layout and planted-signal strengths (all in [0, 1])."""

    n_events: int = 5
    conversations_per_event: int = 100
    rumour_fraction: float = 0.5
    min_replies: int = 2
    max_replies: int = 12
    text_signal: float = 1.0
    source_signal: float = 0.95
    image_rate: float = 0.6
    image_signal: float = 0.8
    base_doubt_rate: float = 0.1
    max_doubt_rate: float = 0.7
    cue_rate: float = 1.0
    reply_to_source: float = 0.6
    image_size: int = 32
    language: str = "en"
    topic_words: int = 30
    source_topic_tokens: int = 1
    source_filler_tokens: int = 1
    reply_filler_tokens: int = 2
    filler_words: int = 300

    def validate(self) -> None:
        if self.n_events < 1:
            raise ConfigError("n_events must be >= 1")
        if self.conversations_per_event < 1:
            raise ConfigError("conversations_per_event must be >= 1")
        if not 0 <= self.min_replies <= self.max_replies:
            raise ConfigError("need 0 <= min_replies <= max_replies")
        for name in ("rumour_fraction", "text_signal", "source_signal", "image_rate", "image_signal",
                     "base_doubt_rate", "max_doubt_rate", "cue_rate", "reply_to_source"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.language not in DOUBT_PHRASES:
            raise ConfigError(f"language must be one of {sorted(DOUBT_PHRASES)}")
        if self.image_size < 4:
            raise ConfigError("image_size must be >= 4")


def _plain_image(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy - 0.5
    base = rng.uniform(-0.15, 0.15, 3)
    img = base[None, None, :] + 0.1 * ramp[:, :, None] * rng.uniform(-1, 1, 3)[None, None, :]
    img += 0.02 * rng.standard_normal(img.shape)
    return img


def _manipulate(rng: np.random.Generator, img: np.ndarray) -> np.ndarray:
    """Splice a high-frequency checker patch around the image centre."""
    size = img.shape[0]
    w = size // 2
    jitter = max(1, size // 16)
    r, c = (size - w) // 2 + rng.integers(-jitter, jitter + 1, 2)
    yy, xx = np.mgrid[0:w, 0:w]
    checker = ((yy + xx) % 2).astype(float)[:, :, None]
    out = img.copy()
    out[r : r + w, c : c + w] = (checker - 0.5) * rng.uniform(0.6, 1.0, 3)[None, None, :]
    return out


def synth_generate(cfg: GeneratorConfig, seed: int) -> Dataset:
    """Deterministic synthetic corpus; rumours get more doubt replies,
    hedged sources and (when imaged) manipulated pictures."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    lang = cfg.language
    joiner = " "
    filler = _pseudo_words(rng, cfg.filler_words, lang)
    doubt, plain = DOUBT_PHRASES[lang], PLAIN_PHRASES[lang]
    hedges, officials = HEDGE_CUES[lang], OFFICIAL_CUES[lang]
    graphs: list[ConversationGraph] = []
    images: dict[str, np.ndarray] = {}

    def words(pool, k):
        return [pool[int(i)] for i in rng.integers(0, len(pool), k)]

    for e in range(cfg.n_events):
        event = f"event{e}"
        topic = _pseudo_words(rng, cfg.topic_words, lang)
        n_rumour = int(round(cfg.rumour_fraction * cfg.conversations_per_event))
        labels = np.array([1] * n_rumour + [0] * (cfg.conversations_per_event - n_rumour))
        rng.shuffle(labels)
        for k, y in enumerate(labels):
            cid = f"{event}-{k:04d}"
            src = (words(topic, int(rng.integers(1, cfg.source_topic_tokens + 1)))
                   + words(filler, int(rng.integers(0, cfg.source_filler_tokens + 1))))
            if rng.random() < cfg.cue_rate:
                p_hedge = 0.5 + (0.5 if y else -0.5) * cfg.source_signal
                src.insert(0, hedges[int(rng.integers(len(hedges)))] if rng.random() < p_hedge
                           else officials[int(rng.integers(len(officials)))])
            messages = [Message("m0", joiner.join(src), None)]
            doubt_rate = cfg.base_doubt_rate + (cfg.max_doubt_rate - cfg.base_doubt_rate) * cfg.text_signal * y
            for r in range(1, int(rng.integers(cfg.min_replies, cfg.max_replies + 1)) + 1):
                bank = doubt if rng.random() < doubt_rate else plain
                toks = [bank[int(rng.integers(len(bank)))]]
                toks += words(filler, int(rng.integers(0, cfg.reply_filler_tokens + 1))) + words(topic, int(rng.integers(0, 2)))
                parent = "m0" if r == 1 or rng.random() < cfg.reply_to_source else f"m{int(rng.integers(1, r))}"
                messages.append(Message(f"m{r}", joiner.join(toks), parent))
            ref = None
            if rng.random() < cfg.image_rate:
                img = _plain_image(rng, cfg.image_size)
                if y and rng.random() < cfg.image_signal:
                    img = _manipulate(rng, img)
                ref = f"images/{cid}.img"
                images[ref] = img
            graphs.append(ConversationGraph(cid, event, LABELS[int(y)], messages, ref, lang))
    return Dataset(graphs, images)


# --------------------------------------------------------------------- splits

@dataclass
class Fold:
    train: list[str]
    tune: list[str]
    test: list[str]


@dataclass
class SplitPlan:
    folds: dict[str, Fold]
    mode: str = "loeo"

    def check(self, dataset: Optional[Dataset] = None) -> None:
        for name, fold in self.folds.items():
            if set(fold.train) & set(fold.test) or set(fold.tune) & set(fold.test):
                raise ConfigError(f"fold {name}: train/tune and test overlap")
            if dataset is not None and self.mode == "loeo":
                test_events = {dataset[i].event for i in fold.test}
                train_events = {dataset[i].event for i in fold.train + fold.tune}
                if len(test_events) != 1 or test_events & train_events:
                    raise ConfigError(f"fold {name}: event leakage between train and test")


def make_splits(dataset: Dataset, mode: str = "loeo", seed: int = 0, tune_fraction: float = 0.1,
                test_ratio: float = 0.25) -> SplitPlan:
    """Leave-one-event-out folds (``loeo``) or a single tune/train/test ``ratio`` split.

    Tune size is floor(tune_fraction * pool); in ratio mode the test size is
    floor(test_ratio * remaining) and train takes the rest.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    if mode == "loeo":
        events = dataset.events()
        if len(events) < 2:
            raise ConfigError("leave-one-event-out needs at least two events")
        folds = {}
        for ev in events:
            test = [g.id for g in dataset.graphs if g.event == ev]
            rest = [g.id for g in dataset.graphs if g.event != ev]
            rest = [rest[i] for i in rng.permutation(len(rest))]
            n_tune = int(np.floor(tune_fraction * len(rest)))
            folds[ev] = Fold(train=rest[n_tune:], tune=rest[:n_tune], test=test)
        plan = SplitPlan(folds, "loeo")
    elif mode == "ratio":
        ids = dataset.ids()
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n_tune = int(np.floor(tune_fraction * len(ids)))
        remaining = len(ids) - n_tune
        n_test = int(np.floor(test_ratio * remaining))
        if n_test < 1 or remaining - n_test < 1:
            raise ConfigError("ratio split leaves an empty train or test part")
        plan = SplitPlan({"ratio": Fold(ids[n_tune + n_test :], ids[:n_tune], ids[n_tune : n_tune + n_test])}, "ratio")
    else:
        raise ConfigError(f"unknown split mode {mode!r}")
    plan.check(dataset)
    return plan


def dumps_splits(plan: SplitPlan) -> str:
    lines = [json.dumps({"format": SPLIT_FORMAT, "version": FORMAT_VERSION, "mode": plan.mode})]
    for name, fold in plan.folds.items():
        lines.append(json.dumps({"fold": name, **asdict(fold)}, ensure_ascii=False))
    return "\n".join(lines) + "\n"


def loads_splits(text: str) -> SplitPlan:
    lines = [ln for ln in text.split("\n") if ln.strip()]
    header = json.loads(lines[0])
    if header.get("format") != SPLIT_FORMAT:
        raise ParseError(f"unsupported split header {header}")
    folds = {}
    for line in lines[1:]:
        rec = json.loads(line)
        folds[rec["fold"]] = Fold(rec["train"], rec["tune"], rec["test"])
    return SplitPlan(folds, header.get("mode", "loeo"))
