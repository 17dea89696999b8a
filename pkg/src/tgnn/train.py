"""Training, distillation, evaluation, cross-validation and attention reports."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NumericError, Tensor, adam_step
from .config import ConfigError, ModelConfig, TrainConfig
from .data import LABELS, Dataset, Fold, SplitPlan
from .fusion import cross_entropy, kd_loss, soften, total_loss
from .model import TgnnModel

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class MissingSoftLabel(KeyError):
    pass


# -------------------------------------------------------------------- metrics

@dataclass
class FoldMetrics:
    f1_positive: float
    f1_negative: float
    accuracy: float
    macro_f1: float
    n: int = 0


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def metrics_from_predictions(y_true: Sequence[int], y_pred: Sequence[int]) -> FoldMetrics:
    """Percent-scale F1 for rumour (positive) and non-rumour, accuracy and macro F1."""
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.size == 0:
        raise ValueError("cannot score an empty test set")
    tp = int(np.sum((y_pred == 1) & (y_true == 1)))
    tn = int(np.sum((y_pred == 0) & (y_true == 0)))
    fp = int(np.sum((y_pred == 1) & (y_true == 0)))
    fn = int(np.sum((y_pred == 0) & (y_true == 1)))
    pos = 100.0 * _f1(tp, fp, fn)
    neg = 100.0 * _f1(tn, fn, fp)
    return FoldMetrics(pos, neg, 100.0 * (tp + tn) / y_true.size, (pos + neg) / 2, int(y_true.size))


@dataclass
class MetricsReport:
    folds: dict[str, FoldMetrics] = field(default_factory=dict)

    @property
    def average(self) -> FoldMetrics:
        rows = list(self.folds.values())
        if not rows:
            raise ValueError("no folds to average")
        mean = lambda attr: float(np.mean([getattr(r, attr) for r in rows]))  # noqa: E731
        return FoldMetrics(mean("f1_positive"), mean("f1_negative"), mean("accuracy"), mean("macro_f1"),
                           sum(r.n for r in rows))

    def table(self) -> str:
        """Tab-separated table: one row per fold plus an Average row, 2 decimals."""
        head = "Fold\tPositive F1\tNegative F1\tAccuracy\tMacro F1"
        fmt = lambda name, m: (f"{name}\t{m.f1_positive:.2f}\t{m.f1_negative:.2f}"  # noqa: E731
                               f"\t{m.accuracy:.2f}\t{m.macro_f1:.2f}")
        rows = [fmt(k, m) for k, m in self.folds.items()]
        return "\n".join([head, *rows, fmt("Average", self.average)]) + "\n"

    def to_json(self) -> str:
        rec = {"folds": {k: asdict(m) for k, m in self.folds.items()}, "average": asdict(self.average)}
        return json.dumps(rec, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        rec = json.loads(text)
        return cls({k: FoldMetrics(**v) for k, v in rec["folds"].items()})


# ------------------------------------------------------------------ soft labels

@dataclass
class SoftLabelStore:
    labels: dict[str, np.ndarray]
    fingerprint: str

    def __getitem__(self, cid: str) -> np.ndarray:
        try:
            return self.labels[cid]
        except KeyError:
            raise MissingSoftLabel(f"no teacher soft label for conversation {cid!r}") from None

    def dumps(self) -> str:
        lines = [json.dumps({"format": "tgnn-soft-labels", "version": 1, "teacher": self.fingerprint})]
        for cid, p in self.labels.items():
            lines.append(json.dumps({"id": cid, "probs": [float(x).hex() for x in p]}, ensure_ascii=False))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "SoftLabelStore":
        lines = [ln for ln in text.split("\n") if ln.strip()]
        header = json.loads(lines[0])
        labels = {}
        for line in lines[1:]:
            rec = json.loads(line)
            labels[rec["id"]] = np.array([float.fromhex(x) for x in rec["probs"]])
        return cls(labels, header["teacher"])


def predict_soft_labels(teacher: TgnnModel, dataset: Dataset, ids: Optional[Sequence[str]] = None) -> SoftLabelStore:
    ids = dataset.ids() if ids is None else list(ids)
    out = {}
    with ad.no_grad():
        for cid in ids:
            out[cid] = teacher.predict(dataset[cid], dataset).probs.data.copy()
    return SoftLabelStore(out, teacher.fingerprint())


# ------------------------------------------------------------------- training

@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    tune_accuracy: Optional[float]
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    selected_epoch: Optional[int] = None

    def dumps(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.epochs)


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    shuffle, drop = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(shuffle), np.random.default_rng(drop)


def stratified_order(ids: Sequence[str], labels: Sequence[int], rng: np.random.Generator) -> list[str]:
    """Shuffle within each class, then interleave classes in proportion so
    every mini-batch has (up to rounding) the overall class ratio."""
    keyed = []
    labels = np.asarray(labels)
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(len(members))]
        offset = rng.random()
        keyed += [((j + offset) / len(members), int(c), int(m)) for j, m in enumerate(members)]
    keyed.sort()
    return [ids[m] for _, _, m in keyed]


def conversation_loss(model: TgnnModel, dataset: Dataset, cid: str, cfg: TrainConfig,
                      rng: Optional[np.random.Generator] = None, training: bool = True,
                      soft_label: Optional[np.ndarray] = None) -> Tensor:
    """CE loss for one conversation, plus the KD term when a soft label is given."""
    graph = dataset[cid]
    if not training:
        result = model.forward(model.prepare(graph, dataset))
        return cross_entropy(result.probs, graph.y)
    result = model.forward(model.prepare(graph, dataset), training=training, rng=rng, dropout=cfg.dropout)
    loss = cross_entropy(result.probs, graph.y)
    if soft_label is None:
        return loss
    if cfg.kd_temperature == 1.0:
        y_s = result.probs
    else:
        # re-temper the student's distribution through its log-probabilities
        y_s = ad.softmax(ad.scale(ad.log(result.probs), 1.0 / cfg.kd_temperature))
    return total_loss(loss, kd_loss(y_s, soften(soft_label, cfg.kd_temperature), cfg.kd_direction))


def accuracy(model: TgnnModel, dataset: Dataset, ids: Sequence[str]) -> float:
    preds, truth = predict_classes(model, dataset, ids)
    return 100.0 * float(np.mean(np.asarray(preds) == np.asarray(truth)))


def predict_classes(model: TgnnModel, dataset: Dataset, ids: Sequence[str]) -> tuple[list[int], list[int]]:
    preds, truth = [], []
    with ad.no_grad():
        for cid in ids:
            g = dataset[cid]
            preds.append(model.predict(g, dataset).prediction.predicted_class)
            truth.append(g.y)
    return preds, truth


def train(model: TgnnModel, dataset: Dataset, fold: Fold, cfg: TrainConfig,
          store: Optional[SoftLabelStore] = None) -> tuple[TgnnModel, TrainHistory]:
    """Mini-batch Adam training, one conversation graph at a time.

    Gradients of the per-conversation losses are averaged over each batch
    before the optimizer step. With a soft-label store the loss is CE + KD.
    Keeps the parameters of the best tune-accuracy epoch when a tune set
    exists, otherwise those of the last epoch.
    """
    cfg.validate()
    if not fold.train:
        raise ConfigError("empty training set")
    if store is not None:
        for cid in fold.train:
            store[cid]
    shuffle_rng, drop_rng = _streams(cfg.seed)
    params = model.parameters()
    plist = list(params.values())
    state = AdamState()
    history = TrainHistory()
    best_acc, best_state = -1.0, None
    train_ids = list(fold.train)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = stratified_order(train_ids, [dataset[c].y for c in train_ids], shuffle_rng)
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start : start + cfg.batch_size]
            model.zero_grad()
            for cid in batch:
                try:
                    loss = conversation_loss(model, dataset, cid, cfg, drop_rng, True,
                                             None if store is None else store[cid])
                except NumericError as exc:
                    raise TrainingError(f"non-finite value at epoch {epoch}, batch {b}, conversation {cid}: {exc}") from exc
                if not np.isfinite(loss.data):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}, conversation {cid}")
                losses.append(loss.item())
                ad.scale(loss, 1.0 / len(batch)).backward()
            for p in plist:
                if p.grad is None:
                    p.grad = np.zeros(p.shape)
            adam_step(plist, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.l2)
        tune_acc = accuracy(model, dataset, fold.tune) if fold.tune else None
        rec = EpochRecord(epoch, float(np.mean(losses)), tune_acc, time.perf_counter() - t0)
        history.epochs.append(rec)
        log.info("epoch %d loss %.6f tune_acc %s (%.1fs)", epoch, rec.mean_loss,
                 "-" if tune_acc is None else f"{tune_acc:.2f}", rec.seconds)
        if tune_acc is not None and tune_acc > best_acc:
            best_acc, best_state = tune_acc, model.state_dict()
            history.selected_epoch = epoch
    if best_state is not None:
        model.load_state_dict(best_state)
    elif cfg.epochs:
        history.selected_epoch = cfg.epochs
    return model, history


def distill(student: TgnnModel, dataset: Dataset, fold: Fold, store: SoftLabelStore,
            cfg: TrainConfig) -> tuple[TgnnModel, TrainHistory]:
    if student.cfg.multimodal:
        raise ConfigError("the distillation student must be the text-only variant")
    return train(student, dataset, fold, cfg, store)


def evaluate(model: TgnnModel, dataset: Dataset, ids: Sequence[str]) -> FoldMetrics:
    preds, truth = predict_classes(model, dataset, ids)
    return metrics_from_predictions(truth, preds)


# ------------------------------------------------------------ cross-validation

VARIANTS = ("teacher", "student", "student_kd")


def fold_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


def _fold_cfg(cfg: TrainConfig, index: int, multimodal: bool) -> TrainConfig:
    d = cfg.to_dict()
    d["seed"] = fold_seed(cfg.seed, index)
    d["model"]["multimodal"] = multimodal
    return TrainConfig.from_dict(d)


def run_fold(dataset: Dataset, fold: Fold, cfg: TrainConfig, index: int, variants=VARIANTS) -> dict[str, FoldMetrics]:
    """Train the requested variants on one fold and score each on its test set.

    ``student_kd`` distils from a teacher trained on the same fold.
    """
    out: dict[str, FoldMetrics] = {}
    teacher = None
    if "teacher" in variants or "student_kd" in variants:
        tcfg = _fold_cfg(cfg, index, True)
        teacher, _ = train(TgnnModel(tcfg.model, tcfg.seed), dataset, fold, tcfg)
        if "teacher" in variants:
            out["teacher"] = evaluate(teacher, dataset, fold.test)
    scfg = _fold_cfg(cfg, index, False)
    if "student" in variants:
        student, _ = train(TgnnModel(scfg.model, scfg.seed), dataset, fold, scfg)
        out["student"] = evaluate(student, dataset, fold.test)
    if "student_kd" in variants:
        store = predict_soft_labels(teacher, dataset, fold.train)
        student, _ = distill(TgnnModel(scfg.model, scfg.seed), dataset, fold, store, scfg)
        out["student_kd"] = evaluate(student, dataset, fold.test)
    return out


def cross_validate(dataset: Dataset, cfg: TrainConfig, plan: SplitPlan, variants=("teacher",),
                   jobs: int = 1) -> dict[str, MetricsReport]:
    """One fresh seeded model per fold and variant; returns a report per variant."""
    names = list(plan.folds)
    args = [(dataset, plan.folds[n], cfg, i, tuple(variants)) for i, n in enumerate(names)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_fold, *zip(*args)))
    else:
        results = [run_fold(*a) for a in args]
    reports = {v: MetricsReport() for v in variants}
    for name, res in zip(names, results):
        for v in variants:
            reports[v].folds[name] = res[v]
    return reports


# ------------------------------------------------------------ attention report

def attention_report(model: TgnnModel, dataset: Dataset, cid: str, k: int = 5) -> dict:
    """Top-k replies by global-local attention score with prediction and truth."""
    if k < 1:
        raise ValueError("k must be >= 1")
    graph = dataset[cid]
    with ad.no_grad():
        result = model.predict(graph, dataset)
    ranked = result.report.ranked()[:k]
    return {
        "id": graph.id,
        "ground_truth": graph.label,
        "prediction": LABELS[result.prediction.predicted_class],
        "probs": [float(p) for p in result.probs.data],
        "replies": [{"reply_id": graph.messages[i].id, "text": graph.messages[i].text, "score": s}
                    for i, s in ranked],
    }


def model_for(cfg: TrainConfig, multimodal: Optional[bool] = None) -> TgnnModel:
    mcfg = cfg.model if multimodal is None else ModelConfig(**{**asdict(cfg.model), "multimodal": multimodal})
    return TgnnModel(mcfg, cfg.seed)
