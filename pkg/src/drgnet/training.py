"""Training loop, evaluation, negation slicing, ablations, and scaling probes."""
from __future__ import annotations

import re
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import clone_params, restore_params
from .data import PreparedExample
from .errors import ValidationError
from .kg import RelationalGraph
from .matrix import Matrix
from .model import DrgnModel, ModelConfig, config_for_ablation, predict, prepare_candidate
from .optim import RAdam

NEGATION_WORDS = ("no", "not", "nothing", "unlikely", "never", "n't")

_WORDISH = re.compile(r"[a-z0-9']+")


def negation_tokens(text: str) -> list[str]:
    """Word tokens with n't contractions split off ("don't" -> do, n't)."""
    out: list[str] = []
    for tok in _WORDISH.findall(text.lower()):
        if tok.endswith("n't") and len(tok) > 3:
            out.append(tok[:-3])
            out.append("n't")
        else:
            out.append(tok.strip("'"))
    return [t for t in out if t]


def filter_negation(examples: Sequence, words: Sequence[str] = NEGATION_WORDS) -> list:
    """Examples whose question contains a negation word (token match)."""
    word_set = set(words)
    return [ex for ex in examples if word_set & set(negation_tokens(ex.question))]


@dataclass(frozen=True)
class AblationSpec:
    drop_subgraph: bool = False
    drop_relational_edges: bool = False
    drop_question_node: bool = False
    drop_relevance: bool = False

    @classmethod
    def from_preset(cls, name: str) -> "AblationSpec":
        try:
            return cls(**_PRESETS[name])
        except KeyError:
            raise ValidationError(f"unknown ablation preset {name!r}; known: {list(_PRESETS)}")


_PRESETS = {
    "no-kg": dict(drop_subgraph=True),
    "subgraph": dict(drop_relational_edges=True, drop_question_node=True, drop_relevance=True),
    "relational": dict(drop_question_node=True, drop_relevance=True),
    "question-node": dict(drop_relevance=True),
    "full": dict(),
}

ABLATION_LADDER = ("no-kg", "subgraph", "relational", "question-node", "full")


@dataclass
class TrainConfig:
    batch_size: int = 16
    layers: int = 3
    lr_lm: float = 1e-5
    lr_graph: float = 1e-3
    patience: int = 5
    max_epochs: int = 50
    seed: int = 0
    d: int = 200
    d_lm: int = 100
    hidden: int | None = None
    activation: str = "gelu"
    dropout: float = 0.2
    scaled_relevance: bool = False
    precision: str = "f32"
    grad_clip: float = 1.0  # 0 disables clipping
    max_ngram: int = 4
    hops: int = 2
    max_nodes: int = 200
    ablation: AblationSpec = field(default_factory=AblationSpec)

    def model_config(self, n_semantic_relations: int) -> ModelConfig:
        base = ModelConfig(
            n_semantic_relations=n_semantic_relations,
            d=self.d,
            d_lm=self.d_lm,
            layers=self.layers,
            activation=self.activation,
            hidden=self.hidden,
            scaled_relevance=self.scaled_relevance,
            precision=self.precision,
            dropout=self.dropout,
        )
        a = self.ablation
        return config_for_ablation(
            base,
            drop_subgraph=a.drop_subgraph,
            drop_relational_edges=a.drop_relational_edges,
            drop_question_node=a.drop_question_node,
            drop_relevance=a.drop_relevance,
        )


def apply_ablation(config: TrainConfig, spec: AblationSpec) -> TrainConfig:
    """Return a config whose model construction honors the ablation flags."""
    for name in ("drop_subgraph", "drop_relational_edges", "drop_question_node", "drop_relevance"):
        if not isinstance(getattr(spec, name), bool):
            raise ValidationError(f"ablation flag {name} must be a bool")
    return replace(config, ablation=spec)


@dataclass
class EvalRecord:
    id: str
    gold: int
    predicted: int
    scores: list[float]


@dataclass
class Metrics:
    accuracy: float
    count: int
    negation_accuracy: float | None
    negation_count: int
    mean_loss: float
    records: list[EvalRecord] = field(default_factory=list)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_accuracy: float
    dev_negation_accuracy: float | None
    seconds: float


@dataclass
class TrainResult:
    model: DrgnModel
    history: list[EpochRecord]
    best_epoch: int
    best_dev_accuracy: float


def evaluate(examples: Sequence[PreparedExample], model: DrgnModel) -> Metrics:
    from .model import cross_entropy_loss

    records = []
    correct = 0
    total_loss = 0.0
    for ex in examples:
        scores = model.forward_scores(ex.candidates)
        pred = predict(scores)
        records.append(EvalRecord(id=ex.id, gold=ex.gold, predicted=pred, scores=scores))
        correct += int(pred == ex.gold)
        total_loss += cross_entropy_loss(scores, ex.gold)
    neg = filter_negation(examples)
    neg_ids = {ex.id for ex in neg}
    neg_records = [r for r in records if r.id in neg_ids]
    neg_correct = sum(int(r.predicted == r.gold) for r in neg_records)
    n = len(examples)
    return Metrics(
        accuracy=correct / n if n else 0.0,
        count=n,
        negation_accuracy=(neg_correct / len(neg_records)) if neg_records else None,
        negation_count=len(neg_records),
        mean_loss=total_loss / n if n else 0.0,
        records=records,
    )


def _global_grad_norm(params: ad.ParamStore) -> float:
    total = 0.0
    for p in params:
        total += float(np.sum(p.grad.data * p.grad.data))
    return float(np.sqrt(total))


def train(
    train_set: Sequence[PreparedExample],
    dev_set: Sequence[PreparedExample],
    config: TrainConfig,
    n_semantic_relations: int,
) -> TrainResult:
    """Early-stopped training on dev accuracy; returns the best-dev model."""
    if not train_set:
        raise ValidationError("empty training set")
    if not dev_set:
        raise ValidationError("empty dev set")
    model_cfg = config.model_config(n_semantic_relations)
    _validate_examples(train_set, model_cfg, "train")
    _validate_examples(dev_set, model_cfg, "dev")
    model = DrgnModel(model_cfg, seed=config.seed)
    opt = RAdam(model.params, lr_graph=config.lr_graph, lr_encoder=config.lr_lm)
    rng = np.random.default_rng(config.seed)

    history: list[EpochRecord] = []
    best_acc = -1.0
    best_epoch = -1
    best_params = clone_params(model.params)
    stale = 0
    for epoch in range(config.max_epochs):
        started = time.perf_counter()
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo:lo + config.batch_size]
            model.params.zero_grads()
            for idx in batch:
                ex = train_set[int(idx)]
                drop_rng = rng if config.dropout > 0.0 else None
                loss = model.loss_node(ex.candidates, ex.gold, dropout_rng=drop_rng)
                epoch_loss += float(loss.value[0, 0])
                ad.backward(loss)
            inv = 1.0 / len(batch)
            for p in model.params:
                p.grad.data *= inv
            if config.grad_clip > 0.0:
                norm = _global_grad_norm(model.params)
                if norm > config.grad_clip:
                    scale = config.grad_clip / norm
                    for p in model.params:
                        p.grad.data *= scale
            opt.step()
        dev = evaluate(dev_set, model)
        history.append(EpochRecord(
            epoch=epoch,
            train_loss=epoch_loss / len(train_set),
            dev_accuracy=dev.accuracy,
            dev_negation_accuracy=dev.negation_accuracy,
            seconds=time.perf_counter() - started,
        ))
        if dev.accuracy > best_acc:
            best_acc = dev.accuracy
            best_epoch = epoch
            best_params = clone_params(model.params)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    restore_params(model.params, best_params)
    return TrainResult(model=model, history=history, best_epoch=best_epoch, best_dev_accuracy=best_acc)


def _validate_examples(examples: Sequence[PreparedExample], cfg: ModelConfig, split: str) -> None:
    for ex in examples:
        if not ex.candidates:
            raise ValidationError(f"{split} example {ex.id!r} has no candidates")
        for prep in ex.candidates:
            if prep.h_cls.shape != (cfg.d_lm,):
                raise ValidationError(
                    f"{split} example {ex.id!r}: context width {prep.h_cls.shape} != d_lm {cfg.d_lm}"
                )
        if not 0 <= ex.gold < len(ex.candidates):
            raise ValidationError(f"{split} example {ex.id!r}: gold index out of range")


# --- complexity probes --------------------------------------------------------


@dataclass
class ScalingRecord:
    n_nodes: int
    layers: int
    seconds_total: float
    seconds_per_layer: float
    relevance_entries: int


def _random_scaling_instance(n_entities: int, cfg: ModelConfig, seed: int):
    rng = np.random.default_rng(seed)
    edges = []
    for i in range(n_entities):
        for _ in range(3):
            j = int(rng.integers(0, n_entities))
            if j != i:
                edges.append((i, int(rng.integers(0, cfg.n_semantic_relations)), j))
    q_links = [(n_entities, cfg.n_semantic_relations, j)
               for j in sorted(rng.choice(n_entities, size=min(4, n_entities), replace=False).tolist())]
    graph = RelationalGraph(
        entity_ids=list(range(n_entities)),
        surfaces=[f"e{i}" for i in range(n_entities)],
        roles=["question-entity" if i < 2 else "intermediate" for i in range(n_entities)],
        edges=edges + q_links,
        n_semantic_relations=cfg.n_semantic_relations,
        q_index=n_entities,
    )
    embs = rng.standard_normal((n_entities, cfg.d_lm))
    embs /= np.linalg.norm(embs, axis=1, keepdims=True)
    h_cls = rng.standard_normal(cfg.d_lm)
    h_cls /= np.linalg.norm(h_cls)
    return prepare_candidate(graph, h_cls, Matrix(embs), cfg)


def measure_scaling(
    sizes: Sequence[int],
    layer_counts: Sequence[int] = (1, 2, 3, 4),
    d: int = 32,
    d_lm: int = 32,
    n_relations: int = 4,
    repeats: int = 3,
    seed: int = 0,
) -> tuple[list[ScalingRecord], list[ScalingRecord], float, float]:
    """Median forward wall time vs graph size and vs layer count.

    Returns (size_records, layer_records, size_exponent, layer_exponent) where
    the exponents are log-log least-squares slopes.
    """
    base = ModelConfig(
        n_semantic_relations=n_relations, d=d, d_lm=d_lm, layers=2,
        activation="gelu", scaled_relevance=True, precision="f64",
    )
    size_records = []
    for n in sizes:
        cfg = replace(base, layers=2)
        model = DrgnModel(cfg, seed=seed)
        prep = _random_scaling_instance(n, cfg, seed + n)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.candidate_score_node(prep)
            times.append(time.perf_counter() - t0)
        med = float(np.median(times))
        size_records.append(ScalingRecord(
            n_nodes=n, layers=cfg.layers, seconds_total=med,
            seconds_per_layer=med / cfg.layers,
            relevance_entries=(n + 1) ** 2,
        ))
    layer_records = []
    n_fixed = max(sizes)
    for layers in layer_counts:
        cfg = replace(base, layers=layers)
        model = DrgnModel(cfg, seed=seed)
        prep = _random_scaling_instance(n_fixed, cfg, seed + layers)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.candidate_score_node(prep)
            times.append(time.perf_counter() - t0)
        med = float(np.median(times))
        layer_records.append(ScalingRecord(
            n_nodes=n_fixed, layers=layers, seconds_total=med,
            seconds_per_layer=med / layers,
            relevance_entries=(n_fixed + 1) ** 2,
        ))
    size_exp = fit_exponent([r.n_nodes for r in size_records], [r.seconds_total for r in size_records])
    layer_exp = fit_exponent([r.layers for r in layer_records], [r.seconds_total for r in layer_records])
    return size_records, layer_records, size_exp, layer_exp


def fit_exponent(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx = np.log(np.asarray(xs, dtype=np.float64))
    ly = np.log(np.asarray(ys, dtype=np.float64))
    lx = lx - lx.mean()
    return float(np.sum(lx * (ly - ly.mean())) / np.sum(lx * lx))
