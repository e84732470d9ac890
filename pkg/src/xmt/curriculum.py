"""Progressive transfer: pick target pairs the source model already retrieves well,
then train both domains jointly on the source set and the picked subset."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import TERMS
from .model import IMAGE, TEXT, DcktModel, PairedBatch, embed, iterate_batches, joint_step, pretrain_domain
from .nn import SgdConfig
from .retrieval import query_aps

STRATEGIES = ("consistency", "random", "all")


@dataclass(frozen=True)
class CurriculumConfig:
    """``strategy`` picks how target pairs enter an iteration: ``consistency``
    (retrieval-consistency probabilities), ``random`` (flat probability ``alpha``)
    or ``all`` (no selection)."""

    alpha: float = 0.2
    max_iterations: int = 10
    epochs_per_iteration: int = 1
    seed: int = 0
    strategy: str = "consistency"

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.max_iterations < 1 or self.epochs_per_iteration < 1:
            raise ValueError("max_iterations and epochs_per_iteration must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")


@dataclass
class ConsistencyScores:
    ap_img: np.ndarray
    ap_txt: np.ndarray
    iteration: int

    @property
    def ap_sum(self) -> np.ndarray:
        return self.ap_img + self.ap_txt


@dataclass
class SelectionRecord:
    probability: np.ndarray
    selected: np.ndarray
    draws: np.ndarray
    forced: bool = False

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.selected)


def score_consistency(model_src, tar_tr, iteration: int) -> ConsistencyScores:
    """Per-pair retrieval AP of target pairs under the source network.

    Image q queries all target texts (and text q all images) by cosine distance
    between source-domain class-probability vectors; relevance is shared
    target label.
    """
    if len(tar_tr.labels) == 0:
        raise ValueError("target training set is empty")
    ci = embed(model_src, IMAGE, tar_tr.img)
    ct = embed(model_src, TEXT, tar_tr.txt)
    y = tar_tr.labels
    return ConsistencyScores(query_aps(ci, ct, y, y), query_aps(ct, ci, y, y), iteration)


def selection_prob(ap_sum: float, max_ap: float, iteration: int, alpha: float) -> float:
    """``alpha * (1 - log2((max_ap - ap_sum) / (max_ap * iteration) + 1))``; ``alpha`` if ``max_ap == 0``."""
    if iteration < 1:
        raise ValueError("iteration must be >= 1")
    if ap_sum > max_ap:
        raise ValueError(f"ap_sum {ap_sum} exceeds max_ap {max_ap}")
    if max_ap == 0:
        return alpha
    return alpha * (1.0 - math.log2((max_ap - ap_sum) / (max_ap * iteration) + 1.0))


def selection_probs(scores: ConsistencyScores, cfg: CurriculumConfig) -> np.ndarray:
    if cfg.strategy == "all":
        return np.ones(len(scores.ap_img))
    if cfg.strategy == "random":
        return np.full(len(scores.ap_img), cfg.alpha)
    s = scores.ap_sum
    top = float(s.max())
    return np.array([selection_prob(float(v), top, scores.iteration, cfg.alpha) for v in s])


def select_samples(scores: ConsistencyScores, cfg: CurriculumConfig, rng: np.random.Generator) -> SelectionRecord:
    """Independent Bernoulli draw per pair; an empty draw keeps the top-scoring pair."""
    if len(scores.ap_img) == 0:
        raise ValueError("no scores to select from")
    prob = selection_probs(scores, cfg)
    draws = rng.random(len(prob))
    selected = draws < prob
    forced = not selected.any()
    if forced:
        selected[int(np.argmax(scores.ap_sum))] = True
    return SelectionRecord(prob, selected, draws, forced)


# -- training loop ---------------------------------------------------------

@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)
    pretrain_calls: int = 0
    score_calls: int = 0

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainingLog":
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


def _loss_means(breakdowns) -> dict[str, float]:
    keys = TERMS + ("total",)
    if not breakdowns:
        return dict.fromkeys(keys, 0.0)
    return {k: float(np.mean([getattr(b, k) for b in breakdowns])) for k in keys}


def pretrain_model(model: DcktModel, src, tar_tr, epochs: int, sgd: SgdConfig, batch_size: int,
                   seed: int, log: TrainingLog) -> None:
    """Train each domain alone (no MMD coupling) and log one record per domain epoch."""
    for tag, domain, data in ((1, "source", src), (2, "target", tar_tr)):
        history = pretrain_domain(model.network(domain), data, epochs, model.weights, sgd,
                                  batch_size, domain, _rng(seed, 10, tag))
        for epoch, (sem, pair) in enumerate(history, start=1):
            rec = {"phase": f"pretrain-{domain}", "iteration": 0, "epoch": epoch}
            rec.update(dict.fromkeys(TERMS, 0.0))
            w = model.weights
            if domain == "source":
                rec.update(sem_src=sem, pair_src=pair, total=w.sem_src * sem + w.pair_src * pair)
            else:
                rec.update(sem_tgt=sem, pair_tgt=pair, total=w.sem_tgt * sem + w.pair_tgt * pair)
            log.records.append(rec)
    log.pretrain_calls += 1


def _target_stream(indices: np.ndarray, rng: np.random.Generator):
    while True:
        yield from rng.permutation(indices).tolist()


def train_iteration(model: DcktModel, src, tar_tr, subset: np.ndarray, epochs: int, sgd: SgdConfig,
                    batch_size: int, rng: np.random.Generator):
    """Joint training for ``epochs`` passes over ``src``; the target subset is cycled
    (reshuffled per pass) so each source batch meets a target batch of equal size."""
    stream = _target_stream(np.asarray(subset), rng)
    out = []
    for _ in range(epochs):
        for idx in iterate_batches(len(src.labels), batch_size, rng, min_size=2):
            tidx = np.array([next(stream) for _ in range(len(idx))])
            out.append(joint_step(
                model,
                PairedBatch(src.img[idx], src.txt[idx], src.labels[idx]),
                PairedBatch(tar_tr.img[tidx], tar_tr.txt[tidx], tar_tr.labels[tidx]),
                sgd,
            ))
    return out


def progressive_transfer(model: DcktModel, src, tar_tr, cfg: CurriculumConfig, sgd: SgdConfig, *,
                         batch_size: int = 32, pretrain_epochs: int = 20, pretrain: bool = True) -> TrainingLog:
    """Pretrain both domains, then ``cfg.max_iterations`` rounds of score, select, train.

    Each round scores target pairs with the source network as it stood after the
    previous round. A failing round restores the networks to their state before it.
    """
    if len(src.labels) == 0 or len(tar_tr.labels) == 0:
        raise ValueError("source and target training sets must be non-empty")
    log = TrainingLog()
    if pretrain:
        pretrain_model(model, src, tar_tr, pretrain_epochs, sgd, batch_size, cfg.seed, log)
    for it in range(1, cfg.max_iterations + 1):
        saved = (model.source.copy(), model.target.copy())
        try:
            scores = score_consistency(model.source, tar_tr, it)
            log.score_calls += 1
            record = select_samples(scores, cfg, _rng(cfg.seed, 20, it))
            steps = train_iteration(model, src, tar_tr, record.indices, cfg.epochs_per_iteration,
                                    sgd, batch_size, _rng(cfg.seed, 30, it))
        except Exception:
            model.source, model.target = saved
            raise
        s = scores.ap_sum
        rec = {"phase": "transfer", "iteration": it, "steps": len(steps),
               "selected": int(record.selected.sum()), "forced": record.forced,
               "ap_min": float(s.min()), "ap_median": float(np.median(s)), "ap_max": float(s.max())}
        rec.update(_loss_means(steps))
        log.records.append(rec)
    return log


def config_dict(cfg: CurriculumConfig) -> dict:
    return asdict(cfg)
