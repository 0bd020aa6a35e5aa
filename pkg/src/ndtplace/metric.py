"""Lazy quadruplet metric learning: loss, tuple assembly and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ModelConfig, PlaceNet, embed, stack_maps
from .nn import set_step
from .places import PairIndex, build_pair_index

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class TrainingDataError(ValueError):
    pass


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 20
    batch_size: int = 2
    lr: float = 1e-5
    momentum: float = 0.9
    milestones: tuple = (9, 15)
    gamma: float = 0.1
    alpha: float = 0.5
    beta: float = 0.2
    positives: int = 2
    negatives: int = 18
    hard_pool: int = 2000
    hard_anchor: str = "query"
    dtype: str = "float64"

    def __post_init__(self):
        if not self.alpha > self.beta > 0:
            raise ValueError("margins must satisfy alpha > beta > 0")
        if self.hard_anchor not in ("query", "negatives"):
            raise ValueError("hard_anchor must be 'query' or 'negatives'")
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))

    def lr_at(self, epoch: int) -> float:
        """Multi-step schedule; ``epoch`` is 0-based and a milestone applies from that epoch on."""
        drops = sum(1 for m in self.milestones if epoch >= m)
        return self.lr * self.gamma**drops


def distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance along the last axis (broadcasting)."""
    diff = a - b
    return ad.sqrt((diff * diff).sum(axis=-1))


def lazy_quadruplet_loss(query, positives, negatives, hard_negative, alpha=0.5, beta=0.2, hard_anchor="query") -> Tensor:
    """Per-tuple lazy quadruplet loss; leading axes are tuple batch axes.

    Shapes: query (..., D), positives (..., P, D), negatives (..., N, D),
    hard_negative (..., D). With ``d_pos`` the closest positive,

        max_n [alpha + d_pos - d(q, neg_n)]_+  +  [beta + d_pos - d(q, neg*)]_+

    ``hard_anchor="negatives"`` measures the second hinge from every negative
    to ``neg*`` instead (max over negatives), the classic quadruplet form.
    """
    q, pos, neg, hard = (ad.as_tensor(x) for x in (query, positives, negatives, hard_negative))
    if neg.shape[-2] == 0:
        raise ValueError("lazy quadruplet loss needs at least one negative")
    if pos.shape[-2] == 0:
        raise ValueError("lazy quadruplet loss needs at least one positive")
    qe = q.reshape(q.shape[:-1] + (1, q.shape[-1]))
    d_pos = distance(qe, pos).min(axis=-1)
    lead = d_pos.shape + (1,)
    first = ad.relu((d_pos.reshape(lead) + alpha) - distance(qe, neg)).max(axis=-1)
    if hard_anchor == "query":
        second = ad.relu((d_pos + beta) - distance(q, hard))
    else:
        he = hard.reshape(hard.shape[:-1] + (1, hard.shape[-1]))
        second = ad.relu((d_pos.reshape(lead) + beta) - distance(neg, he)).max(axis=-1)
    return first + second


@dataclass
class TrainingTuple:
    query: int
    positives: list[int]
    negatives: list[int]
    hard: int

    @property
    def ids(self) -> list[int]:
        return [self.query, *self.positives, *self.negatives, self.hard]


def assemble_batch(
    query_ids,
    pairs: PairIndex,
    rng: np.random.Generator,
    descriptors: dict[int, np.ndarray] | None = None,
    pool=None,
    n_pos: int = 2,
    n_neg: int = 18,
) -> list[TrainingTuple]:
    """Sample one tuple per query; queries lacking positives/negatives are skipped.

    Positives and negatives are drawn uniformly without replacement. The hard
    negative is the pool member (outside the sampled negatives) whose current
    descriptor is closest to the query's; without descriptors it is drawn
    uniformly from the remaining negatives.
    """
    tuples = []
    pool_set = None if pool is None else set(int(p) for p in pool)
    for qid in query_ids:
        qid = int(qid)
        if not pairs.eligible(qid, n_pos, n_neg + 1):
            log.info(
                "skipping query %d: %d positives, %d negatives",
                qid,
                len(pairs.positives.get(qid, ())),
                len(pairs.negatives.get(qid, ())),
            )
            continue
        pos = rng.choice(pairs.positives[qid], n_pos, replace=False)
        negs = pairs.negatives[qid]
        chosen = rng.choice(negs, n_neg, replace=False)
        rest = np.setdiff1d(negs, chosen)
        cand = rest if pool_set is None else np.array([c for c in rest if int(c) in pool_set], dtype=np.int64)
        if len(cand) == 0:
            cand = rest
        if descriptors is not None and qid in descriptors and all(int(c) in descriptors for c in cand):
            q = descriptors[qid]
            d = np.array([np.linalg.norm(descriptors[int(c)] - q) for c in cand])
            hard = int(cand[np.lexsort((cand, d))[0]])
        else:
            hard = int(rng.choice(cand))
        tuples.append(TrainingTuple(qid, [int(p) for p in pos], [int(n) for n in chosen], hard))
    return tuples


class SGD:
    """Momentum SGD (v <- mu v + g; p <- p - lr v)."""

    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class TrainResult:
    model: PlaceNet
    curve: list[tuple[int, float, float]] = field(default_factory=list)
    skipped: int = 0
    seconds: float = 0.0


def tuple_loss(model: PlaceNet, maps, tuples: list[TrainingTuple], sched: TrainSchedule) -> Tensor:
    """Mean lazy quadruplet loss over ``tuples`` from one batched forward pass."""
    per = 1 + sched.positives + sched.negatives + 1
    batch = [maps[i] for t in tuples for i in t.ids]
    means, covs = stack_maps(batch, model.dtype)
    desc = model(means, covs).reshape(len(tuples), per, -1)
    p, n = sched.positives, sched.negatives
    losses = lazy_quadruplet_loss(
        desc[:, 0],
        desc[:, 1 : 1 + p],
        desc[:, 1 + p : 1 + p + n],
        desc[:, 1 + p + n],
        sched.alpha,
        sched.beta,
        sched.hard_anchor,
    )
    return losses.mean()


def train(
    maps,
    records,
    model_cfg: ModelConfig,
    sched: TrainSchedule = TrainSchedule(),
    seed: int = 0,
    pairs: PairIndex | None = None,
    on_epoch=None,
) -> TrainResult:
    """Train a fresh model on the ``split == "train"`` records.

    ``maps`` maps record id -> NdtMap. Returns the model (eval mode) and the
    per-epoch (epoch, mean loss, lr) curve.
    """
    t0 = time.perf_counter()
    train_recs = [r for r in records if r.split == "train"]
    if pairs is None:
        pairs = build_pair_index(train_recs)
    dtype = np.dtype(sched.dtype)
    model = PlaceNet(model_cfg, seed=seed, dtype=dtype)
    opt = SGD(model.parameters(), sched.lr_at(0), sched.momentum)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    ids = np.array([r.id for r in train_recs], dtype=np.int64)
    queries = np.array([i for i in ids if pairs.eligible(int(i), sched.positives, sched.negatives + 1)], dtype=np.int64)
    skipped = len(ids) - len(queries)
    if skipped:
        log.info("%d training places lack enough positives/negatives and are never queries", skipped)
    if len(queries) == 0:
        raise TrainingDataError(
            f"no training query has {sched.positives} positives and {sched.negatives + 1} negatives"
        )
    result = TrainResult(model, skipped=skipped)
    step = 0
    for epoch in range(sched.epochs):
        opt.lr = sched.lr_at(epoch)
        pool = rng.choice(ids, min(sched.hard_pool, len(ids)), replace=False)
        need = np.union1d(pool, queries)
        desc = embed(model, [maps[int(i)] for i in need])
        cache = {int(i): d for i, d in zip(need, desc)}
        order = rng.permutation(queries)
        losses = []
        model.train()
        for b in range(0, len(order), sched.batch_size):
            tuples = assemble_batch(order[b : b + sched.batch_size], pairs, rng, cache, pool, sched.positives, sched.negatives)
            if not tuples:
                continue
            set_step(model, step)
            loss = tuple_loss(model, maps, tuples, sched)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"loss became {value} at epoch {epoch}, step {step} (lr={opt.lr:g}, queries={[t.query for t in tuples]})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
            step += 1
        mean = float(np.mean(losses)) if losses else float("nan")
        result.curve.append((epoch, mean, opt.lr))
        log.info("epoch %d: mean loss %.5f, lr %g", epoch, mean, opt.lr)
        if on_epoch is not None:
            on_epoch(epoch, mean, model)
    model.eval()
    result.seconds = time.perf_counter() - t0
    return result
