"""Federated training loop, FedAvg and attention aggregation, DP, and baselines."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import data, metrics, nn
from .metrics import RoundRecord
from .nn import ParamVector

log = logging.getLogger(__name__)

AGGREGATORS = ("fedavg", "attention")
SCORERS = ("update_similarity", "neg_local_loss", "uniform")

# stream tags for per-purpose random generators
_PAIRS, _DP, _SAMPLE = 1, 2, 3


@dataclass(frozen=True)
class DpConfig:
    clip_norm: float = 1.0
    noise_sigma: float = 0.5

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError("dp clip_norm must be positive")
        if self.noise_sigma < 0:
            raise ValueError("dp noise_sigma must be non-negative")


@dataclass(frozen=True)
class FedConfig:
    num_clients: int = 20
    clients_per_round: int = 5
    rounds: int = 100
    local_epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.001
    aggregator: str = "attention"
    scorer: str = "update_similarity"
    temperature: float = 1.0
    dp: DpConfig | None = None
    seed: int = 0
    pairs_per_impression: float = 2.0
    match_fraction: float = 0.5
    holdin_fraction: float = 0.2
    threshold_policy: str = "eer_threshold"

    def __post_init__(self):
        for name in ("num_clients", "clients_per_round", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("rounds", "local_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.clients_per_round > self.num_clients:
            raise ValueError(
                f"clients_per_round ({self.clients_per_round}) exceeds num_clients ({self.num_clients})"
            )
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}")
        if self.scorer not in SCORERS:
            raise ValueError(f"scorer must be one of {SCORERS}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not self.pairs_per_impression > 0:
            raise ValueError("pairs_per_impression must be positive")
        if not 0 < self.match_fraction < 1 or not 0 < self.holdin_fraction < 1:
            raise ValueError("match_fraction and holdin_fraction must lie in (0, 1)")
        if self.threshold_policy not in ("eer_threshold", "best_accuracy"):
            raise ValueError("threshold_policy must be eer_threshold or best_accuracy")


@dataclass
class ClientUpdate:
    client_id: int
    delta: ParamVector
    n_i: int
    local_loss: float


@dataclass
class AttentionWeights:
    scores: dict[int, float]
    weights: dict[int, float]


class ClientExcluded(RuntimeError):
    """The client cannot build training pairs and sits out the round."""


def _rng(cfg: FedConfig, *stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *stream])


# ---------------------------------------------------------------------------
# Client side
# ---------------------------------------------------------------------------


def local_train(
    global_params: ParamVector,
    client_data: list[data.Subject],
    cfg: FedConfig,
    round: int,
    model: nn.SiameseModel,
    client_id: int = 0,
) -> ClientUpdate:
    """Train a copy of the global model on one client's pairs with a fresh Adam state.

    A fixed share of the client's pairs is held in to measure local_loss
    after training.
    """
    rng = _rng(cfg, _PAIRS, round, client_id)
    n_i = data.num_impressions(client_data)
    examples, collate = _client_examples(client_data, cfg, model, rng, client_id)
    n_val = max(1, int(round_half_up(cfg.holdin_fraction * len(examples))))
    val = collate(examples[:n_val])
    train = examples[n_val:]

    params = global_params.copy()
    state = nn.AdamState.fresh(len(params), lr=cfg.learning_rate)
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            batch = collate([train[i] for i in order[start : start + cfg.batch_size]])
            _, grad = nn.backward(model, params, batch, rng)
            params = nn.adam_step(state, params, grad)
    local_loss = nn.batch_loss(model, params, val)
    delta = params.with_values(params.values - global_params.values)
    return ClientUpdate(client_id, delta, n_i, float(local_loss))


def _client_examples(client_data, cfg, model, rng, client_id):
    if model.head == "classifier":
        items = [(img, s.subject_id) for s in client_data for img in s.impressions]
        if len(items) < 2:
            raise ClientExcluded(f"client {client_id}: fewer than two images")
        bad = [sid for _, sid in items if not 0 <= sid < model.num_classes]
        if bad:
            raise ValueError(f"subject id {bad[0]} outside the {model.num_classes} classifier classes")
        items = [items[i] for i in rng.permutation(len(items))]

        def collate(chunk):
            return nn.LabeledBatch(np.stack([c[0] for c in chunk]), np.array([c[1] for c in chunk]))

        return items, collate
    count = max(5, math.ceil(cfg.pairs_per_impression * data.num_impressions(client_data)))
    try:
        pairs = data.sample_pairs(client_data, count, cfg.match_fraction, rng)
    except ValueError as exc:
        raise ClientExcluded(f"client {client_id}: {exc}") from exc
    return pairs, nn.stack_pairs


def round_half_up(x: float) -> float:
    return math.floor(x + 0.5)


def dp_sanitize(update: ClientUpdate, dp: DpConfig, rng: np.random.Generator) -> ClientUpdate:
    """Clip the update to L2 norm clip_norm, then add N(0, sigma^2) per coordinate."""
    v = update.delta.values
    norm = float(np.linalg.norm(v))
    scale = min(1.0, dp.clip_norm / norm) if norm > 0 else 1.0
    clipped = v * scale
    # rounding can leave the norm an ulp above the bound; shave the scale until it holds
    while scale < 1.0 and np.linalg.norm(clipped) > dp.clip_norm:
        scale = np.nextafter(scale, 0.0)
        clipped = v * scale
    if dp.noise_sigma > 0:
        clipped = clipped + rng.normal(0.0, dp.noise_sigma, size=v.shape)
    return replace(update, delta=update.delta.with_values(clipped))


# ---------------------------------------------------------------------------
# Server side
# ---------------------------------------------------------------------------


def _check_layouts(global_params, updates):
    for u in updates:
        global_params.check_compatible(u.delta)


def fedavg_aggregate(global_params: ParamVector, updates: list[ClientUpdate]) -> ParamVector:
    """global + sum_i (n_i / N) * delta_i."""
    if not updates:
        raise ValueError("no client updates to aggregate")
    _check_layouts(global_params, updates)
    total = sum(u.n_i for u in updates)
    step = np.zeros_like(global_params.values)
    for u in updates:
        step += (u.n_i / total) * u.delta.values
    return global_params.with_values(global_params.values + step)


def score_updates(global_params, updates: list[ClientUpdate], scorer: str) -> dict[int, float]:
    """Relevance score per client.

    update_similarity: cosine between the client delta and the round's mean
    delta (0 when either is the zero vector). neg_local_loss: minus the
    client's held-in loss. uniform: 0 for everyone.
    """
    if scorer == "neg_local_loss":
        return {u.client_id: -float(u.local_loss) for u in updates}
    if scorer == "uniform":
        return {u.client_id: 0.0 for u in updates}
    if scorer != "update_similarity":
        raise ValueError(f"unknown scorer {scorer!r}")
    mean = np.mean([u.delta.values for u in updates], axis=0)
    mean_norm = np.linalg.norm(mean)
    scores = {}
    for u in updates:
        norm = np.linalg.norm(u.delta.values)
        if norm == 0 or mean_norm == 0:
            scores[u.client_id] = 0.0
        else:
            cos = float(u.delta.values @ mean / (norm * mean_norm))
            scores[u.client_id] = min(1.0, max(-1.0, cos))
    return scores


def attention_weights(scores: dict[int, float], temperature: float = 1.0) -> AttentionWeights:
    """Softmax of scores / temperature, stabilised by subtracting the max."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    ids = list(scores)
    e = np.array([scores[i] for i in ids], dtype=np.float64)
    if not np.all(np.isfinite(e)):
        raise ValueError("scores must be finite")
    z = np.exp((e - e.max()) / temperature)
    alpha = z / z.sum()
    return AttentionWeights(dict(scores), {i: float(a) for i, a in zip(ids, alpha)})


def attention_aggregate(
    global_params: ParamVector, updates: list[ClientUpdate], weights: AttentionWeights
) -> ParamVector:
    """global + sum_i alpha_i * delta_i."""
    if not updates:
        raise ValueError("no client updates to aggregate")
    ids = [u.client_id for u in updates]
    if sorted(ids) != sorted(weights.weights) or len(set(ids)) != len(ids):
        raise ValueError(f"attention weights cover {sorted(weights.weights)}, updates {sorted(ids)}")
    _check_layouts(global_params, updates)
    step = np.zeros_like(global_params.values)
    for u in updates:
        step += weights.weights[u.client_id] * u.delta.values
    return global_params.with_values(global_params.values + step)


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    records: list[RoundRecord]
    final_params: list[ParamVector]
    final_scores: list[metrics.ScoredPair] = field(default_factory=list)
    attention: list[AttentionWeights] = field(default_factory=list)


def sample_clients(cfg: FedConfig, round: int, client_ids) -> list[int]:
    ids = sorted(client_ids)
    picked = _rng(cfg, _SAMPLE, round).choice(len(ids), size=cfg.clients_per_round, replace=False)
    return sorted(ids[i] for i in picked)


def _initial(model, cfg, init_params):
    return init_params.copy() if init_params is not None else model.init_params(
        np.random.default_rng(cfg.seed)
    )


def _skip_record(records, r):
    prev = records[-1] if records else RoundRecord(r, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    return replace(prev, round=r, skipped=True)


def run_federated(
    cfg: FedConfig,
    clients: dict[int, list[data.Subject]],
    eval_pairs,
    model: nn.SiameseModel,
    init_params: ParamVector | None = None,
) -> RunResult:
    """Sample, train locally, optionally sanitise, aggregate, evaluate; once per round."""
    if len(clients) != cfg.num_clients:
        raise ValueError(f"config expects {cfg.num_clients} clients, partition has {len(clients)}")
    params = _initial(model, cfg, init_params)
    records: list[RoundRecord] = []
    attention: list[AttentionWeights] = []
    scores: list[metrics.ScoredPair] = []
    for r in range(1, cfg.rounds + 1):
        updates = []
        for cid in sample_clients(cfg, r, clients):
            try:
                upd = local_train(params, clients[cid], cfg, r, model, cid)
            except ClientExcluded as exc:
                log.warning("round %d: %s; excluded", r, exc)
                continue
            if cfg.dp is not None:
                upd = dp_sanitize(upd, cfg.dp, _rng(cfg, _DP, r, cid))
            updates.append(upd)
        if not updates:
            log.warning("round %d: no usable client updates; round skipped", r)
            records.append(_skip_record(records, r))
            continue
        if cfg.aggregator == "fedavg":
            params = fedavg_aggregate(params, updates)
        else:
            w = attention_weights(score_updates(params, updates, cfg.scorer), cfg.temperature)
            attention.append(w)
            params = attention_aggregate(params, updates, w)
        rec, scores = metrics.evaluate(model, params, eval_pairs, cfg.threshold_policy, r)
        records.append(rec)
    return RunResult(records, [params], scores, attention)


def _train_isolated(cfg, subjects, eval_pairs, model, params, client_id, rounds):
    """Yield (record, scores, params) after each round of solo training."""
    for r in range(1, rounds + 1):
        upd = local_train(params, subjects, cfg, r, model, client_id)
        params = params.with_values(params.values + upd.delta.values)
        rec, scores = metrics.evaluate(model, params, eval_pairs, cfg.threshold_policy, r)
        yield rec, scores, params


def run_local_only(cfg, clients, eval_pairs, model, init_params=None) -> RunResult:
    """Every client trains alone for all rounds; metrics are unweighted client means."""
    start = _initial(model, cfg, init_params)
    per_client = {}
    finals, pooled = [], []
    for cid in sorted(clients):
        try:
            runs = list(_train_isolated(cfg, clients[cid], eval_pairs, model, start, cid, cfg.rounds))
        except ClientExcluded as exc:
            log.warning("local-only: %s; excluded", exc)
            continue
        per_client[cid] = [rec for rec, _, _ in runs]
        if runs:
            finals.append(runs[-1][2])
            pooled.extend(runs[-1][1])
    records = []
    for r in range(cfg.rounds):
        rows = [recs[r] for recs in per_client.values()]
        if not rows:
            records.append(_skip_record(records, r + 1))
            continue
        records.append(
            RoundRecord(
                r + 1,
                *(float(np.mean([getattr(x, f) for x in rows]))
                  for f in ("accuracy", "mean_loss", "eer", "far", "frr", "threshold")),
            )
        )
    return RunResult(records, finals, pooled)


def run_centralized(cfg, all_data, eval_pairs, model, init_params=None) -> RunResult:
    """Pool all training impressions on one node; a round is local_epochs epochs."""
    params = _initial(model, cfg, init_params)
    records, scores = [], []
    for rec, scores, params in _train_isolated(cfg, all_data, eval_pairs, model, params, 0, cfg.rounds):
        records.append(rec)
    return RunResult(records, [params], scores)
