"""Federated simulation: client sampling, local training, aggregation
strategies (weighted averaging, loss-reweighted averaging, personalized
proximal training), evaluation, and the round loop.

Determinism contract: every source of randomness is a stream derived from
(master seed, purpose tag, round, client), so client work can run on any
number of threads and still produce identical records; reductions happen
in sorted client order.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import fairness
from .ndmath import GradientTape, Tensor, adam_step, init_adam
from . import ndmath as nd

logger = logging.getLogger(__name__)

# purpose tags for derived seed streams
_TAG_INIT, _TAG_SAMPLE, _TAG_TRAIN, _TAG_SHAPLEY, _TAG_PERSONAL = 10, 11, 12, 13, 14

_EVAL_BATCH = 512
_QFED_LOSS_FLOOR = 1e-10


class TrainingDivergedError(RuntimeError):
    def __init__(self, client_id, epoch, batch_index, value):
        super().__init__(
            f"non-finite training loss {value} at client {client_id}, "
            f"epoch {epoch}, batch {batch_index}"
        )
        self.client_id = client_id
        self.epoch = epoch
        self.batch_index = batch_index


@dataclass
class StrategyConfig:
    """Aggregation strategy plus its strategy-specific knobs.

    qfedavg needs ``q`` (fairness exponent) and ``step_l`` (the step-size
    constant, conventionally 1/learning-rate); ditto needs ``lam`` (the
    proximal coupling) and ``personal_epochs``.
    """

    kind: str = "fedavg"
    q: float = None
    step_l: float = None
    lam: float = None
    personal_epochs: int = None

    def __post_init__(self):
        kinds = ("fedavg", "qfedavg", "ditto")
        if self.kind not in kinds:
            raise ValueError(f"strategy kind must be one of {kinds}, got {self.kind!r}")
        if self.kind == "qfedavg":
            if self.q is None or self.q < 0:
                raise ValueError(f"qfedavg: q must be >= 0, got {self.q}")
            if self.step_l is None or self.step_l <= 0:
                raise ValueError(f"qfedavg: step_l must be > 0, got {self.step_l}")
        elif self.q is not None or self.step_l is not None:
            raise ValueError(f"{self.kind}: q/step_l only apply to qfedavg")
        if self.kind == "ditto":
            if self.lam is None or self.lam < 0:
                raise ValueError(f"ditto: lam must be >= 0, got {self.lam}")
            if self.personal_epochs is None or self.personal_epochs < 0:
                raise ValueError(f"ditto: personal_epochs must be >= 0, got {self.personal_epochs}")
        elif self.lam is not None or self.personal_epochs is not None:
            raise ValueError(f"{self.kind}: lam/personal_epochs only apply to ditto")


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ClientState:
    client_id: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    personal: np.ndarray = None  # ditto only


@dataclass
class ClientUpdate:
    client_id: int
    params: np.ndarray  # flat trained vector
    n_samples: int
    start_loss: float   # mean train loss at the round-start parameters


@dataclass
class EvalResult:
    accuracy: float
    eo: dict = field(default_factory=dict)           # attribute -> score|None
    group_rates: dict = field(default_factory=dict)  # attribute -> {group: (tpr, fpr)}


def sample_clients(n_clients, rate, rng):
    """Uniform sample without replacement of max(1, round(rate * n)) ids."""
    if not 0 < rate <= 1:
        raise ValueError(f"sample_clients: rate must be in (0, 1], got {rate}")
    size = max(1, int(round(rate * n_clients)))
    return np.sort(rng.choice(n_clients, size=size, replace=False))


def _batches(order, batch_size, min_size=1):
    """Contiguous chunks of an index order; a trailing chunk smaller than
    min_size is merged into its predecessor (score-matrix losses need at
    least two samples)."""
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < min_size:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    if chunks and len(chunks[-1]) < min_size:
        return []
    return chunks


def _min_batch(bundle):
    return 2 if bundle.uses_critic else 1


def _mean_loss(bundle, params, dataset, idx, batch_size):
    """Mean per-sample training loss at fixed parameters (no gradient)."""
    tensors = [Tensor(p) for p in params]
    total, count = 0.0, 0
    for chunk in _batches(idx, batch_size, _min_batch(bundle)):
        x = Tensor(dataset.samples[chunk])
        loss = bundle.training_loss(tensors, x, dataset.labels[chunk])
        total += loss.item() * len(chunk)
        count += len(chunk)
    return total / count if count else float("nan")


def _train_loop(bundle, params, dataset, idx, epochs, batch_size, opt, rng,
                client_id=-1, prox=None):
    """Epochs of mini-batch Adam; optionally adds a proximal pull
    (lam/2)*||params - ref||^2 toward a reference vector."""
    state = init_adam(params, lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps)
    min_size = _min_batch(bundle)
    ref_tensors = None
    if prox is not None:
        lam, ref_flat = prox
        ref_tensors = [Tensor(p) for p in bundle.unpack(ref_flat)]
    for epoch in range(epochs):
        order = idx[rng.permutation(len(idx))]
        for bi, chunk in enumerate(_batches(order, batch_size, min_size)):
            x = Tensor(dataset.samples[chunk])
            tensors = [Tensor(p) for p in params]
            with GradientTape() as tape:
                loss = bundle.training_loss(tensors, x, dataset.labels[chunk])
                if prox is not None and lam > 0:
                    penalty = None
                    for t, r in zip(tensors, ref_tensors):
                        d = nd.sub(t, r)
                        term = nd.sum_(nd.mul(d, d))
                        penalty = term if penalty is None else nd.add(penalty, term)
                    loss = nd.add(loss, nd.mul(penalty, 0.5 * lam))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(client_id, epoch, bi, value)
            grads = tape.gradient(loss, tensors)
            params, state = adam_step(params, grads, state)
    return params


def local_train(bundle, start_flat, dataset, client, epochs, batch_size, opt, rng):
    """One client's round: record the start loss, run local epochs, and
    return the trained parameters with metadata."""
    if len(client.train_idx) == 0:
        raise ValueError(f"local_train: client {client.client_id} has no training data")
    params = bundle.unpack(np.array(start_flat, copy=True))
    start_loss = _mean_loss(bundle, params, dataset, client.train_idx, batch_size)
    params = _train_loop(
        bundle, params, dataset, client.train_idx, epochs, batch_size, opt, rng,
        client_id=client.client_id,
    )
    return ClientUpdate(
        client_id=client.client_id,
        params=bundle.pack(params),
        n_samples=len(client.train_idx),
        start_loss=start_loss,
    )


def aggregate_fedavg(updates):
    """Sample-count-weighted mean of client parameter vectors."""
    if not updates:
        raise ValueError("aggregate_fedavg: no updates to aggregate")
    stack = np.stack([u.params.astype(np.float64) for u in updates])
    weights = np.array([u.n_samples for u in updates], dtype=np.float64)
    out = (weights[:, None] * stack).sum(axis=0) / weights.sum()
    return out.astype(updates[0].params.dtype)


def aggregate_qfedavg(global_flat, updates, q, step_l):
    """Loss-reweighted aggregation that pulls toward high-loss clients.

    With q = 0 the update reduces to the unweighted mean of the client
    models.  Start losses are floored at a tiny epsilon before the
    fractional powers; a non-finite loss is rejected.
    """
    if not updates:
        raise ValueError("aggregate_qfedavg: no updates to aggregate")
    if q < 0 or step_l <= 0:
        raise ValueError(f"aggregate_qfedavg: need q >= 0 and step_l > 0, got {q}, {step_l}")
    w = global_flat.astype(np.float64)
    num = np.zeros_like(w)
    den = 0.0
    for u in updates:
        f = u.start_loss
        if not np.isfinite(f):
            raise ValueError(
                f"aggregate_qfedavg: client {u.client_id} start loss {f} is not usable"
            )
        f = max(f, _QFED_LOSS_FLOOR)
        delta = step_l * (w - u.params.astype(np.float64))
        fq = f**q
        h = (q * f ** (q - 1.0) if q > 0 else 0.0) * float(delta @ delta) + step_l * fq
        num += fq * delta
        den += h
    return (w - num / den).astype(global_flat.dtype)


def evaluate(bundle, flat_params, dataset, test_idx, attribute_map=None):
    """Accuracy plus, per sensitive attribute, group-wise one-vs-rest
    TPR/FPR (macro-averaged over classes) and the equalized-odds score.

    An attribute whose two groups are not both present in the test split
    yields eo=None for that attribute (logged), never a filled-in zero.
    """
    test_idx = np.asarray(test_idx)
    if test_idx.size == 0:
        raise ValueError("evaluate: empty test set")
    params = bundle.unpack(flat_params)
    preds = np.empty(test_idx.size, dtype=np.int64)
    for start in range(0, test_idx.size, _EVAL_BATCH):
        chunk = test_idx[start : start + _EVAL_BATCH]
        preds[start : start + chunk.size] = bundle.predict_classes(
            params, dataset.samples[chunk]
        )
    labels = dataset.labels[test_idx]
    accuracy = float((preds == labels).mean())
    result = EvalResult(accuracy=accuracy)
    if attribute_map is None:
        return result
    n_classes = dataset.n_classes
    for name in attribute_map.names:
        groups = attribute_map.group_of(name, labels)
        rates = {}
        for g in (0, 1):
            mask = groups == g
            if not mask.any():
                continue
            tprs, fprs = [], []
            for c in range(n_classes):
                pos = mask & (labels == c)
                neg = mask & (labels != c)
                if pos.any():
                    tprs.append(float((preds[pos] == c).mean()))
                if neg.any():
                    fprs.append(float((preds[neg] == c).mean()))
            rates[g] = (float(np.mean(tprs)), float(np.mean(fprs)))
        result.group_rates[name] = rates
        if len(rates) == 2:
            result.eo[name] = fairness.equalized_odds(
                rates[0][0], rates[0][1], rates[1][0], rates[1][1]
            )
        else:
            logger.info("evaluate: attribute %r has a single group in this test split", name)
            result.eo[name] = None
    return result


@dataclass
class SimulationSpec:
    """Everything one simulation run needs, already resolved."""

    dataset: object
    clients: list
    val_idx: np.ndarray
    bundle: object
    strategy: StrategyConfig
    optimizer: OptimizerConfig
    rounds: int
    local_epochs: int
    batch_size: int
    participation: float
    seed: int
    attribute_map: object = None
    shapley_mode: str = "auto"   # auto | exact | mc
    shapley_samples: int = 0     # 0 -> 200 * |sampled| in mc mode
    workers: int = 1

    def __post_init__(self):
        if self.rounds < 0 or self.local_epochs < 0:
            raise ValueError("simulation: rounds and local_epochs must be >= 0")
        if np.asarray(self.val_idx).size == 0:
            raise ValueError("simulation: need a non-empty server validation split")
        if self.shapley_mode not in ("auto", "exact", "mc"):
            raise ValueError(f"simulation: unknown shapley mode {self.shapley_mode!r}")


def _stream(seed, *tags):
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(t) for t in tags]))


def init_global_params(spec):
    rng = _stream(spec.seed, _TAG_INIT)
    return spec.bundle.pack(spec.bundle.init_params(rng))


def run_simulation(spec):
    """Yield one RoundRecord per communication round.

    Per round: sample clients, train locally (possibly in parallel),
    attribute contributions over the round's updates via Shapley values
    on the server validation split, aggregate per the strategy, evaluate
    on every sampled client's test split, and emit the record.
    """
    bundle = spec.bundle
    global_flat = init_global_params(spec)
    if spec.strategy.kind == "ditto":
        for c in spec.clients:
            c.personal = global_flat.copy()
    executor = ThreadPoolExecutor(max_workers=max(1, spec.workers))
    try:
        for k in range(spec.rounds):
            sampled = sample_clients(
                len(spec.clients), spec.participation, _stream(spec.seed, _TAG_SAMPLE, k)
            )
            clients = [spec.clients[i] for i in sampled]

            def _train(client, k=k):
                rng = _stream(spec.seed, _TAG_TRAIN, k, client.client_id)
                return local_train(
                    bundle, global_flat, spec.dataset, client,
                    spec.local_epochs, spec.batch_size, spec.optimizer, rng,
                )

            updates = list(executor.map(_train, clients))

            contributions = _round_shapley(spec, global_flat, updates, k)

            if spec.strategy.kind == "qfedavg":
                new_global = aggregate_qfedavg(
                    global_flat, updates, spec.strategy.q, spec.strategy.step_l
                )
            else:
                new_global = aggregate_fedavg(updates)

            if spec.strategy.kind == "ditto":

                def _personalize(client, k=k):
                    rng = _stream(spec.seed, _TAG_PERSONAL, k, client.client_id)
                    params = bundle.unpack(np.array(client.personal, copy=True))
                    params = _train_loop(
                        bundle, params, spec.dataset, client.train_idx,
                        spec.strategy.personal_epochs, spec.batch_size,
                        spec.optimizer, rng, client_id=client.client_id,
                        prox=(spec.strategy.lam, new_global),
                    )
                    return bundle.pack(params)

                for client, personal in zip(clients, executor.map(_personalize, clients)):
                    client.personal = personal

            accuracy, reward, eo_scores = [], [], []
            for client in clients:
                global_eval = evaluate(
                    bundle, new_global, spec.dataset, client.test_idx, spec.attribute_map
                )
                if spec.strategy.kind == "ditto":
                    own_eval = evaluate(
                        bundle, client.personal, spec.dataset, client.test_idx,
                        spec.attribute_map,
                    )
                else:
                    own_eval = global_eval
                accuracy.append(own_eval.accuracy)
                reward.append(global_eval.accuracy)
                eo_scores.append(own_eval.eo)

            global_flat = new_global
            yield fairness.RoundRecord(
                round_index=k,
                client_ids=[int(i) for i in sampled],
                accuracy=np.array(accuracy),
                reward=np.array(reward),
                contribution=contributions,
                eo_scores=eo_scores,
            )
    finally:
        executor.shutdown(wait=False)


def _round_shapley(spec, global_flat, updates, round_index):
    """Per-client contributions: value of a coalition is the accuracy of
    its plain weighted-average model on the server validation split."""
    n = len(updates)
    base_accuracy = evaluate(spec.bundle, global_flat, spec.dataset, spec.val_idx).accuracy

    def value_fn(subset):
        if not subset:
            return base_accuracy
        merged = aggregate_fedavg([updates[i] for i in subset])
        return evaluate(spec.bundle, merged, spec.dataset, spec.val_idx).accuracy

    mode = spec.shapley_mode
    if mode == "auto":
        mode = "exact" if n <= 10 else "mc"
    mc_samples = spec.shapley_samples or 200 * n
    seed = np.random.SeedSequence([int(spec.seed), _TAG_SHAPLEY, int(round_index)])
    return fairness.shapley_contributions(
        value_fn, n, mode=mode, mc_samples=mc_samples, seed=seed
    )
