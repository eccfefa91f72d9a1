"""Fairness metrics: Shapley contributions, Jain's index, equalized odds,
the four per-round fairness notions, and their general-fairness mean.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

logger = logging.getLogger(__name__)

EO_FLOOR = 1e-6
CONTRIB_EPS = 1e-6
EXACT_SHAPLEY_MAX_PLAYERS = 12

COMPONENT_NAMES = ("f_j", "f_g", "f_r", "f_o")


def jfi(values):
    """Jain's fairness index, (sum x)^2 / (n * sum x^2), in [1/n, 1].

    1 means all values equal; 1/n means exactly one value is nonzero.
    The degenerate all-zero input counts as perfectly uniform (logged).
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size < 1:
        raise ValueError("jfi: need at least one value")
    if (v < 0).any():
        raise ValueError("jfi: values must be non-negative")
    total = v.sum()
    if total == 0:
        logger.warning("jfi: all-zero input, returning 1.0 (uniform degenerate case)")
        return 1.0
    return float(total * total / (v.size * np.square(v).sum()))


def shapley_contributions(value_fn, n_players, mode="exact", mc_samples=None, seed=None):
    """Shapley attribution of ``value_fn`` over coalitions of players 0..n-1.

    ``value_fn`` takes a tuple of sorted player ids (possibly empty) and
    returns a float; it is memoized here, so expensive coalition values
    are computed once.  Exact mode enumerates all coalitions and is
    limited to 12 players; monte-carlo mode averages marginal
    contributions over ``mc_samples`` random permutations.
    """
    if n_players < 1:
        raise ValueError("shapley_contributions: need at least one player")
    cache = {}

    def value(subset):
        key = tuple(sorted(subset))
        if key not in cache:
            cache[key] = float(value_fn(key))
        return cache[key]

    if mode == "exact":
        if n_players > EXACT_SHAPLEY_MAX_PLAYERS:
            raise ValueError(
                f"shapley_contributions: exact mode supports at most "
                f"{EXACT_SHAPLEY_MAX_PLAYERS} players, got {n_players}"
            )
        players = range(n_players)
        fact = math.factorial
        norm = fact(n_players)
        shap = np.zeros(n_players, dtype=np.float64)
        for i in players:
            rest = [p for p in players if p != i]
            for size in range(n_players):
                weight = fact(size) * fact(n_players - size - 1) / norm
                for subset in combinations(rest, size):
                    shap[i] += weight * (value(subset + (i,)) - value(subset))
        return shap

    if mode == "mc":
        if not mc_samples or mc_samples < 1:
            raise ValueError(f"shapley_contributions: mc mode needs mc_samples >= 1, got {mc_samples}")
        rng = np.random.default_rng(seed)
        shap = np.zeros(n_players, dtype=np.float64)
        for _ in range(mc_samples):
            perm = rng.permutation(n_players)
            prefix = []
            prev = value(())
            for p in perm:
                prefix.append(int(p))
                cur = value(tuple(prefix))
                shap[p] += cur - prev
                prev = cur
        return shap / mc_samples

    raise ValueError(f"shapley_contributions: unknown mode {mode!r}")


def equalized_odds(tpr_group0, fpr_group0, tpr_group1, fpr_group1):
    """Parity score 1 - (|dTPR| + |dFPR|) / 2, floored at a small positive
    epsilon so the score stays in (0, 1]."""
    score = 1.0 - 0.5 * (abs(tpr_group1 - tpr_group0) + abs(fpr_group1 - fpr_group0))
    return max(score, EO_FLOOR)


def normalize_contributions(contributions):
    """Scale contributions to a positive simplex.

    Raw Shapley values can be zero or negative; values are shifted up by
    the (negative) minimum when one exists, nudged by a small epsilon,
    and divided by their sum.  Already-positive inputs come out as the
    plain s / sum(s) up to the epsilon.
    """
    s = np.asarray(contributions, dtype=np.float64)
    low = s.min()
    if low < 0:
        s = s - low
    s = s + CONTRIB_EPS
    return s / s.sum()


def individual_fairness(accuracies, contributions):
    """Uniformity of per-client performance gains (accuracy over the
    client's normalized contribution)."""
    share = normalize_contributions(contributions)
    return jfi(np.asarray(accuracies, dtype=np.float64) / share)


def incentive_fairness(rewards, contributions):
    """Uniformity of per-client reward over normalized contribution."""
    share = normalize_contributions(contributions)
    return jfi(np.asarray(rewards, dtype=np.float64) / share)


def group_fairness(eo_scores):
    """Median over clients of each client's mean attribute-parity score.

    ``eo_scores`` is one dict per client mapping attribute name to a
    score or None (None marks an attribute whose groups were not both
    present in that client's test split; such entries are skipped).
    Returns None when no client has any valid score (logged).
    """
    client_means = []
    for per_client in eo_scores:
        valid = [v for v in per_client.values() if v is not None]
        if valid:
            client_means.append(float(np.mean(valid)))
    if not client_means:
        logger.warning("group_fairness: no valid equalized-odds scores this round")
        return None
    return float(np.median(client_means))


def orchestrator_fairness(accuracies):
    """Mean client accuracy: the server's view of global-model progress."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size == 0:
        raise ValueError("orchestrator_fairness: no clients")
    return float(a.mean())


def general_fairness(components):
    """Arithmetic mean of the present fairness components.

    ``components`` maps component name to a value or None; None entries
    renormalize the mean (logged).
    """
    present = {k: v for k, v in components.items() if v is not None}
    if not present:
        raise ValueError("general_fairness: no components present")
    if len(present) < len(components):
        missing = sorted(set(components) - set(present))
        logger.warning("general_fairness: averaging without missing components %s", missing)
    return float(np.mean(list(present.values())))


@dataclass
class RoundRecord:
    """Everything the fairness metrics need from one communication round."""

    round_index: int
    client_ids: list
    accuracy: np.ndarray        # per sampled client, model-in-use accuracy
    reward: np.ndarray          # per sampled client, global-model accuracy
    contribution: np.ndarray    # per sampled client, Shapley value
    eo_scores: list             # per sampled client: {attribute: score|None}

    def __post_init__(self):
        n = len(self.client_ids)
        self.accuracy = np.asarray(self.accuracy, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.contribution = np.asarray(self.contribution, dtype=np.float64)
        for name, arr in (("accuracy", self.accuracy), ("reward", self.reward)):
            if arr.shape != (n,):
                raise ValueError(f"round record: {name} must have one entry per client")
            if arr.size and (arr.min() < 0 or arr.max() > 1):
                raise ValueError(f"round record: {name} values must lie in [0, 1]")
        if self.contribution.shape != (n,) or len(self.eo_scores) != n:
            raise ValueError("round record: contribution/eo entries must match clients")


def fairness_from_record(record):
    """The four components plus their mean for one round."""
    f_j = individual_fairness(record.accuracy, record.contribution)
    f_g = group_fairness(record.eo_scores)
    f_r = incentive_fairness(record.reward, record.contribution)
    f_o = orchestrator_fairness(record.accuracy)
    components = {"f_j": f_j, "f_g": f_g, "f_r": f_r, "f_o": f_o}
    return {**components, "F_t": general_fairness(components)}


@dataclass
class FairnessReport:
    """Per-round fairness components plus run-level aggregates."""

    rounds: list = field(default_factory=list)  # one dict per round

    @property
    def component_stats(self):
        """mean/variance per component over rounds (missing values skipped)."""
        stats = {}
        for name in COMPONENT_NAMES + ("F_t",):
            vals = [r[name] for r in self.rounds if r.get(name) is not None]
            if vals:
                stats[name] = (float(np.mean(vals)), float(np.var(vals)))
            else:
                stats[name] = (float("nan"), float("nan"))
        return stats


def build_report(records):
    return FairnessReport(rounds=[fairness_from_record(r) for r in records])
