"""Layer localization, gradient-magnitude importance scores and top-k masks."""

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .model import ROLE_FC1, ROLE_FC2, loss_and_grad


class LocalizationMode(str, enum.Enum):
    FIRST = "first"
    SECOND = "second"
    BOTH = "both"


class Strategy(str, enum.Enum):
    WEIGHT = "weight"
    NEURON = "neuron"
    RANDOM = "random"


_MODE_ROLES = {
    LocalizationMode.FIRST: (ROLE_FC1,),
    LocalizationMode.SECOND: (ROLE_FC2,),
    LocalizationMode.BOTH: (ROLE_FC1, ROLE_FC2),
}


def localize_layers(registry, mode):
    """Flat indices (sorted) of the parameters eligible under ``mode``."""
    roles = _MODE_ROLES[LocalizationMode(mode)]
    return registry.indices(lambda e: e.role in roles)


@dataclass
class ImportanceMap:
    eligible: np.ndarray  # sorted flat indices
    values: np.ndarray    # aligned with ``eligible``, >= 0

    def dense(self, total):
        out = np.zeros(total)
        out[self.eligible] = self.values
        return out


def score_parameters(model, features, labels, eligible, loss_fn=loss_and_grad,
                     batch_size=None):
    """Mean absolute gradient of the training loss over the dataset.

    Batches are taken in dataset order; each batch contributes the absolute
    value of its own gradient and the result is averaged over batches. With
    ``batch_size=1`` this is the per-example average.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = features.shape[0]
    if n == 0:
        raise ArgumentError("score_parameters: empty dataset")
    batch_size = n if batch_size is None else int(batch_size)
    acc = np.zeros(len(eligible))
    batches = 0
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        _, grad = loss_fn(model, features[sl], labels[sl])
        acc += np.abs(grad[eligible])
        batches += 1
    return ImportanceMap(np.asarray(eligible, dtype=np.int64), acc / batches)


def row_scores(weight_scores, bias_scores=None):
    """Per-output-neuron score: sum of incoming weight scores plus the bias score."""
    rows = np.asarray(weight_scores, dtype=np.float64).sum(axis=1)
    if bias_scores is not None:
        rows = rows + np.asarray(bias_scores, dtype=np.float64)
    return rows


def neuron_groups(registry, eligible):
    """Row groups over the eligible set: one per output neuron of every
    eligible weight matrix, holding the row's weights and its bias."""
    eligible_set = np.zeros(registry.total, dtype=bool)
    eligible_set[eligible] = True
    groups = []
    for e in registry:
        if not e.name.endswith(".weight") or not eligible_set[e.start]:
            continue
        rows, cols = e.shape
        idx = e.start + np.arange(rows * cols, dtype=np.int64).reshape(rows, cols)
        bias_name = e.name[:-len("weight")] + "bias"
        if bias_name in registry and eligible_set[registry[bias_name].start]:
            bias = registry[bias_name].start + np.arange(rows, dtype=np.int64)
            idx = np.concatenate([idx, bias[:, None]], axis=1)
        groups.extend((e.name, r, idx[r]) for r in range(rows))
    return groups


def neuron_scores(scores, registry):
    """``{weight name: per-row scores}`` for every eligible weight matrix."""
    dense = scores.dense(registry.total)
    out = {}
    for name, _, idx in neuron_groups(registry, scores.eligible):
        out.setdefault(name, []).append(dense[idx].sum())
    return {k: np.array(v) for k, v in out.items()}


@dataclass(frozen=True)
class SelectionMask:
    indices: np.ndarray  # sorted flat indices of selected parameters
    total: int
    rate: float
    strategy: str

    def __post_init__(self):
        self.indices.setflags(write=False)

    @property
    def bits(self):
        out = np.zeros(self.total, dtype=bool)
        out[self.indices] = True
        return out

    def __len__(self):
        return int(self.indices.size)


def selection_budget(rate, n_eligible):
    """round(rate * n) with halves rounded up."""
    return int(np.floor(rate * n_eligible + 0.5))


def _top_k(flat_idx, values, k):
    # descending value, ascending flat index on ties
    order = np.lexsort((flat_idx, -values))
    return flat_idx[order[:k]]


def build_mask(scores, rate, strategy=Strategy.WEIGHT, rng=None, registry=None, total=None):
    """Select ``round(rate * |eligible|)`` parameters from the eligible set.

    ``registry`` is required for the neuron strategy; ``total`` (flat size)
    defaults to ``registry.total``. ``rng`` drives the random strategy.
    """
    if not 0.0 <= rate <= 1.0:
        raise ArgumentError(f"selection rate {rate} outside [0, 1]")
    strategy = Strategy(strategy)
    if total is None:
        if registry is None:
            raise ArgumentError("build_mask needs registry or total")
        total = registry.total
    eligible = np.asarray(scores.eligible, dtype=np.int64)
    values = np.asarray(scores.values, dtype=np.float64)
    k = selection_budget(rate, eligible.size)

    if strategy is Strategy.WEIGHT:
        chosen = _top_k(eligible, values, k)
    elif strategy is Strategy.RANDOM:
        if rng is None:
            raise ArgumentError("random strategy needs an rng")
        chosen = rng.choice(eligible, size=k, replace=False) if k else eligible[:0]
    else:
        if registry is None:
            raise ArgumentError("neuron strategy needs the parameter registry")
        chosen = _neuron_select(scores, registry, k)
    return SelectionMask(np.sort(np.asarray(chosen, dtype=np.int64)), int(total),
                         float(rate), strategy.value)


def _neuron_select(scores, registry, k):
    dense = scores.dense(registry.total)
    groups = [g[2] for g in neuron_groups(registry, scores.eligible)]
    if not groups:
        return np.zeros(0, dtype=np.int64)
    group_score = np.array([dense[g].sum() for g in groups])
    first_idx = np.array([g.min() for g in groups])
    order = np.lexsort((first_idx, -group_score))
    chosen, remaining = [], k
    for gi in order:
        if remaining == 0:
            break
        g = groups[gi]
        if g.size <= remaining:
            chosen.append(g)
            remaining -= g.size
        else:
            chosen.append(_top_k(np.sort(g), dense[np.sort(g)], remaining))
            remaining = 0
    return np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)
