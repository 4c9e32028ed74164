"""Inference-time studies: token-budget sweeps, two-stage cascades, calibration, FLOP overhead."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .cost import encoder_flops, layer_flops
from .encoder.model import forward_packed
from .numerics.rng import substream
from .packing import pack_first_fit, tokenize

ECE_BUCKETS = 30


# -- cost model ---------------------------------------------------------------


@dataclass(frozen=True)
class FlopModel:
    width: int
    tokens: int
    pack: int

    def __post_init__(self):
        if min(self.width, self.tokens, self.pack) <= 0:
            raise ValueError(f"FlopModel needs positive inputs, got {self}")

    def overhead(self):
        return flop_overhead(self.width, self.tokens, self.pack)


def flop_overhead(width, tokens, pack):
    """Relative extra per-layer cost of one sequence of ``pack`` images over ``pack`` separate ones."""
    if min(width, tokens, pack) <= 0:
        raise ValueError("flop_overhead needs positive inputs")
    separate = pack * layer_flops(tokens, width)
    return (layer_flops(pack * tokens, width) - separate) / separate


def flop_overhead_closed_form(width, tokens, pack):
    return (pack - 1) * tokens / (6 * width + tokens)


# -- prediction helpers -------------------------------------------------------


def class_probabilities(logits):
    """Per-class sigmoid scores renormalized to sum to one across classes."""
    scores = expit(np.asarray(logits, dtype=np.float64))
    return scores / scores.sum(axis=-1, keepdims=True)


@dataclass
class Predictions:
    """Per-example outcome of one evaluation pass, in input order."""

    ids: np.ndarray
    labels: np.ndarray
    probs: np.ndarray  # [N, C]
    tokens: np.ndarray  # kept tokens per example
    flops: np.ndarray  # modeled forward FLOPs per example

    @property
    def predicted(self):
        return self.probs.argmax(axis=1)

    @property
    def confidence(self):
        return self.probs.max(axis=1)

    @property
    def correct(self):
        return self.predicted == self.labels

    @property
    def accuracy(self):
        return float(self.correct.mean())

    @property
    def mean_flops(self):
        return float(self.flops.mean())


def predict(params, examples, seq_len=None):
    """Forward tokenized examples (packed first-fit) and collect class probabilities."""
    config = params.config
    examples = list(examples)
    if not examples:
        raise ValueError("predict needs at least one example")
    seq_len = seq_len or max(len(ex) for ex in examples)
    batch = pack_first_fit(examples, seq_len, config.max_examples)
    out = forward_packed(params, batch)
    logits = out.logits.data.astype(np.float64)
    by_id = {}
    for b, seq in enumerate(batch.examples):
        for e, ex in enumerate(seq):
            by_id[ex.id] = logits[b, e]
    ids = np.array([ex.id for ex in examples], dtype=np.int64)
    tokens = np.array([len(ex) for ex in examples], dtype=np.int64)
    return Predictions(
        ids=ids,
        labels=np.array([ex.label for ex in examples], dtype=np.int64),
        probs=class_probabilities(np.stack([by_id[i] for i in ids])),
        tokens=tokens,
        flops=np.array([encoder_flops(int(n), config.width, config.depth) for n in tokens], dtype=np.float64),
    )


def budget_side(budget, patch):
    """Effective side whose square grid holds ``budget`` tokens."""
    if budget < 1:
        raise ValueError(f"token budget must be >= 1, got {budget}")
    return patch * math.sqrt(budget)


def evaluate_at_budget(params, images, budget):
    """Resize every image (aspect preserved, up or down) to about ``budget`` tokens and predict."""
    patch = params.config.patch
    side = budget_side(budget, patch)
    return predict(params, [tokenize(img, side, patch) for img in images])


def evaluate_by_dropping(params, images, budget, reference_side, seed=0):
    """Tokenize at ``reference_side`` and keep a random ``budget`` tokens per image."""
    patch = params.config.patch
    examples = []
    for img in images:
        ex = tokenize(img, reference_side, patch)
        if len(ex) > budget:
            rng = substream(seed, "budget-drop", budget, img.id)
            ex = ex.subset(np.sort(rng.choice(len(ex), size=int(budget), replace=False)))
        examples.append(ex)
    return predict(params, examples)


@dataclass(frozen=True)
class BudgetPoint:
    budget: int
    accuracy: float
    mean_tokens: float
    mean_flops: float
    drop_accuracy: float
    drop_mean_tokens: float
    drop_mean_flops: float


def token_budget_eval(params, images, budgets, reference_side, seed=0):
    """Accuracy and modeled latency per budget, for resizing and for random dropping."""
    points = []
    for budget in budgets:
        resized = evaluate_at_budget(params, images, budget)
        dropped = evaluate_by_dropping(params, images, budget, reference_side, seed)
        points.append(BudgetPoint(int(budget), resized.accuracy, float(resized.tokens.mean()),
                                  resized.mean_flops, dropped.accuracy, float(dropped.tokens.mean()),
                                  dropped.mean_flops))
    return points


# -- cascades -----------------------------------------------------------------


@dataclass(frozen=True)
class CascadePoint:
    alpha: float
    budget1: int
    time1: float
    budget2: int
    time2: float
    accuracy: float
    escalated: int

    @property
    def time(self):
        return self.time1 + self.alpha * self.time2


def escalation_count(alpha, n):
    return int(math.floor(alpha * n + 0.5))


def cascade_from_predictions(stage1: Predictions, stage2: Predictions, alphas, budget1=0, budget2=0):
    """Combine two passes over the same examples (same order) into cascade points.

    The ``alpha`` fraction with the lowest stage-1 confidence is answered by
    stage 2; ties are broken by ascending example id.
    """
    if not np.array_equal(stage1.ids, stage2.ids):
        raise ValueError("both stages must cover the same examples in the same order")
    n = len(stage1.ids)
    order = np.lexsort((stage1.ids, stage1.confidence))
    points = []
    for alpha in alphas:
        if not 0 <= alpha <= 1:
            raise ValueError(f"alpha must be in [0, 1], got {alpha}")
        k = escalation_count(alpha, n)
        correct = stage1.correct.copy()
        hard = order[:k]
        correct[hard] = stage2.correct[hard]
        points.append(CascadePoint(float(alpha), budget1, stage1.mean_flops, budget2, stage2.mean_flops,
                                   float(correct.mean()), k))
    return points


def cascade_eval(params, images, budget1, budget2, alphas):
    if not budget1 < budget2:
        raise ValueError(f"stage budgets must increase, got {budget1} >= {budget2}")
    stage1 = evaluate_at_budget(params, images, budget1)
    stage2 = evaluate_at_budget(params, images, budget2)
    return cascade_from_predictions(stage1, stage2, alphas, budget1, budget2)


# -- calibration --------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationReport:
    buckets: int
    mean_confidence: np.ndarray  # NaN for empty buckets
    accuracy: np.ndarray
    counts: np.ndarray
    ece: float


def expected_calibration_error(confidences, correct, buckets=ECE_BUCKETS) -> CalibrationReport:
    """Equal-width confidence buckets; ECE is the count-weighted l1 confidence/accuracy gap."""
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    hit = np.asarray(correct, dtype=np.float64).reshape(-1)
    if conf.shape != hit.shape:
        raise ValueError(f"{conf.size} confidences vs {hit.size} outcomes")
    if conf.size == 0:
        raise ValueError("calibration needs at least one prediction")
    if ((conf < 0) | (conf > 1)).any():
        raise ValueError("confidences must lie in [0, 1]")
    index = np.minimum((conf * buckets).astype(np.int64), buckets - 1)
    counts = np.bincount(index, minlength=buckets)
    conf_sum = np.bincount(index, weights=conf, minlength=buckets)
    hit_sum = np.bincount(index, weights=hit, minlength=buckets)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = conf_sum / counts
        acc = hit_sum / counts
    gaps = np.where(counts > 0, np.abs(conf_sum - hit_sum), 0.0)
    return CalibrationReport(buckets, mean_conf, acc, counts, float(gaps.sum() / conf.size))


# -- CSV ----------------------------------------------------------------------


def write_csv(path, schema, header, rows):
    """Write ``rows`` under a ``# schema`` comment line and a column header."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {schema}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def read_csv(path):
    """Return ``(schema, header, rows)`` of a file written by :func:`write_csv`."""
    with open(path, newline="") as fh:
        schema = fh.readline()[2:].rstrip("\n")
        reader = csv.reader(fh)
        header = next(reader)
        return schema, header, list(reader)
