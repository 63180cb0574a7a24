import math
import threading
from fractions import Fraction

from evostack.fitness import FitnessEvaluator
from evostack.search_space import Chromosome


class CountingEvaluator(FitnessEvaluator):
    """Wraps another evaluator and counts invocations per key."""

    def __init__(self, inner):
        self.inner = inner
        self.seed = getattr(inner, "seed", 0)
        self.calls = {}
        self._lock = threading.Lock()

    @property
    def total(self):
        return sum(self.calls.values())

    def evaluate(self, chromosome):
        with self._lock:
            self.calls[chromosome.key] = self.calls.get(chromosome.key, 0) + 1
        return self.inner.evaluate(chromosome)


class ConstantEvaluator(FitnessEvaluator):
    def __init__(self, value=0.5, table=None):
        self.value = value
        self.table = table or {}

    def evaluate(self, chromosome):
        return self.table.get(chromosome.key, self.value)


def sample_param_entries(model, n, rng):
    """``n`` (name, flat index) pairs, spread round-robin over trainable tensors."""
    names = [k for k in model.params if model.is_trainable(k)]
    picks = []
    for i in range(n):
        name = names[i % len(names)]
        picks.append((name, int(rng.integers(model.params[name].size))))
    return picks


def finite_difference_check(model, x, y, loss, n_samples, rng, h=1e-4):
    """Max relative error between analytic and 4-point central-difference gradients.

    The relative error is |a - n| / max(|a|, |n|, 1e-6); the floor keeps
    exactly-zero gradients from dividing round-off by zero.
    """
    from evostack.nn.training import loss_and_grad

    _, grads = loss_and_grad(model, x, y, loss)
    worst = 0.0
    for name, idx in sample_param_entries(model, n_samples, rng):
        flat = model.params[name].reshape(-1)
        orig = flat[idx]

        def f(delta):
            flat[idx] = orig + delta
            value, _ = loss_and_grad(model, x, y, loss)
            return value

        numeric = (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h)
        flat[idx] = orig
        analytic = grads[name].reshape(-1)[idx]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, err)
    return worst


def single_edit(a: Chromosome, b: Chromosome) -> bool:
    """True if b is a with one gene inserted, one deleted, or one field changed."""
    if abs(len(a) - len(b)) == 1:
        short, long_ = (a, b) if len(a) < len(b) else (b, a)
        return any(long_.layers[:i] + long_.layers[i + 1:] == short.layers
                   for i in range(len(long_)))
    if len(a) != len(b):
        return False
    diffs = [(x, y) for x, y in zip(a, b) if x != y]
    if len(diffs) != 1:
        return False
    x, y = diffs[0]
    fx, fy = dict(x.fields()), dict(y.fields())
    return sum(fx[k] != fy[k] for k in fx) == 1


def items_from_counts(c):
    """Expand counts into (truth, prediction) item pairs."""
    return ([(1, 1)] * c.tp + [(0, 1)] * c.fp + [(0, 0)] * c.tn + [(1, 0)] * c.fn)


def oracle_metrics(c):
    """Recount from the item list and apply the textbook definitions."""
    items = items_from_counts(c)
    tp = sum(1 for t, p in items if t and p)
    fp = sum(1 for t, p in items if not t and p)
    tn = sum(1 for t, p in items if not t and not p)
    fn = sum(1 for t, p in items if t and not p)
    n = len(items)
    acc = float(Fraction(tp + tn, n))
    prec = float(Fraction(tp, tp + fp)) if tp + fp else 0.0
    rec = float(Fraction(tp, tp + fn)) if tp + fn else 0.0
    f1 = float(Fraction(2 * tp, 2 * tp + fp + fn)) if 2 * tp + fp + fn else 0.0
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / math.sqrt(den) if den else 0.0
    return (acc, prec, rec, f1, mcc)
