"""Label inference from leaked top-k index sets.

The observer holds the global model broadcast at the start of every round and
a small public shard per label. For each (label, round) it computes a
"teacher" index set: the top-k coordinates of the gradient of that round's
model on the label's shard. A user's leaked sets are then scored against every
label's teachers, either by Jaccard similarity or by a small classifier
trained on the teachers, and the top-scoring labels are returned.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .flcore import sparse_k, topk_sparsify
from .mlp import TinyMlp

METHODS = ("jac", "nn", "nn-single")


class AttackError(RuntimeError):
    pass


@dataclass
class TeacherIndex:
    sets: dict  # (label, round) -> frozenset of indices
    labels: list
    rounds: list
    k: int
    d: int

    def get(self, label, rnd):
        return self.sets[(label, rnd)]


class AttackScore(NamedTuple):
    labels: list
    scores: np.ndarray
    method: str

    def ranked(self):
        """Labels by decreasing score, lower label first on ties."""
        order = np.lexsort((np.asarray(self.labels), -self.scores))
        return [self.labels[i] for i in order]


class LabelPrediction(NamedTuple):
    labels: frozenset
    top1: int
    degenerate: bool


@dataclass
class AttackResult:
    user: int
    method: str
    predicted: frozenset
    top1: int
    truth: frozenset = None
    degenerate: bool = False
    scores: AttackScore = field(default=None, repr=False)


def jaccard(a, b):
    a, b = set(a), set(b)
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def bucket(indices, granularity):
    if granularity == 1:
        return frozenset(int(i) for i in indices)
    return frozenset(int(i) // granularity for i in indices)


def build_teachers(models, public, alpha, mlp):
    """One full-batch backward pass per (label, round); no model update.

    ``models`` maps round -> parameter vector (a list is read as rounds 0..T-1).
    """
    if not isinstance(models, dict):
        models = dict(enumerate(models))
    labels = sorted(public)
    for label in labels:
        if len(public[label]) == 0:
            raise AttackError(f"missing teacher data for label {label}")
    d = mlp.size
    sets = {}
    for rnd, theta in models.items():
        for label in labels:
            x = public[label]
            _, grad = mlp.loss_and_grad(theta, x, np.full(len(x), label))
            sets[(label, rnd)] = frozenset(topk_sparsify(grad, alpha).indices.tolist())
    return TeacherIndex(sets, labels, sorted(models), sparse_k(alpha, d), d)


def _observed_rounds(user_leaks, teachers):
    if not user_leaks:
        raise AttackError("user never observed")
    missing = [t for t in sorted(user_leaks) if t not in teachers.rounds]
    if missing:
        raise AttackError(f"missing model for round {missing[0]}")
    return sorted(user_leaks)


def score_jac(user_leaks, teachers, granularity=1, mode="pairs"):
    """Jaccard score per label; ``user_leaks`` maps round -> observed indices.

    ``pairs`` compares sets of (round, index) over the user's rounds; ``union``
    drops the round and compares plain index unions.
    """
    rounds = _observed_rounds(user_leaks, teachers)
    if mode not in ("pairs", "union"):
        raise ValueError(f"unknown mode {mode!r}")

    def collect(sets_by_round):
        if mode == "pairs":
            return {(t, i) for t in rounds for i in bucket(sets_by_round(t), granularity)}
        return set().union(*(bucket(sets_by_round(t), granularity) for t in rounds))

    observed = collect(lambda t: user_leaks[t])
    scores = [jaccard(observed, collect(lambda t, lab=lab: teachers.get(lab, t))) for lab in teachers.labels]
    return AttackScore(list(teachers.labels), np.array(scores), "jac")


def multi_hot(indices, size, granularity=1):
    v = np.zeros(size, dtype=np.float32)
    v[list(bucket(indices, granularity))] = 1.0
    return v


@dataclass
class NnScorer:
    """Classifiers from multi-hot teacher sets to labels.

    ``per_round`` trains one network per round and averages the softmax
    outputs over the user's rounds. ``single`` trains one network on the
    concatenation across rounds, skipped rounds left as zero blocks; it is
    trained on every non-empty subset of rounds (all rounds plus each single
    round when there are more than six).
    """

    teachers: TeacherIndex
    variant: str = "per_round"
    hidden: int = 64
    epochs: int = 300
    lr: float = 0.5
    granularity: int = 1
    seed: int = 0
    nets: dict = field(default_factory=dict, init=False)

    def __post_init__(self):
        if self.variant not in ("per_round", "single"):
            raise ValueError(f"unknown variant {self.variant!r}")
        t = self.teachers
        self.width = -(-t.d // self.granularity)
        rng = np.random.default_rng(self.seed)
        y = np.arange(len(t.labels))
        if self.variant == "per_round":
            for rnd in t.rounds:
                X = np.stack([multi_hot(t.get(lab, rnd), self.width, self.granularity) for lab in t.labels])
                self.nets[rnd] = self._fit(X, y, rng)
        else:
            X, Y = [], []
            for subset in self._subsets():
                for j, lab in enumerate(t.labels):
                    X.append(self._concat({r: t.get(lab, r) for r in subset}))
                    Y.append(j)
            self.nets[None] = self._fit(np.stack(X), np.array(Y), rng)

    def _subsets(self):
        rounds = self.teachers.rounds
        if len(rounds) > 6:
            return [rounds] + [[r] for r in rounds]
        out = []
        for mask in range(1, 1 << len(rounds)):
            out.append([r for b, r in enumerate(rounds) if mask >> b & 1])
        return out

    def _concat(self, by_round):
        blocks = [
            multi_hot(by_round[r], self.width, self.granularity) if r in by_round else np.zeros(self.width, np.float32)
            for r in self.teachers.rounds
        ]
        return np.concatenate(blocks)

    def _fit(self, X, y, rng):
        net = TinyMlp(X.shape[1], self.hidden, len(self.teachers.labels), dropout=0.5)
        theta = net.init_params(rng)
        return net, net.fit(theta, X, y, self.lr, self.epochs, rng=rng)

    def proba(self, x, rnd=None):
        net, theta = self.nets[rnd]
        return net.predict_proba(theta, x[None, :])[0]

    def score(self, user_leaks):
        rounds = _observed_rounds(user_leaks, self.teachers)
        if self.variant == "per_round":
            p = np.mean(
                [self.proba(multi_hot(user_leaks[t], self.width, self.granularity), t) for t in rounds], axis=0
            )
            method = "nn"
        else:
            p = self.proba(self._concat({t: user_leaks[t] for t in rounds}))
            method = "nn-single"
        return AttackScore(list(self.teachers.labels), p, method)


def _kmeans_high(scores, tol=1e-9, max_iter=100):
    """Two-cluster Lloyd iterations on a line, centroids seeded at min and max."""
    lo, hi = float(scores.min()), float(scores.max())
    for _ in range(max_iter):
        high = np.abs(scores - hi) < np.abs(scores - lo)
        new_lo = float(scores[~high].mean()) if np.any(~high) else lo
        new_hi = float(scores[high].mean()) if np.any(high) else hi
        done = abs(new_lo - lo) <= tol and abs(new_hi - hi) <= tol
        lo, hi = new_lo, new_hi
        if done:
            break
    return np.abs(scores - hi) < np.abs(scores - lo)


def extract_labels(score, known_count=None):
    ranked = score.ranked()
    top1 = ranked[0]
    s = np.asarray(score.scores, dtype=np.float64)
    if known_count is not None:
        if known_count < 1:
            raise ValueError("known_count must be positive")
        return LabelPrediction(frozenset(ranked[:known_count]), top1, False)
    if len(s) < 2 or np.all(s == s[0]):
        return LabelPrediction(frozenset([top1]), top1, True)
    high = _kmeans_high(s)
    return LabelPrediction(frozenset(lab for lab, h in zip(score.labels, high) if h), top1, False)


def evaluate_attack(results):
    """(all, top1): exact-set match rate and top-label containment rate."""
    if not results:
        raise AttackError("no attack results to evaluate")
    exact = np.mean([r.predicted == r.truth for r in results])
    top1 = np.mean([r.top1 in r.truth for r in results])
    return float(exact), float(top1)


def user_observations(leaks):
    """Regroup per-round leaks into user -> {round: indices}."""
    out = {}
    for leak in leaks:
        for user, idx in leak.observed.items():
            out.setdefault(user, {})[leak.round] = idx
    return out


def attack_users(
    leaks,
    models,
    public,
    alpha,
    mlp,
    method="jac",
    known_count=None,
    granularity=1,
    truth=None,
    hidden=64,
    seed=0,
):
    """Teachers, scores and label extraction for every observed user."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    obs = user_observations(leaks)
    if not obs:
        raise AttackError("user never observed")
    if not isinstance(models, dict):
        models = dict(enumerate(models))
    needed = sorted({t for rounds in obs.values() for t in rounds})
    for t in needed:
        if t not in models:
            raise AttackError(f"missing model for round {t}")
    teachers = build_teachers({t: models[t] for t in needed}, public, alpha, mlp)
    scorer = None
    if method != "jac":
        variant = "per_round" if method == "nn" else "single"
        scorer = NnScorer(teachers, variant, hidden=hidden, granularity=granularity, seed=seed)
    results = []
    for user in sorted(obs):
        if scorer is None:
            score = score_jac(obs[user], teachers, granularity)
        else:
            score = scorer.score(obs[user])
        pred = extract_labels(score, known_count)
        t = frozenset(truth[user]) if truth is not None else None
        results.append(AttackResult(user, method, pred.labels, pred.top1, t, pred.degenerate, score))
    return results
