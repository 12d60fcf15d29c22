"""Context-k transducer posteriors and the reference-sequence (numerator) DP.

Every backend exposes ``log_probs(utt) -> [T, C, V+1]`` where ``C`` indexes
BOS-padded label contexts of length ``context_size`` (see ``context_index``)
and the last output column is blank.  Gradients flow back through
``backward(utt, grad_log_probs)``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_int, check_scale, check_utterances
from .core import BOS, Utterance, logsumexp_axis


def num_contexts(num_labels: int, k: int) -> int:
    return (num_labels + 1) ** k


def context_index(context: Sequence[int], num_labels: int) -> int:
    """Mixed-radix index of a padded context; BOS is digit 0, label ``v`` is ``v + 1``.

    The mapping is monotone in the lexicographic order of context tuples.
    """
    idx = 0
    for sym in context:
        idx = idx * (num_labels + 1) + (0 if sym == BOS else sym + 1)
    return idx


def context_tuple(index: int, num_labels: int, k: int) -> tuple[int, ...]:
    out = []
    for _ in range(k):
        index, digit = divmod(index, num_labels + 1)
        out.append(BOS if digit == 0 else digit - 1)
    return tuple(reversed(out))


def last_context(labels: Sequence[int], k: int) -> tuple[int, ...]:
    """Last ``k`` labels, left-padded with BOS."""
    if k == 0:
        return ()
    tail = tuple(labels[-k:])
    return (BOS,) * (k - len(tail)) + tail


def log_softmax(logits: np.ndarray) -> np.ndarray:
    return logits - logsumexp_axis(logits, -1)[..., None]


def random_log_probs(num_frames, num_labels, k, rng, scale=1.0) -> np.ndarray:
    """Normalised random score tensor, handy for fixtures."""
    logits = scale * rng.standard_normal((num_frames, num_contexts(num_labels, k), num_labels + 1))
    return log_softmax(logits)


class ContextKScorer(BaseEstimator):
    """Tabular stand-in for encoder + prediction network.

    logits(t, c) = bias[c] + h_t @ weights[:, c, :], normalised over the
    ``num_labels + 1`` outputs.  ``fit`` runs full-batch gradient descent on
    the sequence-level CE loss (plus ``l2`` times the squared weight norm).
    """

    def __init__(
        self,
        num_labels=2,
        context_size=1,
        feature_dim=4,
        init_scale=0.0,
        learning_rate=0.5,
        n_steps=100,
        l2=0.0,
        random_state=None,
    ):
        self.num_labels = num_labels
        self.context_size = context_size
        self.feature_dim = feature_dim
        self.init_scale = init_scale
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.l2 = l2
        self.random_state = random_state

    # -- parameters ---------------------------------------------------------------
    def initialize(self) -> "ContextKScorer":
        if self.context_size < 0 or self.num_labels < 1 or self.feature_dim < 0:
            raise ValueError("need context_size >= 0, num_labels >= 1, feature_dim >= 0")
        rng = np.random.default_rng(self.random_state)
        C = num_contexts(self.num_labels, self.context_size)
        O = self.num_labels + 1
        self.weights_ = self.init_scale * rng.standard_normal((self.feature_dim, C, O))
        self.bias_ = self.init_scale * rng.standard_normal((C, O))
        return self

    @property
    def n_params(self) -> int:
        check_is_fitted(self, "weights_")
        return self.weights_.size + self.bias_.size

    def get_flat_params(self) -> np.ndarray:
        check_is_fitted(self, "weights_")
        return np.concatenate([self.weights_.ravel(), self.bias_.ravel()])

    def set_flat_params(self, flat) -> "ContextKScorer":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        nw = self.weights_.size
        self.weights_ = flat[:nw].reshape(self.weights_.shape).copy()
        self.bias_ = flat[nw:].reshape(self.bias_.shape).copy()
        return self

    # -- scoring ------------------------------------------------------------------
    def _features(self, utt: Utterance) -> np.ndarray:
        return utt.frame_features(self.feature_dim)

    def log_probs(self, utt: Utterance) -> np.ndarray:
        check_is_fitted(self, "weights_")
        h = self._features(utt)
        logits = self.bias_[None] + np.einsum("tf,fco->tco", h, self.weights_)
        return log_softmax(logits)

    def score_frame(self, utt: Utterance, t: int, context: Sequence[int]) -> np.ndarray:
        """Log-distribution over labels + blank at 1-based frame ``t``."""
        if not 1 <= t <= utt.num_frames:
            raise IndexError(f"frame {t} outside 1..{utt.num_frames}")
        if len(context) > self.context_size:
            raise ValueError(f"context longer than {self.context_size}")
        ctx = last_context(tuple(c for c in context if c != BOS), self.context_size)
        h = self._features(utt)[t - 1]
        c = context_index(ctx, self.num_labels)
        return log_softmax(self.bias_[c] + h @ self.weights_[:, c, :])

    def zero_encoder_log_probs(self) -> np.ndarray:
        """[C, V+1] log-posteriors with every frame feature set to zero."""
        check_is_fitted(self, "weights_")
        return log_softmax(self.bias_)

    def backward(self, utt: Utterance, grad_log_probs: np.ndarray) -> np.ndarray:
        """Chain d(loss)/d(log_probs) through the log-softmax to flat parameter grads."""
        logp = self.log_probs(utt)
        g = grad_log_probs - np.exp(logp) * grad_log_probs.sum(-1, keepdims=True)
        h = self._features(utt)
        gw = np.einsum("tf,tco->fco", h, g)
        gb = g.sum(0)
        return np.concatenate([gw.ravel(), gb.ravel()])

    # -- training -----------------------------------------------------------------
    def fit(self, utterances: Sequence[Utterance], y=None) -> "ContextKScorer":
        """Sequence-level CE training by fixed-step gradient descent."""
        del y
        utterances = check_utterances(utterances)
        check_int("n_steps", self.n_steps)
        check_scale("learning_rate", self.learning_rate, positive=True)
        check_scale("l2", self.l2)
        if not hasattr(self, "weights_"):
            self.initialize()
        self.loss_curve_ = []
        for _ in range(self.n_steps):
            loss, grad = ce_batch(self, utterances)
            flat = self.get_flat_params()
            if self.l2:
                nw = self.weights_.size
                loss += self.l2 * float(flat[:nw] @ flat[:nw])
                grad[:nw] += 2.0 * self.l2 * flat[:nw]
            self.loss_curve_.append(loss)
            self.set_flat_params(flat - self.learning_rate * grad)
        return self


class PrecomputedScores:
    """Fixed score tensor backend; ``backward`` returns gradients w.r.t. the table."""

    def __init__(self, table: np.ndarray, context_size: int):
        table = np.asarray(table, dtype=float)
        if table.ndim != 3:
            raise ValueError("table must be [T, C, V+1]")
        num_labels = table.shape[2] - 1
        if table.shape[1] != num_contexts(num_labels, context_size):
            raise ValueError("context dimension does not match context_size")
        norm = logsumexp_axis(table, -1)
        if np.max(np.abs(norm)) > 1e-9:
            raise ValueError("score rows must be normalised log-probabilities")
        self.table = table
        self.context_size = context_size
        self.num_labels = num_labels

    @property
    def num_frames(self) -> int:
        return self.table.shape[0]

    def log_probs(self, utt: Utterance | None = None) -> np.ndarray:
        if utt is not None and utt.num_frames != self.num_frames:
            raise ValueError(f"{utt.id}: {utt.num_frames} frames, table has {self.num_frames}")
        return self.table

    def score_frame(self, utt, t: int, context: Sequence[int]) -> np.ndarray:
        if not 1 <= t <= self.num_frames:
            raise IndexError(f"frame {t} outside 1..{self.num_frames}")
        if len(context) > self.context_size:
            raise ValueError(f"context longer than {self.context_size}")
        ctx = last_context(tuple(c for c in context if c != BOS), self.context_size)
        return self.table[t - 1, context_index(ctx, self.num_labels)]

    def get_flat_params(self) -> np.ndarray:
        return self.table.ravel().copy()

    def backward(self, utt, grad_log_probs: np.ndarray) -> np.ndarray:
        return np.asarray(grad_log_probs, dtype=float).ravel()


# -- numerator --------------------------------------------------------------------
def _reference_tables(logp, labels, k):
    V = logp.shape[2] - 1
    ctx = np.array([context_index(last_context(labels[:s], k), V) for s in range(len(labels) + 1)])
    blank = logp[:, ctx, V]  # [T, S+1]
    emit = logp[:, ctx[:-1], np.asarray(labels, dtype=int)] if labels else np.zeros((logp.shape[0], 0))
    return ctx, blank, emit


def numerator_logprob(logp: np.ndarray, labels: Sequence[int], k: int, alpha: float = 1.0, with_grad=False):
    """log of the sum over strictly monotonic alignments of prod_t p_t ** alpha.

    Per-frame scaling keeps the numerator consistent with the denominator
    DPs; at ``alpha=1`` this is log P(labels | X).

    Returns ``(value, grad)`` where grad is d(value)/d(logp) if requested.
    """
    labels = tuple(labels)
    T, S = logp.shape[0], len(labels)
    if S > T:
        raise ValueError(f"no alignment: {S} labels in {T} frames")
    ctx, blank, emit = _reference_tables(logp, labels, k)
    blank = alpha * blank
    emit = alpha * emit
    fwd = np.full((T + 1, S + 1), -np.inf)
    fwd[0, 0] = 0.0
    for t in range(T):
        stay = fwd[t] + blank[t]
        move = np.full(S + 1, -np.inf)
        move[1:] = fwd[t, :-1] + emit[t]
        fwd[t + 1] = np.logaddexp(stay, move)
    value = float(fwd[T, S])
    if not with_grad:
        return value, None
    bwd = np.full((T + 1, S + 1), -np.inf)
    bwd[T, S] = 0.0
    for t in range(T - 1, -1, -1):
        move = np.full(S + 1, -np.inf)
        move[:-1] = emit[t] + bwd[t + 1, 1:]
        bwd[t] = np.logaddexp(blank[t] + bwd[t + 1], move)
    grad = np.zeros_like(logp)
    V = logp.shape[2] - 1
    for t in range(T):
        post_blank = np.exp(fwd[t] + blank[t] + bwd[t + 1] - value)
        np.add.at(grad[t], (ctx, V), alpha * post_blank)
        if S:
            post_emit = np.exp(fwd[t, :-1] + emit[t] + bwd[t + 1, 1:] - value)
            np.add.at(grad[t], (ctx[:-1], list(labels)), alpha * post_emit)
    return value, grad


def numerator_forward(scorer, utt: Utterance, alpha: float = 1.0) -> float:
    """alpha-scaled reference log score; the CE loss is its negation at alpha=1."""
    value, _ = numerator_logprob(scorer.log_probs(utt), utt.reference_phonemes, scorer.context_size, alpha)
    return value


def ce_loss(scorer, utt: Utterance):
    """(CE loss, flat parameter gradient) for one utterance."""
    value, g = numerator_logprob(scorer.log_probs(utt), utt.reference_phonemes, scorer.context_size, 1.0, True)
    return -value, -scorer.backward(utt, g)


def ce_batch(scorer, utterances: Sequence[Utterance]):
    total, grad = 0.0, None
    for utt in utterances:
        v, g = ce_loss(scorer, utt)
        total += v
        grad = g if grad is None else grad + g
    n = max(len(utterances), 1)
    return total / n, grad / n


# -- files ------------------------------------------------------------------------
def save_score_tensor(path, table: np.ndarray, context_size: int) -> None:
    """``T <T> LABELS <V> CONTEXT <k>`` header, then one row per (frame, context)."""
    T, C, O = table.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"T {T} LABELS {O - 1} CONTEXT {context_size}\n")
        for t in range(T):
            for c in range(C):
                fh.write(" ".join(repr(float(x)) for x in table[t, c]) + "\n")


def load_score_tensor(path) -> PrecomputedScores:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    head = lines[0].split()
    try:
        fields = dict(zip(head[::2], head[1::2]))
        T, V = int(fields["T"]), int(fields["LABELS"])
        k = int(fields.get("CONTEXT", 0))
    except (KeyError, ValueError):
        raise ValueError(f"{path}: bad header {lines[0]!r}") from None
    C = num_contexts(V, k)
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != T * C:
        raise ValueError(f"{path}: expected {T * C} rows, found {len(rows)}")
    table = np.array([[float(x) for x in r.split()] for r in rows])
    if table.shape[1] != V + 1:
        raise ValueError(f"{path}: rows must have {V + 1} values")
    return PrecomputedScores(table.reshape(T, C, V + 1), k)


def save_checkpoint(scorer: ContextKScorer, path) -> None:
    obj = {
        "format": "context-k-scorer",
        "version": 1,
        "context_size": scorer.context_size,
        "num_labels": scorer.num_labels,
        "feature_dim": scorer.feature_dim,
        "weights": scorer.weights_.ravel().tolist(),
        "bias": scorer.bias_.ravel().tolist(),
    }
    Path(path).write_text(json.dumps(obj), encoding="utf-8")


def load_checkpoint(path) -> ContextKScorer:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("format") != "context-k-scorer":
        raise ValueError(f"{path}: not a scorer checkpoint")
    sc = ContextKScorer(
        num_labels=obj["num_labels"], context_size=obj["context_size"], feature_dim=obj["feature_dim"]
    ).initialize()
    sc.weights_ = np.array(obj["weights"], dtype=float).reshape(sc.weights_.shape)
    sc.bias_ = np.array(obj["bias"], dtype=float).reshape(sc.bias_.shape)
    return sc


class ScoreFileScorer:
    """Backend reading each utterance's own score tensor file (the corpus ``scores`` field)."""

    def __init__(self, context_size: int):
        self.context_size = context_size
        self._cache = {}

    def log_probs(self, utt: Utterance) -> np.ndarray:
        if utt.scores is None:
            raise ValueError(f"{utt.id}: no score tensor file in the corpus entry")
        if utt.scores not in self._cache:
            tab = load_score_tensor(utt.scores)
            if tab.context_size != self.context_size:
                raise ValueError(f"{utt.scores}: context {tab.context_size}, expected {self.context_size}")
            self._cache[utt.scores] = tab
        return self._cache[utt.scores].log_probs(utt)
