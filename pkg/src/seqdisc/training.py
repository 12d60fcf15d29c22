"""Fixed-step gradient descent over a corpus with any supported criterion."""

from __future__ import annotations

import copy
import json
import math
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_choice, check_int, check_scale, check_scorer, check_utterances
from .core import Utterance
from .decode import parallel_map
from .lattice_free import SeqScoreConfig
from .losses import CostFunction, LossValue, mbr_nbest_loss, mmi_lf_loss, mmi_nbest_loss
from .scorer import ce_loss

CRITERIA = ("ce", "mmi_lf_limited", "mmi_lf_approx", "mmi_lf_word", "mmi_lf_beam", "mmi_nbest", "mbr_nbest")


class DivergenceError(RuntimeError):
    """Loss or gradient became non-finite during training."""


class SequenceTrainer(BaseEstimator):
    """Fine-tune a copy of ``scorer`` with one training criterion.

    Each step evaluates every utterance, averages the gradients and takes one
    step of size ``learning_rate``.  ``lm`` is the training LM (an n-gram for
    ``mmi_lf_limited``, any label LM for ``approx``/``beam``, a word n-gram
    for ``mmi_lf_word`` and the N-best criteria may use either unit).
    """

    def __init__(
        self,
        scorer=None,
        criterion="ce",
        lm=None,
        lexicon=None,
        alpha=1.0,
        beta=0.0,
        top_j=None,
        recomb_context=1,
        beam_size=20,
        cost="word_edit",
        learning_rate=0.1,
        n_steps=10,
        n_jobs=1,
    ):
        self.scorer = scorer
        self.criterion = criterion
        self.lm = lm
        self.lexicon = lexicon
        self.alpha = alpha
        self.beta = beta
        self.top_j = top_j
        self.recomb_context = recomb_context
        self.beam_size = beam_size
        self.cost = cost
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.n_jobs = n_jobs

    def _check(self, nbest):
        check_choice("criterion", self.criterion, CRITERIA)
        if self.scorer is None:
            raise ValueError("a starting scorer is required")
        check_scorer(self.scorer)
        check_int("n_steps", self.n_steps)
        check_scale("learning_rate", self.learning_rate, positive=True)
        check_scale("alpha", self.alpha, positive=True)
        check_scale("beta", self.beta)
        if self.criterion.endswith("_nbest") and nbest is None:
            raise ValueError(f"{self.criterion} needs N-best lists")
        if self.criterion == "mmi_lf_word" and (self.lm is None or self.lexicon is None):
            raise ValueError("mmi_lf_word needs a word LM and a lexicon")
        if self.criterion.startswith("mmi_lf") and self.beta != 0.0 and self.lm is None:
            raise ValueError(f"{self.criterion} with beta != 0 needs an LM")

    def utterance_loss(self, scorer, utt: Utterance, nbest=None) -> LossValue:
        crit = self.criterion
        if crit == "ce":
            value, grad = ce_loss(scorer, utt)
            return LossValue(value, grad)
        if crit.startswith("mmi_lf"):
            cfg = SeqScoreConfig(self.alpha, self.beta, self.top_j, self.recomb_context)
            return mmi_lf_loss(scorer, self.lm, cfg, utt, crit[len("mmi_lf_") :], self.lexicon, self.beam_size)
        lst = nbest[utt.id]
        if crit == "mmi_nbest":
            return mmi_nbest_loss(scorer, self.lm, lst, utt, self.alpha, self.beta)
        cost = self.cost if callable(self.cost) else CostFunction(self.cost)
        return mbr_nbest_loss(scorer, self.lm, lst, utt, self.alpha, self.beta, cost)

    def fit(self, utterances: Sequence[Utterance], nbest: dict | None = None, log=None) -> "SequenceTrainer":
        """Train; ``log`` (a text file) receives one JSON line per utterance and step."""
        self._check(nbest)
        scorer = copy.deepcopy(self.scorer)
        utts = sorted(check_utterances(utterances), key=lambda u: u.id)
        self.loss_curve_, self.log_ = [], []
        # overflow is detected explicitly below, so numpy's warnings are noise
        with np.errstate(over="ignore", invalid="ignore"):
            for step in range(1, self.n_steps + 1):
                self._step(scorer, step, utts, nbest, log)
        self.scorer_ = scorer
        return self

    def _step(self, scorer, step, utts, nbest, log):
        def one(u):
            try:
                return self.utterance_loss(scorer, u, nbest)
            except FloatingPointError as exc:
                raise DivergenceError(f"step {step}, {u.id}: {exc}") from None

        losses = parallel_map(one, utts, self.n_jobs)
        grad = np.zeros_like(losses[0].grads)
        for u, lv in zip(utts, losses):
            gnorm = float(np.linalg.norm(lv.grads))
            if not math.isfinite(gnorm):
                raise DivergenceError(f"step {step}, {u.id}: non-finite gradient")
            self._record(log, step, u.id, lv.value, gnorm)
            grad += lv.grads
        grad /= len(utts)
        mean = float(np.mean([lv.value for lv in losses]))
        self.loss_curve_.append(mean)
        self._record(log, step, None, mean, float(np.linalg.norm(grad)))
        params = scorer.get_flat_params() - self.learning_rate * grad
        if not np.all(np.isfinite(params)):
            raise DivergenceError(f"step {step}: parameters became non-finite")
        scorer.set_flat_params(params)

    def _record(self, log, step, uid, loss, gnorm):
        rec = {"step": step, "utterance": uid, "criterion": self.criterion, "loss": loss, "grad_norm": gnorm}
        self.log_.append(rec)
        if log is not None:
            log.write(json.dumps(rec) + "\n")
