"""Random small fixtures and brute-force cross-checks of the fast DPs.

Used by the ``oracle-check`` command and by the test suite.  Every check
returns the largest observed discrepancy so the caller can print it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .beam import NBestEntry, NBestList, beam_step, context_key, run_beam
from .core import Utterance, logsumexp
from .decode import DecodeConfig, exhaustive_recognize, recognize_labels
from .lattice_free import (
    SeqScoreConfig,
    all_label_sequences,
    brute_force_denominator,
    lf_denominator_approx,
    lf_denominator_limited,
)
from .lm import NGramLM
from .losses import CostFunction, grad_check, mbr_nbest_loss, mmi_lf_loss, mmi_nbest_loss, scorer_loss_fn
from .scorer import ContextKScorer, PrecomputedScores, ce_loss, random_log_probs

ALPHAS = (0.5, 1.0, 1.2)
BETAS = (0.0, 0.2, 0.3)


@dataclass
class Fixture:
    scorer: PrecomputedScores
    utt: Utterance
    lm: NGramLM  # phoneme (k+1)-gram
    cfg: SeqScoreConfig

    @property
    def k(self) -> int:
        return self.scorer.context_size

    @property
    def num_labels(self) -> int:
        return self.scorer.num_labels


def random_fixture(rng, max_frames=5, max_labels=3, contexts=(1, 2), scale=1.5) -> Fixture:
    T = int(rng.integers(1, max_frames + 1))
    V = int(rng.integers(1, max_labels + 1))
    k = int(rng.choice(contexts))
    table = random_log_probs(T, V, k, rng, scale)
    ref = tuple(int(x) for x in rng.integers(0, V, size=int(rng.integers(0, T + 1))))
    text = [tuple(int(x) for x in rng.integers(0, V, size=int(rng.integers(1, 6)))) for _ in range(6)]
    lm = NGramLM("phoneme", k + 1, 0.5, vocab=V).fit(text)
    cfg = SeqScoreConfig(float(rng.choice(ALPHAS)), float(rng.choice(BETAS)), None, k)
    utt = Utterance(f"fx{int(rng.integers(1 << 30)):09d}", T, ref)
    return Fixture(PrecomputedScores(table, k), utt, lm, cfg)


def fixtures(n, seed=0, **kw) -> list[Fixture]:
    rng = np.random.default_rng(seed)
    return [random_fixture(rng, **kw) for _ in range(n)]


@dataclass(frozen=True)
class CheckResult:
    name: str
    n_cases: int
    max_error: float
    tolerance: float
    passed: bool

    def row(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{self.name:<24} {self.n_cases:>5}  {self.max_error:>10.3e}  {self.tolerance:>8.1e}  {mark}"


def _result(name, errors, tol) -> CheckResult:
    worst = max(errors) if errors else 0.0
    return CheckResult(name, len(errors), worst, tol, bool(worst <= tol))


def check_limited_vs_brute(fxs, tol=1e-6) -> CheckResult:
    errs = [
        abs(lf_denominator_limited(f.scorer, f.lm, f.cfg, f.utt) - brute_force_denominator(f.scorer, f.lm, f.cfg, f.utt))
        for f in fxs
    ]
    return _result("lf_limited_vs_brute", errs, tol)


def check_ce_reduction(fxs, tol=1e-6) -> CheckResult:
    errs = []
    for f in fxs:
        cfg = SeqScoreConfig(1.0, 0.0, None, f.k)
        mmi = mmi_lf_loss(f.scorer, f.lm, cfg, f.utt, "limited").value
        errs.append(abs(mmi - ce_loss(f.scorer, f.utt)[0]))
    return _result("mmi_beta0_equals_ce", errs, tol)


def check_approx_vs_limited(fxs, tol=1e-9) -> CheckResult:
    errs = [
        abs(lf_denominator_approx(f.scorer, f.lm, f.cfg, f.utt) - lf_denominator_limited(f.scorer, f.lm, f.cfg, f.utt))
        for f in fxs
    ]
    return _result("approx_vs_limited", errs, tol)


def check_top_j(fxs, tol=1e-9) -> CheckResult:
    """Largest decrease when J grows, and the gap to the exact sum at J = V**k."""
    errs = []
    for f in fxs:
        exact = lf_denominator_limited(f.scorer, f.lm, f.cfg, f.utt)
        vals = []
        for j in range(1, f.num_labels**f.k + 1):
            cfg = SeqScoreConfig(f.cfg.alpha, f.cfg.beta, j, f.cfg.recomb_context)
            vals.append(lf_denominator_limited(f.scorer, f.lm, cfg, f.utt))
        drop = max([a - b for a, b in zip(vals, vals[1:])] + [0.0])
        errs.append(max(drop, abs(vals[-1] - exact)))
    return _result("top_j_monotone_exact", errs, tol)


def check_full_beam(fxs, tol=1e-6) -> CheckResult:
    errs = []
    for f in fxs:
        B = (f.num_labels + 1) ** f.utt.num_frames
        logp = f.scorer.log_probs(f.utt)
        res = run_beam(logp, f.k, f.lm, f.cfg.alpha, f.cfg.beta, B, "prune_recomb", context_key(f.k))
        errs.append(abs(res.log_sum - brute_force_denominator(f.scorer, f.lm, f.cfg, f.utt)))
    return _result("full_beam_vs_brute", errs, tol)


def mass_dominance_gap(f: Fixture, beam_size: int, frame: int) -> float:
    """log mass(prune_single) - log mass(prune_recomb) after one step from a shared beam."""
    logp = f.scorer.log_probs(f.utt)
    hyps = run_beam(logp[:frame], f.k, f.lm, f.cfg.alpha, f.cfg.beta, 10**6, "sequence").hyps
    args = (logp[frame], f.k, f.lm, f.cfg.alpha, f.cfg.beta, beam_size)
    single, _ = beam_step(hyps, *args, "prune_single")
    recomb, _ = beam_step(hyps, *args, "prune_recomb", context_key(f.k))
    return logsumexp([h.score for h in single]) - logsumexp([h.score for h in recomb])


def check_mass_dominance(fxs, seed=0, tol=1e-12) -> CheckResult:
    rng = np.random.default_rng(seed)
    errs = []
    for f in fxs:
        frame = int(rng.integers(0, f.utt.num_frames))
        B = int(rng.integers(1, 4))
        errs.append(max(mass_dominance_gap(f, B, frame), 0.0))
    return _result("recomb_mass_dominance", errs, tol)


def check_recognize(fxs, tol=1e-9) -> CheckResult:
    cfg = DecodeConfig(0.0, 0.0, beam_size=10**6)
    errs = []
    for f in fxs:
        if f.utt.num_frames > 4:
            continue
        got, s_got = recognize_labels(f.scorer, None, None, cfg, f.utt, None)
        want, s_want = exhaustive_recognize(f.scorer, None, None, cfg, f.utt, None)
        errs.append(abs(s_got - s_want) if got == want else math.inf)
    return _result("recognize_vs_exhaustive", errs, tol)


# -- gradient checks ------------------------------------------------------------------
def grad_fixture(rng, max_frames=4, max_labels=3, k=1, feature_dim=3):
    """Parametric scorer + utterance + phoneme LM for finite-difference checks."""
    T = int(rng.integers(2, max_frames + 1))
    V = int(rng.integers(2, max_labels + 1))
    sc = ContextKScorer(V, k, feature_dim, init_scale=0.7, random_state=int(rng.integers(1 << 30))).initialize()
    ref = tuple(int(x) for x in rng.integers(0, V, size=int(rng.integers(1, T + 1))))
    feats = rng.standard_normal((T, feature_dim))
    utt = Utterance(f"g{int(rng.integers(1 << 30)):09d}", T, ref, features=feats)
    text = [tuple(int(x) for x in rng.integers(0, V, size=4)) for _ in range(5)]
    lm = NGramLM("phoneme", k + 1, 0.5, vocab=V).fit(text)
    return sc, utt, lm


def toy_nbest(rng, utt: Utterance, num_labels: int, n=4) -> NBestList:
    """Reference plus ``n - 1`` other feasible label sequences."""
    pool = [s for s in all_label_sequences(num_labels, utt.num_frames) if s != utt.reference_phonemes]
    picks = rng.choice(len(pool), size=min(n - 1, len(pool)), replace=False)
    seqs = [utt.reference_phonemes] + [pool[i] for i in sorted(picks)]
    return NBestList(utt.id, [NBestEntry((), s, 0.0) for s in seqs], utt.reference_phonemes)


def grad_check_cases(n, seed=0):
    """Yield (criterion, loss_fn, scorer) triples over random fixtures."""
    rng = np.random.default_rng(seed)
    for _ in range(n):
        sc, utt, lm = grad_fixture(rng)
        alpha = float(rng.choice(ALPHAS))
        beta = float(rng.choice(BETAS[1:]))
        cfg = SeqScoreConfig(alpha, beta, None, sc.context_size)
        nb = toy_nbest(rng, utt, sc.num_labels)
        cost = CostFunction("phoneme_edit")
        yield "mmi_lf_limited", scorer_loss_fn(sc, lambda s: mmi_lf_loss(s, lm, cfg, utt, "limited")), sc
        yield "mmi_nbest", scorer_loss_fn(sc, lambda s: mmi_nbest_loss(s, lm, nb, utt, alpha, beta)), sc
        yield "mbr_nbest", scorer_loss_fn(sc, lambda s: mbr_nbest_loss(s, lm, nb, utt, alpha, beta, cost)), sc


def check_gradients(n=5, seed=0, tol=1e-4) -> list[CheckResult]:
    errs: dict[str, list] = {}
    for name, fn, sc in grad_check_cases(n, seed):
        rep = grad_check(fn, sc.get_flat_params(), epsilon=1e-5, tolerance=tol)
        errs.setdefault(name, []).append(rep.max_rel_error)
    return [_result(f"grad_{name}", e, tol) for name, e in errs.items()]


def run_all(n_fixtures=50, seed=0, n_grad=5) -> list[CheckResult]:
    fxs = fixtures(n_fixtures, seed)
    return [
        check_limited_vs_brute(fxs),
        check_ce_reduction(fxs),
        check_approx_vs_limited(fxs),
        check_top_j(fxs),
        check_full_beam(fxs),
        check_mass_dominance(fxs, seed),
        check_recognize(fxs),
        *check_gradients(n_grad, seed),
    ]


def format_matrix(results) -> str:
    head = f"{'check':<24} {'cases':>5}  {'max_err':>10}  {'tol':>8}  result"
    return "\n".join([head] + [r.row() for r in results]) + "\n"
