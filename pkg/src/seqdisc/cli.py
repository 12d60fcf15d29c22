"""Command-line entry points.

Exit codes: 0 success, 1 failed check, 2 invalid input, 3 training diverged.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import oracle
from ._validation import check_choice, check_int, check_scale
from .beam import generate_nbest, load_nbest, save_nbest
from .core import Lexicon, load_corpus, load_lexicon, save_corpus, save_lexicon
from .decode import Recognizer, format_wer_table, parallel_map, score_wer
from .lattice_free import SeqScoreConfig, dump_dp_table, run_lattice_free
from .lm import MultiLevelLM, NGramLM, WordLevelLabelLM, load_arpa, perplexity, save_arpa
from .scorer import ContextKScorer, ScoreFileScorer, load_checkpoint, load_score_tensor, save_checkpoint
from .training import CRITERIA, DivergenceError, SequenceTrainer

EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3
CONFIG_VERSION = 1


class CliError(ValueError):
    pass


# -- shared loading -----------------------------------------------------------------
def _lexicon(path) -> Lexicon:
    if path is None:
        raise CliError("--lexicon is required (it also defines the phoneme inventory)")
    return load_lexicon(path)


def _lm(path, lexicon: Lexicon):
    return load_arpa(path, lexicon.alphabet.symbols) if path else None


def _scorer(checkpoint, utts):
    """Checkpointed model, or the per-utterance score tensors named in the corpus."""
    if checkpoint:
        return load_checkpoint(checkpoint)
    if utts and all(u.scores for u in utts):
        return ScoreFileScorer(load_score_tensor(utts[0].scores).context_size)
    raise CliError("need --checkpoint or a corpus whose entries carry score tensor files")


def _read_word_file(path) -> dict:
    """``id -> words`` from any JSON-lines file with ``id`` and ``words`` keys."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
            words = obj["words"]
            out[str(obj["id"])] = tuple(words.split() if isinstance(words, str) else words)
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise CliError(f"{path}:{lineno}: {exc}") from None
    return out


# -- train-lm / ppl -----------------------------------------------------------------
def _lm_sequences(args, lexicon: Lexicon) -> list:
    seqs = []
    if args.corpus:
        utts = load_corpus(args.corpus, lexicon.alphabet)
        seqs += [u.reference_phonemes if args.unit == "phoneme" else u.reference_words for u in utts]
    if args.text:
        for line in Path(args.text).read_text(encoding="utf-8").splitlines():
            words = line.split()
            if words:
                seqs.append(lexicon.words_to_labels(words) if args.unit == "phoneme" else tuple(words))
    return seqs


def _build_lm(args, lexicon: Lexicon) -> NGramLM:
    vocab = lexicon.alphabet.num_labels if args.unit == "phoneme" else sorted(lexicon.words)
    seqs = _lm_sequences(args, lexicon)
    if args.order > 0 and not seqs:
        raise CliError("training an LM of order >= 1 needs --corpus or --text")
    return NGramLM(args.unit, args.order, args.discount, vocab=vocab).fit(seqs)


def cmd_train_lm(args) -> int:
    lexicon = _lexicon(args.lexicon)
    lm = _build_lm(args, lexicon)
    save_arpa(lm, args.out, lexicon.alphabet.symbols)
    print(f"wrote {args.unit} {args.order}-gram to {args.out}")
    return EXIT_OK


def cmd_ppl(args) -> int:
    lexicon = _lexicon(args.lexicon)
    if args.lm:
        lm = _lm(args.lm, lexicon)
    elif args.order is not None:
        train = argparse.Namespace(corpus=args.train, text=args.train_text, unit=args.unit)
        lm = _build_lm(argparse.Namespace(**vars(train), order=args.order, discount=args.discount), lexicon)
    else:
        raise CliError("give --lm FILE or --order N")
    utts = load_corpus(args.corpus, lexicon.alphabet)
    seqs = [u.reference_phonemes if lm.unit == "phoneme" else u.reference_words for u in utts]
    print(f"PPL {perplexity(lm, seqs)!r}")
    return EXIT_OK


# -- train-seq ----------------------------------------------------------------------
@dataclasses.dataclass
class RunConfig:
    """Everything a training run depends on besides the input files' contents."""

    version: int = CONFIG_VERSION
    corpus: str | None = None
    lexicon: str | None = None
    lm: str | None = None
    nbest: str | None = None
    init_checkpoint: str | None = None
    out_checkpoint: str | None = None
    log: str | None = None
    criterion: str = "ce"
    alpha: float = 1.0
    beta: float = 0.0
    top_j: int | None = None
    recomb_context: int | None = None
    beam_size: int = 20
    n_best: int = 4
    lambda1: float = 0.0
    lambda2: float = 0.0
    cost: str = "word_edit"
    learning_rate: float = 0.1
    n_steps: int = 10
    context_size: int = 1
    feature_dim: int | None = None
    init_scale: float = 0.0
    seed: int = 0

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        if "version" not in obj:
            raise CliError("config file needs a 'version' field")
        if obj["version"] != CONFIG_VERSION:
            raise CliError(f"unsupported config version {obj['version']!r}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise CliError(f"unknown config keys: {unknown}")
        return cls(**obj)

    def validate(self) -> None:
        check_choice("criterion", self.criterion, CRITERIA)
        for name in ("corpus", "lexicon", "out_checkpoint"):
            if getattr(self, name) is None:
                raise CliError(f"config needs '{name}'")
        if self.criterion.endswith("_nbest") and self.nbest is None:
            raise CliError(f"{self.criterion} needs 'nbest'")
        if self.criterion == "mmi_lf_word" and self.lm is None:
            raise CliError("mmi_lf_word needs a word LM ('lm')")
        if self.criterion.startswith("mmi_lf") and self.beta != 0.0 and self.lm is None:
            raise CliError(f"{self.criterion} with beta != 0 needs 'lm'")
        check_choice("cost", self.cost, ("word_edit", "phoneme_edit"))
        for name in ("alpha", "beta", "learning_rate", "lambda1", "lambda2", "init_scale"):
            check_scale(name, getattr(self, name), positive=name in ("alpha", "learning_rate"))
        for name in ("n_steps", "context_size", "seed"):
            check_int(name, getattr(self, name))
        for name in ("beam_size", "n_best"):
            check_int(name, getattr(self, name), 1)
        if self.top_j is not None:
            check_int("top_j", self.top_j, 1)


def _train_config(args) -> RunConfig:
    obj = {}
    if args.config:
        obj = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(obj, dict):
            raise CliError("config file must hold a JSON object")
    else:
        obj["version"] = CONFIG_VERSION
    for f in dataclasses.fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None and f.name != "version":
            obj[f.name] = val
    cfg = RunConfig.from_dict(obj)
    cfg.validate()
    return cfg


def _initial_scorer(cfg: RunConfig, utts, num_labels):
    if cfg.init_checkpoint:
        sc = load_checkpoint(cfg.init_checkpoint)
        if sc.num_labels != num_labels:
            raise CliError(f"checkpoint has {sc.num_labels} labels, lexicon has {num_labels}")
        return sc
    dims = {u.features.shape[1] for u in utts if u.features is not None}
    if len(dims) > 1:
        raise CliError(f"inconsistent feature dimensions {sorted(dims)}")
    dim = dims.pop() if dims else cfg.feature_dim
    if dim is None:
        raise CliError("no stored features: set 'feature_dim' for a fresh scorer")
    return ContextKScorer(num_labels, cfg.context_size, dim, cfg.init_scale, random_state=cfg.seed).initialize()


def _training_lm(cfg: RunConfig, lexicon: Lexicon):
    lm = _lm(cfg.lm, lexicon)
    if lm is None:
        return None
    crit = cfg.criterion
    if crit == "mmi_lf_limited" and lm.unit != "phoneme":
        raise CliError("mmi_lf_limited needs a phoneme n-gram")
    if crit == "mmi_lf_word" and lm.unit != "word":
        raise CliError("mmi_lf_word needs a word n-gram")
    if crit in ("mmi_lf_approx", "mmi_lf_beam") and lm.unit == "word":
        return WordLevelLabelLM(lm, lexicon, use_eos=False)
    return lm


def cmd_train_seq(args) -> int:
    cfg = _train_config(args)
    lexicon = _lexicon(cfg.lexicon)
    utts = load_corpus(cfg.corpus, lexicon.alphabet)
    scorer = _initial_scorer(cfg, utts, lexicon.alphabet.num_labels)
    nbest = None
    if cfg.nbest:
        nbest = load_nbest(cfg.nbest, lexicon.alphabet, {u.id: u.reference_phonemes for u in utts})
        missing = sorted({u.id for u in utts} - set(nbest))
        if missing:
            raise CliError(f"N-best file lacks utterances {missing[:5]}")
    trainer = SequenceTrainer(
        scorer,
        cfg.criterion,
        lm=_training_lm(cfg, lexicon),
        lexicon=lexicon,
        alpha=cfg.alpha,
        beta=cfg.beta,
        top_j=cfg.top_j,
        recomb_context=cfg.recomb_context if cfg.recomb_context is not None else scorer.context_size,
        beam_size=cfg.beam_size,
        cost=cfg.cost,
        learning_rate=cfg.learning_rate,
        n_steps=cfg.n_steps,
        n_jobs=args.jobs,
    )
    log = open(cfg.log, "w", encoding="utf-8") if cfg.log else None
    try:
        trainer.fit(utts, nbest=nbest, log=log)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    finally:
        if log is not None:
            log.close()
    for step, loss in enumerate(trainer.loss_curve_, 1):
        print(f"step {step} loss {loss!r}")
    save_checkpoint(trainer.scorer_, cfg.out_checkpoint)
    if args.dump_dp:
        _dump_dp(args.dump_dp, trainer, utts, lexicon)
    return EXIT_OK


def _dump_dp(path, trainer: SequenceTrainer, utts, lexicon: Lexicon) -> None:
    crit = trainer.criterion
    modes = {"mmi_lf_limited": "limited", "mmi_lf_approx": "approx", "mmi_lf_word": "approx"}
    if crit not in modes:
        raise CliError("--dump-dp needs criterion mmi_lf_limited, mmi_lf_approx or mmi_lf_word")
    lm = trainer.lm
    if crit == "mmi_lf_word":
        lm = WordLevelLabelLM(lm, lexicon, use_eos=False)
    sc = trainer.scorer_
    cfg = SeqScoreConfig(trainer.alpha, trainer.beta, trainer.top_j, trainer.recomb_context)
    with open(path, "w", encoding="utf-8") as fh:
        for u in sorted(utts, key=lambda u: u.id):
            res = run_lattice_free(sc.log_probs(u), sc.context_size, lm, cfg, modes[crit], keep_frames=True)
            dump_dp_table(res, fh, lexicon.alphabet.symbols, u.id)


# -- nbest / decode / score ---------------------------------------------------------
def _search_lm(args, lexicon: Lexicon):
    lm = _lm(args.lm, lexicon)
    plm = _lm(args.phoneme_lm, lexicon)
    if plm is not None and plm.unit != "phoneme":
        raise CliError("--phoneme-lm must be a phoneme n-gram")
    if lm is None or lm.unit == "phoneme":
        return lm
    return MultiLevelLM(plm, lm, lexicon, use_eos=not args.no_eos)


def cmd_nbest(args) -> int:
    lexicon = _lexicon(args.lexicon)
    utts = load_corpus(args.corpus, lexicon.alphabet)
    scorer = _scorer(args.checkpoint, utts)
    lm = _search_lm(args, lexicon)
    if args.n < 1 or args.beam_size < args.n:
        raise CliError("need 1 <= n <= beam size")

    def one(u):
        return generate_nbest(scorer, lm, u, args.n, args.beam_size, args.alpha, args.beta, lexicon)

    lists = parallel_map(one, sorted(utts, key=lambda u: u.id), args.jobs)
    save_nbest(lists, args.out, lexicon.alphabet)
    print(f"wrote {len(lists)} lists to {args.out}")
    return EXIT_OK


def cmd_decode(args) -> int:
    lexicon = _lexicon(args.lexicon)
    utts = sorted(load_corpus(args.corpus, lexicon.alphabet), key=lambda u: u.id)
    scorer = _scorer(args.checkpoint, utts)
    elm = _lm(args.lm, lexicon)
    if elm is not None and elm.unit != "word":
        raise CliError("--lm must be a word n-gram for decoding")
    if args.lambda1 != 0.0 and elm is None:
        raise CliError("lambda1 != 0 needs --lm")
    ilm = _lm(args.ilm, lexicon)
    rec = Recognizer(
        scorer,
        elm,
        lexicon,
        ilm=ilm,
        phoneme_lm=_lm(args.phoneme_lm, lexicon),
        lambda1=args.lambda1,
        lambda2=args.lambda2,
        beam_size=args.beam_size,
        use_eos=not args.no_eos,
        n_jobs=args.jobs,
    ).fit()
    hyps = rec.predict(utts)
    with open(args.out, "w", encoding="utf-8") as fh:
        for u, words in zip(utts, hyps):
            fh.write(json.dumps({"id": u.id, "words": " ".join(words)}) + "\n")
    print(f"decoded {len(utts)} utterances to {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    refs = _read_word_file(args.ref)
    rows = []
    for spec in args.hyp:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).stem, spec
        rows.append(score_wer(refs, _read_word_file(path)).row(name))
    sys.stdout.write(format_wer_table(rows))
    if args.csv:
        Path(args.csv).write_text(format_wer_table(rows, as_csv=True), encoding="utf-8")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    results = oracle.run_all(args.fixtures, args.seed, args.grad_fixtures)
    sys.stdout.write(oracle.format_matrix(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_synth(args) -> int:
    from .synth import make_task

    task = make_task(n_train=args.n_train, n_test=args.n_test, noise=args.noise, weak=args.weak, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_lexicon(task.lexicon, out / "lexicon.txt")
    save_corpus(task.train, out / "train.jsonl", task.alphabet)
    save_corpus(task.test, out / "test.jsonl", task.alphabet)
    held = {u.reference_words for u in task.test}
    text = [" ".join(s) for s in task.text if tuple(s) not in held]
    (out / "text.txt").write_text("".join(t + "\n" for t in text), encoding="utf-8")
    print(f"wrote lexicon, {len(task.train)} train / {len(task.test)} test utterances and LM text to {out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------
def _search_args(p):
    p.add_argument("--corpus", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--checkpoint", help="scorer checkpoint; default: score files named in the corpus")
    p.add_argument("--lm", help="ARPA file (word LM, or a phoneme LM used directly)")
    p.add_argument("--phoneme-lm", help="within-word phoneme LM for the multi-level search")
    p.add_argument("--beam-size", type=int, default=20)
    p.add_argument("--no-eos", action="store_true", help="drop the end-of-sentence word LM term")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqdisc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-lm", help="train an n-gram LM and write it as ARPA")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--corpus", help="JSON-lines corpus (reference phonemes or words)")
    p.add_argument("--text", help="plain text, one word sentence per line")
    p.add_argument("--unit", choices=("phoneme", "word"), default="phoneme")
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--discount", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("ppl", help="perplexity of a held-out corpus")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--corpus", required=True, help="held-out corpus")
    p.add_argument("--lm", help="ARPA file to evaluate")
    p.add_argument("--order", type=int, help="train an LM of this order on the fly instead (0 = uniform)")
    p.add_argument("--train", help="training corpus for --order")
    p.add_argument("--train-text", help="training text for --order")
    p.add_argument("--unit", choices=("phoneme", "word"), default="phoneme")
    p.add_argument("--discount", type=float, default=0.5)
    p.set_defaults(func=cmd_ppl)

    p = sub.add_parser("train-seq", help="fixed-step training with one criterion")
    p.add_argument("--config", help="JSON run config with a 'version' field; flags override it")
    p.add_argument("--corpus")
    p.add_argument("--lexicon")
    p.add_argument("--lm")
    p.add_argument("--nbest")
    p.add_argument("--init-checkpoint")
    p.add_argument("--out-checkpoint")
    p.add_argument("--log", help="JSON-lines loss log")
    p.add_argument("--criterion", choices=CRITERIA)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--top-j", type=int)
    p.add_argument("--recomb-context", type=int)
    p.add_argument("--beam-size", type=int)
    p.add_argument("--cost", choices=("word_edit", "phoneme_edit"))
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--n-steps", type=int)
    p.add_argument("--context-size", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--init-scale", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--dump-dp", help="write the final DP tables as JSON lines")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_train_seq)

    p = sub.add_parser("nbest", help="generate N-best lists (reference forced in)")
    _search_args(p)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.3)
    p.set_defaults(func=cmd_nbest)

    p = sub.add_parser("decode", help="recognise with LM fusion")
    _search_args(p)
    p.add_argument("--lambda1", type=float, default=0.0)
    p.add_argument("--lambda2", type=float, default=0.0)
    p.add_argument("--ilm", help="phoneme ARPA ILM; default: zero-encoder estimate")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="WER with Sub/Del/Ins breakdown")
    p.add_argument("--ref", required=True, help="JSON lines with id and words (a corpus file works)")
    p.add_argument("--hyp", required=True, action="append", help="[NAME=]FILE, repeatable")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("oracle-check", help="brute-force cross-checks; prints a pass/fail matrix")
    p.add_argument("--fixtures", type=int, default=50)
    p.add_argument("--grad-fixtures", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("synth", help="write a synthetic lexicon, corpora and LM text")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--weak", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, TypeError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
