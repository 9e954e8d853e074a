"""Command-line entry point.

Eight subcommands cover the pipeline end to end::

    synth       draw a synthetic corpus plus the generator that made it
    train-nado  fit a satisfaction head against a frozen model
    finetune    fine-tune a model, optionally anchored to a guide
    decode      sample completions (plain or guided)
    eval        report violation / perplexity for a checkpoint
    run         one (scenario, method) experiment with full artifacts
    sweep       constraint-strength sweep on the detox scenario
    compare     budget-matched method comparison table

Every command takes ``--config <path>`` pointing at an INI file whose
section matching the command name (and, for ``run``, the ``[experiment]``
section a previous run wrote to its manifest) supplies flag defaults;
explicit flags win.  Exit status is 0 on success, 1 for usage errors, and
2 for runtime failures, which print a diagnostic on stderr.  Everything
runs synchronously in the foreground.
"""
from __future__ import annotations

import argparse
import os
import sys

from . import __version__
from .config import read_manifest, write_manifest
from .errors import CtrlTuneError
from .evaluation import perplexity, violation_rate
from .experiments import (
    COMPARE_METHODS,
    LAMBDA_GRID,
    PROFILES,
    available_methods,
    build_scenario,
    compare_methods,
    run_experiment,
    sweep_lambda,
    synth_corpus,
)
from .guide import ExactSource, GuideConfig, GuidedModel, NadoSource
from .models import (
    OptimizerConfig,
    load_checkpoint,
    model_from_snapshot,
    sample_completion,
    save_checkpoint,
)
from .nado import (
    NadoTrainConfig,
    TabularNado,
    WindowNado,
    load_nado_checkpoint,
    max_prefix_error_data,
    sample_training_set,
    save_nado_checkpoint,
    train_nado,
)
from .oracles import evaluate, parse_oracle_file, write_oracle_file
from .seqcore import derive_rng, load_corpus, load_vocab, save_corpus, save_vocab
from .training import fine_tune

# long-form aliases accepted next to the internal names
SCENARIO_ALIASES = {
    "detox": "detox",
    "classification": "classification",
    "mixed": "mixed",
    "mixed_utility": "mixed",
}
METHOD_ALIASES = {
    "plain": "plain",
    "filter": "filter",
    "rl": "rl",
    "nado_decode": "nado_decode",
    "ours": "ours",
    "ours_sequential": "ours",
    "ours_parallel": "ours_parallel",
    "ours_adaptive": "adaptive",
    "adaptive": "adaptive",
    "nonadaptive": "nonadaptive",
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; the contract wants 1."""

    def error(self, message):
        raise _UsageError(message)


SUBCOMMANDS: dict[str, argparse.ArgumentParser] = {}


def _add_command(subs, name: str, help_text: str) -> argparse.ArgumentParser:
    sub = subs.add_parser(name, help=help_text, description=help_text)
    sub.add_argument("--config", metavar="PATH",
                     help="INI file supplying flag defaults")
    sub.add_argument("--profile", choices=sorted(PROFILES), default="desk",
                     help="size preset (default: desk)")
    sub.add_argument("--seed", type=int, default=0, metavar="N",
                     help="random seed (default: 0)")
    SUBCOMMANDS[name] = sub
    return sub


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctrltune",
                     description="attribute-controlled fine-tuning toolkit")
    parser.add_argument("--version", action="version",
                        version=f"ctrltune {__version__}")
    subs = parser.add_subparsers(dest="command", parser_class=_Parser,
                                 metavar="COMMAND")

    sub = _add_command(subs, "synth", "draw a synthetic corpus")
    sub.add_argument("--out", required=True, metavar="DIR")
    sub.add_argument("--scenario", default="detox",
                     choices=("detox", "classification"))
    sub.add_argument("--size", type=int, metavar="N",
                     help="records to draw (default: profile corpus size)")
    sub.add_argument("--violating-fraction", type=float, default=0.30,
                     metavar="F", help="target share in [0, 1] (default: 0.3)")
    sub.add_argument("--prompt-len", type=int, default=0, metavar="P",
                     help="prompt tokens per record (detox only)")
    sub.add_argument("--completion-len", type=int, metavar="L",
                     help="completion budget (default: profile max length)")

    sub = _add_command(subs, "train-nado", "fit a satisfaction head")
    sub.add_argument("--model", required=True, metavar="CKPT")
    sub.add_argument("--vocab", metavar="PATH")
    sub.add_argument("--oracle", metavar="PATH")
    sub.add_argument("--out", required=True, metavar="DIR")
    sub.add_argument("--head", choices=("tabular", "window"),
                     default="tabular")
    sub.add_argument("--samples", type=int, metavar="N",
                     help="draws per prompt (default: profile setting)")
    sub.add_argument("--epochs", type=int, metavar="E")
    sub.add_argument("--max-len", type=int, metavar="L")

    sub = _add_command(subs, "finetune", "fine-tune a model checkpoint")
    sub.add_argument("--model", required=True, metavar="CKPT")
    sub.add_argument("--vocab", metavar="PATH")
    sub.add_argument("--corpus", required=True, metavar="PATH")
    sub.add_argument("--out", required=True, metavar="DIR")
    sub.add_argument("--epochs", type=int, metavar="E")
    sub.add_argument("--lr", type=float, metavar="LR")
    sub.add_argument("--kl-weight", type=float, default=0.0, metavar="W")
    sub.add_argument("--head", metavar="CKPT",
                     help="satisfaction head; anchors training to its guide")
    sub.add_argument("--exact-guide", action="store_true",
                     help="anchor to the exact guide (needs --oracle)")
    sub.add_argument("--oracle", metavar="PATH")
    sub.add_argument("--delta", type=float, default=1.0, metavar="D")
    sub.add_argument("--max-len", type=int, metavar="L")

    sub = _add_command(subs, "decode", "sample completions")
    sub.add_argument("--model", required=True, metavar="CKPT")
    sub.add_argument("--vocab", metavar="PATH")
    sub.add_argument("--head", metavar="CKPT",
                     help="satisfaction head; decode from the guided model")
    sub.add_argument("--delta", type=float, default=1.0, metavar="D")
    sub.add_argument("--oracle", metavar="PATH",
                     help="also report the sample violation fraction")
    sub.add_argument("--n", type=int, default=20, metavar="N")
    sub.add_argument("--prompt", default="", metavar="TOKENS",
                     help="space-separated prompt tokens")
    sub.add_argument("--max-len", type=int, metavar="L")
    sub.add_argument("--out", metavar="DIR",
                     help="also write the samples to DIR/samples.txt")

    sub = _add_command(subs, "eval", "report violation and perplexity")
    sub.add_argument("--model", required=True, metavar="CKPT")
    sub.add_argument("--vocab", metavar="PATH")
    sub.add_argument("--oracle", metavar="PATH")
    sub.add_argument("--head", metavar="CKPT",
                     help="evaluate the guided model instead of the base")
    sub.add_argument("--delta", type=float, default=1.0, metavar="D")
    sub.add_argument("--corpus", metavar="PATH",
                     help="held-out corpus for perplexity")
    sub.add_argument("--max-len", type=int, metavar="L")
    sub.add_argument("--samples", type=int, default=4096, metavar="N",
                     help="draws for sampled estimates at large scales")
    sub.add_argument("--out", metavar="DIR",
                     help="also write DIR/eval.tsv")

    sub = _add_command(subs, "run", "run one experiment with artifacts")
    sub.add_argument("--scenario", required=True, metavar="NAME")
    sub.add_argument("--method", required=True, metavar="NAME")
    sub.add_argument("--out", metavar="DIR")
    sub.add_argument("--kl-weight", type=float, metavar="W",
                     help="override the profile constraint weight")
    sub.add_argument("--serialize-debug", action="store_true",
                     help="run the parallel pipeline stages in-process")

    sub = _add_command(subs, "sweep", "constraint-strength sweep")
    sub.add_argument("--out", metavar="DIR")
    sub.add_argument("--values", metavar="W,W,...",
                     default=",".join(str(v) for v in LAMBDA_GRID))

    sub = _add_command(subs, "compare", "budget-matched method comparison")
    sub.add_argument("--out", metavar="DIR")
    sub.add_argument("--methods", metavar="M,M,...",
                     default=",".join(COMPARE_METHODS))

    return parser


# --------------------------------------------------------------------------
# config file expansion
# --------------------------------------------------------------------------

def _expand_config(argv: list[str]) -> list[str]:
    """Splice config-file entries in as flags ahead of the explicit ones."""
    path = None
    for i, tok in enumerate(argv):
        if tok == "--config":
            if i + 1 >= len(argv):
                raise _UsageError("--config needs a path")
            path = argv[i + 1]
        elif tok.startswith("--config="):
            path = tok.split("=", 1)[1]
    if path is None:
        return argv
    command = next((t for t in argv if t in SUBCOMMANDS), None)
    if command is None:
        return argv
    sub = SUBCOMMANDS[command]
    try:
        sections = read_manifest(path)
    except (OSError, CtrlTuneError) as exc:
        raise _UsageError(f"cannot read config {path!r}: {exc}") from None
    merged: dict[str, str] = {}
    for name in ("experiment", command):
        merged.update(sections.get(name, {}))
    by_flag = {}
    for action in sub._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                by_flag[opt] = action
    spliced: list[str] = []
    for key, value in merged.items():
        flag = "--" + key.replace("_", "-")
        action = by_flag.get(flag)
        if action is None or flag == "--config":
            continue
        if action.nargs == 0:
            if str(value).strip().lower() in ("1", "true", "yes", "on"):
                spliced.append(flag)
        else:
            spliced.extend((flag, str(value)))
    at = argv.index(command) + 1
    return argv[:at] + spliced + argv[at:]


# --------------------------------------------------------------------------
# shared loading helpers
# --------------------------------------------------------------------------

def _sibling(anchor: str, name: str, given: str | None, what: str) -> str:
    if given:
        return given
    candidate = os.path.join(os.path.dirname(anchor) or ".", name)
    if os.path.exists(candidate):
        return candidate
    raise _UsageError(f"--{what} not given and {candidate!r} does not exist")


def _load_model(args):
    vocab = load_vocab(_sibling(args.model, "vocab.txt", args.vocab, "vocab"))
    return vocab, load_checkpoint(args.model, vocab)


def _load_oracle(args, vocab):
    return parse_oracle_file(
        _sibling(args.model, "oracle.txt", args.oracle, "oracle"), vocab)


def _maybe_guided(args, vocab, model):
    """The model itself, or its guided wrapper when a head is supplied."""
    if not getattr(args, "head", None):
        return model
    head = load_nado_checkpoint(args.head, vocab)
    return GuidedModel(model, NadoSource(head), GuideConfig(delta=args.delta))


def _parse_prompt(vocab, text: str) -> tuple[int, ...]:
    return tuple(vocab.index(tok) for tok in text.split())


def _profile_of(args):
    return PROFILES[args.profile]


def _emit(pairs) -> None:
    for key, value in pairs:
        print(f"{key}={value}")


# --------------------------------------------------------------------------
# command handlers
# --------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    if not 0.0 <= args.violating_fraction <= 1.0:
        raise _UsageError("--violating-fraction must lie in [0, 1]")
    result = synth_corpus(args.profile, args.seed, size=args.size,
                          violating_fraction=args.violating_fraction,
                          prompt_len=args.prompt_len,
                          completion_len=args.completion_len,
                          scenario=args.scenario)
    os.makedirs(args.out, exist_ok=True)
    save_corpus(os.path.join(args.out, "corpus.txt"), result.corpus,
                result.vocab)
    save_checkpoint(os.path.join(args.out, "generator.ckpt"),
                    result.generator)
    save_vocab(os.path.join(args.out, "vocab.txt"), result.vocab)
    write_oracle_file(os.path.join(args.out, "oracle.txt"), result.oracle,
                      result.vocab)
    if result.records is not None:
        with open(os.path.join(args.out, "records.txt"), "w",
                  encoding="utf-8") as fh:
            fh.writelines(line + "\n" for line in result.records)
    write_manifest(os.path.join(args.out, "synth.ini"), {
        "synth": {
            "scenario": args.scenario, "profile": args.profile,
            "seed": args.seed, "size": len(result.corpus),
            "violating_fraction": args.violating_fraction,
            "prompt_len": args.prompt_len,
            "realized_violating_fraction": repr(result.realized_fraction),
            "package_version": __version__,
        },
    })
    _emit([("scenario", args.scenario), ("records", len(result.corpus)),
           ("realized_violating_fraction", repr(result.realized_fraction)),
           ("out", args.out)])
    return 0


def _cmd_train_nado(args) -> int:
    profile = _profile_of(args)
    vocab, model = _load_model(args)
    oracle = _load_oracle(args, vocab)
    max_len = args.max_len or profile.max_len
    samples = args.samples or profile.samples_per_prompt
    data = sample_training_set(model, [()], samples, oracle,
                               derive_rng(args.seed, "data", 1), max_len)
    if args.head == "window":
        head = WindowNado(vocab, profile.window, profile.embed_dim,
                          profile.hidden_dim,
                          rng=derive_rng(args.seed, "head"))
    else:
        head = TabularNado(vocab)
    history = train_nado(head, data, NadoTrainConfig(
        epochs=args.epochs or profile.nado_epochs))
    err = max_prefix_error_data(head, model, oracle, data, max_len)
    os.makedirs(args.out, exist_ok=True)
    save_nado_checkpoint(os.path.join(args.out, "head.ckpt"), head)
    _emit([("head", args.head), ("training_sequences", len(data)),
           ("final_loss", repr(history[-1])),
           ("max_prefix_error", repr(err)),
           ("out", args.out)])
    return 0


def _cmd_finetune(args) -> int:
    profile = _profile_of(args)
    vocab, model = _load_model(args)
    corpus = load_corpus(args.corpus, vocab)
    guide = None
    if args.head and args.exact_guide:
        raise _UsageError("pass either --head or --exact-guide, not both")
    if args.head:
        frozen = model_from_snapshot(model.snapshot(), vocab)
        head = load_nado_checkpoint(args.head, vocab)
        guide = GuidedModel(frozen, NadoSource(head),
                            GuideConfig(delta=args.delta))
    elif args.exact_guide:
        frozen = model_from_snapshot(model.snapshot(), vocab)
        oracle = _load_oracle(args, vocab)
        guide = GuidedModel(
            frozen,
            ExactSource(frozen, oracle, args.max_len or profile.max_len),
            GuideConfig(delta=args.delta))
    history = fine_tune(
        model, corpus, epochs=args.epochs or profile.ft_epochs,
        optimizer=OptimizerConfig(lr=args.lr or profile.ft_lr, moments=True),
        kl_weight=args.kl_weight, guide=guide)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "model.ckpt"), model)
    save_vocab(os.path.join(args.out, "vocab.txt"), vocab)
    _emit([("epochs", len(history)), ("final_loss", repr(history[-1])),
           ("guided", "yes" if guide is not None else "no"),
           ("out", args.out)])
    return 0


def _cmd_decode(args) -> int:
    profile = _profile_of(args)
    vocab, model = _load_model(args)
    sampler = _maybe_guided(args, vocab, model)
    prompt = _parse_prompt(vocab, args.prompt)
    max_len = args.max_len or profile.max_len
    rng = derive_rng(args.seed, "decode")
    draws = [sample_completion(sampler, rng, prompt, max_len)
             for _ in range(args.n)]
    lines = [" ".join(vocab.tokens[t] for t in y) for y in draws]
    for line in lines:
        print(line)
    if args.oracle:
        oracle = parse_oracle_file(args.oracle, vocab)
        bad = sum(1 for y in draws if evaluate(oracle, prompt, y) < 0.5)
        print(f"sample_violation_fraction={bad / len(draws)!r}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "samples.txt"), "w",
                  encoding="utf-8") as fh:
            fh.writelines(line + "\n" for line in lines)
    return 0


def _cmd_eval(args) -> int:
    profile = _profile_of(args)
    vocab, model = _load_model(args)
    subject = _maybe_guided(args, vocab, model)
    oracle = _load_oracle(args, vocab)
    max_len = args.max_len or profile.max_len
    rows = [("violation_rate", repr(violation_rate(
        subject, oracle, [()], max_len,
        rng=derive_rng(args.seed, "eval"), samples=args.samples)))]
    if args.corpus:
        corpus = load_corpus(args.corpus, vocab)
        rows.append(("perplexity", repr(perplexity(subject, corpus))))
    _emit(rows)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.tsv"), "w",
                  encoding="utf-8") as fh:
            fh.write("metric\tvalue\n")
            for key, value in rows:
                fh.write(f"{key}\t{value}\n")
    return 0


def _cmd_run(args) -> int:
    scenario_name = SCENARIO_ALIASES.get(args.scenario)
    if scenario_name is None:
        raise _UsageError(f"unknown scenario {args.scenario!r}; pick from "
                          f"{sorted(SCENARIO_ALIASES)}")
    method = METHOD_ALIASES.get(args.method)
    if method is None:
        raise _UsageError(f"unknown method {args.method!r}; pick from "
                          f"{sorted(METHOD_ALIASES)}")
    if method not in available_methods(scenario_name):
        offered = sorted(alias for alias, m in METHOD_ALIASES.items()
                         if m in available_methods(scenario_name))
        raise _UsageError(f"method {args.method!r} is not available for "
                          f"scenario {args.scenario!r}; pick from {offered}")
    scenario = build_scenario(scenario_name, args.profile, args.seed)
    options = {}
    if args.kl_weight is not None:
        options["kl_weight"] = args.kl_weight
    if args.serialize_debug:
        options["serialize_debug"] = True
    result = run_experiment(scenario, method, args.seed, out_dir=args.out,
                            **options)
    rows = [("scenario", scenario_name), ("method", method),
            ("violation_rate", repr(result.violation)),
            ("perplexity", repr(result.perplexity)),
            ("kl_drift", repr(result.kl_drift))]
    if result.accuracy is not None:
        rows.append(("accuracy", repr(result.accuracy)))
    if args.out:
        rows.append(("out", args.out))
    _emit(rows)
    return 0


def _cmd_sweep(args) -> int:
    try:
        values = tuple(float(v) for v in args.values.split(","))
    except ValueError:
        raise _UsageError(f"bad --values list {args.values!r}") from None
    rows = sweep_lambda(args.profile, args.seed, values, args.out)
    print("kl_weight\tviolation_rate\tperplexity")
    for lam, violation, ppl in rows:
        print(f"{lam!r}\t{violation!r}\t{ppl!r}")
    return 0


def _cmd_compare(args) -> int:
    methods = []
    for name in args.methods.split(","):
        mapped = METHOD_ALIASES.get(name.strip())
        if mapped is None:
            raise _UsageError(f"unknown method {name.strip()!r}; pick from "
                              f"{sorted(METHOD_ALIASES)}")
        methods.append(mapped)
    results = compare_methods(args.profile, args.seed, tuple(methods),
                              args.out)
    print("method\tviolation_rate\tperplexity")
    for method in methods:
        r = results[method]
        print(f"{method}\t{r.violation!r}\t{r.perplexity!r}")
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "train-nado": _cmd_train_nado,
    "finetune": _cmd_finetune,
    "decode": _cmd_decode,
    "eval": _cmd_eval,
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(_expand_config(argv))
        if args.command is None:
            raise _UsageError("a command is required (try --help)")
        return _HANDLERS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (CtrlTuneError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
