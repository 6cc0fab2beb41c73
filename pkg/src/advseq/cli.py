"""Command-line entry point: ``python -m advseq <command> ...``.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime failure.
Every artifact gets a ``<artifact>.meta.json`` sidecar holding the effective
configuration and seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from . import __version__, attack, embed, ensemble, harness, neural, proximity, signatures, squeeze
from .seqdata import (
    LABEL_IDS,
    LABEL_NAMES,
    MALICIOUS,
    Dataset,
    LabeledSample,
    Vocabulary,
    generate_synthetic,
    load_dataset,
    make_synth_spec,
    save_dataset,
)

log = logging.getLogger("advseq")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# helpers


def _path(args, p) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else Path(args.workdir) / p


def _effective(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}


def write_meta(args, artifact: Path, **extra) -> None:
    doc = {"command": args.command, "config": _effective(args), "seed": getattr(args, "seed", None), "version": __version__}
    doc.update(extra)
    Path(str(artifact) + ".meta.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _load(args, data, vocab_path=None, split="train") -> tuple[Dataset, Vocabulary]:
    vocab = Vocabulary.load(_path(args, vocab_path)) if vocab_path else None
    return load_dataset(_path(args, data), vocab, split)


def _pool_from_dataset(adv: Dataset) -> list[attack.AttackResult]:
    """Adversarial examples stored as a dataset whose ids are the source sample ids."""
    return [attack.AttackResult((), s.seq, [], True, 0, id=s.id) for s in adv]


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = make_synth_spec(
        args.vocab_size, (args.len_min, args.len_max), args.overlap, seed=args.seed,
        benign_concentration=args.benign_concentration, malicious_concentration=args.malicious_concentration,
    )
    data = generate_synthetic(spec, args.n_benign, args.n_malicious, split=args.split)
    vocab = Vocabulary.synthetic(args.vocab_size)
    out, vpath = _path(args, args.out), _path(args, args.vocab)
    save_dataset(data, vocab, out)
    vocab.save(vpath)
    write_meta(args, out, samples=len(data))
    write_meta(args, vpath)
    return 0


def _model_config(args, vocab: Vocabulary, cell=None, hidden=None) -> neural.ModelConfig:
    return neural.ModelConfig(
        vocab_width=vocab.width, window=args.window, cell=cell or args.cell, hidden_units=hidden or args.hidden,
        bidirectional=args.bidirectional, depth=args.depth, dense_units=args.dense,
        dropout_rate=args.dropout, seed=args.seed,
    )


def _train_config(args) -> neural.TrainConfig:
    return neural.TrainConfig(optimizer=args.optimizer, learning_rate=args.lr, batch_size=args.batch_size,
                              epochs=args.epochs, seed=args.seed)


def cmd_train(args) -> int:
    data, vocab = _load(args, args.data, args.vocab)
    out = _path(args, args.out)
    if args.kind == "classifier":
        model, hist = neural.train(neural.init_model(_model_config(args, vocab)), data, _train_config(args))
        neural.save_checkpoint(model, out)
        write_meta(args, out, loss_history=hist)
    elif args.kind == "substitute":
        if not args.target:
            raise UsageError("train --kind substitute needs --target")
        target = neural.load_checkpoint(_path(args, args.target))
        spec = attack.SubstituteSpec(cell=args.cell, hidden_units=args.hidden, optimizer=args.optimizer,
                                     epochs=args.epochs, dropout_rate=args.dropout, seed=args.seed, learning_rate=args.lr)
        model = attack.train_substitute(target, data, spec)
        neural.save_checkpoint(model, out)
        write_meta(args, out, agreement_on_training=attack.agreement(target, model, data))
    elif args.kind == "ensemble":
        cfg = ensemble.EnsembleConfig(args.variant, args.size, args.voting, args.stride, args.adversarial_fraction, args.seed)
        pool = None
        if cfg.adversarial:
            if not args.adv_data:
                raise UsageError(f"ensemble variant {cfg.variant} needs --adv-data")
            pool = _pool_from_dataset(_load(args, args.adv_data, args.vocab)[0])
        ens = ensemble.train_ensemble(cfg, data, _model_config(args, vocab), _train_config(args), pool, args.adv_data or "none")
        names = []
        for k, m in enumerate(ens.members):
            name = f"{out.stem}.member{k}.npz"
            neural.save_checkpoint(m, out.parent / name)
            names.append(name)
        ens.save_manifest(out, names)
        write_meta(args, out)
    else:
        label = LABEL_IDS[args.gen_class]
        gen = proximity.train_generator(data.of_label(label).sequences, len(vocab), args.order, args.smoothing, args.seed, label)
        gen.save(out)
        write_meta(args, out)
    return 0


def cmd_embed(args) -> int:
    data, vocab = _load(args, args.data, args.vocab)
    if args.benign_only:
        data = data.of_label(LABEL_IDS["benign"])
    counts = embed.build_cooccurrence(data, args.radius, len(vocab))
    emb, hist = embed.train_embeddings(counts, args.dim, args.iters, args.seed, return_history=True)
    out = _path(args, args.out)
    emb.save(out)
    write_meta(args, out, objective_first=hist[0], objective_last=hist[-1], unseen=list(emb.unseen))
    return 0


def cmd_squeeze(args) -> int:
    data, _ = _load(args, args.data, args.vocab)
    emb = embed.EmbeddingMatrix.load(_path(args, args.embedding))
    model = neural.load_checkpoint(_path(args, args.model))
    smap = squeeze.build_squeeze_map(emb, args.size)
    thr = squeeze.calibrate_threshold(smap, model, data)
    out = _path(args, args.out)
    smap.save(out, thr)
    write_meta(args, out, threshold_adv=thr)
    print(f"threshold_adv = {thr!r}")
    return 0


def cmd_attack(args) -> int:
    data, vocab = _load(args, args.data, args.vocab, split="test")
    target = neural.load_checkpoint(_path(args, args.model))
    sub = neural.load_checkpoint(_path(args, args.substitute)) if args.substitute else None
    if args.variant == "blackbox" and sub is None:
        raise UsageError("attack --variant blackbox needs --substitute")
    mal = [s for s in data if s.label == MALICIOUS]
    pred, _ = neural.predict_sequences(target, [s.seq for s in mal])
    todo = [s for s, p in zip(mal, pred) if p == MALICIOUS]
    if args.limit:
        todo = todo[: args.limit]
    results = []
    for k, s in enumerate(todo):
        cfg = attack.AttackConfig(n=target.window, variant=args.variant, seed=args.seed * 100_003 + k)
        results.append(attack.run_attack(target, s.seq, cfg, sub, s.id))
    out = _path(args, args.out)
    attack.write_attack_log(results, out)
    evaded = sum(r.evaded for r in results)
    write_meta(args, out, attacked=len(results), evaded=evaded)
    if args.adv_out:
        adv = Dataset(tuple(LabeledSample(r.perturbed, MALICIOUS, r.id) for r in results if r.evaded), "test")
        p = _path(args, args.adv_out)
        save_dataset(adv, vocab, p)
        write_meta(args, p, samples=len(adv))
    print(f"evaded {evaded}/{len(results)}")
    return 0


def cmd_signatures(args) -> int:
    vocab = Vocabulary.load(_path(args, args.vocab))
    out = _path(args, args.out)
    if args.detect:
        sigs = signatures.SignatureSet.load(_path(args, args.signatures), vocab)
        data, _ = load_dataset(_path(args, args.detect), vocab)
        with open(out, "w", encoding="utf-8") as fh:
            for s in data:
                flag, found = sigs.detect(s.seq)
                fh.write(json.dumps({"id": s.id, "adversarial": flag, "matched": [[vocab.name(t) for t in g] for g in found]}) + "\n")
        write_meta(args, out)
        return 0
    if not (args.adv and args.benign):
        raise UsageError("signatures needs --adv and --benign (or --detect with --signatures)")
    adv, _ = load_dataset(_path(args, args.adv), vocab)
    ben, _ = load_dataset(_path(args, args.benign), vocab)
    sigs = signatures.build_signature_set(adv.sequences, ben.of_label(0).sequences, args.n, args.p_threshold, args.sigs_threshold)
    sigs.save(out, vocab)
    write_meta(args, out, signatures=len(sigs.signatures))
    print(f"{len(sigs.signatures)} signatures")
    return 0


def _defense_system(args, vocab):
    model = neural.load_checkpoint(_path(args, args.model)) if args.model else None
    need = lambda name: getattr(args, name) or (_ for _ in ()).throw(UsageError(f"defend --defense {args.defense} needs --{name.replace('_', '-')}"))
    if args.defense == "ensemble":
        return ensemble.Ensemble.load_manifest(_path(args, need("ensemble")))
    if model is None:
        raise UsageError("defend needs --model")
    if args.defense == "none":
        return harness.Baseline(model)
    if args.defense == "squeeze":
        smap, thr = squeeze.SqueezeMap.load(_path(args, need("squeeze_map")))
        if thr is None:
            raise UsageError("squeeze map file carries no calibrated threshold")
        return squeeze.SqueezeDefense(model, squeeze.SqueezeDetector(smap, thr))
    if args.defense == "neighbor":
        train, _ = load_dataset(_path(args, need("train_data")), vocab)
        return proximity.NeighborDefense.build(model, train)
    if args.defense == "defgen":
        gens = [proximity.GeneratorModel.load(_path(args, p)) for p in need("generators")]
        cfg = proximity.DefGenConfig(m_generated=args.m_generated, seed=args.seed)
        return proximity.DefGenDefense.build(model, gens[0], gens[1], cfg)
    sigs = signatures.SignatureSet.load(_path(args, need("signatures")), vocab)
    return signatures.SignatureDefense(model, sigs)


def cmd_defend(args) -> int:
    vocab = Vocabulary.load(_path(args, args.vocab))
    data, _ = load_dataset(_path(args, args.data), vocab)
    system = _defense_system(args, vocab)
    labels, flags = harness._predict_all(system, data.sequences)
    out = _path(args, args.out)
    with open(out, "w", encoding="utf-8") as fh:
        for s, p, f in zip(data, labels, flags):
            fh.write(json.dumps({"id": s.id, "label": LABEL_NAMES[int(p)], "adversarial": bool(f)}) + "\n")
    write_meta(args, out)
    return 0


def cmd_eval(args) -> int:
    values = harness.read_kv_file(_path(args, args.plan)) if args.plan else {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    try:
        plan = harness.ExperimentPlan.from_mapping(values)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid plan: {exc}") from None
    out = _path(args, args.out or plan.output)
    report = harness.run_experiment_table(plan, progress=lambda m: log.info(m))
    csv_path, side = report.write(out, timings=plan.csv_timings)
    write_meta(args, csv_path, plan=plan.to_text())
    print(report.csv_text(plan.csv_timings), end="")
    return 0


# --------------------------------------------------------------------------
# parser


def _model_flags(p, cell="lstm", hidden=32, optimizer="adam", epochs=10):
    p.add_argument("--cell", choices=neural.CELLS, default=cell)
    p.add_argument("--hidden", type=int, default=hidden)
    p.add_argument("--window", type=int, default=40)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--bidirectional", action="store_true")
    p.add_argument("--dense", type=int, default=0)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--optimizer", choices=("adam", "adadelta"), default=optimizer)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=epochs)


def build_parser() -> tuple[_Parser, dict]:
    parser = _Parser(prog="advseq", description="Attack and defend recurrent sequence classifiers.")
    parser.add_argument("--workdir", default=".", help="base directory for relative paths")
    parser.add_argument("--config", help="flat 'key = value' file supplying defaults for the command's flags")
    parser.add_argument("--jobs", type=int, default=1, help="parallelism cap (work runs in one process)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    cmds = {}

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0)
        cmds[name] = p
        return p

    p = add("synth", cmd_synth, "generate a synthetic two-class dataset")
    p.add_argument("--vocab-size", type=int, default=50)
    p.add_argument("--len-min", type=int, default=40)
    p.add_argument("--len-max", type=int, default=40)
    p.add_argument("--overlap", type=float, default=0.3)
    p.add_argument("--benign-concentration", type=float, default=0.85)
    p.add_argument("--malicious-concentration", type=float, default=0.85)
    p.add_argument("--n-benign", type=int, default=1000)
    p.add_argument("--n-malicious", type=int, default=1000)
    p.add_argument("--split", choices=("train", "validation", "test", "holdout"), default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", required=True, help="vocabulary file to write")

    p = add("train", cmd_train, "train a classifier, substitute, ensemble or generator")
    p.add_argument("--kind", choices=("classifier", "substitute", "ensemble", "generator"), default="classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    _model_flags(p)
    p.add_argument("--target", help="target checkpoint (substitute)")
    p.add_argument("--variant", choices=ensemble.ENSEMBLE_VARIANTS, default="regular")
    p.add_argument("--size", type=int, default=9)
    p.add_argument("--voting", choices=ensemble.VOTING, default="soft")
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--adversarial-fraction", type=float, default=0.5)
    p.add_argument("--adv-data", help="adversarial examples as a dataset keyed by source sample id")
    p.add_argument("--gen-class", choices=("benign", "malicious"), default="benign")
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--smoothing", type=float, default=0.1)

    p = add("embed", cmd_embed, "train token embeddings")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--radius", type=int, default=5)
    p.add_argument("--benign-only", action="store_true", help="train on benign traces only")

    p = add("squeeze", cmd_squeeze, "build a squeeze map and calibrate its threshold")
    p.add_argument("--embedding", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="training set for calibration")
    p.add_argument("--vocab", required=True)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("attack", cmd_attack, "attack malicious samples and log the insertions")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--variant", choices=attack.VARIANTS, default="whitebox")
    p.add_argument("--substitute")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--adv-out", help="also write evaded outputs as a dataset")

    p = add("signatures", cmd_signatures, "mine adversarial signatures, or scan inputs with them")
    p.add_argument("--vocab", required=True)
    p.add_argument("--adv")
    p.add_argument("--benign")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--p-threshold", type=float, default=1.0)
    p.add_argument("--sigs-threshold", type=int, default=1)
    p.add_argument("--detect", help="dataset to scan")
    p.add_argument("--signatures", help="signature file (with --detect)")
    p.add_argument("--out", required=True)

    p = add("defend", cmd_defend, "classify inputs through a defense")
    p.add_argument("--defense", choices=("none", "squeeze", "neighbor", "defgen", "ensemble", "signatures"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--model")
    p.add_argument("--squeeze-map")
    p.add_argument("--train-data")
    p.add_argument("--generators", nargs=2, metavar=("BENIGN", "MALICIOUS"))
    p.add_argument("--m-generated", type=int, default=50)
    p.add_argument("--ensemble")
    p.add_argument("--signatures")
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "run the full experiment table")
    p.add_argument("--plan")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a plan entry")
    p.add_argument("--out", help="CSV path (default: the plan's output)")
    return parser, cmds


def parse_args(argv) -> argparse.Namespace:
    parser, cmds = build_parser()
    pre = _Parser(add_help=False)
    pre.add_argument("--workdir", default=".")
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    command = next((a for a in rest if a in cmds), None)
    if known.config and command:
        path = _path(known, known.config)
        try:
            values = harness.read_kv_file(path)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        sp = cmds[command]
        dests = {a.dest: a for a in sp._actions if a.dest not in ("help", "func")}
        defaults = {}
        for key, raw in values.items():
            dest = key.replace("-", "_")
            if dest not in dests:
                raise UsageError(f"config key {key!r} is not a flag of '{command}'")
            act = dests[dest]
            if isinstance(act, argparse._StoreTrueAction):
                defaults[dest] = raw.lower() in ("1", "true", "yes")
            elif act.nargs in (2, "+", "*"):
                defaults[dest] = raw.split()
            else:
                try:
                    defaults[dest] = act.type(raw) if act.type else raw
                except ValueError:
                    raise UsageError(f"config key {key!r}: bad value {raw!r}") from None
        sp.set_defaults(**defaults)
        for a in sp._actions:
            if a.dest in defaults:
                a.required = False
    return parser.parse_args(argv)


def run_cli(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"advseq {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"advseq {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 2


def main() -> None:
    sys.exit(run_cli())
