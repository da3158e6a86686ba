"""Command-line entry point (``reidattack``).

Exit codes: 0 success, 1 invalid usage/configuration/input, 2 runtime failure.
"""
import argparse
import csv
import sys
from pathlib import Path

from ..artifacts import AttackArtifact
from ..data import export_directory_dataset
from ..defense import DEFAULT_RATES, defense_sweep, write_sweep_csv
from ..exceptions import ConfigError, DatasetError, ReIDAttackError
from ..metrics import evaluate_reid
from ..misrank import DeepMisRanking, attack_query_set_dmr
from ..model import ReIDVictim
from ..pfgsm import attack_query_set_pfgsm
from .config import load_config, validate_order
from .experiment import (METHOD_LABELS, RESULT_COLUMNS, build_bundle, run_combined_attack,
                         run_experiment)
from .report import emit_report

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--config", help="experiment config file (YAML); default: shipped default.cfg")
    p.add_argument("--seed", type=int, help="override the config's master seed")


def _need(path, what):
    if path is None:
        raise ConfigError(f"missing required input: {what}")
    if not Path(path).exists():
        raise ConfigError(f"{what} not found: {path}")
    return Path(path)


def build_parser():
    parser = _Parser(prog="reidattack", description="Adversarial attacks on person re-ID.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth", help="write the synthetic dataset as a directory of PNGs")
    _common(p)
    p.add_argument("--output", required=True)

    p = sub.add_parser("train", help="train the victim model")
    _common(p)
    p.add_argument("--output", required=True, help="checkpoint path")

    attack = sub.add_parser("attack", help="run an attack")
    asub = attack.add_subparsers(dest="attack", parser_class=_Parser, required=True)
    p = asub.add_parser("pfgsm")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--output", required=True, help="artifact directory")
    p = asub.add_parser("dmr-train")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--output", required=True, help="attacker checkpoint path")
    p.add_argument("--history", help="loss-history CSV path")
    for name in ("dmr", "combined"):
        p = asub.add_parser(name)
        _common(p)
        p.add_argument("--model")
        p.add_argument("--attacker")
        p.add_argument("--output", required=True, help="artifact directory")
        if name == "combined":
            p.add_argument("--order", help="comma-separated, e.g. pfgsm,dmr")

    p = sub.add_parser("eval", help="evaluate clean or attacked queries")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--artifact", help="attack artifact directory (default: clean queries)")
    p.add_argument("--method", help="method label for the output row")
    p.add_argument("--output", help="CSV path (default: stdout)")

    defend = sub.add_parser("defend", help="inference-dropout defense")
    dsub = defend.add_subparsers(dest="defend", parser_class=_Parser, required=True)
    p = dsub.add_parser("sweep")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--artifact", action="append", default=[], metavar="NAME=DIR",
                   help="attack condition; repeatable")
    p.add_argument("--rates", help="comma-separated dropout rates")
    p.add_argument("--passes", type=int)
    p.add_argument("--output", required=True, help="sweep CSV path")

    p = sub.add_parser("run", help="full experiment")
    _common(p)
    p.add_argument("--output", help="output directory (default: config output_dir)")
    p.add_argument("--fresh", action="store_true", help="ignore finished stages")

    p = sub.add_parser("report", help="(re)build report.md and plots")
    _common(p)
    p.add_argument("--manifest", required=True, help="manifest.json of a run")
    return parser


def _config(args):
    return load_config(args.config).with_overrides(seed=args.seed)


def _victim(args):
    return ReIDVictim.load(_need(args.model, "model checkpoint (--model)"))


def _floats(text, what):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated numbers, got {text!r}") from None


def _write_rows(rows, path):
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        writer.writerows(rows)
    finally:
        if path:
            fh.close()


def _dispatch(args):
    cmd = args.command
    if cmd == "report":
        manifest = _need(args.manifest, "manifest")
        for path in emit_report(manifest.parent):
            print(path)
        return
    cfg = _config(args)
    if cmd == "run":
        result = run_experiment(cfg, args.output, resume=not args.fresh)
        print(f"wrote {result.output_dir}")
        return
    if cmd == "synth":
        if cfg.dataset.kind != "synthetic":
            raise ConfigError("synth needs dataset.kind: synthetic")
        export_directory_dataset(build_bundle(cfg), args.output)
        print(f"wrote {args.output}")
        return
    bundle = build_bundle(cfg)
    if cmd == "train":
        victim = ReIDVictim(**cfg.model.estimator_params(cfg.seed)).fit(
            bundle.images("train"), bundle.person_ids("train"))
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        victim.save(args.output)
        print(f"wrote {args.output}")
        return
    if cmd == "eval":
        victim = _victim(args)
        override, method = None, args.method or "NoAttack"
        if args.artifact:
            art = AttackArtifact.load(_need(args.artifact, "artifact directory"))
            override = art.perturbed
            method = args.method or METHOD_LABELS.get(art.method, art.method)
        rep = evaluate_reid(victim, bundle, cfg.protocol.to_protocol(), query_override=override)
        _write_rows([rep.row(cfg.dataset.label, method)], args.output)
        return
    if cmd == "defend":
        victim = _victim(args)
        attacks = {"NoAttack": None}
        for spec in args.artifact:
            name, sep, path = spec.partition("=")
            if not sep or not name:
                raise ConfigError(f"--artifact expects NAME=DIR, got {spec!r}")
            attacks[name] = AttackArtifact.load(_need(path, f"artifact directory for {name}"))
        rates = _floats(args.rates, "--rates") if args.rates else list(cfg.defense.rates or
                                                                      DEFAULT_RATES)
        rows = defense_sweep(victim, bundle, attacks, rates=rates,
                             protocol=cfg.protocol.to_protocol(),
                             passes=args.passes or cfg.defense.passes, seed=cfg.seed)
        write_sweep_csv(rows, args.output)
        print(f"wrote {args.output}")
        return
    # attack subcommands
    victim = _victim(args)
    pf_cfg = cfg.pfgsm.to_config(cfg.seed)
    if args.attack == "pfgsm":
        art = attack_query_set_pfgsm(victim, bundle, pf_cfg, n_jobs=cfg.n_jobs)
    elif args.attack == "dmr-train":
        attacker = DeepMisRanking(victim=victim, **cfg.misrank.estimator_params(cfg.seed)).fit(
            bundle.images("train"), bundle.person_ids("train"))
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        attacker.save(args.output)
        if args.history:
            attacker.write_history(args.history)
        print(f"wrote {args.output}")
        return
    else:
        order = (validate_order(args.order.split(",")) if getattr(args, "order", None)
                 else tuple(cfg.combined.order))
        attacker = None
        if args.attack == "dmr" or "dmr" in order:
            attacker = DeepMisRanking.load(_need(args.attacker, "attacker checkpoint (--attacker)"),
                                           victim)
        if args.attack == "dmr":
            art = attack_query_set_dmr(attacker, bundle)
        else:
            art = run_combined_attack(victim, bundle, pf_cfg, attacker, order, cfg.n_jobs)
    art.save(args.output)
    print(f"wrote {args.output} (mean MS-SSIM {art.mean_ms_ssim:.4f})")


def cli_main(argv=None):
    """Run the CLI; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_INVALID
    try:
        _dispatch(args)
    except (ConfigError, DatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ReIDAttackError, OSError, RuntimeError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(cli_main())
