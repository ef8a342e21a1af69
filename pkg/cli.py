# cli.py
"""Command-line front end: ``run``, ``table1`` and ``eoc``."""
import argparse
import logging
import sys

from src.experiments import (EOC_LADDER, EOC_REFERENCE_DT, EOC_REFERENCE_H, EXIT_CONFIG, EXIT_FAILED, TABLE1_DT,
                             TABLE1_H, EocStudy, RunConfig, cmd_eoc, cmd_run, cmd_table1, load_config, presets)
from src.schemes import SCHEME_IDS
from utils.data_loader import parse_number
from utils.errors import ChemotaxisError, ConfigError

logger = logging.getLogger('cli')


def _float_list(text):
    try:
        return tuple(parse_number(item) for item in text.split(',') if item.strip())
    except Exception:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of numbers, got {text!r}") from None


def _number(text):
    return _float_list(text)[0]


def build_parser():
    parser = argparse.ArgumentParser(prog='chemotaxis-fe',
                                     description="Finite-element schemes for 1D chemotaxis with consumption.")
    parser.add_argument('--verbose', action='store_true', help="log per-step telemetry")
    sub = parser.add_subparsers(dest='command', required=True)

    run_p = sub.add_parser('run', help="run one configuration")
    source = run_p.add_mutually_exclusive_group(required=True)
    source.add_argument('--preset', choices=presets())
    source.add_argument('--config', help="key = value configuration file")
    run_p.add_argument('--scheme', choices=SCHEME_IDS)
    run_p.add_argument('--h', type=_number)
    run_p.add_argument('--dt', type=_number)
    run_p.add_argument('--T', type=_number)
    run_p.add_argument('--out', default=None)

    t1 = sub.add_parser('table1', help="minimum of u for every scheme, dt and h")
    t1.add_argument('--dt-list', type=_float_list, default=TABLE1_DT)
    t1.add_argument('--h-list', type=_float_list, default=TABLE1_H)
    t1.add_argument('--schemes', type=lambda s: tuple(x.strip() for x in s.split(',')), default=SCHEME_IDS)
    t1.add_argument('--preset', choices=presets(), default='example-ii')
    t1.add_argument('--jobs', type=int, default=None, help="worker count (default: THREADS or 1)")
    t1.add_argument('--out', default='output')
    t1.add_argument('--pdf', action='store_true')

    eoc = sub.add_parser('eoc', help="errors and convergence rates over a mesh ladder")
    eoc.add_argument('--scheme', choices=SCHEME_IDS, required=True)
    eoc.add_argument('--self-reference', action='store_true', help="compute the reference with the tested scheme")
    eoc.add_argument('--published-reference', action='store_true', help="reference h = 1e-5 and dt = 1e-9 (long)")
    eoc.add_argument('--ladder', type=_float_list, default=EOC_LADDER)
    eoc.add_argument('--reference-h', type=_number, default=EOC_REFERENCE_H)
    eoc.add_argument('--dt', type=_number, default=EOC_REFERENCE_DT)
    eoc.add_argument('--preset', choices=presets(), default='example-iv')
    eoc.add_argument('--reference', help="load the reference from a .joblib file or a u_*.csv snapshot")
    eoc.add_argument('--save-reference', help="store the computed reference as .joblib")
    eoc.add_argument('--strict', action='store_true', help="require ladder meshes nested in the reference")
    eoc.add_argument('--jobs', type=int, default=None)
    eoc.add_argument('--out', default='output')
    eoc.add_argument('--pdf', action='store_true')
    return parser


def configure_logging(verbose):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _run_config(args):
    overrides = dict(h=args.h, dt=args.dt, T=args.T, out_dir=args.out)
    if args.config:
        return load_config(args.config, scheme_id=args.scheme, **overrides)
    return RunConfig.from_preset(args.preset, args.scheme or 'uv', **overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        if args.command == 'run':
            return cmd_run(_run_config(args))
        if args.command == 'table1':
            unknown = [s for s in args.schemes if s not in SCHEME_IDS]
            if unknown:
                raise ConfigError(f"unknown scheme(s): {', '.join(unknown)}")
            cmd_table1(args.out, args.dt_list, args.h_list, args.schemes, args.preset, args.jobs, args.pdf)
            return 0
        options = dict(ladder=args.ladder, self_reference=args.self_reference, preset=args.preset,
                       reference_path=args.reference, save_reference_path=args.save_reference,
                       strict_nesting=args.strict)
        study = (EocStudy.published(args.scheme, **options) if args.published_reference
                 else EocStudy(args.scheme, dt=args.dt, reference_h=args.reference_h, **options))
        cmd_eoc(study, args.out, args.jobs, args.pdf)
        return 0
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (ChemotaxisError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_FAILED


if __name__ == '__main__':
    sys.exit(main())
