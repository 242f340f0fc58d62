#!/usr/bin/env python3
"""
PIM operator benchmark harness.

Runs operator microbenchmarks, parameter sweeps, transfer timelines and
the TPC-H style queries on the simulated PIM system and writes
machine-readable metrics (CSV with a versioned header, or JSON).

Usage:
  python pimbench.py bench --op selection --tasklets 1..24
  python pimbench.py bench --op order --dpus 8,16,32 --fixed-size
  python pimbench.py query 6 --sf 0.01
  python pimbench.py timeline --mode naive --out naive.json
  python pimbench.py sweep crossover --out crossover.csv
  python pimbench.py gen --sf 0.1 --data data/sf0.1
  python pimbench.py calibrate --save instance/pimsim.conf

Exit status: 0 success, 1 verification failure or simulation error,
2 configuration or usage error.
"""

import argparse
import json
import logging
import os
import sys

from dotenv import load_dotenv

from pimsim.config import load_config, write_config
from pimsim.errors import ConfigError, PimError
from pimsim.experiments import DEFAULT_SEED, OPERATORS, TIMELINE_MODES
from pimsim.jobs import SWEEP_NAMES, execute, metrics_csv, timeline_json
from pimsim.queries import QUERY_IDS
from pimsim.table import save_tables
from pimsim.tpch import GenSpec, generate

load_dotenv('.flaskenv')

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def int_range(text):
    """'1..24', '1,2,4' or '8' -> list of ints."""
    try:
        if '..' in text:
            lo, hi = text.split('..', 1)
            values = list(range(int(lo), int(hi) + 1))
        else:
            values = [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a range a..b or a comma list, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return values


def build_parser():
    parser = argparse.ArgumentParser(
        prog='pimbench',
        description='Simulated PIM database operator benchmarks',
        formatter_class=argparse.RawDescriptionHelpFormatter
    )
    parser.add_argument('--config', default=os.environ.get('PIMSIM_CONFIG'),
                        help='machine/kernel INI file (default: $PIMSIM_CONFIG, else desk defaults)')
    parser.add_argument('--seed', type=int, default=DEFAULT_SEED, help=f'data seed (default: {DEFAULT_SEED})')
    parser.add_argument('--out', help='write metrics (or the timeline) here instead of stdout')
    parser.add_argument('--format', choices=('csv', 'json'), default='csv', help='metrics format (default: csv)')
    parser.add_argument('--record', action='store_true', help='store the run in the results database')
    parser.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    sub = parser.add_subparsers(dest='command', required=True)

    bench = sub.add_parser('bench', help='operator microbenchmark')
    bench.add_argument('--op', choices=OPERATORS, required=True)
    bench.add_argument('--variant', help='hash/sort, quicksort/mergesort, hash/sort-merge')
    bench.add_argument('--rows', type=int, default=4096, help='rows per DPU (default: 4096)')
    bench.add_argument('--dpus', type=int_range, default=[1], help='DPU counts, e.g. 8,16,32')
    bench.add_argument('--tasklets', type=int_range, help='tasklet counts, e.g. 1..24')
    bench.add_argument('--param', type=int, help='groups (aggregation), outer ratio (join), buckets (partition)')
    bench.add_argument('--fixed-size', action='store_true',
                       help='keep the total input of the first DPU count (strong scaling)')
    bench.add_argument('--mode', choices=('naive', 'optimized'), default='optimized')
    bench.add_argument('--reps', type=int, default=1, help='repetitions per point')

    query = sub.add_parser('query', help='run and verify a query')
    query.add_argument('qid', type=int, choices=QUERY_IDS)
    query.add_argument('--sf', type=float, default=0.01, help='scale factor (default: 0.01)')
    query.add_argument('--data', help='directory of generated tables (default: generate)')
    query.add_argument('--mode', choices=('naive', 'optimized'), default='optimized')
    query.add_argument('--join', choices=('hash', 'sort-merge'), default='hash')
    query.add_argument('--aggregation', choices=('hash', 'sort'), default='hash')
    query.add_argument('--dpus', type=int)
    query.add_argument('--tasklets', type=int)
    query.add_argument('--result', help='write the result table as CSV')
    query.add_argument('--timeline', help='write the timeline as JSON')

    timeline = sub.add_parser('timeline', help='transfer timeline of a global order redistribution')
    timeline.add_argument('--mode', choices=TIMELINE_MODES, default='scatter_pooled')
    timeline.add_argument('--rows', type=int, default=8192, help='rows per DPU (default: 8192)')
    timeline.add_argument('--dpus', type=int)

    sweep = sub.add_parser('sweep', help='parameter sweep')
    sweep.add_argument('name', choices=SWEEP_NAMES)
    sweep.add_argument('--op', choices=OPERATORS, help='operator (ipc, strong, weak)')
    sweep.add_argument('--rows', type=int, help='rows (per DPU, or total for strong scaling)')

    gen = sub.add_parser('gen', help='generate TPC-H style tables')
    gen.add_argument('--sf', type=float, default=0.01)
    gen.add_argument('--data', required=True, help='output directory')

    cal = sub.add_parser('calibrate', help='fit the DMA cost to bandwidth targets')
    cal.add_argument('--read-bw', type=float, help='MRAM read bandwidth target, bytes/s')
    cal.add_argument('--write-bw', type=float, help='MRAM write bandwidth target, bytes/s')
    cal.add_argument('--save', help='write the calibrated config (default: --config)')
    return parser


def setup_logging(verbose=False):
    """Helm log shipping when HELM_SERVICE_URL is set, console logging otherwise; returns the Helm logger."""
    level = logging.DEBUG if verbose else logging.WARNING
    helm_url = os.environ.get('HELM_SERVICE_URL')
    if helm_url:
        from app.helm_logger import init_helm_logger
        helm = init_helm_logger('pimbench', helm_url, capture_flask_logs=False)
        if verbose:
            logging.getLogger('pimsim').setLevel(logging.DEBUG)
        return helm
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    return None


def run_params(args):
    """The params dict of a run command, as the results service stores it."""
    if args.command == 'bench':
        return {
            'op': args.op, 'variant': args.variant, 'rows': args.rows, 'dpus': args.dpus,
            'tasklets': args.tasklets, 'param': args.param, 'fixed_size': args.fixed_size, 'mode': args.mode,
            'repetitions': args.reps, 'seed': args.seed,
        }
    if args.command == 'query':
        return {
            'qid': args.qid, 'sf': args.sf, 'data': args.data, 'mode': args.mode, 'join': args.join,
            'aggregation': args.aggregation, 'dpus': args.dpus, 'tasklets': args.tasklets, 'seed': args.seed,
        }
    if args.command == 'timeline':
        return {'mode': args.mode, 'rows': args.rows, 'dpus': args.dpus, 'seed': args.seed}
    if args.command == 'sweep':
        return {'name': args.name, 'op': args.op, 'rows': args.rows, 'seed': args.seed}
    return {'read_target': args.read_bw, 'write_target': args.write_bw}


def emit(text, path=None):
    if path:
        with open(path, 'w', newline='') as f:
            f.write(text)
        print(f"✓ Wrote {path}")
    else:
        sys.stdout.write(text)


def cmd_gen(args):
    tables = generate(GenSpec(args.sf, args.seed))
    paths = save_tables(tables, args.data)
    print(f"✓ Generated {len(paths)} tables at sf={args.sf:g} into {args.data}")
    for name, table in sorted(tables.items()):
        print(f"   {name}: {table.row_count} rows")
    return EXIT_OK


def record_run(kind, params, result=None, error=None):
    from app import app
    from app.runner import record_run as store

    with app.app_context():
        run_id = store(kind, params, result, triggered_by='pimbench', error=error)
    print(f"📦 Recorded run {run_id}")
    return run_id


def cmd_run(args, machine, kernel):
    kind = args.command
    params = run_params(args)
    try:
        result = execute(kind, params, machine, kernel)
    except PimError as exc:
        if args.record:
            record_run(kind, params, error=str(exc))
        raise

    if kind == 'timeline':
        emit(timeline_json(result.timeline) + '\n', args.out)
    elif args.format == 'json':
        emit(json.dumps(result.records, indent=2) + '\n', args.out)
    else:
        emit(metrics_csv(result.records), args.out)

    if kind == 'query':
        if args.result:
            emit(result.result_csv, args.result)
        if args.timeline:
            emit(timeline_json(result.timeline) + '\n', args.timeline)
        summary = result.output
        glyph = '✅' if result.passed else '❌'
        print(f"{glyph} q{args.qid} {result.verdict}: {summary['rows']} rows, "
              f"kernel {summary['kernel_seconds'] * 1e3:.3f} ms, makespan {summary['makespan'] * 1e3:.3f} ms",
              file=sys.stderr)
        for name, value in sorted(summary.items()):
            if name.endswith('_seconds') and name != 'kernel_seconds':
                print(f"   {name[:-len('_seconds')]}: {value * 1e3:.3f} ms", file=sys.stderr)
        if not result.passed:
            print(f"   first difference: {summary.get('difference')}", file=sys.stderr)
    elif kind == 'calibrate':
        target = args.save or args.config
        if target:
            write_config(target, result.machine, kernel)
            print(f"✓ Calibrated config saved to {target}", file=sys.stderr)
        print(f"✓ dma_alpha {result.output['dma_alpha']}: "
              f"{result.output['dma_bandwidth'] / 1e6:.1f} MB/s at 2048 B", file=sys.stderr)

    if args.record:
        record_run(kind, params, result)
    return EXIT_OK if result.passed else EXIT_FAILED


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    helm = setup_logging(args.verbose)
    try:
        if args.command == 'gen':
            return cmd_gen(args)
        machine, kernel = load_config(args.config)
        return cmd_run(args, machine, kernel)
    except ConfigError as exc:
        print(f"✗ Configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PimError as exc:
        print(f"✗ {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    finally:
        if helm:
            helm.shutdown()


if __name__ == '__main__':
    sys.exit(main())
