import argparse
import json
import os
import sys
import time

# Single-threaded BLAS keeps runs bit-reproducible.
for _var in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS'):
    os.environ.setdefault(_var, '1')

import numpy as np

from MetaHal import Config
from MetaHal import Engine
from MetaHal import Errors
from MetaHal import Plot
from MetaHal.Errors import Logger
from MetaHal.Metrics import evaluate
from MetaHal.Nets import load_checkpoint
from MetaHal.Tensor import set_debug, set_precision
from MetaHal.Verify import Verifier

class ArgumentParser(argparse.ArgumentParser):
    """argparse that exits with the usage error code instead of 2."""
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write('{}: error: {}\n'.format(self.prog, message))
        sys.exit(Errors.ExitCode.UsageError)

def gen_data(args, logger):
    """Generates and saves the synthetic benchmark."""
    cfg = Config.load(args.config)
    out = args.out or cfg.paths.data_dir
    counts = Engine.write_benchmark(cfg.synth, args.seed, out)
    logger.info('Wrote benchmark to', out)
    for name, count in counts.items():
        print('{:<18}{:>6}'.format(name, count))

def _train_once(cfg, bench, run_dir, logger, args, split_seed=None):
    Config.echo(cfg, run_dir)
    data = Engine.training_data(bench, cfg.trainer.mode, split_seed=split_seed)
    trainer = Engine.Trainer(cfg.trainer, data, run_dir, logger, progress=args.progress)
    student, teacher = trainer.train(resume=args.resume)
    print(student.render_table())
    logger.info('Teacher mean Dice {:.4f}'.format(teacher.mean_dice))
    return student

def train(args, logger):
    """Trains one ablation arm, or `--repeats` seeds of it with fresh few-shot draws."""
    cfg = Config.load(args.config)
    overrides = {}
    if args.mode:
        overrides['mode'] = args.mode
    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.epochs is not None:
        overrides['epochs'] = args.epochs
    if overrides:
        cfg = Config.replace(cfg, trainer=overrides)
    run_dir = Config.resolve_run_dir(cfg, args.out)
    bench = Engine.load_benchmark(args.data or cfg.paths.data_dir)
    if args.repeats <= 1:
        _train_once(cfg, bench, run_dir, logger, args)
        return
    scores = []
    for repeat in range(args.repeats):
        seed = cfg.trainer.seed + repeat
        repeat_cfg = Config.replace(cfg, trainer={'seed': seed})
        logger.info('Repeat', repeat + 1, 'of', args.repeats, 'seed', seed)
        report = _train_once(repeat_cfg, bench, os.path.join(run_dir, 'seed_{}'.format(seed)), logger, args,
                             split_seed=seed)
        scores.append(report.mean_dice)
    summary = {'mode': cfg.trainer.mode, 'seeds': [cfg.trainer.seed + r for r in range(args.repeats)],
               'mean_dice': scores, 'mean': float(np.mean(scores)), 'std': float(np.std(scores))}
    with open(os.path.join(run_dir, 'summary.json'), 'w') as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    print('mean Dice over {} repeats: {:.4f} +- {:.4f}'.format(args.repeats, summary['mean'], summary['std']))

def _checkpoint_mode(path):
    state = os.path.join(os.path.dirname(path), 'state.json')
    if os.path.exists(state):
        with open(state) as f:
            return json.load(f).get('mode')
    return None

def eval_checkpoint(args, logger):
    """Scores a saved segmenter on the held-out target images."""
    path = args.checkpoint
    if os.path.isdir(path):
        path = os.path.join(path, 'student.ckpt')
    params = load_checkpoint(path)
    mode = args.mode or _checkpoint_mode(path) or 'full'
    data = Engine.training_data(Engine.load_benchmark(args.data), mode)
    model = 'teacher' if params.name == 'teacher' else 'student'
    report = evaluate(params, model, data.test, data.test_labels)
    table = report.render_table()
    print(table)
    if args.report:
        base = os.path.splitext(args.report)[0]
        with open(base + '.json', 'w') as f:
            f.write(report.to_json())
        with open(base + '.csv', 'w') as f:
            f.write(report.to_csv())
        logger.info('Wrote report to', base + '.json', 'and', base + '.csv')
    if args.copy:
        import pyperclip
        pyperclip.copy(table)
        sys.stdout.write('Report copied to clipboard.\n')

def verify(args, logger):
    verifier = Verifier(logger, seed=args.seed, instances=args.instances)
    try:
        checks = verifier.run(args.suite)
    finally:
        for check in verifier.checks:
            print(check.line())
    print('{} checks passed'.format(len(checks)))

def plot(args, logger):
    for path in Plot.plot_run(args.run_dir, args.out or os.path.join(args.run_dir, 'plots')):
        logger.info('Wrote', path)
        print(path)

def build_parser():
    parser = ArgumentParser(description='Few-shot domain adaptation by meta-learned hallucination on a synthetic benchmark')
    parser.add_argument('-d', '--debug', type=int, default=Logger.WARN, help='The severity level of the logger (1=Info, 2=Warning, 3=Debug)')
    parser.add_argument('-t', '--time', action='store_true', help='Outputs the time elapsed')
    parser.add_argument('--precision', type=int, choices=(32, 64), default=32, help='Floating-point width of all tensors')
    parser.add_argument('--check-finite', action='store_true', help='Debug: checks every op output for NaN/Inf')
    commands = parser.add_subparsers(dest='command', required=True, parser_class=ArgumentParser)

    gen = commands.add_parser('gen-data', help='Generate the synthetic benchmark')
    gen.add_argument('--config', help='JSON run config')
    gen.add_argument('--out', help='Output directory (default: paths.data_dir)')
    gen.add_argument('--seed', type=int, default=0, help='Generation and few-shot split seed')
    gen.set_defaults(func=gen_data)

    tr = commands.add_parser('train', help='Train one ablation arm')
    tr.add_argument('--config', help='JSON run config')
    tr.add_argument('--mode', choices=Engine.MODES, help='Ablation mode (overrides the config)')
    tr.add_argument('--out', help='Run directory (overrides {} and the config)'.format(Config.RUN_DIR_ENV))
    tr.add_argument('--data', help='Benchmark directory (default: paths.data_dir)')
    tr.add_argument('--seed', type=int, help='Trainer seed (overrides the config)')
    tr.add_argument('--epochs', type=int, help='Epoch count (overrides the config)')
    tr.add_argument('--repeats', type=int, default=1, help='Train consecutive seeds, each with its own few-shot draw')
    tr.add_argument('--resume', action='store_true', help='Continue from the last checkpoint of the run directory')
    tr.add_argument('--progress', action='store_true', help='Show a progress bar over epochs')
    tr.set_defaults(func=train)

    ev = commands.add_parser('eval', help='Evaluate a checkpoint on the held-out target images')
    ev.add_argument('--checkpoint', required=True, help='Checkpoint file or checkpoint directory')
    ev.add_argument('--data', required=True, help='Benchmark directory')
    ev.add_argument('--mode', choices=Engine.MODES, help='Evaluation domain by mode (default: from the checkpoint)')
    ev.add_argument('--report', help='Write the report as JSON and CSV next to this path')
    ev.add_argument('-c', '--copy', action='store_true', help='Copies the report table to clipboard')
    ev.set_defaults(func=eval_checkpoint)

    ve = commands.add_parser('verify', help='Run the property suites')
    ve.add_argument('--suite', choices=('all',) + Verifier.SUITES, default='all')
    ve.add_argument('--seed', type=int, default=0)
    ve.add_argument('--instances', type=int, default=20, help='Random instances per gradient check')
    ve.set_defaults(func=verify)

    pl = commands.add_parser('plot', help='Render figures for a run (or a directory of runs)')
    pl.add_argument('--run-dir', required=True)
    pl.add_argument('--out', help='Output directory (default: <run-dir>/plots)')
    pl.set_defaults(func=plot)
    return parser

def main(argv=None):
    args = build_parser().parse_args(argv)
    logger = Logger(log_level=args.debug)
    start = time.time()
    try:
        set_precision(args.precision)
        set_debug(args.check_finite)
        args.func(args, logger)
    except Errors.NumericalError as ex:
        sys.stderr.write('Numerical abort: {}\n'.format(ex))
        return Errors.ExitCode.NumericalAbort
    except (Errors.MetaHalError, OSError) as ex:
        sys.stderr.write('Error: {}\n'.format(ex))
        return Errors.ExitCode.UsageError
    finally:
        set_debug(False)
    if args.time:
        print('Time Elapsed: {}s'.format(round(time.time() - start, 2)))
    return Errors.ExitCode.Ok

if __name__ == '__main__':
    sys.exit(main())
