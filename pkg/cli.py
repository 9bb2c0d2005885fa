"""
Command-line entry point.

    python cli.py generate --n 250 --b 2 --seed 7
    python cli.py fit --config configs/fit_example.yaml
    python cli.py experiment --config configs/synthetic_experiment.yaml --jobs 4
    python cli.py check
    python cli.py summarize --results runs/results.jsonl --baseline "DR dropout CR"

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional

import numpy as np

from config import (
    baseline_name, build_grid, build_kernel, build_second_stage_spec, build_training_config, env_int,
    env_str, load_config, write_snapshot,
)
from dataset import (
    CsvSchema, Dataset, SyntheticConfig, generate_synthetic, load_csv, save_csv, split, standardize,
    treatment_rate_by_bin,
)
from errors import ConfigError, OarError, UsageError
from eval_harness import (
    format_summary, load_results, rpehe, rpehe_by_overlap, run_experiment, stage_seed, summarize,
    write_summary_csv,
)
from identities import run_all_checks
from krr import fit_krr_oar, predict_krr, save_krr
from neuralnet import save_params
from nuisance import (
    export_nuisance_csv, fit_nuisance, oracle_nuisance, save_models, select_training_config,
)
from second_stage import export_trace_csv, fit_target, predict

logger = logging.getLogger(__name__)

SEPARATOR = "=" * 60


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting on bad arguments"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def setup_logging():
    level = env_str('OAR_LOG_LEVEL', 'INFO').upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )


def build_parser() -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument('--config', help='YAML config file')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='override one config value (repeatable)')
    common.add_argument('--out', help='output directory (default $OAR_OUT_DIR or runs)')
    common.add_argument('--seed', type=int, help='base seed (default $OAR_SEED or the config seed)')
    common.add_argument('--jobs', type=int, help='worker processes (default $OAR_JOBS or 1)')

    parser = CliParser(prog='cli.py', description='Overlap-adaptive regularization for CATE meta-learners')
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True

    generate = commands.add_parser('generate', parents=[common], help='write a synthetic dataset as CSV')
    generate.add_argument('--n', type=int, help='number of rows (default data.n)')
    generate.add_argument('--b', type=float, help='overlap knob, larger is less overlap (default data.b)')

    fit = commands.add_parser('fit', parents=[common], help='fit one configuration end to end')
    fit.add_argument('--data', help='CSV dataset instead of synthetic data')

    commands.add_parser('experiment', parents=[common], help='multi-seed grid sweep plus summary')

    check = commands.add_parser('check', parents=[common], help='run the numerical identity suites')
    check.add_argument('--draws', type=int, help='Monte Carlo draws per instance (default 100000)')

    summary = commands.add_parser('summarize', parents=[common], help='aggregate a results file')
    summary.add_argument('--results', help='JSON-lines results (default OUT/results.jsonl)')
    summary.add_argument('--baseline', help='baseline configuration name')
    return parser


def resolve(args) -> Dict:
    """Config dict plus the output directory and worker count"""
    config = load_config(args.config, args.overrides, args.seed)
    out_dir = args.out or env_str('OAR_OUT_DIR', 'runs')
    jobs = args.jobs if args.jobs is not None else env_int('OAR_JOBS', 1)
    if jobs == 0:
        raise ConfigError("--jobs must be nonzero")
    return {'config': config, 'out_dir': out_dir, 'jobs': jobs}


def cmd_generate(args, config: Dict, out_dir: str) -> int:
    if args.n is not None:
        config['data']['n'] = args.n
    if args.b is not None:
        config['data']['b'] = args.b
    b = config['data']['b']
    if isinstance(b, list):
        b = b[0]
    n, seed = config['data']['n'], config['seed']

    print(f"\n🚀 Generating synthetic data: n={n}, b={b:g}, seed={seed}")
    ds = generate_synthetic(SyntheticConfig(n, b, seed))
    path = os.path.join(out_dir, f"synthetic_n{n}_b{b:g}_seed{seed}.csv")
    sidecar = save_csv(ds, path, config={'n': n, 'b': b})
    write_snapshot(config, out_dir)
    print(f"✅ Dataset saved: {path} ({ds.n} rows)")
    print(f"📁 Sidecar: {sidecar}")

    print("\n📊 Treatment rate by covariate bin:")
    edges = np.linspace(-3.0, 3.0 + b, 9)
    for row in treatment_rate_by_bin(ds, edges):
        print(f"   [{row['lo']:>6.2f}, {row['hi']:>6.2f})  n={row['n']:>4}  "
              f"rate={row['rate']:.3f} ± {row['se']:.3f}  oracle={row['oracle']:.3f}")
    return 0


def _fit_data(config: Dict):
    """Train and test splits; the test split is None when the CSV is used whole"""
    data = config['data']
    path = data['path']
    if path:
        schema = CsvSchema(
            x_cols=tuple(data['x_cols'] or ()), a_col=data['a_col'], y_col=data['y_col'],
            oracle_cate_col=data['cate_col'], oracle_pi_col=data['pi_col'],
        )
        ds = load_csv(path, schema)
        if data['test_fraction'] > 0:
            train, test = split(ds, data['test_fraction'], config['seed'])
        else:
            train, test = ds, None
    else:
        b = data['b'][0] if isinstance(data['b'], list) else data['b']
        total = data['n'] + data['n_test']
        ds = generate_synthetic(SyntheticConfig(total, b, config['seed']))
        train, test = split(ds, data['n_test'] / total, config['seed'])
    if data['standardize']:
        parts = standardize(train, *([test] if test is not None else []))
        train, test = parts[0], (parts[1] if test is not None else None)
    return train, test


def _report(label: str, estimates: np.ndarray, ds: Optional[Dataset]) -> Optional[float]:
    if ds is None or ds.oracle_cate is None:
        return None
    value = rpehe(estimates, ds.oracle_cate)
    print(f"📊 rPEHE {label}: {value:.6f}")
    if ds.oracle_pi is not None:
        low = rpehe_by_overlap(estimates, ds.oracle_cate, ds.oracle_pi)['low']
        print(f"   low-overlap rows: {low:.6f}")
    return value


def cmd_fit(args, config: Dict, out_dir: str) -> int:
    if args.data:
        config['data']['path'] = args.data
    seed = config['seed']
    s1 = config['stage1']
    train, test = _fit_data(config)
    write_snapshot(config, out_dir)
    print(f"\n🚀 Fitting on {train.n} rows ({train.d} covariates), seed {seed}")

    cfg = build_training_config(config)
    if s1['nuisance'] == 'oracle':
        nuis = oracle_nuisance(train, s1['trim_lo'])
        print("✅ Stage 1: oracle nuisances")
    else:
        prop_cfg = cfg
        if s1['tune']:
            tuned = select_training_config(train, cfg, s1['tune_folds'], seed, s1['tune_samples'])
            cfg, prop_cfg = tuned.outcome, tuned.propensity
            print(f"📋 Stage 1 tuning: {len(tuned.scores)} candidates, outcome widths {cfg.target_units(train.d)}, "
                  f"propensity width {prop_cfg.hidden_width(train.d)}")
        fit = fit_nuisance(train, cfg, seed, s1['trim_lo'], s1['n_folds'], propensity_cfg=prop_cfg)
        nuis = fit.estimates
        if len(fit.propensity_models) == 1:
            save_models(fit.propensity_models[0], fit.outcome_models[0], os.path.join(out_dir, 'stage1'))
        print(f"✅ Stage 1: {int(nuis.trim.sum())}/{nuis.n} rows inside the trimming band")
    export_nuisance_csv(nuis, os.path.join(out_dir, 'nuisance.csv'))

    stage = build_second_stage_spec(config).with_units(cfg.target_units(train.d))
    if config['stage2']['target'] == 'krr':
        model = fit_krr_oar(train, nuis, stage.learner, stage.reg, build_kernel(config['krr']))
        save_krr(model, os.path.join(out_dir, 'krr'))
        est_in = predict_krr(model, train.x)
        est_out = predict_krr(model, test.x) if test is not None else None
    else:
        stage = replace(stage, seed=stage_seed(seed, stage.seed))
        target = fit_target(stage, train, nuis)
        export_trace_csv(target, os.path.join(out_dir, 'trace.csv'))
        save_params(target.params, target.spec, os.path.join(out_dir, 'target'))
        est_in = predict(target, train.x)
        est_out = predict(target, test.x) if test is not None else None
    print(f"✅ Stage 2: {config['stage2']['learner']} {config['stage2']['mode']} "
          f"{config['stage2']['injector'] if config['stage2']['target'] == 'mlp' else 'krr'}")

    print(SEPARATOR)
    if est_out is not None:
        _report('out-of-sample', est_out, test)
    _report('in-sample', est_in, train)
    print(SEPARATOR)
    print(f"💾 Outputs in {out_dir}")
    return 0


def _print_summary(results, baseline: str, out_dir: str) -> None:
    rows = summarize(results, baseline)
    print("\n" + SEPARATOR)
    print("📊 rPEHE (out-of-sample) over seeds, * marks the baseline")
    print(SEPARATOR)
    print(format_summary(rows, baseline))
    path = os.path.join(out_dir, 'summary.csv')
    write_summary_csv(rows, path)
    print(f"\n💾 Summary saved: {path}")


def cmd_experiment(args, config: Dict, out_dir: str, jobs: int) -> int:
    grid = build_grid(config)
    n_seeds = config['experiment']['n_seeds']
    baseline = baseline_name(config, list(grid.cells))
    results_path = os.path.join(out_dir, 'results.jsonl')
    write_snapshot(config, out_dir)

    print(f"\n🚀 Experiment: {len(grid.cells)} cells x {n_seeds} seeds, {jobs} job(s)")
    print(f"📁 Results: {results_path}")
    results = run_experiment(grid, n_seeds, jobs, results_path)
    failed = [r for r in results if r.error is not None]
    if failed:
        print(f"⚠️  {len(failed)} cell runs failed:")
        for r in failed[:10]:
            print(f"   seed {r.seed} {r.name}: {r.error}")
    _print_summary(results, baseline, out_dir)
    return 0


def cmd_check(args, config: Dict, out_dir: str) -> int:
    print("\n🚀 Running identity suites")
    print(SEPARATOR)
    results = run_all_checks(config['seed'], args.draws)
    for result in results:
        status = "✅" if result.passed else "❌"
        print(f"{status} {result.name:<32} {result.detail}")
    print(SEPARATOR)
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"❌ {len(failed)} of {len(results)} suites failed")
        return 2
    print(f"✅ All {len(results)} suites passed")
    return 0


def cmd_summarize(args, config: Dict, out_dir: str) -> int:
    path = args.results or os.path.join(out_dir, 'results.jsonl')
    if not os.path.exists(path):
        raise UsageError(f"results file not found: {path}")
    results = load_results(path)
    print(f"📋 Read {len(results)} results from {path}")
    baseline = args.baseline or config['experiment']['baseline']
    if baseline is None:
        if not results:
            raise UsageError("results file is empty")
        baseline = results[0].name
    _print_summary(results, baseline, out_dir)
    return 0


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Parse argv, run one subcommand, return the exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        resolved = resolve(args)
        config, out_dir, jobs = resolved['config'], resolved['out_dir'], resolved['jobs']
        if args.command == 'generate':
            return cmd_generate(args, config, out_dir)
        if args.command == 'fit':
            return cmd_fit(args, config, out_dir)
        if args.command == 'experiment':
            return cmd_experiment(args, config, out_dir, jobs)
        if args.command == 'check':
            return cmd_check(args, config, out_dir)
        return cmd_summarize(args, config, out_dir)
    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else 0
    except (UsageError, ConfigError) as e:
        parser.print_usage(sys.stderr)
        print(f"❌ {e}", file=sys.stderr)
        return 1
    except (OarError, OSError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return 2


def main():
    setup_logging()
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
