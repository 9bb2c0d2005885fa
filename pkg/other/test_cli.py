import os

import pytest
import yaml

from cli import build_parser, dispatch
from eval_harness import RunResult, append_results

QUICK = ['--set', 'data.n=60', '--set', 'data.n_test=40', '--set', 'stage1.epochs=3', '--set', 'stage2.epochs=2']


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ('OAR_SEED', 'OAR_JOBS', 'OAR_OUT_DIR'):
        monkeypatch.delenv(name, raising=False)


def _rpehe_lines(text):
    return [line for line in text.splitlines() if 'rPEHE' in line]


def test_parser_lists_every_command():
    help_text = build_parser().format_help()
    for command in ('generate', 'fit', 'experiment', 'check', 'summarize'):
        assert command in help_text


def test_help_exits_cleanly(capsys):
    assert dispatch(['--help']) == 0
    assert 'COMMAND' in capsys.readouterr().out


@pytest.mark.parametrize('argv', [
    [], ['train'], ['fit', '--bogus'], ['generate', '--n', 'many'],
    ['fit', '--set', 'stage2.nonsense=1'], ['fit', '--jobs', '0'],
])
def test_usage_errors(argv, tmp_path):
    assert dispatch(argv + ['--out', str(tmp_path)] if argv else argv) == 1


def test_generate(tmp_path, capsys):
    out = str(tmp_path)
    assert dispatch(['generate', '--n', '30', '--b', '2', '--seed', '4', '--out', out]) == 0
    assert os.path.exists(os.path.join(out, 'synthetic_n30_b2_seed4.csv'))
    assert os.path.exists(os.path.join(out, 'synthetic_n30_b2_seed4.json'))
    with open(os.path.join(out, 'resolved_config.yaml'), 'r', encoding='utf-8') as file:
        snapshot = yaml.safe_load(file)
    assert snapshot['data']['n'] == 30 and snapshot['seed'] == 4
    assert 'Treatment rate' in capsys.readouterr().out


def test_fit_writes_outputs(tmp_path, capsys):
    out = str(tmp_path)
    assert dispatch(['fit', '--out', out] + QUICK) == 0
    for name in ('resolved_config.yaml', 'nuisance.csv', 'trace.csv'):
        assert os.path.exists(os.path.join(out, name)), name
    assert len(_rpehe_lines(capsys.readouterr().out)) == 2


def test_fit_with_tuned_stage_one(tmp_path, capsys):
    argv = ['fit', '--out', str(tmp_path), '--set', 'stage1.tune=true', '--set', 'stage1.tune_folds=2',
            '--set', 'stage1.tune_samples=1'] + QUICK
    assert dispatch(argv) == 0
    assert '2 candidates' in capsys.readouterr().out


def test_fit_gamma_zero_modes_agree(tmp_path, capsys):
    printed = []
    for mode in ('CR', 'OAR', 'dOAR'):
        out = str(tmp_path / mode)
        argv = ['fit', '--out', out, '--set', 'stage2.gamma=0', '--set', f"stage2.mode={mode}"] + QUICK
        assert dispatch(argv) == 0
        printed.append(_rpehe_lines(capsys.readouterr().out))
    assert printed[0] == printed[1] == printed[2]


def test_fit_krr_with_oracle_nuisances(tmp_path, capsys):
    out = str(tmp_path)
    argv = ['fit', '--out', out, '--set', 'stage2.target=krr', '--set', 'stage2.base=0.01',
            '--set', 'stage1.nuisance=oracle'] + QUICK
    assert dispatch(argv) == 0
    assert os.path.exists(os.path.join(out, 'krr.csv'))
    assert 'oracle nuisances' in capsys.readouterr().out


def test_fit_on_csv(tmp_path, capsys):
    data_dir = str(tmp_path / 'data')
    assert dispatch(['generate', '--n', '50', '--seed', '2', '--out', data_dir]) == 0
    capsys.readouterr()
    csv_path = os.path.join(data_dir, 'synthetic_n50_b2_seed2.csv')
    out = str(tmp_path / 'fit')
    assert dispatch(['fit', '--data', csv_path, '--out', out] + QUICK) == 0
    lines = _rpehe_lines(capsys.readouterr().out)
    assert len(lines) == 1 and 'in-sample' in lines[0]
    with open(os.path.join(out, 'resolved_config.yaml'), 'r', encoding='utf-8') as file:
        assert yaml.safe_load(file)['data']['path'] == csv_path


def test_fit_on_missing_csv(tmp_path):
    assert dispatch(['fit', '--data', str(tmp_path / 'none.csv'), '--out', str(tmp_path)]) == 2


def test_experiment_and_summarize(tmp_path, capsys):
    config_path = str(tmp_path / 'grid.yaml')
    with open(config_path, 'w', encoding='utf-8') as file:
        yaml.safe_dump({
            'data': {'n': 50, 'n_test': 30},
            'stage1': {'epochs': 2},
            'stage2': {'epochs': 2},
            'experiment': {'n_seeds': 2, 'baseline': 'CR', 'cells': [
                {'name': 'CR', 'mode': 'CR'}, {'name': 'OAR', 'mode': 'OAR'},
            ]},
        }, file)
    out = str(tmp_path / 'run')
    assert dispatch(['experiment', '--config', config_path, '--out', out]) == 0
    with open(os.path.join(out, 'results.jsonl'), 'r', encoding='utf-8') as file:
        assert len(file.readlines()) == 4
    assert os.path.exists(os.path.join(out, 'summary.csv'))
    capsys.readouterr()

    assert dispatch(['summarize', '--out', out, '--baseline', 'OAR']) == 0
    text = capsys.readouterr().out
    assert 'Read 4 results' in text
    assert 'OAR *' in text


def test_summarize_errors(tmp_path):
    assert dispatch(['summarize', '--results', str(tmp_path / 'none.jsonl'), '--out', str(tmp_path)]) == 1
    path = str(tmp_path / 'results.jsonl')
    append_results(path, [RunResult('fp', 'A', 0, rpehe_out=1.0)])
    assert dispatch(['summarize', '--results', path, '--baseline', 'B', '--out', str(tmp_path)]) == 2
    assert dispatch(['summarize', '--results', path, '--out', str(tmp_path)]) == 0


def test_check_reports_every_suite(tmp_path, capsys):
    code = dispatch(['check', '--draws', '2000', '--out', str(tmp_path)])
    assert code in (0, 2)
    text = capsys.readouterr().out
    assert 'kernel mean zero' in text
    assert 'log divergence equality' in text
