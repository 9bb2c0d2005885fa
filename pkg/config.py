"""
Run configuration: built-in defaults, a YAML file, --set overrides, then flags.

Environment variables (read from .env when present):
    OAR_OUT_DIR   output directory when --out is not given
    OAR_JOBS      worker count when --jobs is not given
    OAR_SEED      base seed when --seed is not given
    OAR_LOG_LEVEL root log level
"""

import copy
import logging
import os
import shutil
from datetime import datetime
from typing import Dict, Iterable, List, Optional, Tuple

import yaml
from dotenv import load_dotenv

from errors import ConfigError, OarError
from eval_harness import Cell, GridConfig
from krr import KernelConfig
from learners import LearnerKind
from nuisance import TrainingConfig
from regfun import RegKind, RegMode, RegSchedule
from second_stage import Injector, SecondStageSpec

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

SNAPSHOT_NAME = 'resolved_config.yaml'

DEFAULTS = {
    'seed': 0,
    'data': {
        'n': 250,
        'n_test': 1000,
        'b': 2.0,
        'standardize': False,
        'path': None,
        'test_fraction': 0.0,
        'x_cols': None,
        'a_col': 'a',
        'y_col': 'y',
        'cate_col': 'cate',
        'pi_col': 'pi',
    },
    'stage1': {
        'nuisance': 'estimated',
        'hidden_layers': 1,
        'width_factor': 2.0,
        'representation_factor': 2.0,
        'head_factor': 2.0,
        'lr': 0.005,
        'batch_size': 64,
        'epochs': 200,
        'weight_decay': 0.01,
        'trim_lo': 0.05,
        'n_folds': 1,
        'tune': False,
        'tune_folds': 5,
        'tune_samples': 50,
    },
    'stage2': {
        'target': 'mlp',
        'learner': 'DR',
        'injector': 'dropout',
        'kind': 'm',
        'mode': 'OAR',
        'base': 0.5,
        'gamma': None,
        'clip_alpha': 1.0,
        'hidden_width': None,
        'linear_target': False,
        'epochs': 200,
        'batch_size': 64,
        'lr': 0.005,
        'weight_decay': 0.0,
        'ema_kappa': 0.995,
        'seed': 0,
        'noise_scale': 'sqrt',
        'trimming': 'indicator',
        'inject_at': 'representation',
    },
    'krr': {
        'kernel': 'rbf',
        'bandwidth': 0.1,
    },
    'experiment': {
        'n_seeds': 40,
        'baseline': None,
        'cells': [],
    },
}

# Keys a grid cell may set besides the stage2 ones
CELL_KEYS = {'name', 'nuisance', 'kernel', 'bandwidth'}

# Types of keys whose default is None
OPTIONAL_TYPES = {'gamma': 0.0, 'hidden_width': 0}

# Adaptivity when stage2.gamma is left unset
DEFAULT_GAMMA = {'mlp': 1.0, 'krr': 0.9}


def env_str(name: str, default: str) -> str:
    value = os.getenv(name)
    return value if value not in (None, '') else default


def env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    if value in (None, ''):
        return default
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"environment variable {name} must be an integer, got '{value}'")


def _coerce(key: str, value, default):
    """Check a value against the type of its default"""
    if default is None:
        default = OPTIONAL_TYPES.get(key.split('.')[-1])
    if default is None or value is None:
        return value
    if key == 'data.b' and isinstance(value, list):
        return [_coerce(key, v, default) for v in value]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{key} must be a list, got {value!r}")
    return value


def set_value(config: Dict, dotted: str, value) -> None:
    """Assign section.key (or a top-level key) after checking it exists"""
    parts = dotted.split('.')
    if len(parts) == 1:
        key = parts[0]
        if key not in DEFAULTS or isinstance(DEFAULTS[key], dict):
            raise ConfigError(f"unknown config key '{dotted}'")
        config[key] = _coerce(dotted, value, DEFAULTS[key])
        return
    if len(parts) != 2:
        raise ConfigError(f"config keys have the form section.key, got '{dotted}'")
    section, key = parts
    if section not in DEFAULTS or not isinstance(DEFAULTS[section], dict):
        raise ConfigError(f"unknown config section '{section}'")
    if key not in DEFAULTS[section]:
        raise ConfigError(f"unknown config key '{dotted}'")
    config[section][key] = _coerce(dotted, value, DEFAULTS[section][key])


def merge(config: Dict, updates: Dict, origin: str) -> Dict:
    """Apply a nested mapping onto config, rejecting unknown keys"""
    if not isinstance(updates, dict):
        raise ConfigError(f"{origin}: expected a mapping at the top level")
    for key, value in updates.items():
        if isinstance(DEFAULTS.get(key), dict):
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"{origin}: section '{key}' must be a mapping")
            for inner, inner_value in value.items():
                set_value(config, f"{key}.{inner}", inner_value)
        else:
            set_value(config, str(key), value)
    return config


def parse_override(text: str) -> Tuple[str, object]:
    """'section.key=value' with the value typed by YAML"""
    if '=' not in text:
        raise ConfigError(f"override must look like section.key=value, got '{text}'")
    key, raw = text.split('=', 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override has an empty key: '{text}'")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse override value in '{text}': {e}")
    return key, value


def load_config(path: Optional[str] = None, overrides: Iterable[str] = (),
                seed: Optional[int] = None) -> Dict:
    """Defaults, then the YAML file, then overrides, then an explicit seed"""
    config = copy.deepcopy(DEFAULTS)
    config['seed'] = env_int('OAR_SEED', DEFAULTS['seed'])
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as file:
                content = yaml.safe_load(file)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}")
        if content is not None:
            merge(config, content, path)
    for text in overrides:
        key, value = parse_override(text)
        set_value(config, key, value)
    if seed is not None:
        config['seed'] = int(seed)
    return config


def get_timestamp() -> str:
    """Current timestamp for backup filenames"""
    return datetime.now().strftime("%Y%m%d_%H%M%S")


def write_snapshot(config: Dict, out_dir: str) -> str:
    """Write resolved_config.yaml, moving an existing one to a timestamped backup"""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, SNAPSHOT_NAME)
    if os.path.exists(path):
        stem, ext = os.path.splitext(SNAPSHOT_NAME)
        backup = os.path.join(out_dir, f"{stem}_{get_timestamp()}{ext}")
        shutil.move(path, backup)
        logger.info("previous snapshot moved to %s", backup)
    with open(path, 'w', encoding='utf-8') as file:
        yaml.safe_dump(config, file, sort_keys=False, default_flow_style=False)
    return path


def build_training_config(config: Dict) -> TrainingConfig:
    s1 = config['stage1']
    return TrainingConfig(
        hidden_layers=s1['hidden_layers'], width_factor=s1['width_factor'],
        representation_factor=s1['representation_factor'], head_factor=s1['head_factor'], lr=s1['lr'],
        batch_size=s1['batch_size'], epochs=s1['epochs'], weight_decay=s1['weight_decay'],
    )


def resolve_gamma(section: Dict) -> float:
    """Configured adaptivity, else the default for the target"""
    if section['gamma'] is not None:
        return section['gamma']
    return DEFAULT_GAMMA[section['target']]


def build_second_stage_spec(config: Dict, section: Optional[Dict] = None) -> SecondStageSpec:
    """SecondStageSpec from the stage2 section, or from an explicit cell mapping"""
    s2 = config['stage2'] if section is None else section
    if s2['target'] not in DEFAULT_GAMMA:
        raise ConfigError(f"stage2.target must be 'mlp' or 'krr', got '{s2['target']}'")
    try:
        reg = RegSchedule(
            kind=RegKind(s2['kind']), base=s2['base'], gamma=resolve_gamma(s2), mode=RegMode(s2['mode']),
            trim_lo=config['stage1']['trim_lo'], clip_alpha=s2['clip_alpha'],
        )
        spec = SecondStageSpec(
            learner=LearnerKind(s2['learner']), reg=reg, injector=Injector(s2['injector']),
            hidden_width=s2['hidden_width'], linear_target=s2['linear_target'], epochs=s2['epochs'],
            batch_size=s2['batch_size'], lr=s2['lr'], weight_decay=s2['weight_decay'],
            ema_kappa=s2['ema_kappa'], seed=s2['seed'], noise_scale=s2['noise_scale'],
            trimming=s2['trimming'], inject_at=s2['inject_at'],
        )
        # Kernel ridge never perturbs, so the dropout range of base does not apply
        return spec.validate(injected=s2['target'] == 'mlp')
    except (ValueError, OarError) as e:
        # Enum lookups raise plain ValueError on unknown names
        raise ConfigError(f"invalid stage2 settings: {e}")


def build_kernel(section: Dict) -> KernelConfig:
    try:
        return KernelConfig(section['kernel'], section['bandwidth'])
    except OarError as e:
        raise ConfigError(f"invalid krr settings: {e}")


def _b_values(config: Dict) -> List[float]:
    b = config['data']['b']
    values = b if isinstance(b, list) else [b]
    if not values:
        raise ConfigError("data.b must name at least one overlap level")
    return [float(v) for v in values]


def _cell_from_mapping(config: Dict, entry: Dict, b: float, suffix: str) -> Cell:
    if not isinstance(entry, dict) or 'name' not in entry:
        raise ConfigError(f"every experiment cell needs a name, got {entry!r}")
    unknown = set(entry) - set(DEFAULTS['stage2']) - CELL_KEYS
    if unknown:
        raise ConfigError(f"cell '{entry['name']}' has unknown keys {sorted(unknown)}")
    section = dict(config['stage2'])
    kernel = dict(config['krr'])
    for key, value in entry.items():
        if key in DEFAULTS['stage2']:
            section[key] = _coerce(f"cell.{key}", value, DEFAULTS['stage2'][key])
        elif key in DEFAULTS['krr']:
            kernel[key] = _coerce(f"cell.{key}", value, DEFAULTS['krr'][key])
    try:
        return Cell(
            name=str(entry['name']) + suffix, stage=build_second_stage_spec(config, section),
            target=section['target'], nuisance=entry.get('nuisance', config['stage1']['nuisance']),
            kernel=build_kernel(kernel), b=b,
        )
    except OarError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e))


def build_cells(config: Dict) -> List[Cell]:
    """One cell per configured entry and overlap level; the stage2 section alone when no cells are listed"""
    entries = config['experiment']['cells'] or [{'name': 'default'}]
    b_values = _b_values(config)
    cells = []
    for b in b_values:
        suffix = f" b={b:g}" if len(b_values) > 1 else ''
        cells.extend(_cell_from_mapping(config, entry, b, suffix) for entry in entries)
    return cells


def build_grid(config: Dict) -> GridConfig:
    data, s1 = config['data'], config['stage1']
    try:
        return GridConfig(
            cells=tuple(build_cells(config)), n_train=data['n'], n_test=data['n_test'],
            stage1=build_training_config(config), trim_lo=s1['trim_lo'], n_folds=s1['n_folds'],
            standardize=data['standardize'], tune=s1['tune'], tune_folds=s1['tune_folds'],
            tune_samples=s1['tune_samples'], base_seed=config['seed'],
        )
    except OarError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e))


def baseline_name(config: Dict, cells: List[Cell]) -> str:
    """Configured baseline, else the first cell"""
    name = config['experiment']['baseline']
    if name is None:
        return cells[0].name
    return name
