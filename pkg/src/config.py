"""
Run configuration: `key = value` lines with `#` comments.

Every accepted key and its default lives in DEFAULTS; the default's type is
the key's type. render_config writes the effective configuration back in
DEFAULTS order, and parsing that text yields the same configuration.
"""
import logging

from errors import ConfigError, StorageError

logger = logging.getLogger(__name__)

DEFAULTS = {
    # network
    'architecture': 'toy_vgg4',
    'block_style': 'plain',
    't_steps': 4,
    'seed': 0,
    # optimization
    'epochs': 40,
    'batch_size': 64,
    'learning_rate': 0.1,
    'momentum': 0.9,
    'lr_schedule': 'constant',
    'l1_lambda': 1e-5,
    'precision': 'f64',
    # neurons
    'neuron_kind': 'LIF',
    'v_th': 1.0,
    'v_reset': 0.0,
    'tau_m': 2.0,
    'alpha': 4.0,
    # structure learning
    'prune_p': 0.0,
    'prune_q': 0.05,
    'interval_epochs': 1,
    'min_channels': 1,
    'prune_mode': 'prune_and_regrow',
    'exact_importance_pass': False,
    # bookkeeping
    'group': '',
    'registry': '',
    # data; empty paths select the synthetic task
    'data_train': '',
    'data_test': '',
    'synth_classes': 10,
    'synth_train_per_class': 500,
    'synth_test_per_class': 200,
    'synth_hw': 16,
    'synth_channels': 1,
    'synth_noise': 0.1,
    'synth_seed': 0,
}

CHOICES = {
    'block_style': ('plain', 'post_activation_residual', 'pre_activation_residual'),
    'lr_schedule': ('constant', 'cosine'),
    'precision': ('f64', 'f32'),
    'neuron_kind': ('IF', 'LIF'),
    'prune_mode': ('prune_and_regrow', 'only_prune', 'random_prune'),
}

_TRUE = ('true', 'yes', 'on', '1')
_FALSE = ('false', 'no', 'off', '0')


def _coerce(key, raw):
    default = DEFAULTS[key]
    value = raw.strip()
    try:
        if isinstance(default, bool):
            if value.lower() in _TRUE:
                return True
            if value.lower() in _FALSE:
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(
            f"Invalid value '{value}' for '{key}' (expected {type(default).__name__})",
            key=key,
            value=value
        ) from None
    return value


def parse_config(text, source='<config>'):
    """Defaults overlaid with the text's settings. Unknown keys are an error."""
    config = dict(DEFAULTS)
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"{source}:{number}: expected 'key = value'", line=number)
        key, raw = line.split('=', 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"Unknown config key '{key}'", key=key, line=number)
        config[key] = _coerce(key, raw)
    validate_config(config)
    return config


def load_config(path):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise StorageError(f"Could not read config {path}: {e}", path=str(path)) from e
    return parse_config(text, source=path)


def validate_config(config):
    for key, allowed in CHOICES.items():
        if config[key] not in allowed:
            raise ConfigError(f"'{key}' must be one of {', '.join(allowed)}", key=key, value=config[key])
    positive = ('t_steps', 'epochs', 'batch_size', 'interval_epochs', 'min_channels',
                'synth_classes', 'synth_train_per_class', 'synth_test_per_class', 'synth_hw',
                'synth_channels')
    for key in positive:
        if config[key] < 1:
            raise ConfigError(f"'{key}' must be at least 1", key=key, value=config[key])
    if not config['learning_rate'] > 0:
        raise ConfigError("'learning_rate' must be positive", key='learning_rate', value=config['learning_rate'])
    if config['l1_lambda'] < 0:
        raise ConfigError("'l1_lambda' must be non-negative", key='l1_lambda', value=config['l1_lambda'])
    if config['synth_noise'] < 0:
        raise ConfigError("'synth_noise' must be non-negative", key='synth_noise', value=config['synth_noise'])
    if bool(config['data_train']) != bool(config['data_test']):
        raise ConfigError("'data_train' and 'data_test' must be set together", key='data_test')


def _render_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(config):
    return ''.join(f'{key} = {_render_value(config[key])}\n' for key in DEFAULTS)
