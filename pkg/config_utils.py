"""
Experiment configuration for the correlation toolkit.

Configurations are KEY=VALUE files in the .env dialect. This module parses,
validates and serialises them and turns them into the model objects used by
the simulation and estimation code.
"""
import io
import logging
import os
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from dotenv import dotenv_values

from estimation import ScoringConfig, StudyConfig
from geometry import DetectorArray, SourceGeometry, SourceKind
from noise import NoiseModel
from statistics_utils import ReferenceScheme

logger = logging.getLogger(__name__)

PRESET_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'presets')
MAX_ORDER = 6
TRUE_WORDS = {'true', '1', 'yes', 'on'}
FALSE_WORDS = {'false', '0', 'no', 'off'}


class ConfigError(ValueError):
    """Invalid configuration, located by file and line."""

    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        self.message = message
        if path is None:
            super().__init__(message)
        else:
            location = f"{path}:{line}" if line else str(path)
            super().__init__(f"{location}: {message}")


def split_choices(value):
    return [v.strip() for v in value.split(",") if v.strip()]


def get_env_choices(var_name, default=None):
    value = os.getenv(var_name)
    if value:
        return split_choices(value)
    return default if default is not None else []


def _parse_bool(value):
    word = value.strip().lower()
    if word in TRUE_WORDS:
        return True
    if word in FALSE_WORDS:
        return False
    raise ValueError(f"expected true or false, got {value!r}")


def _parse_optional(cast):
    def parse(value):
        return None if value.strip() == '' else cast(value)
    return parse


def _parse_tuple(cast):
    def parse(value):
        return tuple(cast(v) for v in split_choices(value))
    return parse


def _format_optional(value):
    return '' if value is None else repr(value)


def _format_tuple(values):
    return ','.join(repr(v) for v in values)


def _format_bool(value):
    return 'true' if value else 'false'


@dataclass(frozen=True)
class ExperimentConfig:
    source_kind: str = 'disc'
    source_dimension_um: float = 100.0
    source_distance_m: float = 0.25
    angular_diameter_rad: Optional[float] = None
    pixel_count: int = 401
    pixel_pitch_um: float = 5.3
    wavelength_nm: float = 633.0
    mean_intensity: float = 1.0
    noise_nu: float = 0.5
    noise_sigma: float = 0.0
    orders: tuple = (2, 3, 4, 5)
    scheme: str = 'repeated'
    reference_pixel: Optional[int] = None
    separation: Optional[int] = None
    d_range: tuple = (1, 400, 1)
    sigma_range: tuple = (0.0, 0.05, 11)
    nu_list: tuple = (0.2, 0.5, 0.9)
    estimate_chi: bool = False
    frames: int = 50000
    repetitions: int = 1000
    seed: int = 20140601
    out_dir: str = 'results'
    threads: int = 1
    chi_prior: float = 0.02
    damping: bool = True
    max_iterations: int = 50
    tolerance: float = 1e-8
    start: str = 'guess'
    data_file: Optional[str] = None
    plot: bool = False
    storage_type: str = 'HBTF'

    def source_geometry(self):
        return SourceGeometry(SourceKind(self.source_kind), self.source_dimension_um * 1e-6,
                              self.source_distance_m, self.angular_diameter_rad)

    def detector_array(self):
        return DetectorArray(self.pixel_count, self.pixel_pitch_um * 1e-6, self.wavelength_nm * 1e-9)

    def noise_model(self):
        return NoiseModel(self.noise_nu, self.noise_sigma)

    def scoring_config(self):
        return ScoringConfig(max_iterations=self.max_iterations, tolerance=self.tolerance,
                             damping=self.damping)

    def study_config(self, **overrides):
        settings = dict(
            source=self.source_geometry(),
            array=self.detector_array(),
            noise=self.noise_model(),
            orders=self.orders,
            scheme=ReferenceScheme(self.scheme),
            reference_pixel=self.reference_pixel,
            separation=self.separation,
            mean_intensity=self.mean_intensity,
            frames=self.frames,
            repetitions=self.repetitions,
            seed=self.seed,
            estimate_chi=self.estimate_chi,
            chi_prior=self.chi_prior,
            scoring=self.scoring_config(),
            threads=self.threads,
            start=self.start,
        )
        settings.update(overrides)
        return StudyConfig(**settings)

    def d_values(self):
        """Inclusive range start..stop in steps of step."""
        start, stop, step = self.d_range
        return list(range(start, stop + 1, step))

    def sigma_values(self):
        start, stop, count = self.sigma_range
        return np.linspace(start, stop, int(count))


# key -> (field name, parser, formatter); dump order is the order of this table.
CONFIG_KEYS = {
    'SOURCE_KIND': ('source_kind', str.strip, str),
    'SOURCE_DIMENSION_UM': ('source_dimension_um', float, repr),
    'SOURCE_DISTANCE_M': ('source_distance_m', float, repr),
    'ANGULAR_DIAMETER_RAD': ('angular_diameter_rad', _parse_optional(float), _format_optional),
    'PIXEL_COUNT': ('pixel_count', int, repr),
    'PIXEL_PITCH_UM': ('pixel_pitch_um', float, repr),
    'WAVELENGTH_NM': ('wavelength_nm', float, repr),
    'MEAN_INTENSITY': ('mean_intensity', float, repr),
    'NOISE_NU': ('noise_nu', float, repr),
    'NOISE_SIGMA': ('noise_sigma', float, repr),
    'ORDERS': ('orders', _parse_tuple(int), _format_tuple),
    'SCHEME': ('scheme', str.strip, str),
    'REFERENCE_PIXEL': ('reference_pixel', _parse_optional(int), _format_optional),
    'SEPARATION': ('separation', _parse_optional(int), _format_optional),
    'D_RANGE': ('d_range', _parse_tuple(int), _format_tuple),
    'SIGMA_RANGE': ('sigma_range', _parse_tuple(float), _format_tuple),
    'NU_LIST': ('nu_list', _parse_tuple(float), _format_tuple),
    'ESTIMATE_CHI': ('estimate_chi', _parse_bool, _format_bool),
    'FRAMES': ('frames', int, repr),
    'REPETITIONS': ('repetitions', int, repr),
    'SEED': ('seed', int, repr),
    'OUT_DIR': ('out_dir', str.strip, str),
    'THREADS': ('threads', int, repr),
    'CHI_PRIOR': ('chi_prior', float, repr),
    'DAMPING': ('damping', _parse_bool, _format_bool),
    'MAX_ITERATIONS': ('max_iterations', int, repr),
    'TOLERANCE': ('tolerance', float, repr),
    'START': ('start', str.strip, str),
    'DATA_FILE': ('data_file', _parse_optional(str.strip), lambda v: '' if v is None else v),
    'PLOT': ('plot', _parse_bool, _format_bool),
    'STORAGE_TYPE': ('storage_type', str.strip, str),
}


def default_config():
    """Built-in defaults overlaid with the process environment."""
    config = ExperimentConfig()
    overrides = {}
    if os.getenv('HBT_OUT_DIR'):
        overrides['out_dir'] = os.getenv('HBT_OUT_DIR')
    if os.getenv('HBT_THREADS'):
        overrides['threads'] = int(os.getenv('HBT_THREADS'))
    if os.getenv('STORAGE_TYPE'):
        overrides['storage_type'] = os.getenv('STORAGE_TYPE')
    orders = get_env_choices('HBT_ORDERS')
    if orders:
        overrides['orders'] = tuple(int(n) for n in orders)
    return replace(config, **overrides)


def _first_violation(config):
    """(key, message) of the first invalid setting, or None."""
    checks = [
        ('SOURCE_KIND', config.source_kind in [k.value for k in SourceKind], "must be 'disc' or 'slit'"),
        ('SOURCE_DIMENSION_UM', config.source_dimension_um > 0, "must be positive"),
        ('SOURCE_DISTANCE_M', config.source_distance_m > 0, "must be positive"),
        ('ANGULAR_DIAMETER_RAD', config.angular_diameter_rad is None or config.angular_diameter_rad > 0,
         "must be positive when given"),
        ('PIXEL_COUNT', config.pixel_count >= 2, "must be at least 2"),
        ('PIXEL_PITCH_UM', config.pixel_pitch_um > 0, "must be positive"),
        ('WAVELENGTH_NM', config.wavelength_nm > 0, "must be positive"),
        ('MEAN_INTENSITY', config.mean_intensity > 0, "must be positive"),
        ('NOISE_NU', 0 < config.noise_nu <= 1, "must lie in (0, 1]"),
        ('NOISE_SIGMA', config.noise_sigma >= 0, "must be nonnegative"),
        ('ORDERS', len(config.orders) > 0 and all(2 <= n <= MAX_ORDER for n in config.orders),
         f"must list orders between 2 and {MAX_ORDER}"),
        ('SCHEME', config.scheme in [s.value for s in ReferenceScheme], "must be 'repeated' or 'distinct'"),
        ('REFERENCE_PIXEL', config.reference_pixel is None or 1 <= config.reference_pixel <= config.pixel_count,
         f"must lie in 1..{config.pixel_count}"),
        ('SEPARATION', config.separation is None or config.separation >= 1,
         "must be >= 1 (reference pixels must be distinct)"),
        ('D_RANGE', len(config.d_range) == 3 and config.d_range[0] >= 1 and config.d_range[2] >= 1
         and config.d_range[1] >= config.d_range[0],
         "must be start,stop,step with 1 <= start <= stop and step >= 1"),
        ('SIGMA_RANGE', len(config.sigma_range) == 3 and config.sigma_range[0] >= 0
         and config.sigma_range[1] >= config.sigma_range[0] and config.sigma_range[2] >= 1
         and float(config.sigma_range[2]).is_integer(),
         "must be start,stop,count with 0 <= start <= stop and integer count >= 1"),
        ('NU_LIST', len(config.nu_list) > 0 and all(0 < nu <= 1 for nu in config.nu_list),
         "must list efficiencies in (0, 1]"),
        ('FRAMES', config.frames >= 2, "must be at least 2"),
        ('REPETITIONS', config.repetitions >= 2, "must be at least 2"),
        ('SEED', 0 <= config.seed < 2 ** 64, "must be an unsigned 64-bit integer"),
        ('OUT_DIR', bool(config.out_dir), "must not be empty"),
        ('THREADS', config.threads >= 1, "must be at least 1"),
        ('CHI_PRIOR', config.chi_prior >= 0, "must be nonnegative"),
        ('MAX_ITERATIONS', config.max_iterations >= 1, "must be at least 1"),
        ('TOLERANCE', config.tolerance > 0, "must be positive"),
        ('START', config.start in ('guess', 'truth'), "must be 'guess' or 'truth'"),
        ('STORAGE_TYPE', config.storage_type in ('HBTF', 'CSV'), "must be 'HBTF' or 'CSV'"),
    ]
    for key, ok, message in checks:
        if not ok:
            return key, message
    return None


def validate_config(config):
    """
    Validate an experiment configuration.

    Returns:
        tuple: (is_valid, error_message)
    """
    violation = _first_violation(config)
    if violation:
        key, message = violation
        return False, f"{key} {message}"
    if config.source_dimension_um * 1e-6 > 0.01 * config.source_distance_m:
        logger.warning("source dimension is not small against its distance; "
                       "the paraxial coherence kernels lose accuracy")
    return True, ""


def _key_lines(text):
    lines = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        if line.startswith('export '):
            line = line[len('export '):]
        key = line.split('=', 1)[0].strip()
        if '=' not in line:
            raise ConfigError(None, number, f"expected KEY=VALUE, got {raw.strip()!r}")
        lines[key] = number
    return lines


def parse_config_text(text, path='<config>', base=None):
    """
    Parse KEY=VALUE text over a base configuration (defaults if omitted).

    Raises:
        ConfigError: with the line of the first unknown, malformed or invalid key
    """
    base = ExperimentConfig() if base is None else base
    try:
        lines = _key_lines(text)
    except ConfigError as exc:
        raise ConfigError(path, exc.line, exc.message) from None
    values = dotenv_values(stream=io.StringIO(text))
    overrides = {}
    for key, value in values.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(path, lines.get(key), f"unknown key {key}")
        name, parse, _ = CONFIG_KEYS[key]
        try:
            overrides[name] = parse('' if value is None else value)
        except ValueError as exc:
            raise ConfigError(path, lines.get(key), f"{key}: {exc}") from None
    config = replace(base, **overrides)
    violation = _first_violation(config)
    if violation:
        key, message = violation
        raise ConfigError(path, lines.get(key), f"{key} {message}")
    return config


def load_config(path, base=None):
    """Read and validate a configuration file."""
    with open(path, encoding='utf-8') as handle:
        text = handle.read()
    config = parse_config_text(text, path, default_config() if base is None else base)
    validate_config(config)
    return config


def dump_config(config):
    """Every key in a fixed order; parse_config_text inverts it exactly."""
    lines = []
    for key, (name, _, formatter) in CONFIG_KEYS.items():
        lines.append(f"{key}={formatter(getattr(config, name))}")
    return '\n'.join(lines) + '\n'


def preset_path(name):
    path = os.path.join(PRESET_DIR, f"{name}.env")
    if not os.path.exists(path):
        raise ConfigError(path, None, f"unknown preset {name!r}; available: {', '.join(available_presets())}")
    return path


def available_presets():
    if not os.path.isdir(PRESET_DIR):
        return []
    return sorted(f[:-len('.env')] for f in os.listdir(PRESET_DIR) if f.endswith('.env'))
