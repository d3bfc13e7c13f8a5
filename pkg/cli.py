"""
Command-line front end.

    python cli.py study --preset table_1 --out results/table_1
    python cli.py scan-d --config my.env --plot

Every command writes CSV tables (and SVG charts with --plot) to the output
directory and prints the written paths.
"""
import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from config_utils import (
    ConfigError,
    available_presets,
    default_config,
    load_config,
    preset_path,
    validate_config,
)
from correlations import g_n_scheme1
from estimation import crb_scan, estimate, monte_carlo_study
from geometry import coherence_zero_separations
from noise import NoiseModel, noise_case_matrix, noise_moment_matrix
from simulator import apply_detector_noise, sample_correlation, sample_thermal_fields
from statistics_utils import DetectionScheme, MeasurementModel, ReferenceScheme, crb
from storage import get_storage, save_table

logger = logging.getLogger(__name__)

FRAME_EXTENSIONS = {'HBTF': '.hbtf', 'CSV': '.csv'}


def _out(config, name):
    return os.path.join(config.out_dir, name)


def _scheme_for(config, order):
    if config.scheme == ReferenceScheme.REPEATED.value:
        return DetectionScheme.repeated(order, config.pixel_count, config.reference_pixel)
    if config.separation is None:
        raise ConfigError(None, None, "SEPARATION is required for the distinct-reference scheme")
    return DetectionScheme.distinct(order, config.pixel_count, config.separation, config.reference_pixel)


def cmd_simulate(config, args):
    """Write one noisy FrameSet and its metadata sidecar."""
    source, array = config.source_geometry(), config.detector_array()
    frameset = sample_thermal_fields(source, array, config.mean_intensity, config.frames, config.seed)
    frameset = apply_detector_noise(frameset, config.noise_model())
    path = config.data_file or _out(config, 'frames' + FRAME_EXTENSIONS[config.storage_type])
    storage = get_storage(config.storage_type, path)
    storage.save(frameset)
    logger.info("wrote %d frames of %d pixels", frameset.frame_count, frameset.pixel_count)
    return [path, storage.metadata_path]


def cmd_study(config, args):
    """Monte Carlo study of the estimator against the Cramer-Rao bound."""
    report = monte_carlo_study(config.study_config(), progress=not args.quiet)
    paths = [
        save_table(report.summary, _out(config, 'study.csv')),
        save_table(report.trials, _out(config, 'study_trials.csv')),
        save_table(report.nuisance, _out(config, 'study_nuisance.csv')),
    ]
    if config.plot:
        from visualization_utils import create_study_chart
        paths.append(create_study_chart(report.summary, _out(config, 'study.svg')))
    if not report.valid:
        raise RuntimeError("study invalid: more than 1% of trials failed (see study_trials.csv)")
    return paths


def cmd_scan_d(config, args):
    """CRB standard deviation of a over the reference separation range."""
    d_values = config.d_values()
    study = config.study_config(scheme=ReferenceScheme.DISTINCT,
                                separation=config.separation or d_values[0])
    table = crb_scan(study, d_values)
    zeros = coherence_zero_separations(config.source_geometry(), config.detector_array(), 2)
    nearest = np.rint(zeros).astype(int)
    table['coherence_zero'] = table['d'].isin(nearest).astype(int)
    paths = [save_table(table, _out(config, 'scan_d.csv'))]
    if config.plot:
        from visualization_utils import create_scan_d_chart
        paths.append(create_scan_d_chart(table, _out(config, 'scan_d.svg'), zeros))
    return paths


def cmd_scan_sigma(config, args):
    """CRB variance of a against the efficiency spread, for each mean efficiency."""
    rows = []
    for nu in config.nu_list:
        for sigma in config.sigma_values():
            noise = NoiseModel(nu, float(sigma))
            study = config.study_config(noise=noise, estimate_chi=False)
            truth = study.truth()
            for order in config.orders:
                variance = crb(truth, study.measurement_model(order))[0]
                rows.append({'nu': nu, 'sigma': float(sigma), 'n': order, 'var_crb_um2': variance * 1e12})
    table = pd.DataFrame(rows, columns=['nu', 'sigma', 'n', 'var_crb_um2'])
    paths = [save_table(table, _out(config, 'scan_sigma.csv'))]
    if config.plot:
        from visualization_utils import create_scan_sigma_chart
        paths.append(create_scan_sigma_chart(table, _out(config, 'scan_sigma.svg')))
    return paths


def cmd_curves(config, args):
    """Analytic G^(n)(x, s, ..., s) along the scan axis."""
    source, array = config.source_geometry(), config.detector_array()
    reference = config.reference_pixel or config.pixel_count // 2
    positions = array.positions()
    s = array.positions([reference])[0]
    table = pd.DataFrame({
        'pixel': array.pixel_indices,
        'separation_um': (positions - s) * 1e6,
    })
    for order in config.orders:
        table[f'g{order}'] = g_n_scheme1(positions, s, order, config.mean_intensity, source, array)
    paths = [save_table(table, _out(config, 'curves.csv'))]
    if config.plot:
        from visualization_utils import create_curves_chart
        paths.append(create_curves_chart(table, _out(config, 'curves.svg')))
    return paths


def cmd_estimate(config, args):
    """Estimate the source dimension from one stored FrameSet."""
    path = args.data or config.data_file
    if not path:
        raise ConfigError(None, None, "estimate needs --data or DATA_FILE")
    frameset = get_storage(config.storage_type, path).load()
    array = config.detector_array()
    if frameset.pixel_count != array.pixel_count:
        raise ValueError(f"{path} has {frameset.pixel_count} pixels, configuration says {array.pixel_count}")
    source = config.source_geometry()
    rows = []
    for order in config.orders:
        scheme = _scheme_for(config, order)
        model = MeasurementModel(scheme, source, array, frameset.frame_count,
                                 chi=config.noise_model().chi, estimate_chi=config.estimate_chi)
        data = sample_correlation(frameset, scheme)
        result = estimate(data, model, config.scoring_config(), chi_prior=config.chi_prior)
        theta = result.theta_hat
        rows.append({
            'n': order,
            'a_um': theta.a * 1e6,
            'i_eff': theta.i_eff,
            'chi': theta.chi,
            'crb_a_um2': result.crb[0] * 1e12,
            'iterations': result.iterations,
            'converged': result.converged,
            'log_likelihood': result.log_likelihood,
        })
    return [save_table(pd.DataFrame(rows), _out(config, 'estimate.csv'))]


def cmd_noise_matrix(config, args):
    """Case letters and values of the 2n-th noise moments over all pixel pairs."""
    order = config.orders[0]
    scheme = _scheme_for(config, order)
    array = config.detector_array()
    scan = array.positions(scheme.scan_pixels)
    refs = array.positions(scheme.expanded_references)
    values = noise_moment_matrix(scan, refs, config.noise_model())
    cases = noise_case_matrix(scan, refs)
    pixels = np.asarray(scheme.scan_pixels)
    table = pd.DataFrame({
        'i': np.repeat(pixels, pixels.size),
        'j': np.tile(pixels, pixels.size),
        'case': cases.ravel(),
        'moment': values.ravel(),
    })
    paths = [save_table(table, _out(config, 'noise_matrix.csv'))]
    if config.plot:
        from visualization_utils import create_noise_heatmap
        frame = pd.DataFrame(values, index=pixels, columns=pixels)
        paths.append(create_noise_heatmap(frame, _out(config, 'noise_matrix.svg'), f'n = {order}'))
    return paths


COMMANDS = {
    'simulate': cmd_simulate,
    'study': cmd_study,
    'scan-d': cmd_scan_d,
    'scan-sigma': cmd_scan_sigma,
    'curves': cmd_curves,
    'estimate': cmd_estimate,
    'noise-matrix': cmd_noise_matrix,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog='hbt-correlations',
        description='Source-size estimation from higher-order intensity correlations of thermal light.',
    )
    parser.add_argument('command', choices=sorted(COMMANDS))
    parser.add_argument('--config', help='KEY=VALUE configuration file')
    parser.add_argument('--preset', help=f"shipped preset ({', '.join(available_presets())})")
    parser.add_argument('--seed', type=int, help='master seed (unsigned 64-bit)')
    parser.add_argument('--out', help='output directory')
    parser.add_argument('--threads', type=int, help='worker processes for studies')
    parser.add_argument('--data', help='FrameSet file for the estimate command')
    parser.add_argument('--plot', action='store_true', help='also write SVG charts')
    parser.add_argument('--quiet', action='store_true', help='no progress bar')
    return parser


def resolve_config(args):
    """Flags over config file over preset over environment over defaults."""
    config = default_config()
    if args.preset:
        config = load_config(preset_path(args.preset), base=config)
    if args.config:
        config = load_config(args.config, base=config)
    overrides = {}
    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.out:
        overrides['out_dir'] = args.out
    if args.threads is not None:
        overrides['threads'] = args.threads
    if args.plot:
        overrides['plot'] = True
    config = replace(config, **overrides)
    is_valid, error_message = validate_config(config)
    if not is_valid:
        raise ConfigError('command line', None, error_message)
    return config


def main(argv=None):
    load_dotenv()
    logging.basicConfig(
        level=os.getenv('HBT_LOG_LEVEL', 'INFO').upper(),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        paths = COMMANDS[args.command](config, args)
    except (ValueError, OSError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return 1
    for path in paths:
        print(path)
    return 0


if __name__ == '__main__':
    sys.exit(main())
