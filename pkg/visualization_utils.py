"""
Static SVG renderings of the result tables.

CSV files are the results; these charts are a convenience. Output is
deterministic: fixed SVG hash salt and no date metadata.
"""
import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt
import seaborn as sns

from storage import ensure_parent_dir

matplotlib.rcParams['svg.hashsalt'] = 'hbt-correlations'


def _save(fig, path):
    ensure_parent_dir(path)
    fig.savefig(path, format='svg', bbox_inches='tight', metadata={'Date': None})
    plt.close(fig)
    return path


def create_curves_chart(df, path):
    """G^(n)(x) against separation from the reference pixel, one line per order."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for column in [c for c in df.columns if c.startswith('g')]:
        ax.plot(df['separation_um'], df[column], label=column.replace('g', 'G^(') + ')')
    ax.set_xlabel('Separation x - s (um)')
    ax.set_ylabel('Intensity correlation')
    ax.legend()
    return _save(fig, path)


def create_scan_d_chart(df, path, zero_separations=()):
    """CRB standard deviation of a against reference separation d."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for n, group in df.groupby('n'):
        ax.plot(group['d'], group['std_dev_crb_um'], label=f'n = {n}')
    for d in zero_separations:
        ax.axvline(d, color='grey', linewidth=0.8)
    ax.set_xlabel('Reference separation d (pixels)')
    ax.set_ylabel('CRB std. dev. of a (um)')
    ax.legend()
    return _save(fig, path)


def create_scan_sigma_chart(df, path):
    """CRB variance of a against efficiency spread, one line per mean efficiency."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for nu, group in df.groupby('nu'):
        ax.plot(group['sigma'], group['var_crb_um2'], label=f'nu = {nu:g}')
    ax.set_xlabel('Efficiency std. dev. sigma')
    ax.set_ylabel('CRB variance of a (um^2)')
    ax.legend()
    return _save(fig, path)


def create_study_chart(summary, path):
    """Simulated and bound variance of a per order."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(summary['n'], summary['var_sim_um2'], 'o-', label='simulation')
    ax.plot(summary['n'], summary['var_crb_um2'], 's--', label='Cramer-Rao bound')
    ax.set_xlabel('Correlation order n')
    ax.set_ylabel('Variance of a (um^2)')
    ax.legend()
    return _save(fig, path)


def create_noise_heatmap(matrix, path, title=''):
    """Heatmap of the 2n-th noise moments over a pixel window."""
    fig, ax = plt.subplots(figsize=(6, 5))
    sns.heatmap(matrix, cmap='Blues', cbar_kws={'label': 'noise moment'}, ax=ax)
    if title:
        ax.set_title(title)
    plt.tight_layout()
    return _save(fig, path)
