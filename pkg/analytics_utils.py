"""
Aggregation of Monte Carlo trial records into study tables.
"""
import numpy as np
import pandas as pd

TRIAL_COLUMNS = [
    "trial", "n", "scheme", "d", "converged", "iterations", "a_hat_um", "i_eff_hat",
    "chi_hat", "crb_a_at_estimate_um2", "log_likelihood", "error",
]
SUMMARY_COLUMNS = [
    "n", "scheme", "d", "mean_a_um", "var_sim_um2", "var_crb_um2", "trials", "failures",
]
NUISANCE_COLUMNS = [
    "n", "mean_i_eff", "var_sim_i_eff", "var_crb_i_eff", "mean_chi", "var_sim_chi",
]


def prepare_trials_dataframe(records):
    """
    Build the per-trial table from raw trial records.

    Args:
        records: list of dicts as returned by estimation.run_trial

    Returns:
        DataFrame sorted by (n, trial) with lengths converted to micrometres
    """
    df = pd.DataFrame(records)
    if df.empty:
        return pd.DataFrame(columns=TRIAL_COLUMNS)
    for column in ("iterations", "a_hat", "i_eff_hat", "chi_hat", "crb_a_at_estimate", "log_likelihood"):
        if column not in df.columns:
            df[column] = np.nan
    df["a_hat_um"] = df.pop("a_hat") * 1e6
    df["crb_a_at_estimate_um2"] = df.pop("crb_a_at_estimate") * 1e12
    df["chi_hat"] = pd.to_numeric(df["chi_hat"], errors="coerce")
    df["converged"] = df["converged"].astype(bool)
    df["error"] = df["error"].fillna("")
    df = df.sort_values(["n", "trial"], kind="mergesort").reset_index(drop=True)
    return df[TRIAL_COLUMNS]


def successful_trials(df):
    """Trials that converged and produced an estimate."""
    if df.empty:
        return df
    return df[df["converged"] & df["a_hat_um"].notna()]


def failure_fractions(df):
    """Share of failed trials per order."""
    if df.empty:
        return {}
    failed = ~df["converged"]
    return failed.groupby(df["n"]).mean().to_dict()


def calculate_study_summary(df, crb_a):
    """
    Per-order mean and sample variance of the estimated dimension.

    Args:
        df: per-trial table from prepare_trials_dataframe
        crb_a: mapping order -> Cramer-Rao bound on a at the truth (m^2)

    Returns:
        DataFrame with the study report columns
    """
    if df.empty:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    good = successful_trials(df)
    rows = []
    for (n, scheme, d), group in df.groupby(["n", "scheme", "d"], sort=True):
        estimates = good.loc[good["n"] == n, "a_hat_um"].to_numpy()
        rows.append({
            "n": int(n),
            "scheme": scheme,
            "d": int(d),
            "mean_a_um": _mean(estimates),
            "var_sim_um2": _variance(estimates),
            "var_crb_um2": crb_a[n] * 1e12,
            "trials": int(estimates.size),
            "failures": int(len(group) - estimates.size),
        })
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def calculate_nuisance_summary(df, crb_i_eff):
    """
    Per-order statistics of the nuisance estimates.

    Args:
        df: per-trial table
        crb_i_eff: mapping order -> Cramer-Rao bound on I_eff at the truth

    Returns:
        DataFrame with mean and variance of I_eff (and chi when estimated)
    """
    if df.empty:
        return pd.DataFrame(columns=NUISANCE_COLUMNS)
    good = successful_trials(df)
    rows = []
    for n in sorted(df["n"].unique()):
        group = good[good["n"] == n]
        chi = group["chi_hat"].dropna().to_numpy()
        rows.append({
            "n": int(n),
            "mean_i_eff": _mean(group["i_eff_hat"].to_numpy()),
            "var_sim_i_eff": _variance(group["i_eff_hat"].to_numpy()),
            "var_crb_i_eff": crb_i_eff[n],
            "mean_chi": _mean(chi),
            "var_sim_chi": _variance(chi),
        })
    return pd.DataFrame(rows, columns=NUISANCE_COLUMNS)


def _mean(values):
    return float(np.mean(values)) if len(values) else np.nan


def _variance(values):
    # Two-pass variance about the mean.
    if len(values) < 2:
        return np.nan
    values = np.asarray(values, dtype=float)
    return float(np.sum((values - values.mean()) ** 2) / (values.size - 1))
