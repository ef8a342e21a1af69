# utils/data_processor.py
import math

import numpy as np
import pandas as pd
import statsmodels.api as sm

FAILED_CELL = 'x'


def h_label(h):
    """Render a mesh size as ``1/N`` when it is the reciprocal of an integer."""
    n = 1.0 / h
    return f"1/{int(round(n))}" if abs(n - round(n)) < 1e-9 * n else f"{h:g}"


def build_table1(cells):
    """
    Pivot minimum-table cells into the layout rows = (scheme, dt), columns = h.

    Args:
        cells (list[dict]): One dict per run with keys scheme, dt, h, min_u, failed.

    Returns:
        pd.DataFrame: Minimum of u per cell, failed cells as the token 'x'.
    """
    df = pd.DataFrame(cells)
    if df.empty:
        return pd.DataFrame(columns=['scheme', 'dt'])
    df['value'] = df.apply(lambda row: FAILED_CELL if row['failed'] else f"{row['min_u']:.17g}", axis=1)
    df['h_label'] = df['h'].map(h_label)
    order = [h_label(h) for h in sorted(df['h'].unique(), reverse=True)]
    schemes = list(dict.fromkeys(df['scheme']))

    table = df.pivot(index=['scheme', 'dt'], columns='h_label', values='value')
    table = table.reindex(columns=order)
    table = table.reset_index()
    table['scheme'] = pd.Categorical(table['scheme'], categories=schemes, ordered=True)
    table = table.sort_values(['scheme', 'dt'], ascending=[True, False]).reset_index(drop=True)
    table['scheme'] = table['scheme'].astype(str)
    table.columns.name = None
    return table


def fit_convergence_order(h, errors):
    """
    Least-squares slope of log(e) against log(h) over a whole ladder.

    Args:
        h (array-like): Mesh sizes.
        errors (array-like): Errors on those meshes; non-positive entries are skipped.

    Returns:
        dict: order, intercept, r_squared and the number of rungs used (order is NaN with fewer than two).
    """
    h = np.asarray(h, dtype=float)
    errors = np.asarray(errors, dtype=float)
    keep = (errors > 0) & np.isfinite(errors)
    if keep.sum() < 2:
        return {'order': math.nan, 'intercept': math.nan, 'r_squared': math.nan, 'rungs': int(keep.sum())}
    X = sm.add_constant(np.log(h[keep]))
    results = sm.OLS(np.log(errors[keep]), X).fit()
    return {'order': float(results.params[1]), 'intercept': float(results.params[0]),
            'r_squared': float(results.rsquared), 'rungs': int(keep.sum())}


def eoc_fit_summary(eoc_df):
    """Fitted order for each of u, v and v_x from an EOC frame."""
    rows = []
    for name in ('u', 'v', 'vx'):
        fit = fit_convergence_order(eoc_df['h'], eoc_df[f'e_{name}'])
        rows.append({'field': name, **fit})
    return pd.DataFrame(rows)
