# utils/data_loader.py
import logging
import os

import numpy as np
import pandas as pd

from utils.errors import ConfigError

logger = logging.getLogger(__name__)

CSV_OPTIONS = dict(float_format="%.17g", na_rep="nan", index=False)


def read_key_value_file(path):
    """
    Read a plain-text configuration file of ``key = value`` lines.

    Args:
        path (str): Path to the file. Blank lines and ``#`` comments are ignored.

    Returns:
        dict: Raw string values keyed by lower-cased key, in file order.
    """
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found at: {path}")
    entries = {}
    with open(path, encoding='utf-8') as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split('=', 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            key = key.lower().replace('-', '_')
            if key in entries:
                raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
            entries[key] = value
    return entries


def parse_number(text):
    """A float literal or a quotient 'a/b' of two, e.g. '1/1000'."""
    num, slash, den = text.strip().partition('/')
    if slash:
        return float(num) / float(den)
    return float(num)


def write_frame(df, path):
    """Write a DataFrame as CSV with 17 significant digits and a fixed header."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    df.to_csv(path, **CSV_OPTIONS)
    logger.debug("wrote %s (%d rows)", path, len(df))
    return path


def snapshot_name(field, t):
    return f"{field}_t{t:.6e}.csv"


def write_snapshot(out_dir, field, t, x, values):
    path = os.path.join(out_dir, snapshot_name(field, t))
    return write_frame(pd.DataFrame({'x': np.asarray(x), 'value': np.asarray(values)}), path)


def read_snapshot(path):
    """Read an ``x,value`` snapshot file back into two float arrays."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Snapshot file not found at: {path}")
    df = pd.read_csv(path, float_precision='round_trip')
    missing = {'x', 'value'} - set(df.columns)
    if missing:
        raise ConfigError(f"{path} lacks column(s) {sorted(missing)}")
    return df['x'].to_numpy(dtype=float), df['value'].to_numpy(dtype=float)


def write_summary(path, entries):
    """Write ``key = value`` lines; the file reads back with ``read_key_value_file``."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        for key, value in entries.items():
            if isinstance(value, float):
                value = f"{value:.17g}"
            handle.write(f"{key} = {value}\n")
    return path
