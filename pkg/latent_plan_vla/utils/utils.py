import os
from pathlib import Path
from typing import List

import pandas as pd


def get_dataframe(path, columns: List = None) -> pd.DataFrame:
    """
    Read a DataFrame written by put_dataframe.

    Args:
        path: .csv or .jsonl file.
        columns (List): List of columns to select (default is None).

    Returns:
        pd.DataFrame: Read DataFrame, empty when the file does not exist.
    """
    path = Path(path)
    if not path.exists():
        return pd.DataFrame()
    if path.suffix == '.jsonl':
        df = pd.read_json(path, lines=True)
    elif path.suffix == '.csv':
        df = pd.read_csv(path)
    else:
        raise ValueError(f"Invalid Filetype for Storage (Supported: 'csv', 'jsonl'): {path}")
    return df[columns] if columns is not None else df


def put_dataframe(df: pd.DataFrame, path) -> Path:
    """
    Write a DataFrame as CSV or line-delimited JSON, picked by suffix.

    Args:
        df (pd.DataFrame): DataFrame to write.
        path: Destination; parent directories are created.

    Returns:
        Path written.
    """
    path = Path(path)
    os.makedirs(path.parent, exist_ok=True)
    if path.suffix == '.jsonl':
        df.to_json(path, orient='records', lines=True, double_precision=15)
    elif path.suffix == '.csv':
        df.to_csv(path, index=False, float_format='%.6f', lineterminator='\n')
    else:
        raise ValueError(f"Invalid Filetype for Storage (Supported: 'csv', 'jsonl'): {path}")
    return path
