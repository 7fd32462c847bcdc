import numpy as np
import pandas as pd


def ewma_curve(values, span: int = 10) -> pd.Series:
    """
    Exponentially weighted running mean of a per-iteration training signal.
    Starts from the first value (min_periods=1) so the curve is as long as the input.
    """
    s = pd.Series(np.asarray(values, dtype=np.float64))
    return s.ewm(span=max(1, span), min_periods=1, adjust=True).mean()


def add_smoothed_columns(df: pd.DataFrame, attrs, span: int = 10) -> pd.DataFrame:
    """Append `<attr>_ewma` columns for each attr present in df."""
    df = df.copy()
    for attr in attrs:
        if attr in df.columns:
            df[f'{attr}_ewma'] = ewma_curve(df[attr].values, span).values
    return df


def rolling_success(successes, window: int = 10) -> pd.Series:
    s = pd.Series(np.asarray(successes, dtype=np.float64))
    return s.rolling(window=window, min_periods=1).mean()
