import pandas as pd
from io import StringIO

DCI_LOG_COLUMNS = [
    "sf_index", "time", "rnti", "direction", "format", "mcs", "n_rb", "tbs",
    "cce_start", "aggregation", "decode_path", "cfi",
]

# Integer columns of a parsed DCI log; tbs is nullable (retransmissions)
_INT_COLUMNS = ("sf_index", "mcs", "n_rb", "cce_start", "aggregation", "cfi")


class LogFormatError(ValueError):
    """DCI log or ground-truth text that does not follow the documented layout."""


def frame_to_csv(df: pd.DataFrame, sep: str = ",") -> str:
    """
    Render a DataFrame as delimited text with a header row.

    Args:
        df: Table to export
        sep: Field separator

    Returns:
        CSV (or TSV) string
    """
    csv_buffer = StringIO()
    df.to_csv(csv_buffer, index=False, sep=sep, lineterminator="\n", float_format="%.6g")
    return csv_buffer.getvalue()


def export_dci_log(rows: list[dict]) -> str:
    """
    Export DCI log rows as tab-separated text.

    Args:
        rows: Dicts keyed by DCI_LOG_COLUMNS; rnti as int, tbs None for a retransmission

    Returns:
        TSV string with header
    """
    df = pd.DataFrame(rows, columns=DCI_LOG_COLUMNS)
    if not df.empty:
        df["rnti"] = df["rnti"].map(lambda r: f"{int(r):04x}")
        df["tbs"] = df["tbs"].map(lambda t: "-" if t is None or pd.isna(t) else str(int(t)))
    return frame_to_csv(df, sep="\t")


def parse_dci_log(source) -> pd.DataFrame:
    """
    Parse a DCI log back into a typed DataFrame.

    Args:
        source: Path or text of a log written by export_dci_log

    Returns:
        DataFrame with DCI_LOG_COLUMNS; rnti as int, tbs as nullable Int64

    Raises:
        LogFormatError: Missing columns, bad values, or time going backwards
    """
    if isinstance(source, str) and "\t" in source:
        source = StringIO(source)
    try:
        df = pd.read_csv(source, sep="\t", dtype=str, keep_default_na=False, comment="#")
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=DCI_LOG_COLUMNS)
    missing = [c for c in DCI_LOG_COLUMNS if c not in df.columns]
    if missing:
        raise LogFormatError(f"DCI log lacks columns: {', '.join(missing)}")
    df = df[DCI_LOG_COLUMNS].copy()
    try:
        for column in _INT_COLUMNS:
            df[column] = df[column].astype(int)
        df["rnti"] = df["rnti"].map(lambda r: int(r, 16))
        df["tbs"] = pd.array([None if t == "-" else int(t) for t in df["tbs"]], dtype="Int64")
    except ValueError as e:
        raise LogFormatError(f"Bad DCI log value: {e}")
    if not df["sf_index"].is_monotonic_increasing:
        raise LogFormatError("DCI log time goes backwards")
    return df


def dci_row(dci, sf_index: int, cfi: int) -> dict:
    """One DCI log row; sf_index is the unwrapped subframe count (10 * sfn + subframe)."""
    return {
        "sf_index": sf_index,
        "time": f"{(sf_index // 10) % 1024}.{sf_index % 10}",
        "rnti": dci.rnti,
        "direction": dci.direction,
        "format": dci.format,
        "mcs": dci.mcs,
        "n_rb": dci.n_rb,
        "tbs": dci.tbs,
        "cce_start": dci.cce_start,
        "aggregation": dci.aggregation,
        "decode_path": dci.decode_path,
        "cfi": int(cfi),
    }
