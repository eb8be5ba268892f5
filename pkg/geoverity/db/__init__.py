from geoverity.db.base import RecordLog, RecordLogCorrupt, decode_lines, encode_lines
from geoverity.db.pins import PinRecord, PinStore, PinStoreCorrupt
from geoverity.db.results import (
    DuplicateResultError,
    MiddleboxRecord,
    NodeRecord,
    ReportRecord,
    ResultRecord,
    ResultsLog,
    SkippedRecord,
    SlvRecord,
    SummaryRecord,
    TraceRecord,
    decode_report,
    encode_report,
)

__all__ = [
    "DuplicateResultError",
    "MiddleboxRecord",
    "NodeRecord",
    "PinRecord",
    "PinStore",
    "PinStoreCorrupt",
    "RecordLog",
    "RecordLogCorrupt",
    "ReportRecord",
    "ResultRecord",
    "ResultsLog",
    "SkippedRecord",
    "SlvRecord",
    "SummaryRecord",
    "TraceRecord",
    "decode_lines",
    "decode_report",
    "encode_lines",
    "encode_report",
]
