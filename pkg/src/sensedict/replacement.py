"""Drop-in quantization: replace each contextual embedding in a stream
with its nearest sense, passing through tokens absent from the
dictionary, and report replacement fidelity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .dictionary import SenseDictionary, nearest_sense
from .errors import DimMismatch, NotInDictionary
from .stream import StreamHeader, read_header, stream_records, write_stream


@dataclass
class ReplacementReport:
    """Fidelity statistics of one replacement pass.

    replaced + fallbacks = records; mean_sq_error is the mean of
    ||m - s||^2 over replaced records; sense_usage maps token id to
    per-sense usage counts (summing to replaced).
    """

    records: int = 0
    replaced: int = 0
    fallbacks: int = 0
    mean_sq_error: float = 0.0
    sense_usage: dict[int, list[int]] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "records": self.records,
            "replaced": self.replaced,
            "fallbacks": self.fallbacks,
            "mean_sq_error": self.mean_sq_error,
            "sense_usage": {str(t): u for t, u in sorted(self.sense_usage.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)


def replace_stream(
    dictionary: SenseDictionary, source: BinaryIO, sink: BinaryIO
) -> ReplacementReport:
    """Quantize a `.semb` stream in file order, one output record per input.

    Replaced records carry the dot-product-nearest sense at the stream's
    storage dtype; unknown-token records pass through unchanged and count
    as fallbacks.
    """
    header = read_header(source)
    if header.dim != dictionary.dim:
        raise DimMismatch(
            f"stream dim {header.dim} != dictionary dim {dictionary.dim}"
        )

    report = ReplacementReport()
    sq_error_sum = 0.0

    def quantized():
        nonlocal sq_error_sum
        for token, embedding in stream_records(source, header):
            report.records += 1
            entry = dictionary.entries.get(int(token))
            if entry is None:
                report.fallbacks += 1
                yield token, embedding
                continue
            index = int(np.argmax(entry.senses_f64 @ embedding))
            sense = entry.senses_f64[index]
            diff = embedding - sense
            sq_error_sum += float(diff @ diff)
            usage = report.sense_usage.setdefault(int(token), [0] * len(entry))
            usage[index] += 1
            report.replaced += 1
            yield token, sense

    out_header = StreamHeader(
        dtype=header.dtype, dim=header.dim, record_count=header.record_count
    )
    write_stream(quantized(), out_header, sink)
    report.mean_sq_error = sq_error_sum / report.replaced if report.replaced else 0.0
    return report


def teacher_label(dictionary: SenseDictionary, token: int, teacher_embedding) -> int:
    """Sense index the teacher embedding selects; the distillation ground truth.

    Same selection rule as nearest_sense, but an absent token is an error
    here (no label exists for it).
    """
    index, _sense = nearest_sense(dictionary, token, teacher_embedding)
    return index


__all__ = [
    "ReplacementReport",
    "replace_stream",
    "teacher_label",
    "NotInDictionary",
]
