"""CSV shot files.

::

    # bayesreadout-shots 1
    # exposure_tag: 12.5ms
    # rois: roi0,roi1
    # dark: 1.0 2.0
    # meta: {"config": {...}}
    roi_id,shot_index,count
    roi0,0,3
    ...

``dark`` (the calibrated ``alpha beta`` of the dark law) and ``meta`` (one
line of compact JSON, used to echo the generating configuration) are
optional. Rows of one ROI carry shot indices ``0 .. N-1`` in order. Analog
count values are rounded half-to-even on reading.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .count_model import ShotRecord, SuperPoissonParams
from .errors import DataFormatError, ParameterDomainError

FORMAT_LINE = "# bayesreadout-shots 1"
COLUMNS = "roi_id,shot_index,count"


@dataclass
class ShotFile:
    records: list
    exposure_tag: str = ""
    dark: SuperPoissonParams | None = None
    meta: dict = field(default_factory=dict)

    def record(self, roi_id: str) -> ShotRecord:
        for r in self.records:
            if r.roi_id == roi_id:
                return r
        raise KeyError(roi_id)


def _check_roi(roi):
    if not roi or any(c in roi for c in ",\n\r#"):
        raise ParameterDomainError(f"invalid ROI id {roi!r}")


def dumps(shots: ShotFile) -> str:
    out = io.StringIO()
    out.write(FORMAT_LINE + "\n")
    out.write(f"# exposure_tag: {shots.exposure_tag}\n")
    for r in shots.records:
        _check_roi(r.roi_id)
    out.write("# rois: " + ",".join(r.roi_id for r in shots.records) + "\n")
    if shots.dark is not None:
        out.write(f"# dark: {shots.dark.alpha!r} {shots.dark.beta!r}\n")
    if shots.meta:
        out.write("# meta: " + json.dumps(shots.meta, sort_keys=True, separators=(",", ":")) + "\n")
    out.write(COLUMNS + "\n")
    for r in shots.records:
        for i, c in enumerate(r.counts.tolist()):
            out.write(f"{r.roi_id},{i},{c}\n")
    return out.getvalue()


def write_shotfile(shots: ShotFile, path) -> Path:
    path = Path(path)
    path.write_text(dumps(shots), encoding="utf-8", newline="\n")
    return path


def loads(text: str) -> ShotFile:
    lines = text.splitlines()
    if not lines or lines[0].strip() != FORMAT_LINE:
        first = lines[0].strip() if lines else ""
        if first.startswith("# bayesreadout-shots"):
            raise DataFormatError(f"unsupported shot file version: {first!r}", )
        raise DataFormatError("not a shot file (missing format line)")
    header, k = {}, 1
    while k < len(lines) and lines[k].startswith("#"):
        key, sep, value = lines[k][1:].strip().partition(":")
        if not sep:
            raise DataFormatError(f"line {k + 1}: malformed header line")
        header[key.strip()] = value.strip()
        k += 1
    if k >= len(lines) or lines[k].strip() != COLUMNS:
        raise DataFormatError(f"line {k + 1}: expected column header {COLUMNS!r}")
    rois = [r for r in header.get("rois", "").split(",") if r]
    if not rois:
        raise DataFormatError("shot file lists no ROIs")
    dark = None
    if "dark" in header:
        try:
            a, b = (float(v) for v in header["dark"].split())
            dark = SuperPoissonParams(a, b)
        except (ValueError, ParameterDomainError) as exc:
            raise DataFormatError(f"bad dark calibration {header['dark']!r}: {exc}") from None
    meta = {}
    if "meta" in header:
        try:
            meta = json.loads(header["meta"])
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"bad meta JSON: {exc}") from None
    values = {r: [] for r in rois}
    for j, line in enumerate(lines[k + 1 :], start=k + 2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise DataFormatError(f"line {j}: expected 3 fields")
        roi, idx, count = parts
        if roi not in values:
            raise DataFormatError(f"line {j}: ROI {roi!r} not declared in header")
        try:
            idx, count = int(idx), float(count)
        except ValueError:
            raise DataFormatError(f"line {j}: non-numeric shot index or count") from None
        if idx != len(values[roi]):
            raise DataFormatError(f"line {j}: shot index {idx} out of sequence for {roi!r}")
        if not np.isfinite(count) or count < -0.5:
            raise DataFormatError(f"line {j}: counts must be non-negative")
        values[roi].append(count)
    try:
        records = [ShotRecord.from_values(values[r], roi_id=r, exposure_tag=header.get("exposure_tag", "")) for r in rois]
    except ParameterDomainError as exc:
        raise DataFormatError(str(exc)) from None
    return ShotFile(records, header.get("exposure_tag", ""), dark, meta)


def read_shotfile(path) -> ShotFile:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read shot file {path}: {exc}") from None
    return loads(text)
