"""Telemetry logs: parsing, event vocabularies, and windowing into instances.

A log holds one JSON object per line and per (organization, user,
five-minute bucket) in which at least one network event fired.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

BUCKET_SECONDS = 300
PAD, UNK = "<PAD>", "<UNK>"
PAD_ID, UNK_ID = 0, 1
RESERVED = (PAD, UNK)
TASKS = ("threat_id", "family", "category")
DEFAULT_WINDOW = 21

_FIELDS = {"org_id", "user_id", "ts", "events", "bytes_sent", "bytes_received", "label"}
_REQUIRED = _FIELDS - {"label"}


class LogFormatError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class Label:
    threat_id: str | None = None
    family: str | None = None
    category: str | None = None

    def get(self, task: str) -> str | None:
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
        return getattr(self, task)

    def to_json(self) -> dict:
        return {k: v for k, v in (("threat_id", self.threat_id), ("family", self.family),
                                   ("category", self.category)) if v is not None}

    def is_empty(self) -> bool:
        return self.threat_id is None and self.family is None and self.category is None


@dataclass(frozen=True)
class IntervalRecord:
    org_id: str
    user_id: str
    ts: int
    events: tuple
    bytes_sent: int
    bytes_received: int
    label: Label | None = None

    def __post_init__(self):
        if not self.events:
            raise ValueError("interval record must carry at least one event")
        if self.ts % BUCKET_SECONDS:
            raise ValueError(f"ts {self.ts} is not a multiple of {BUCKET_SECONDS}")
        if self.bytes_sent < 0 or self.bytes_received < 0:
            raise ValueError("byte counts must be non-negative")

    @property
    def user_key(self) -> tuple[str, str]:
        return (self.org_id, self.user_id)

    def to_json(self) -> dict:
        out = {"org_id": self.org_id, "user_id": self.user_id, "ts": self.ts,
               "events": list(self.events), "bytes_sent": self.bytes_sent,
               "bytes_received": self.bytes_received}
        if self.label is not None:
            out["label"] = self.label.to_json()
        return out


class EncodedStep(NamedTuple):
    event_ids: tuple
    log_dt: float
    log_sent: float
    log_recv: float


PAD_STEP = EncodedStep((PAD_ID,), 0.0, 0.0, 0.0)


@dataclass
class WindowInstance:
    steps: list
    label: Label | None
    key: tuple
    pad_mask: list = field(default_factory=list)

    @property
    def w(self) -> int:
        return len(self.steps)

    @property
    def n_real(self) -> int:
        return sum(self.pad_mask)


# -- parsing -----------------------------------------------------------------------

def _parse_line(obj, line_no: int) -> IntervalRecord:
    if not isinstance(obj, dict):
        raise LogFormatError(line_no, "record is not a JSON object")
    missing = _REQUIRED - obj.keys()
    if missing:
        raise LogFormatError(line_no, f"missing field(s) {sorted(missing)}")
    extra = obj.keys() - _FIELDS
    if extra:
        raise LogFormatError(line_no, f"unknown field(s) {sorted(extra)}")
    for name in ("org_id", "user_id"):
        if not isinstance(obj[name], str):
            raise LogFormatError(line_no, f"{name} must be a string")
    for name in ("ts", "bytes_sent", "bytes_received"):
        v = obj[name]
        if not isinstance(v, int) or isinstance(v, bool):
            raise LogFormatError(line_no, f"{name} must be an integer")
    if obj["bytes_sent"] < 0 or obj["bytes_received"] < 0:
        raise LogFormatError(line_no, "negative byte count")
    if obj["ts"] % BUCKET_SECONDS:
        raise LogFormatError(line_no, f"ts {obj['ts']} is not a multiple of {BUCKET_SECONDS}")
    events = obj["events"]
    if not isinstance(events, list) or not events or not all(isinstance(e, str) for e in events):
        raise LogFormatError(line_no, "events must be a non-empty array of strings")
    label = None
    if "label" in obj and obj["label"] is not None:
        raw = obj["label"]
        if not isinstance(raw, dict) or raw.keys() - set(TASKS):
            raise LogFormatError(line_no, "label must be an object with threat_id/family/category")
        for k, v in raw.items():
            if v is not None and not isinstance(v, str):
                raise LogFormatError(line_no, f"label.{k} must be a string")
        label = Label(**raw)
    # sets: duplicates collapse, order is canonical
    return IntervalRecord(obj["org_id"], obj["user_id"], obj["ts"],
                          tuple(sorted(set(events))), obj["bytes_sent"],
                          obj["bytes_received"], label)


def parse_log(stream) -> list[IntervalRecord]:
    """Parse newline-delimited JSON interval records, keeping file order.

    ``stream`` may be a binary or text file object, raw bytes, or an iterable
    of lines. Blank lines are skipped.
    """
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    records = []
    for line_no, line in enumerate(stream, start=1):
        if isinstance(line, (bytes, bytearray)):
            try:
                line = line.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise LogFormatError(line_no, f"invalid UTF-8: {exc}") from None
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise LogFormatError(line_no, f"invalid JSON: {exc.msg}") from None
        records.append(_parse_line(obj, line_no))
    return records


def read_log(path) -> list[IntervalRecord]:
    with open(path, "rb") as fh:
        return parse_log(fh)


def write_log(records: Iterable[IntervalRecord], fh) -> None:
    for r in records:
        fh.write(json.dumps(r.to_json(), separators=(",", ":")) + "\n")


# -- vocabulary --------------------------------------------------------------------

class EventVocabulary:
    """Bijection between event names and dense ids; 0 and 1 are reserved."""

    def __init__(self, names: Iterable[str]):
        names = list(names)
        if tuple(names[:2]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}")
        if len(set(names)) != len(names):
            raise ValueError("vocabulary has duplicate names")
        self.names = names
        self.index = {n: i for i, n in enumerate(names)}

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self.index

    def id(self, name: str) -> int:
        return self.index.get(name, UNK_ID)

    def name(self, idx: int) -> str:
        return self.names[idx]

    @property
    def n_events(self) -> int:
        """Number of non-reserved entries."""
        return len(self.names) - 2

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.names).encode("utf-8")).hexdigest()[:16]

    def __eq__(self, other) -> bool:
        return isinstance(other, EventVocabulary) and self.names == other.names

    def dumps(self) -> str:
        return "".join(n + "\n" for n in self.names)

    @classmethod
    def loads(cls, text: str) -> "EventVocabulary":
        return cls(line for line in text.splitlines() if line)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "EventVocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def build_vocabulary(records: Iterable) -> EventVocabulary:
    """Reserved entries first, then every event name sorted lexicographically.

    Accepts interval records or plain iterables of event names.
    """
    seen = set()
    for r in records:
        seen.update(r.events if isinstance(r, IntervalRecord) else r)
    seen.difference_update(RESERVED)
    return EventVocabulary(list(RESERVED) + sorted(seen))


def encode_events(names, vocab: EventVocabulary) -> list[int]:
    if not names:
        raise ValueError("an interval must contain at least one event")
    return [vocab.id(n) for n in names]


# -- windowing ---------------------------------------------------------------------

def log1p_feature(x: float) -> float:
    return math.log1p(x)


def group_by_user(records: Iterable[IntervalRecord]) -> dict:
    """Map (org, user) -> records sorted by ts; duplicate buckets are an error."""
    users = defaultdict(list)
    for r in records:
        users[r.user_key].append(r)
    out = {}
    for key in sorted(users):
        rs = sorted(users[key], key=lambda r: r.ts)
        for a, b in zip(rs, rs[1:]):
            if a.ts == b.ts:
                raise ValueError(f"user {key} has two records for ts {a.ts}")
        out[key] = rs
    return out


def encode_window(user_records: list, vocab: EventVocabulary, end: int, w: int,
                  key=None) -> WindowInstance:
    """Window of the ``w`` intervals ending at index ``end`` (inclusive)."""
    start = max(0, end - w + 1)
    real = user_records[start:end + 1]
    n_pad = w - len(real)
    steps = [PAD_STEP] * n_pad
    prev_ts = None
    for r in real:
        dt = 0.0 if prev_ts is None else math.log1p(r.ts - prev_ts)
        prev_ts = r.ts
        ids = tuple(vocab.id(e) for e in r.events) if r.events and isinstance(r.events[0], str) \
            else tuple(r.events)
        steps.append(EncodedStep(ids, dt, math.log1p(r.bytes_sent), math.log1p(r.bytes_received)))
    last = user_records[end]
    if key is None:
        key = (last.org_id, last.user_id, last.ts)
    return WindowInstance(steps, last.label, key, [False] * n_pad + [True] * len(real))


def window_ends(n: int, stride: int) -> list[int]:
    """Indices of final steps: the last interval, then every stride-th one before it."""
    return list(range(n - 1, -1, -stride))[::-1]


def windowize(records: Iterable[IntervalRecord], vocab: EventVocabulary,
              w: int = DEFAULT_WINDOW, stride: int = 1) -> list[WindowInstance]:
    """One window per user ending at every stride-th interval, counted from the last.

    Users with fewer than ``w`` intervals give left-padded windows. Output is
    ordered by (org, user, ts of the final step).
    """
    if w < 1 or stride < 1:
        raise ValueError(f"window width and stride must be >= 1 (got w={w}, stride={stride})")
    out = []
    for _, rs in group_by_user(records).items():
        for end in window_ends(len(rs), stride):
            out.append(encode_window(rs, vocab, end, w))
    return out


@dataclass
class WindowBatch:
    """Array form of a list of windows, ready for the models.

    event_ids (N, w, S) with unused set slots holding PAD and mask 0;
    numerics (N, w, 3) as (log_dt, log_sent, log_recv); pad_mask (N, w) is
    True on real steps.
    """

    event_ids: np.ndarray
    event_mask: np.ndarray
    numerics: np.ndarray
    pad_mask: np.ndarray

    def __len__(self) -> int:
        return self.event_ids.shape[0]

    def take(self, idx) -> "WindowBatch":
        idx = np.asarray(idx)
        ids = self.event_ids[idx]
        mask = self.event_mask[idx]
        # trim set slots no row uses
        used = int(mask.sum(axis=(0, 1)).nonzero()[0].max(initial=0)) + 1
        return WindowBatch(ids[..., :used], mask[..., :used], self.numerics[idx],
                           self.pad_mask[idx])


def stack_windows(windows: list[WindowInstance]) -> WindowBatch:
    N = len(windows)
    w = windows[0].w if windows else 1
    S = max((len(s.event_ids) for win in windows for s in win.steps), default=1)
    ids = np.zeros((N, w, S), dtype=np.int64)
    mask = np.zeros((N, w, S), dtype=np.float32)
    num = np.zeros((N, w, 3), dtype=np.float32)
    pad = np.zeros((N, w), dtype=bool)
    for n, win in enumerate(windows):
        if win.w != w:
            raise ValueError("all windows in a batch must have the same width")
        for t, st in enumerate(win.steps):
            k = len(st.event_ids)
            ids[n, t, :k] = st.event_ids
            mask[n, t, :k] = 1.0
            num[n, t] = (st.log_dt, st.log_sent, st.log_recv)
        pad[n] = win.pad_mask
    return WindowBatch(ids, mask, num, pad)
