"""Logged bandit feedback: data model, on-disk format, validated ingestion.

File format (UTF-8, one JSON object per line, fields in fixed order)::

    {"format": "offab-log", "schema_version": 1, "k": 2, "r_max": 20.0}
    {"id": 0, "segment": 1, "features": [0.5], "eligible": [3, 0, 2], "action": [2, 3], "logging_logprob": -1.7, "reward": 0.0}
    ...

The header carries ``k`` (ranking length), ``r_max`` (reward upper bound) and
the schema version. Each record carries the context id, segment label,
feature vector, eligible item ids, the logged top-k ranking, the natural log
of the logging policy's probability of that ranking, and the reward. Floats
are written with ``repr`` so a read/write cycle is exact.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import LogFormatError, ValidationError
from .policy import PAD, Context, ContextBatch, RankedAction, action_columns

SCHEMA_VERSION = 1
FORMAT_NAME = "offab-log"
RECORD_FIELDS = ("id", "segment", "features", "eligible", "action", "logging_logprob", "reward")

ERROR_CODES = (
    "empty-dataset",
    "bad-header",
    "malformed-record",
    "reward-out-of-range",
    "non-finite-propensity",
    "propensity-out-of-range",
    "duplicate-items",
    "ineligible-item",
)


@dataclass(frozen=True)
class LoggedSample:
    context: Context
    action: RankedAction
    reward: float
    logging_logprob: float


@dataclass(frozen=True, eq=False)
class LogDataset:
    """Columnar logged dataset; row ``i`` is one :class:`LoggedSample`."""

    contexts: ContextBatch
    actions: np.ndarray
    rewards: np.ndarray
    logging_logprob: np.ndarray
    r_max: float
    k: int
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        n = len(self.contexts)
        actions = np.asarray(self.actions, dtype=np.int64).reshape(n, int(self.k))
        rewards = np.asarray(self.rewards, dtype=np.float64).reshape(n)
        logp = np.asarray(self.logging_logprob, dtype=np.float64).reshape(n)
        for name, value in [("actions", actions), ("rewards", rewards), ("logging_logprob", logp)]:
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "r_max", float(self.r_max))
        object.__setattr__(self, "k", int(self.k))

    def __len__(self):
        return len(self.rewards)

    def __getitem__(self, i: int) -> LoggedSample:
        return LoggedSample(self.contexts[i], RankedAction(tuple(self.actions[i])),
                            float(self.rewards[i]), float(self.logging_logprob[i]))

    @property
    def samples(self) -> Iterator[LoggedSample]:
        return (self[i] for i in range(len(self)))

    def take(self, index) -> "LogDataset":
        return LogDataset(self.contexts.take(index), self.actions[index], self.rewards[index],
                          self.logging_logprob[index], self.r_max, self.k, self.schema_version)

    def chunks(self, size: int) -> Iterator[tuple[int, "LogDataset"]]:
        """Contiguous slices ``(start, chunk)`` for chunked folding."""
        for start in range(0, len(self), size):
            yield start, self.take(slice(start, start + size))

    def split(self, fraction: float, seed: int) -> tuple["LogDataset", "LogDataset"]:
        """Random disjoint split; the first part holds ``fraction`` of the rows."""
        from .streams import RandomStream

        u = RandomStream(seed).uniform(len(self))
        first = u < fraction
        return self.take(np.flatnonzero(first)), self.take(np.flatnonzero(~first))

    def validate(self) -> None:
        """Raise :class:`ValidationError` if any invariant is violated."""
        if not self.r_max > 0:
            raise ValidationError("r_max must be positive")
        self.contexts.validate()
        action_columns(self.contexts, self.actions)
        bad = ~((self.rewards >= 0) & (self.rewards <= self.r_max))
        if bad.any():
            raise ValidationError(f"reward out of [0, r_max] at row {int(np.flatnonzero(bad)[0])}")
        if not np.isfinite(self.logging_logprob).all():
            raise ValidationError("non-finite logging propensity")

    def equals(self, other: "LogDataset") -> bool:
        """Exact equality of every field, including float bits."""
        a, b = self.contexts, other.contexts
        return (
            self.k == other.k and self.r_max == other.r_max
            and self.schema_version == other.schema_version
            and a.width == b.width
            and all(np.array_equal(x, y) for x, y in [
                (a.ids, b.ids), (a.segments, b.segments), (a.features, b.features),
                (a.eligible, b.eligible), (self.actions, other.actions),
                (self.rewards, other.rewards), (self.logging_logprob, other.logging_logprob)])
        )

    @classmethod
    def from_samples(cls, samples, r_max: float, k: int | None = None) -> "LogDataset":
        samples = list(samples)
        if k is None:
            k = len(samples[0].action) if samples else 1
        return cls(
            ContextBatch.from_contexts([s.context for s in samples]),
            np.array([s.action.items for s in samples], dtype=np.int64).reshape(len(samples), k),
            np.array([s.reward for s in samples], dtype=np.float64),
            np.array([s.logging_logprob for s in samples], dtype=np.float64),
            r_max, k,
        )


def _header(dataset: LogDataset) -> str:
    return json.dumps({"format": FORMAT_NAME, "schema_version": dataset.schema_version,
                       "k": dataset.k, "r_max": dataset.r_max})


def iter_lines(dataset: LogDataset) -> Iterator[str]:
    yield _header(dataset)
    c = dataset.contexts
    features = c.features.tolist()
    eligible = c.eligible.tolist()
    actions = dataset.actions.tolist()
    for i, (cid, seg, lp, r) in enumerate(zip(c.ids.tolist(), c.segments.tolist(),
                                              dataset.logging_logprob.tolist(), dataset.rewards.tolist())):
        elig = [e for e in eligible[i] if e != PAD]
        yield json.dumps({"id": cid, "segment": seg, "features": features[i], "eligible": elig,
                          "action": actions[i], "logging_logprob": lp, "reward": r})


def write_log(dataset: LogDataset, path) -> None:
    dataset.validate()
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for line in iter_lines(dataset):
                fh.write(line)
                fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write log to {path}: {exc.strerror}") from exc


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_id(x) -> bool:
    return _is_int(x) and -(2**63) <= x < 2**63


def _is_num(x) -> bool:
    return (isinstance(x, (int, float))) and not isinstance(x, bool)


def _parse_header(line: str) -> tuple[int, float, int]:
    try:
        head = json.loads(line)
    except json.JSONDecodeError:
        raise LogFormatError("bad-header", "first line is not a JSON header", 1) from None
    if not isinstance(head, dict) or head.get("format") != FORMAT_NAME:
        raise LogFormatError("bad-header", f"header must declare format {FORMAT_NAME!r}", 1)
    version, k, r_max = head.get("schema_version"), head.get("k"), head.get("r_max")
    if version != SCHEMA_VERSION:
        raise LogFormatError("bad-header", f"unsupported schema_version {version!r}", 1)
    if not _is_int(k) or k < 1:
        raise LogFormatError("bad-header", f"k must be a positive integer, got {k!r}", 1)
    if not _is_num(r_max) or not math.isfinite(r_max) or r_max <= 0:
        raise LogFormatError("bad-header", f"r_max must be a positive number, got {r_max!r}", 1)
    return version, float(r_max), k


def parse_log(lines) -> LogDataset:
    """Parse and validate an iterable of text lines (header first)."""
    it = iter(lines)
    header = next(it, None)
    if header is None or not header.strip():
        raise LogFormatError("empty-dataset", "empty dataset")
    version, r_max, k = _parse_header(header)

    ids, segs, feats, elig, acts, logps, rewards = [], [], [], [], [], [], []
    n_features = None
    for lineno, line in enumerate(it, start=2):
        if not line.strip():
            raise LogFormatError("malformed-record", "blank line", lineno)
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise LogFormatError("malformed-record", f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(rec, dict) or set(rec) != set(RECORD_FIELDS):
            raise LogFormatError("malformed-record", f"record must have exactly fields {RECORD_FIELDS}", lineno)
        f, e, a = rec["features"], rec["eligible"], rec["action"]
        if not (_is_id(rec["id"]) and _is_id(rec["segment"]) and rec["segment"] >= 0):
            raise LogFormatError("malformed-record", "id and segment must be integers (segment >= 0)", lineno)
        if not (isinstance(f, list) and all(_is_num(x) and math.isfinite(x) for x in f)):
            raise LogFormatError("malformed-record", "features must be a list of finite numbers", lineno)
        if not (isinstance(e, list) and e and all(_is_id(x) and x >= 0 for x in e)):
            raise LogFormatError("malformed-record", "eligible must be a nonempty list of item ids", lineno)
        if not (isinstance(a, list) and all(_is_id(x) and x >= 0 for x in a)):
            raise LogFormatError("malformed-record", "action must be a list of item ids", lineno)
        if len(a) != k:
            raise LogFormatError("malformed-record", f"action has {len(a)} items, header k={k}", lineno)
        if n_features is None:
            n_features = len(f)
        elif len(f) != n_features:
            raise LogFormatError("malformed-record", "feature length differs from earlier records", lineno)
        if len(set(e)) != len(e) or len(set(a)) != len(a):
            raise LogFormatError("duplicate-items", "duplicate item ids", lineno)
        if not set(a) <= set(e):
            raise LogFormatError("ineligible-item", "action contains an ineligible item", lineno)
        lp, r = rec["logging_logprob"], rec["reward"]
        if not _is_num(lp) or not _is_num(r):
            raise LogFormatError("malformed-record", "logging_logprob and reward must be numbers", lineno)
        if not math.isfinite(lp):
            raise LogFormatError("non-finite-propensity", f"logging_logprob is {lp}", lineno)
        if lp > 0:
            raise LogFormatError("propensity-out-of-range", f"logging_logprob {lp} > 0", lineno)
        if not (0 <= r <= r_max):
            raise LogFormatError("reward-out-of-range", f"reward {r} outside [0, {r_max}]", lineno)
        ids.append(rec["id"])
        segs.append(rec["segment"])
        feats.append(f)
        elig.append(e)
        acts.append(a)
        logps.append(float(lp))
        rewards.append(float(r))

    if not ids:
        raise LogFormatError("empty-dataset", "empty dataset")
    width = max(len(e) for e in elig)
    eligible = np.full((len(elig), width), PAD, dtype=np.int64)
    for i, e in enumerate(elig):
        eligible[i, : len(e)] = e
    contexts = ContextBatch(np.array(ids), np.array(segs),
                            np.array(feats, dtype=np.float64).reshape(len(ids), n_features), eligible)
    return LogDataset(contexts, np.array(acts, dtype=np.int64), np.array(rewards),
                      np.array(logps), r_max, k, version)


def read_log(path) -> LogDataset:
    """Read and validate a log file; raises :class:`LogFormatError` on any defect."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise LogFormatError("malformed-record", f"cannot read {path}: {exc.strerror}") from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise LogFormatError("malformed-record", f"not UTF-8 ({exc.reason})") from None
    if not text.strip():
        raise LogFormatError("empty-dataset", "empty dataset")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return parse_log(lines)
