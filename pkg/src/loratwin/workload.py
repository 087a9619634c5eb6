"""Request stream generation.

Each adapter gets its own Poisson arrival stream and its own length stream,
both seeded from ``(seed, adapter_id)`` so that adding or removing an adapter
never changes the requests of the others.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError

_ARRIVAL_STREAM = 0
_LENGTH_STREAM = 1


class LengthMode(str, Enum):
    FULL = "full"
    MEAN = "mean"


@dataclass(frozen=True)
class LengthSpec:
    mode: LengthMode
    full_lengths: tuple[tuple[int, int], ...] = ()
    mean_input: float = 0.0
    std_input: float = 0.0
    mean_output: float = 0.0
    std_output: float = 0.0

    def __post_init__(self):
        mode = LengthMode(self.mode)
        object.__setattr__(self, "mode", mode)
        if mode is LengthMode.FULL:
            if not self.full_lengths:
                raise ValidationError("lengths.full_lengths", "full mode needs a non-empty list")
            pairs = tuple((int(a), int(b)) for a, b in self.full_lengths)
            for i, (a, b) in enumerate(pairs):
                if a < 1 or b < 1:
                    raise ValidationError(f"lengths.full_lengths[{i}]", "token counts must be >= 1")
            object.__setattr__(self, "full_lengths", pairs)
        else:
            for name in ("mean_input", "mean_output"):
                if not getattr(self, name) > 0:
                    raise ValidationError(f"lengths.{name}", "must be > 0")
            for name in ("std_input", "std_output"):
                if getattr(self, name) < 0:
                    raise ValidationError(f"lengths.{name}", "must be >= 0")

    @classmethod
    def mean(cls, mean_input, std_input, mean_output, std_output) -> "LengthSpec":
        return cls(LengthMode.MEAN, (), float(mean_input), float(std_input),
                   float(mean_output), float(std_output))

    @classmethod
    def full(cls, pairs) -> "LengthSpec":
        return cls(LengthMode.FULL, tuple(pairs))

    def moments(self) -> tuple[float, float, float, float]:
        """(mean_input, std_input, mean_output, std_output); population std in full mode."""
        if self.mode is LengthMode.MEAN:
            return self.mean_input, self.std_input, self.mean_output, self.std_output
        arr = np.asarray(self.full_lengths, dtype=float)
        return (float(arr[:, 0].mean()), float(arr[:, 0].std()),
                float(arr[:, 1].mean()), float(arr[:, 1].std()))

    def as_mean(self) -> "LengthSpec":
        if self.mode is LengthMode.MEAN:
            return self
        return LengthSpec.mean(*self.moments())

    def to_json(self) -> dict:
        if self.mode is LengthMode.FULL:
            return {"mode": "full", "full_lengths": [list(p) for p in self.full_lengths]}
        return {
            "mode": "mean",
            "mean_input": self.mean_input,
            "std_input": self.std_input,
            "mean_output": self.mean_output,
            "std_output": self.std_output,
        }

    @classmethod
    def from_json(cls, doc: dict, base_dir: Path | None = None) -> "LengthSpec":
        mode = doc.get("mode")
        if mode == "full":
            if "csv" in doc:
                path = Path(doc["csv"])
                if base_dir is not None and not path.is_absolute():
                    path = base_dir / path
                return cls.full(read_lengths_csv(path))
            return cls.full(doc.get("full_lengths") or ())
        if mode == "mean":
            return cls.mean(doc["mean_input"], doc["std_input"], doc["mean_output"], doc["std_output"])
        raise ValidationError("lengths.mode", f"expected 'full' or 'mean', got {mode!r}")


@dataclass(frozen=True)
class AdapterSpec:
    adapter_id: int
    rank: int
    rate: float
    lengths: LengthSpec | None = None  # per-adapter override

    def __post_init__(self):
        if self.adapter_id < 0:
            raise ValidationError("adapters[].adapter_id", "must be >= 0")
        if self.rank <= 0:
            raise ValidationError(f"adapters[{self.adapter_id}].rank", "must be > 0")
        if not self.rate > 0:
            raise ValidationError(f"adapters[{self.adapter_id}].rate", "must be > 0")


@dataclass(frozen=True)
class WorkloadSpec:
    adapters: tuple[AdapterSpec, ...]
    lengths: LengthSpec
    duration: float
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "adapters", tuple(self.adapters))
        if not self.adapters:
            raise ValidationError("adapters", "must be non-empty")
        if self.duration < 0 or not math.isfinite(self.duration):
            raise ValidationError("duration_s", "must be a finite number >= 0")
        seen = set()
        for a in self.adapters:
            if a.adapter_id in seen:
                raise ValidationError("adapters[].adapter_id", f"duplicate adapter_id {a.adapter_id}")
            seen.add(a.adapter_id)

    def lengths_for(self, adapter: AdapterSpec) -> LengthSpec:
        return adapter.lengths if adapter.lengths is not None else self.lengths

    def with_mean_lengths(self) -> "WorkloadSpec":
        adapters = tuple(
            AdapterSpec(a.adapter_id, a.rank, a.rate, a.lengths.as_mean() if a.lengths else None)
            for a in self.adapters
        )
        return WorkloadSpec(adapters, self.lengths.as_mean(), self.duration, self.seed, self.name)

    def to_json(self) -> dict:
        adapters = []
        for a in self.adapters:
            item = {"adapter_id": a.adapter_id, "rank": a.rank, "rate": a.rate}
            if a.lengths is not None:
                item["lengths"] = a.lengths.to_json()
            adapters.append(item)
        doc = {"adapters": adapters, "lengths": self.lengths.to_json(),
               "duration_s": self.duration, "seed": self.seed}
        if self.name:
            doc["name"] = self.name
        return doc

    @classmethod
    def from_json(cls, doc: dict, base_dir: Path | None = None) -> "WorkloadSpec":
        from .schemas import validate

        validate(doc, "workload")
        lengths = LengthSpec.from_json(doc["lengths"], base_dir)
        adapters = tuple(
            AdapterSpec(
                int(a["adapter_id"]), int(a["rank"]), float(a["rate"]),
                LengthSpec.from_json(a["lengths"], base_dir) if "lengths" in a else None,
            )
            for a in doc["adapters"]
        )
        return cls(adapters, lengths, float(doc["duration_s"]), int(doc.get("seed", 0)), doc.get("name", ""))

    @classmethod
    def load(cls, path) -> "WorkloadSpec":
        path = Path(path)
        with path.open() as fh:
            return cls.from_json(json.load(fh), path.parent)


@dataclass(frozen=True)
class Request:
    request_id: int
    adapter_id: int
    arrival_time: float
    input_tokens: int
    output_tokens: int


@dataclass
class RequestArrays:
    """Struct-of-arrays form of an arrival stream, sorted by arrival."""

    arrival: np.ndarray
    adapter_id: np.ndarray
    input_tokens: np.ndarray
    output_tokens: np.ndarray
    seq: np.ndarray = field(default=None)  # per-adapter sequence number

    def __len__(self):
        return len(self.arrival)

    def to_requests(self) -> list[Request]:
        return [
            Request(i, int(a), float(t), int(x), int(y))
            for i, (t, a, x, y) in enumerate(
                zip(self.arrival, self.adapter_id, self.input_tokens, self.output_tokens)
            )
        ]

    @classmethod
    def from_requests(cls, requests: Sequence[Request]) -> "RequestArrays":
        """Explicit request lists; must already be sorted by arrival time."""
        reqs = list(requests)
        times = [r.arrival_time for r in reqs]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValidationError("requests", "must be sorted by arrival_time")
        for r in reqs:
            if r.input_tokens < 1 or r.output_tokens < 1 or r.arrival_time < 0:
                raise ValidationError(f"requests[{r.request_id}]", "lengths must be >= 1 and arrival >= 0")
        return cls(
            np.asarray(times, dtype=np.float64),
            np.asarray([r.adapter_id for r in reqs], dtype=np.int64),
            np.asarray([r.input_tokens for r in reqs], dtype=np.int64),
            np.asarray([r.output_tokens for r in reqs], dtype=np.int64),
            np.zeros(len(reqs), dtype=np.int64),
        )


def _rng(*entropy) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(e) for e in entropy]))


def _exponential_arrivals(rng: np.random.Generator, rate: float, duration: float) -> np.ndarray:
    if duration <= 0:
        return np.empty(0)
    expected = rate * duration
    chunk = int(expected + 6.0 * math.sqrt(expected) + 16)
    parts = []
    t0 = 0.0
    while True:
        gaps = rng.exponential(1.0 / rate, size=chunk)
        times = t0 + np.cumsum(gaps)
        parts.append(times)
        if times[-1] >= duration:
            break
        t0 = float(times[-1])
    times = np.concatenate(parts)
    return times[times < duration]


def sample_lengths(spec: LengthSpec, n: int, seed) -> np.ndarray:
    """Draw ``n`` (input, output) pairs as an ``(n, 2)`` int64 array.

    ``seed`` may be an int or a tuple of ints (used as SeedSequence entropy).
    Full mode walks through the list in a fresh shuffled order on every pass.
    Mean mode rounds a normal draw per dimension and clamps it to 1.
    """
    if n < 0:
        raise ValidationError("n", "must be >= 0")
    entropy = seed if isinstance(seed, (tuple, list)) else (seed,)
    out = np.empty((n, 2), dtype=np.int64)
    if n == 0:
        return out
    if spec.mode is LengthMode.FULL:
        rng = _rng(*entropy)
        pairs = np.asarray(spec.full_lengths, dtype=np.int64)
        filled = 0
        while filled < n:
            perm = rng.permutation(len(pairs))
            take = min(len(pairs), n - filled)
            out[filled:filled + take] = pairs[perm[:take]]
            filled += take
        return out
    if spec.std_input < 0 or spec.std_output < 0:
        raise ValidationError("lengths.std", "must be >= 0")
    rng_in = _rng(*entropy, 0)
    rng_out = _rng(*entropy, 1)
    out[:, 0] = np.maximum(np.rint(rng_in.normal(spec.mean_input, spec.std_input, n)), 1)
    out[:, 1] = np.maximum(np.rint(rng_out.normal(spec.mean_output, spec.std_output, n)), 1)
    return out


def arrival_arrays(spec: WorkloadSpec) -> RequestArrays:
    """Merged arrival stream for every adapter of ``spec``.

    Ties in arrival time are broken by adapter_id, then by the per-adapter
    sequence number.
    """
    times, ids, seqs, ins, outs = [], [], [], [], []
    for adapter in spec.adapters:
        t = _exponential_arrivals(_rng(spec.seed, adapter.adapter_id, _ARRIVAL_STREAM),
                                  adapter.rate, spec.duration)
        lens = sample_lengths(spec.lengths_for(adapter), len(t),
                              (spec.seed, adapter.adapter_id, _LENGTH_STREAM))
        times.append(t)
        ids.append(np.full(len(t), adapter.adapter_id, dtype=np.int64))
        seqs.append(np.arange(len(t), dtype=np.int64))
        ins.append(lens[:, 0])
        outs.append(lens[:, 1])
    t = np.concatenate(times)
    a = np.concatenate(ids)
    s = np.concatenate(seqs)
    order = np.lexsort((s, a, t))
    return RequestArrays(t[order], a[order], np.concatenate(ins)[order],
                         np.concatenate(outs)[order], s[order])


def generate_arrivals(spec: WorkloadSpec) -> list[Request]:
    return arrival_arrays(spec).to_requests()


def read_lengths_csv(path) -> list[tuple[int, int]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"input_tokens", "output_tokens"} <= set(reader.fieldnames):
            raise ValidationError(str(path), "expected columns input_tokens,output_tokens")
        return [(int(row["input_tokens"]), int(row["output_tokens"])) for row in reader]
