"""
Dataset Store

Reads and writes event datasets as a directory holding `meta.json` and
`events.bin`. The payload is little-endian float32, 1551 values per event:

    jet1(4) trk1(256) em1(256) had1(256) jet2(4) trk2(256) em2(256) had2(256)
    truth1(3) truth2(3) label(1)

Events are stored in the order of a hash of (seed, event index); the
train/validation/test splits are contiguous index ranges of that order.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple
import hashlib
import json
import logging

import numpy as np

from event import Event, FourVector, TauCandidate, normalize_pt, wrap_phi, IMAGE_SIZE

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
PAYLOAD_DTYPE = np.dtype("<f4")
JET_FIELDS = 4
TRUTH_FIELDS = 3
IMAGE_FIELDS = 3 * IMAGE_SIZE * IMAGE_SIZE
CANDIDATE_FIELDS = JET_FIELDS + IMAGE_FIELDS
RECORD_SIZE = 2 * CANDIDATE_FIELDS + 2 * TRUTH_FIELDS + 1
SPLITS = ("train", "valid", "test")
META_FILE = "meta.json"
PAYLOAD_FILE = "events.bin"


class DatasetFormatError(ValueError):
    """Base class for malformed dataset directories."""


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    pass


class CountMismatchError(DatasetFormatError):
    pass


def event_to_record(event: Event) -> np.ndarray:
    record = np.empty(RECORD_SIZE, dtype=np.float64)
    offset = 0
    for tau in event.taus:
        record[offset:offset + JET_FIELDS] = tau.jet.to_array()
        record[offset + JET_FIELDS:offset + CANDIDATE_FIELDS] = tau.images.reshape(-1)
        offset += CANDIDATE_FIELDS
    for tau in event.taus:
        record[offset:offset + TRUTH_FIELDS] = tau.truth
        offset += TRUTH_FIELDS
    record[offset] = event.label
    return record


def record_to_event(record: np.ndarray) -> Event:
    """Rebuild an Event from one stored record (parent mass from the truth pair)."""
    record = np.asarray(record, dtype=np.float64)
    truth_offset = 2 * CANDIDATE_FIELDS
    taus = []
    for k in range(2):
        base = k * CANDIDATE_FIELDS
        pt, eta, phi, m = record[base:base + JET_FIELDS]
        truth = record[truth_offset + k * TRUTH_FIELDS:truth_offset + (k + 1) * TRUTH_FIELDS]
        taus.append(TauCandidate(
            jet=FourVector(pt=float(pt), eta=float(eta), phi=wrap_phi(float(phi)), m=float(m)),
            images=record[base + JET_FIELDS:base + CANDIDATE_FIELDS].reshape(3, IMAGE_SIZE, IMAGE_SIZE),
            truth=tuple(float(t) for t in truth),
        ))
    event = Event(label=int(record[-1]), parent_mass=0.0, taus=taus)
    event.parent_mass = event.truth_mass()
    return event


def hash_order(seed: int, n_events: int) -> np.ndarray:
    """Event indices sorted by blake2b(seed, index)."""
    keys = [hashlib.blake2b(f"{seed}:{i}".encode(), digest_size=8).digest() for i in range(n_events)]
    return np.array(sorted(range(n_events), key=lambda i: keys[i]), dtype=np.int64)


def split_ranges(n_events: int, fractions: Sequence[float]) -> Dict[str, Tuple[int, int]]:
    """Contiguous [start, stop) ranges; train and valid are rounded, test takes the rest."""
    n_train = int(round(fractions[0] * n_events))
    n_valid = int(round(fractions[1] * n_events))
    n_valid = min(n_valid, n_events - n_train)
    return {
        "train": (0, n_train),
        "valid": (n_train, n_train + n_valid),
        "test": (n_train + n_valid, n_events),
    }


@dataclass
class DatasetMeta:
    format_version: int
    n_events: int
    seed: int
    generator: Dict[str, Any]
    splits: Dict[str, Tuple[int, int]]
    payload_sha256: str
    record_size: int = RECORD_SIZE
    dtype: str = "<f4"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": self.format_version,
            "n_events": self.n_events,
            "seed": self.seed,
            "generator": self.generator,
            "splits": {k: list(v) for k, v in self.splits.items()},
            "payload_sha256": self.payload_sha256,
            "record_size": self.record_size,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'DatasetMeta':
        return cls(
            format_version=data["format_version"],
            n_events=data["n_events"],
            seed=data["seed"],
            generator=data.get("generator", {}),
            splits={k: tuple(v) for k, v in data["splits"].items()},
            payload_sha256=data["payload_sha256"],
            record_size=data.get("record_size", RECORD_SIZE),
            dtype=data.get("dtype", "<f4"),
        )


@dataclass
class Batch:
    """Normalized model inputs and targets for a set of events (float32)."""
    jets: np.ndarray      # (B, 2, 4), pt as log(0.1 + pt)
    images: np.ndarray    # (B, 2, 3, 16, 16)
    truth: np.ndarray     # (B, 2, 3), pt as log(0.1 + pt)
    labels: np.ndarray    # (B,)

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, index) -> 'Batch':
        return Batch(self.jets[index], self.images[index], self.truth[index], self.labels[index])

    def minibatches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator['Batch']:
        """Yield consecutive mini-batches; shuffled when rng is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            yield self.take(order[start:start + batch_size])

    def n_batches(self, batch_size: int) -> int:
        return -(-len(self) // batch_size)


@dataclass
class EventDataset:
    """Loaded dataset: raw records plus their split ranges."""
    records: np.ndarray  # (N, 1551) float32, file order
    meta: DatasetMeta
    path: Optional[str] = None
    _batches: Dict[str, Batch] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def checksum(self) -> str:
        return self.meta.payload_sha256

    def raw_arrays(self) -> Dict[str, np.ndarray]:
        n = len(self.records)
        cand = self.records[:, :2 * CANDIDATE_FIELDS].reshape(n, 2, CANDIDATE_FIELDS)
        truth = self.records[:, 2 * CANDIDATE_FIELDS:2 * CANDIDATE_FIELDS + 2 * TRUTH_FIELDS]
        return {
            "jets": cand[:, :, :JET_FIELDS],
            "images": cand[:, :, JET_FIELDS:].reshape(n, 2, 3, IMAGE_SIZE, IMAGE_SIZE),
            "truth": truth.reshape(n, 2, TRUTH_FIELDS),
            "labels": self.records[:, -1],
        }

    def split(self, name: str) -> Batch:
        if name not in SPLITS:
            raise KeyError(f"Unknown split {name}; expected one of {SPLITS}")
        if name not in self._batches:
            start, stop = self.meta.splits[name]
            raw = self.raw_arrays()
            jets = raw["jets"][start:stop].astype(np.float32)
            truth = raw["truth"][start:stop].astype(np.float32)
            jets[..., 0] = normalize_pt(jets[..., 0].astype(np.float64))
            truth[..., 0] = normalize_pt(truth[..., 0].astype(np.float64))
            self._batches[name] = Batch(
                jets=jets,
                images=np.ascontiguousarray(raw["images"][start:stop], dtype=np.float32),
                truth=truth,
                labels=raw["labels"][start:stop].astype(np.float32),
            )
        return self._batches[name]

    def events(self, name: Optional[str] = None) -> List[Event]:
        start, stop = self.meta.splits[name] if name else (0, len(self))
        return [record_to_event(r) for r in self.records[start:stop]]

    def subset(self, n_events: int) -> 'EventDataset':
        """First n_events of every split, in proportion."""
        if n_events >= len(self):
            return self
        fraction = n_events / len(self)
        rows, ranges, cursor = [], {}, 0
        for name in SPLITS:
            start, stop = self.meta.splits[name]
            count = int(round((stop - start) * fraction))
            rows.append(self.records[start:start + count])
            ranges[name] = (cursor, cursor + count)
            cursor += count
        records = np.concatenate(rows)
        meta = DatasetMeta(self.meta.format_version, len(records), self.meta.seed, self.meta.generator,
                           ranges, payload_checksum(records))
        return EventDataset(records, meta, self.path)


def payload_checksum(records: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(records, dtype=PAYLOAD_DTYPE).tobytes()).hexdigest()


def build_dataset(events: Sequence[Event], seed: int, generator: Dict[str, Any],
                  fractions: Sequence[float]) -> EventDataset:
    """Order events by hash and assign splits (no I/O)."""
    order = hash_order(seed, len(events))
    records = np.stack([event_to_record(events[i]) for i in order]).astype(PAYLOAD_DTYPE)
    meta = DatasetMeta(
        format_version=FORMAT_VERSION,
        n_events=len(events),
        seed=seed,
        generator=generator,
        splits=split_ranges(len(events), fractions),
        payload_sha256=payload_checksum(records),
    )
    return EventDataset(records, meta)


def save_dataset(dataset: EventDataset, out_dir: str):
    path = Path(out_dir)
    try:
        path.mkdir(parents=True, exist_ok=True)
        with open(path / PAYLOAD_FILE, "wb") as f:
            f.write(np.ascontiguousarray(dataset.records, dtype=PAYLOAD_DTYPE).tobytes())
        with open(path / META_FILE, "w", encoding="utf-8") as f:
            json.dump(dataset.meta.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise OSError(f"Could not write dataset to {out_dir}: {e}") from e
    dataset.path = str(path)
    logger.info(f"Wrote {dataset.meta.n_events} events to {path} (sha256 {dataset.checksum[:12]})")


def write_dataset(events: Sequence[Event], cfg, out_dir: str) -> EventDataset:
    """Persist generated events; cfg is the GeneratorConfig that produced them."""
    dataset = build_dataset(events, cfg.seed, cfg.to_dict(), cfg.split_fractions)
    save_dataset(dataset, out_dir)
    return dataset


def load_dataset(data_dir: str) -> EventDataset:
    """Load and verify a dataset directory."""
    path = Path(data_dir)
    try:
        with open(path / META_FILE, "r", encoding="utf-8") as f:
            meta = DatasetMeta.from_dict(json.load(f))
    except FileNotFoundError:
        raise FileNotFoundError(f"Dataset metadata not found: {path / META_FILE}")
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"Invalid JSON format in {path / META_FILE}: {e}")
    except KeyError as e:
        raise DatasetFormatError(f"Missing required field in {path / META_FILE}: {e}")

    if meta.format_version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {meta.format_version} is not supported (expected {FORMAT_VERSION})")
    if meta.record_size != RECORD_SIZE:
        raise DatasetFormatError(f"{path}: record size {meta.record_size}, expected {RECORD_SIZE}")

    try:
        with open(path / PAYLOAD_FILE, "rb") as f:
            payload = f.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"Dataset payload not found: {path / PAYLOAD_FILE}")

    record_bytes = RECORD_SIZE * PAYLOAD_DTYPE.itemsize
    if len(payload) % record_bytes:
        raise TruncatedPayloadError(
            f"{path}: truncated payload ({len(payload)} bytes is not a whole number of events)")
    n_records = len(payload) // record_bytes
    if n_records != meta.n_events:
        raise CountMismatchError(f"{path}: header declares {meta.n_events} events, payload holds {n_records}")
    checksum = hashlib.sha256(payload).hexdigest()
    if checksum != meta.payload_sha256:
        raise ChecksumError(f"{path}: payload checksum {checksum[:12]} does not match {meta.payload_sha256[:12]}")

    records = np.frombuffer(payload, dtype=PAYLOAD_DTYPE).reshape(n_records, RECORD_SIZE).copy()
    logger.debug(f"Loaded {n_records} events from {path}")
    return EventDataset(records, meta, str(path))
