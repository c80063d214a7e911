"""Embedding records: file formats and synthetic identity clusters.

Two on-disk formats are supported:

* ``csv`` -- one record per line, ``id[,cam],f1,...,fd``. An optional header
  row is recognised when its last field is non-numeric; a header column named
  ``cam`` in second position marks the camera column. Without a header, the
  second column is read as a camera label only when it is non-numeric.
* ``binary`` -- ``b"GSRW"``, version byte ``1``, ``<u4`` record count,
  ``<u4`` d, ``u1`` has-cam flag, then per record a ``<u4``-length-prefixed
  UTF-8 id, optionally a length-prefixed cam, and ``d`` ``<f8`` values.
"""

import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ._validation import check_positive_int

logger = logging.getLogger(__name__)

MAGIC = b"GSRW"
VERSION = 1
FORMATS = ("csv", "binary")


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    id: str
    feature: np.ndarray
    cam: Optional[str] = None

    def __post_init__(self):
        feat = np.array(self.feature, dtype=np.float64)
        if feat.ndim != 1 or feat.size == 0:
            raise ValueError(f"feature of record {self.id!r} must be a non-empty vector")
        feat.setflags(write=False)
        object.__setattr__(self, "feature", feat)
        object.__setattr__(self, "id", str(self.id))
        if self.cam is not None:
            object.__setattr__(self, "cam", str(self.cam))

    @property
    def d(self):
        return self.feature.shape[0]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.cam == other.cam
            and np.array_equal(self.feature, other.feature)
        )

    __hash__ = None


@dataclass(frozen=True)
class EmbeddingSet:
    """A probe and an ordered gallery sharing one feature dimension."""

    probe: EmbeddingRecord
    gallery: tuple

    def __post_init__(self):
        gallery = tuple(self.gallery)
        object.__setattr__(self, "gallery", gallery)
        if len(gallery) < 2:
            raise ValueError(f"gallery needs at least 2 records, got {len(gallery)}")
        d = self.probe.d
        for rec in gallery:
            if rec.d != d:
                raise ValueError(
                    f"gallery record {rec.id!r} has dimension {rec.d}, probe has {d}"
                )

    @property
    def d(self):
        return self.probe.d

    @property
    def n(self):
        return len(self.gallery)

    @property
    def probe_feature(self):
        return self.probe.feature

    @property
    def gallery_features(self):
        return np.stack([rec.feature for rec in self.gallery])

    @classmethod
    def from_arrays(cls, probe, gallery, probe_id="probe", gallery_ids=None):
        gallery = np.asarray(gallery, dtype=np.float64)
        if gallery_ids is None:
            gallery_ids = [str(i) for i in range(gallery.shape[0])]
        return cls(
            EmbeddingRecord(probe_id, probe),
            tuple(EmbeddingRecord(i, g) for i, g in zip(gallery_ids, gallery)),
        )


@dataclass(frozen=True)
class SynthConfig:
    num_identities: int = 32
    images_per_identity: int = 6
    d: int = 16
    cluster_spread: float = 1.0
    center_spread: float = 1.0
    seed: int = 0

    def __post_init__(self):
        check_positive_int(self.num_identities, "num_identities")
        check_positive_int(self.images_per_identity, "images_per_identity")
        check_positive_int(self.d, "d")
        if not self.cluster_spread >= 0:
            raise ValueError("cluster_spread must be nonnegative")
        if not self.center_spread > 0:
            raise ValueError("center_spread must be positive")


def check_records(records):
    records = list(records)
    if not records:
        raise ValueError("record list is empty")
    d = records[0].d
    for i, rec in enumerate(records):
        if rec.d != d:
            raise ValueError(f"dimension mismatch: record {i} has d={rec.d}, expected {d}")
    return records, d


def records_to_arrays(records):
    """Split records into ``(features, ids, cams)``; cams is None if no record has one."""
    records, _ = check_records(records)
    X = np.stack([r.feature for r in records])
    ids = np.array([r.id for r in records], dtype=object)
    cams = None
    if any(r.cam is not None for r in records):
        cams = np.array([r.cam for r in records], dtype=object)
    return X, ids, cams


def generate_synthetic(cfg):
    """Draw Gaussian identity clusters.

    Identity ``i`` gets a center from ``N(0, center_spread**2 I)``; each of its
    images is that center plus ``N(0, cluster_spread**2 I)`` noise. Records are
    emitted identity by identity; ids are ``"id0000"``, ``"id0001"``, ...
    """
    if cfg.cluster_spread >= cfg.center_spread:
        logger.warning(
            "cluster_spread (%g) >= center_spread (%g): identities will overlap heavily",
            cfg.cluster_spread,
            cfg.center_spread,
        )
    rng = np.random.default_rng(cfg.seed)
    centers = rng.normal(0.0, cfg.center_spread, size=(cfg.num_identities, cfg.d))
    noise = rng.normal(
        0.0, 1.0, size=(cfg.num_identities, cfg.images_per_identity, cfg.d)
    )
    records = []
    for i in range(cfg.num_identities):
        for j in range(cfg.images_per_identity):
            feat = centers[i] + cfg.cluster_spread * noise[i, j]
            records.append(EmbeddingRecord(f"id{i:04d}", feat))
    return records


def _check_format(fmt):
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def save_embeddings(records, path, format="binary"):
    _check_format(format)
    records, d = check_records(records)
    has_cam = [r.cam is not None for r in records]
    if any(has_cam) and not all(has_cam):
        raise ValueError("either every record or no record must carry a camera label")
    if format == "binary":
        _save_binary(records, d, all(has_cam), Path(path))
    else:
        _save_csv(records, d, all(has_cam), Path(path))


def load_embeddings(path, format="binary"):
    _check_format(format)
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such embedding file: {path}")
    if format == "binary":
        return _load_binary(path)
    return _load_csv(path)


def _save_binary(records, d, has_cam, path):
    chunks = [MAGIC, struct.pack("<BIIB", VERSION, len(records), d, int(has_cam))]
    for rec in records:
        raw = rec.id.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        if has_cam:
            raw = rec.cam.encode("utf-8")
            chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(rec.feature.astype("<f8").tobytes())
    path.write_bytes(b"".join(chunks))


def _load_binary(path):
    buf = path.read_bytes()
    if not buf:
        raise ValueError(f"{path}: empty file")
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic bytes, not a GSRW embedding file")
    try:
        version, count, d, has_cam = struct.unpack_from("<BIIB", buf, 4)
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        if count == 0 or d == 0:
            raise ValueError(f"{path}: file holds no records")
        pos = 4 + struct.calcsize("<BIIB")

        def read_str():
            nonlocal pos
            (length,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            raw = buf[pos : pos + length]
            if len(raw) != length:
                raise ValueError("truncated string")
            pos += length
            return raw.decode("utf-8")

        records = []
        for _ in range(count):
            rid = read_str()
            cam = read_str() if has_cam else None
            if pos + 8 * d > len(buf):
                raise ValueError("truncated feature vector")
            feat = np.frombuffer(buf, dtype="<f8", count=d, offset=pos).astype(np.float64)
            pos += 8 * d
            records.append(EmbeddingRecord(rid, feat, cam))
    except (struct.error, UnicodeDecodeError) as exc:
        raise ValueError(f"{path}: unparsable record ({exc})") from None
    except ValueError as exc:
        if str(exc).startswith(str(path)):
            raise
        raise ValueError(f"{path}: {exc}") from None
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes after last record")
    return records


def _save_csv(records, d, has_cam, path):
    header = ["id"] + (["cam"] if has_cam else []) + [f"f{i}" for i in range(d)]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for rec in records:
            row = [rec.id] + ([rec.cam] if has_cam else [])
            # repr round-trips float64 exactly
            row.extend(repr(float(x)) for x in rec.feature)
            writer.writerow(row)


def _is_float(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


def _load_csv(path):
    with path.open(newline="") as fh:
        rows = [row for row in csv.reader(fh) if row and any(c.strip() for c in row)]
    if not rows:
        raise ValueError(f"{path}: empty file")
    has_cam = None
    first = rows[0]
    if len(first) >= 2 and not _is_float(first[-1]):
        has_cam = len(first) >= 2 and first[1].strip().lower() == "cam"
        rows = rows[1:]
        if not rows:
            raise ValueError(f"{path}: header but no records")
    if has_cam is None:
        has_cam = len(first) >= 3 and not _is_float(first[1])

    start = 2 if has_cam else 1
    records = []
    d = None
    for lineno, row in enumerate(rows, start=1):
        if len(row) <= start:
            raise ValueError(f"{path}: record {lineno} has no feature values")
        try:
            feat = np.array([float(x) for x in row[start:]], dtype=np.float64)
        except ValueError:
            raise ValueError(f"{path}: unparsable feature value in record {lineno}") from None
        if d is None:
            d = feat.shape[0]
        elif feat.shape[0] != d:
            raise ValueError(
                f"{path}: dimension mismatch in record {lineno}: got {feat.shape[0]}, expected {d}"
            )
        records.append(EmbeddingRecord(row[0], feat, row[1] if has_cam else None))
    return records
