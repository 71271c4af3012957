"""Feature-level data model, synthetic generator and on-disk formats.

Two text formats live here, both UTF-8 with LF line endings:

``.posplit``  one feature split.  Header::

    #posplit
    version: 1
    role: train
    t: 5
    h: 64
    count: 1200
    crc32: 1a2b3c4d

followed by ``count`` records, one per line, whitespace separated::

    image_id kind category annotated cls_score f_1 ... f_h

``kind`` is ``id``, ``ood`` or ``bg``; ``category`` is ``-1`` unless kind is
``id``.  Floats are written with ``repr`` so the round-trip is bit exact.

``.podump``  scored detections grouped by image.  Same header style (magic
``#podump``, ``version``, ``count`` = number of images, ``crc32``), then JSON
lines: an image line ``{"type": "image", "image_id", "source", "k"}``
followed by that image's ``{"type": "pred", "image_id", "source",
"cls_score", "ood_score"[, "g"]}`` lines.

``crc32`` covers the raw bytes of every header line above it, so any
single-byte corruption of a header is detected.

Random numbers come from ``numpy.random.Generator(PCG64(seed))``; Gaussian
draws use that generator's ``standard_normal`` (ziggurat), which numpy keeps
stable across platforms for a given bit generator.
"""
from __future__ import annotations

import enum
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
SPLIT_MAGIC = "#posplit"
DUMP_MAGIC = "#podump"
ROLES = ("train", "id_eval", "ood_eval")
SOURCES = ("id_dataset", "ood_dataset")


class ParseError(ValueError):
    """A file could not be parsed; the message names the line or record."""


class FormatError(ValueError):
    """A file parsed but violates the format contract (magic, version, widths)."""


class GenerationError(RuntimeError):
    pass


class Kind(str, enum.Enum):
    ID = "id"
    OOD = "ood"
    BACKGROUND = "bg"


@dataclass(frozen=True)
class FeatureRecord:
    image_id: int
    feature: np.ndarray
    kind: Kind
    category: int = -1
    cls_score: float = 1.0
    annotated: bool = False

    def __post_init__(self):
        if self.kind is Kind.ID and self.category < 0:
            raise ValueError("ID records need a category")
        if self.kind is not Kind.ID and self.category != -1:
            raise ValueError(f"{self.kind.value} records carry no category")
        if not 0.0 <= self.cls_score <= 1.0:
            raise ValueError(f"cls_score {self.cls_score} outside [0, 1]")

    def __eq__(self, other):
        if not isinstance(other, FeatureRecord):
            return NotImplemented
        return (self.image_id == other.image_id and self.kind is other.kind
                and self.category == other.category and self.cls_score == other.cls_score
                and self.annotated == other.annotated
                and np.array_equal(self.feature, other.feature))

    __hash__ = None


@dataclass
class DatasetSplit:
    records: list[FeatureRecord]
    t: int
    h: int
    role: str = "train"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        for i, rec in enumerate(self.records):
            if rec.feature.shape != (self.h,):
                raise FormatError(f"record {i}: feature width {rec.feature.shape} != h={self.h}")
            if rec.kind is Kind.ID and rec.category >= self.t:
                raise ValueError(f"record {i}: category {rec.category} >= t={self.t}")
            if self.role == "train" and rec.kind is Kind.OOD:
                raise ValueError(f"record {i}: train split cannot hold OOD records")

    def __len__(self):
        return len(self.records)

    def features(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.h))
        return np.stack([r.feature for r in self.records])

    def labels(self) -> np.ndarray:
        return np.array([r.category for r in self.records], dtype=np.int64)

    def kinds(self) -> list[Kind]:
        return [r.kind for r in self.records]


@dataclass
class SyntheticConfig:
    t: int = 5
    h: int = 64
    per_class: int = 200
    class_separation: float = 8.0
    noise_sigma: float = 1.0
    ood_clusters: int = 3
    ood_per_cluster: int = 200
    background_per_image: int = 2
    objects_per_image: int = 4
    seed: int = 0
    # background std, as a multiple of noise_sigma
    background_scale: float = 2.0
    # distance of each OOD mean from its nearest ID mean, as a multiple of
    # class_separation; None places OOD means anywhere on the ID sphere
    ood_offset: float | None = None

    def validate(self) -> None:
        for name in ("per_class", "ood_clusters", "ood_per_cluster", "background_per_image", "objects_per_image"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.t < 2:
            raise ValueError("t must be >= 2")
        if self.h < 1:
            raise ValueError("h must be >= 1")
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be > 0")
        if self.ood_offset is not None and self.ood_offset < 0.5:
            raise ValueError("ood_offset must be >= 0.5 (OOD means stay class_separation/2 from ID means)")
        if self.objects_per_image < 1 and (self.per_class > 0 or self.ood_per_cluster > 0):
            raise ValueError("objects_per_image must be >= 1 when records are generated")


def _place_means(rng, count, h, radius, min_dist, anchors=None, anchor_dist=0.0, retries=1000):
    means = []
    attempts = 0
    while len(means) < count:
        attempts += 1
        if attempts > retries * max(count, 1):
            raise GenerationError(f"could not place {count} means with separation {min_dist} after {attempts} draws")
        v = rng.standard_normal(h)
        v *= radius / np.linalg.norm(v)
        if any(np.linalg.norm(v - m) < min_dist for m in means):
            continue
        if anchors is not None and any(np.linalg.norm(v - a) < anchor_dist for a in anchors):
            continue
        means.append(v)
    return np.array(means).reshape(count, h)


def _place_near_ood(rng, id_means, count, offset, min_dist, retries=1000):
    """OOD means at distance ``offset`` from a randomly chosen ID mean."""
    h = id_means.shape[1]
    out = []
    for attempt in range(retries * max(count, 1)):
        if len(out) == count:
            break
        base = id_means[rng.integers(len(id_means))]
        v = rng.standard_normal(h)
        cand = base + offset * v / np.linalg.norm(v)
        if all(np.linalg.norm(cand - m) >= min_dist for m in id_means):
            out.append(cand)
    if len(out) < count:
        raise GenerationError(f"could not place {count} OOD means at offset {offset}")
    return np.array(out).reshape(count, h)


def generate_synthetic(cfg: SyntheticConfig) -> tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    """Draw train / id_eval / ood_eval splits from Gaussian clusters.

    ID means sit on a sphere of radius ``class_separation`` with pairwise
    distance at least ``class_separation``.  OOD means sit ``ood_offset *
    class_separation`` away from a random ID mean (or, with ``ood_offset=None``,
    anywhere on the same sphere), always at least ``class_separation / 2`` from
    every ID mean.  Each image holds
    ``objects_per_image`` annotated objects plus ``background_per_image``
    distractors drawn around the origin.
    """
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    sep = float(cfg.class_separation)
    id_means = _place_means(rng, cfg.t, cfg.h, sep, sep)
    if cfg.ood_offset is None:
        ood_means = _place_means(rng, cfg.ood_clusters, cfg.h, sep, 0.0, anchors=id_means, anchor_dist=sep / 2)
    else:
        ood_means = _place_near_ood(rng, id_means, cfg.ood_clusters, cfg.ood_offset * sep, sep / 2)
    bg_sigma = cfg.background_scale * cfg.noise_sigma

    def id_split(role, first_image):
        labels = np.repeat(np.arange(cfg.t), cfg.per_class)
        rng.shuffle(labels)
        feats = id_means[labels] + cfg.noise_sigma * rng.standard_normal((labels.size, cfg.h))
        return _group(role, [(Kind.ID, int(c), f) for c, f in zip(labels, feats)], first_image, distractors=True)

    def _group(role, objs, first_image, distractors):
        records = []
        image_id = first_image
        for start in range(0, len(objs), max(cfg.objects_per_image, 1)):
            for kind, cat, feat in objs[start:start + cfg.objects_per_image]:
                if kind is Kind.ID:
                    records.append(FeatureRecord(image_id, feat, kind, cat, float(rng.uniform(0.5, 1.0)), True))
                else:
                    records.append(FeatureRecord(image_id, feat, kind, -1, float(rng.uniform(0.5, 1.0)), False))
            if distractors:
                for _ in range(cfg.background_per_image):
                    feat = bg_sigma * rng.standard_normal(cfg.h)
                    records.append(FeatureRecord(image_id, feat, Kind.BACKGROUND, -1, float(rng.uniform(0.0, 0.5)), False))
            image_id += 1
        return DatasetSplit(records, cfg.t, cfg.h, role), image_id

    train, next_id = id_split("train", 0)
    id_eval, next_id = id_split("id_eval", next_id)
    ood_labels = np.repeat(np.arange(cfg.ood_clusters), cfg.ood_per_cluster)
    rng.shuffle(ood_labels)
    ood_feats = (ood_means[ood_labels] if ood_labels.size else np.zeros((0, cfg.h))) \
        + cfg.noise_sigma * rng.standard_normal((ood_labels.size, cfg.h))
    ood_eval, _ = _group("ood_eval", [(Kind.OOD, -1, f) for f in ood_feats], next_id, distractors=False)
    return train, id_eval, ood_eval


# -- shared header handling -------------------------------------------------

def _write_header(magic: str, fields: list[tuple[str, object]]) -> str:
    lines = [magic] + [f"{k}: {v}" for k, v in fields]
    body = "".join(line + "\n" for line in lines)
    crc = zlib.crc32(body.encode("utf-8"))
    return body + f"crc32: {crc:08x}\n"


def _read_header(lines: list[str], magic: str, keys: tuple[str, ...]) -> tuple[dict[str, str], int]:
    """Parse and verify a header; returns the fields and the index of the first body line."""
    if not lines or lines[0] != magic:
        raise FormatError(f"line 1: bad magic, expected {magic!r}")
    n = len(keys) + 2
    if len(lines) < n:
        raise ParseError(f"line {len(lines) + 1}: truncated header")
    out: dict[str, str] = {}
    for lineno, line in enumerate(lines[1:n], start=2):
        key, sep, value = line.partition(": ")
        if not sep:
            raise ParseError(f"line {lineno}: expected 'key: value', got {line!r}")
        out[key] = value
    missing = [k for k in keys + ("crc32",) if k not in out]
    if missing:
        raise ParseError(f"header missing field(s) {', '.join(missing)}")
    body = "".join(line + "\n" for line in lines[:n - 1])
    crc = f"{zlib.crc32(body.encode('utf-8')):08x}"
    if out["crc32"] != crc:
        raise FormatError(f"line {n}: header checksum mismatch (stored {out['crc32']!r}, computed {crc!r})")
    if out.get("version") != str(FORMAT_VERSION):
        raise FormatError(f"unsupported version {out.get('version')!r}")
    return out, n


def _header_int(fields, key, minimum=0):
    try:
        v = int(fields[key])
    except ValueError:
        raise ParseError(f"header field {key!r} is not an integer: {fields[key]!r}") from None
    if v < minimum:
        raise FormatError(f"header field {key!r} must be >= {minimum}")
    return v


def _read_lines(path) -> list[str]:
    data = Path(path).read_bytes()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not valid UTF-8 ({exc})") from None
    if text and not text.endswith("\n"):
        raise ParseError(f"{path}: truncated (no trailing newline)")
    return text.split("\n")[:-1] if text else []


# -- .posplit ----------------------------------------------------------------

def dumps_split(split: DatasetSplit) -> str:
    out = [_write_header(SPLIT_MAGIC, [("version", FORMAT_VERSION), ("role", split.role), ("t", split.t),
                                       ("h", split.h), ("count", len(split.records))])]
    for r in split.records:
        feats = " ".join(repr(float(x)) for x in r.feature)
        out.append(f"{r.image_id} {r.kind.value} {r.category} {int(r.annotated)} {float(r.cls_score)!r} {feats}".rstrip() + "\n")
    return "".join(out)


def save_split(split: DatasetSplit, path) -> None:
    Path(path).write_bytes(dumps_split(split).encode("utf-8"))


def load_split(path) -> DatasetSplit:
    lines = _read_lines(path)
    fields, start = _read_header(lines, SPLIT_MAGIC, ("version", "role", "t", "h", "count"))
    role = fields["role"]
    if role not in ROLES:
        raise FormatError(f"unknown role {role!r}")
    t = _header_int(fields, "t", 2)
    h = _header_int(fields, "h", 1)
    count = _header_int(fields, "count")
    body = lines[start:]
    if len(body) != count:
        raise ParseError(f"line {start + len(body) + 1}: expected {count} records, found {len(body)}")
    kinds = {k.value: k for k in Kind}
    records = []
    for i, line in enumerate(body):
        lineno = start + i + 1
        parts = line.split(" ")
        if len(parts) != 5 + h:
            raise FormatError(f"line {lineno}: expected {5 + h} fields, got {len(parts)}")
        try:
            image_id, kind, cat, ann, score = int(parts[0]), kinds[parts[1]], int(parts[2]), int(parts[3]), float(parts[4])
            feat = np.array([float(x) for x in parts[5:]], dtype=np.float64)
        except (ValueError, KeyError) as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        if ann not in (0, 1):
            raise ParseError(f"line {lineno}: annotated flag must be 0 or 1")
        if not np.all(np.isfinite(feat)):
            raise ParseError(f"line {lineno}: non-finite feature value")
        try:
            records.append(FeatureRecord(image_id, feat, kind, cat, score, bool(ann)))
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
    try:
        return DatasetSplit(records, t, h, role)
    except ValueError as exc:
        raise FormatError(str(exc)) from None


# -- .podump -----------------------------------------------------------------

@dataclass
class ScoredPrediction:
    image_id: int
    source: str
    cls_score: float
    ood_score: float
    g: int | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")


@dataclass
class ImageGroup:
    image_id: int
    source: str
    k: int
    predictions: list[ScoredPrediction] = field(default_factory=list)


def dumps_detection_dump(groups: list[ImageGroup]) -> str:
    out = [_write_header(DUMP_MAGIC, [("version", FORMAT_VERSION), ("count", len(groups))])]
    for grp in groups:
        out.append(json.dumps({"type": "image", "image_id": grp.image_id, "source": grp.source, "k": grp.k}) + "\n")
        for p in grp.predictions:
            rec = {"type": "pred", "image_id": p.image_id, "source": p.source,
                   "cls_score": float(p.cls_score), "ood_score": float(p.ood_score)}
            if p.g is not None:
                rec["g"] = int(p.g)
            out.append(json.dumps(rec) + "\n")
    return "".join(out)


def save_detection_dump(groups: list[ImageGroup], path) -> None:
    Path(path).write_bytes(dumps_detection_dump(groups).encode("utf-8"))


_IMAGE_FIELDS = {"image_id": int, "source": str, "k": int}
_PRED_FIELDS = {"image_id": int, "source": str, "cls_score": float, "ood_score": float}


def _require(rec: dict, fields: dict, index: int) -> None:
    for name, typ in fields.items():
        if name not in rec:
            raise ParseError(f"record {index}: missing required field {name!r}")
        val = rec[name]
        ok = isinstance(val, (int, float)) and not isinstance(val, bool) if typ is float else isinstance(val, typ) and not isinstance(val, bool)
        if not ok:
            raise ParseError(f"record {index}: field {name!r} has wrong type ({val!r})")


def load_detection_dump(path) -> list[ImageGroup]:
    lines = _read_lines(path)
    fields, start = _read_header(lines, DUMP_MAGIC, ("version", "count"))
    count = _header_int(fields, "count")
    groups: list[ImageGroup] = []
    for index, line in enumerate(lines[start:]):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"record {index} (line {start + index + 1}): {exc}") from None
        if not isinstance(rec, dict) or rec.get("type") not in ("image", "pred"):
            raise ParseError(f"record {index}: missing required field 'type'")
        if rec["type"] == "image":
            _require(rec, _IMAGE_FIELDS, index)
            if rec["source"] not in SOURCES:
                raise ParseError(f"record {index}: unknown source {rec['source']!r}")
            if rec["k"] < 0:
                raise ParseError(f"record {index}: field 'k' must be >= 0")
            groups.append(ImageGroup(rec["image_id"], rec["source"], rec["k"]))
        else:
            _require(rec, _PRED_FIELDS, index)
            if not groups or groups[-1].image_id != rec["image_id"]:
                raise ParseError(f"record {index}: prediction for image {rec['image_id']} outside its image block")
            if rec["source"] != groups[-1].source:
                raise ParseError(f"record {index}: source {rec['source']!r} disagrees with image header")
            g = rec.get("g")
            groups[-1].predictions.append(ScoredPrediction(rec["image_id"], rec["source"], float(rec["cls_score"]),
                                                           float(rec["ood_score"]), None if g is None else int(g)))
    if len(groups) != count:
        raise ParseError(f"header declares {count} images, found {len(groups)}")
    return groups
