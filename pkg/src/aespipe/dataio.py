"""File formats: manifests, feature tensors, metric tables, predictions, models.

* Manifest: UTF-8 JSON lines, one record per clip.
* Feature file (``.aesf``): ``b"AESF"``, then little-endian uint32 version,
  L, T, D, then L*T*D float32 values in [layer][frame][dim] order.
* Metric table / prediction table: CSV with ``utt_id`` first.
* Model file (``.aesm``): ``b"AESM"``, uint16 version, uint16 reserved,
  uint64 metadata length, JSON metadata, uint64 blob length, array blob,
  then the SHA-256 of all preceding bytes.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParseError, ShapeError
from .gbtfuse import CvEnsemble, FusionModel, GbtHyperparams, GbtModel, MetricFeatureVector, RegressionTree
from .grkan import GrKanLayer
from .predictor import AXES, AesDataset, AesPredictor, AesScores, AxisHead, EmbeddingTensor, LayerAggregator

SPLITS = ("train", "dev", "eval")

FEATURE_MAGIC = b"AESF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIIII")

MODEL_MAGIC = b"AESM"
MODEL_VERSION = 1


# ---------------------------------------------------------------- manifests

_KNOWN = ("utt_id", "system_id", "split", "feature_path", "metrics_path", "labels", "pseudo")


@dataclass
class ManifestRecord:
    utt_id: str
    system_id: str
    split: str
    feature_path: str | None = None
    metrics_path: str | None = None
    labels: AesScores | None = None
    pseudo: bool = False
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {
            "utt_id": self.utt_id,
            "system_id": self.system_id,
            "split": self.split,
            "feature_path": self.feature_path,
            "metrics_path": self.metrics_path,
            "labels": None if self.labels is None else asdict(self.labels),
            "pseudo": self.pseudo,
        }
        d.update(self.extra)
        return d


def _record_from_json(obj, lineno) -> ManifestRecord:
    if not isinstance(obj, dict):
        raise ParseError(f"line {lineno}: expected an object", lineno)
    for key in ("utt_id", "system_id", "split"):
        if not isinstance(obj.get(key), str):
            raise ParseError(f"line {lineno}: missing or non-string {key!r}", lineno)
    if obj["split"] not in SPLITS:
        raise DataError(f"line {lineno}: unknown split {obj['split']!r}")
    labels = obj.get("labels")
    if labels is not None:
        if not isinstance(labels, dict):
            raise DataError(f"line {lineno}: labels must be an object")
        missing = [a for a in AXES if a not in labels]
        if missing:
            raise DataError(f"line {lineno}: labels missing {', '.join(missing)}")
        try:
            labels = AesScores(*(float(labels[a]) for a in AXES))
        except (TypeError, ValueError) as exc:
            raise DataError(f"line {lineno}: non-numeric label") from exc
    return ManifestRecord(
        utt_id=obj["utt_id"],
        system_id=obj["system_id"],
        split=obj["split"],
        feature_path=obj.get("feature_path"),
        metrics_path=obj.get("metrics_path"),
        labels=labels,
        pseudo=bool(obj.get("pseudo", False)),
        extra={k: v for k, v in obj.items() if k not in _KNOWN},
    )


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    seen = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: {exc.msg}", lineno) from exc
            rec = _record_from_json(obj, lineno)
            if rec.utt_id in seen:
                raise DataError(
                    f"line {lineno}: duplicate utt_id {rec.utt_id!r} (first on line {seen[rec.utt_id]})"
                )
            seen[rec.utt_id] = lineno
            records.append(rec)
    return records


def write_manifest(records, path) -> None:
    ids = set()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            if rec.utt_id in ids:
                raise DataError(f"duplicate utt_id {rec.utt_id!r}")
            ids.add(rec.utt_id)
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")


# ------------------------------------------------------------ feature files

def write_features(t: EmbeddingTensor, path) -> None:
    L, T, D = t.data.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, L, T, D))
        fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def read_features(path) -> EmbeddingTensor:
    raw = Path(path).read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise FormatError(f"{path}: file too short for a feature header")
    magic, version, L, T, D = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature version {version}")
    expected = L * T * D * 4
    actual = len(raw) - _FEATURE_HEADER.size
    if actual != expected:
        raise FormatError(f"{path}: payload is {actual} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(L, T, D)
    return EmbeddingTensor(data.astype(np.float64))


# ------------------------------------------------------------- CSV tables

def _fmt(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


def write_metric_table(names, rows: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["utt_id", *names])
        for utt, values in rows.items():
            values = values.values if isinstance(values, MetricFeatureVector) else values
            w.writerow([utt, *(_fmt(v) for v in values)])


def read_metric_table(path):
    """Return ``(feature_names, {utt_id: MetricFeatureVector})``."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: missing header row", 1) from None
        if not header or header[0] != "utt_id":
            raise ParseError(f"{path}: first column must be utt_id", 1)
        names = header[1:]
        rows = {}
        for rowno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: row {rowno} has {len(row)} cells, header has {len(header)}", rowno
                )
            utt = row[0]
            if utt in rows:
                raise DataError(f"{path}: duplicate utt_id {utt!r} at row {rowno}")
            try:
                vals = [float(c) if c.strip() else np.nan for c in row[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}: row {rowno}: {exc}", rowno) from exc
            rows[utt] = MetricFeatureVector(np.array(vals), names)
    return names, rows


def write_predictions(preds: dict, path) -> None:
    """``preds`` maps utt_id to a 4-vector or AesScores."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["utt_id", *AXES])
        for utt, v in preds.items():
            arr = v.as_array() if hasattr(v, "as_array") else np.asarray(v, dtype=float)
            w.writerow([utt, *(repr(float(x)) for x in arr)])


def read_predictions(path) -> dict:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["utt_id", *AXES]:
            raise ParseError(f"{path}: header must be utt_id,{','.join(AXES)}", 1)
        out = {}
        for rowno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 5:
                raise ParseError(f"{path}: row {rowno} has {len(row)} cells, expected 5", rowno)
            if row[0] in out:
                raise DataError(f"{path}: duplicate utt_id {row[0]!r} at row {rowno}")
            try:
                out[row[0]] = AesScores(*(float(c) for c in row[1:]))
            except ValueError as exc:
                raise ParseError(f"{path}: row {rowno}: {exc}", rowno) from exc
    return out


# -------------------------------------------------- manifest-driven loading

def resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def load_dataset(records, base_dir) -> AesDataset:
    """Read feature files for ``records`` and time-pool them."""
    base_dir = Path(base_dir)
    pooled, labels = [], []
    for rec in records:
        if not rec.feature_path:
            raise DataError(f"record {rec.utt_id!r} has no feature_path")
        pooled.append(read_features(resolve(base_dir, rec.feature_path)).time_pool())
        labels.append(rec.labels.as_array() if rec.labels else np.full(4, np.nan))
    ids = [r.utt_id for r in records]
    if not pooled:
        return AesDataset([], [], np.zeros((0, 1, 1)), np.zeros((0, 4)))
    shapes = {p.shape for p in pooled}
    if len(shapes) != 1:
        raise ShapeError(f"feature files disagree on shape: {sorted(shapes)}")
    ds = AesDataset(ids, [r.system_id for r in records], np.stack(pooled), np.stack(labels))
    ds.pseudo = np.array([r.pseudo for r in records], dtype=bool)
    return ds


def load_metrics(records, base_dir):
    """Stack metric vectors for ``records``; returns ``(names, X)``."""
    base_dir = Path(base_dir)
    cache = {}
    names, rows = None, []
    for rec in records:
        if not rec.metrics_path:
            raise DataError(f"record {rec.utt_id!r} has no metrics_path")
        path = resolve(base_dir, rec.metrics_path)
        if path not in cache:
            cache[path] = read_metric_table(path)
        tnames, table = cache[path]
        if names is None:
            names = tnames
        elif tnames != names:
            raise DataError(f"{path}: metric columns differ from earlier tables")
        if rec.utt_id not in table:
            raise DataError(f"{path}: no metrics for {rec.utt_id!r}")
        rows.append(table[rec.utt_id].values)
    X = np.stack(rows) if rows else np.zeros((0, len(names or [])))
    return names or [], X


# -------------------------------------------------------------- model files

class _Packer:
    def __init__(self):
        self.chunks = []
        self.offset = 0

    def add(self, arr) -> dict:
        arr = np.asarray(arr)
        kind = {"f": "<f8", "i": "<i8", "u": "<i8", "b": "|b1"}[arr.dtype.kind]
        data = np.ascontiguousarray(arr, dtype=kind).tobytes()
        ref = {"__array__": [kind, list(arr.shape), self.offset]}
        self.chunks.append(data)
        self.offset += len(data)
        return ref


def _unpack(blob: bytes, ref):
    kind, shape, offset = ref["__array__"]
    count = int(np.prod(shape)) if shape else 1
    size = np.dtype(kind).itemsize * count
    if offset + size > len(blob):
        raise FormatError("model array points past the end of the blob")
    return np.frombuffer(blob, dtype=kind, count=count, offset=offset).reshape(shape).copy()


def _encode_kan(m: AesPredictor, pk: _Packer) -> dict:
    return {
        "kind": "kan",
        "score_range": list(m.score_range),
        "heads": [
            {
                "logits": pk.add(h.aggregator.logits),
                "layers": [
                    {k: pk.add(v) for k, v in zip(("num", "den", "weight", "bias"), l.parameters())}
                    for l in h.layers
                ],
            }
            for h in m.heads
        ],
    }


def _decode_kan(doc, blob) -> AesPredictor:
    heads = []
    for h in doc["heads"]:
        layers = [GrKanLayer(*(_unpack(blob, l[k]) for k in ("num", "den", "weight", "bias")))
                  for l in h["layers"]]
        heads.append(AxisHead(LayerAggregator(_unpack(blob, h["logits"])), layers))
    return AesPredictor(heads, tuple(doc["score_range"]))


_TREE_FIELDS = ("feature", "threshold", "left", "right", "default_left", "value")


def _encode_gbt(m: GbtModel, pk: _Packer) -> dict:
    sizes = [t.n_nodes for t in m.trees]
    packed = {
        f: pk.add(np.concatenate([getattr(t, f) for t in m.trees]) if m.trees
                  else np.zeros(0, dtype=bool if f == "default_left" else float))
        for f in _TREE_FIELDS
    }
    return {"base_score": m.base_score, "shrinkage": m.shrinkage, "n_features": m.n_features,
            "tree_sizes": pk.add(np.array(sizes, dtype=np.int64)), "nodes": packed}


def _decode_gbt(doc, blob) -> GbtModel:
    sizes = _unpack(blob, doc["tree_sizes"])
    cols = {f: _unpack(blob, doc["nodes"][f]) for f in _TREE_FIELDS}
    trees, start = [], 0
    for s in sizes:
        trees.append(RegressionTree(*(cols[f][start : start + s] for f in _TREE_FIELDS)))
        start += s
    return GbtModel(doc["base_score"], trees, doc["shrinkage"], doc["n_features"])


def _encode_fusion(m: FusionModel, pk: _Packer) -> dict:
    return {
        "kind": "fusion",
        "feature_names": list(m.feature_names),
        "hyperparams": [asdict(h) for h in m.hyperparams],
        "axes": [{"fold_mse": list(cv.fold_mse), "models": [_encode_gbt(g, pk) for g in cv.models]}
                 for cv in m.axes],
    }


def _decode_fusion(doc, blob) -> FusionModel:
    axes = [CvEnsemble([_decode_gbt(g, blob) for g in a["models"]], list(a["fold_mse"]))
            for a in doc["axes"]]
    return FusionModel(list(doc["feature_names"]), axes,
                       [GbtHyperparams(**h) for h in doc["hyperparams"]])


@dataclass
class StackedModel:
    """Ensemble weights together with the member models they combine."""

    members: list
    member_names: list[str]
    weights: object  # EnsembleWeights


def _encode(obj, pk):
    from .ensemble import EnsembleWeights

    if isinstance(obj, AesPredictor):
        return _encode_kan(obj, pk)
    if isinstance(obj, FusionModel):
        return _encode_fusion(obj, pk)
    if isinstance(obj, EnsembleWeights):
        return {"kind": "weights", "step": obj.step, "weights": pk.add(obj.weights)}
    if isinstance(obj, StackedModel):
        return {
            "kind": "ensemble",
            "member_names": list(obj.member_names),
            "members": [_encode(m, pk) for m in obj.members],
            "weights": _encode(obj.weights, pk),
        }
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _decode(doc, blob):
    from .ensemble import EnsembleWeights

    kind = doc.get("kind")
    if kind == "kan":
        return _decode_kan(doc, blob)
    if kind == "fusion":
        return _decode_fusion(doc, blob)
    if kind == "weights":
        return EnsembleWeights(_unpack(blob, doc["weights"]), doc["step"])
    if kind == "ensemble":
        return StackedModel([_decode(m, blob) for m in doc["members"]],
                            list(doc["member_names"]), _decode(doc["weights"], blob))
    raise FormatError(f"unknown model kind {kind!r}")


def model_to_bytes(obj) -> bytes:
    pk = _Packer()
    meta = json.dumps(_encode(obj, pk), sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(pk.chunks)
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<HH", MODEL_VERSION, 0))
    buf.write(struct.pack("<Q", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def model_from_bytes(raw: bytes, name="model"):
    if len(raw) < 16 + 8 + 32 or raw[:4] != MODEL_MAGIC:
        raise FormatError(f"{name}: not a model file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{name}: checksum mismatch")
    version, _ = struct.unpack_from("<HH", body, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"{name}: unsupported model version {version}")
    (meta_len,) = struct.unpack_from("<Q", body, 8)
    meta_end = 16 + meta_len
    if meta_end + 8 > len(body):
        raise FormatError(f"{name}: truncated metadata")
    (blob_len,) = struct.unpack_from("<Q", body, meta_end)
    blob = body[meta_end + 8 :]
    if len(blob) != blob_len:
        raise FormatError(f"{name}: blob is {len(blob)} bytes, header says {blob_len}")
    try:
        doc = json.loads(body[16:meta_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{name}: corrupt metadata") from exc
    return _decode(doc, blob)


def save_model(obj, path) -> None:
    Path(path).write_bytes(model_to_bytes(obj))


def load_model(path):
    return model_from_bytes(Path(path).read_bytes(), str(path))
