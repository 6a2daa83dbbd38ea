"""Datasets, checkpoints, and deterministic on-disk artifacts.

Binary container
----------------
Datasets and checkpoints share one container layout::

    magic (8 bytes)  | header length (uint64 LE) | header JSON | payload

The header is canonical JSON (sorted keys, no whitespace) describing every
payload array (key, dtype, shape, offset, byte length) plus format version
and a SHA-256 of the payload.  Arrays are stored C-order, little-endian,
back to back.  Nothing in the container depends on wall-clock time, so a
repeated run writes byte-identical files — that property is load-bearing
for reproducibility checks and is verified by the test suite.

CSV artifacts use LF line endings and ``repr`` float formatting (shortest
round-trip decimal), with provenance recorded in leading ``#`` comment
lines.

IDX image/label files (the classic 28x28 digit format) can be imported;
synthetic Gaussian-blob datasets provide a self-contained fallback with the
same interface.
"""

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import LayoutEntry, ParamVector
from .errors import CorruptionError, FormatError, VersionError
from .tensorops import make_rng

DATASET_MAGIC = b"HLDS0001"
CHECKPOINT_MAGIC = b"HLCK0001"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Canonical JSON + hashing.
# ---------------------------------------------------------------------------


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(obj):
    """Short stable fingerprint of a JSON-serializable configuration."""
    return sha256_bytes(canonical_json(obj).encode("utf-8"))[:12]


# ---------------------------------------------------------------------------
# Container primitives.
# ---------------------------------------------------------------------------


def _write_container(path, magic, header, arrays):
    """``arrays`` is an ordered {key: ndarray}; offsets are filled in here."""
    payload = io.BytesIO()
    index = []
    for key, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        index.append({
            "key": key,
            "dtype": arr.dtype.str.lstrip("<=|"),
            "shape": list(arr.shape),
            "offset": payload.tell(),
            "nbytes": len(raw),
        })
        payload.write(raw)
    blob = payload.getvalue()
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["arrays"] = index
    header["payload_sha256"] = sha256_bytes(blob)
    hbytes = canonical_json(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        f.write(blob)


def _read_container(path, magic):
    with open(path, "rb") as f:
        got = f.read(8)
        if got[:4] != magic[:4]:
            raise FormatError(f"{path}: bad magic {got!r}")
        if got != magic:
            raise VersionError(f"{path}: unsupported container version {got!r}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable header ({exc})") from exc
        blob = f.read()
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionError(
            f"{path}: format version {header.get('format_version')!r} unsupported"
        )
    if sha256_bytes(blob) != header.get("payload_sha256"):
        raise CorruptionError(f"{path}: payload checksum mismatch")
    arrays = {}
    for spec in header["arrays"]:
        start, n = spec["offset"], spec["nbytes"]
        if start + n > len(blob):
            raise CorruptionError(f"{path}: array {spec['key']!r} exceeds payload")
        arr = np.frombuffer(blob[start : start + n],
                            dtype=np.dtype(spec["dtype"]).newbyteorder("<"))
        arrays[spec["key"]] = arr.reshape(spec["shape"]).copy()
    return header, arrays


# ---------------------------------------------------------------------------
# Datasets.
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    name: str
    x_train: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    y_train: np.ndarray  # (N,) int64
    x_test: np.ndarray
    y_test: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def in_shape(self):
        return tuple(self.x_train.shape[1:])

    def subset(self, n_train=None, n_test=None):
        return Dataset(
            self.name,
            self.x_train[: n_train or len(self.x_train)],
            self.y_train[: n_train or len(self.y_train)],
            self.x_test[: n_test or len(self.x_test)],
            self.y_test[: n_test or len(self.y_test)],
            dict(self.meta, subset=[n_train, n_test]),
        )


def save_dataset(path, ds):
    header = {"kind": "dataset", "name": ds.name, "meta": ds.meta}
    arrays = {
        "x_train": np.asarray(ds.x_train, dtype=np.float64),
        "y_train": np.asarray(ds.y_train, dtype=np.int64),
        "x_test": np.asarray(ds.x_test, dtype=np.float64),
        "y_test": np.asarray(ds.y_test, dtype=np.int64),
    }
    _write_container(path, DATASET_MAGIC, header, arrays)


def load_dataset(path):
    header, arrays = _read_container(path, DATASET_MAGIC)
    if header.get("kind") != "dataset":
        raise FormatError(f"{path}: container is not a dataset")
    for key in ("x_train", "y_train", "x_test", "y_test"):
        if key not in arrays:
            raise FormatError(f"{path}: missing array {key!r}")
    return Dataset(header.get("name", "dataset"), arrays["x_train"],
                   arrays["y_train"], arrays["x_test"], arrays["y_test"],
                   header.get("meta", {}))


def synth_blobs(n_train, n_test, in_shape=(1, 28, 28), classes=10, seed=0,
                separation=1.0, noise=0.1):
    """Gaussian class blobs in pixel space, clipped to [0, 1].

    Each class gets a fixed random center near mid-gray; samples add
    isotropic noise.  ``separation`` scales how far centers spread, so task
    difficulty is tunable while everything stays deterministic in the seed.
    """
    rng = make_rng((seed, "blobs"))
    dim = int(np.prod(in_shape))
    centers = 0.5 + 0.1 * separation * rng.standard_normal((classes, dim))

    def draw(n):
        y = rng.integers(0, classes, size=n)
        x = centers[y] + noise * rng.standard_normal((n, dim))
        return np.clip(x, 0.0, 1.0).reshape((n,) + tuple(in_shape)), y.astype(np.int64)

    x_train, y_train = draw(n_train)
    x_test, y_test = draw(n_test)
    meta = {"kind": "blobs", "classes": classes, "seed": seed,
            "separation": separation, "noise": noise}
    return Dataset("blobs", x_train, y_train, x_test, y_test, meta)


# ---------------------------------------------------------------------------
# IDX import (big-endian magic 0x803 for images, 0x801 for labels).
# ---------------------------------------------------------------------------


def _read_idx(path, expect_magic, expect_dims):
    with open(path, "rb") as f:
        head = f.read(4)
        if len(head) != 4:
            raise FormatError(f"{path}: truncated IDX header")
        (magic,) = struct.unpack(">I", head)
        if magic != expect_magic:
            raise FormatError(f"{path}: IDX magic 0x{magic:08x}, "
                              f"expected 0x{expect_magic:08x}")
        dims = struct.unpack(f">{expect_dims}I", f.read(4 * expect_dims))
        data = np.frombuffer(f.read(), dtype=np.uint8)
    if data.size != int(np.prod(dims)):
        raise CorruptionError(f"{path}: payload has {data.size} bytes, "
                              f"dims say {int(np.prod(dims))}")
    return data.reshape(dims)


def load_idx(train_images, train_labels, test_images, test_labels, name="idx"):
    """Import an IDX image/label quartet as grayscale pixels in [0, 1]."""

    def pair(ip, lp):
        imgs = _read_idx(ip, 0x00000803, 3)
        labs = _read_idx(lp, 0x00000801, 1)
        if imgs.shape[0] != labs.shape[0]:
            raise FormatError(f"{ip} / {lp}: image and label counts differ")
        x = (imgs.astype(np.float64) / 255.0)[:, None, :, :]
        return x, labs.astype(np.int64)

    x_train, y_train = pair(train_images, train_labels)
    x_test, y_test = pair(test_images, test_labels)
    return Dataset(name, x_train, y_train, x_test, y_test, {"kind": "idx"})


# ---------------------------------------------------------------------------
# Checkpoints.
# ---------------------------------------------------------------------------


def rng_state_to_json(state):
    def conv(v):
        if isinstance(v, np.ndarray):
            return {"__array__": v.dtype.str.lstrip("<=|"), "data": v.tolist()}
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, (np.integer,)):
            return int(v)
        return v

    return conv(state)


def rng_state_from_json(obj):
    def conv(v):
        if isinstance(v, dict):
            if "__array__" in v:
                return np.array(v["data"], dtype=np.dtype(v["__array__"]))
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(obj)


def save_checkpoint(path, model, state, config_dict=None, meta=None):
    """Persist a :class:`~hesslens.training.TrainState` for exact resume.

    Stores the flat parameter vector with its layout table, the momentum
    buffer, every normalizer's running statistics, the epoch counter, the
    shuffle generator state, and the originating configuration.
    """
    header = {
        "kind": "checkpoint",
        "model": model.config.name,
        "classes": model.classes,
        "in_shape": list(model.in_shape),
        "layout": [[e.name, e.offset, list(e.shape)] for e in state.theta.layout],
        "epoch": int(state.epoch),
        "rng_state": rng_state_to_json(state.rng_state) if state.rng_state else None,
        "config": config_dict or {},
        "meta": meta or {},
        "bn_tags": sorted(state.bn_state),
    }
    arrays = {"theta": state.theta.data, "momentum": state.momentum}
    for tag in sorted(state.bn_state):
        arrays[f"bn.{tag}.mean"] = state.bn_state[tag]["mean"]
        arrays[f"bn.{tag}.var"] = state.bn_state[tag]["var"]
    _write_container(path, CHECKPOINT_MAGIC, header, arrays)


def load_checkpoint(path):
    """Returns ``(header, TrainState)``; layout is restored from the header."""
    from .training import TrainState  # local import to avoid a cycle

    header, arrays = _read_container(path, CHECKPOINT_MAGIC)
    if header.get("kind") != "checkpoint":
        raise FormatError(f"{path}: container is not a checkpoint")
    layout = tuple(LayoutEntry(n, o, tuple(s)) for n, o, s in header["layout"])
    theta = ParamVector(arrays["theta"], layout)
    bn_state = {}
    for tag in header.get("bn_tags", []):
        bn_state[tag] = {"mean": arrays[f"bn.{tag}.mean"],
                         "var": arrays[f"bn.{tag}.var"]}
    rng_state = (rng_state_from_json(header["rng_state"])
                 if header.get("rng_state") else None)
    state = TrainState(theta, arrays["momentum"], bn_state,
                       int(header.get("epoch", 0)), rng_state)
    return header, state


# ---------------------------------------------------------------------------
# CSV + JSON artifacts.
# ---------------------------------------------------------------------------


def write_csv(path, fieldnames, rows, comments=()):
    """Comment-prefixed, LF-terminated CSV with verbatim string cells."""
    with open(path, "w", newline="") as f:
        for line in comments:
            f.write(f"# {line}\n")
        f.write(",".join(fieldnames) + "\n")
        for row in rows:
            f.write(",".join(_csv_cell(row[k]) for k in fieldnames) + "\n")


def _csv_cell(value):
    s = str(value)
    if any(ch in s for ch in ',"\n'):
        s = '"' + s.replace('"', '""') + '"'
    return s


def read_csv(path):
    """Comments + header + rows of a CSV written by :func:`write_csv`."""
    comments, fieldnames, rows = [], None, []
    with open(path, "r", newline="") as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("#"):
                comments.append(line[1:].strip())
                continue
            cells = _split_csv_line(line)
            if fieldnames is None:
                fieldnames = cells
            else:
                rows.append(dict(zip(fieldnames, cells)))
    return comments, fieldnames or [], rows


def _split_csv_line(line):
    out, cur, quoted = [], [], False
    i = 0
    while i < len(line):
        ch = line[i]
        if quoted:
            if ch == '"':
                if i + 1 < len(line) and line[i + 1] == '"':
                    cur.append('"')
                    i += 1
                else:
                    quoted = False
            else:
                cur.append(ch)
        elif ch == '"':
            quoted = True
        elif ch == ",":
            out.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
        i += 1
    out.append("".join(cur))
    return out


def write_json(path, obj):
    with open(path, "w") as f:
        f.write(json.dumps(obj, sort_keys=True, indent=2))
        f.write("\n")


def provenance_lines(tool_version, config_obj=None, seed=None, extras=()):
    lines = [f"tool=hesslens {tool_version}"]
    if config_obj is not None:
        lines.append(f"config_sha256={config_digest(config_obj)}")
    if seed is not None:
        lines.append(f"seed={seed}")
    lines.extend(extras)
    return lines
