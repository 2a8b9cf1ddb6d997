"""File formats: array files, dataset bundles and persisted fits.

Array file layout (all integers little-endian)::

    8 bytes   magic  b"WAVEIRA\\0"
    u32       format version (1)
    4 bytes   dtype tag b"<f8\\0"
    u32       ndim
    u64 x ndim  shape
    payload   float64 little-endian, row-major, 8 * prod(shape) bytes

A dataset bundle is a directory holding ``manifest.json``,
``covariates.csv`` (response plus scalar covariates, one row per
subject) and ``images.arr``; an optional ``mask.arr`` stores a 0/1
mask. Covariate cells must parse as numbers unless the manifest's
``encodings`` maps the column's text values to numbers (e.g.
``{"sex": {"F": 0, "M": 1}}``).
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .dwt import ImageStack
from .estimators import Dataset, EstimatorConfig, ScalarOnImageFit, Transform
from .glm import Family

MAGIC = b"WAVEIRA\0"
ARRAY_VERSION = 1
DTYPE_TAG = b"<f8\0"
BUNDLE_SCHEMA = "waveir.bundle/1"
FIT_SCHEMA = "waveir.fit/1"


class FormatError(ValueError):
    """A file does not follow its documented format."""

    def __init__(self, path, field: str, message: str):
        super().__init__(f"{path}: {field}: {message}")
        self.path = str(path)
        self.field = field


class ConstantColumnWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# array files


def array_bytes(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    head = MAGIC + struct.pack("<I", ARRAY_VERSION) + DTYPE_TAG
    head += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes(order="C")


def write_array(path, a: np.ndarray) -> None:
    Path(path).write_bytes(array_bytes(a))


def parse_array(buf: bytes, path="<bytes>") -> np.ndarray:
    if len(buf) < 20 or buf[:8] != MAGIC:
        raise FormatError(path, "magic", "not a waveir array file")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != ARRAY_VERSION:
        raise FormatError(path, "version", f"unsupported version {version}")
    if buf[12:16] != DTYPE_TAG:
        raise FormatError(path, "dtype", f"unsupported dtype tag {buf[12:16]!r}")
    (ndim,) = struct.unpack_from("<I", buf, 16)
    start = 20 + 8 * ndim
    if len(buf) < start:
        raise FormatError(path, "shape", "header is truncated")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 20)
    expected = 8 * int(np.prod(shape, dtype=np.int64))
    if len(buf) - start != expected:
        raise FormatError(path, "payload",
                          f"expected {expected} bytes for shape {shape}, found {len(buf) - start}")
    return np.frombuffer(buf, dtype="<f8", offset=start).reshape(shape).astype(np.float64)


def read_array(path) -> np.ndarray:
    return parse_array(Path(path).read_bytes(), path)


# ---------------------------------------------------------------------------
# dataset bundles


def write_bundle(path, data: Dataset, truth: dict | None = None,
                 response: str = "y", encodings: dict | None = None,
                 extra_arrays: dict | None = None) -> Path:
    """Write ``data`` as a bundle directory; returns the directory path.

    ``extra_arrays`` maps file names to arrays stored alongside (for
    example the true coefficient image of a simulated data set).
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    names = list(data.covariate_names[1:])
    with open(root / "covariates.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([response] + names)
        for i in range(data.n):
            w.writerow([repr(float(data.y[i]))] + [repr(float(v)) for v in data.T[i, 1:]])
    write_array(root / "images.arr", data.images.data)
    files = {"images": "images.arr", "covariates": "covariates.csv"}
    if data.images.mask is not None:
        write_array(root / "mask.arr", data.images.mask.astype(np.float64))
        files["mask"] = "mask.arr"
    for name, arr in sorted((extra_arrays or {}).items()):
        write_array(root / name, arr)
        files[name.rsplit(".", 1)[0]] = name
    manifest = {
        "schema": BUNDLE_SCHEMA,
        "waveir_version": __version__,
        "n": data.n,
        "grid_shape": list(data.images.grid_shape),
        "family": data.family.kind,
        "response": response,
        "covariates": names,
        "encodings": encodings or {},
        "files": files,
        "truth": truth,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise FormatError(mpath, "manifest", "file not found")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(mpath, "manifest", f"invalid JSON ({exc})") from None
    if manifest.get("schema") != BUNDLE_SCHEMA:
        raise FormatError(mpath, "schema", f"expected {BUNDLE_SCHEMA!r}")
    for key in ("n", "grid_shape", "family", "response", "files"):
        if key not in manifest:
            raise FormatError(mpath, key, "missing")
    return manifest


def _parse_cell(text: str, column: str, encodings: dict, path, row: int) -> float:
    enc = encodings.get(column)
    if enc is not None and text in enc:
        return float(enc[text])
    try:
        return float(text)
    except ValueError:
        raise FormatError(path, column,
                          f"row {row}: non-numeric value {text!r} with no encoding") from None


def read_bundle(path) -> Dataset:
    """Load a bundle as a :class:`Dataset` (intercept column prepended if absent)."""
    root = Path(path)
    manifest = read_manifest(root)
    files = manifest["files"]
    cpath = root / files.get("covariates", "covariates.csv")
    ipath = root / files.get("images", "images.arr")
    for p in (cpath, ipath):
        if not p.exists():
            raise FormatError(p, "file", "not found")
    with open(cpath, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(cpath, "header", "empty file")
    header, body = rows[0], rows[1:]
    response = manifest["response"]
    if response not in header:
        raise FormatError(cpath, response, "declared response column is missing")
    declared = manifest.get("covariates")
    covs = [h for h in header if h != response] if declared is None else list(declared)
    for c in covs:
        if c not in header:
            raise FormatError(cpath, c, "declared covariate column is missing")
    encodings = manifest.get("encodings") or {}
    col = {h: k for k, h in enumerate(header)}
    values = {}
    for name in [response] + covs:
        values[name] = np.array(
            [_parse_cell(r[col[name]], name, encodings, cpath, i + 1) for i, r in enumerate(body)]
        )
    images = read_array(ipath)
    n_csv, n_img, n_man = len(body), images.shape[0], int(manifest["n"])
    if not (n_csv == n_img == n_man):
        raise FormatError(root, "n",
                          f"row counts differ: {cpath.name} has {n_csv}, {ipath.name} has "
                          f"{n_img}, manifest says {n_man}")
    if list(images.shape[1:]) != list(manifest["grid_shape"]):
        raise FormatError(ipath, "grid_shape",
                          f"images have grid {list(images.shape[1:])}, manifest says "
                          f"{manifest['grid_shape']}")
    mask = None
    if "mask" in files:
        mask = read_array(root / files["mask"]) != 0
    y = values[response]
    cols, names = [], []
    for c in covs:
        v = values[c]
        if c.lower() == "intercept" and np.all(v == 1.0):
            continue
        if v.size and np.all(v == v[0]):
            warnings.warn(f"{cpath}: covariate {c!r} is constant", ConstantColumnWarning,
                          stacklevel=2)
        cols.append(v)
        names.append(c)
    T = np.column_stack([np.ones(n_csv)] + cols)
    try:
        return Dataset(y, T, ImageStack(images, mask), Family.parse(manifest["family"]),
                       ("intercept", *names))
    except ValueError as exc:
        raise FormatError(root, "dataset", str(exc)) from None


def bundle_digest(path) -> str:
    """SHA-256 over the bundle's manifest, covariate and image files."""
    root = Path(path)
    manifest = read_manifest(root)
    h = hashlib.sha256()
    for name in ["manifest.json"] + sorted(manifest["files"].values()):
        h.update(name.encode())
        h.update((root / name).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# fits


def fit_to_dict(fit: ScalarOnImageFit, run: dict | None = None) -> dict:
    s = fit.support
    return {
        "schema": FIT_SCHEMA,
        "waveir_version": __version__,
        "config": fit.config.to_dict(),
        "family": fit.family.kind,
        "transform": fit.transform.to_dict(),
        "delta": [float(v) for v in fit.delta],
        "beta_tilde": {"size": int(fit.beta_tilde.size),
                       "index": [int(i) for i in s],
                       "value": [float(v) for v in fit.beta_tilde[s]]},
        "centers": {"index": [int(i) for i in s],
                    "value": [float(v) for v in fit.column_centers[s]],
                    "training_sha256": fit.centers_digest()},
        "converged": bool(fit.converged),
        "info": _jsonable(fit.info),
        "run": run,
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    return obj


def persist_fit(fit: ScalarOnImageFit, path, run: dict | None = None) -> None:
    """Write ``fit`` as JSON; beta is stored as (index, value) pairs of its support."""
    Path(path).write_text(json.dumps(fit_to_dict(fit, run), indent=1, sort_keys=True) + "\n")


def fit_from_dict(d: dict, path="<dict>") -> ScalarOnImageFit:
    if d.get("schema") != FIT_SCHEMA:
        raise FormatError(path, "schema", f"expected {FIT_SCHEMA!r}, found {d.get('schema')!r}")
    try:
        transform = Transform.from_dict(d["transform"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(path, "transform", f"corrupted layout descriptor ({exc})") from None
    try:
        config = EstimatorConfig.from_dict(d["config"])
        family = Family.parse(d["family"])
        bt = d["beta_tilde"]
        size = int(bt["size"])
        idx = np.asarray(bt["index"], dtype=np.int64)
        val = np.asarray(bt["value"], dtype=np.float64)
        cidx = np.asarray(d["centers"]["index"], dtype=np.int64)
        cval = np.asarray(d["centers"]["value"], dtype=np.float64)
        delta = np.asarray(d["delta"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(path, "fit", f"malformed field ({exc})") from None
    if size != transform.size:
        raise FormatError(path, "beta_tilde.size",
                          f"{size} coefficients but the layout has {transform.size}")
    if idx.shape != val.shape or cidx.shape != cval.shape or not np.array_equal(idx, cidx):
        raise FormatError(path, "beta_tilde", "index/value lists are inconsistent")
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise FormatError(path, "beta_tilde.index", "index out of range")
    beta = np.zeros(size)
    beta[idx] = val
    centers = np.zeros(size)
    centers[cidx] = cval
    return ScalarOnImageFit(
        delta=delta,
        beta_tilde=beta,
        beta_image=transform.image(beta),
        selected=idx,
        column_centers=centers,
        config=config,
        family=family,
        transform=transform,
        converged=bool(d.get("converged", True)),
        info=d.get("info") or {},
    )


def load_fit(path) -> ScalarOnImageFit:
    p = Path(path)
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(p, "json", str(exc)) from None
    return fit_from_dict(d, p)
