"""File formats: meshes in, depth maps / clouds / codes / checkpoints out.

All binary formats are little-endian and versioned; see docs/formats.md.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camrig import N_VIEWS
from .depthcodec import DepthMap, PointCloud
from .rasterizer import TriangleMesh


class FormatError(ValueError):
    """Base class for unreadable files."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class InvalidCodeError(FormatError):
    pass


class MeshParseError(ValueError):
    def __init__(self, path, line: int | None, msg: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {msg}")
        self.line = line


class ManifestError(ValueError):
    pass


# meshes


def _resolve_index(tok: str, n_verts: int, path, lineno: int) -> int:
    head = tok.split("/")[0]
    try:
        k = int(head)
    except ValueError:
        raise MeshParseError(path, lineno, f"bad face index {tok!r}") from None
    if k > 0:
        idx = k - 1
    elif k < 0:
        idx = n_verts + k
    else:
        raise MeshParseError(path, lineno, "face index 0 is invalid in OBJ")
    if not 0 <= idx < n_verts:
        raise MeshParseError(path, lineno, f"face index {k} out of range ({n_verts} vertices so far)")
    return idx


def _fan(poly: list[int]) -> list[tuple[int, int, int]]:
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _load_obj(path: Path) -> TriangleMesh:
    verts: list[tuple[float, float, float]] = []
    tris: list[tuple[int, int, int]] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split("#", 1)[0].split()
            if not tok:
                continue
            if tok[0] == "v":
                if len(tok) < 4:
                    raise MeshParseError(path, lineno, "vertex needs 3 coordinates")
                try:
                    verts.append((float(tok[1]), float(tok[2]), float(tok[3])))
                except ValueError:
                    raise MeshParseError(path, lineno, "non-numeric vertex coordinate") from None
            elif tok[0] == "f":
                if len(tok) < 4:
                    raise MeshParseError(path, lineno, "face needs at least 3 vertices")
                tris += _fan([_resolve_index(t, len(verts), path, lineno) for t in tok[1:]])
    return _finish(path, verts, tris)


def _load_off(path: Path) -> TriangleMesh:
    with open(path) as fh:
        lines = [(i, ln.split("#", 1)[0].split()) for i, ln in enumerate(fh, 1)]
    lines = [(i, t) for i, t in lines if t]
    if not lines or not lines[0][1][0].endswith("OFF"):
        raise MeshParseError(path, lines[0][0] if lines else None, "missing OFF header")
    i0, head = lines[0]
    rest = head[1:] if len(head) > 1 else None
    pos = 1
    if rest is None:
        if len(lines) < 2:
            raise MeshParseError(path, None, "missing OFF counts")
        i0, rest = lines[1]
        pos = 2
    try:
        nv, nf = int(rest[0]), int(rest[1])
    except (ValueError, IndexError):
        raise MeshParseError(path, i0, "bad OFF counts") from None
    if len(lines) < pos + nv + nf:
        raise MeshParseError(path, None, f"expected {nv} vertices and {nf} faces")
    verts, tris = [], []
    for lineno, t in lines[pos : pos + nv]:
        try:
            verts.append((float(t[0]), float(t[1]), float(t[2])))
        except (ValueError, IndexError):
            raise MeshParseError(path, lineno, "bad OFF vertex") from None
    for lineno, t in lines[pos + nv : pos + nv + nf]:
        try:
            k = int(t[0])
            poly = [int(x) for x in t[1 : 1 + k]]
        except (ValueError, IndexError):
            raise MeshParseError(path, lineno, "bad OFF face") from None
        if k < 3 or len(poly) != k or min(poly) < 0 or max(poly) >= nv:
            raise MeshParseError(path, lineno, "bad OFF face")
        tris += _fan(poly)
    return _finish(path, verts, tris)


def _finish(path, verts, tris) -> TriangleMesh:
    if not verts or not tris:
        raise MeshParseError(path, None, "mesh has no geometry")
    return TriangleMesh(np.array(verts), np.array(tris))


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix.lower() == ".off":
        return _load_off(path)
    return _load_obj(path)


# depth maps

DM_MAGIC = b"DFDM"
DM_VERSION = 1
DM_HEADER = struct.Struct("<4sBBHff")  # magic, version, packed(view|proj|bits), resolution, near, far
assert DM_HEADER.size == 16
_PROJ_CODE = {"orthographic": 0, "perspective": 1}
_PROJ_NAME = {v: k for k, v in _PROJ_CODE.items()}


def _pack_meta(dm: DepthMap) -> int:
    if not 0 <= dm.view_id < 32:
        raise ValueError(f"view_id {dm.view_id} does not fit the depth-map header")
    return dm.view_id | (_PROJ_CODE[dm.projection] << 5) | ((dm.bits - 5) << 6)


def write_depthmap(dm: DepthMap, path) -> None:
    for name in ("near", "far"):
        val = getattr(dm, name)
        if float(np.float32(val)) != val:
            raise ValueError(f"{name}={val!r} is not exactly representable as float32")
    header = DM_HEADER.pack(DM_MAGIC, DM_VERSION, _pack_meta(dm), dm.resolution, dm.near, dm.far)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(dm.codes, dtype=np.uint8).tobytes())


def decode_depthmap(buf: bytes) -> DepthMap:
    if len(buf) < 4 or buf[:4] != DM_MAGIC:
        raise BadMagicError(f"not a depth-map file (magic {buf[:4]!r})")
    if len(buf) < DM_HEADER.size:
        raise TruncatedFileError(f"header truncated at {len(buf)} bytes")
    _, version, meta, res, near, far = DM_HEADER.unpack_from(buf)
    if version != DM_VERSION:
        raise UnsupportedVersionError(f"depth-map version {version}, expected {DM_VERSION}")
    view_id, proj, bits = meta & 0x1F, (meta >> 5) & 1, (meta >> 6) + 5
    expected = DM_HEADER.size + res * res
    if len(buf) < expected:
        raise TruncatedFileError(f"payload truncated: {len(buf)} of {expected} bytes")
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after payload")
    codes = np.frombuffer(buf, dtype=np.uint8, count=res * res, offset=DM_HEADER.size).reshape(res, res)
    if codes.size and int(codes.max()) >= 2**bits:
        raise InvalidCodeError(f"code {int(codes.max())} not representable in {bits} bits")
    return DepthMap(codes.copy(), bits=bits, near=float(near), far=float(far), view_id=view_id,
                    projection=_PROJ_NAME[proj])


def read_depthmap(path) -> DepthMap:
    return decode_depthmap(Path(path).read_bytes())


# point clouds


def write_pointcloud_ply(cloud: PointCloud, path) -> None:
    pts = cloud.points
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for x, y, z in pts:
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_pointcloud_ply(path) -> PointCloud:
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise BadMagicError(f"{path}: not a PLY file")
        n = None
        for line in fh:
            line = line.strip()
            if line.startswith("element vertex"):
                n = int(line.split()[2])
            elif line.startswith("format") and "ascii" not in line:
                raise FormatError(f"{path}: only ASCII PLY is supported")
            elif line == "end_header":
                break
        else:
            raise TruncatedFileError(f"{path}: missing end_header")
        if n is None:
            raise FormatError(f"{path}: no vertex element")
        rows = [fh.readline().split() for _ in range(n)]
    if any(len(r) < 3 for r in rows):
        raise TruncatedFileError(f"{path}: fewer than {n} vertex rows")
    return PointCloud(np.array([[float(v) for v in r[:3]] for r in rows]).reshape(-1, 3))


# identity-code banks

ID_MAGIC = b"DFID"
ID_HEADER = struct.Struct("<4sII")


def write_identity_bank(codes: np.ndarray, path) -> None:
    codes = np.asarray(codes, dtype="<f8")
    if codes.ndim != 2:
        raise ValueError("identity bank must be a 2-D array (count, dim)")
    with open(path, "wb") as fh:
        fh.write(ID_HEADER.pack(ID_MAGIC, codes.shape[0], codes.shape[1]))
        fh.write(codes.tobytes())


def read_identity_bank(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != ID_MAGIC:
        raise BadMagicError(f"{path}: not an identity bank")
    if len(buf) < ID_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, count, dim = ID_HEADER.unpack_from(buf)
    need = ID_HEADER.size + 8 * count * dim
    if len(buf) < need:
        raise TruncatedFileError(f"{path}: {len(buf)} of {need} bytes")
    return np.frombuffer(buf, dtype="<f8", count=count * dim, offset=ID_HEADER.size).reshape(count, dim).copy()


# class embeddings


def export_embeddings(params: dict, class_names: list[str], path) -> None:
    """One CSV row per class: name, then the class-embedding vector."""
    table = params.get("gen.class_emb")
    if table is None:
        raise ValueError("parameters have no class-embedding table")
    data = table.data if hasattr(table, "data") else np.asarray(table)
    if data.shape[0] <= 1:
        raise ValueError("unconditional model: class embedding has a single row")
    if len(class_names) != data.shape[0]:
        raise ValueError(f"{len(class_names)} class names for {data.shape[0]} embedding rows")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for name, row in zip(class_names, data):
            w.writerow([name] + [repr(float(v)) for v in row])


def read_embeddings(path) -> tuple[list[str], np.ndarray]:
    names, rows = [], []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            names.append(rec[0])
            rows.append([float(v) for v in rec[1:]])
    return names, np.array(rows)


# tensor container (checkpoints, IMLE models)

CK_MAGIC = b"DFCK"
CK_VERSION = 1


def write_tensor_file(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """magic, u32 version, u32 meta length + JSON, u32 count, then named f64 tensors."""
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [CK_MAGIC, struct.pack("<I", CK_VERSION), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        key = name.encode()
        parts += [struct.pack("<I", len(key)), key, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), struct.pack("<Q", arr.size), arr.tobytes()]
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        for p in parts:
            fh.write(p)
    tmp.replace(path)


def read_tensor_file(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != CK_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise TruncatedFileError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    def raw(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFileError(f"{path}: truncated at byte {pos}")
        out = buf[pos : pos + n]
        pos += n
        return out

    (version,) = take("<I")
    if version != CK_VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint version {version}")
    (mlen,) = take("<I")
    meta = json.loads(raw(mlen))
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (klen,) = take("<I")
        name = raw(klen).decode()
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        (size,) = take("<Q")
        data = np.frombuffer(raw(8 * size), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(shape)
    return meta, tensors


# manifests

MANIFEST_FIELDS = ["object_id", "class_id", "class_name", "split", "view_id", "path"]
SPLITS = ("train", "val", "test")


@dataclass
class ManifestRecord:
    object_id: str
    class_id: int
    class_name: str
    split: str
    paths: dict[int, Path]


def append_manifest(path, object_id: str, class_id: int, class_name: str, split: str, files: dict[int, Path]) -> None:
    """Add one row per view for ``object_id``, replacing any rows it already has."""
    path = Path(path)
    base = path.parent.resolve()
    rows: list[list[str]] = []
    if path.exists() and path.stat().st_size:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != MANIFEST_FIELDS:
                raise ManifestError(f"{path}: unexpected header {header}")
            rows = [r for r in reader if r and r[0] != object_id]
    for vid in sorted(files):
        f = Path(files[vid]).resolve()
        try:
            rel = f.relative_to(base)
        except ValueError:
            rel = f
        rows.append([object_id, str(class_id), class_name, split, str(vid), rel.as_posix()])
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)


def load_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    records: dict[str, ManifestRecord] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ManifestError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, 2):
            oid = row["object_id"]
            vid = int(row["view_id"])
            if row["split"] not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {row['split']!r}")
            rec = records.setdefault(
                oid, ManifestRecord(oid, int(row["class_id"]), row["class_name"], row["split"], {})
            )
            if (rec.class_id, rec.class_name, rec.split) != (int(row["class_id"]), row["class_name"], row["split"]):
                raise ManifestError(f"{path}:{lineno}: inconsistent metadata for object {oid!r}")
            if vid in rec.paths:
                raise ManifestError(f"{path}:{lineno}: duplicate (object_id, view_id) = ({oid!r}, {vid})")
            p = Path(row["path"])
            rec.paths[vid] = p if p.is_absolute() else path.parent / p
    out = list(records.values())
    for rec in out:
        if sorted(rec.paths) != list(range(N_VIEWS)):
            raise ManifestError(f"{path}: object {rec.object_id!r} does not have exactly views 0..{N_VIEWS - 1}")
    ids = sorted({r.class_id for r in out})
    if ids != list(range(len(ids))):
        raise ManifestError(f"{path}: class ids must be dense from 0, got {ids}")
    return out


def class_names(records: list[ManifestRecord]) -> list[str]:
    names: dict[int, str] = {}
    for r in records:
        names.setdefault(r.class_id, r.class_name)
    return [names[i] for i in sorted(names)]
