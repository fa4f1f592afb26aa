"""On-disk map format.

A map is a directory holding a line-oriented ``manifest`` and little-endian
binary blobs. Every blob is a sequence of records, each prefixed by its
byte length as an unsigned 64-bit integer. The manifest carries a SHA-256 per
blob so truncation or corruption is detected on load.
"""
from __future__ import annotations

import hashlib
import os
import shutil
import struct
import tempfile

import numpy as np

from .camera import PinholeCamera
from .core import Frame, Landmark, Map, Mission, OdometryEdge, Quality, Vertex
from .errors import CorruptBlob, IoFailure, UnsupportedVersion
from .geometry import RigidTransform

FORMAT_NAME = "mapstitch-map"
FORMAT_VERSION = 1
BLOBS = ("cameras.bin", "missions.bin", "vertices.bin", "edges.bin", "landmarks.bin",
         "descriptors.bin")


class _Writer:
    def __init__(self):
        self.records = []

    def record(self, *parts):
        payload = b"".join(parts)
        self.records.append(struct.pack("<Q", len(payload)) + payload)

    def bytes(self):
        return b"".join(self.records)


def _f8(a):
    return np.asarray(a, dtype="<f8").tobytes()


def _i8(a):
    return np.asarray(a, dtype="<i8").tobytes()


def _pose_bytes(T):
    return _f8(T.rotation) + _f8(T.translation)


class _Reader:
    def __init__(self, data, name):
        self.data = data
        self.name = name
        self.pos = 0

    def records(self):
        while self.pos < len(self.data):
            if self.pos + 8 > len(self.data):
                raise CorruptBlob(f"{self.name}: truncated record header")
            (n,) = struct.unpack_from("<Q", self.data, self.pos)
            self.pos += 8
            if self.pos + n > len(self.data):
                raise CorruptBlob(f"{self.name}: truncated record")
            yield _Record(self.data[self.pos:self.pos + n], self.name)
            self.pos += n


class _Record:
    def __init__(self, buf, name):
        self.buf = buf
        self.name = name
        self.pos = 0

    def take(self, dtype, count):
        dt = np.dtype(dtype)
        n = dt.itemsize * count
        if self.pos + n > len(self.buf):
            raise CorruptBlob(f"{self.name}: record too short")
        out = np.frombuffer(self.buf, dtype=dt, count=count, offset=self.pos).copy()
        self.pos += n
        return out

    def f8(self, count=1):
        return self.take("<f8", count)

    def i8(self, count=1):
        return self.take("<i8", count)

    def pose(self):
        q = self.f8(4)
        t = self.f8(3)
        try:
            return RigidTransform(q, t)
        except ValueError:
            raise CorruptBlob(f"{self.name}: invalid pose") from None

    def done(self):
        if self.pos != len(self.buf):
            raise CorruptBlob(f"{self.name}: trailing bytes in record")


def encode_map(m: Map) -> dict:
    """Blob name -> bytes."""
    blobs = {}
    w = _Writer()
    for cam in m.cameras:
        w.record(_f8([cam.fx, cam.fy, cam.cx, cam.cy]), _i8([cam.width, cam.height]),
                 _pose_bytes(cam.T_body_camera))
    blobs["cameras.bin"] = w.bytes()

    w = _Writer()
    for mission in m.missions.values():
        w.record(_i8([mission.id]), _pose_bytes(mission.baseframe),
                 _i8([int(mission.anchored), len(mission.vertex_ids)]), _i8(mission.vertex_ids))
    blobs["missions.bin"] = w.bytes()

    w = _Writer()
    d = _Writer()
    for v in m.vertices.values():
        parts = [_i8([v.id, v.mission_id]), _f8([v.timestamp]), _pose_bytes(v.pose),
                 _i8([len(v.frames)])]
        for fr in v.frames:
            parts += [_i8([len(fr)]), _f8(fr.keypoints), _f8(fr.sigmas), _i8(fr.landmark_refs)]
            d.record(np.ascontiguousarray(fr.descriptors, dtype=np.uint8).tobytes())
        w.record(*parts)
    blobs["vertices.bin"] = w.bytes()
    blobs["descriptors.bin"] = d.bytes()

    w = _Writer()
    for e in m.edges.values():
        w.record(_i8([e.from_vertex, e.to_vertex]), _pose_bytes(e.relative_pose),
                 _f8(e.covariance))
    blobs["edges.bin"] = w.bytes()

    w = _Writer()
    for lm in m.landmarks.values():
        links = np.array(sorted(lm.backlinks), dtype=np.int64).reshape(-1, 3)
        w.record(_i8([lm.id, lm.host_vertex_id, lm.source_id, int(lm.quality), len(links)]),
                 _f8(lm.position), _i8(links))
    blobs["landmarks.bin"] = w.bytes()

    if m.index is not None:
        blobs["index.bin"] = m.index.to_bytes()
    return blobs


def _manifest(m: Map, blobs: dict) -> str:
    ref = "none" if m.reference_mission is None else str(m.reference_mission)
    bits = "none" if m.descriptor_bits is None else str(m.descriptor_bits)
    lines = [
        f"format {FORMAT_NAME}",
        f"version {FORMAT_VERSION}",
        f"descriptor_bits {bits}",
        f"cameras {len(m.cameras)}",
        f"missions {len(m.missions)}",
        f"vertices {len(m.vertices)}",
        f"edges {len(m.edges)}",
        f"landmarks {len(m.landmarks)}",
        f"reference_mission {ref}",
        f"next_ids {m.next_mission_id} {m.next_vertex_id} {m.next_landmark_id}",
    ]
    for name, data in blobs.items():
        lines.append(f"blob {name} {len(data)} {hashlib.sha256(data).hexdigest()}")
    return "\n".join(lines) + "\n"


def save_map(m: Map, path):
    """Write the map directory atomically (build in a sibling temp dir, then rename)."""
    path = os.path.abspath(os.fspath(path))
    parent = os.path.dirname(path)
    try:
        os.makedirs(parent, exist_ok=True)
        blobs = encode_map(m)
        tmp = tempfile.mkdtemp(prefix=".tmp-", dir=parent)
        for name, data in blobs.items():
            with open(os.path.join(tmp, name), "wb") as fh:
                fh.write(data)
        with open(os.path.join(tmp, "manifest"), "w") as fh:
            fh.write(_manifest(m, blobs))
            fh.flush()
            os.fsync(fh.fileno())
        old = None
        if os.path.exists(path):
            old = tempfile.mkdtemp(prefix=".old-", dir=parent)
            os.rmdir(old)
            os.rename(path, old)
        os.rename(tmp, path)
        if old is not None:
            shutil.rmtree(old, ignore_errors=True)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _read_manifest(path):
    try:
        with open(os.path.join(path, "manifest")) as fh:
            text = fh.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    fields, blobs = {}, {}
    for line in text.splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "blob":
            if len(tok) != 4:
                raise CorruptBlob("malformed blob line in manifest")
            blobs[tok[1]] = (int(tok[2]), tok[3])
        else:
            fields[tok[0]] = tok[1:]
    if fields.get("format", [None])[0] != FORMAT_NAME:
        raise UnsupportedVersion("not a map directory")
    try:
        version = int(fields["version"][0])
    except (KeyError, ValueError):
        raise UnsupportedVersion("missing format version") from None
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"map format version {version} is not supported")
    return fields, blobs


def load_map(path) -> Map:
    path = os.fspath(path)
    fields, manifest_blobs = _read_manifest(path)
    data = {}
    for name in BLOBS + ("index.bin",):
        if name not in manifest_blobs:
            if name == "index.bin":
                continue
            raise CorruptBlob(f"manifest lacks {name}")
        try:
            with open(os.path.join(path, name), "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        size, digest = manifest_blobs[name]
        if len(raw) != size or hashlib.sha256(raw).hexdigest() != digest:
            raise CorruptBlob(f"{name}: checksum mismatch")
        data[name] = raw
    return decode_map(fields, data)


def decode_map(fields, data) -> Map:
    bits = fields["descriptor_bits"][0]
    m = Map(None if bits == "none" else int(bits))
    ref = fields["reference_mission"][0]
    m.reference_mission = None if ref == "none" else int(ref)
    m.next_mission_id, m.next_vertex_id, m.next_landmark_id = map(int, fields["next_ids"])
    nbytes = 0 if m.descriptor_bits is None else m.descriptor_bits // 8

    for rec in _Reader(data["cameras.bin"], "cameras.bin").records():
        fx, fy, cx, cy = rec.f8(4)
        wdt, hgt = rec.i8(2)
        m.cameras.append(PinholeCamera(float(fx), float(fy), float(cx), float(cy), rec.pose(),
                                       int(wdt), int(hgt)))
        rec.done()

    for rec in _Reader(data["missions.bin"], "missions.bin").records():
        (mid,) = rec.i8()
        base = rec.pose()
        anchored, n = rec.i8(2)
        ids = [int(x) for x in rec.i8(int(n))]
        rec.done()
        m.missions[int(mid)] = Mission(int(mid), base, bool(anchored), ids)

    desc_records = iter(_Reader(data["descriptors.bin"], "descriptors.bin").records())
    for rec in _Reader(data["vertices.bin"], "vertices.bin").records():
        vid, mid = rec.i8(2)
        (ts,) = rec.f8()
        pose = rec.pose()
        (nf,) = rec.i8()
        frames = []
        for _ in range(int(nf)):
            (n,) = rec.i8()
            n = int(n)
            kp = rec.f8(2 * n).reshape(n, 2)
            sig = rec.f8(n)
            refs = rec.i8(n).astype(np.int64)
            try:
                drec = next(desc_records)
            except StopIteration:
                raise CorruptBlob("descriptors.bin: missing records") from None
            desc = drec.take(np.uint8, n * nbytes).reshape(n, nbytes)
            drec.done()
            frames.append(Frame(kp, sig, desc, refs))
        rec.done()
        m.vertices[int(vid)] = Vertex(int(vid), int(mid), float(ts), pose, frames)
    if next(desc_records, None) is not None:
        raise CorruptBlob("descriptors.bin: extra records")

    for rec in _Reader(data["edges.bin"], "edges.bin").records():
        a, b = (int(x) for x in rec.i8(2))
        pose = rec.pose()
        cov = rec.f8(36).reshape(6, 6)
        rec.done()
        m.edges[(a, b)] = OdometryEdge(a, b, pose, cov)

    for rec in _Reader(data["landmarks.bin"], "landmarks.bin").records():
        lid, host, src, qual, nb = (int(x) for x in rec.i8(5))
        pos = rec.f8(3)
        links = rec.i8(3 * nb).reshape(nb, 3)
        rec.done()
        m.landmarks[lid] = Landmark(lid, pos, host, {tuple(int(x) for x in r) for r in links},
                                    Quality(qual), src)

    for key, n in (("cameras", m.cameras), ("missions", m.missions), ("vertices", m.vertices),
                   ("edges", m.edges), ("landmarks", m.landmarks)):
        if int(fields[key][0]) != len(n):
            raise CorruptBlob(f"manifest count mismatch for {key}")

    if "index.bin" in data:
        from .descriptor_index import LandmarkIndex
        m.index = LandmarkIndex.from_bytes(data["index.bin"])
    return m


def _arr_eq(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


def map_differences(a: Map, b: Map) -> list:
    """Field-by-field bitwise comparison; returns human-readable differences."""
    diffs = []

    def chk(cond, what):
        if not cond:
            diffs.append(what)

    chk(a.descriptor_bits == b.descriptor_bits, "descriptor_bits")
    chk(a.reference_mission == b.reference_mission, "reference_mission")
    chk((a.next_mission_id, a.next_vertex_id, a.next_landmark_id)
        == (b.next_mission_id, b.next_vertex_id, b.next_landmark_id), "next ids")
    chk(len(a.cameras) == len(b.cameras) and all(x == y for x, y in zip(a.cameras, b.cameras)),
        "cameras")
    chk(list(a.missions) == list(b.missions), "mission ids")
    for k in a.missions.keys() & b.missions.keys():
        x, y = a.missions[k], b.missions[k]
        chk(x.baseframe == y.baseframe and x.anchored == y.anchored
            and x.vertex_ids == y.vertex_ids, f"mission {k}")
    chk(list(a.vertices) == list(b.vertices), "vertex ids")
    for k in a.vertices.keys() & b.vertices.keys():
        x, y = a.vertices[k], b.vertices[k]
        ok = (x.mission_id == y.mission_id and _arr_eq(x.timestamp, y.timestamp)
              and x.pose == y.pose and len(x.frames) == len(y.frames))
        if ok:
            for fx, fy in zip(x.frames, y.frames):
                ok &= (_arr_eq(fx.keypoints, fy.keypoints) and _arr_eq(fx.sigmas, fy.sigmas)
                       and _arr_eq(fx.descriptors, fy.descriptors)
                       and _arr_eq(fx.landmark_refs, fy.landmark_refs))
        chk(ok, f"vertex {k}")
    chk(list(a.edges) == list(b.edges), "edge keys")
    for k in a.edges.keys() & b.edges.keys():
        x, y = a.edges[k], b.edges[k]
        chk(x.relative_pose == y.relative_pose and _arr_eq(x.covariance, y.covariance),
            f"edge {k}")
    chk(list(a.landmarks) == list(b.landmarks), "landmark ids")
    for k in a.landmarks.keys() & b.landmarks.keys():
        x, y = a.landmarks[k], b.landmarks[k]
        chk(_arr_eq(x.position, y.position) and x.host_vertex_id == y.host_vertex_id
            and x.backlinks == y.backlinks and x.quality == y.quality
            and x.source_id == y.source_id, f"landmark {k}")
    chk((a.index is None) == (b.index is None), "index presence")
    if a.index is not None and b.index is not None:
        chk(a.index.to_bytes() == b.index.to_bytes(), "index")
    return diffs


def maps_equal(a: Map, b: Map) -> bool:
    return not map_differences(a, b)
