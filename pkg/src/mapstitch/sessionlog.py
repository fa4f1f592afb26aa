"""Line-oriented session log produced by an odometry frontend.

Records, one per line (``#`` starts a comment)::

    V ts tx ty tz qw qx qy qz
    O from to tx ty tz qw qx qy qz c11 .. c66
    K vertex frame u v sigma hex_descriptor [landmark_id]
    L id x y z
    C index fx fy cx cy width height tx ty tz qw qx qy qz

``vertex``, ``from`` and ``to`` are zero-based positions among the V records.
``C`` describes one camera of the rig (body <- camera extrinsics); it is optional.
Poses are mission <- body.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np

from .camera import PinholeCamera
from .errors import MalformedLog
from .geometry import RigidTransform


@dataclass
class LogKeypoint:
    vertex: int
    frame: int
    uv: tuple
    sigma: float
    descriptor: bytes
    landmark: int | None = None


@dataclass
class SessionLog:
    vertices: list = field(default_factory=list)      # (ts, RigidTransform)
    odometry: list = field(default_factory=list)      # (from, to, RigidTransform, cov)
    keypoints: list = field(default_factory=list)     # LogKeypoint
    landmarks: dict = field(default_factory=dict)     # id -> (3,) position
    cameras: dict = field(default_factory=dict)       # index -> PinholeCamera

    @property
    def descriptor_bits(self):
        if not self.keypoints:
            return None
        return 8 * len(self.keypoints[0].descriptor)


def _floats(tokens, n, lineno):
    if len(tokens) != n:
        raise MalformedLog(f"line {lineno}: expected {n} numeric fields, got {len(tokens)}")
    try:
        vals = [float(tok) for tok in tokens]
    except ValueError as exc:
        raise MalformedLog(f"line {lineno}: {exc}") from None
    if not all(np.isfinite(vals)):
        raise MalformedLog(f"line {lineno}: non-finite value")
    return vals


def _int(tok, lineno):
    try:
        return int(tok)
    except ValueError:
        raise MalformedLog(f"line {lineno}: expected integer, got {tok!r}") from None


def _pose(vals, lineno):
    try:
        return RigidTransform(vals[3:7], vals[0:3])
    except ValueError:
        raise MalformedLog(f"line {lineno}: invalid pose") from None


def _lines(source):
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source) as fh:
            return fh.read().splitlines()
    if isinstance(source, str):
        return source.splitlines()
    if isinstance(source, io.IOBase):
        return source.read().splitlines()
    return list(source)


def parse_session_log(source) -> SessionLog:
    """Parse a path, text blob, stream or iterable of lines.

    Only the schema is checked here; semantic checks happen on ingestion.
    """
    log = SessionLog()
    width = None
    for lineno, raw in enumerate(_lines(source), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kind, rest = tok[0], tok[1:]
        if kind == "V":
            vals = _floats(rest, 8, lineno)
            log.vertices.append((vals[0], _pose(vals[1:], lineno)))
        elif kind == "O":
            if len(rest) != 2 + 7 + 36:
                raise MalformedLog(f"line {lineno}: odometry record needs 45 fields")
            a, b = _int(rest[0], lineno), _int(rest[1], lineno)
            vals = _floats(rest[2:], 43, lineno)
            cov = np.array(vals[7:]).reshape(6, 6)
            log.odometry.append((a, b, _pose(vals[:7], lineno), cov))
        elif kind == "K":
            if len(rest) not in (6, 7):
                raise MalformedLog(f"line {lineno}: keypoint record needs 6 or 7 fields")
            v, f = _int(rest[0], lineno), _int(rest[1], lineno)
            u, vv, sigma = _floats(rest[2:5], 3, lineno)
            if sigma <= 0:
                raise MalformedLog(f"line {lineno}: keypoint sigma must be positive")
            try:
                desc = bytes.fromhex(rest[5])
            except ValueError:
                raise MalformedLog(f"line {lineno}: bad descriptor hex") from None
            if width is None:
                width = len(desc)
            elif len(desc) != width:
                raise MalformedLog(f"line {lineno}: descriptor length differs within log")
            lm = _int(rest[6], lineno) if len(rest) == 7 else None
            log.keypoints.append(LogKeypoint(v, f, (u, vv), sigma, desc, lm))
        elif kind == "L":
            if len(rest) != 4:
                raise MalformedLog(f"line {lineno}: landmark record needs 4 fields")
            lid = _int(rest[0], lineno)
            if lid in log.landmarks:
                raise MalformedLog(f"line {lineno}: duplicate landmark {lid}")
            log.landmarks[lid] = np.array(_floats(rest[1:], 3, lineno))
        elif kind == "C":
            if len(rest) != 14:
                raise MalformedLog(f"line {lineno}: camera record needs 14 fields")
            idx = _int(rest[0], lineno)
            vals = _floats(rest[1:], 13, lineno)
            try:
                cam = PinholeCamera(vals[0], vals[1], vals[2], vals[3],
                                    _pose(vals[6:], lineno), int(vals[4]), int(vals[5]))
            except ValueError:
                raise MalformedLog(f"line {lineno}: invalid camera") from None
            log.cameras[idx] = cam
        else:
            raise MalformedLog(f"line {lineno}: unknown record kind {kind!r}")
    return log


def _fmt(x):
    return repr(float(x))


def format_pose(T: RigidTransform):
    return " ".join(_fmt(v) for v in (*T.translation, *T.rotation))


def write_session_log(log: SessionLog, fh):
    """Serialize so that ``parse_session_log`` recovers every float exactly."""
    for idx, cam in sorted(log.cameras.items()):
        fh.write(f"C {idx} {_fmt(cam.fx)} {_fmt(cam.fy)} {_fmt(cam.cx)} {_fmt(cam.cy)} "
                 f"{cam.width} {cam.height} {format_pose(cam.T_body_camera)}\n")
    for ts, pose in log.vertices:
        fh.write(f"V {_fmt(ts)} {format_pose(pose)}\n")
    for a, b, pose, cov in log.odometry:
        c = " ".join(_fmt(v) for v in np.asarray(cov).ravel())
        fh.write(f"O {a} {b} {format_pose(pose)} {c}\n")
    for lid, p in sorted(log.landmarks.items()):
        fh.write(f"L {lid} {_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")
    for k in log.keypoints:
        tail = "" if k.landmark is None else f" {k.landmark}"
        fh.write(f"K {k.vertex} {k.frame} {_fmt(k.uv[0])} {_fmt(k.uv[1])} "
                 f"{_fmt(k.sigma)} {k.descriptor.hex()}{tail}\n")


def session_log_text(log: SessionLog) -> str:
    buf = io.StringIO()
    write_session_log(log, buf)
    return buf.getvalue()
