"""Query frames rendered against a built map, for localization tests."""
import numpy as np

from mapstitch.core import NO_LANDMARK, Frame
from mapstitch.geometry import RigidTransform
from mapstitch.landmark_quality import filter_landmarks
from mapstitch.loop_engine import build_landmark_index
from mapstitch.synth import render_query

from conftest import ingest_world, small_world


def localization_map(sessions=1):
    """Noiseless single-world map with a built index."""
    _, logs, _ = small_world(noise=False)
    m = ingest_world(logs[:sessions])
    filter_landmarks(m)
    m.index = build_landmark_index(m)
    return m


def map_scene(m):
    """Global positions of usable landmarks and one exact observed descriptor each."""
    ids = sorted(m.usable_landmarks())
    pts = m.landmark_positions_global(ids)
    desc = []
    for l in ids:
        vid, f, k = min(m.landmarks[l].backlinks)
        desc.append(m.vertices[vid].frames[f].descriptors[k])
    return np.array(ids), pts, np.array(desc)


def make_frame(uv, desc):
    n = len(uv)
    desc = np.asarray(desc, np.uint8)
    return Frame(np.asarray(uv, float).reshape(-1, 2), np.ones(n),
                 desc.reshape(n, desc.shape[-1]), np.full(n, NO_LANDMARK, np.int64))


def query_pose(m, rng, max_offset=0.5, max_yaw=0.1):
    """Body pose near a random map keyframe."""
    vid = int(rng.choice(sorted(m.vertices)))
    jitter = RigidTransform.from_rotvec([0, 0, rng.uniform(-max_yaw, max_yaw)],
                                        np.r_[rng.uniform(-max_offset, max_offset, 2), 0])
    return m.global_pose(vid) @ jitter


def in_map_query(scene, T_body, camera):
    _, pts, desc = scene
    uv, d, _ = render_query(pts, desc, T_body @ camera.T_body_camera, camera)
    return make_frame(uv, d)


def random_descriptor_query(m, rng, camera, n=150):
    uv = rng.uniform([0, 0], [camera.width, camera.height], (n, 2))
    return make_frame(uv, rng.integers(0, 256, (n, m.descriptor_bits // 8), dtype=np.uint8))


def aliased_query(scene, rng, camera, n=150):
    """Random scene in front of the camera carrying descriptors copied from the map.

    A contiguous run of landmark ids is reused, so matched landmarks tend to be
    covisible and the geometric check is what has to reject them.
    """
    _, _, desc = scene
    p_c = np.column_stack([rng.uniform(-8, 8, (n, 2)), rng.uniform(2, 25, n)])
    uv = camera.project(p_c)
    keep = camera.in_image(uv)
    start = int(rng.integers(0, len(desc) - n))
    d = desc[start:start + n][keep]
    return make_frame(uv[keep], d)


def pose_error(res, T_true):
    """(rotation rad, translation m) of a localized result."""
    return res.pose.distance_to(T_true)
