"""Command-line front end: one subcommand per pipeline stage.

Usage: ``python3 -m mapstitch [--config FILE] <command> [map] [flags]``.
Exit codes are 0 on success, 1 for usage errors, 2 for data errors and 3 when
an optimizer fails.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import resource
import sys
import time

from . import synth
from .bundle_adjust import SolverConfig, optimize_full_batch
from .core import Map, check_integrity, ingest_session
from .errors import IndexNotBuilt, MapError, MapLocked, SolverError
from .keyframing import KeyframeCriteria, keyframe_map
from .landmark_quality import QualityThresholds, filter_landmarks
from .localization import LocalizationConfig, localize_frame
from .loop_engine import LoopConfig, align_missions, build_landmark_index, merge_duplicate_landmarks
from .mapio import load_map, save_map
from .posegraph_relax import (DEFAULT_SWITCH_PRIOR_WEIGHT, LoopClosureConfig, RelaxConfig,
                              build_loop_constraints, relax)
from .summarization import DEFAULT_MIN_COVER, summarize


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _opt_int(text):
    return None if text.lower() == "none" else int(text)


# -- map directory ownership ---------------------------------------------------------

@contextlib.contextmanager
def map_lock(path):
    """Exclusive ownership of a map directory via ``<dir>.lock`` next to it.

    The lock lives beside the directory because saving replaces the directory.
    A lock left by a dead process is taken over.
    """
    lock = os.path.abspath(os.fspath(path)).rstrip(os.sep) + ".lock"
    os.makedirs(os.path.dirname(lock), exist_ok=True)
    for _ in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            if _lock_alive(lock):
                raise MapLocked(f"{path} is locked by another process ({lock})") from None
            with contextlib.suppress(FileNotFoundError):
                os.unlink(lock)
    else:
        raise MapLocked(f"could not acquire {lock}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(lock)


def _lock_alive(lock):
    try:
        with open(lock) as fh:
            pid = int(fh.read().strip() or 0)
    except (OSError, ValueError):
        return False
    if pid <= 0:
        return False
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        pass
    return True


# -- stages ---------------------------------------------------------------------------

def _loop_config(a):
    cfg = LoopConfig()
    for name in ("probe_cells", "codebook_size", "projection_dim", "seed", "inlier_radius",
                 "min_inliers", "merge_radius", "match_threshold"):
        val = getattr(a, name, None)
        if val is not None:
            setattr(cfg, name, val)
    return cfg


def cmd_ingest(a, m):
    for path in a.logs:
        mid = ingest_session(path, m)
        print(f"ingested {path} as mission {mid}")
    return True


def cmd_keyframe(a, m):
    crit = KeyframeCriteria(a.max_trans, a.max_rot, a.max_gap, a.min_coobs)
    for mid, (before, after) in keyframe_map(m, crit).items():
        print(f"mission {mid}: {before} -> {after} keyframes")
    m.index = None
    return True


def cmd_filter_landmarks(a, m):
    good, bad = filter_landmarks(m, QualityThresholds(a.min_observers, a.min_disparity_deg,
                                                      a.max_distance))
    print(f"good {good} bad {bad}")
    return True


def cmd_align(a, m):
    rep = align_missions(m, a.reference, _loop_config(a))
    for mid, rnd in sorted(rep.rounds.items()):
        res = rep.results.get(mid)
        extra = f" inliers {res.inlier_count}/{res.total_matches}" if res else ""
        print(f"mission {mid} anchored in round {rnd}{extra}")
    for mid in rep.unanchored:
        print(f"mission {mid} not anchored (no overlap)")
    return True


def cmd_relax(a, m):
    lc = LoopClosureConfig(matching=_loop_config(a), switch_prior_weight=a.switch_prior_weight,
                           query_stride=a.query_stride,
                           min_vertex_separation=a.min_vertex_separation)
    cons = build_loop_constraints(m, lc)
    res = relax(m, cons, RelaxConfig(max_iterations=a.max_iters))
    low = int((res.switches < 0.5).sum()) if len(cons) else 0
    print(f"loop constraints {len(cons)}, switched off {low}")
    print(f"cost {res.stats.initial_cost:.6g} -> {res.stats.final_cost:.6g} "
          f"in {res.stats.iterations} iterations")
    return True


def cmd_loopclose_merge(a, m):
    n = merge_duplicate_landmarks(m, _loop_config(a))
    print(f"merged {n} landmarks")
    m.index = None
    return True


def cmd_optimize(a, m):
    huber = None if a.huber_px is None or a.huber_px <= 0 else a.huber_px
    st = optimize_full_batch(m, SolverConfig(max_iterations=a.max_iters, huber_threshold_px=huber,
                                             linear_solver=a.linear_solver))
    print("iteration cost seconds")
    for it, cost, sec in st.history:
        print(f"{it} {cost:.9g} {sec:.3f}")
    print(f"reprojection rmse {st.reprojection_rmse:.4f} px, converged {st.converged}")
    return True


def cmd_summarize(a, m):
    before = len(m.usable_landmarks())
    kept = summarize(m, a.target_landmarks, a.min_cover)
    print(f"retained {kept} of {before} landmarks")
    m.index = None
    return True


def cmd_build_index(a, m):
    m.index = build_landmark_index(m, _loop_config(a))
    print(f"indexed {len(m.index.imi.ids)} descriptors in "
          f"{m.index.imi.codebook_1.shape[0]}x{m.index.imi.codebook_2.shape[0]} cells")
    return True


def cmd_localize(a, m):
    if m.index is None:
        raise IndexNotBuilt("run build-index first")
    cfg = LocalizationConfig(probe_cells=a.probe_cells, inlier_px=a.inlier_px,
                             min_inliers=a.min_inliers, seed=a.seed or 0)
    query = Map(m.descriptor_bits, m.cameras)
    ingest_session(a.query_log, query)
    rows, hits = [], 0
    for vid in query.missions[0].vertex_ids:
        v = query.vertices[vid]
        for f, frame in enumerate(v.frames):
            if len(frame) == 0:
                continue
            res = localize_frame(frame, m.cameras[f], m, config=cfg)
            if res.localized:
                hits += 1
                vals = (*res.pose.translation, *res.pose.rotation)
            else:
                vals = ("",) * 7
            rows.append((v.timestamp, res.status.value, *vals, res.inlier_count,
                         1000.0 * res.query_time))
    with open(a.out, "w") as fh:
        fh.write("frame_ts,status,x,y,z,qw,qx,qy,qz,inliers,query_ms\n")
        for r in rows:
            fh.write(",".join(x if isinstance(x, str) else repr(float(x)) if isinstance(x, float)
                              else str(x) for x in r) + "\n")
    mean_ms = sum(r[-1] for r in rows) / max(len(rows), 1)
    print(f"localized {hits} of {len(rows)} frames, mean query {mean_ms:.1f} ms")
    return False


def cmd_stats(a, m):
    c = m.counts()
    print(f"{c['missions']} missions, {c['keyframes']} keyframes, {c['landmarks']} landmarks "
          f"({c['good_landmarks']} good), {c['descriptors']} descriptors, {c['edges']} edges")
    print(f"index {'present' if m.index is not None else 'absent'}")
    return False


def cmd_export_trajectory(a, m):
    with open(a.out, "w") as fh:
        fh.write("ts,x,y,z,qw,qx,qy,qz\n")
        for mission in m.missions.values():
            for vid in mission.vertex_ids:
                T = m.global_pose(vid)
                vals = ",".join(repr(float(x)) for x in (*T.translation, *T.rotation))
                fh.write(f"{float(m.vertices[vid].timestamp)!r},{vals}\n")
    print(f"wrote {len(m.vertices)} poses to {a.out}")
    return False


def cmd_check(a, m):
    report = check_integrity(m)
    for v in report:
        print(v)
    if report:
        raise MapError(f"{len(report)} integrity violations")
    print("no violations")
    return False


def cmd_synth(a):
    cfg = synth.WorldConfig.from_file(a.world_config) if a.world_config else synth.WorldConfig()
    if a.seed is not None:
        cfg.seed = a.seed
    logs, truth = synth.generate_world(cfg)
    for p in synth.write_world(logs, truth, a.out):
        print(p)


# -- argument parsing -----------------------------------------------------------------

def build_parser():
    p = _Parser(prog="mapstitch", description="Offline multi-session map building and "
                                              "localization.")
    p.add_argument("--config", dest="preset_file", metavar="FILE",
                   help="key-value file presetting any flag; command-line flags win")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def cmd(name, func, helptext, needs_map=True):
        s = sub.add_parser(name, help=helptext)
        if needs_map:
            s.add_argument("map", help="map directory")
        s.set_defaults(func=func, needs_map=needs_map)
        return s

    def matching(s):
        s.add_argument("--probe-cells", type=int, default=8)
        s.add_argument("--match-threshold", type=float, default=1.0)
        s.add_argument("--seed", type=int, default=0)

    s = cmd("ingest", cmd_ingest, "append session logs as new missions")
    s.add_argument("logs", nargs="+")
    s = cmd("keyframe", cmd_keyframe, "drop redundant vertices")
    s.add_argument("--max-trans", type=float, default=0.25)
    s.add_argument("--max-rot", type=float, default=0.15)
    s.add_argument("--max-gap", type=int, default=4)
    s.add_argument("--min-coobs", type=_opt_int, default=20)
    s = cmd("filter-landmarks", cmd_filter_landmarks, "flag unreliable landmarks")
    s.add_argument("--min-observers", type=int, default=4)
    s.add_argument("--min-disparity-deg", type=float, default=5.0)
    s.add_argument("--max-distance", type=float, default=50.0)
    s = cmd("align", cmd_align, "anchor missions into the reference frame")
    s.add_argument("--reference", type=int, default=None)
    s.add_argument("--inlier-radius", type=float, default=0.2)
    s.add_argument("--min-inliers", type=int, default=15)
    matching(s)
    s = cmd("relax", cmd_relax, "detect loop closures and run robust pose-graph relaxation")
    s.add_argument("--max-iters", type=int, default=100)
    s.add_argument("--switch-prior-weight", type=float, default=DEFAULT_SWITCH_PRIOR_WEIGHT)
    s.add_argument("--query-stride", type=int, default=3)
    s.add_argument("--min-vertex-separation", type=int, default=50)
    matching(s)
    s = cmd("loopclose-merge", cmd_loopclose_merge, "merge duplicate landmarks across missions")
    s.add_argument("--merge-radius", type=float, default=0.3)
    matching(s)
    s = cmd("optimize", cmd_optimize, "full-batch bundle adjustment")
    s.add_argument("--max-iters", type=int, default=50)
    s.add_argument("--huber-px", type=float, default=2.0, help="0 disables the robust loss")
    s.add_argument("--linear-solver", choices=("schur", "dense"), default="schur")
    s = cmd("summarize", cmd_summarize, "keep the landmarks best covering the keyframes")
    s.add_argument("--target-landmarks", type=int, required=True)
    s.add_argument("--min-cover", type=int, default=DEFAULT_MIN_COVER)
    s = cmd("build-index", cmd_build_index, "build the descriptor retrieval index")
    s.add_argument("--codebook-size", type=int, default=16)
    s.add_argument("--projection-dim", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s = cmd("localize", cmd_localize, "localize the frames of a session log against the map")
    s.add_argument("--query-log", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--probe-cells", type=int, default=8)
    s.add_argument("--inlier-px", type=float, default=3.0)
    s.add_argument("--min-inliers", type=int, default=12)
    s.add_argument("--seed", type=int, default=0)
    cmd("stats", cmd_stats, "print map size")
    s = cmd("export-trajectory", cmd_export_trajectory, "write global vertex poses as CSV")
    s.add_argument("--out", required=True)
    s = cmd("synth", cmd_synth, "generate a synthetic world", needs_map=False)
    s.add_argument("--config", dest="world_config", metavar="FILE")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    cmd("check", cmd_check, "verify map integrity")
    return p


def read_preset(path):
    """``key value`` (or ``key = value``) lines; ``#`` starts a comment."""
    out = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.replace("=", " ", 1).partition(" ")
        if not value.strip():
            raise UsageError(f"{path}:{n}: missing value for {key!r}")
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


def _apply_preset(parser, command, preset):
    """Install preset values as defaults of the chosen subcommand."""
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    known = {a.dest for s in sub.choices.values() for a in s._actions if a.option_strings}
    unknown = sorted(set(preset) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    sp = sub.choices.get(command)
    if sp is None:
        return
    defaults = {}
    for act in sp._actions:
        if act.dest in preset and act.option_strings:
            val = preset[act.dest]
            try:
                defaults[act.dest] = act.type(val) if act.type else val
            except (TypeError, ValueError):
                raise UsageError(f"bad config value for {act.dest}: {val!r}") from None
            if act.choices is not None and defaults[act.dest] not in act.choices:
                raise UsageError(f"bad config value for {act.dest}: {val!r}")
            act.required = False
    sp.set_defaults(**defaults)


def _peak_memory_mb():
    kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return kb / 1024.0 if sys.platform != "darwin" else kb / 2 ** 20


def run(argv=None):
    """Execute one command line; returns the exit code."""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        # global options precede the command; the preset must be known before parsing it
        sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        split = next((i for i, tok in enumerate(argv) if tok in sub.choices), len(argv))
        head, _ = parser.parse_known_args(argv[:split])
        if head.preset_file and split < len(argv):
            _apply_preset(parser, argv[split], read_preset(head.preset_file))
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
    except UsageError as exc:
        print(f"mapstitch: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        if not args.needs_map:
            args.func(args)
        else:
            with map_lock(args.map):
                if args.command == "ingest" and not os.path.exists(os.path.join(args.map,
                                                                                "manifest")):
                    m = Map()
                else:
                    m = load_map(args.map)
                if args.func(args, m):
                    save_map(m, args.map)
    except SolverError as exc:
        print(f"mapstitch: solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except MapError as exc:
        print(f"mapstitch: data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"mapstitch: error: {exc}", file=sys.stderr)
        return 1
    print(f"[{args.command}] {time.perf_counter() - t0:.2f} s, peak memory "
          f"{_peak_memory_mb():.1f} MB")
    return 0


def main():
    sys.exit(run())
