"""Deterministic 2D range-scan localization simulator.

Worlds are sets of wall segments.  A vehicle follows a dense ground-truth
path; a new frame is emitted every time the accumulated travel distance or
heading change since the previous frame crosses a trigger threshold.  Each
frame carries the true relative pose, a dead-reckoning measurement (additive
Gaussian noise), a secondary pose measurement (either a correlative scan
matcher run on the simulated scans, or noise injected with a configured
anisotropy), the ego-frame scan, and optionally a noisy global pose.

All randomness comes from one counter-based generator (Philox) seeded from
the config, so a dataset is a bitwise-deterministic function of its config.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .se2 import Pose2, angle_difference, compose, inverse, normalize_angle

__all__ = [
    "World",
    "build_corridor",
    "serpentine_path",
    "raycast_scan",
    "MatchResult",
    "correlative_match",
    "SimConfig",
    "Frame",
    "Dataset",
    "simulate_run",
    "true_global_poses",
    "save_dataset",
    "load_dataset",
]


# --------------------------------------------------------------------------
# Worlds and paths


@dataclass(frozen=True)
class World:
    """Wall segments ``(x1, y1, x2, y2)`` plus the rectangle paths may occupy."""

    walls: np.ndarray
    bounds: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        walls = np.asarray(self.walls, dtype=float).reshape(-1, 4)
        if not np.all(np.isfinite(walls)):
            raise ValueError("wall coordinates must be finite")
        lengths = np.hypot(walls[:, 2] - walls[:, 0], walls[:, 3] - walls[:, 1])
        if np.any(lengths <= 0.0):
            raise ValueError("walls must have positive length")
        object.__setattr__(self, "walls", walls)

    @classmethod
    def from_walls(cls, walls: np.ndarray) -> "World":
        walls = np.asarray(walls, dtype=float).reshape(-1, 4)
        xs = np.concatenate([walls[:, 0], walls[:, 2]])
        ys = np.concatenate([walls[:, 1], walls[:, 3]])
        return cls(walls, (float(xs.min()), float(xs.max()), float(ys.min()), float(ys.max())))


def build_corridor(length: float, width: float, end_caps: bool = False) -> World:
    """Straight corridor along +x: two parallel walls, optionally capped.

    The corridor spans ``x in [0, length]`` with walls at ``y = +-width / 2``.
    """
    if not (math.isfinite(length) and length > 0.0):
        raise ValueError("corridor length must be positive")
    if not (math.isfinite(width) and width > 0.0):
        raise ValueError("corridor width must be positive")
    half = 0.5 * width
    walls = [
        (0.0, -half, length, -half),
        (0.0, half, length, half),
    ]
    if end_caps:
        walls.append((0.0, -half, 0.0, half))
        walls.append((length, -half, length, half))
    return World(np.array(walls), (0.0, length, -half, half))


def serpentine_path(
    x_start: float,
    x_end: float,
    amplitude: float,
    wavelength: float,
    y_center: float = 0.0,
    step: float = 0.1,
    phase: float = 0.0,
) -> np.ndarray:
    """Dense poses along ``y = y_center + A sin(2 pi (x - x_start) / wavelength + phase)``.

    Heading follows the path tangent.  ``amplitude = 0`` gives a straight
    path.  Returns an ``(P, 3)`` array of ``(x, y, theta)``.
    """
    if x_end <= x_start:
        raise ValueError("path must advance in +x")
    if step <= 0.0 or wavelength <= 0.0:
        raise ValueError("step and wavelength must be positive")
    xs = np.arange(x_start, x_end, step)
    if xs[-1] != x_end:
        xs = np.append(xs, x_end)
    k = 2.0 * math.pi / wavelength
    arg = k * (xs - x_start) + phase
    ys = y_center + amplitude * np.sin(arg)
    headings = np.arctan(amplitude * k * np.cos(arg))
    return np.column_stack([xs, ys, headings])


# --------------------------------------------------------------------------
# Range scans


def raycast_scan(
    world: World,
    pose: Pose2,
    beams: int = 180,
    max_range: float = 30.0,
    span: float = 2.0 * math.pi,
) -> np.ndarray:
    """Ego-frame hit points of evenly spaced beams; misses are omitted.

    Beam ``k`` points at local angle ``-span / 2 + k * span / beams``; with the
    default full-circle span this sweeps the whole circle once.  Returns an
    ``(K, 2)`` array.
    """
    if beams < 0:
        raise ValueError("beam count must be nonnegative")
    if beams == 0:
        return np.zeros((0, 2))
    local = -0.5 * span + span * np.arange(beams) / beams
    angles = pose.dtheta + local
    dir_x = np.cos(angles)
    dir_y = np.sin(angles)

    t_min = np.full(beams, np.inf)
    for x1, y1, x2, y2 in world.walls:
        seg_x = x2 - x1
        seg_y = y2 - y1
        rel_x = x1 - pose.dx
        rel_y = y1 - pose.dy
        denom = dir_x * seg_y - dir_y * seg_x
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (rel_x * seg_y - rel_y * seg_x) / denom
            s = (rel_x * dir_y - rel_y * dir_x) / denom
        valid = (np.abs(denom) > 1e-12) & (t > 1e-9) & (t <= max_range) & (s >= 0.0) & (s <= 1.0)
        t_min = np.where(valid & (t < t_min), t, t_min)

    hits = np.isfinite(t_min)
    return np.column_stack([t_min[hits] * np.cos(local[hits]), t_min[hits] * np.sin(local[hits])])


# --------------------------------------------------------------------------
# Correlative scan matching


@dataclass(slots=True)
class MatchResult:
    """Best relative pose plus the full score volume it was picked from.

    ``scores[kt, ky, kx]`` is the likelihood-field score of candidate
    ``(dx_offsets[kx], dy_offsets[ky], dtheta_offsets[kt])``; ``peak`` holds
    the winning ``(kt, ky, kx)``.
    """

    pose: Pose2
    scores: np.ndarray
    dx_offsets: np.ndarray
    dy_offsets: np.ndarray
    dtheta_offsets: np.ndarray
    peak: tuple[int, int, int]


def correlative_match(
    ref_scan: np.ndarray,
    tgt_scan: np.ndarray,
    init: Pose2,
    window_xy: float = 2.4,
    window_heading: float = math.radians(10.0),
    res_xy: float = 0.1,
    res_heading: float = math.radians(0.5),
) -> MatchResult:
    """Exhaustive correlative alignment of ``tgt_scan`` onto ``ref_scan``.

    Searches the translation/heading window centered on ``init`` on a regular
    lattice.  The reference scan is rasterized at ``res_xy`` into a graded
    likelihood field (2 on occupied cells, 1 on their one-cell halo) and a
    candidate scores the sum over its transformed target points, so exact
    alignments outrank near misses but sampling jitter of one cell still
    counts.  Ties are broken toward the lexicographically smallest
    ``(dx, dy, dtheta)``.
    """
    ref = np.asarray(ref_scan, dtype=float).reshape(-1, 2)
    tgt = np.asarray(tgt_scan, dtype=float).reshape(-1, 2)
    if ref.shape[0] == 0 or tgt.shape[0] == 0:
        raise ValueError("cannot match an empty scan")
    if res_xy <= 0.0 or res_heading <= 0.0:
        raise ValueError("resolutions must be positive")

    n_xy = int(round(window_xy / res_xy))
    n_th = int(round(window_heading / res_heading))
    dxs = init.dx + res_xy * np.arange(-n_xy, n_xy + 1)
    dys = init.dy + res_xy * np.arange(-n_xy, n_xy + 1)
    dths = init.dtheta + res_heading * np.arange(-n_th, n_th + 1)

    # One occupancy raster covers the reference points and every transformed
    # target point; candidate translations shift indices by whole cells.
    tgt_radius = float(np.max(np.hypot(tgt[:, 0], tgt[:, 1])))
    reach_x = tgt_radius + max(abs(dxs[0]), abs(dxs[-1]))
    reach_y = tgt_radius + max(abs(dys[0]), abs(dys[-1]))
    x_lo = min(float(ref[:, 0].min()), -reach_x) - 2.0 * res_xy
    x_hi = max(float(ref[:, 0].max()), reach_x) + 2.0 * res_xy
    y_lo = min(float(ref[:, 1].min()), -reach_y) - 2.0 * res_xy
    y_hi = max(float(ref[:, 1].max()), reach_y) + 2.0 * res_xy
    cols = int(math.ceil((x_hi - x_lo) / res_xy)) + 1
    rows = int(math.ceil((y_hi - y_lo) / res_xy)) + 1
    occupied = np.zeros((rows, cols), dtype=bool)
    ref_c = np.floor((ref[:, 0] - x_lo) / res_xy).astype(int)
    ref_r = np.floor((ref[:, 1] - y_lo) / res_xy).astype(int)
    occupied[ref_r, ref_c] = True
    padded = np.zeros((rows + 2, cols + 2), dtype=bool)
    padded[1:-1, 1:-1] = occupied
    halo = np.zeros_like(occupied)
    for dr in range(3):
        for dc in range(3):
            halo |= padded[dr : dr + rows, dc : dc + cols]
    field = occupied.astype(np.int32) + halo.astype(np.int32)

    scores = np.zeros((dths.size, dys.size, dxs.size), dtype=np.int32)
    shift_x = np.arange(dxs.size)
    shift_y = np.arange(dys.size)
    best: tuple[int, tuple[float, float, float], tuple[int, int, int]] | None = None
    for kt in range(dths.size):
        c = math.cos(dths[kt])
        s = math.sin(dths[kt])
        rot_x = c * tgt[:, 0] - s * tgt[:, 1]
        rot_y = s * tgt[:, 0] + c * tgt[:, 1]
        base_c = np.floor((rot_x + dxs[0] - x_lo) / res_xy).astype(int)
        base_r = np.floor((rot_y + dys[0] - y_lo) / res_xy).astype(int)
        gathered = field[
            base_r[:, None, None] + shift_y[None, :, None],
            base_c[:, None, None] + shift_x[None, None, :],
        ]
        slice_scores = gathered.sum(axis=0, dtype=np.int32)
        scores[kt] = slice_scores

        peak = int(slice_scores.max())
        ys, xs = np.nonzero(slice_scores == peak)
        order = np.lexsort((ys, xs))
        ky, kx = int(ys[order[0]]), int(xs[order[0]])
        candidate = (float(dxs[kx]), float(dys[ky]), float(dths[kt]))
        if best is None or peak > best[0] or (peak == best[0] and candidate < best[1]):
            best = (peak, candidate, (kt, ky, kx))

    _, (dx, dy, dth), peak_idx = best
    return MatchResult(
        Pose2(dx, dy, normalize_angle(dth)), scores, dxs, dys, dths, peak_idx
    )


# --------------------------------------------------------------------------
# Simulation


def _default_odo_noise() -> np.ndarray:
    return np.diag([0.02**2, 0.02**2, math.radians(0.2) ** 2])


@dataclass(slots=True)
class SimConfig:
    """All knobs of a simulated run; fully determines a dataset with a world and path.

    ``odo_noise`` is the per-frame dead-reckoning noise covariance.  In
    ``inject`` mode the secondary measurement is the true relative pose plus
    noise elongated along the world direction ``inject_axis`` (standard
    deviations along/across that axis), rotated into the previous frame;
    in ``matcher`` mode it comes from :func:`correlative_match` on the scans.
    Global poses are attached to every ``gps_every``-th frame.
    """

    beams: int = 180
    max_range: float = 30.0
    beam_span: float = 2.0 * math.pi
    odo_noise: np.ndarray = field(default_factory=_default_odo_noise)
    eso_mode: str = "matcher"
    inject_sigma_along: float = 1.0
    inject_sigma_across: float = 0.01
    inject_sigma_heading: float = math.radians(0.02)
    inject_axis: float = 0.0
    gps_sigma_pos: float = 0.05
    gps_sigma_heading: float = math.radians(0.1)
    gps_every: int = 25
    trigger_dist: float = 1.0
    trigger_heading: float = math.radians(30.0)
    match_window_xy: float = 2.4
    match_window_heading: float = math.radians(10.0)
    match_res_xy: float = 0.1
    match_res_heading: float = math.radians(0.5)
    seed: int = 0

    def __post_init__(self) -> None:
        self.odo_noise = np.asarray(self.odo_noise, dtype=float).reshape(3, 3)
        if self.eso_mode not in ("matcher", "inject"):
            raise ValueError(f"unknown secondary estimator mode {self.eso_mode!r}")
        if self.gps_every < 1:
            raise ValueError("gps_every must be at least 1")
        if self.trigger_dist <= 0.0 and self.trigger_heading <= 0.0:
            raise ValueError("at least one trigger threshold must be positive")


_META_FLOATS = (
    "max_range",
    "beam_span",
    "inject_sigma_along",
    "inject_sigma_across",
    "inject_sigma_heading",
    "inject_axis",
    "gps_sigma_pos",
    "gps_sigma_heading",
    "trigger_dist",
    "trigger_heading",
    "match_window_xy",
    "match_window_heading",
    "match_res_xy",
    "match_res_heading",
)
_META_INTS = ("beams", "gps_every", "seed")


@dataclass(slots=True)
class Frame:
    """One emitted simulation frame.

    ``x`` is the true relative pose from the previous frame, ``u`` its
    dead-reckoning measurement, ``z`` the secondary estimator measurement
    (all identity at frame 0), ``scan`` the ego-frame hit points, and ``gps``
    the noisy global pose when attached.
    """

    t: int
    x: Pose2
    u: Pose2
    z: Pose2
    scan: np.ndarray
    gps: Pose2 | None = None


@dataclass(slots=True)
class Dataset:
    """Frames of one run plus the config that produced them.

    ``start`` is the true world pose of frame 0; the true global pose of any
    frame is recovered by composing the true relative poses from it.
    """

    config: SimConfig
    start: Pose2
    frames: list[Frame]


def true_global_poses(dataset: Dataset) -> np.ndarray:
    """Ground-truth global trajectory, ``(N, 3)``, composed from the start pose."""
    pose = dataset.start
    out = [pose.as_array()]
    for frame in dataset.frames[1:]:
        pose = compose(pose, frame.x)
        out.append(pose.as_array())
    return np.array(out)


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """Factor ``F`` with ``F F^T = cov`` for symmetric PSD input (0 stays 0)."""
    vals, vecs = np.linalg.eigh(np.asarray(cov, dtype=float))
    if vals[0] < -1e-10:
        raise ValueError("noise covariance must be positive semidefinite")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def simulate_run(world: World, path: np.ndarray, cfg: SimConfig) -> Dataset:
    """Run the vehicle along a dense true path and emit the frame sequence.

    Raises
    ------
    ValueError
        If the path leaves the world bounds.
    """
    path = np.asarray(path, dtype=float).reshape(-1, 3)
    if path.shape[0] < 1:
        raise ValueError("path must contain at least one pose")
    xmin, xmax, ymin, ymax = world.bounds
    if (
        path[:, 0].min() < xmin
        or path[:, 0].max() > xmax
        or path[:, 1].min() < ymin
        or path[:, 1].max() > ymax
    ):
        raise ValueError("path exits world bounds")

    rng = np.random.Generator(np.random.Philox(cfg.seed))
    odo_factor = _psd_factor(cfg.odo_noise)

    # Frame selection by accumulated travel / heading change triggers.
    frame_poses = [Pose2.from_array(path[0])]
    dist_acc = 0.0
    last = path[0]
    for row in path[1:]:
        dist_acc += math.hypot(row[0] - last[0], row[1] - last[1])
        turn = abs(angle_difference(row[2], frame_poses[-1].dtheta))
        if (cfg.trigger_dist > 0.0 and dist_acc >= cfg.trigger_dist) or (
            cfg.trigger_heading > 0.0 and turn >= cfg.trigger_heading
        ):
            frame_poses.append(Pose2.from_array(row))
            dist_acc = 0.0
        last = row

    scans = [
        raycast_scan(world, pose, cfg.beams, cfg.max_range, cfg.beam_span)
        for pose in frame_poses
    ]

    frames: list[Frame] = []
    for t, pose in enumerate(frame_poses):
        if t == 0:
            x = u = z = Pose2.identity()
        else:
            prev = frame_poses[t - 1]
            x = compose(inverse(prev), pose)
            eps = odo_factor @ rng.standard_normal(3)
            u = Pose2(x.dx + eps[0], x.dy + eps[1], x.dtheta + eps[2])
            if cfg.eso_mode == "inject":
                noise = rng.standard_normal(3)
                rot = cfg.inject_axis - prev.dtheta
                c, s = math.cos(rot), math.sin(rot)
                along = cfg.inject_sigma_along * noise[0]
                across = cfg.inject_sigma_across * noise[1]
                z = Pose2(
                    x.dx + c * along - s * across,
                    x.dy + s * along + c * across,
                    x.dtheta + cfg.inject_sigma_heading * noise[2],
                )
            else:
                z = correlative_match(
                    scans[t - 1],
                    scans[t],
                    u,
                    cfg.match_window_xy,
                    cfg.match_window_heading,
                    cfg.match_res_xy,
                    cfg.match_res_heading,
                ).pose
        gps = None
        if t % cfg.gps_every == 0:
            noise = rng.standard_normal(3)
            gps = Pose2(
                pose.dx + cfg.gps_sigma_pos * noise[0],
                pose.dy + cfg.gps_sigma_pos * noise[1],
                pose.dtheta + cfg.gps_sigma_heading * noise[2],
            )
        frames.append(Frame(t, x, u, z, scans[t], gps))

    return Dataset(replace(cfg), Pose2.from_array(path[0]), frames)


# --------------------------------------------------------------------------
# Dataset files

_FRAMES_HEADER = "t,u_dx,u_dy,u_dth,z_dx,z_dy,z_dth,x_dx,x_dy,x_dth,gx,gy,gth,has_gps"


def _meta_lines(dataset: Dataset) -> list[str]:
    cfg = dataset.config
    lines = [f"format = fuseloc-dataset-v1"]
    for name in _META_INTS:
        lines.append(f"{name} = {getattr(cfg, name)}")
    for name in _META_FLOATS:
        lines.append(f"{name} = {float(getattr(cfg, name))!r}")
    lines.append(f"eso_mode = {cfg.eso_mode}")
    noise = ",".join(repr(float(v)) for v in cfg.odo_noise.reshape(-1))
    lines.append(f"odo_noise = {noise}")
    lines.append(f"start_x = {dataset.start.dx!r}")
    lines.append(f"start_y = {dataset.start.dy!r}")
    lines.append(f"start_theta = {dataset.start.dtheta!r}")
    lines.append(f"frame_count = {len(dataset.frames)}")
    return lines


def save_dataset(path, dataset: Dataset) -> None:
    """Write ``meta``, ``frames.csv`` and ``scans/<t>.csv`` under ``path``.

    Floats are written with ``repr`` (shortest round-trip form), so loading
    reproduces the dataset bit-exactly and identical datasets produce
    identical bytes.
    """
    os.makedirs(os.path.join(path, "scans"), exist_ok=True)
    with open(os.path.join(path, "meta"), "w", newline="") as fh:
        fh.write("\n".join(_meta_lines(dataset)) + "\n")
    with open(os.path.join(path, "frames.csv"), "w", newline="") as fh:
        fh.write(_FRAMES_HEADER + "\n")
        for fr in dataset.frames:
            gps = fr.gps if fr.gps is not None else Pose2.identity()
            cells = [str(fr.t)]
            for pose in (fr.u, fr.z, fr.x):
                cells += [repr(pose.dx), repr(pose.dy), repr(pose.dtheta)]
            cells += [repr(gps.dx), repr(gps.dy), repr(gps.dtheta), str(int(fr.gps is not None))]
            fh.write(",".join(cells) + "\n")
    for fr in dataset.frames:
        with open(os.path.join(path, "scans", f"{fr.t}.csv"), "w", newline="") as fh:
            for px, py in fr.scan:
                fh.write(f"{float(px)!r},{float(py)!r}\n")


def _parse_meta(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed meta line: {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def load_dataset(path) -> Dataset:
    """Inverse of :func:`save_dataset`."""
    with open(os.path.join(path, "meta")) as fh:
        meta = _parse_meta(fh.read())
    if meta.get("format") != "fuseloc-dataset-v1":
        raise ValueError("unrecognized dataset format")
    kwargs = {}
    for name in _META_INTS:
        kwargs[name] = int(meta[name])
    for name in _META_FLOATS:
        kwargs[name] = float(meta[name])
    kwargs["eso_mode"] = meta["eso_mode"]
    noise = np.array([float(v) for v in meta["odo_noise"].split(",")]).reshape(3, 3)
    kwargs["odo_noise"] = noise
    cfg = SimConfig(**kwargs)
    start = Pose2(float(meta["start_x"]), float(meta["start_y"]), float(meta["start_theta"]))
    count = int(meta["frame_count"])

    frames: list[Frame] = []
    with open(os.path.join(path, "frames.csv")) as fh:
        header = fh.readline().rstrip("\n")
        if header != _FRAMES_HEADER:
            raise ValueError("unexpected frames.csv header")
        for line in fh:
            cells = line.rstrip("\n").split(",")
            if len(cells) != 14:
                raise ValueError(f"malformed frames.csv row: {line!r}")
            t = int(cells[0])
            vals = [float(v) for v in cells[1:13]]
            u = Pose2(*vals[0:3])
            z = Pose2(*vals[3:6])
            x = Pose2(*vals[6:9])
            gps = Pose2(*vals[9:12]) if cells[13] == "1" else None
            scan_path = os.path.join(path, "scans", f"{t}.csv")
            points = []
            with open(scan_path) as sfh:
                for row in sfh:
                    row = row.strip()
                    if row:
                        px, py = row.split(",")
                        points.append((float(px), float(py)))
            scan = np.array(points, dtype=float).reshape(-1, 2)
            frames.append(Frame(t, x, u, z, scan, gps))
    if len(frames) != count:
        raise ValueError("frame count does not match meta")
    return Dataset(cfg, start, frames)
