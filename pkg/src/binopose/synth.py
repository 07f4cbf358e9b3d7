"""Deterministic synthetic binocular scenes.

Poses come from a 17-joint kinematic skeleton (Human3.6M joint order) driven
by a handful of correlated "motion synergies" plus small independent jitter,
so the pose distribution has real joint-to-joint structure for the pose
transformer to learn. Scenes are rendered as per-view Gaussian-bump feature
maps that stand in for a 2D backbone.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import RectifiedRig, project

J = 17
JOINT_NAMES = (
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
)
PARENTS = (0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)
PELVIS = 0


@dataclass(frozen=True)
class SkeletonModel:
    parent_index: tuple = PARENTS
    # indexed by child joint 1..16
    bone_length_mm: tuple = (130.0, 450.0, 440.0, 130.0, 450.0, 440.0,
                             230.0, 250.0, 110.0, 115.0,
                             150.0, 280.0, 250.0, 150.0, 280.0, 250.0)
    bone_class: tuple = ("torso", "leg", "leg", "torso", "leg", "leg",
                         "torso", "torso", "head", "head",
                         "torso", "arm", "arm", "torso", "arm", "arm")

    def __post_init__(self):
        if len(self.parent_index) != J or self.parent_index[PELVIS] != PELVIS:
            raise ValueError("skeleton needs 17 joints rooted at the pelvis")
        if len(self.bone_length_mm) != J - 1 or min(self.bone_length_mm) <= 0:
            raise ValueError("need 16 positive bone lengths")
        for j in range(1, J):
            if not 0 <= self.parent_index[j] < j:
                raise ValueError("parents must precede children (tree rooted at pelvis)")

    @property
    def joint_count(self) -> int:
        return J

    @property
    def bones(self) -> list[tuple[int, int]]:
        return [(self.parent_index[c], c) for c in range(1, J)]

    def length(self, child: int) -> float:
        return self.bone_length_mm[child - 1]


# Angle vector layout (radians).
ANGLE_NAMES = (
    "spine_flex", "spine_side", "neck_flex", "twist",
    "l_sh_flex", "l_sh_abd", "l_elbow", "r_sh_flex", "r_sh_abd", "r_elbow",
    "l_hip_flex", "l_hip_abd", "l_knee", "r_hip_flex", "r_hip_abd", "r_knee",
)
_A = {n: i for i, n in enumerate(ANGLE_NAMES)}

_REST = np.zeros(len(ANGLE_NAMES))
_REST[[_A["l_sh_abd"], _A["r_sh_abd"]]] = 0.15
_REST[[_A["l_elbow"], _A["r_elbow"]]] = 0.35
_REST[[_A["l_knee"], _A["r_knee"]]] = 0.1
_REST[[_A["l_hip_abd"], _A["r_hip_abd"]]] = 0.05


def _synergy(**weights):
    v = np.zeros(len(ANGLE_NAMES))
    for k, w in weights.items():
        v[_A[k]] = w
    return v


# Columns of the synergy matrix; latent coordinates are ~N(0, 1).
SYNERGIES = np.stack([
    # gait: counter-swinging arms and legs
    _synergy(l_sh_flex=0.5, r_sh_flex=-0.5, l_hip_flex=-0.4, r_hip_flex=0.4,
             l_elbow=0.2, r_elbow=0.2, twist=0.1),
    # squat
    _synergy(l_hip_flex=0.55, r_hip_flex=0.55, l_knee=0.8, r_knee=0.8,
             spine_flex=0.3, l_sh_flex=0.3, r_sh_flex=0.3),
    # two-arm reach
    _synergy(l_sh_flex=0.6, r_sh_flex=0.6, l_elbow=-0.25, r_elbow=-0.25,
             spine_flex=0.15, neck_flex=0.2),
    # lateral lean / jumping-jack
    _synergy(spine_side=0.2, l_sh_abd=0.5, r_sh_abd=0.5, l_hip_abd=0.12,
             r_hip_abd=0.12),
    # one-arm wave
    _synergy(r_sh_abd=0.55, r_elbow=0.6, l_sh_flex=0.15, spine_side=-0.1),
    # bend and pick up
    _synergy(spine_flex=0.45, neck_flex=-0.2, l_elbow=0.3, r_elbow=0.3,
             l_knee=0.25, r_knee=0.25, l_hip_flex=0.2, r_hip_flex=0.2),
], axis=1)

ANGLE_LIMITS = (
    np.array([-0.3, -0.5, -0.6, -0.5, -1.2, 0.0, 0.0, -1.2, 0.0, 0.0,
              -0.8, -0.1, 0.0, -0.8, -0.1, 0.0]),
    np.array([1.1, 0.5, 0.8, 0.5, 1.9, 1.6, 2.2, 1.9, 1.6, 2.2,
              1.6, 0.5, 2.2, 1.6, 0.5, 2.2]),
)


@dataclass
class PoseConfig:
    latent_clip: float = 2.5
    angle_jitter_rad: float = 0.06
    yaw_range_deg: float = 70.0
    tilt_range_deg: float = 4.0
    root_x_mm: tuple = (-250.0, 250.0)
    root_y_mm: tuple = (0.0, 150.0)
    depth_mm: tuple = (3000.0, 4500.0)


def _rot(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def _unit(v):
    return v / np.linalg.norm(v)


def pose_from_angles(skeleton: SkeletonModel, angles, root, yaw, tilt=0.0) -> np.ndarray:
    """Forward kinematics in camera coordinates (x right, y down, z forward).

    Local body axes: L = subject's left, U = up, F = facing direction. At zero
    yaw the subject faces the camera.
    """
    a = np.asarray(angles, dtype=np.float64)
    R = _rot((0, 1, 0), yaw) @ _rot((1, 0, 0), tilt)
    L, U, F = R @ np.array([1.0, 0, 0]), R @ np.array([0, -1.0, 0]), R @ np.array([0, 0, -1.0])

    dirs = np.zeros((J, 3))
    # torso chain
    twist = _rot(U, a[_A["twist"]])
    spine = _rot(F, -a[_A["spine_side"]]) @ _rot(L, -a[_A["spine_flex"]]) @ U
    dirs[7] = _unit(spine)
    dirs[8] = _unit(_rot(L, -0.5 * a[_A["spine_flex"]]) @ spine)
    neck = _rot(L, -a[_A["neck_flex"]]) @ dirs[8]
    dirs[9] = _unit(neck)
    dirs[10] = _unit(neck)
    Ls = twist @ L
    Fs = twist @ F
    dirs[11] = _unit(Ls)
    dirs[14] = _unit(-Ls)
    dirs[4] = L
    dirs[1] = -L

    down = -U

    def limb(side, flex, abd, bend, bend_sign):
        # abduction swings towards ``side``, flexion towards F (about the L axis)
        d1 = _rot(L, -flex) @ _unit(np.cos(abd) * down + np.sin(abd) * side)
        axis = np.cross(d1, F)
        if np.linalg.norm(axis) < 1e-6:
            axis = L
        # positive bend moves the distal segment towards F
        d2 = _rot(axis, bend_sign * bend) @ d1
        return _unit(d1), _unit(d2)

    dirs[12], dirs[13] = limb(Ls, a[_A["l_sh_flex"]], a[_A["l_sh_abd"]], a[_A["l_elbow"]], 1.0)
    dirs[15], dirs[16] = limb(-Ls, a[_A["r_sh_flex"]], a[_A["r_sh_abd"]], a[_A["r_elbow"]], 1.0)
    dirs[5], dirs[6] = limb(L, a[_A["l_hip_flex"]], a[_A["l_hip_abd"]], a[_A["l_knee"]], -1.0)
    dirs[2], dirs[3] = limb(-L, a[_A["r_hip_flex"]], a[_A["r_hip_abd"]], a[_A["r_knee"]], -1.0)

    pose = np.zeros((J, 3))
    pose[0] = root
    for c in range(1, J):
        pose[c] = pose[skeleton.parent_index[c]] + skeleton.length(c) * dirs[c]
    return pose


def sample_pose(skeleton: SkeletonModel, rng: np.random.Generator,
                config: PoseConfig | None = None) -> np.ndarray:
    """Draw one pose (17, 3) in mm, camera frame."""
    cfg = config or PoseConfig()
    z = np.clip(rng.standard_normal(SYNERGIES.shape[1]), -cfg.latent_clip, cfg.latent_clip)
    angles = _REST + SYNERGIES @ z + cfg.angle_jitter_rad * rng.standard_normal(len(ANGLE_NAMES))
    angles = np.clip(angles, *ANGLE_LIMITS)
    yaw = np.deg2rad(rng.uniform(-cfg.yaw_range_deg, cfg.yaw_range_deg))
    tilt = np.deg2rad(rng.uniform(-cfg.tilt_range_deg, cfg.tilt_range_deg))
    root = np.array([rng.uniform(*cfg.root_x_mm), rng.uniform(*cfg.root_y_mm),
                     rng.uniform(*cfg.depth_mm)])
    return pose_from_angles(skeleton, angles, root, yaw, tilt)


# ---------------------------------------------------------------------------
# occlusion labelling
# ---------------------------------------------------------------------------

OCCLUSION_THRESHOLDS_PX = {"arm": 4.0, "leg": 6.0, "torso": 10.0, "head": 6.0}
THRESHOLD_REFERENCE_WIDTH = 256


def _point_segment_distance(p, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + t * ab)))


def _adjacent_bones(skeleton: SkeletonModel) -> list[set[int]]:
    """Per joint, the bone indices treated as adjacent.

    A bone is adjacent to joint j when one of its endpoints is j or a direct
    neighbour of j, i.e. it shares a joint with a bone incident to j.
    """
    bones = skeleton.bones
    nbrs = [{j} for j in range(J)]
    for p, c in bones:
        nbrs[p].add(c)
        nbrs[c].add(p)
    return [{i for i, (p, c) in enumerate(bones) if p in nbrs[j] or c in nbrs[j]} for j in range(J)]


def label_occlusions(pose, rig: RectifiedRig, skeleton: SkeletonModel | None = None,
                     thresholds: dict | None = None, frame_width: float | None = None) -> np.ndarray:
    """Geometric occlusion flags, shape (2, 17) for (left, right).

    Joint j is occluded in a view iff its projection lies within the bone
    class threshold of the projection of a non-adjacent bone whose midpoint
    is nearer to the camera than joint j. Thresholds are in pixels at a
    256-px-wide frame and scale linearly with ``frame_width`` (default: the
    rig image width; scenes pass their crop width).
    """
    skeleton = skeleton or SkeletonModel()
    thr = dict(OCCLUSION_THRESHOLDS_PX, **(thresholds or {}))
    scale = (frame_width or rig.image_size[0]) / THRESHOLD_REFERENCE_WIDTH
    pose = np.asarray(pose, dtype=np.float64)
    bones = skeleton.bones
    adjacent = _adjacent_bones(skeleton)
    mid_depth = np.array([(pose[p, 2] + pose[c, 2]) / 2 for p, c in bones])
    bone_thr = np.array([thr[skeleton.bone_class[c - 1]] * scale for _, c in bones])

    flags = np.zeros((2, J), dtype=bool)
    for v, kp in enumerate(project(rig, pose)):
        for j in range(J):
            for i, (p, c) in enumerate(bones):
                if i in adjacent[j] or not mid_depth[i] < pose[j, 2]:
                    continue
                if _point_segment_distance(kp[j], kp[p], kp[c]) < bone_thr[i]:
                    flags[v, j] = True
                    break
    return flags


# ---------------------------------------------------------------------------
# scenes, crops and feature rendering
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    grid: tuple = (64, 64)  # (H, W) feature cells
    stride_px: int = 2
    channels: int = 24
    bump_sigma_cells: float = 1.25
    noise_sigma: float = 0.05
    occlusion_attenuation: float = 0.2
    distractors: int = 6
    distractor_sigma_cells: float = 1.5
    crop_jitter_cells: int = 2
    crop_margin_cells: int = 2
    pose: PoseConfig = field(default_factory=PoseConfig)
    occlusion_thresholds: dict = field(default_factory=lambda: dict(OCCLUSION_THRESHOLDS_PX))

    @property
    def frame_width_px(self) -> int:
        """Width of the crop in pixels; the synthetic 'frame' for thresholds and JDR."""
        return self.grid[1] * self.stride_px

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).digest()


@dataclass(frozen=True)
class CropWindow:
    """Shared-row crop: both views use the same top edge and stride."""
    origin_left: tuple  # (ox, oy) in full-frame pixels
    origin_right: tuple
    stride_px: int
    grid: tuple  # (H, W)

    def origin(self, view: int) -> tuple:
        return self.origin_left if view == 0 else self.origin_right

    def to_grid(self, pixels, view: int) -> np.ndarray:
        ox, oy = self.origin(view)
        p = np.asarray(pixels, dtype=np.float64)
        return np.stack([(p[..., 0] - ox) / self.stride_px, (p[..., 1] - oy) / self.stride_px], -1)

    def to_frame(self, grid_uv, view: int) -> np.ndarray:
        ox, oy = self.origin(view)
        g = np.asarray(grid_uv, dtype=np.float64)
        return np.stack([ox + self.stride_px * g[..., 0], oy + self.stride_px * g[..., 1]], -1)


@dataclass
class SceneSample:
    pose: np.ndarray  # (17, 3) mm
    rig: RectifiedRig
    gt_keypoints: np.ndarray  # (2, 17, 2) full-frame pixels
    occluded: np.ndarray  # (2, 17) bool
    render_seed: int
    crop: CropWindow

    def gt_grid(self, view: int) -> np.ndarray:
        return self.crop.to_grid(self.gt_keypoints[view], view)

    def gt_cokeypoints(self) -> np.ndarray:
        """Continuous (d, h, w) per joint in the crop's disparity space."""
        gl, gr = self.gt_grid(0), self.gt_grid(1)
        D = self.rig.disparity_range
        return np.stack([gl[:, 0] - gr[:, 0] + D / 2, gl[:, 1], gl[:, 0]], -1)


def make_crop(rig: RectifiedRig, keypoints, render_seed: int, config: SynthConfig) -> CropWindow:
    H, W = config.grid
    s = config.stride_px
    rng = np.random.default_rng([render_seed, 7])
    jitter = rng.integers(-config.crop_jitter_cells, config.crop_jitter_cells + 1, size=2) * s
    kl, kr = keypoints
    v_mid = 0.5 * (min(kl[:, 1].min(), kr[:, 1].min()) + max(kl[:, 1].max(), kr[:, 1].max()))
    oy = int(np.floor(v_mid - s * (H - 1) / 2))
    ox = [int(np.floor(0.5 * (k[:, 0].min() + k[:, 0].max()) - s * (W - 1) / 2)) + int(jitter[i])
          for i, k in enumerate((kl, kr))]
    return CropWindow((ox[0], oy), (ox[1], oy), s, (H, W))


def crop_contains(crop: CropWindow, keypoints, margin_cells: float) -> bool:
    H, W = crop.grid
    for view in (0, 1):
        g = crop.to_grid(keypoints[view], view)
        if (g[:, 0].min() < margin_cells or g[:, 0].max() > W - 1 - margin_cells
                or g[:, 1].min() < margin_cells or g[:, 1].max() > H - 1 - margin_cells):
            return False
    return True


def scene_from_record(pose, rig: RectifiedRig, render_seed: int, config: SynthConfig,
                      occluded=None, skeleton: SkeletonModel | None = None) -> SceneSample:
    pose = np.asarray(pose, dtype=np.float64)
    kp = np.stack(project(rig, pose))
    if occluded is None:
        occluded = label_occlusions(pose, rig, skeleton, config.occlusion_thresholds,
                                    frame_width=config.frame_width_px)
    crop = make_crop(rig, kp, render_seed, config)
    return SceneSample(pose, rig, kp, np.asarray(occluded, dtype=bool), int(render_seed), crop)


def make_scene(rig: RectifiedRig, config: SynthConfig, seed,
               skeleton: SkeletonModel | None = None, max_tries: int = 1000) -> SceneSample:
    """Sample poses until one fits inside its crop window (rejection sampling)."""
    skeleton = skeleton or SkeletonModel()
    rng = np.random.default_rng(seed)
    D = rig.disparity_range
    for _ in range(max_tries):
        pose = sample_pose(skeleton, rng, config.pose)
        render_seed = int(rng.integers(0, 2**63 - 1))
        if pose[:, 2].min() <= 0:
            continue
        scene = scene_from_record(pose, rig, render_seed, config, skeleton=skeleton)
        ck = scene.gt_cokeypoints()
        if crop_contains(scene.crop, scene.gt_keypoints, config.crop_margin_cells) \
                and ck[:, 0].min() >= 0.5 and ck[:, 0].max() <= D - 0.5:
            return scene
    raise RuntimeError("could not place a pose inside the crop; check rig and pose ranges")


def _bumps(centers, H, W, sigma):
    hh = np.arange(H, dtype=np.float64)
    ww = np.arange(W, dtype=np.float64)
    gy = np.exp(-(hh[None, :] - centers[:, 1:2]) ** 2 / (2 * sigma**2))
    gx = np.exp(-(ww[None, :] - centers[:, 0:1]) ** 2 / (2 * sigma**2))
    return gy[:, :, None] * gx[:, None, :]


def render_features(sample: SceneSample, view: int, config: SynthConfig,
                    channels: int | None = None, noise_sigma: float | None = None,
                    occlusion_attenuation: float | None = None) -> np.ndarray:
    """Backbone stand-in: (C, H, W) float64 feature map for one view.

    Channels 0..16 hold a Gaussian bump per joint (scaled by the attenuation
    when the joint is occluded in this view). The remaining channels hold
    bumps from background clutter points that are fixed in 3D, so they move
    consistently between views. Every channel gets i.i.d. N(0, noise^2).
    """
    C = config.channels if channels is None else channels
    sigma_n = config.noise_sigma if noise_sigma is None else noise_sigma
    att = config.occlusion_attenuation if occlusion_attenuation is None else occlusion_attenuation
    if C < J:
        raise ValueError(f"need at least {J} channels, got {C}")
    H, W = sample.crop.grid
    feats = np.zeros((C, H, W))

    amp = np.where(sample.occluded[view], att, 1.0)
    feats[:J] = amp[:, None, None] * _bumps(sample.gt_grid(view), H, W, config.bump_sigma_cells)

    if C > J and config.distractors > 0:
        rng = np.random.default_rng([sample.render_seed, 1])
        n = config.distractors
        centre = sample.pose.mean(0)
        pts = np.stack([centre[0] + rng.uniform(-900, 900, n),
                        centre[1] + rng.uniform(-900, 900, n),
                        centre[2] + rng.uniform(300, 1500, n)], -1)
        chan = rng.integers(J, C, size=n)
        amps = rng.uniform(0.3, 1.0, size=n)
        g = sample.crop.to_grid(project(sample.rig, pts)[view], view)
        for k, b in enumerate(_bumps(g, H, W, config.distractor_sigma_cells)):
            feats[chan[k]] += amps[k] * b

    if sigma_n > 0:
        rng = np.random.default_rng([sample.render_seed, 2, view])
        feats += sigma_n * rng.standard_normal(feats.shape)
    return feats


# ---------------------------------------------------------------------------
# dataset container
# ---------------------------------------------------------------------------

MAGIC = b"BPSYN\x00\x00\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIIQddddIII32sI")
_RECORD = struct.Struct("<" + "d" * (3 * J) + "IIQ")


def _bitmap(flags) -> int:
    return int(sum(1 << j for j, f in enumerate(flags) if f))


def _unbitmap(bits: int) -> np.ndarray:
    return np.array([(bits >> j) & 1 for j in range(J)], dtype=bool)


def sample_seeds(seed: int, n: int) -> list:
    return np.random.SeedSequence(seed).spawn(n)


def generate_scenes(rig: RectifiedRig, config: SynthConfig, seed: int, n: int) -> list[SceneSample]:
    return [make_scene(rig, config, s) for s in sample_seeds(seed, n)]


def make_dataset(rig: RectifiedRig, config: SynthConfig, seed: int, n: int, path,
                 csv_mirror: bool = True) -> Path:
    """Generate ``n`` scenes and write them to ``path`` (plus a ``.csv`` pose mirror).

    Feature maps are not stored; re-render them from ``render_seed``.
    """
    path = Path(path)
    scenes = generate_scenes(rig, config, seed, n)
    write_dataset(path, rig, config, scenes)
    if csv_mirror:
        write_pose_csv(path.with_suffix(".csv"), scenes)
    return path


def write_dataset(path, rig: RectifiedRig, config: SynthConfig, scenes) -> Path:
    path = Path(path)
    cfg_blob = json.dumps(config.to_dict(), sort_keys=True, default=list).encode()
    header = _HEADER.pack(MAGIC, VERSION, J, len(scenes), rig.focal_px, rig.cx, rig.cy,
                          rig.baseline_mm, rig.image_size[0], rig.image_size[1],
                          rig.disparity_range, config.digest(), len(cfg_blob))
    try:
        with path.open("wb") as fh:
            fh.write(header)
            fh.write(cfg_blob)
            for s in scenes:
                fh.write(_RECORD.pack(*s.pose.reshape(-1).tolist(), _bitmap(s.occluded[0]),
                                      _bitmap(s.occluded[1]), s.render_seed))
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc
    return path


@dataclass
class Dataset:
    rig: RectifiedRig
    config: SynthConfig
    config_hash: bytes
    scenes: list


def _config_from_dict(d: dict) -> SynthConfig:
    d = dict(d)
    d["grid"] = tuple(d["grid"])
    pose = dict(d.pop("pose"))
    for k in ("root_x_mm", "root_y_mm", "depth_mm"):
        pose[k] = tuple(pose[k])
    return SynthConfig(pose=PoseConfig(**pose), **d)


def load_dataset(path) -> Dataset:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    (magic, version, nj, n, f, cx, cy, b, W, H, D, digest, cfg_len) = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a scene dataset (bad magic)")
    if version != VERSION or nj != J:
        raise ValueError(f"{path}: unsupported version {version} / joint count {nj}")
    off = _HEADER.size
    config = _config_from_dict(json.loads(data[off:off + cfg_len]))
    off += cfg_len
    if len(data) != off + n * _RECORD.size:
        raise ValueError(f"{path}: expected {n} records, file size disagrees")
    rig = RectifiedRig(f, (cx, cy), b, (W, H), D)
    scenes = []
    for i in range(n):
        rec = _RECORD.unpack_from(data, off + i * _RECORD.size)
        pose = np.array(rec[:3 * J]).reshape(J, 3)
        occ = np.stack([_unbitmap(rec[3 * J]), _unbitmap(rec[3 * J + 1])])
        scenes.append(scene_from_record(pose, rig, rec[3 * J + 2], config, occluded=occ))
    return Dataset(rig, config, digest, scenes)


def write_pose_csv(path, scenes) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "joint", "name", "x_mm", "y_mm", "z_mm", "occ_left", "occ_right"])
        for i, s in enumerate(scenes):
            for j in range(J):
                w.writerow([i, j, JOINT_NAMES[j], *(repr(float(c)) for c in s.pose[j]),
                            int(s.occluded[0, j]), int(s.occluded[1, j])])
    return path
