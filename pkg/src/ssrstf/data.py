"""Pose clips: the PSEQ binary format, a synthetic kinematic-chain motion
generator with pinhole projection, root normalisation, and window batching."""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = b"PSEQ"
VERSION = 1
KIND_2D = "pose2d"
KIND_3D = "pose3d"
_KIND_CODES = {KIND_2D: 0, KIND_3D: 1}
_HEADER = struct.Struct("<4sIBIIf")


class ClipFormatError(ValueError):
    pass


class ClipVersionError(ClipFormatError):
    pass


class ClipTruncatedError(ClipFormatError):
    pass


class ClipChecksumError(ClipFormatError):
    pass


@dataclass
class PoseClip:
    """T x J x 3 float32 values.

    ``pose2d``: (u, v) in [-1, 1] plus a confidence in [0, 1].
    ``pose3d``: (x, y, z) in millimetres, camera frame.
    """

    values: np.ndarray
    kind: str
    clip_id: str = ""
    fps: float = 50.0

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.kind not in _KIND_CODES:
            raise ValueError(f"kind must be {KIND_2D!r} or {KIND_3D!r}, got {self.kind!r}")
        if self.values.ndim != 3 or self.values.shape[-1] != 3:
            raise ValueError(f"clip values must be (T, J, 3), got {self.values.shape}")
        if self.frames < 1 or self.joints < 2:
            raise ValueError(f"need T >= 1 and J >= 2, got T={self.frames}, J={self.joints}")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def joints(self) -> int:
        return self.values.shape[1]


# PSEQ format ---------------------------------------------------------------------


def encode_clip(clip: PoseClip) -> bytes:
    payload = clip.values.astype("<f4").tobytes()
    header = _HEADER.pack(MAGIC, VERSION, _KIND_CODES[clip.kind], clip.frames, clip.joints, clip.fps)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def decode_clip(blob: bytes, clip_id: str = "") -> PoseClip:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise ClipFormatError(f"not a pose clip: expected magic {MAGIC.decode()!r}, found {blob[:4]!r}")
    if len(blob) < _HEADER.size:
        raise ClipTruncatedError(f"truncated header: {len(blob)} bytes")
    _, version, kind, t, j, fps = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise ClipVersionError(f"unsupported PSEQ version {version}, expected {VERSION}")
    kinds = {v: k for k, v in _KIND_CODES.items()}
    if kind not in kinds:
        raise ClipFormatError(f"unknown clip kind code {kind}")
    n = t * j * 3 * 4
    expected = _HEADER.size + n + 4
    if len(blob) < expected:
        raise ClipTruncatedError(f"truncated clip: {len(blob)} bytes, expected {expected}")
    if len(blob) > expected:
        raise ClipFormatError(f"trailing bytes after clip: {len(blob)} bytes, expected {expected}")
    payload = blob[_HEADER.size:_HEADER.size + n]
    (crc,) = struct.unpack_from("<I", blob, _HEADER.size + n)
    if zlib.crc32(payload) != crc:
        raise ClipChecksumError("payload CRC32 mismatch")
    values = np.frombuffer(payload, dtype="<f4").reshape(t, j, 3).astype(np.float32)
    return PoseClip(values, kinds[kind], clip_id, fps)


def save_clip(clip: PoseClip, path) -> None:
    Path(path).write_bytes(encode_clip(clip))


def load_clip(path) -> PoseClip:
    path = Path(path)
    return decode_clip(path.read_bytes(), clip_id=path.stem)


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# normalisation ---------------------------------------------------------------------


def normalize(clip: PoseClip, root: int = 0) -> tuple[PoseClip, np.ndarray]:
    """Root-relative copy of a 3D clip plus the (T, 3) root trajectory."""
    if clip.kind != KIND_3D:
        raise ValueError("normalize needs a pose3d clip")
    roots = clip.values[:, root, :].copy()
    return PoseClip(clip.values - roots[:, None, :], KIND_3D, clip.clip_id, clip.fps), roots


def denormalize(clip: PoseClip, roots: np.ndarray) -> PoseClip:
    return PoseClip(clip.values + np.asarray(roots, dtype=np.float32)[:, None, :], KIND_3D, clip.clip_id, clip.fps)


# synthetic motion -----------------------------------------------------------------------

# 17-joint topology: hip, r-hip, r-knee, r-ankle, l-hip, l-knee, l-ankle, spine,
# thorax, neck, head, l-shoulder, l-elbow, l-wrist, r-shoulder, r-elbow, r-wrist
H36M_PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)
# bone directions in a body frame with +y up, +x to the subject's left
_H36M_DIRECTIONS = (
    (0, 0, 0), (-1, 0, 0), (0, -1, 0), (0, -1, 0), (1, 0, 0), (0, -1, 0), (0, -1, 0),
    (0, 1, 0), (0, 1, 0), (0, 1, 0.2), (0, 1, 0), (1, 0, 0), (0, -1, 0), (0, -1, 0),
    (-1, 0, 0), (0, -1, 0), (0, -1, 0),
)
H36M_SEGMENTS_MM = (0, 132, 442, 454, 132, 442, 454, 233, 257, 121, 115, 151, 278, 251, 151, 278, 251)


@dataclass
class SyntheticRigConfig:
    parents: tuple[int, ...] = H36M_PARENTS
    segments_mm: tuple[float, ...] = H36M_SEGMENTS_MM
    # per-clip joint-angle sinusoids: amplitudes drawn in [0, max_amplitude] rad,
    # frequencies in frequency_hz, phases uniform
    max_amplitude: float = 0.6
    frequency_hz: tuple[float, float] = (0.3, 1.5)
    root_sway_mm: float = 150.0
    focal_px: float = 1145.0
    image_size_px: float = 1000.0
    subject_distance_mm: float = 4500.0
    confidence_noise: float = 0.0
    keypoint_noise: float = 0.0
    fps: float = 50.0
    seed: int = 0
    directions: tuple = field(default=_H36M_DIRECTIONS, repr=False)

    def validate(self) -> None:
        parents = self.parents
        j = len(parents)
        if j < 2:
            raise ValueError(f"need at least 2 joints, got {j}")
        if parents[0] != -1 or any(not 0 <= p < i for i, p in enumerate(parents) if i > 0):
            raise ValueError("parents must form a tree rooted at joint 0 with parent index < child index")
        if len(self.segments_mm) != j or any(s <= 0 for s in self.segments_mm[1:]):
            raise ValueError("need one positive segment length per non-root joint")
        if len(self.directions) != j:
            raise ValueError("need one bone direction per joint")
        if min(self.frequency_hz) < 0 or self.max_amplitude < 0:
            raise ValueError("frequencies and amplitudes must be non-negative")

    @classmethod
    def chain(cls, joints: int, **kwargs) -> "SyntheticRigConfig":
        """Rig with the default 17-joint skeleton truncated, or extended by a
        chain hanging off the last joint, to ``joints`` joints."""
        if joints < 2:
            raise ValueError(f"need at least 2 joints, got {joints}")
        parents = list(H36M_PARENTS[:joints])
        segs = list(H36M_SEGMENTS_MM[:joints])
        dirs = list(_H36M_DIRECTIONS[:joints])
        while len(parents) < joints:
            parents.append(len(parents) - 1)
            segs.append(200.0)
            dirs.append((0, -1, 0))
        return cls(parents=tuple(parents), segments_mm=tuple(segs), directions=tuple(dirs), **kwargs)


def _rotation(angles: np.ndarray) -> np.ndarray:
    """(..., 3) XYZ Euler angles -> (..., 3, 3) rotation matrices Rz @ Ry @ Rx."""
    cx, cy, cz = np.cos(angles[..., 0]), np.cos(angles[..., 1]), np.cos(angles[..., 2])
    sx, sy, sz = np.sin(angles[..., 0]), np.sin(angles[..., 1]), np.sin(angles[..., 2])
    r = np.empty(angles.shape[:-1] + (3, 3))
    r[..., 0, 0] = cz * cy
    r[..., 0, 1] = cz * sy * sx - sz * cx
    r[..., 0, 2] = cz * sy * cx + sz * sx
    r[..., 1, 0] = sz * cy
    r[..., 1, 1] = sz * sy * sx + cz * cx
    r[..., 1, 2] = sz * sy * cx - cz * sx
    r[..., 2, 0] = -sy
    r[..., 2, 1] = cy * sx
    r[..., 2, 2] = cy * cx
    return r


def forward_kinematics(rig: SyntheticRigConfig, local_angles: np.ndarray, root_rotation: np.ndarray) -> np.ndarray:
    """Joint positions (T, J, 3) in the body frame, root at the origin."""
    t, j = local_angles.shape[:2]
    offsets = np.asarray(rig.directions, dtype=np.float64)
    norms = np.linalg.norm(offsets, axis=1, keepdims=True)
    offsets = np.divide(offsets, norms, out=np.zeros_like(offsets), where=norms > 0)
    offsets *= np.asarray(rig.segments_mm, dtype=np.float64)[:, None]
    local = _rotation(local_angles)
    glob = np.empty((t, j, 3, 3))
    pos = np.zeros((t, j, 3))
    glob[:, 0] = root_rotation @ local[:, 0]
    for i in range(1, j):
        p = rig.parents[i]
        pos[:, i] = pos[:, p] + np.einsum("tab,b->ta", glob[:, p], offsets[i])
        glob[:, i] = glob[:, p] @ local[:, i]
    return pos


def project(points_mm: np.ndarray, rig: SyntheticRigConfig) -> np.ndarray:
    """Pinhole projection of camera-frame points to [-1, 1] image coordinates.

    Pixel coordinates are divided by the image half-extent after moving the
    principal point (image centre) to the origin.
    """
    half = rig.image_size_px / 2.0
    z = points_mm[..., 2]
    u = rig.focal_px * points_mm[..., 0] / z
    v = rig.focal_px * points_mm[..., 1] / z
    return np.stack([u / half, v / half], axis=-1)


@dataclass
class SyntheticSample:
    pose2d: PoseClip
    pose3d: PoseClip
    roots_mm: np.ndarray


def generate_synthetic(rig: SyntheticRigConfig, clips: int, frames: int) -> list[SyntheticSample]:
    """Paired 2D/3D clips from sinusoidal joint-angle trajectories.

    The 3D clip is root-relative (mm, camera frame, +y down); ``roots_mm``
    holds the root trajectory.  The 2D clip is the projection of
    ``pose3d + roots`` as stored in float32, plus optional keypoint noise.
    """
    rig.validate()
    if clips < 1 or frames < 1:
        raise ValueError("need at least one clip and one frame")
    j = len(rig.parents)
    rng = np.random.default_rng(rig.seed)
    t = np.arange(frames) / rig.fps
    body_to_camera = np.diag([1.0, -1.0, -1.0])
    out = []
    for n in range(clips):
        amp = rng.uniform(0.0, rig.max_amplitude, size=(j, 3))
        freq = rng.uniform(*rig.frequency_hz, size=(j, 3))
        phase = rng.uniform(0.0, 2 * np.pi, size=(j, 3))
        angles = amp * np.sin(2 * np.pi * freq * t[:, None, None] + phase)
        yaw = rng.uniform(-np.pi, np.pi)
        root_rot = _rotation(np.array([0.0, yaw, 0.0]))
        body = forward_kinematics(rig, angles, root_rot)
        cam = body @ body_to_camera.T

        sway_amp = rig.root_sway_mm * rng.uniform(0.0, 1.0, size=3)
        sway_freq = rng.uniform(*rig.frequency_hz, size=3)
        sway_phase = rng.uniform(0.0, 2 * np.pi, size=3)
        roots = sway_amp * np.sin(2 * np.pi * sway_freq * t[:, None] + sway_phase)
        roots[:, 2] += rig.subject_distance_mm

        rel32 = (cam - cam[:, :1]).astype(np.float32)
        rel32[:, 0] = 0.0
        roots32 = roots.astype(np.float32)
        # float32 sum, as denormalize() computes it, so reprojection is exact
        uv = project((rel32 + roots32[:, None, :]).astype(np.float64), rig)
        if rig.keypoint_noise > 0:
            uv = uv + rng.normal(0.0, rig.keypoint_noise, size=uv.shape)
        conf = np.ones((frames, j, 1))
        if rig.confidence_noise > 0:
            conf = np.clip(1.0 - rig.confidence_noise * np.abs(rng.normal(size=conf.shape)), 0.0, 1.0)
        clip_id = f"synth_{rig.seed}_{n:04d}"
        out.append(
            SyntheticSample(
                PoseClip(np.concatenate([uv, conf], axis=-1), KIND_2D, clip_id, rig.fps),
                PoseClip(rel32, KIND_3D, clip_id, rig.fps),
                roots32,
            )
        )
    return out


# manifest and batching -------------------------------------------------------------------


@dataclass
class ManifestEntry:
    clip_id: str
    kind: str
    split: str
    path: str
    checksum: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = Path(".")

    def to_json(self) -> str:
        return json.dumps({"version": 1, "clips": [vars(e) for e in self.entries]}, indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path, verify: bool = True) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        doc = json.loads(path.read_text())
        entries = [ManifestEntry(**e) for e in doc["clips"]]
        manifest = cls(entries, path.parent)
        if verify:
            manifest.verify()
        return manifest

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def verify(self) -> None:
        splits: dict[str, str] = {}
        for e in self.entries:
            p = self.resolve(e)
            if not p.exists():
                raise FileNotFoundError(f"manifest references missing file {p}")
            if file_checksum(p) != e.checksum:
                raise ClipChecksumError(f"checksum mismatch for {p}")
            if splits.setdefault(e.clip_id, e.split) != e.split:
                raise ValueError(f"clip {e.clip_id!r} appears in more than one split")

    def pairs(self, split: str) -> list[tuple[PoseClip, PoseClip]]:
        """(pose2d, pose3d) clip pairs of ``split`` in manifest order."""
        by_id: dict[str, dict[str, ManifestEntry]] = {}
        for e in self.entries:
            if e.split == split:
                by_id.setdefault(e.clip_id, {})[e.kind] = e
        out = []
        for clip_id, kinds in by_id.items():
            if set(kinds) != {KIND_2D, KIND_3D}:
                raise ValueError(f"clip {clip_id!r} lacks a 2D/3D pair in split {split!r}")
            x2d = load_clip(self.resolve(kinds[KIND_2D]))
            x3d = load_clip(self.resolve(kinds[KIND_3D]))
            if x2d.values.shape != x3d.values.shape:
                raise ValueError(f"clip {clip_id!r}: 2D and 3D shapes differ")
            x2d.clip_id = x3d.clip_id = clip_id
            out.append((x2d, x3d))
        return out

    def splits(self) -> set[str]:
        return {e.split for e in self.entries}


def write_dataset(samples: list[SyntheticSample], out_dir, test_clips: int = 0) -> DatasetManifest:
    """Save clip pairs under ``out_dir/clips`` and write ``manifest.json``.
    The last ``test_clips`` samples form the test split."""
    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        split = "test" if i >= len(samples) - test_clips else "train"
        for clip, suffix in ((s.pose2d, "2d"), (s.pose3d, "3d")):
            rel = f"clips/{clip.clip_id}_{suffix}.pseq"
            save_clip(clip, out_dir / rel)
            entries.append(ManifestEntry(clip.clip_id, clip.kind, split, rel, file_checksum(out_dir / rel)))
    manifest = DatasetManifest(entries, out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


def clip_windows(frames: int, window: int) -> list[int]:
    """Start frames of the windows covering a clip.

    Non-overlapping windows from frame 0; a ragged tail gets one last window
    aligned to the clip end.  A clip shorter than ``window`` yields one
    window, later padded by edge replication.
    """
    if frames <= window:
        return [0]
    starts = list(range(0, frames - window + 1, window))
    if starts[-1] + window < frames:
        starts.append(frames - window)
    return starts


def _take_window(values: np.ndarray, start: int, window: int) -> tuple[np.ndarray, np.ndarray]:
    chunk = values[start:start + window]
    mask = np.ones(window, dtype=bool)
    if len(chunk) < window:
        mask[len(chunk):] = False
        chunk = np.concatenate([chunk, np.repeat(chunk[-1:], window - len(chunk), axis=0)])
    return chunk, mask


@dataclass
class Batch:
    x2d: np.ndarray
    gt3d: np.ndarray
    mask: np.ndarray  # (B, T); False marks edge-replicated padding frames
    clip_ids: list[str]


def batch_iterator(
    pairs: list[tuple[PoseClip, PoseClip]],
    batch_size: int,
    window: int,
    shuffle_seed: int | None = None,
) -> Iterator[Batch]:
    """One epoch of windows, visited exactly once, in a seed-determined order."""
    if not pairs:
        raise ValueError("empty split: no clips to iterate")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    index = [(c, s) for c, (x2d, _) in enumerate(pairs) for s in clip_windows(x2d.frames, window)]
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(index))
        index = [index[i] for i in order]
    for lo in range(0, len(index), batch_size):
        xs, gs, ms, ids = [], [], [], []
        for c, s in index[lo:lo + batch_size]:
            x2d, x3d = pairs[c]
            x, m = _take_window(x2d.values, s, window)
            g, _ = _take_window(x3d.values, s, window)
            xs.append(x)
            gs.append(g)
            ms.append(m)
            ids.append(x2d.clip_id)
        yield Batch(np.stack(xs), np.stack(gs), np.stack(ms), ids)
