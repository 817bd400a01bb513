import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, field_validator, model_validator

from ..models import InvalidArgumentError, ValidationError

UNIT_TOLERANCE = 1e-6
SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class Quaternion:
    """
    Scalar-first (w, x, y, z), right-handed, Hamilton product.
    q and -q are the same rotation.
    """
    w: float
    x: float
    y: float
    z: float

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Quaternion":
        w, x, y, z = (float(v) for v in values)
        return cls(w, x, y, z)

    @classmethod
    def from_axis_angle(cls, axis: Sequence[float], angle: float) -> "Quaternion":
        axis = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n < 1e-12:
            raise InvalidArgumentError("rotation axis must be nonzero")
        axis = axis / n
        s = math.sin(angle / 2.0)
        return cls(math.cos(angle / 2.0), axis[0] * s, axis[1] * s, axis[2] * s)

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "Quaternion":
        # Shepperd's method, branch on the largest diagonal term
        m = np.asarray(mat, dtype=np.float64)
        trace = m[0, 0] + m[1, 1] + m[2, 2]
        if trace > 0:
            s = 2.0 * math.sqrt(1.0 + trace)
            w = 0.25 * s
            x = (m[2, 1] - m[1, 2]) / s
            y = (m[0, 2] - m[2, 0]) / s
            z = (m[1, 0] - m[0, 1]) / s
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            w = (m[2, 1] - m[1, 2]) / s
            x = 0.25 * s
            y = (m[0, 1] + m[1, 0]) / s
            z = (m[0, 2] + m[2, 0]) / s
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            w = (m[0, 2] - m[2, 0]) / s
            x = (m[0, 1] + m[1, 0]) / s
            y = 0.25 * s
            z = (m[1, 2] + m[2, 1]) / s
        else:
            s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            w = (m[1, 0] - m[0, 1]) / s
            x = (m[0, 2] + m[2, 0]) / s
            y = (m[1, 2] + m[2, 1]) / s
            z = 0.25 * s
        q = cls(w, x, y, z).normalized()
        return q if q.w >= 0 else -q

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def to_list(self) -> List[float]:
        return [self.w, self.x, self.y, self.z]

    def norm(self) -> float:
        return math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)

    def is_unit(self, tolerance: float = UNIT_TOLERANCE) -> bool:
        return abs(self.norm() - 1.0) <= tolerance

    def normalized(self) -> "Quaternion":
        n = self.norm()
        if n < 1e-12:
            raise InvalidArgumentError("cannot normalize a zero quaternion")
        return Quaternion(self.w / n, self.x / n, self.y / n, self.z / n)

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def __neg__(self) -> "Quaternion":
        return Quaternion(-self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        w0, x0, y0, z0 = self.w, self.x, self.y, self.z
        w1, x1, y1, z1 = other.w, other.x, other.y, other.z
        return Quaternion(
            w0 * w1 - x0 * x1 - y0 * y1 - z0 * z1,
            w0 * x1 + x0 * w1 + y0 * z1 - z0 * y1,
            w0 * y1 - x0 * z1 + y0 * w1 + z0 * x1,
            w0 * z1 + x0 * y1 - y0 * x1 + z0 * w1,
        )

    def to_matrix(self) -> np.ndarray:
        w, x, y, z = self.normalized().to_list()
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])

    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        v = math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
        return 2.0 * math.atan2(v, abs(self.w))


def nqd(q1: Quaternion, q2: Quaternion) -> float:
    """
    Norm of quaternion difference: min(|q1 - q2|, |q1 + q2|), in [0, sqrt(2)].
    Equals 2 sin(theta / 4) for a relative rotation angle theta in [0, pi].
    """
    for name, q in (("q1", q1), ("q2", q2)):
        if not q.is_unit():
            raise InvalidArgumentError(f"{name} is not a unit quaternion (norm {q.norm():.9f})")
    a = q1.as_array()
    b = q2.as_array()
    return float(min(np.linalg.norm(a - b), np.linalg.norm(a + b)))


def nqd_budget_angle(max_nqd: float) -> float:
    """Largest rotation angle (radians) whose nQD stays within max_nqd."""
    return 4.0 * math.asin(min(max_nqd, SQRT2) / 2.0)


@dataclass(frozen=True)
class Intrinsics:
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    @classmethod
    def from_fov(cls, size: int, fov_deg: float = 50.0) -> "Intrinsics":
        focal = (size / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
        return cls(focal=focal, cx=size / 2.0, cy=size / 2.0, width=size, height=size)

    def validate(self):
        if self.focal <= 0:
            raise ValidationError("focal length > 0", f"got {self.focal}")
        if self.width < 16 or self.height < 16:
            raise ValidationError("image size >= 16x16", f"got {self.width}x{self.height}")


@dataclass(frozen=True)
class CameraPose:
    """
    orientation rotates camera coordinates (x right, y down, z forward) into
    the world frame; position is the camera centre in world units.
    """
    orientation: Quaternion
    position: Tuple[float, float, float]
    intrinsics: Intrinsics = field(default_factory=lambda: Intrinsics.from_fov(128))

    def __post_init__(self):
        if not self.orientation.is_unit():
            raise ValidationError("orientation is unit", f"norm {self.orientation.norm()}")
        self.intrinsics.validate()

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.intrinsics.width, self.intrinsics.height

    def rotation(self) -> np.ndarray:
        return self.orientation.to_matrix()

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64) - np.asarray(self.position, dtype=np.float64)
        # R is camera->world, so rows of R^T map world offsets to camera axes
        return pts @ self.rotation()

    def project(self, points: np.ndarray) -> np.ndarray:
        """Pixel coordinates (u, v) and camera depth z for world points, shape (N, 3)."""
        cam = self.world_to_camera(points)
        k = self.intrinsics
        z = cam[:, 2]
        u = k.focal * cam[:, 0] / z + k.cx
        v = k.focal * cam[:, 1] / z + k.cy
        return np.stack([u, v, z], axis=1)

    def same_pose(self, other: "CameraPose") -> bool:
        return (
            nqd(self.orientation, other.orientation) <= 1e-12
            and tuple(self.position) == tuple(other.position)
            and self.intrinsics == other.intrinsics
        )

    def to_dict(self) -> dict:
        k = self.intrinsics
        return {
            "orientation": self.orientation.to_list(),
            "position": [float(p) for p in self.position],
            "focal": k.focal,
            "principal_point": [k.cx, k.cy],
            "image_size": [k.width, k.height],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CameraPose":
        cx, cy = data["principal_point"]
        width, height = data["image_size"]
        return cls(
            orientation=Quaternion.from_array(data["orientation"]),
            position=tuple(float(p) for p in data["position"]),
            intrinsics=Intrinsics(float(data["focal"]), float(cx), float(cy), int(width), int(height)),
        )


Interval = Tuple[float, float]


class PoseRange(BaseModel):
    """
    Camera placement band around the assembly origin. Each field is a union of
    closed intervals (degrees, or scene units for distance); a pose is uniform
    over the union.
    """
    elevation: List[Interval]
    azimuth: List[Interval]
    distance: List[Interval]
    roll: List[Interval] = [(0.0, 0.0)]

    @field_validator("elevation", "azimuth", "distance", "roll")
    @classmethod
    def _nonempty(cls, value, info):
        if not value:
            raise ValueError(f"{info.field_name} needs at least one interval")
        for lo, hi in value:
            if lo > hi:
                raise ValueError(f"{info.field_name} interval [{lo}, {hi}] is empty")
        return value

    @model_validator(mode="after")
    def _bounds(self):
        for lo, hi in self.elevation:
            if lo < 0.0 or hi > 90.0:
                raise ValueError(f"elevation interval [{lo}, {hi}] outside [0, 90]")
        for lo, _ in self.distance:
            if lo <= 0.0:
                raise ValueError("distance must be positive")
        return self

    def scaled_distance(self, radius: float) -> "PoseRange":
        """Same band with distance given in object radii converted to scene units."""
        return self.model_copy(update={"distance": [(lo * radius, hi * radius) for lo, hi in self.distance]})

    def contains(self, elevation: float, azimuth: float) -> bool:
        return _in_union(self.elevation, elevation) and _in_union(self.azimuth, _wrap_degrees(azimuth))


def _wrap_degrees(angle: float) -> float:
    return (angle + 180.0) % 360.0 - 180.0


def _in_union(intervals: List[Interval], value: float) -> bool:
    return any(lo - 1e-9 <= value <= hi + 1e-9 for lo, hi in intervals)


def _uniform_union(intervals: List[Interval], rng: np.random.Generator) -> float:
    lengths = np.array([hi - lo for lo, hi in intervals], dtype=np.float64)
    total = lengths.sum()
    pick = rng.random()
    if total > 0:
        index = int(np.searchsorted(np.cumsum(lengths) / total, pick, side="right"))
        index = min(index, len(intervals) - 1)
    else:
        index = min(int(pick * len(intervals)), len(intervals) - 1)
    lo, hi = intervals[index]
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def look_at(position: Sequence[float], target: Sequence[float] = (0.0, 0.0, 0.0), roll_deg: float = 0.0) -> Quaternion:
    """Camera orientation looking from position at target, world z up."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up) > 1.0 - 1e-9:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    base = Quaternion.from_matrix(np.stack([right, down, forward], axis=1))
    if roll_deg == 0.0:
        return base
    # roll about the optical axis, expressed in the camera frame
    return (base * Quaternion.from_axis_angle((0.0, 0.0, 1.0), math.radians(roll_deg))).normalized()


def spherical_position(elevation_deg: float, azimuth_deg: float, distance: float) -> Tuple[float, float, float]:
    el = math.radians(elevation_deg)
    az = math.radians(azimuth_deg)
    return (
        distance * math.cos(el) * math.cos(az),
        distance * math.cos(el) * math.sin(az),
        distance * math.sin(el),
    )


def camera_angles(pose: CameraPose) -> Tuple[float, float]:
    """(elevation, azimuth) in degrees of the camera centre seen from the origin."""
    x, y, z = pose.position
    r = math.sqrt(x * x + y * y + z * z)
    return math.degrees(math.asin(z / r)), math.degrees(math.atan2(y, x))


def sample_pose(pose_range: PoseRange, rng: np.random.Generator, intrinsics: Intrinsics = None) -> CameraPose:
    """
    Uniform draw over the range parameters; the camera looks at the assembly
    origin. Draw order is fixed (elevation, azimuth, distance, roll).
    """
    intrinsics = intrinsics or Intrinsics.from_fov(128)
    elevation = _uniform_union(pose_range.elevation, rng)
    azimuth = _uniform_union(pose_range.azimuth, rng)
    distance = _uniform_union(pose_range.distance, rng)
    roll = _uniform_union(pose_range.roll, rng)
    position = spherical_position(elevation, azimuth, distance)
    return CameraPose(orientation=look_at(position, roll_deg=roll), position=position, intrinsics=intrinsics)


def perturb_pose(base: CameraPose, max_nqd: float, rng: np.random.Generator, position_jitter: float = 0.0) -> CameraPose:
    """
    Rotate the camera about a random axis by an angle uniform in
    [0, 4 asin(max_nqd / 2)], so nqd(base, result) <= max_nqd holds exactly
    without rejection. position_jitter is the largest camera offset as a
    fraction of the distance to the origin.
    """
    if not (0.0 <= max_nqd <= SQRT2 + 1e-12):
        raise InvalidArgumentError(f"max_nqd must lie in [0, sqrt(2)], got {max_nqd}")

    orientation = base.orientation
    if max_nqd > 0.0:
        axis = rng.normal(size=3)
        while np.linalg.norm(axis) < 1e-9:
            axis = rng.normal(size=3)
        angle = rng.uniform(0.0, nqd_budget_angle(max_nqd))
        # local-frame composition; nqd(base, base * d) == nqd(1, d)
        candidate = (base.orientation * Quaternion.from_axis_angle(axis, angle)).normalized()
        while nqd(base.orientation, candidate) > max_nqd:
            angle *= 1.0 - 1e-9
            candidate = (base.orientation * Quaternion.from_axis_angle(axis, angle)).normalized()
        orientation = candidate

    position = base.position
    if position_jitter > 0.0:
        distance = float(np.linalg.norm(base.position))
        direction = rng.normal(size=3)
        direction /= max(np.linalg.norm(direction), 1e-12)
        offset = direction * rng.uniform(0.0, position_jitter * distance)
        position = tuple(float(p) for p in np.asarray(base.position) + offset)

    return CameraPose(orientation=orientation, position=position, intrinsics=base.intrinsics)


# Training band: top-side view. Distances in object radii.
TRAIN_POSE_RANGE = PoseRange(
    elevation=[(30.0, 70.0)],
    azimuth=[(-60.0, 60.0)],
    distance=[(3.0, 5.0)],
    roll=[(-10.0, 10.0)],
)

# Disjoint from the training band in both elevation and azimuth
NOVEL_POSE_RANGE = PoseRange(
    elevation=[(10.0, 25.0), (75.0, 85.0)],
    azimuth=[(90.0, 180.0)],
    distance=[(3.0, 5.0)],
    roll=[(-10.0, 10.0)],
)
