from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from PIL import Image
from pydantic import BaseModel, field_validator

from ..models import BackgroundStyle, InvalidArgumentError, RenderError
from .assembly import AssemblyState, PartCatalog, PartDiff, validate_state
from .geometry import CameraPose

NEAR_PLANE = 1e-6

# Outward face normals of a box in its local frame, with the corner indices of
# each face (corner index = 4*sx + 2*sy + sz, s in {0: -1, 1: +1}).
_FACES = (
    ((-1.0, 0.0, 0.0), (0, 1, 3, 2)),
    ((1.0, 0.0, 0.0), (4, 6, 7, 5)),
    ((0.0, -1.0, 0.0), (0, 4, 5, 1)),
    ((0.0, 1.0, 0.0), (2, 3, 7, 6)),
    ((0.0, 0.0, -1.0), (0, 2, 6, 4)),
    ((0.0, 0.0, 1.0), (1, 5, 7, 3)),
)


class RenderParams(BaseModel):
    image_size: int = 128
    light_direction: Tuple[float, float, float] = (0.3, 0.2, 1.0)
    ambient: float = 0.35
    background: BackgroundStyle = BackgroundStyle.FLAT
    background_seed: int = 0
    background_gray: int = 128

    @field_validator("image_size")
    @classmethod
    def _power_of_two(cls, value):
        if value < 32 or value & (value - 1):
            raise ValueError(f"image size must be a power of two >= 32, got {value}")
        return value

    @field_validator("light_direction")
    @classmethod
    def _unit_light(cls, value):
        v = np.asarray(value, dtype=np.float64)
        n = np.linalg.norm(v)
        if n < 1e-9:
            raise ValueError("light direction must be nonzero")
        return tuple(float(c) for c in v / n)

    @field_validator("ambient")
    @classmethod
    def _ambient_range(cls, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"ambient must lie in [0, 1], got {value}")
        return value


@dataclass
class RenderedView:
    rgb: np.ndarray                 # (H, W, 3) uint8
    instance: np.ndarray            # (H, W) uint16, 0 = background
    pose: CameraPose
    state: AssemblyState
    depth: Optional[np.ndarray] = None   # (H, W) float64, inf on background

    @property
    def size(self) -> Tuple[int, int]:
        return self.instance.shape


def _background(params: RenderParams) -> np.ndarray:
    size = params.image_size
    if params.background == BackgroundStyle.FLAT:
        return np.full((size, size, 3), float(params.background_gray))
    # value noise: coarse random lattice, bilinearly upsampled
    rng = np.random.default_rng(params.background_seed)
    lattice = rng.uniform(60.0, 200.0, size=(8, 8, 3)).astype(np.uint8)
    img = Image.fromarray(lattice, "RGB").resize((size, size), Image.Resampling.BILINEAR)
    return np.asarray(img, dtype=np.float64)


def _camera_inside(pose: CameraPose, catalog: PartCatalog, state: AssemblyState) -> Optional[str]:
    cam = np.asarray(pose.position, dtype=np.float64)
    for pid in sorted(state.present):
        part = catalog.part(pid)
        rot = part.rotation.to_matrix()
        local = (cam - np.asarray(part.translation)) @ rot
        for center, half in part.boxes:
            if np.all(np.abs(local - np.asarray(center)) <= np.asarray(half)):
                return part.name
    return None


def rasterize(catalog: PartCatalog, state: AssemblyState, pose: CameraPose, params: RenderParams) -> RenderedView:
    """
    Z-buffered pinhole render of every present part's boxes, sampled at pixel
    centres without antialiasing. Faces are flat Lambert shaded
    (color * max(0, n.l) + ambient * color). Depth ties go to the lower part id.
    """
    validate_state(catalog, state)
    return _render(catalog, state, pose, params)


def _render(catalog: PartCatalog, state: AssemblyState, pose: CameraPose, params: RenderParams) -> RenderedView:
    k = pose.intrinsics
    size = params.image_size
    if (k.width, k.height) != (size, size):
        raise InvalidArgumentError(f"pose image size {k.width}x{k.height} != render size {size}")
    inside = _camera_inside(pose, catalog, state)
    if inside:
        raise RenderError(f"camera is inside part '{inside}'")

    rot = pose.rotation()
    cam_pos = np.asarray(pose.position, dtype=np.float64)
    light = np.asarray(params.light_direction, dtype=np.float64)

    depth = np.full((size, size), np.inf)
    instance = np.zeros((size, size), dtype=np.uint16)
    shade = _background(params)

    for pid in sorted(state.present):
        part = catalog.part(pid)
        part_rot = part.rotation.to_matrix()
        color = np.asarray(part.color, dtype=np.float64)
        for corners in part.world_corners():
            cam_corners = (corners - cam_pos) @ rot
            if np.any(cam_corners[:, 2] <= NEAR_PLANE):
                raise RenderError(f"part '{part.name}' crosses the camera plane")
            u = k.focal * cam_corners[:, 0] / cam_corners[:, 2] + k.cx
            v = k.focal * cam_corners[:, 1] / cam_corners[:, 2] + k.cy

            for local_normal, idx in _FACES:
                normal = part_rot @ np.asarray(local_normal)
                face_center = corners[list(idx)].mean(axis=0)
                if normal @ (face_center - cam_pos) >= 0.0:
                    continue  # back face

                fu, fv = u[list(idx)], v[list(idx)]
                j0 = max(int(np.floor(fu.min() - 0.5)), 0)
                j1 = min(int(np.ceil(fu.max() - 0.5)), size - 1)
                i0 = max(int(np.floor(fv.min() - 0.5)), 0)
                i1 = min(int(np.ceil(fv.max() - 0.5)), size - 1)
                if j0 > j1 or i0 > i1:
                    continue

                jj, ii = np.meshgrid(np.arange(j0, j1 + 1) + 0.5, np.arange(i0, i1 + 1) + 0.5)
                covered = _inside_convex(fu, fv, jj, ii)
                if not covered.any():
                    continue

                # ray/plane intersection gives exact camera depth at each pixel centre
                n_cam = rot.T @ normal
                plane_d = n_cam @ cam_corners[idx[0]]
                denom = n_cam[0] * (jj - k.cx) / k.focal + n_cam[1] * (ii - k.cy) / k.focal + n_cam[2]
                with np.errstate(divide="ignore", invalid="ignore"):
                    z = plane_d / denom
                region = depth[i0:i1 + 1, j0:j1 + 1]
                win = covered & (z > 0) & (z < region)
                if not win.any():
                    continue
                region[win] = z[win]
                instance[i0:i1 + 1, j0:j1 + 1][win] = pid
                lambert = max(0.0, float(normal @ light))
                shade[i0:i1 + 1, j0:j1 + 1][win] = color * lambert + params.ambient * color

    rgb = np.clip(np.rint(shade), 0, 255).astype(np.uint8)
    return RenderedView(rgb=rgb, instance=instance, pose=pose, state=state, depth=depth)


def _inside_convex(pu: np.ndarray, pv: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pixel centres inside a convex polygon of either winding, edges included."""
    pos = np.ones(x.shape, dtype=bool)
    neg = np.ones(x.shape, dtype=bool)
    n = len(pu)
    for a in range(n):
        b = (a + 1) % n
        edge = (pu[b] - pu[a]) * (y - pv[a]) - (pv[b] - pv[a]) * (x - pu[a])
        pos &= edge >= 0
        neg &= edge <= 0
    return pos | neg


def change_mask(anchor: RenderedView, sample_at_anchor_pose: RenderedView) -> np.ndarray:
    """
    Ground-truth change mask: 1 wherever the two instance maps disagree. Both
    views must share the anchor's pose.
    """
    if anchor.instance.shape != sample_at_anchor_pose.instance.shape:
        raise InvalidArgumentError(
            f"view sizes differ: {anchor.instance.shape} vs {sample_at_anchor_pose.instance.shape}"
        )
    if not anchor.pose.same_pose(sample_at_anchor_pose.pose):
        raise InvalidArgumentError("change_mask needs both views rendered at the same pose")
    return (anchor.instance != sample_at_anchor_pose.instance).astype(np.uint8)


def diff_membership_mask(anchor: RenderedView, sample_at_anchor_pose: RenderedView, diff: PartDiff) -> np.ndarray:
    """1 where the label on either side belongs to the part-diff set."""
    parts = np.array(sorted(diff.all_parts()), dtype=np.uint16)
    if parts.size == 0:
        return np.zeros(anchor.instance.shape, dtype=np.uint8)
    hit = np.isin(anchor.instance, parts) | np.isin(sample_at_anchor_pose.instance, parts)
    return hit.astype(np.uint8)


def part_footprint(catalog: PartCatalog, part_id: int, pose: CameraPose, params: RenderParams) -> np.ndarray:
    """Pixels covered by one part rendered alone (the base part stays out of it)."""
    single = AssemblyState(frozenset({part_id}), catalog.key)
    view = _render(catalog, single, pose, params)
    return (view.instance == part_id).astype(np.uint8)
