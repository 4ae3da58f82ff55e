"""Procedural synthetic world: poses, garments, bodies, and stage samples.

Everything is rendered from a handful of bounded parameters, so every stage
task comes with exact ground truth:

* a stick figure ("skeleton") of five color-coded bones, anti-aliased on black;
* a garment (torso quad plus sleeve quads bound to the arm angles) filled with
  a flat color or two-tone stripes;
* a headless body silhouette in a flat skin tone;
* composites of garment over body, hole masks, and a separate head disc for
  the final compositing step.

The same renderer that draws a condition also draws its target, so e.g. the
garment-transform task's ground truth is just the garment re-rendered at the
target pose.  All images are float32 in [0, 1]; masks are exact {0, 1}.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError, ShapeError
from .network import ConditionSet
from .rng import RngState
from .tensor import Tensor

# fractional coordinates, y growing downward; sizes are fractions of the image
SPINE_UP = 0.19
SPINE_DOWN = 0.17
SHOULDER_HALF = 0.115
SHOULDER_DROP = 0.02
UPPER_LEN = 0.115
FORE_LEN = 0.10
LINE_RADIUS = 0.020
ARM_RADIUS = 0.036
HEAD_RADIUS = 0.07
HEAD_GAP = 0.02

TORSO_HALF_TOP = 0.105
TORSO_HALF_BOT = 0.115
GARMENT_SLACK_TOP = 0.02
GARMENT_SLACK_BOT = 0.03
SLEEVE_HALF = 0.05

SKIN = np.array([0.94, 0.78, 0.66], dtype=np.float32)
BONE_COLORS = np.array([
    [0.25, 0.45, 1.00],   # spine
    [1.00, 0.25, 0.25],   # left upper arm
    [1.00, 0.85, 0.20],   # left forearm
    [0.20, 0.90, 0.35],   # right upper arm
    [1.00, 0.30, 0.90],   # right forearm
], dtype=np.float32)

# conservative fractional bound: everything must stay inside [FIT_LO, FIT_HI]
# so a 32-pixel render keeps a 2-pixel margin around the skeleton
FIT_LO = 0.115
FIT_HI = 1.0 - FIT_LO

ROTATION_CHOICES_DEG = (0.0, 15.0, -15.0, 30.0, -30.0)
MAX_SHIFT_PX = 3


@dataclass(frozen=True)
class PoseParams:
    torso_angle: float = 0.0
    l_upper: float = 0.0
    l_fore: float = 0.0
    r_upper: float = 0.0
    r_fore: float = 0.0
    scale: float = 1.0
    cx: float = 0.0
    cy: float = 0.0

    def validate(self):
        if not (0.25 <= self.scale <= 1.0):
            raise DomainError(f"scale {self.scale} outside [0.25, 1.0]")
        if abs(self.torso_angle) > 0.5:
            raise DomainError(f"torso angle {self.torso_angle} outside [-0.5, 0.5]")
        for name in ("l_upper", "r_upper"):
            if abs(getattr(self, name)) > 1.25:
                raise DomainError(f"{name} outside [-1.25, 1.25]")
        for name in ("l_fore", "r_fore"):
            if abs(getattr(self, name)) > 1.6:
                raise DomainError(f"{name} outside [-1.6, 1.6]")
        if abs(self.cx) > 0.1 or abs(self.cy) > 0.1:
            raise DomainError(f"center offset ({self.cx}, {self.cy}) outside [-0.1, 0.1]")


CANONICAL_POSE = PoseParams()


@dataclass(frozen=True)
class GarmentParams:
    """Torso quad + sleeve quads bound to the arm angles; texture from a seed."""

    width_factor: float = 1.12
    sleeve_factor: float = 1.0
    striped: bool = False
    texture_seed: int = 0

    def validate(self):
        if not (1.0 <= self.width_factor <= 1.3):
            raise DomainError(f"width_factor {self.width_factor} outside [1.0, 1.3]")
        if not (0.8 <= self.sleeve_factor <= 1.1):
            raise DomainError(f"sleeve_factor {self.sleeve_factor} outside [0.8, 1.1]")


@dataclass(frozen=True)
class SampleMeta:
    stage: str
    seed: int


@dataclass
class StageSample:
    conditions: ConditionSet
    target: Tensor                 # (3, H, W) in [0, 1]
    masks: Dict[str, Tensor]       # binary {0, 1}, (H, W)
    meta: SampleMeta


# ---------------------------------------------------------------------------
# geometry


def _rot(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


def _skeleton_points(p: PoseParams) -> Dict[str, np.ndarray]:
    center = np.array([0.5 + p.cx, 0.48 + p.cy])
    rot = _rot(p.torso_angle)
    down = rot @ np.array([0.0, 1.0])
    right = rot @ np.array([1.0, 0.0])
    s = p.scale
    neck = center - SPINE_UP * s * down
    hip = center + SPINE_DOWN * s * down
    sh_l = neck - SHOULDER_HALF * s * right + SHOULDER_DROP * s * down
    sh_r = neck + SHOULDER_HALF * s * right + SHOULDER_DROP * s * down
    dir_lu = _rot(p.torso_angle + p.l_upper) @ np.array([-1.0, 0.0])
    dir_ru = _rot(p.torso_angle + p.r_upper) @ np.array([1.0, 0.0])
    el_l = sh_l + UPPER_LEN * s * dir_lu
    el_r = sh_r + UPPER_LEN * s * dir_ru
    dir_lf = _rot(p.torso_angle + p.l_upper + p.l_fore) @ np.array([-1.0, 0.0])
    dir_rf = _rot(p.torso_angle + p.r_upper + p.r_fore) @ np.array([1.0, 0.0])
    wr_l = el_l + FORE_LEN * s * dir_lf
    wr_r = el_r + FORE_LEN * s * dir_rf
    head_center = neck - (HEAD_GAP + HEAD_RADIUS) * s * down
    return {
        "center": center, "neck": neck, "hip": hip,
        "sh_l": sh_l, "sh_r": sh_r, "el_l": el_l, "el_r": el_r,
        "wr_l": wr_l, "wr_r": wr_r, "head_center": head_center,
        "down": down, "right": right,
    }


def _bones(pts: Dict[str, np.ndarray]) -> List[Tuple[np.ndarray, np.ndarray]]:
    return [
        (pts["hip"], pts["neck"]),
        (pts["sh_l"], pts["el_l"]),
        (pts["el_l"], pts["wr_l"]),
        (pts["sh_r"], pts["el_r"]),
        (pts["el_r"], pts["wr_r"]),
    ]


def _garment_quads(p: PoseParams, g: GarmentParams, pts: Dict[str, np.ndarray]) -> List[np.ndarray]:
    s = p.scale
    down, right = pts["down"], pts["right"]
    center = pts["center"]
    top = -(SPINE_UP + GARMENT_SLACK_TOP) * s
    bot = (SPINE_DOWN + GARMENT_SLACK_BOT) * s
    hw_t = TORSO_HALF_TOP * g.width_factor * s
    hw_b = TORSO_HALF_BOT * g.width_factor * s
    torso = np.stack([
        center + top * down - hw_t * right,
        center + top * down + hw_t * right,
        center + bot * down + hw_b * right,
        center + bot * down - hw_b * right,
    ])
    quads = [torso]
    for sh, el in ((pts["sh_l"], pts["el_l"]), (pts["sh_r"], pts["el_r"])):
        d = el - sh
        length = float(np.hypot(*d))
        d = d / length
        n = np.array([-d[1], d[0]])
        end = sh + d * (length * g.sleeve_factor + 0.012 * s)
        w = SLEEVE_HALF * s
        quads.append(np.stack([sh - n * w, sh + n * w, end + n * w, end - n * w]))
    return quads


def _body_torso_quad(p: PoseParams, pts: Dict[str, np.ndarray]) -> np.ndarray:
    s = p.scale
    down, right = pts["down"], pts["right"]
    center = pts["center"]
    return np.stack([
        center - SPINE_UP * s * down - TORSO_HALF_TOP * s * right,
        center - SPINE_UP * s * down + TORSO_HALF_TOP * s * right,
        center + SPINE_DOWN * s * down + TORSO_HALF_BOT * s * right,
        center + SPINE_DOWN * s * down - TORSO_HALF_BOT * s * right,
    ])


def fits_in_image(p: PoseParams, g: Optional[GarmentParams] = None, with_head: bool = True) -> bool:
    """True when skeleton (+garment, +head) stays in the conservative interior
    band that guarantees a >= 2 pixel margin at a 32-pixel render."""
    pts = _skeleton_points(p)
    xs: List[np.ndarray] = [pts[k] for k in ("neck", "hip", "sh_l", "sh_r", "el_l", "el_r", "wr_l", "wr_r")]
    if g is not None:
        for quad in _garment_quads(p, g, pts):
            xs.extend(quad)
    pts_arr = np.stack(xs)
    lo, hi = pts_arr.min(axis=0), pts_arr.max(axis=0)
    if with_head:
        hc = pts["head_center"]
        r = HEAD_RADIUS * p.scale
        lo = np.minimum(lo, hc - r)
        hi = np.maximum(hi, hc + r)
    return bool(np.all(lo >= FIT_LO) and np.all(hi <= FIT_HI))


# ---------------------------------------------------------------------------
# rasterization


def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size, dtype=np.float64) + 0.5) / size
    return np.meshgrid(c, c, indexing="xy")


def _segment_coverage(xg, yg, a, b, radius: float, size: int) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        t = np.zeros_like(xg)
    else:
        t = np.clip(((xg - a[0]) * ab[0] + (yg - a[1]) * ab[1]) / denom, 0.0, 1.0)
    dx = xg - (a[0] + t * ab[0])
    dy = yg - (a[1] + t * ab[1])
    dist_px = np.sqrt(dx * dx + dy * dy) * size
    return np.clip(radius * size + 0.5 - dist_px, 0.0, 1.0)


def _quad_coverage(xg, yg, quad: np.ndarray, size: int) -> np.ndarray:
    # signed distance of a convex quad: max over edge half-planes
    sd = np.full_like(xg, -np.inf)
    n_pts = len(quad)
    area2 = 0.0
    for i in range(n_pts):
        x0, y0 = quad[i]
        x1, y1 = quad[(i + 1) % n_pts]
        area2 += x0 * y1 - x1 * y0
    orient = 1.0 if area2 > 0 else -1.0
    for i in range(n_pts):
        a, b = quad[i], quad[(i + 1) % n_pts]
        e = b - a
        ln = float(np.hypot(*e))
        if ln < 1e-12:
            continue
        nx, ny = orient * -e[1] / ln, orient * e[0] / ln
        sd = np.maximum(sd, -((xg - a[0]) * nx + (yg - a[1]) * ny))
    return np.clip(0.5 - sd * size, 0.0, 1.0)


def _disc_coverage(xg, yg, center, radius: float, size: int) -> np.ndarray:
    dist_px = np.hypot(xg - center[0], yg - center[1]) * size
    return np.clip(radius * size + 0.5 - dist_px, 0.0, 1.0)


def _over(img: np.ndarray, coverage: np.ndarray, color: np.ndarray) -> np.ndarray:
    return img * (1.0 - coverage[None]) + color[:, None, None] * coverage[None]


def render_skeleton(p: PoseParams, size: int) -> Tensor:
    """Anti-aliased color-coded bones on black; deterministic in (p, size)."""
    p.validate()
    if not fits_in_image(p, with_head=False):
        raise DomainError("pose does not fit inside the image with the required margin")
    xg, yg = _grid(size)
    img = np.zeros((3, size, size), dtype=np.float64)
    radius = max(LINE_RADIUS * p.scale, 0.55 / size)
    pts = _skeleton_points(p)
    for (a, b), color in zip(_bones(pts), BONE_COLORS):
        cov = _segment_coverage(xg, yg, a, b, radius, size)
        img = _over(img, cov, color.astype(np.float64))
    return img.astype(np.float32)


def _texture(g: GarmentParams, size: int) -> np.ndarray:
    trng = RngState(g.texture_seed).child("texture")
    c1 = 0.25 + 0.70 * trng.uniform(3)
    if not g.striped:
        return np.broadcast_to(c1[:, None, None], (3, size, size)).copy()
    c2 = 0.25 + 0.70 * trng.uniform(3)
    angle = float(trng.uniform(1)[0]) * np.pi
    width = 0.09 + 0.07 * float(trng.uniform(1)[0])
    phase = float(trng.uniform(1)[0])
    xg, yg = _grid(size)
    band = np.floor((xg * np.cos(angle) + yg * np.sin(angle)) / width + phase).astype(np.int64) % 2
    tex = np.where(band[None] == 0, c1[:, None, None], c2[:, None, None])
    return tex


def render_garment(p: PoseParams, g: GarmentParams, size: int) -> Tuple[Tensor, Tensor]:
    """Garment image (3,H,W) and its binary mask (H,W) at the given pose."""
    p.validate()
    g.validate()
    xg, yg = _grid(size)
    cov = np.zeros((size, size), dtype=np.float64)
    pts = _skeleton_points(p)
    for quad in _garment_quads(p, g, pts):
        cov = np.maximum(cov, _quad_coverage(xg, yg, quad, size))
    img = (_texture(g, size) * cov[None]).astype(np.float32)
    mask = (cov >= 0.5).astype(np.float32)
    return img, mask


def render_body(p: PoseParams, size: int) -> Tuple[Tensor, Tensor]:
    """Headless skin-tone body image and its binary silhouette mask."""
    p.validate()
    xg, yg = _grid(size)
    pts = _skeleton_points(p)
    cov = _quad_coverage(xg, yg, _body_torso_quad(p, pts), size)
    r = ARM_RADIUS * p.scale
    for a, b in _bones(pts)[1:]:
        cov = np.maximum(cov, _segment_coverage(xg, yg, a, b, r, size))
    img = (SKIN.astype(np.float64)[:, None, None] * cov[None]).astype(np.float32)
    mask = (cov >= 0.5).astype(np.float32)
    return img, mask


def render_head(p: PoseParams, size: int) -> Tuple[Tensor, Tensor]:
    """Head disc image and binary mask (the model head for final compositing)."""
    p.validate()
    xg, yg = _grid(size)
    pts = _skeleton_points(p)
    cov = _disc_coverage(xg, yg, pts["head_center"], HEAD_RADIUS * p.scale, size)
    img = (SKIN.astype(np.float64)[:, None, None] * cov[None]).astype(np.float32)
    return img, (cov >= 0.5).astype(np.float32)


def torso_mask(p: PoseParams, size: int) -> Tensor:
    xg, yg = _grid(size)
    cov = _quad_coverage(xg, yg, _body_torso_quad(p, _skeleton_points(p)), size)
    return (cov >= 0.5).astype(np.float32)


# ---------------------------------------------------------------------------
# sampling


def sample_pose(rng: RngState) -> PoseParams:
    """Rejection-samples a pose that fits (with garment and head) in frame."""
    for _ in range(200):
        p = PoseParams(
            torso_angle=float(-0.30 + 0.60 * rng.uniform(1)[0]),
            l_upper=float(-0.85 + 1.70 * rng.uniform(1)[0]),
            l_fore=float(-1.10 + 2.20 * rng.uniform(1)[0]),
            r_upper=float(-0.85 + 1.70 * rng.uniform(1)[0]),
            r_fore=float(-1.10 + 2.20 * rng.uniform(1)[0]),
            scale=float(0.70 + 0.30 * rng.uniform(1)[0]),
            cx=float(-0.035 + 0.070 * rng.uniform(1)[0]),
            cy=float(-0.035 + 0.070 * rng.uniform(1)[0]),
        )
        if fits_in_image(p, GarmentParams(width_factor=1.3, sleeve_factor=1.1), with_head=True):
            return p
    raise DomainError("could not sample a fitting pose in 200 tries")


def sample_garment(rng: RngState) -> GarmentParams:
    return GarmentParams(
        width_factor=float(1.05 + 0.20 * rng.uniform(1)[0]),
        sleeve_factor=float(0.90 + 0.15 * rng.uniform(1)[0]),
        striped=bool(rng.uniform(1)[0] < 0.5),
        texture_seed=rng.bits64(),
    )


def _batched(img: Tensor) -> Tensor:
    return img[None]


def make_stage1_sample(rng: RngState, size: int,
                       pose: Optional[PoseParams] = None,
                       garment: Optional[GarmentParams] = None,
                       seed: int = -1) -> StageSample:
    """Garment transform task: [skeleton@pose, garment@canonical] -> garment@pose."""
    pose = pose if pose is not None else sample_pose(rng.child("pose"))
    garment = garment if garment is not None else sample_garment(rng.child("garment"))
    skel = render_skeleton(pose, size)
    ref_img, _ = render_garment(CANONICAL_POSE, garment, size)
    tgt_img, tgt_mask = render_garment(pose, garment, size)
    return StageSample(
        conditions=ConditionSet(images=(_batched(skel), _batched(ref_img))),
        target=tgt_img,
        masks={"garment": tgt_mask, "torso": torso_mask(pose, size)},
        meta=SampleMeta("stage1", seed),
    )


def rotate_translate(img: Tensor, angle_deg: float, dx: int, dy: int) -> Tensor:
    """Rotate about the image center then shift by whole pixels; bilinear,
    zero fill outside.  Works on (C, H, W)."""
    c, h, w = img.shape
    a = np.deg2rad(angle_deg)
    cos_a, sin_a = np.cos(a), np.sin(a)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    xc, yc = (w - 1) / 2.0, (h - 1) / 2.0
    xr = xs - xc - dx
    yr = ys - yc - dy
    sx = cos_a * xr + sin_a * yr + xc
    sy = -sin_a * xr + cos_a * yr + yc
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0
    out = np.zeros_like(img, dtype=np.float64)
    for oy, ox, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                        (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        yy, xx = y0 + oy, x0 + ox
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yv = np.clip(yy, 0, h - 1)
        xv = np.clip(xx, 0, w - 1)
        out += img[:, yv, xv] * (wgt * valid)[None]
    return out.astype(img.dtype)


def compose_garment_on_body(garment_img: Tensor, garment_mask: Tensor,
                            body_img: Tensor) -> Tuple[Tensor, Tensor]:
    """Blank the garment region out of the body, then paste the garment.

    Returns (blanked body, dressed composite); by construction the garment
    pixels exactly fill the blanked region.
    """
    m = garment_mask[None]
    blanked = body_img * (1.0 - m)
    dressed = blanked + garment_img * m
    return blanked.astype(np.float32), dressed.astype(np.float32)


def make_stage2_sample(rng: RngState, size: int,
                       pose: Optional[PoseParams] = None,
                       garment: Optional[GarmentParams] = None,
                       rotation_deg: Optional[float] = None,
                       shift: Optional[Tuple[int, int]] = None,
                       seed: int = -1) -> StageSample:
    """Stitching task: [blanked body, skeleton, jittered garment] -> dressed body.

    The garment condition is rotated/translated while the target stays put,
    so the network cannot rely on pixel alignment of that condition.
    """
    pose = pose if pose is not None else sample_pose(rng.child("pose"))
    garment = garment if garment is not None else sample_garment(rng.child("garment"))
    jrng = rng.child("jitter")
    if rotation_deg is None:
        rotation_deg = float(jrng.choice(ROTATION_CHOICES_DEG))
    if shift is None:
        shift = (jrng.randint(2 * MAX_SHIFT_PX + 1) - MAX_SHIFT_PX,
                 jrng.randint(2 * MAX_SHIFT_PX + 1) - MAX_SHIFT_PX)
    skel = render_skeleton(pose, size)
    g_img, g_mask = render_garment(pose, garment, size)
    body_img, body_mask = render_body(pose, size)
    blanked, dressed = compose_garment_on_body(g_img, g_mask, body_img)
    g_cond = rotate_translate(g_img, rotation_deg, shift[0], shift[1])
    return StageSample(
        conditions=ConditionSet(images=(_batched(blanked), _batched(skel), _batched(g_cond))),
        target=dressed,
        masks={"garment": g_mask, "body": body_mask,
               "silhouette": np.maximum(body_mask, g_mask)},
        meta=SampleMeta("stage2", seed),
    )


def irregular_hole_mask(rng: RngState, silhouette: Tensor) -> Tensor:
    """Union of 1-4 random-walk blobs clipped to the silhouette, covering an
    exact pixel count equal to 2.5%-14.5% of the silhouette area."""
    sil = silhouette > 0.5
    area = int(sil.sum())
    if area == 0:
        raise DomainError("silhouette is empty")
    frac = 0.025 + 0.12 * float(rng.uniform(1)[0])
    target = max(1, min(int(round(frac * area)), int(0.15 * area)))
    n_blobs = 1 + rng.randint(4)
    h, w = sil.shape
    mask = np.zeros((h, w), dtype=bool)
    count = 0
    sil_idx = np.flatnonzero(sil)
    for b in range(n_blobs):
        budget = target - count if b == n_blobs - 1 else max(1, target // n_blobs)
        budget = min(budget, target - count)
        if budget <= 0:
            break
        start = int(sil_idx[rng.randint(len(sil_idx))])
        y, x = divmod(start, w)
        tries = 0
        taken = 0
        while taken < budget and tries < 400 * budget:
            tries += 1
            if sil[y, x] and not mask[y, x]:
                mask[y, x] = True
                taken += 1
                count += 1
            step = rng.randint(4)
            ny = y + (step == 0) - (step == 1)
            nx = x + (step == 2) - (step == 3)
            if 0 <= ny < h and 0 <= nx < w and sil[ny, nx]:
                y, x = ny, nx
    if count < target:  # walk got stuck; top up anywhere inside the silhouette
        free = np.flatnonzero(sil & ~mask)
        extra = free[: target - count]
        mask.flat[extra] = True
    return mask.astype(np.float32)


def stage3_conditions(clean: Tensor, hole_mask: Tensor) -> ConditionSet:
    """[clean image with holes zeroed, hole mask] as a condition set."""
    if clean.shape[1:] != hole_mask.shape:
        raise ShapeError(f"clean {clean.shape} vs hole mask {hole_mask.shape}")
    holed = (clean * (1.0 - hole_mask[None])).astype(np.float32)
    return ConditionSet(images=(_batched(holed), _batched(hole_mask[None].astype(np.float32))))


def make_stage3_sample(rng: RngState, size: int,
                       pose: Optional[PoseParams] = None,
                       garment: Optional[GarmentParams] = None,
                       seed: int = -1) -> StageSample:
    """Inpainting task: [holed composite, hole mask] -> clean composite."""
    pose = pose if pose is not None else sample_pose(rng.child("pose"))
    garment = garment if garment is not None else sample_garment(rng.child("garment"))
    g_img, g_mask = render_garment(pose, garment, size)
    body_img, body_mask = render_body(pose, size)
    _, dressed = compose_garment_on_body(g_img, g_mask, body_img)
    silhouette = np.maximum(body_mask, g_mask)
    hole = irregular_hole_mask(rng.child("holes"), silhouette)
    return StageSample(
        conditions=stage3_conditions(dressed, hole),
        target=dressed,
        masks={"hole": hole, "silhouette": silhouette},
        meta=SampleMeta("stage3", seed),
    )


def difference_mask(stage2_output: Tensor, body_silhouette: Tensor, tau: float = 0.06) -> Tensor:
    """Silhouette pixels the stitcher left (near) black: max-channel < tau."""
    if not (0.0 < tau < 1.0):
        raise DomainError(f"tau {tau} outside (0, 1)")
    if stage2_output.shape[1:] != body_silhouette.shape:
        raise ShapeError(f"image {stage2_output.shape} vs silhouette {body_silhouette.shape}")
    dark = stage2_output.max(axis=0) < tau
    return (dark & (body_silhouette > 0.5)).astype(np.float32)


def composite_stage4(stage2_img: Tensor, stage3_img: Tensor, diff_mask: Tensor,
                     head_img: Tensor, head_mask: Tensor) -> Tensor:
    """head over (stage3 where diff_mask else stage2)."""
    for img in (stage2_img, stage3_img, head_img):
        if img.shape != stage2_img.shape:
            raise ShapeError("composite: image shapes disagree")
    for m in (diff_mask, head_mask):
        if m.shape != stage2_img.shape[1:]:
            raise ShapeError("composite: mask shape disagrees with images")
        vals = np.unique(m)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise ShapeError("composite: masks must be binary")
    m = diff_mask[None]
    hm = head_mask[None]
    body = m * stage3_img + (1.0 - m) * stage2_img
    return (hm * head_img + (1.0 - hm) * body).astype(np.float32)


@dataclass
class PipelineInputs:
    skeleton: Tensor
    garment: Tensor       # reference garment at canonical pose
    body: Tensor          # blanked, headless body at the target pose
    body_mask: Tensor     # full silhouette incl. the blanked region
    head: Tensor          # (3, H, W)
    head_mask: Tensor
    target: Tensor        # ground-truth final composite


def make_pipeline_inputs(rng: RngState, size: int, seed: int = -1) -> PipelineInputs:
    pose = sample_pose(rng.child("pose"))
    garment = sample_garment(rng.child("garment"))
    skel = render_skeleton(pose, size)
    ref_img, _ = render_garment(CANONICAL_POSE, garment, size)
    g_img, g_mask = render_garment(pose, garment, size)
    body_img, body_mask = render_body(pose, size)
    blanked, dressed = compose_garment_on_body(g_img, g_mask, body_img)
    head_img, head_mask = render_head(pose, size)
    target = composite_stage4(dressed, dressed, np.zeros_like(g_mask), head_img, head_mask)
    return PipelineInputs(
        skeleton=skel, garment=ref_img, body=blanked,
        body_mask=np.maximum(body_mask, g_mask),
        head=head_img, head_mask=head_mask, target=target,
    )


# ---------------------------------------------------------------------------
# dataset generation / on-disk layout


STAGE_ROLES = {
    "stage1": ("skeleton", "garment", "target"),
    "stage2": ("body", "skeleton", "garment", "target"),
    "stage3": ("input", "holemask", "target", "silhouette"),
    "pipeline": ("skeleton", "garment", "body", "bodymask", "head", "target"),
}

STAGE_CONDITION_CHANNELS = {"stage1": 6, "stage2": 9, "stage3": 4}


def sample_for(stage: str, seed: int, size: int) -> StageSample:
    """Deterministic sample for (stage, seed, size)."""
    rng = RngState(seed).child(stage)
    if stage == "stage1":
        return make_stage1_sample(rng, size, seed=seed)
    if stage == "stage2":
        return make_stage2_sample(rng, size, seed=seed)
    if stage == "stage3":
        return make_stage3_sample(rng, size, seed=seed)
    raise DomainError(f"unknown stage {stage!r}")


def _mask3(mask: Tensor) -> Tensor:
    return np.repeat(mask[None], 3, axis=0)


def sample_images(sample: StageSample) -> Dict[str, Tensor]:
    """Role -> image mapping used by the on-disk layout."""
    stage = sample.meta.stage
    conds = [im[0] for im in sample.conditions.images]
    if stage == "stage1":
        return {"skeleton": conds[0], "garment": conds[1], "target": sample.target}
    if stage == "stage2":
        return {"body": conds[0], "skeleton": conds[1], "garment": conds[2],
                "target": sample.target}
    if stage == "stage3":
        return {"input": conds[0], "holemask": _mask3(sample.masks["hole"]),
                "target": sample.target, "silhouette": _mask3(sample.masks["silhouette"])}
    raise DomainError(f"unknown stage {stage!r}")


def export_dataset(out_dir, stage: str, seeds: Sequence[int], size: int, png_write) -> Path:
    """Write {stage}_{seed}_{role}.png files plus manifest.csv into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in seeds:
        if stage == "pipeline":
            pi = make_pipeline_inputs(RngState(seed).child("pipeline"), size, seed=seed)
            images = {"skeleton": pi.skeleton, "garment": pi.garment, "body": pi.body,
                      "bodymask": _mask3(pi.body_mask),
                      "head": np.concatenate([pi.head, pi.head_mask[None]], axis=0),
                      "target": pi.target}
        else:
            images = sample_images(sample_for(stage, seed, size))
        for role in STAGE_ROLES[stage]:
            fname = f"{stage}_{seed:06d}_{role}.png"
            png_write(out / fname, images[role])
            rows.append((seed, stage, role, fname))
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", "stage", "role", "file"])
        writer.writerows(rows)
    return out


class StageDataset:
    """Lazy PNG-backed dataset over one exported directory."""

    def __init__(self, root, stage: str, png_read):
        self.root = Path(root)
        self.stage = stage
        self._png_read = png_read
        manifest = self.root / "manifest.csv"
        if not manifest.exists():
            raise FileNotFoundError(f"no manifest.csv in {self.root}")
        files: Dict[int, Dict[str, str]] = {}
        with open(manifest, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["stage"] != stage:
                    continue
                files.setdefault(int(row["seed"]), {})[row["role"]] = row["file"]
        self.seeds = sorted(files)
        self._files = files
        missing = [s for s in self.seeds if set(files[s]) != set(STAGE_ROLES[stage])]
        if missing:
            raise FileNotFoundError(f"incomplete roles for seeds {missing[:5]} in {self.root}")

    def __len__(self) -> int:
        return len(self.seeds)

    def _read(self, seed: int, role: str) -> Tensor:
        return self._png_read(self.root / self._files[seed][role], channels=3)

    def __getitem__(self, i: int) -> StageSample:
        seed = self.seeds[i]
        stage = self.stage
        if stage == "stage1":
            conds = (self._read(seed, "skeleton"), self._read(seed, "garment"))
            masks = {}
        elif stage == "stage2":
            conds = (self._read(seed, "body"), self._read(seed, "skeleton"),
                     self._read(seed, "garment"))
            masks = {}
        elif stage == "stage3":
            hole = (self._read(seed, "holemask")[0] > 0.5).astype(np.float32)
            sil = (self._read(seed, "silhouette")[0] > 0.5).astype(np.float32)
            conds = (self._read(seed, "input"), hole[None])
            masks = {"hole": hole, "silhouette": sil}
        else:
            raise DomainError(f"unknown stage {stage!r}")
        target = self._read(seed, "target")
        return StageSample(
            conditions=ConditionSet(images=tuple(_batched(c) for c in conds)),
            target=target, masks=masks, meta=SampleMeta(stage, seed),
        )
