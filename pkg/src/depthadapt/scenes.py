"""Procedural RGB-D scene rendering.

Scenes are composed of a small set of analytic primitives (planes, boxes,
spheres, vertical cylinders) ray-cast through a pinhole camera with
Lambertian shading under a single directional light.  The camera frame is
x-right / y-down / z-forward and rays are parameterized by z, so the
intersection parameter *is* the depth value (distance along the camera
axis, not the Euclidean ray length).

Everything is pure numpy and fully deterministic: the same (seed, spec)
always reproduces bit-identical images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

HFOV_DEG = 60.0  # horizontal field of view of the pinhole camera
Z_MIN = 0.05  # hits closer than this are discarded (behind/at the camera)
AMBIENT = 0.25


@dataclass(frozen=True)
class SceneSpec:
    """Sampling parameters for one procedural scene family."""

    seed: int = 0
    image_size: tuple[int, int] = (128, 160)  # (H, W)
    n_objects: int = 5
    depth_range: tuple[float, float] = (0.5, 10.0)  # (near, far) meters

    def validate(self):
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ConfigError(f"image_size too small: {self.image_size}")
        near, far = self.depth_range
        if not (0.0 < near < far):
            raise ConfigError(f"need 0 < near < far, got {self.depth_range}")
        if far > 65.0:
            raise ConfigError(f"far={far} exceeds the 16-bit millimeter encoding range")
        if not 2 <= self.n_objects <= 8:
            raise ConfigError(f"n_objects must be in [2, 8], got {self.n_objects}")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        return self


@dataclass(frozen=True)
class Plane:
    point: tuple[float, float, float]
    normal: tuple[float, float, float]
    albedo: tuple[float, float, float]


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    albedo: tuple[float, float, float]


@dataclass(frozen=True)
class Cylinder:
    """Vertical-axis cylinder; y_top < y_bottom in the y-down camera frame."""

    center_xz: tuple[float, float]
    radius: float
    y_top: float
    y_bottom: float
    albedo: tuple[float, float, float]


def _ray_grid(image_size):
    h, w = image_size
    f = w / (2.0 * np.tan(np.deg2rad(HFOV_DEG) / 2.0))
    u = (np.arange(w, dtype=np.float64) + 0.5 - w / 2.0) / f
    v = (np.arange(h, dtype=np.float64) + 0.5 - h / 2.0) / f
    dx, dy = np.meshgrid(u, v)
    return dx, dy  # dz == 1 everywhere


def _intersect_plane(prim: Plane, dx, dy):
    n = np.asarray(prim.normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    denom = n[0] * dx + n[1] * dy + n[2]
    offset = float(np.dot(n, np.asarray(prim.point, dtype=np.float64)))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = offset / denom
    valid = np.isfinite(z) & (z > Z_MIN)
    z = np.where(valid, z, np.inf)
    # shading normal opposes the ray direction
    flip = np.where(denom > 0, -1.0, 1.0)
    normal = np.broadcast_to(n, (*dx.shape, 3)) * flip[..., None]
    return z, normal


def _intersect_sphere(prim: Sphere, dx, dy):
    c = np.asarray(prim.center, dtype=np.float64)
    a = dx * dx + dy * dy + 1.0
    b = -2.0 * (dx * c[0] + dy * c[1] + c[2])
    cc = float(np.dot(c, c)) - prim.radius**2
    disc = b * b - 4.0 * a * cc
    ok = disc > 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    z_near = (-b - sq) / (2.0 * a)
    z_far = (-b + sq) / (2.0 * a)
    z = np.where(z_near > Z_MIN, z_near, z_far)
    valid = ok & (z > Z_MIN)
    z = np.where(valid, z, np.inf)
    z_safe = np.where(valid, z, 1.0)  # normals at misses are never used
    p = np.stack([z_safe * dx, z_safe * dy, z_safe], axis=-1)
    normal = (p - c) / prim.radius
    return z, normal


def _intersect_box(prim: Box, dx, dy):
    lo = np.asarray(prim.lo, dtype=np.float64)
    hi = np.asarray(prim.hi, dtype=np.float64)
    d = [dx, dy, np.ones_like(dx)]
    t_enter = np.full(dx.shape, -np.inf)
    t_exit = np.full(dx.shape, np.inf)
    enter_axis = np.zeros(dx.shape, dtype=np.int8)
    for k in range(3):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = lo[k] / d[k]
            t2 = hi[k] / d[k]
        near_k = np.minimum(t1, t2)
        far_k = np.maximum(t1, t2)
        # rays parallel to a slab (d_k == 0) must start inside it
        parallel = d[k] == 0 if k < 2 else np.zeros_like(dx, dtype=bool)
        inside = (lo[k] <= 0) & (0 <= hi[k])
        near_k = np.where(parallel, np.where(inside, -np.inf, np.inf), near_k)
        far_k = np.where(parallel, np.where(inside, np.inf, -np.inf), far_k)
        take = near_k > t_enter
        enter_axis = np.where(take, k, enter_axis)
        t_enter = np.maximum(t_enter, near_k)
        t_exit = np.minimum(t_exit, far_k)
    valid = (t_enter <= t_exit) & (t_enter > Z_MIN)
    z = np.where(valid, t_enter, np.inf)
    normal = np.zeros((*dx.shape, 3))
    for k in range(3):
        sign = -np.sign(np.where(np.abs(d[k]) > 0, d[k], 1.0))
        normal[..., k] = np.where(enter_axis == k, sign, 0.0)
    return z, normal


def _intersect_cylinder(prim: Cylinder, dx, dy):
    cx, cz = prim.center_xz
    a = dx * dx + 1.0
    b = -2.0 * (dx * cx + cz)
    c = cx * cx + cz * cz - prim.radius**2
    disc = b * b - 4.0 * a * c
    ok = disc > 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    best_z = np.full(dx.shape, np.inf)
    normal = np.zeros((*dx.shape, 3))
    for z_side in ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)):
        y = z_side * dy
        valid = ok & (z_side > Z_MIN) & (prim.y_top <= y) & (y <= prim.y_bottom)
        take = valid & (z_side < best_z)
        nx = (z_side * dx - cx) / prim.radius
        nz = (z_side - cz) / prim.radius
        normal[..., 0] = np.where(take, nx, normal[..., 0])
        normal[..., 1] = np.where(take, 0.0, normal[..., 1])
        normal[..., 2] = np.where(take, nz, normal[..., 2])
        best_z = np.where(take, z_side, best_z)
    # end caps
    for y_cap, n_y in ((prim.y_top, -1.0), (prim.y_bottom, 1.0)):
        with np.errstate(divide="ignore", invalid="ignore"):
            z_cap = y_cap / dy
        px = z_cap * dx - cx
        pz = z_cap - cz
        valid = np.isfinite(z_cap) & (z_cap > Z_MIN) & (px * px + pz * pz <= prim.radius**2)
        take = valid & (z_cap < best_z)
        normal[..., 0] = np.where(take, 0.0, normal[..., 0])
        normal[..., 1] = np.where(take, n_y, normal[..., 1])
        normal[..., 2] = np.where(take, 0.0, normal[..., 2])
        best_z = np.where(take, z_cap, best_z)
    # orient toward the camera
    d_dot_n = normal[..., 0] * dx + normal[..., 1] * dy + normal[..., 2]
    flip = np.where(d_dot_n > 0, -1.0, 1.0)
    return best_z, normal * flip[..., None]


_INTERSECTORS = {
    Plane: _intersect_plane,
    Sphere: _intersect_sphere,
    Box: _intersect_box,
    Cylinder: _intersect_cylinder,
}


def render(primitives, light_dir, image_size, ambient=AMBIENT):
    """Ray-cast a list of primitives into an (rgb, depth) pair.

    ``light_dir`` points from surfaces toward the light.  Pixels whose ray
    hits nothing get depth inf and a black pixel; scene sampling always
    includes a back wall so this never happens for generated scenes.
    """
    dx, dy = _ray_grid(image_size)
    h, w = image_size
    depth = np.full((h, w), np.inf)
    normal = np.zeros((h, w, 3))
    albedo = np.zeros((h, w, 3))
    for prim in primitives:
        z, n = _INTERSECTORS[type(prim)](prim, dx, dy)
        closer = z < depth
        depth = np.where(closer, z, depth)
        normal = np.where(closer[..., None], n, normal)
        albedo = np.where(closer[..., None], np.asarray(prim.albedo), albedo)
    light = np.asarray(light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    diffuse = np.maximum(0.0, np.einsum("hwc,c->hw", normal, light))
    shade = ambient + (1.0 - ambient) * diffuse
    rgb = np.clip(albedo * shade[..., None], 0.0, 1.0)
    return rgb.astype(np.float32), depth.astype(np.float32)


def _sample_albedo(rng):
    return tuple(rng.uniform(0.15, 0.95, size=3))


def generate_scene(seed, spec: SceneSpec):
    """Sample and render one scene; bit-identical for identical (seed, spec)."""
    spec.validate()
    if seed < 0:
        raise ConfigError("scene seed must be nonnegative")
    rng = np.random.default_rng([seed, spec.seed])
    near, far = spec.depth_range
    h, w = spec.image_size
    f = w / (2.0 * np.tan(np.deg2rad(HFOV_DEG) / 2.0))
    tan_v = (h / 2.0) / f
    floor_y = max(1.0, 1.1 * near * tan_v)

    span = far - near
    z_lo = near + 0.18 * span
    z_hi = far - 0.18 * span
    size_cap = min(0.55, 0.45 * (z_lo - near))

    prims = [
        Plane((0.0, floor_y, 0.0), (0.0, -1.0, 0.0), _sample_albedo(rng)),
        Plane((0.0, 0.0, far), (0.0, 0.0, -1.0), _sample_albedo(rng)),
    ]
    for _ in range(spec.n_objects):
        kind = rng.integers(0, 3)
        z_c = rng.uniform(z_lo, z_hi)
        x_c = rng.uniform(-0.45, 0.45) * z_c * np.tan(np.deg2rad(HFOV_DEG) / 2.0)
        color = _sample_albedo(rng)
        if kind == 0:  # sphere, occasionally floating
            r = rng.uniform(0.45 * size_cap, size_cap)
            if rng.uniform() < 0.3:
                y_c = rng.uniform(-0.5, floor_y - r)
            else:
                y_c = floor_y - r
            prims.append(Sphere((x_c, y_c, z_c), r, color))
        elif kind == 1:  # box resting on the floor
            hx, hy, hz = rng.uniform(0.35 * size_cap, size_cap, size=3)
            prims.append(
                Box(
                    (x_c - hx, floor_y - 2 * hy, z_c - hz),
                    (x_c + hx, floor_y, z_c + hz),
                    color,
                )
            )
        else:  # cylinder resting on the floor
            r = rng.uniform(0.35 * size_cap, 0.9 * size_cap)
            height = rng.uniform(1.0 * size_cap, 3.0 * size_cap)
            prims.append(Cylinder((x_c, z_c), r, floor_y - height, floor_y, color))

    light = np.array(
        [rng.uniform(-0.6, 0.6), rng.uniform(-1.0, -0.4), rng.uniform(-0.6, 0.3)]
    )
    rgb, depth = render(prims, light, spec.image_size)
    return rgb, depth
