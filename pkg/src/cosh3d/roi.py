"""Oriented 3D boxes, spherical RoI sampling, proposal-aware features,
rotated IoU, and the synthetic scene generator.

Scenes are plain (N, 4) float arrays (x, y, z, reflectance) plus a list of
ground-truth boxes; the text file format is documented at
:func:`write_scene`.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

FEATURE_WIDTH = 28  # 9 relative-coordinate triples + reflectance

_DEGENERATE_VOLUME = 1e-12


class SceneGenerationError(RuntimeError):
    """Raised when random box placement cannot satisfy the constraints."""


class SceneFormatError(ValueError):
    """Raised on malformed scene files; carries the offending line number."""

    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def _normalize_angle(theta):
    """Wrap into (-pi, pi]."""
    t = np.remainder(theta + np.pi, 2.0 * np.pi) - np.pi
    if t == -np.pi:
        t = np.pi
    return float(t)


@dataclass
class Box3D:
    """Oriented box: center (x, y, z), extents (l, w, h), yaw about +z."""

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        fields = (self.x, self.y, self.z, self.l, self.w, self.h, self.theta)
        if not all(np.isfinite(fields)):
            raise ValueError(f"box has non-finite fields: {fields}")
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extents must be positive, got l={self.l} w={self.w} h={self.h}")
        self.theta = _normalize_angle(self.theta)

    @property
    def center(self):
        return np.array([self.x, self.y, self.z])

    @property
    def volume(self):
        return self.l * self.w * self.h

    def as_array(self):
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.theta])

    @classmethod
    def from_array(cls, arr):
        return cls(*(float(v) for v in arr))


@dataclass
class Point:
    """Single LiDAR return: position plus reflectance in [0, 1]."""

    px: float
    py: float
    pz: float
    r: float

    def as_array(self):
        return np.array([self.px, self.py, self.pz, self.r])


@dataclass
class PointCloudScene:
    """Points as an (N, 4) array (x, y, z, reflectance) plus ground-truth boxes."""

    points: np.ndarray
    gt_boxes: list = field(default_factory=list)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)


# Local corner pattern: bottom face counterclockwise seen from above,
# starting at (+l/2, +w/2), then the top face in the same order.
_CORNER_SIGNS = np.array(
    [[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=np.float64
)


def _rot2d(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def box_corners(b):
    """The 8 corners, (8, 3): bottom ring then top ring, fixed order."""
    xy_local = _CORNER_SIGNS * np.array([b.l / 2.0, b.w / 2.0])
    xy = xy_local @ _rot2d(b.theta).T + np.array([b.x, b.y])
    bottom = np.column_stack([xy, np.full(4, b.z - b.h / 2.0)])
    top = np.column_stack([xy, np.full(4, b.z + b.h / 2.0)])
    return np.vstack([bottom, top])


def bev_corners(b):
    """Bird's-eye-view footprint, (4, 2), counterclockwise."""
    xy_local = _CORNER_SIGNS * np.array([b.l / 2.0, b.w / 2.0])
    return xy_local @ _rot2d(b.theta).T + np.array([b.x, b.y])


def roi_radius(b, alpha):
    """alpha times the center-to-corner distance of the box."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return alpha * np.sqrt((b.l / 2.0) ** 2 + (b.w / 2.0) ** 2 + (b.h / 2.0) ** 2)


def points_in_box(b, xyz, atol=1e-12):
    """Boolean mask of which rows of (n, 3) ``xyz`` lie inside the box (inclusive)."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    local_xy = (xyz[:, :2] - [b.x, b.y]) @ _rot2d(b.theta)
    half = np.array([b.l / 2.0, b.w / 2.0])
    in_xy = np.all(np.abs(local_xy) <= half + atol, axis=1)
    in_z = np.abs(xyz[:, 2] - b.z) <= b.h / 2.0 + atol
    return in_xy & in_z


def sample_roi_points(scene, b, alpha, n, seed):
    """Draw ``n`` points from the spherical RoI around the proposal center.

    Without replacement when enough candidates exist, with replacement when
    the RoI is undersized, and ``n`` copies of a synthetic zero-reflectance
    point at the proposal center when it is empty.  Deterministic per seed.
    """
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    radius = roi_radius(b, alpha)
    dist = np.linalg.norm(scene.points[:, :3] - b.center, axis=1)
    candidates = np.nonzero(dist <= radius)[0]
    if candidates.size == 0:
        return np.tile(np.array([b.x, b.y, b.z, 0.0]), (n, 1))
    chosen = rng.choice(candidates, size=n, replace=candidates.size < n)
    return scene.points[chosen].copy()


def encode_proposal_features(points, b):
    """Per-point features: offsets to the center and the 8 corners, then reflectance.

    (n, 4) points in, (n, 28) features out.  Joint translation of points
    and box cancels exactly.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    refs = np.vstack([b.center[None, :], box_corners(b)])  # (9, 3)
    deltas = points[:, None, :3] - refs[None, :, :]
    return np.hstack([deltas.reshape(len(points), 27), points[:, 3:4]])


# ---------------------------------------------------------------------------
# Rotated IoU: Sutherland-Hodgman clipping in BEV, interval overlap in z.
# ---------------------------------------------------------------------------


def _clip_polygon(subject, clip):
    """Clip a convex CCW ``subject`` polygon by a convex CCW ``clip`` polygon."""
    output = list(subject)
    cp1 = clip[-1]
    for cp2 in clip:
        if not output:
            return []
        edge = (cp2[0] - cp1[0], cp2[1] - cp1[1])
        inside = [
            edge[0] * (p[1] - cp1[1]) - edge[1] * (p[0] - cp1[0]) >= 0.0 for p in output
        ]
        clipped = []
        s, s_in = output[-1], inside[-1]
        for e, e_in in zip(output, inside):
            if e_in != s_in:
                # segment crosses the (infinite) clip edge
                dc = (cp1[0] - cp2[0], cp1[1] - cp2[1])
                dp = (s[0] - e[0], s[1] - e[1])
                n1 = cp1[0] * cp2[1] - cp1[1] * cp2[0]
                n2 = s[0] * e[1] - s[1] * e[0]
                den = dc[0] * dp[1] - dc[1] * dp[0]
                clipped.append(
                    ((n1 * dp[0] - n2 * dc[0]) / den, (n1 * dp[1] - n2 * dc[1]) / den)
                )
            if e_in:
                clipped.append((e[0], e[1]))
            s, s_in = e, e_in
        output = clipped
        cp1 = cp2
    return output


def _polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    x = np.array([p[0] for p in poly])
    y = np.array([p[1] for p in poly])
    return 0.5 * abs(float(x @ np.roll(y, 1) - y @ np.roll(x, 1)))


def iou_3d(b1, b2):
    """Rotated 3D IoU in [0, 1]: BEV polygon intersection times z overlap.

    Symmetric by construction (arguments are ordered canonically before
    clipping).  Degenerate boxes yield 0 with a warning.
    """
    if b1.volume < _DEGENERATE_VOLUME or b2.volume < _DEGENERATE_VOLUME:
        warnings.warn("degenerate (near-zero-volume) box in iou_3d; returning 0")
        return 0.0
    if tuple(b2.as_array()) < tuple(b1.as_array()):
        b1, b2 = b2, b1

    poly1 = bev_corners(b1)
    poly2 = bev_corners(b2)
    inter = _clip_polygon([tuple(p) for p in poly1], [tuple(p) for p in poly2])
    inter_area = _polygon_area(inter)
    z_lo = max(b1.z - b1.h / 2.0, b2.z - b2.h / 2.0)
    z_hi = min(b1.z + b1.h / 2.0, b2.z + b2.h / 2.0)
    inter_vol = inter_area * max(0.0, z_hi - z_lo)
    if inter_vol == 0.0:
        return 0.0
    # Volumes from the same shoelace areas keep identical boxes at exactly 1.
    vol1 = _polygon_area([tuple(p) for p in poly1]) * b1.h
    vol2 = _polygon_area([tuple(p) for p in poly2]) * b2.h
    return float(inter_vol / (vol1 + vol2 - inter_vol))


def monte_carlo_iou(b1, b2, n_samples, seed):
    """Sampling cross-check for :func:`iou_3d`: independent of the clipping path.

    Uniform samples inside ``b1`` estimate the intersection volume; both
    volumes use the closed-form l*w*h.
    """
    rng = np.random.default_rng(seed)
    local = rng.uniform(-0.5, 0.5, size=(n_samples, 3)) * [b1.l, b1.w, b1.h]
    xy = local[:, :2] @ _rot2d(b1.theta).T + [b1.x, b1.y]
    pts = np.column_stack([xy, local[:, 2] + b1.z])
    inter = points_in_box(b2, pts, atol=0.0).mean() * b1.volume
    union = b1.volume + b2.volume - inter
    return float(inter / union)


# ---------------------------------------------------------------------------
# Synthetic scenes.
# ---------------------------------------------------------------------------


@dataclass
class SceneConfig:
    """Generator settings: car-sized boxes scattered over a flat ground patch."""

    n_boxes: int = 5
    points_per_box: int = 200
    surface_fraction: float = 0.3
    n_background: int = 500
    extent_xy: float = 18.0
    center_z_range: tuple = (-0.4, 0.4)
    length_range: tuple = (3.2, 4.6)
    width_range: tuple = (1.5, 2.0)
    height_range: tuple = (1.3, 1.8)
    placement_margin: float = 1.0
    max_attempts: int = 1000


def _random_box(cfg, rng):
    return Box3D(
        x=rng.uniform(-cfg.extent_xy, cfg.extent_xy),
        y=rng.uniform(-cfg.extent_xy, cfg.extent_xy),
        z=rng.uniform(*cfg.center_z_range),
        l=rng.uniform(*cfg.length_range),
        w=rng.uniform(*cfg.width_range),
        h=rng.uniform(*cfg.height_range),
        theta=rng.uniform(-np.pi, np.pi),
    )


def _bev_circumradius(b):
    return np.sqrt((b.l / 2.0) ** 2 + (b.w / 2.0) ** 2)


def _box_points(b, cfg, rng):
    n = cfg.points_per_box
    n_surface = int(round(n * cfg.surface_fraction))
    local = rng.uniform(-0.5, 0.5, size=(n, 3))
    # surface bias: push one random axis of the leading samples onto a face
    axes = rng.integers(0, 3, size=n_surface)
    signs = rng.choice([-0.5, 0.5], size=n_surface)
    local[np.arange(n_surface), axes] = signs
    local *= [b.l, b.w, b.h]
    xy = local[:, :2] @ _rot2d(b.theta).T + [b.x, b.y]
    refl = rng.uniform(0.0, 1.0, size=n)
    return np.column_stack([xy, local[:, 2] + b.z, refl])


def generate_scene(config=None, seed=0):
    """Non-overlapping random boxes filled with points, plus background clutter."""
    cfg = config if config is not None else SceneConfig()
    rng = np.random.default_rng(seed)

    boxes = []
    attempts = 0
    while len(boxes) < cfg.n_boxes:
        if attempts >= cfg.max_attempts:
            raise SceneGenerationError(
                f"could not place {cfg.n_boxes} non-overlapping boxes "
                f"in {cfg.max_attempts} attempts"
            )
        attempts += 1
        cand = _random_box(cfg, rng)
        ok = all(
            np.hypot(cand.x - b.x, cand.y - b.y)
            > _bev_circumradius(cand) + _bev_circumradius(b) + cfg.placement_margin
            for b in boxes
        )
        if ok:
            boxes.append(cand)

    chunks = [_box_points(b, cfg, rng) for b in boxes]

    if cfg.n_background > 0:
        bg = np.empty((0, 4))
        while len(bg) < cfg.n_background:
            want = cfg.n_background - len(bg)
            xyz = np.column_stack(
                [
                    rng.uniform(-cfg.extent_xy, cfg.extent_xy, size=(want, 2)),
                    rng.uniform(-1.5, 2.5, size=want),
                ]
            )
            outside = np.ones(want, dtype=bool)
            for b in boxes:
                outside &= ~points_in_box(b, xyz)
            refl = rng.uniform(0.0, 1.0, size=want)
            bg = np.vstack([bg, np.column_stack([xyz, refl])[outside]])
        chunks.append(bg[: cfg.n_background])

    if not chunks:
        raise SceneGenerationError("configuration yields an empty scene (no boxes, no background)")
    return PointCloudScene(points=np.vstack(chunks), gt_boxes=boxes)


@dataclass
class ProposalNoise:
    """Bounded uniform perturbation magnitudes for simulated stage-one boxes."""

    center: float = 0.25
    log_extent: float = 0.1
    yaw: float = 0.15
    iou_floor: float = 0.3
    max_tries: int = 100


def perturb_to_proposal(gt, noise=None, seed=0):
    """Jitter a ground-truth box into a proposal with IoU above the floor."""
    cfg = noise if noise is not None else ProposalNoise()
    if cfg.center < 0 or cfg.log_extent < 0 or cfg.yaw < 0:
        raise ValueError("noise scales must be nonnegative")
    rng = np.random.default_rng(seed)
    for _ in range(cfg.max_tries):
        prop = Box3D(
            x=gt.x + rng.uniform(-cfg.center, cfg.center),
            y=gt.y + rng.uniform(-cfg.center, cfg.center),
            z=gt.z + rng.uniform(-cfg.center, cfg.center),
            l=gt.l * np.exp(rng.uniform(-cfg.log_extent, cfg.log_extent)),
            w=gt.w * np.exp(rng.uniform(-cfg.log_extent, cfg.log_extent)),
            h=gt.h * np.exp(rng.uniform(-cfg.log_extent, cfg.log_extent)),
            theta=gt.theta + rng.uniform(-cfg.yaw, cfg.yaw),
        )
        if iou_3d(prop, gt) >= cfg.iou_floor:
            return prop
    raise ValueError(
        f"could not reach IoU floor {cfg.iou_floor} within {cfg.max_tries} tries; "
        "noise settings are too aggressive for the floor"
    )


# ---------------------------------------------------------------------------
# Scene file format: line-oriented text.
#   scene v1 <n_points> <n_boxes>
#   P px py pz r          (one per point)
#   B x y z l w h theta   (one per box)
# ---------------------------------------------------------------------------


def write_scene(scene, path):
    with open(path, "w") as fh:
        fh.write(f"scene v1 {len(scene.points)} {len(scene.gt_boxes)}\n")
        for p in scene.points:
            fh.write("P " + " ".join(repr(float(v)) for v in p) + "\n")
        for b in scene.gt_boxes:
            fh.write("B " + " ".join(repr(float(v)) for v in b.as_array()) + "\n")


def _parse_floats(tokens, count, line_no):
    if len(tokens) != count:
        raise SceneFormatError(line_no, f"expected {count} values, got {len(tokens)}")
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise SceneFormatError(line_no, str(exc)) from None


def read_scene(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SceneFormatError(1, "empty file")
    header = lines[0].split()
    if len(header) != 4 or header[0] != "scene" or header[1] != "v1":
        raise SceneFormatError(1, f"bad header {lines[0]!r}, expected 'scene v1 <n_points> <n_boxes>'")
    try:
        n_points, n_boxes = int(header[2]), int(header[3])
    except ValueError:
        raise SceneFormatError(1, f"bad counts in header {lines[0]!r}") from None

    points, boxes = [], []
    for offset, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        tag, *tokens = line.split()
        if tag == "P":
            points.append(_parse_floats(tokens, 4, offset))
        elif tag == "B":
            vals = _parse_floats(tokens, 7, offset)
            try:
                boxes.append(Box3D(*vals))
            except ValueError as exc:
                raise SceneFormatError(offset, str(exc)) from None
        else:
            raise SceneFormatError(offset, f"unknown record tag {tag!r}")
    if len(points) != n_points:
        raise SceneFormatError(len(lines), f"header declares {n_points} points, found {len(points)}")
    if len(boxes) != n_boxes:
        raise SceneFormatError(len(lines), f"header declares {n_boxes} boxes, found {len(boxes)}")
    pts = np.array(points, dtype=np.float64) if points else np.empty((0, 4))
    return PointCloudScene(points=pts, gt_boxes=boxes)
