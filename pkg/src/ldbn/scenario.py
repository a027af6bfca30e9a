"""Synthetic lane scenes with parameterized photometric domain shift.

A frame is fully determined by ``(spec, index)``. Geometry and scene colours
come from one random stream, sensor noise from another, so a photometric
shift applied to the same ``(seed, index)`` leaves the geometry and the
label untouched.
"""

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import FormatError, ValidationError
from .lane import RowAnchorGrid

SHIFT_PROFILES = {
    "source": {},
    "night": {"brightness": 0.35, "noise_sigma": 0.02},
    "glare": {"brightness": 1.6, "gamma": 0.6},
    "fog": {"blur_radius": 2.0, "contrast": 0.5},
    "sensor": {"noise_sigma": 0.08},
}


@dataclass(frozen=True)
class ScenarioSpec:
    lanes: int = 2
    width: int = 128
    height: int = 64
    grid_cells: int = 25
    row_anchors: int = 14
    # geometry ranges, pixels at the bottom image row
    center_offset: tuple = (-14.0, 14.0)
    curvature: tuple = (-0.006, 0.006)
    lane_half_width: tuple = (26.0, 40.0)
    vanishing_jitter: float = 12.0
    horizon: float = 0.3  # fraction of image height
    # photometric domain
    brightness: float = 1.0
    contrast: float = 1.0
    gamma: float = 1.0
    noise_sigma: float = 0.0
    blur_radius: float = 0.0
    rng_seed: int = 0
    profile: str = field(default="source", compare=False)

    def __post_init__(self):
        for name in ("brightness", "contrast", "gamma"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be > 0")
        if self.noise_sigma < 0 or self.blur_radius < 0:
            raise ValidationError("noise_sigma and blur_radius must be >= 0")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise ValidationError("rng_seed must be an unsigned 64-bit integer")
        if self.lanes not in (2, 4):
            raise ValidationError("lanes must be 2 or 4")
        lo, hi = self.center_offset
        hw_lo, hw_hi = self.lane_half_width
        if not (lo <= hi and 0 < hw_lo <= hw_hi):
            raise ValidationError("geometry ranges must be ordered and half-width positive")
        # the innermost lane on each side must stay inside the image at the bottom row
        if self.width / 2 + max(abs(lo), abs(hi)) + hw_hi >= self.width or \
                self.width / 2 - max(abs(lo), abs(hi)) - hw_hi < 0:
            raise ValidationError("geometry ranges can push every lane out of the image")

    @property
    def grid(self):
        return RowAnchorGrid(self.grid_cells, self.row_anchors, self.lanes,
                             self.width, self.height)

    def with_profile(self, name):
        return dataclasses.replace(self, profile=name, **shift_profile(name))

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k in ("center_offset", "curvature", "lane_half_width"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("center_offset", "curvature", "lane_half_width"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def shift_profile(name):
    """Photometric parameter overrides of a named domain preset."""
    try:
        return dict(SHIFT_PROFILES[name])
    except KeyError:
        raise ValidationError(
            f"unknown shift profile {name!r}; presets: {', '.join(SHIFT_PROFILES)}") from None


@dataclass
class Geometry:
    """One scene draw. Lane ``i`` follows x(y) = a[i] + b[i](y-H) + c(y-H)^2."""
    a: np.ndarray
    b: np.ndarray
    c: float
    horizon_row: float
    road_color: np.ndarray
    lane_color: np.ndarray
    ground_color: np.ndarray
    sky_color: np.ndarray
    stripe_width: float
    dashed: np.ndarray  # per lane
    dash_phase: np.ndarray  # per lane, in [0, 1)
    shadows: np.ndarray  # [k, 3]: top row, bottom row, darkening factor
    texture: np.ndarray  # [H, W] multiplicative road texture

    def lane_x(self, y, height):
        dy = np.asarray(y, dtype=np.float64)[..., None] - height
        return self.a + self.b * dy + self.c * dy * dy


@dataclass
class Frame:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    label: np.ndarray  # [h, L] int64, grid_cells marks "absent"


def _lane_offsets(lanes):
    # boundary lines in units of lane half-width, left to right
    return np.array([-1.0, 1.0]) if lanes == 2 else np.array([-3.0, -1.0, 1.0, 3.0])


def draw_geometry(spec, rng):
    H, W = spec.height, spec.width
    horizon_row = spec.horizon * H
    center = W / 2 + rng.uniform(*spec.center_offset)
    half = rng.uniform(*spec.lane_half_width)
    vanish = W / 2 + rng.uniform(-spec.vanishing_jitter, spec.vanishing_jitter)
    a = center + half * _lane_offsets(spec.lanes)
    b = (a - vanish) / (H - horizon_row)
    c = rng.uniform(*spec.curvature)
    road = rng.uniform(0.3, 0.42)
    lane_tint = rng.uniform(0.55, 0.9)
    yellow = rng.random() < 0.3
    return Geometry(
        a=a, b=b, c=c, horizon_row=horizon_row,
        road_color=road * rng.uniform(0.9, 1.1, 3),
        lane_color=lane_tint * (np.array([1.0, 0.85, 0.2]) if yellow else np.ones(3)),
        ground_color=np.array([0.25, 0.45, 0.2]) * rng.uniform(0.85, 1.15, 3),
        sky_color=np.array([0.55, 0.7, 0.95]) * rng.uniform(0.85, 1.05, 3),
        stripe_width=rng.uniform(0.4, 1.2),
        dashed=rng.random(spec.lanes) < 0.7,
        dash_phase=rng.random(spec.lanes),
        shadows=_draw_shadows(rng, horizon_row, H),
        texture=1.0 + 0.12 * rng.standard_normal((H, W)),
    )


def _draw_shadows(rng, horizon_row, height):
    k = rng.integers(0, 2)
    top = rng.uniform(horizon_row, height, k)
    bottom = top + rng.uniform(2, 6, k)
    return np.stack([top, bottom, rng.uniform(0.8, 0.92, k)], axis=1).reshape(k, 3)


def label_from_geometry(geom, grid):
    xs = geom.lane_x(grid.anchor_rows, grid.height)
    return grid.x_to_cell(xs)


def _runs_contiguous(label, background):
    for lane in label.T:
        idx = np.flatnonzero(lane != background)
        if idx.size and idx[-1] - idx[0] + 1 != idx.size:
            return False
    return True


def scene_geometry(spec, index):
    """Deterministic geometry draw for frame ``index``.

    Draws that would give a lane a broken run of anchors are rejected and
    redrawn from the same stream.
    """
    rng = np.random.default_rng([int(spec.rng_seed), int(index), 0])
    grid = spec.grid
    for _ in range(100):
        geom = draw_geometry(spec, rng)
        label = label_from_geometry(geom, grid)
        if _runs_contiguous(label, grid.background) and (label != grid.background).any():
            return geom
    raise ValidationError(f"could not draw valid geometry for frame {index}")


def render_scene(spec, geom):
    """Noise-free scene before the photometric pipeline, shape [3, H, W]."""
    H, W = spec.height, spec.width
    ys = np.arange(H, dtype=np.float64) + 0.5
    xs = np.arange(W, dtype=np.float64) + 0.5
    below = ys[:, None] >= geom.horizon_row
    # sky fades slightly toward the horizon
    sky_t = np.clip(ys / max(geom.horizon_row, 1.0), 0, 1)[:, None, None]
    img = np.where(below[..., None], geom.ground_color, geom.sky_color * (0.8 + 0.2 * sky_t))
    img = np.broadcast_to(img, (H, W, 3)).copy()

    lane_x = geom.lane_x(ys, H)  # [H, L]
    depth = np.clip((ys - geom.horizon_row) / (H - geom.horizon_row), 0, 1)[:, None]
    margin = 6.0 * depth
    left = lane_x[:, :1] - margin
    right = lane_x[:, -1:] + margin
    road = below & (xs[None, :] >= left) & (xs[None, :] <= right)
    img[road] = geom.road_color * geom.texture[road][:, None]

    half = 0.3 + geom.stripe_width * depth  # thinner toward the horizon
    dist = np.abs(xs[None, None, :] - lane_x.T[:, :, None])  # [L, H, W]
    cover = np.clip(half[None] + 0.5 - dist, 0, 1) * below[None]
    # dashes: period grows toward the camera (perspective)
    pos = np.log1p(np.maximum(ys - geom.horizon_row, 0)) * 3.0
    on = ((pos[None, :] / 2.0 + geom.dash_phase[:, None]) % 1.0) < 0.55
    cover = cover * np.where(geom.dashed[:, None], on, True)[..., None]
    cover = cover.max(axis=0)[..., None]
    img = img * (1 - cover) + geom.lane_color * cover
    for top, bottom, factor in geom.shadows:
        rows = (ys >= top) & (ys < bottom)
        img[rows] *= factor
    return img.transpose(2, 0, 1)


def apply_photometric(img, spec, rng):
    """Contrast, brightness, gamma, blur, noise, clamp; in that order."""
    out = (img - 0.5) * spec.contrast + 0.5
    out = out * spec.brightness
    out = np.clip(out, 0, 1)
    if spec.gamma != 1.0:
        out = out ** spec.gamma
    if spec.blur_radius > 0:
        out = gaussian_filter(out, sigma=(0, spec.blur_radius, spec.blur_radius), mode="nearest")
    if spec.noise_sigma > 0:
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    return np.clip(out, 0, 1)


def render_frame(spec, index):
    """Render frame ``index`` of the scenario; same (spec, index) gives identical bytes."""
    geom = scene_geometry(spec, index)
    scene = render_scene(spec, geom)
    rng = np.random.default_rng([int(spec.rng_seed), int(index), 1])
    image = apply_photometric(scene, spec, rng).astype(np.float32)
    return Frame(image=np.ascontiguousarray(image), label=label_from_geometry(geom, spec.grid))


def render_batch(spec, indices):
    frames = [render_frame(spec, i) for i in indices]
    return (np.stack([f.image for f in frames]), np.stack([f.label for f in frames]))


# --------------------------------------------------------------------------
# LDDS container
# --------------------------------------------------------------------------

LDDS_MAGIC = b"LDDS"
LDDS_VERSION = 1
_U32 = struct.Struct("<I")


def record_bytes(spec):
    return 3 * spec.height * spec.width * 4 + spec.row_anchors * spec.lanes * 2


def header_bytes(spec):
    meta = json.dumps(spec.to_dict(), sort_keys=True).encode()
    return (LDDS_MAGIC + _U32.pack(LDDS_VERSION) + _U32.pack(len(meta)) + meta)


def _open(target, mode):
    if isinstance(target, str) or hasattr(target, "__fspath__"):
        return open(target, mode), True
    return target, False


def _write_record(fh, frame, spec):
    fh.write(frame.image.astype("<f4", copy=False).tobytes())
    label = np.where(frame.label == spec.grid_cells, -1, frame.label).astype("<i2")
    fh.write(label.tobytes())


def generate_dataset(spec, n_frames, sink, start=0):
    """Stream ``n_frames`` rendered frames (indices ``start..``) to an LDDS file."""
    if n_frames < 1:
        raise ValidationError("n_frames must be >= 1")
    fh, owned = _open(sink, "wb")
    try:
        fh.write(header_bytes(spec))
        fh.write(_U32.pack(n_frames) + _U32.pack(record_bytes(spec)))
        for i in range(start, start + n_frames):
            _write_record(fh, render_frame(spec, i), spec)
    finally:
        if owned:
            fh.close()


def save_frames(spec, frames, sink):
    """Write already-materialized frames (may be empty) to an LDDS file."""
    fh, owned = _open(sink, "wb")
    try:
        fh.write(header_bytes(spec))
        fh.write(_U32.pack(len(frames)) + _U32.pack(record_bytes(spec)))
        for f in frames:
            _write_record(fh, f, spec)
    finally:
        if owned:
            fh.close()


def _read_exact(fh, n, what, record=None):
    pos = fh.tell()
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated {what}", offset=pos + len(data), record=record)
    return data


def load_dataset(source):
    """Read an LDDS file; returns ``(spec, frames)``."""
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    fh, owned = _open(source, "rb")
    try:
        start = fh.tell()
        magic = _read_exact(fh, 4, "magic")
        if magic != LDDS_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {LDDS_MAGIC!r}", offset=start)
        pos = fh.tell()
        (version,) = _U32.unpack(_read_exact(fh, 4, "version"))
        if version != LDDS_VERSION:
            raise FormatError(f"unsupported version {version}", offset=pos)
        (meta_len,) = _U32.unpack(_read_exact(fh, 4, "header length"))
        pos = fh.tell()
        try:
            spec = ScenarioSpec.from_dict(json.loads(_read_exact(fh, meta_len, "header")))
        except (ValueError, TypeError, ValidationError) as e:
            raise FormatError(f"unreadable scenario header: {e}", offset=pos) from None
        (n,) = _U32.unpack(_read_exact(fh, 4, "frame count"))
        pos = fh.tell()
        (rec,) = _U32.unpack(_read_exact(fh, 4, "record length"))
        if rec != record_bytes(spec):
            raise FormatError(
                f"record length {rec} inconsistent with header ({record_bytes(spec)})", offset=pos)
        n_img = 3 * spec.height * spec.width
        frames = []
        for i in range(n):
            raw = _read_exact(fh, rec, "frame record", record=i)
            image = np.frombuffer(raw, dtype="<f4", count=n_img).astype(np.float32)
            label = np.frombuffer(raw, dtype="<i2", offset=n_img * 4).astype(np.int64)
            label = np.where(label < 0, spec.grid_cells, label).reshape(spec.row_anchors, spec.lanes)
            if label.max(initial=0) > spec.grid_cells:
                raise FormatError("label cell out of range", offset=fh.tell() - rec, record=i)
            frames.append(Frame(image.reshape(3, spec.height, spec.width), label))
        extra = fh.read(1)
        if extra:
            raise FormatError("trailing bytes after last record", offset=fh.tell() - 1, record=n)
        return spec, frames
    finally:
        if owned:
            fh.close()
