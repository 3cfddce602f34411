"""Pinhole camera geometry, colour/depth registration and hand cropping.

Images are numpy arrays in row-major ``(height, width)`` order; pixel
coordinates ``(u, v)`` are (column, row).  Depth is in millimetres with 0
marking an invalid sample.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import BehindCameraError, FormatError, InvalidDepthError, InvalidInputError, VersionMismatchError

REGISTERED_SIZE = (320, 240)  # width, height after downsampling
CROP_SIZE = 128
HAND_SPAN_MM = 300.0
INVALID_DEPTH_SENTINEL = 10000.0


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    # rigid transform taking colour-camera coordinates to depth-camera coordinates
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise InvalidInputError("image size must be positive")
        R = np.array(self.rotation, float).reshape(3, 3)
        t = np.array(self.translation, float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def scaled(self, width: int, height: int) -> "Camera":
        """Same camera resampled to a new resolution."""
        sx, sy = width / self.width, height / self.height
        return Camera(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height,
                      self.rotation, self.translation)

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        allowed = {"fx", "fy", "cx", "cy", "width", "height", "rotation", "translation"}
        unknown = set(d) - allowed
        if unknown:
            raise FormatError(f"camera config: unknown fields {sorted(unknown)}")
        return cls(**d)


def default_camera() -> Camera:
    """Registered 320x240 depth camera (half-resolution SR300-like intrinsics)."""
    return Camera(fx=475.0, fy=475.0, cx=160.0, cy=120.0, width=320, height=240)


@dataclass(frozen=True, eq=False)
class Frame:
    """Registered colour + depth image pair."""

    color: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float32, mm

    def __post_init__(self):
        if self.color.shape[:2] != self.depth.shape or self.color.shape[2:] != (3,):
            raise InvalidInputError("colour must be (H, W, 3) and match the depth size")
        if np.any(self.depth < 0):
            raise InvalidInputError("depth values must be non-negative")

    @property
    def data(self) -> np.ndarray:
        """The four-channel ``(H, W, 4)`` colored depth map."""
        return np.concatenate([self.color.astype(np.float32), self.depth[..., None]], axis=-1)


@dataclass(frozen=True, eq=False)
class CroppedFrame:
    data: np.ndarray  # (128, 128, 4) float32: RGB in [0, 255], normalised depth
    crop_origin: tuple[int, int]
    crop_side: int
    root_depth: float


@dataclass(frozen=True)
class RootLocation:
    """2.5D hand root.  ``z == 0`` means the depth has not been resolved yet."""

    u: float
    v: float
    z: float = 0.0
    confidence: float = 1.0


def project(camera: Camera, points) -> np.ndarray:
    """Pinhole projection of ``(..., 3)`` points in mm to ``(..., 2)`` pixels."""
    p = np.asarray(points, float)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("cannot project a point with z <= 0")
    u = camera.fx * p[..., 0] / z + camera.cx
    v = camera.fy * p[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1)


def project_jacobian(camera: Camera, points) -> np.ndarray:
    """``(n, 2, 3)`` derivative of :func:`project` with respect to each point."""
    p = np.asarray(points, float)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    J = np.zeros((len(p), 2, 3))
    J[:, 0, 0] = camera.fx / z
    J[:, 0, 2] = -camera.fx * x / z**2
    J[:, 1, 1] = camera.fy / z
    J[:, 1, 2] = -camera.fy * y / z**2
    return J


def backproject(camera: Camera, root) -> np.ndarray:
    """Lift a 2.5D location to 3D.  Accepts a :class:`RootLocation` or ``(u, v, z)``."""
    if isinstance(root, RootLocation):
        u, v, z = root.u, root.v, root.z
    else:
        u, v, z = np.asarray(root, float)
    if not z > 0:
        raise InvalidDepthError(f"backprojection needs z > 0, got {z}")
    return np.array([(u - camera.cx) * z / camera.fx, (v - camera.cy) * z / camera.fy, z])


def _round(x):
    return np.floor(np.asarray(x) + 0.5).astype(int)


def _subsample(img: np.ndarray, width: int, height: int) -> np.ndarray:
    rows = (np.arange(height) * img.shape[0]) // height
    cols = (np.arange(width) * img.shape[1]) // width
    return img[rows][:, cols]


def register_colored_depth(camera: Camera, color, depth, color_camera: Camera | None = None,
                           output_size=REGISTERED_SIZE) -> Frame:
    """Map colour onto the depth image plane and downsample.

    ``camera`` describes the depth sensor, and its ``rotation``/``translation``
    take colour-camera coordinates into depth-camera coordinates.  Every valid
    depth pixel is lifted to 3D, moved into the colour camera, projected and
    assigned the colour it lands on.  When several depth pixels land on one
    colour pixel only the nearest keeps the colour; the others are occluded in
    the colour view and get black.
    """
    color = np.asarray(color)
    depth = np.asarray(depth, np.float32)
    color_camera = color_camera or camera
    if depth.shape != (camera.height, camera.width):
        raise InvalidInputError(f"depth is {depth.shape}, camera expects {(camera.height, camera.width)}")
    if color.shape != (color_camera.height, color_camera.width, 3):
        raise InvalidInputError(f"colour is {color.shape}, expected {(color_camera.height, color_camera.width, 3)}")

    out_color = np.zeros((camera.height, camera.width, 3), np.uint8)
    vs, us = np.nonzero(depth > 0)
    if len(vs):
        z = depth[vs, us].astype(float)
        pts = np.stack([(us - camera.cx) * z / camera.fx, (vs - camera.cy) * z / camera.fy, z], 1)
        # depth -> colour frame is the inverse of the stored transform
        pts_c = (pts - camera.translation) @ camera.rotation
        front = pts_c[:, 2] > 0
        uc = _round(color_camera.fx * pts_c[:, 0] / np.where(front, pts_c[:, 2], 1) + color_camera.cx)
        vc = _round(color_camera.fy * pts_c[:, 1] / np.where(front, pts_c[:, 2], 1) + color_camera.cy)
        ok = front & (uc >= 0) & (uc < color_camera.width) & (vc >= 0) & (vc < color_camera.height)
        idx = np.flatnonzero(ok)
        target = vc[idx] * color_camera.width + uc[idx]
        zbuf = np.full(color_camera.width * color_camera.height, np.inf)
        np.minimum.at(zbuf, target, pts_c[idx, 2])
        win = pts_c[idx, 2] <= zbuf[target]
        idx = idx[win]
        out_color[vs[idx], us[idx]] = color[vc[idx], uc[idx]]

    width, height = output_size
    return Frame(_subsample(out_color, width, height), _subsample(depth, width, height))


def crop_side(camera: Camera, z: float, k_crop: float | None = None) -> int:
    """Side length in pixels of the hand crop at root depth ``z`` mm."""
    if not z > 0:
        raise InvalidDepthError(f"crop needs z > 0, got {z}")
    if k_crop is None:
        k_crop = camera.fx * HAND_SPAN_MM
    return max(1, int(_round(k_crop / z)))


def crop(frame: Frame, root: RootLocation, camera: Camera, k_crop: float | None = None,
         size: int = CROP_SIZE) -> CroppedFrame:
    """Depth-dependent square crop around the root, depth made root-relative.

    Pixels outside the image are zero-padded; invalid depth maps to
    ``INVALID_DEPTH_SENTINEL`` after normalisation.
    """
    side = crop_side(camera, root.z, k_crop)
    u0 = int(_round(root.u - side / 2))
    v0 = int(_round(root.v - side / 2))
    # sample positions at output pixel centres, in source pixel coordinates
    t = (np.arange(size) + 0.5) * side / size - 0.5
    rows, cols = v0 + t, u0 + t

    H, W = frame.depth.shape
    ri, ci = _round(rows), _round(cols)
    rin = (ri >= 0) & (ri < H)
    cin = (ci >= 0) & (ci < W)
    depth = np.zeros((size, size), np.float32)
    depth[np.ix_(rin, cin)] = frame.depth[np.ix_(ri[rin], ci[cin])]
    valid = depth > 0
    norm = np.where(valid, depth - np.float32(root.z), np.float32(INVALID_DEPTH_SENTINEL))

    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    color = np.stack([
        ndimage.map_coordinates(frame.color[..., c].astype(np.float32), [rr, cc], order=1,
                                mode="constant", cval=0.0)
        for c in range(3)
    ], axis=-1)
    data = np.concatenate([color, norm[..., None]], axis=-1).astype(np.float32)
    return CroppedFrame(data=data, crop_origin=(u0, v0), crop_side=side, root_depth=float(root.z))


# -- frame stream file ---------------------------------------------------------

FRAME_MAGIC = b"HTFRAMES"
FRAME_VERSION = 1
_CAMERA_STRUCT = struct.Struct("<4d2I9d3d")


def pack_camera(camera: Camera) -> bytes:
    return _CAMERA_STRUCT.pack(camera.fx, camera.fy, camera.cx, camera.cy, camera.width,
                               camera.height, *camera.rotation.ravel(), *camera.translation)


def unpack_camera(buf: bytes) -> Camera:
    try:
        vals = _CAMERA_STRUCT.unpack(buf)
        return Camera(*vals[:4], int(vals[4]), int(vals[5]), np.array(vals[6:15]).reshape(3, 3),
                      np.array(vals[15:18]))
    except (struct.error, InvalidInputError) as exc:
        raise FormatError(f"bad camera record: {exc}") from exc


def write_frame_stream(path, frames, camera: Camera) -> None:
    """Write registered frames: header, then per frame colour (u8) and depth (<f4)."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC + struct.pack("<II", FRAME_VERSION, len(frames)))
        fh.write(pack_camera(camera))
        for fr in frames:
            if fr.depth.shape != (camera.height, camera.width):
                raise InvalidInputError(f"{path}: frame size does not match the camera")
            fh.write(np.ascontiguousarray(fr.color, np.uint8).tobytes())
            fh.write(np.ascontiguousarray(fr.depth, "<f4").tobytes())


def read_frame_stream(path, expected_camera: Camera | None = None):
    path = Path(path)
    buf = path.read_bytes()
    head = len(FRAME_MAGIC) + 8
    if buf[: len(FRAME_MAGIC)] != FRAME_MAGIC:
        raise FormatError(f"{path}: not a frame stream")
    if len(buf) < head + _CAMERA_STRUCT.size:
        raise FormatError(f"{path}: truncated header")
    version, n = struct.unpack_from("<II", buf, len(FRAME_MAGIC))
    if version != FRAME_VERSION:
        raise VersionMismatchError(f"{path}: unsupported frame stream version {version}")
    camera = unpack_camera(buf[head: head + _CAMERA_STRUCT.size])
    if expected_camera is not None and camera != expected_camera:
        raise FormatError(f"{path}: header camera does not match the expected camera")
    off = head + _CAMERA_STRUCT.size
    npx = camera.width * camera.height
    if len(buf) != off + n * npx * 7:
        raise FormatError(f"{path}: trailing or missing bytes")
    frames = []
    for _ in range(n):
        color = np.frombuffer(buf, np.uint8, npx * 3, off).reshape(camera.height, camera.width, 3)
        off += npx * 3
        depth = np.frombuffer(buf, "<f4", npx, off).reshape(camera.height, camera.width)
        off += npx * 4
        frames.append(Frame(color.copy(), depth.astype(np.float32)))
    return frames, camera
