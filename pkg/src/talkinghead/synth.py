"""Procedural talking-head sequences with exact ground truth.

A speaker is a shaded, procedurally textured sphere at the origin with two
eyes and a mouth. The mouth's vertical aperture follows a band-limited
"speech envelope"; head motion is a smooth camera orbit. Frames are
ray-traced in closed form, so poses, masks and lip boxes are exact.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .errors import FormatError
from .geometry import Intrinsics, Pose, generate_rays, orbit_pose, pixel_centers, project
from .refiner import face_mask

FPS = 25
RAW_AUDIO_RATE = 16000  # recorded for provenance only; no raw speech is synthesised
WINDOW_MARGIN = 32


@dataclass(frozen=True)
class IdentityParams:
    seed: int
    radius: float
    skin: tuple
    tex_dirs: tuple
    tex_freqs: tuple
    tex_phases: tuple
    tex_amps: tuple
    light: tuple
    lip_color: tuple
    teeth_color: tuple
    eye_color: tuple
    mouth_lat: float
    mouth_lon: float
    mouth_half_width: float
    max_aperture: float
    lip_half_height: float
    bg_top: tuple
    bg_bottom: tuple


def synth_identity(seed: int) -> IdentityParams:
    rng = np.random.default_rng([7919, seed])
    k = 6
    dirs = rng.normal(size=(k, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    light = np.array([rng.uniform(-0.5, 0.5), rng.uniform(0.2, 0.7), 1.0])
    light /= np.linalg.norm(light)
    max_ap = rng.uniform(0.12, 0.2)
    tup = lambda a: tuple(float(v) for v in np.ravel(a))  # noqa: E731
    return IdentityParams(
        seed=int(seed),
        radius=float(rng.uniform(0.3, 0.5)),
        skin=tup(rng.uniform([0.55, 0.4, 0.3], [0.8, 0.65, 0.55])),
        tex_dirs=tup(dirs),
        tex_freqs=tup(rng.uniform(2.0, 6.0, k)),
        tex_phases=tup(rng.uniform(0, 2 * np.pi, k)),
        tex_amps=tup(rng.uniform(0.02, 0.06, (k, 3))),
        light=tup(light),
        lip_color=tup(rng.uniform([0.45, 0.1, 0.12], [0.6, 0.25, 0.25])),
        teeth_color=tup(rng.uniform([0.9, 0.88, 0.82], [0.98, 0.96, 0.92])),
        eye_color=tup(rng.uniform(0.05, 0.2, 3)),
        mouth_lat=float(rng.uniform(-0.5, -0.4)),
        mouth_lon=float(rng.uniform(-0.05, 0.05)),
        mouth_half_width=float(rng.uniform(0.3, 0.4)),
        max_aperture=float(max_ap),
        lip_half_height=float(max_ap + rng.uniform(0.05, 0.08)),
        bg_top=tup(rng.uniform(0.1, 0.9, 3)),
        bg_bottom=tup(rng.uniform(0.1, 0.9, 3)),
    )


# ---------------------------------------------------------------------------
# appearance model
# ---------------------------------------------------------------------------

def _angles(n: np.ndarray):
    lon = np.arctan2(n[..., 0], n[..., 2])
    lat = np.arcsin(np.clip(n[..., 1], -1.0, 1.0))
    return lat, lon


def mouth_interior(ident: IdentityParams, n: np.ndarray, aperture: float) -> np.ndarray:
    """Surface normals inside the open mouth for the given aperture (empty at 0)."""
    lat, lon = _angles(n)
    if aperture <= 0:
        return np.zeros(lat.shape, dtype=bool)
    du = (lon - ident.mouth_lon) / (0.85 * ident.mouth_half_width)
    dv = (lat - ident.mouth_lat) / aperture
    return du * du + dv * dv < 1.0


def albedo(ident: IdentityParams, n: np.ndarray) -> np.ndarray:
    """Face colour without the mouth opening: skin texture, lips and eyes."""
    dirs = np.asarray(ident.tex_dirs).reshape(-1, 3)
    amps = np.asarray(ident.tex_amps).reshape(-1, 3)
    phase = (n @ dirs.T) * np.asarray(ident.tex_freqs) + np.asarray(ident.tex_phases)
    col = np.asarray(ident.skin) + np.sin(phase) @ amps
    lat, lon = _angles(n)
    du = (lon - ident.mouth_lon) / ident.mouth_half_width
    dv = (lat - ident.mouth_lat) / ident.lip_half_height
    lips = du * du + dv * dv <= 1.0
    col = np.where(lips[..., None], np.asarray(ident.lip_color), col)
    for side in (-1.0, 1.0):
        eu = (lon - side * 0.38) / 0.16
        ev = (lat - 0.22) / 0.09
        eyes = eu * eu + ev * ev <= 1.0
        col = np.where(eyes[..., None], np.asarray(ident.eye_color), col)
    return col


def surface_color(ident: IdentityParams, n: np.ndarray, aperture: float, mouth: bool = True) -> np.ndarray:
    col = albedo(ident, n)
    if mouth:
        inside = mouth_interior(ident, n, aperture)
        col = np.where(inside[..., None], np.asarray(ident.teeth_color), col)
    shade = 0.55 + 0.45 * np.clip(n @ np.asarray(ident.light), 0.0, None)
    return np.clip(col * shade[..., None], 0.0, 1.0)


def background(ident: IdentityParams, height: int, width: int) -> np.ndarray:
    v = (np.arange(height) + 0.5) / height
    u = (np.arange(width) + 0.5) / width
    top, bottom = np.asarray(ident.bg_top), np.asarray(ident.bg_bottom)
    img = top[:, None, None] + (bottom - top)[:, None, None] * v[None, :, None]
    img = img + 0.05 * np.sin(2 * np.pi * u)[None, None, :]
    return np.clip(np.broadcast_to(img, (3, height, width)), 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    return io.to_bytes(img).astype(np.float64) / 255.0


def render_frame(ident: IdentityParams, pose: Pose, k: Intrinsics, aperture: float,
                 mouth: bool = True, supersample: int = 2) -> np.ndarray:
    """Closed-form ray trace of the head; returns quantised [3,H,W] in [0,1]."""
    s = supersample
    centers = pixel_centers(k)
    offs = (np.arange(s) + 0.5) / s - 0.5
    acc = np.zeros((k.height * k.width, 3))
    bg = background(ident, k.height, k.width).reshape(3, -1).T
    for dv in offs:
        for du in offs:
            rays = generate_rays(pose, k, centers + [du, dv])
            o, d = rays.origins, rays.directions
            b = np.einsum("ij,ij->i", o, d)
            c = np.einsum("ij,ij->i", o, o) - ident.radius ** 2
            disc = b * b - c
            hit = disc > 0
            col = bg.copy()
            t = -b[hit] - np.sqrt(disc[hit])
            n = (o[hit] + t[:, None] * d[hit]) / ident.radius
            col[hit] = surface_color(ident, n, aperture, mouth)
            acc += col
    img = (acc / (s * s)).T.reshape(3, k.height, k.width)
    return quantize(img)


def mouth_outline(ident: IdentityParams, half_height: float, n: int = 72) -> np.ndarray:
    """3-D points on the boundary of a mouth-centred ellipse on the sphere."""
    a = np.linspace(0, 2 * np.pi, n, endpoint=False)
    lon = ident.mouth_lon + ident.mouth_half_width * np.cos(a)
    lat = ident.mouth_lat + half_height * np.sin(a)
    return ident.radius * np.stack([np.cos(lat) * np.sin(lon), np.sin(lat), np.cos(lat) * np.cos(lon)], axis=1)


def mouth_center(ident: IdentityParams) -> np.ndarray:
    lat, lon = ident.mouth_lat, ident.mouth_lon
    return ident.radius * np.array([np.cos(lat) * np.sin(lon), np.sin(lat), np.cos(lat) * np.cos(lon)])


def lip_box(ident: IdentityParams, pose: Pose, k: Intrinsics, aperture: float, margin: float = 1.0) -> np.ndarray:
    """(x0, y0, x1, y1) in pixels around lips plus half the current opening."""
    uv = project(pose, k, mouth_outline(ident, ident.lip_half_height + 0.5 * aperture))
    lo = uv.min(axis=0) - margin
    hi = uv.max(axis=0) + margin
    return np.array([lo[0], lo[1], hi[0], hi[1]])


# ---------------------------------------------------------------------------
# sequences
# ---------------------------------------------------------------------------

def envelope_fn(seed: int):
    rng = np.random.default_rng([104729, seed])
    amps = rng.uniform(0.15, 0.3, 3)
    freqs = rng.uniform(1.0, 3.5, 3)
    phases = rng.uniform(0, 2 * np.pi, 3)
    bias = rng.uniform(0.4, 0.55)

    def f(t):
        t = np.asarray(t, dtype=np.float64)[..., None]
        return np.clip(bias + (amps * np.sin(2 * np.pi * freqs * t + phases)).sum(-1), 0.0, 1.0)

    return f


def pose_fn(seed: int, distance: float):
    rng = np.random.default_rng([15485863, seed])
    yaw_amp, pitch_amp = rng.uniform(0.12, 0.25), rng.uniform(0.04, 0.1)
    f = rng.uniform(0.2, 0.6, 3)
    ph = rng.uniform(0, 2 * np.pi, 3)

    def p(t):
        yaw = yaw_amp * np.sin(2 * np.pi * f[0] * t + ph[0])
        pitch = pitch_amp * np.sin(2 * np.pi * f[1] * t + ph[1])
        dist = distance * (1.0 + 0.02 * np.sin(2 * np.pi * f[2] * t + ph[2]))
        return orbit_pose(yaw, pitch, dist)

    return p


@dataclass
class SyntheticSequence:
    identity: IdentityParams
    frames: np.ndarray        # [N,3,H,W] in [0,1], multiples of 1/255
    poses: np.ndarray         # [N,12] row-major [R|T]
    envelope: np.ndarray      # [N] in [0,1]
    audio: np.ndarray         # [N*spf + 2*WINDOW_MARGIN] envelope sampled at spf per frame
    lipboxes: np.ndarray      # [N,4]
    masks: np.ndarray         # [N,H,W] bool
    seed: int = 0
    samples_per_frame: int = 16
    fps: int = FPS
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def size(self) -> int:
        return self.frames.shape[-1]

    def pose(self, i: int) -> Pose:
        return Pose.from_row(self.poses[i])

    def intrinsics(self) -> Intrinsics:
        return Intrinsics.default(self.frames.shape[-1], self.frames.shape[-2])

    def audio_window(self, i: int, length: int = 64) -> np.ndarray:
        """``length`` envelope samples centred on frame ``i``."""
        center = WINDOW_MARGIN + i * self.samples_per_frame + self.samples_per_frame // 2
        lo = center - length // 2
        if lo < 0 or lo + length > len(self.audio):
            raise ValueError(f"audio window of {length} samples does not fit around frame {i}")
        return self.audio[lo:lo + length]

    def audio_clip(self, start: int, n_frames: int) -> np.ndarray:
        """Envelope samples covering frames ``start .. start+n_frames-1``."""
        lo = WINDOW_MARGIN + start * self.samples_per_frame
        return self.audio[lo:lo + n_frames * self.samples_per_frame]


def synth_sequence(ident: IdentityParams, n_frames: int, seed: int, size: int = 128,
                   cam_distance: float = 2.0, samples_per_frame: int = 16,
                   envelope=None) -> SyntheticSequence:
    """Render ``n_frames`` frames. ``envelope`` optionally overrides the speech curve (callable of time)."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    env_f = envelope if envelope is not None else envelope_fn(seed)
    pose_f = pose_fn(seed, cam_distance)
    spf = samples_per_frame
    m = np.arange(n_frames * spf + 2 * WINDOW_MARGIN)
    audio = np.asarray(env_f((m - WINDOW_MARGIN) / (FPS * spf)), dtype=np.float64) * np.ones(len(m))
    k = Intrinsics.default(size)
    frames, poses, env, boxes, masks = [], [], [], [], []
    for i in range(n_frames):
        t = (i + 0.5) / FPS
        e = float(audio[WINDOW_MARGIN + i * spf + spf // 2])
        pose = pose_f(t)
        ap = ident.max_aperture * e
        frames.append(render_frame(ident, pose, k, ap))
        poses.append(pose.to_row())
        env.append(e)
        boxes.append(lip_box(ident, pose, k, ap))
        masks.append(face_mask(ident, pose, k))
    return SyntheticSequence(ident, np.stack(frames), np.stack(poses), np.array(env), audio,
                             np.stack(boxes), np.stack(masks), seed=int(seed), samples_per_frame=spf,
                             meta={"cam_distance": cam_distance})


# ---------------------------------------------------------------------------
# lip crops
# ---------------------------------------------------------------------------

def lip_sample_points(box, out_h: int = 16, out_w: int = 32) -> np.ndarray:
    """(u, v) image coordinates of an ``out_h x out_w`` crop grid inside ``box``."""
    x0, y0, x1, y1 = np.asarray(box, dtype=np.float64)
    u = x0 + (np.arange(out_w) + 0.5) / out_w * (x1 - x0)
    v = y0 + (np.arange(out_h) + 0.5) / out_h * (y1 - y0)
    vv, uu = np.meshgrid(v, u, indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def bilinear(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample [C,H,W] at continuous (u, v) (pixel centers at +0.5), clamped; returns [N,C]."""
    c, h, w = img.shape
    x = np.clip(uv[:, 0] - 0.5, 0, w - 1)
    y = np.clip(uv[:, 1] - 0.5, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(int), max(h - 2, 0))
    fx, fy = x - x0, y - y0
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    out = (img[:, y0, x0] * (1 - fx) * (1 - fy) + img[:, y0, x1] * fx * (1 - fy)
           + img[:, y1, x0] * (1 - fx) * fy + img[:, y1, x1] * fx * fy)
    return out.T


def crop_lips(frame: np.ndarray, box, out_h: int = 16, out_w: int = 32) -> np.ndarray:
    pts = lip_sample_points(box, out_h, out_w)
    return bilinear(frame, pts).T.reshape(frame.shape[0], out_h, out_w)


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------

def write_dataset(seq: SyntheticSequence, directory) -> None:
    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    (d / "masks").mkdir(parents=True, exist_ok=True)
    h, w = seq.frames.shape[-2:]
    meta = {
        "format": "talkinghead-synthetic-1",
        "fps": seq.fps,
        "width": w,
        "height": h,
        "n_frames": seq.n_frames,
        "samples_per_frame": seq.samples_per_frame,
        "window_margin": WINDOW_MARGIN,
        "raw_audio_rate": RAW_AUDIO_RATE,
        "identity_seed": seq.identity.seed,
        "sequence_seed": seq.seed,
        "cam_distance": repr(float(seq.meta.get("cam_distance", 2.0))),
    }
    (d / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()), encoding="ascii")
    for i in range(seq.n_frames):
        io.write_ppm(d / "frames" / f"{i:05d}.ppm", seq.frames[i])
        io.write_pbm(d / "masks" / f"{i:05d}.pbm", seq.masks[i])
    io.save_tensor(d / "poses.s3dt", seq.poses.astype(np.float64))
    io.save_tensor(d / "envelope.s3dt", seq.envelope.astype(np.float64))
    io.save_tensor(d / "lipboxes.s3dt", seq.lipboxes.astype(np.float64))
    io.save_tensor(d / "audio.s3dt", seq.audio.astype(np.float64))


def read_meta(directory) -> dict:
    path = Path(directory) / "meta.txt"
    if not path.exists():
        raise FormatError(path, "missing meta.txt")
    meta = {}
    for line in path.read_text(encoding="ascii").splitlines():
        if line.strip():
            if "=" not in line:
                raise FormatError(path, f"malformed line {line!r}")
            key, value = line.split("=", 1)
            meta[key] = value
    for key in ("fps", "width", "height", "n_frames", "samples_per_frame", "identity_seed"):
        if key not in meta:
            raise FormatError(path, f"missing key {key}")
    return meta


def read_dataset(directory) -> SyntheticSequence:
    d = Path(directory)
    meta = read_meta(d)
    n = int(meta["n_frames"])

    def tensor(name, shape):
        path = d / name
        if not path.exists():
            raise FormatError(path, "missing file")
        arr = io.load_tensor(path)
        if shape is not None and arr.shape != shape:
            raise FormatError(path, f"expected dims {shape}, found {arr.shape}")
        return arr

    spf = int(meta["samples_per_frame"])
    poses = tensor("poses.s3dt", (n, 12))
    envelope = tensor("envelope.s3dt", (n,))
    boxes = tensor("lipboxes.s3dt", (n, 4))
    audio = tensor("audio.s3dt", (n * spf + 2 * WINDOW_MARGIN,))
    frames, masks = [], []
    for i in range(n):
        for sub in ("frames", "masks"):
            if not (d / sub / f"{i:05d}.{'ppm' if sub == 'frames' else 'pbm'}").exists():
                raise FormatError(d / sub, f"missing entry for frame {i}")
        size = (int(meta["height"]), int(meta["width"]))
        frame = io.read_ppm(d / "frames" / f"{i:05d}.ppm")
        mask = io.read_pbm(d / "masks" / f"{i:05d}.pbm")
        for path, found in ((d / "frames" / f"{i:05d}.ppm", frame.shape[1:]), (d / "masks" / f"{i:05d}.pbm", mask.shape)):
            if found != size:
                raise FormatError(path, f"expected {size[1]}x{size[0]} pixels, found {found[1]}x{found[0]}")
        frames.append(frame.astype(np.float64) / 255.0)
        masks.append(mask)
    ident = synth_identity(int(meta["identity_seed"]))
    return SyntheticSequence(ident, np.stack(frames), poses, envelope, audio, boxes, np.stack(masks),
                             seed=int(meta.get("sequence_seed", 0)), samples_per_frame=spf,
                             fps=int(meta["fps"]), meta={"cam_distance": float(meta.get("cam_distance", 2.0))})


def is_sequence_dir(directory) -> bool:
    return (Path(directory) / "meta.txt").exists()


def read_collection(directory) -> list[SyntheticSequence]:
    """A sequence directory, or a directory whose subdirectories are sequences."""
    d = Path(directory)
    if is_sequence_dir(d):
        return [read_dataset(d)]
    subs = sorted(p for p in d.iterdir() if p.is_dir() and is_sequence_dir(p)) if d.is_dir() else []
    if not subs:
        raise FormatError(d, "no synthetic sequences found")
    return [read_dataset(p) for p in subs]


def identity_dict(ident: IdentityParams) -> dict:
    return asdict(ident)
