"""Point-cloud and image I/O, image-to-scan colorization, and synthetic scene pairs."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .geometry import ColoredPointCloud, RigidTransform

# ---------------------------------------------------------------- PLY


class PlyError(ValueError):
    pass


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_FORMATS = ("ascii", "binary_little_endian")


def write_ply(cloud: ColoredPointCloud, path, format: str = "binary_little_endian") -> None:
    """x, y, z as float32 and red, green, blue as uchar (round(255 c))."""
    if format not in _FORMATS:
        raise ValueError(f"unsupported PLY format {format!r}")
    n = len(cloud)
    rgb = np.round(cloud.colors * 255.0).astype(np.uint8)
    header = (f"ply\nformat {format} 1.0\nelement vertex {n}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if format == "ascii":
            pos = cloud.positions.astype(np.float32)
            for p, c in zip(pos, rgb):
                # str() of a float32 is its shortest round-tripping decimal
                f.write(f"{str(p[0])} {str(p[1])} {str(p[2])} {c[0]} {c[1]} {c[2]}\n".encode("ascii"))
        else:
            rec = np.empty(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                     ("red", "u1"), ("green", "u1"), ("blue", "u1")])
            for k, name in enumerate("xyz"):
                rec[name] = cloud.positions[:, k]
            for k, name in enumerate(("red", "green", "blue")):
                rec[name] = rgb[:, k]
            f.write(rec.tobytes())


def _parse_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyError("malformed header at byte 0: missing 'ply' magic or 'end_header'")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    fmt, count, props, in_vertex = None, None, [], False
    offset = 0
    for raw in data[:end].split(b"\n"):
        line = raw.decode("ascii", "replace").strip()
        tok = line.split()
        here = offset
        offset += len(raw) + 1
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 3 or tok[1] not in _FORMATS:
                raise PlyError(f"unsupported format at byte {here}: {line!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PlyError(f"malformed element line at byte {here}: {line!r}")
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    count = int(tok[2])
                except ValueError:
                    raise PlyError(f"malformed vertex count at byte {here}: {line!r}") from None
                if count < 0:
                    raise PlyError(f"negative vertex count at byte {here}")
            elif count is None or props:
                raise PlyError(f"unsupported element {tok[1]!r} at byte {here}")
        elif tok[0] == "property":
            if not in_vertex:
                raise PlyError(f"property outside the vertex element at byte {here}")
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise PlyError(f"unsupported property at byte {here}: {line!r}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise PlyError(f"unexpected header line at byte {here}: {line!r}")
    if fmt is None or count is None:
        raise PlyError("malformed header at byte 0: missing format or vertex element")
    names = [p[0] for p in props]
    for need in ("x", "y", "z"):
        if need not in names:
            raise PlyError(f"missing vertex property {need!r}")
    return fmt, count, props, body_start


def read_ply(path) -> ColoredPointCloud:
    """Vertex positions and (optional) 8-bit colors; all-zero colors read back as uncolored."""
    with open(path, "rb") as f:
        data = f.read()
    fmt, n, props, start = _parse_header(data)
    names = [p[0] for p in props]
    if fmt == "ascii":
        lines = data[start:].decode("ascii", "replace").split("\n")
        rows = [ln.split() for ln in lines if ln.strip()]
        if len(rows) < n:
            raise PlyError(f"truncated body at byte {len(data)}: expected {n} vertices, found {len(rows)}")
        try:
            vals = np.array([[float(v) for v in r] for r in rows[:n]], dtype=float).reshape(n, -1) if n \
                else np.zeros((0, len(props)))
        except ValueError as e:
            raise PlyError(f"malformed vertex data after byte {start}: {e}") from None
        if vals.shape[1] != len(props):
            raise PlyError(f"vertex rows have {vals.shape[1]} values, header declares {len(props)}")
        for k, (name, t) in enumerate(props):
            if np.dtype(t).kind in "iu":
                info = np.iinfo(t)
                v = vals[:, k]
                if np.any(v != np.round(v)) or np.any((v < info.min) | (v > info.max)):
                    raise PlyError(f"property {name!r} value outside its {t} range after byte {start}")
        # round through the declared type so both encodings decode to the same values
        cols = {name: vals[:, k].astype(t).astype(float) for k, (name, t) in enumerate(props)}
    else:
        dt = np.dtype([(name, "<" + t) for name, t in props])
        need = n * dt.itemsize
        if len(data) - start < need:
            raise PlyError(f"truncated body at byte {len(data)}: expected {need} bytes after byte {start}")
        rec = np.frombuffer(data, dtype=dt, count=n, offset=start)
        cols = {name: rec[name].astype(float) for name in names}
    pos = np.stack([cols["x"], cols["y"], cols["z"]], axis=1) if n else np.zeros((0, 3))
    if all(c in cols for c in ("red", "green", "blue")):
        rgb = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1) / 255.0 if n else np.zeros((0, 3))
        if np.any(rgb < 0) or np.any(rgb > 1):
            raise PlyError("color channel outside 0..255")
        return ColoredPointCloud(pos, rgb, np.any(rgb > 0, axis=1))
    return ColoredPointCloud(pos)


# ---------------------------------------------------------------- PPM


def write_ppm(path, rgb: np.ndarray) -> None:
    img = np.round(np.clip(np.asarray(rgb, float), 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    """P6 8-bit image as H x W x 3 floats in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError("truncated PPM header")
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError("only binary P6 PPM is supported")
    w, h, maxval = (int(x) for x in fields[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    pos += 1
    body = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos) if len(data) - pos >= w * h * 3 else None
    if body is None:
        raise ValueError("truncated PPM body")
    return body.reshape(h, w, 3) / 255.0


# ---------------------------------------------------------------- colorization


@dataclass(frozen=True)
class CameraCalibration:
    K: np.ndarray  # 3 x 3 intrinsics
    T: RigidTransform  # scanner -> camera
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float).reshape(3, 3)
        if np.any(np.tril(K, -1) != 0) or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("intrinsics must be upper-triangular with positive focal lengths")
        if self.width < 1 or self.height < 1:
            raise ValueError("image resolution must be positive")
        object.__setattr__(self, "K", K)

    @classmethod
    def from_json(cls, text: str) -> "CameraCalibration":
        try:
            d = json.loads(text)
            return cls(np.asarray(d["K"], float).reshape(3, 3), RigidTransform.from_matrix(d["T"]),
                       int(d["width"]), int(d["height"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"invalid calibration: {e}") from None

    def to_json(self) -> str:
        return json.dumps({"K": self.K.reshape(-1).tolist(), "T": self.T.as_matrix().reshape(-1).tolist(),
                           "width": self.width, "height": self.height})


DEPTH_SLACK = 0.1  # m


def colorize_scan(cloud: ColoredPointCloud, image: np.ndarray, calib: CameraCalibration,
                  depth_slack: float = DEPTH_SLACK) -> ColoredPointCloud:
    """Color the points visible in ``image``.

    Points behind the camera or outside the frame stay uncolored. Per pixel
    (nearest integer coordinates) only points within ``depth_slack`` of the
    nearest depth take the pixel color.
    """
    image = np.asarray(image, dtype=float)
    if image.shape[:2] != (calib.height, calib.width):
        raise ValueError("image size does not match the calibration")
    n = len(cloud)
    colors = np.zeros((n, 3))
    mask = np.zeros(n, bool)
    if n == 0:
        return ColoredPointCloud(cloud.positions, colors, mask)
    X = calib.T.apply(cloud.positions)
    z = X[:, 2]
    front = z > 0
    uvw = X @ calib.K.T
    zs = np.where(front, z, 1.0)
    u = np.round(uvw[:, 0] / zs)
    v = np.round(uvw[:, 1] / zs)
    ok = front & (u >= 0) & (u < calib.width) & (v >= 0) & (v < calib.height)
    idx = np.flatnonzero(ok)
    pix = (v[idx] * calib.width + u[idx]).astype(np.int64)
    zbuf = np.full(calib.width * calib.height, np.inf)
    np.minimum.at(zbuf, pix, z[idx])
    vis = z[idx] <= zbuf[pix] + depth_slack
    sel = idx[vis]
    colors[sel] = image.reshape(-1, 3)[pix[vis]]
    mask[sel] = True
    return ColoredPointCloud(cloud.positions, np.clip(colors, 0.0, 1.0), mask)


# ---------------------------------------------------------------- synthetic pairs


@dataclass
class SyntheticPairSpec:
    n_points: int = 5000  # approximate points in the source view
    overlap: float = 0.7
    rotation_deg: float = 45.0  # maximum
    translation_m: float = 1.0  # maximum
    noise_sigma: float = 0.005
    color_noise: float = 0.01
    seed: int = 0
    exact_magnitudes: bool = False  # use the magnitudes as given instead of sampling up to them

    def __post_init__(self):
        if not 0.0 < self.overlap <= 1.0:
            raise ValueError("overlap must lie in (0, 1]")
        if self.n_points < 10:
            raise ValueError("n_points must be at least 10")
        if self.rotation_deg < 0 or self.translation_m < 0 or self.noise_sigma < 0 or self.color_noise < 0:
            raise ValueError("magnitudes and noise levels must be non-negative")


@dataclass
class SyntheticPair:
    source: ColoredPointCloud
    target: ColoredPointCloud
    T_gt: RigidTransform  # maps source coordinates into the target frame
    overlap: float  # audited
    spec: SyntheticPairSpec


@dataclass
class _Rect:
    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    colors: np.ndarray  # per tile, ny x nx x 3
    tile: float

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.e1, self.e2)))

    def sample(self, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        a, b = rng.random(n), rng.random(n)
        pts = self.origin + a[:, None] * self.e1 + b[:, None] * self.e2
        ny, nx = self.colors.shape[:2]
        ix = np.minimum((a * nx).astype(int), nx - 1)
        iy = np.minimum((b * ny).astype(int), ny - 1)
        return pts, self.colors[iy, ix]


def _palette(rng, n: int) -> np.ndarray:
    hsv = np.stack([rng.random(n), rng.uniform(0.45, 0.9, n), rng.uniform(0.35, 0.95, n)], axis=1)
    from .color import hsv_to_rgb
    return hsv_to_rgb(hsv)


def room_layout(rng, size=(4.0, 3.0, 2.2), n_boxes: int = 4) -> list[_Rect]:
    """Floor, four walls and a few boxes as rectangles; colors are placeholders until ``paint_layout``."""
    Lx, Ly, Lz = size
    rects = []

    def rect(o, e1, e2, tile):
        e1, e2 = np.asarray(e1, float), np.asarray(e2, float)
        nx = max(1, int(round(np.linalg.norm(e1) / tile)))
        ny = max(1, int(round(np.linalg.norm(e2) / tile)))
        rects.append(_Rect(np.asarray(o, float), e1, e2, np.zeros((ny, nx, 3)), tile))

    rect((0, 0, 0), (Lx, 0, 0), (0, Ly, 0), 0.8)
    rect((0, 0, 0), (Lx, 0, 0), (0, 0, Lz), 1.1)
    rect((0, Ly, 0), (Lx, 0, 0), (0, 0, Lz), 1.1)
    rect((0, 0, 0), (0, Ly, 0), (0, 0, Lz), 1.1)
    rect((Lx, 0, 0), (0, Ly, 0), (0, 0, Lz), 1.1)
    for _ in range(n_boxes):
        w, d, h = rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.9), rng.uniform(0.3, 1.2)
        x, y = rng.uniform(0.2, Lx - w - 0.2), rng.uniform(0.2, Ly - d - 0.2)
        big = 10.0  # one color per face
        rect((x, y, h), (w, 0, 0), (0, d, 0), big)
        rect((x, y, 0), (w, 0, 0), (0, 0, h), big)
        rect((x, y + d, 0), (w, 0, 0), (0, 0, h), big)
        rect((x, y, 0), (0, d, 0), (0, 0, h), big)
        rect((x + w, y, 0), (0, d, 0), (0, 0, h), big)
    return rects


def paint_layout(rects: list[_Rect], rng) -> list[_Rect]:
    out = []
    for r in rects:
        ny, nx = r.colors.shape[:2]
        out.append(_Rect(r.origin, r.e1, r.e2, _palette(rng, nx * ny).reshape(ny, nx, 3), r.tile))
    return out


def sample_layout(rects: list[_Rect], n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    area = np.array([r.area for r in rects])
    counts = rng.multinomial(n, area / area.sum())
    pts, cols = zip(*(r.sample(c, rng) for r, c in zip(rects, counts)))
    return np.concatenate(pts), np.concatenate(cols)


def measured_overlap(source: ColoredPointCloud, target: ColoredPointCloud, T_gt: RigidTransform,
                     radius: float) -> float:
    """Fraction of source points with a target point within ``radius`` after ``T_gt``."""
    if len(source) == 0 or len(target) == 0:
        return 0.0
    d, _ = cKDTree(target.positions).query(T_gt.apply(source.positions))
    return float(np.mean(d <= radius))


def _random_transform(rng, rot_deg: float, trans_m: float, exact: bool) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = np.deg2rad(rot_deg) * (1.0 if exact else rng.random())
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    t = d * trans_m * (1.0 if exact else rng.random())
    return RigidTransform(Rotation.from_rotvec(axis * ang).as_matrix(), t)


def _slab_views(s: np.ndarray, overlap: float, frac_a: float = 0.6):
    """Index sets A = {s <= a}, B = {s >= b} with |A & B| / |A| = overlap."""
    if overlap >= 1.0:
        allp = np.arange(len(s))
        return allp, allp
    a = np.quantile(s, frac_a)
    A = np.flatnonzero(s <= a)
    sa = np.sort(s[A])
    # overlap fraction is monotone in b; pick b as the matching order statistic of A
    k = int(round((1.0 - overlap) * len(sa)))
    k = min(max(k, 0), len(sa) - 1)
    b = sa[k]
    B = np.flatnonzero(s >= b)
    return A, B


def _noisy_views(rng, pts, cols, spec: SyntheticPairSpec, u: np.ndarray):
    # position noise is drawn once on the shared scene so that overlapping points coincide
    pts = pts + rng.normal(0.0, spec.noise_sigma, pts.shape)
    A, B = _slab_views(pts @ u, spec.overlap)

    def jitter(c):
        return np.clip(c + rng.normal(0.0, spec.color_noise, c.shape), 0.0, 1.0)

    return pts, A, B, jitter(cols[A]), jitter(cols[B])


def generate_pair(spec: SyntheticPairSpec) -> SyntheticPair:
    """A slab-cropped pair of views of one colored room; the source is moved by ``T_gt^-1``.

    Raises ``ValueError`` when the audited overlap misses the request by more than 0.05.
    """
    rng = np.random.default_rng(spec.seed)
    rects = paint_layout(room_layout(rng), rng)
    phi = rng.uniform(0, 2 * np.pi)
    u = np.array([np.cos(phi), np.sin(phi), 0.0])
    n_base = spec.n_points if spec.overlap >= 1.0 else int(round(spec.n_points / 0.6))
    pts, cols = sample_layout(rects, n_base, rng)
    pts, A, B, ca, cb = _noisy_views(rng, pts, cols, spec, u)
    T_gt = _random_transform(rng, spec.rotation_deg, spec.translation_m, spec.exact_magnitudes)
    source = ColoredPointCloud(T_gt.inverse().apply(pts[A]), ca)
    target = ColoredPointCloud(pts[B], cb)
    ov = measured_overlap(source, target, T_gt, max(2.0 * spec.noise_sigma, 1e-9))
    if abs(ov - spec.overlap) > 0.05:
        raise ValueError(f"infeasible overlap request: asked {spec.overlap}, audited {ov:.3f}")
    return SyntheticPair(source, target, T_gt, ov, spec)


def generate_twin_rooms(spec: SyntheticPairSpec, separation: float = 5.0) -> SyntheticPair:
    """Geometry-ambiguous fixture: the target holds two identical-shape rooms painted differently.

    The source is a view of the first room only, so geometry alone cannot tell
    which room it belongs to.
    """
    rng = np.random.default_rng(spec.seed)
    shape = room_layout(rng)
    room_a, room_b = paint_layout(shape, rng), paint_layout(shape, rng)
    phi = rng.uniform(0, 2 * np.pi)
    u = np.array([np.cos(phi), np.sin(phi), 0.0])
    n_base = spec.n_points if spec.overlap >= 1.0 else int(round(spec.n_points / 0.6))
    # identical sampling draws for both rooms: only the paint differs
    pts, cols_a = sample_layout(room_a, n_base, np.random.default_rng(spec.seed + 1))
    _, cols_b = sample_layout(room_b, n_base, np.random.default_rng(spec.seed + 1))
    pts, A, B, ca, cb = _noisy_views(rng, pts, cols_a, spec, u)
    cb2 = np.clip(cols_b[B] + rng.normal(0.0, spec.color_noise, (len(B), 3)), 0.0, 1.0)
    offset = np.array([separation, 0.0, 0.0]) + np.array([4.0, 0.0, 0.0])
    T_gt = _random_transform(rng, spec.rotation_deg, spec.translation_m, spec.exact_magnitudes)
    source = ColoredPointCloud(T_gt.inverse().apply(pts[A]), ca)
    target = ColoredPointCloud(np.concatenate([pts[B], pts[B] + offset]), np.concatenate([cb, cb2]))
    ov = measured_overlap(source, target, T_gt, max(2.0 * spec.noise_sigma, 1e-9))
    return SyntheticPair(source, target, T_gt, ov, spec)


def save_pair(pair: SyntheticPair, out_dir, format: str = "binary_little_endian") -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_ply(pair.source, os.path.join(out_dir, "source.ply"), format)
    write_ply(pair.target, os.path.join(out_dir, "target.ply"), format)
    meta = {"T_gt": pair.T_gt.as_matrix().reshape(-1).tolist(), "overlap": pair.overlap,
            "spec": {k: getattr(pair.spec, k) for k in pair.spec.__dataclass_fields__}}
    with open(os.path.join(out_dir, "pair.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
