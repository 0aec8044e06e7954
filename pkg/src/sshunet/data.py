"""Volume ingestion: synthetic phantoms, NIfTI-1 / SSHV readers, windowing,
patch sampling and augmentation.

Volumes are plain numpy arrays: intensity ``(1, X, Y, Z)`` float32 and labels
``(X, Y, Z)`` int. Tensors only appear once a batch enters the network.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError, SpecError, UnsupportedError

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib


@dataclass
class VolumeRecord:
    intensity: np.ndarray
    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        if self.intensity.ndim == 3:
            self.intensity = self.intensity[None]
        if self.intensity.shape[1:] != self.labels.shape:
            raise ArgumentError(
                f"intensity {self.intensity.shape[1:]} and labels {self.labels.shape} differ in shape"
            )
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ArgumentError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self):
        return self.labels.shape


# ---------------------------------------------------------------- phantoms

PRIMITIVE_KINDS = ("sphere", "ellipsoid", "cylinder")


@dataclass
class Primitive:
    """A solid shape. ``radii``: sphere ``(r,)``, ellipsoid ``(rx, ry, rz)``,
    cylinder ``(r, half_length)`` with its axis along ``axis``."""

    kind: str
    class_id: int
    center: tuple
    radii: tuple
    axis: int = 0

    def half_extents(self):
        if self.kind == "sphere":
            return (self.radii[0],) * 3
        if self.kind == "ellipsoid":
            return tuple(self.radii)
        r, half = self.radii
        return tuple(half if a == self.axis else r for a in range(3))

    def mask(self, grid):
        d = [g - c for g, c in zip(grid, self.center)]
        if self.kind == "sphere":
            return d[0] ** 2 + d[1] ** 2 + d[2] ** 2 <= self.radii[0] ** 2
        if self.kind == "ellipsoid":
            return sum((di / ri) ** 2 for di, ri in zip(d, self.radii)) <= 1.0
        r, half = self.radii
        radial = sum(d[a] ** 2 for a in range(3) if a != self.axis)
        return (radial <= r**2) & (np.abs(d[self.axis]) <= half)


@dataclass
class PhantomSpec:
    extent: int
    num_classes: int
    primitives: list = field(default_factory=list)
    intensities: tuple = (0.0, 1.0, 2.0)
    noise_sigma: float = 0.1
    seed: int = 0
    spacing: tuple = (1.0, 1.0, 1.0)

    def validate(self):
        problems = []
        if len(self.intensities) != self.num_classes:
            problems.append(f"need {self.num_classes} class intensities, got {len(self.intensities)}")
        for i, p in enumerate(self.primitives):
            if p.kind not in PRIMITIVE_KINDS:
                problems.append(f"primitive {i}: unknown kind {p.kind!r}")
                continue
            if not 1 <= p.class_id < self.num_classes:
                problems.append(f"primitive {i}: class id {p.class_id} not in [1, {self.num_classes})")
            for c, h in zip(p.center, p.half_extents()):
                if c - h < 0 or c + h > self.extent - 1:
                    problems.append(f"primitive {i} ({p.kind}) leaves the {self.extent}^3 volume")
                    break
        if problems:
            raise SpecError("; ".join(problems))
        return self


def generate_phantom(spec, id=None):
    """Rasterize ``spec``: later primitives overwrite earlier ones; intensity = class mean + noise."""
    spec.validate()
    n = spec.extent
    grid = np.meshgrid(*(np.arange(n, dtype=np.float64),) * 3, indexing="ij")
    labels = np.zeros((n, n, n), dtype=np.int64)
    for p in spec.primitives:
        labels[p.mask(grid)] = p.class_id
    rng = np.random.default_rng(spec.seed)
    means = np.asarray(spec.intensities, dtype=np.float64)
    intensity = means[labels] + spec.noise_sigma * rng.standard_normal(labels.shape)
    return VolumeRecord(
        intensity.astype(np.float32)[None],
        labels,
        spec.spacing,
        id if id is not None else f"phantom-{spec.seed}",
    )


def _place(rng, extent, half_extents, placed, margin=1.0, tries=200):
    """Rejection-sample a center that keeps the shape inside and apart from ``placed``."""
    for _ in range(tries):
        center = tuple(float(rng.uniform(h, extent - 1 - h)) for h in half_extents)
        reach = max(half_extents)
        if all(np.linalg.norm(np.subtract(center, c)) > reach + r + margin for c, r in placed):
            return center
    return None


def _layout(rng, extent, make_shapes, attempts=100):
    """Place the shapes from ``make_shapes(rng)`` without overlap, redrawing the whole layout on failure."""
    for _ in range(attempts):
        prims, placed = make_shapes(rng), []
        for p in prims:
            p.center = _place(rng, extent, p.half_extents(), placed)
            if p.center is None:
                break
            placed.append((p.center, max(p.half_extents())))
        else:
            return prims
    raise SpecError(f"could not lay out the requested shapes in {extent}^3")


def slice_ambiguous_spec(extent=16, seed=0, n_objects=2, radius=(2.0, 3.5), noise_sigma=0.1):
    """Spheres (class 1) and equal-radius cylinders along axis 0 (class 2) of equal intensity.

    Slicing along axis 0 both show disks, so a single slice cannot tell them
    apart; only inter-slice context (how the disk radius changes) can.
    """

    def shapes(rng):
        out = []
        for _ in range(n_objects):
            r = float(rng.uniform(*radius))
            if rng.random() < 0.5:
                out.append(Primitive("sphere", 1, (0, 0, 0), (r,)))
            else:
                out.append(Primitive("cylinder", 2, (0, 0, 0), (r, r), axis=0))
        return out

    prims = _layout(np.random.default_rng(seed), extent, shapes)
    return PhantomSpec(extent, 3, prims, (0.0, 1.0, 1.0), noise_sigma, seed)


def organ_spec(extent=16, seed=0, noise_sigma=0.1):
    """Easy preset: one sphere (class 1) and one ellipsoid (class 2) with distinct intensities."""

    def shapes(rng):
        sphere = Primitive("sphere", 1, (0, 0, 0), (float(rng.uniform(2.0, 3.5)),))
        radii = tuple(float(v) for v in rng.uniform(2.0, 3.5, size=3))
        return [sphere, Primitive("ellipsoid", 2, (0, 0, 0), radii)]

    prims = _layout(np.random.default_rng(seed), extent, shapes)
    return PhantomSpec(extent, 3, prims, (0.0, 1.0, 2.0), noise_sigma, seed)


PRESETS = {"slice_ambiguous": slice_ambiguous_spec, "organs": organ_spec}


def load_phantom_spec(path):
    """Read a phantom spec from a TOML file with ``[[primitive]]`` tables."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    prims = [
        Primitive(
            p["kind"], int(p["class_id"]), tuple(p["center"]), tuple(p["radii"]), int(p.get("axis", 0))
        )
        for p in raw.pop("primitive", [])
    ]
    known = {"extent", "num_classes", "intensities", "noise_sigma", "seed", "spacing"}
    unknown = set(raw) - known
    if unknown:
        raise SpecError(f"unknown phantom keys: {', '.join(sorted(unknown))}")
    spec = PhantomSpec(primitives=prims, **raw)
    spec.intensities = tuple(spec.intensities)
    spec.spacing = tuple(spec.spacing)
    return spec.validate()


# ---------------------------------------------------------------- NIfTI-1

NIFTI_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]
NIFTI_HEADER_SIZE = 348

# datatype code -> (numpy kind, bitpix)
NIFTI_DTYPES = {2: ("u1", 8), 4: ("i2", 16), 16: ("f4", 32)}


def nifti_header_dtype(byteorder="<"):
    return np.dtype(NIFTI_HEADER_FIELDS).newbyteorder(byteorder)


def read_nifti1_header(blob):
    """Decode the 348-byte header; endianness is detected from ``sizeof_hdr``."""
    if len(blob) < NIFTI_HEADER_SIZE:
        raise FormatError(f"NIfTI header needs {NIFTI_HEADER_SIZE} bytes, got {len(blob)}")
    if struct.unpack("<i", blob[:4])[0] == NIFTI_HEADER_SIZE:
        order = "<"
    elif struct.unpack(">i", blob[:4])[0] == NIFTI_HEADER_SIZE:
        order = ">"
    else:
        raise FormatError("sizeof_hdr is not 348 in either byte order")
    hdr = np.frombuffer(blob[:NIFTI_HEADER_SIZE], dtype=nifti_header_dtype(order))[0]
    magic = bytes(hdr["magic"]).rstrip(b"\x00")
    if magic not in (b"n+1", b"ni1"):
        raise FormatError(f"bad NIfTI magic {magic!r}")
    return hdr, order


def read_nifti1(path):
    """Return ``(array indexed [x, y, z], spacing, header)`` for an uncompressed 3D NIfTI-1 file."""
    path = Path(path)
    blob = path.read_bytes()
    hdr, order = read_nifti1_header(blob)
    dim = [int(d) for d in hdr["dim"]]
    if not 3 <= dim[0] <= 7 or any(d > 1 for d in dim[4 : dim[0] + 1]):
        raise UnsupportedError(f"only 3D volumes are supported, dim = {dim}")
    shape = tuple(dim[1:4])
    code = int(hdr["datatype"])
    if code not in NIFTI_DTYPES:
        raise UnsupportedError(f"unsupported NIfTI datatype {code}")
    dtype = np.dtype(NIFTI_DTYPES[code][0]).newbyteorder(order)
    if bytes(hdr["magic"]).rstrip(b"\x00") == b"ni1":
        blob = path.with_suffix(".img").read_bytes()
    offset = int(hdr["vox_offset"])
    count = int(np.prod(shape))
    if offset + count * dtype.itemsize > len(blob):
        raise FormatError(f"{path}: voxel data truncated")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape, order="F")
    data = data.astype(dtype.newbyteorder("="))
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if np.isfinite(slope) and slope != 0 and (slope, inter) != (1.0, 0.0):
        data = data.astype(np.float32) * np.float32(slope) + np.float32(inter)
    spacing = tuple(float(abs(p)) for p in hdr["pixdim"][1:4])
    return data, spacing, hdr


def parse_nifti1(path, label_path=None, id=None):
    """Load an intensity volume (and optionally its label volume) into a :class:`VolumeRecord`."""
    data, spacing, _ = read_nifti1(path)
    if label_path is not None:
        labels, _, _ = read_nifti1(label_path)
        labels = np.rint(labels).astype(np.int64)
    else:
        labels = np.zeros(data.shape, dtype=np.int64)
    return VolumeRecord(data.astype(np.float32)[None], labels, spacing, id or Path(path).stem)


def write_nifti1(path, array, spacing=(1.0, 1.0, 1.0), byteorder="<", scl_slope=1.0, scl_inter=0.0):
    """Write a single-file (``n+1``) NIfTI-1 volume; dtype must be uint8, int16 or float32."""
    array = np.asarray(array)
    codes = {np.dtype(v[0]): k for k, v in NIFTI_DTYPES.items()}
    code = codes.get(array.dtype.newbyteorder("="))
    if code is None:
        raise UnsupportedError(f"cannot write dtype {array.dtype}")
    hdr = np.zeros((), dtype=nifti_header_dtype(byteorder))
    hdr["sizeof_hdr"] = NIFTI_HEADER_SIZE
    hdr["dim"] = [3, *array.shape, 1, 1, 1, 1]
    hdr["datatype"] = code
    hdr["bitpix"] = NIFTI_DTYPES[code][1]
    hdr["pixdim"] = [1.0, *spacing, 1.0, 1.0, 1.0, 1.0]
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = scl_slope
    hdr["scl_inter"] = scl_inter
    hdr["xyzt_units"] = 2  # mm
    hdr["magic"] = b"n+1"
    payload = array.astype(array.dtype.newbyteorder(byteorder)).tobytes(order="F")
    Path(path).write_bytes(hdr.tobytes() + b"\x00" * 4 + payload)


# ---------------------------------------------------------------- SSHV raw

SSHV_MAGIC = b"SSHV"
SSHV_VERSION = 1
SSHV_DTYPES = {0: "u1", 1: "i2", 2: "f4", 3: "i4"}


def write_sshv(path, array, spacing=(1.0, 1.0, 1.0)):
    """Layout: b"SSHV", u32 version, u32 dims[3], f32 spacing[3], u8 dtype code, LE C-order payload."""
    array = np.asarray(array)
    codes = {np.dtype(v): k for k, v in SSHV_DTYPES.items()}
    code = codes.get(array.dtype.newbyteorder("="))
    if code is None or array.ndim != 3:
        raise UnsupportedError(f"SSHV stores 3D u1/i2/f4/i4 arrays, got {array.dtype} {array.shape}")
    head = SSHV_MAGIC + struct.pack("<I3I3fB", SSHV_VERSION, *array.shape, *spacing, code)
    Path(path).write_bytes(head + array.astype(np.dtype(SSHV_DTYPES[code]).newbyteorder("<")).tobytes())


def read_sshv(path):
    blob = Path(path).read_bytes()
    size = 4 + struct.calcsize("<I3I3fB")
    if len(blob) < size or blob[:4] != SSHV_MAGIC:
        raise FormatError(f"{path}: not an SSHV file")
    version, x, y, z, sx, sy, sz, code = struct.unpack("<I3I3fB", blob[4:size])
    if version != SSHV_VERSION:
        raise FormatError(f"{path}: unsupported SSHV version {version}")
    if code not in SSHV_DTYPES:
        raise UnsupportedError(f"{path}: unknown SSHV dtype code {code}")
    dtype = np.dtype(SSHV_DTYPES[code]).newbyteorder("<")
    count = x * y * z
    if len(blob) < size + count * dtype.itemsize:
        raise FormatError(f"{path}: payload truncated")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=size).reshape(x, y, z)
    return data.astype(dtype.newbyteorder("=")), (sx, sy, sz)


def save_record(rec, directory):
    """Write ``<id>_img.sshv`` and ``<id>_lbl.sshv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_sshv(directory / f"{rec.id}_img.sshv", rec.intensity[0].astype(np.float32), rec.spacing)
    write_sshv(directory / f"{rec.id}_lbl.sshv", rec.labels.astype(np.int32), rec.spacing)


def load_records(directory):
    """Load every ``*_img.{sshv,nii}`` / ``*_lbl.*`` pair in ``directory``, sorted by id."""
    directory = Path(directory)
    out = []
    for img in sorted(directory.glob("*_img.*")):
        rid, ext = img.name[: -len("_img" + img.suffix)], img.suffix
        lbl = directory / f"{rid}_lbl{ext}"
        if ext == ".sshv":
            data, spacing = read_sshv(img)
            labels = read_sshv(lbl)[0] if lbl.exists() else np.zeros(data.shape, np.int64)
            out.append(VolumeRecord(data.astype(np.float32)[None], labels.astype(np.int64), spacing, rid))
        elif ext == ".nii":
            out.append(parse_nifti1(img, lbl if lbl.exists() else None, rid))
    return out


# ---------------------------------------------------------------- preprocessing

AMOS_WINDOW = (-991.0, 362.0)
BTCV_WINDOW = (-175.0, 250.0)


def hu_window(v, lo, hi):
    """Clamp to ``[lo, hi]`` and map linearly onto ``[0, 1]``."""
    if not lo < hi:
        raise ArgumentError(f"window needs lo < hi, got [{lo}, {hi}]")
    v = np.asarray(v, dtype=np.float64)
    return ((np.clip(v, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def sample_patch(rec, extent, rng, fg_bias=0.0):
    """Crop a cubic patch. With probability ``fg_bias`` it is centred on a random foreground voxel."""
    shape = rec.shape
    if any(extent > n for n in shape):
        raise ArgumentError(f"patch extent {extent} exceeds volume shape {shape}")
    corner = None
    if fg_bias > 0 and rng.random() < fg_bias:
        fg = np.argwhere(rec.labels > 0)
        if len(fg):
            v = fg[rng.integers(len(fg))]
            corner = [int(np.clip(c - extent // 2, 0, n - extent)) for c, n in zip(v, shape)]
    if corner is None:
        corner = [int(rng.integers(0, n - extent + 1)) for n in shape]
    sl = tuple(slice(c, c + extent) for c in corner)
    return rec.intensity[(slice(None),) + sl].copy(), rec.labels[sl].copy()


@dataclass
class AugmentConfig:
    p_flip: float = 0.2
    p_rotate: float = 0.2
    p_intensity_scale: float = 0.5
    p_intensity_shift: float = 0.5
    scale_range: tuple = (0.9, 1.1)
    shift_range: tuple = (-0.1, 0.1)

    def __post_init__(self):
        for name in ("p_flip", "p_rotate", "p_intensity_scale", "p_intensity_shift"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ArgumentError(f"{name} must lie in [0, 1]")


ROTATION_PLANES = ((0, 1), (0, 2), (1, 2))


def flip(img, lbl, axis):
    return np.flip(img, axis=axis + 1).copy(), np.flip(lbl, axis=axis).copy()


def rotate90(img, lbl, k, plane):
    a, b = plane
    return np.rot90(img, k, axes=(a + 1, b + 1)).copy(), np.rot90(lbl, k, axes=(a, b)).copy()


def augment(img, lbl, cfg, rng):
    """Random flip / 90-degree rotation (both volumes) and intensity scale / shift (image only)."""
    if rng.random() < cfg.p_flip:
        img, lbl = flip(img, lbl, int(rng.integers(3)))
    if rng.random() < cfg.p_rotate:
        plane = ROTATION_PLANES[int(rng.integers(3))]
        img, lbl = rotate90(img, lbl, int(rng.integers(1, 4)), plane)
    if rng.random() < cfg.p_intensity_scale:
        img = img * np.float32(rng.uniform(*cfg.scale_range))
    if rng.random() < cfg.p_intensity_shift:
        img = img + np.float32(rng.uniform(*cfg.shift_range))
    return img, lbl
