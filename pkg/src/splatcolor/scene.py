"""Splat scene container and binary PLY reader/writer.

A scene keeps the *stored* parametrization (opacity logits, log scales) as its
canonical state so that a load/save cycle is bit exact; activated values are
exposed as properties.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, InvalidInputError, SchemaError
from .sh import degree_from_coeffs, num_coeffs

QUAT_TOL = 1e-6


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrices from ``(..., 4)`` quaternions in ``wxyz`` order (normalized here)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` for a single matrix, ``w >= 0``."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Gaussian2D:
    """One oriented planar Gaussian disk (activated parameters)."""

    center: np.ndarray
    rotation: np.ndarray
    scales: np.ndarray
    opacity: float
    sh: np.ndarray

    @property
    def frame(self) -> np.ndarray:
        """Columns are ``t_u, t_v, normal``."""
        return quat_to_rotmat(self.rotation)


@dataclass
class SplatScene:
    centers: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) wxyz
    log_scales: np.ndarray  # (N, 2)
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray  # (N, 3, K)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        n = len(self.centers)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 2)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        if self.sh.ndim != 3 or self.sh.shape[:2] != (n, 3):
            raise InvalidInputError(f"sh must have shape (N, 3, K), got {self.sh.shape} for N={n}")
        degree_from_coeffs(self.sh.shape[2])

    @classmethod
    def from_activated(cls, centers, rotations, scales, opacities, sh) -> SplatScene:
        opac = np.clip(np.asarray(opacities, dtype=np.float64), 1e-12, 1 - 1e-12)
        return cls(centers, rotations, np.log(scales), logit(opac), sh)

    def __len__(self) -> int:
        return len(self.centers)

    def __getitem__(self, i: int) -> Gaussian2D:
        return Gaussian2D(
            self.centers[i].copy(),
            self.rotations[i] / np.linalg.norm(self.rotations[i]),
            self.scales[i].copy(),
            float(self.opacities[i]),
            self.sh[i].copy(),
        )

    @property
    def sh_degree(self) -> int:
        return degree_from_coeffs(self.sh.shape[2])

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def frames(self) -> np.ndarray:
        """``(N, 3, 3)`` rotation matrices; columns are ``t_u, t_v, normal``."""
        return quat_to_rotmat(self.rotations)

    def with_sh(self, sh) -> SplatScene:
        return replace(self, sh=np.array(sh, dtype=np.float64), meta=dict(self.meta))

    def copy(self) -> SplatScene:
        return SplatScene(
            self.centers.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.sh.copy(),
            dict(self.meta),
        )

    def with_degree(self, degree: int) -> SplatScene:
        """Pad or truncate SH coefficients to ``degree``."""
        k = num_coeffs(degree)
        sh = np.zeros((len(self), 3, k))
        m = min(k, self.sh.shape[2])
        sh[:, :, :m] = self.sh[:, :, :m]
        return self.with_sh(sh)

    def validate(self) -> None:
        if len(self) == 0:
            raise InvalidInputError("scene is empty")
        for name in ("centers", "rotations", "log_scales", "opacity_logits", "sh"):
            arr = getattr(self, name)
            bad = ~np.isfinite(arr.reshape(len(self), -1)).all(axis=1)
            if bad.any():
                raise DataError(f"non-finite {name} at element {int(np.argmax(bad))}")
        norms = np.linalg.norm(self.rotations, axis=1)
        bad = np.abs(norms - 1.0) > QUAT_TOL
        if bad.any():
            raise DataError(f"quaternion not unit length at element {int(np.argmax(bad))}")

    def geometry_equal(self, other: SplatScene) -> bool:
        """Byte equality of everything except appearance."""
        return all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in ("centers", "rotations", "log_scales", "opacity_logits")
        )


# -- PLY ----------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply_vertices(path) -> np.ndarray:
    """Read the ``vertex`` element of a PLY file into a structured array."""
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise SchemaError(f"{path}: not a PLY file")
        fmt = None
        elements = []  # (name, count, [(prop, dtype)])
        while True:
            line = fh.readline()
            if not line:
                raise SchemaError(f"{path}: truncated header")
            tokens = line.decode("ascii", errors="replace").split()
            if not tokens or tokens[0] in ("comment", "obj_info"):
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if tokens[1] == "list":
                    raise SchemaError(f"{path}: list properties are not supported")
                if tokens[1] not in _PLY_TYPES:
                    raise SchemaError(f"{path}: unknown property type {tokens[1]}")
                elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
            elif tokens[0] == "end_header":
                break
        if fmt not in ("binary_little_endian", "binary_big_endian", "ascii"):
            raise SchemaError(f"{path}: unsupported PLY format {fmt}")
        endian = ">" if fmt == "binary_big_endian" else "<"
        for name, count, props in elements:
            dtype = np.dtype([(p, endian + t) for p, t in props])
            if fmt == "ascii":
                rows = [fh.readline().split() for _ in range(count)]
                data = np.array([tuple(r) for r in rows], dtype=dtype) if count else np.zeros(0, dtype)
            else:
                buf = fh.read(dtype.itemsize * count)
                if len(buf) != dtype.itemsize * count:
                    raise SchemaError(f"{path}: truncated {name} data")
                data = np.frombuffer(buf, dtype=dtype)
            if name == "vertex":
                return data.astype(dtype.newbyteorder("<"))
    raise SchemaError(f"{path}: no vertex element")


def write_ply_vertices(path, data: np.ndarray) -> None:
    names = {v: k for k, v in _PLY_TYPES.items() if k in ("char", "uchar", "short", "ushort", "int", "uint", "float", "double")}
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(data)}"]
    for name in data.dtype.names:
        header.append(f"property {names[data.dtype[name].str[1:]]} {name}")
    header.append("end_header")
    le = data.astype(data.dtype.newbyteorder("<"), copy=False)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(le.tobytes())


def _scene_dtype(k: int) -> np.dtype:
    fields = [(n, "<f4") for n in ("x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2")]
    fields += [(f"f_rest_{i}", "<f4") for i in range(3 * (k - 1))]
    fields += [("opacity", "<f4"), ("scale_0", "<f4"), ("scale_1", "<f4")]
    fields += [(f"rot_{i}", "<f4") for i in range(4)]
    return np.dtype(fields)


def save_scene_ply(scene: SplatScene, path) -> None:
    n, _, k = scene.sh.shape
    data = np.zeros(n, dtype=_scene_dtype(k))
    for i, c in enumerate("xyz"):
        data[c] = scene.centers[:, i]
    for c in range(3):
        data[f"f_dc_{c}"] = scene.sh[:, c, 0]
    # f_rest is channel-major: all channel-0 coefficients, then channel 1, ...
    rest = scene.sh[:, :, 1:].reshape(n, -1)
    for i in range(rest.shape[1]):
        data[f"f_rest_{i}"] = rest[:, i]
    data["opacity"] = scene.opacity_logits
    data["scale_0"] = scene.log_scales[:, 0]
    data["scale_1"] = scene.log_scales[:, 1]
    for i in range(4):
        data[f"rot_{i}"] = scene.rotations[:, i]
    write_ply_vertices(path, data)


def load_scene_ply(path) -> SplatScene:
    data = read_ply_vertices(path)
    names = set(data.dtype.names)
    required = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1",
                "rot_0", "rot_1", "rot_2", "rot_3"]
    for r in required:
        if r not in names:
            raise SchemaError(f"{path}: missing required property '{r}'")
    n_rest = 0
    while f"f_rest_{n_rest}" in names:
        n_rest += 1
    if n_rest % 3:
        raise SchemaError(f"{path}: f_rest count {n_rest} is not a multiple of 3")
    k = n_rest // 3 + 1
    try:
        degree_from_coeffs(k)
    except InvalidInputError as exc:
        raise SchemaError(f"{path}: {exc}") from None
    n = len(data)

    def col(name):
        return data[name].astype(np.float64)

    centers = np.stack([col("x"), col("y"), col("z")], axis=1)
    sh = np.zeros((n, 3, k))
    for c in range(3):
        sh[:, c, 0] = col(f"f_dc_{c}")
    if k > 1:
        rest = np.stack([col(f"f_rest_{i}") for i in range(n_rest)], axis=1)
        sh[:, :, 1:] = rest.reshape(n, 3, k - 1)
    rotations = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    log_scales = np.stack([col("scale_0"), col("scale_1")], axis=1)
    opacity = col("opacity")

    stacked = np.concatenate([centers, sh.reshape(n, -1), rotations, log_scales, opacity[:, None]], axis=1)
    bad = ~np.isfinite(stacked).all(axis=1)
    if bad.any():
        raise DataError(f"{path}: NaN or infinite field at element {int(np.argmax(bad))}")

    norms = np.linalg.norm(rotations, axis=1)
    if (norms == 0).any():
        raise DataError(f"{path}: zero quaternion at element {int(np.argmax(norms == 0))}")
    off = np.abs(norms - 1.0) > QUAT_TOL
    # only rows that are off get renormalized so valid files round-trip exactly
    rotations[off] /= norms[off, None]
    return SplatScene(centers, rotations, log_scales, opacity, sh)


def save_point_cloud_ply(path, positions, colors) -> None:
    """Colored points as ``x, y, z, red, green, blue`` (uchar colors)."""
    positions = np.asarray(positions, dtype=np.float64)
    data = np.zeros(len(positions), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                           ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    for i, c in enumerate("xyz"):
        data[c] = positions[:, i]
    rgb = np.clip(np.round(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
    for i, c in enumerate(("red", "green", "blue")):
        data[c] = rgb[:, i]
    write_ply_vertices(path, data)

