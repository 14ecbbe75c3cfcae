"""File formats and synthetic data.

* PGM (P5) images, 8- or 16-bit; intensities are scaled to [0, 1] on load.
* ``FAST`` tensor container: ``b"FAST"``, version byte 1, rank byte, extents
  as little-endian uint32, payload as little-endian float64 in row-major order.
* Checkpoints: a directory with ``manifest.txt`` plus one container per
  parameter, momentum buffer and batch-norm statistic.
* Flat ``key=value`` configuration files.
* Piecewise-constant phantoms with known ground truth.
"""
from __future__ import annotations

import dataclasses
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

MAGIC = b"FAST"
VERSION = 1

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    """Malformed, truncated or unsupported file."""


# -- FAST tensor container ----------------------------------------------------

def encode_tensor(t) -> bytes:
    t = np.asarray(t, dtype=np.float64)
    if not 1 <= t.ndim <= 255:
        raise ValueError("tensor rank must be 1..255")
    head = MAGIC + bytes([VERSION, t.ndim]) + struct.pack(f"<{t.ndim}I", *t.shape)
    return head + np.ascontiguousarray(t, dtype="<f8").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 6:
        raise FormatError(f"truncated header at byte offset {len(buf)}")
    if buf[:4] != MAGIC:
        raise FormatError(f"unsupported magic {buf[:4]!r} at byte offset 0")
    if buf[4] != VERSION:
        raise FormatError(f"unsupported version {buf[4]} at byte offset 4")
    rank = buf[5]
    if rank == 0:
        raise FormatError("rank 0 at byte offset 5")
    end = 6 + 4 * rank
    if len(buf) < end:
        raise FormatError(f"truncated extents at byte offset {len(buf)}")
    shape = struct.unpack(f"<{rank}I", buf[6:end])
    n = int(np.prod(shape))
    if len(buf) < end + 8 * n:
        raise FormatError(f"truncated payload at byte offset {len(buf)}, expected {end + 8 * n} bytes")
    if len(buf) > end + 8 * n:
        raise FormatError(f"trailing data at byte offset {end + 8 * n}")
    return np.frombuffer(buf, dtype="<f8", count=n, offset=end).astype(np.float64).reshape(shape)


def save_tensor(path: PathLike, t) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path: PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# -- PGM ------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_pgm_raw(path: PathLike) -> tuple[np.ndarray, int]:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise FormatError(f"unsupported magic {buf[:2]!r} at byte offset 0 (need P5)")
    pos, vals = 2, []
    for _ in range(3):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise FormatError(f"malformed header at byte offset {pos}")
        try:
            vals.append(int(m.group(1)))
        except ValueError:
            raise FormatError(f"malformed header field at byte offset {m.start(1)}") from None
        pos = m.end()
    W, H, maxval = vals
    if W <= 0 or H <= 0 or not 0 < maxval < 65536:
        raise FormatError(f"invalid header values at byte offset {pos}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"missing header terminator at byte offset {pos}")
    pos += 1
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = pos + W * H * dtype.itemsize
    if len(buf) < need:
        raise FormatError(f"truncated payload at byte offset {len(buf)}, expected {need} bytes")
    data = np.frombuffer(buf, dtype=dtype, count=W * H, offset=pos).reshape(H, W)
    return data.astype(np.int64), maxval


def load_pgm(path: PathLike) -> np.ndarray:
    data, maxval = _read_pgm_raw(path)
    return data / float(maxval)


def save_pgm(path: PathLike, t, bits: int = 8) -> None:
    """Write an ``H x W`` tensor with values in [0, 1] (clipped) as P5."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 3 and t.shape[0] == 1:
        t = t[0]
    if t.ndim != 2:
        raise ValueError(f"PGM needs an H x W image, got shape {t.shape}")
    maxval = 255 if bits == 8 else 65535
    q = np.rint(np.clip(t, 0.0, 1.0) * maxval).astype(np.int64)
    _write_pgm_raw(path, q, maxval)


def _write_pgm_raw(path: PathLike, q: np.ndarray, maxval: int) -> None:
    H, W = q.shape
    dtype = "u1" if maxval < 256 else ">u2"
    Path(path).write_bytes(f"P5\n{W} {H}\n{maxval}\n".encode() + q.astype(dtype).tobytes())


def save_mask_pgm(path: PathLike, mask) -> None:
    """Labels are stored verbatim as 8-bit gray values."""
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() > 255:
        raise ValueError("mask labels must lie in [0, 255]")
    _write_pgm_raw(path, mask.astype(np.int64), 255)


def load_mask_pgm(path: PathLike) -> np.ndarray:
    data, _ = _read_pgm_raw(path)
    return data


def load_image(path: PathLike) -> np.ndarray:
    """PGM or FAST container, chosen by extension."""
    return load_tensor(path) if str(path).endswith(".fast") else load_pgm(path)


def load_mask(path: PathLike) -> np.ndarray:
    if str(path).endswith(".fast"):
        return np.rint(load_tensor(path)).astype(np.int64)
    return load_mask_pgm(path)


# -- key=value configs ----------------------------------------------------------

def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_kv(path: PathLike) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def _coerce(value: str, typ: Any):
    if typ in (bool, "bool"):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise FormatError(f"not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    if typ in ("Union[float, str]",):
        return value if value == "auto" else float(value)
    return value


def build_config(cls, kv: dict[str, str], prefix: str = "", strict: bool = False):
    """Instantiate dataclass ``cls`` from ``kv`` entries ``prefix + field``."""
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in kv.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        if name not in names:
            if strict:
                raise FormatError(f"unknown key {key!r} for {cls.__name__}")
            continue
        kwargs[name] = _coerce(value, names[name].type)
    return cls(**kwargs)


def dump_config(obj, prefix: str = "") -> str:
    return "".join(f"{prefix}{k}={v}\n" for k, v in dataclasses.asdict(obj).items())


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(directory: PathLike, store) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = ["# index\tname\tkind\tgroup\tshape\tmomentum"]
    for i, (name, p) in enumerate(store.items()):
        save_tensor(d / f"p{i:04d}.fast", p.value)
        save_tensor(d / f"p{i:04d}.mom.fast", p.momentum)
        shape = "x".join(map(str, p.value.shape))
        lines.append(f"{i}\t{name}\t{p.kind}\t{p.group}\t{shape}\tyes")
    for i, (site, st) in enumerate(store.bn.items()):
        save_tensor(d / f"bn{i:04d}.fast", np.stack([st.mean, st.var]))
        lines.append(f"bn{i}\t{site}\tbn_stats\tstats\t2x{len(st.mean)}\tno")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory: PathLike):
    from .net import autodiff as ad
    from .net.network import Param, ParamStore

    d = Path(directory)
    store = ParamStore()
    for line in (d / "manifest.txt").read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        idx, name, kind, group, shape, mom = line.split("\t")
        if kind == "bn_stats":
            arr = load_tensor(d / f"bn{int(idx[2:]):04d}.fast")
            st = ad.BNState(arr.shape[1])
            st.mean, st.var = arr[0].copy(), arr[1].copy()
            store.bn[name] = st
            continue
        i = int(idx)
        value = load_tensor(d / f"p{i:04d}.fast")
        expect = tuple(int(s) for s in shape.split("x"))
        if value.shape != expect:
            raise FormatError(f"{name}: manifest shape {expect} but file holds {value.shape}")
        momentum = load_tensor(d / f"p{i:04d}.mom.fast") if mom == "yes" else None
        store.params[name] = Param(value, kind, group, momentum=momentum)
    return store


# -- phantoms -------------------------------------------------------------------

@dataclass
class Shape:
    kind: str  # "disk": (row, col, radius); "rect": (top, left, height, width)
    geometry: tuple[float, ...]
    phase: int


@dataclass
class PhantomSpec:
    extents: tuple[int, int] = (64, 64)
    intensities: tuple[float, ...] = (0.2, 0.8)
    shapes: list[Shape] = field(default_factory=list)
    noise_std: float = 0.0
    blur_sigma: float = 0.0
    seed: int = 0

    @property
    def phases(self) -> int:
        return len(self.intensities)


def _validate_phantom(spec: PhantomSpec) -> None:
    H, W = spec.extents
    if not 2 <= spec.phases <= 4:
        raise ValueError("phantoms have 2..4 phases")
    if np.any(np.diff(spec.intensities) <= 0):
        raise ValueError("phase intensities must be distinct and ascending")
    for s in spec.shapes:
        if not 0 < s.phase < spec.phases:
            raise ValueError(f"shape phase {s.phase} outside 1..{spec.phases - 1}")
        if s.kind == "disk":
            r0, c0, rad = s.geometry
            if rad <= 0 or r0 - rad < 0 or c0 - rad < 0 or r0 + rad > H - 1 or c0 + rad > W - 1:
                raise ValueError(f"disk {s.geometry} is out of bounds for {H}x{W}")
        elif s.kind == "rect":
            top, left, h, w = (int(v) for v in s.geometry)
            if h <= 0 or w <= 0 or top < 0 or left < 0 or top + h > H or left + w > W:
                raise ValueError(f"rectangle {s.geometry} is out of bounds for {H}x{W}")
        else:
            raise ValueError(f"unknown shape kind {s.kind!r}")


def make_phantom(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Paint shapes in order onto phase 0, add Gaussian noise, then blur."""
    _validate_phantom(spec)
    H, W = spec.extents
    gt = np.zeros((H, W), dtype=np.int64)
    rows, cols = np.mgrid[0:H, 0:W]
    for s in spec.shapes:
        if s.kind == "disk":
            r0, c0, rad = s.geometry
            gt[(rows - r0) ** 2 + (cols - c0) ** 2 <= rad * rad] = s.phase
        else:
            top, left, h, w = (int(v) for v in s.geometry)
            gt[top:top + h, left:left + w] = s.phase
    img = np.asarray(spec.intensities, dtype=np.float64)[gt]
    if spec.noise_std > 0:
        img = img + spec.noise_std * np.random.default_rng(spec.seed).standard_normal((H, W))
    if spec.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, spec.blur_sigma, mode="nearest")
    return img, gt


def random_phantom_spec(extents: Sequence[int], intensities: Sequence[float], seed: int,
                        n_shapes: Optional[int] = None, noise_std: float = 0.05,
                        blur_sigma: float = 0.0) -> PhantomSpec:
    """Random disks and rectangles, at least one per foreground phase."""
    H, W = extents
    rng = np.random.default_rng(seed)
    phases = len(intensities)
    n_shapes = n_shapes if n_shapes is not None else phases
    shapes = []
    for i in range(n_shapes):
        phase = 1 + i % (phases - 1)
        if rng.random() < 0.5:
            rad = float(rng.integers(max(3, min(H, W) // 10), max(4, min(H, W) // 4)))
            r0 = float(rng.integers(int(rad), int(H - 1 - rad) + 1))
            c0 = float(rng.integers(int(rad), int(W - 1 - rad) + 1))
            shapes.append(Shape("disk", (r0, c0, rad), phase))
        else:
            h = int(rng.integers(max(4, H // 8), max(5, H // 2)))
            w = int(rng.integers(max(4, W // 8), max(5, W // 2)))
            shapes.append(Shape("rect", (int(rng.integers(0, H - h + 1)),
                                         int(rng.integers(0, W - w + 1)), h, w), phase))
    return PhantomSpec((H, W), tuple(intensities), shapes, noise_std, blur_sigma, seed)


def parse_phantom_spec(kv: dict[str, str]) -> tuple[PhantomSpec, int]:
    """Phantom spec from ``key=value`` entries; returns ``(spec, count)``.

    Keys: ``extents=H,W``, ``intensities=a,b,...``, ``noise=``, ``blur=``,
    ``seed=``, ``count=`` and ``shapes=disk:r,c,rad:phase;rect:t,l,h,w:phase``.
    Without ``shapes`` every phantom gets random shapes.
    """
    extents = tuple(int(v) for v in kv.get("extents", "64,64").split(","))
    intens = tuple(float(v) for v in kv.get("intensities", "0.2,0.8").split(","))
    shapes = []
    for item in filter(None, (s.strip() for s in kv.get("shapes", "").split(";"))):
        try:
            kind, geom, phase = item.split(":")
            shapes.append(Shape(kind, tuple(float(v) for v in geom.split(",")), int(phase)))
        except ValueError:
            raise FormatError(f"bad shape entry {item!r}") from None
    spec = PhantomSpec(extents, intens, shapes, float(kv.get("noise", 0.0)),
                       float(kv.get("blur", 0.0)), int(kv.get("seed", 0)))
    return spec, int(kv.get("count", 1))


def pad_to_multiple(x: np.ndarray, m: int) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Symmetric zero padding of the last two axes up to multiples of ``m``.

    Returns the padded array and ``(top, bottom, left, right)``.
    """
    H, W = x.shape[-2:]
    ph, pw = (-H) % m, (-W) % m
    pads = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    width = [(0, 0)] * (x.ndim - 2) + [(pads[0], pads[1]), (pads[2], pads[3])]
    return np.pad(x, width), pads


def crop_padding(x: np.ndarray, pads: tuple[int, int, int, int]) -> np.ndarray:
    t, b, l, r = pads
    H, W = x.shape[-2:]
    return x[..., t:H - b, l:W - r]
