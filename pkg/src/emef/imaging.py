"""Images, binary PPM/PGM I/O, synthetic HDR scenes and the LDR capture model.

Images are float ``(H, W, 3)`` or ``(H, W)`` arrays with values in [0, 1].
"""
from __future__ import annotations

import logging
import os
import re
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import List, Union

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
DEFAULT_EV_OVER = 2.0
DEFAULT_EV_UNDER = -2.0
DEFAULT_GAMMA = 2.2

PathLike = Union[str, os.PathLike]


class ImageFormatError(ValueError):
    """Malformed or truncated PPM/PGM data, or an invalid image array."""


class PairError(ValueError):
    """Inconsistent exposure pair (size mismatch, wrong exposure ordering, missing files)."""


def validate_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3)):
        raise ImageFormatError(f"{name}: expected (H, W) or (H, W, 1|3), got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ImageFormatError(f"{name}: contains non-finite values")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ImageFormatError(f"{name}: values outside [0, 1]")
    return img


def to_luminance(img: np.ndarray) -> np.ndarray:
    """Rec. 601 luma ``0.299 R + 0.587 G + 0.114 B`` as an ``(H, W)`` array."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"to_luminance needs an (H, W, 3) image, got {img.shape}")
    return img @ LUMA.astype(img.dtype) if img.dtype in (np.float32, np.float64) else img @ LUMA


def luminance_or_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return to_luminance(img)
    if img.ndim == 3:
        return img[..., 0]
    return img


# ----------------------------------------------------------------- PPM / PGM
_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_header(buf: bytes):
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise ImageFormatError("truncated header")
        fields.append(m.group(1))
        pos = m.end()
    if pos >= len(buf) or buf[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise ImageFormatError("missing single whitespace after maxval")
    return fields, pos + 1


def load_ppm(path: PathLike) -> np.ndarray:
    """Read a binary P6 (RGB) or P5 (gray) file with maxval 255; bytes map to ``v / 255``."""
    buf = Path(path).read_bytes()
    fields, offset = _read_header(buf)
    magic = fields[0]
    if magic not in (b"P6", b"P5"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: non-integer header field") from None
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = buf[offset:offset + need]
    if len(payload) < need:
        raise ImageFormatError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return arr.reshape(height, width, 3) if channels == 3 else arr.reshape(height, width)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    img = validate_image(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    magic = b"P6" if img.ndim == 3 else b"P5"
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + quantize(img).tobytes()


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write to a temp file in the destination directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_ppm(img: np.ndarray, path: PathLike) -> None:
    atomic_write_bytes(path, encode_ppm(img))


# ----------------------------------------------------------------- pairs
@dataclass(frozen=True)
class ExposurePair:
    """Registered over-/under-exposed LDR captures of one static scene."""

    over: np.ndarray
    under: np.ndarray
    name: str = ""

    def __post_init__(self):
        over = validate_image(self.over, "over")
        under = validate_image(self.under, "under")
        if over.shape != under.shape:
            raise PairError(f"pair {self.name!r}: size mismatch {over.shape} vs {under.shape}")
        if over.mean() < under.mean():
            raise PairError(f"pair {self.name!r}: over-exposed image is darker than the under-exposed one")

    @property
    def shape(self):
        return self.over.shape

    def sources(self) -> List[np.ndarray]:
        return [self.over, self.under]


def make_pair(radiance: np.ndarray, ev_over: float = DEFAULT_EV_OVER, ev_under: float = DEFAULT_EV_UNDER,
              gamma: float = DEFAULT_GAMMA, name: str = "") -> ExposurePair:
    if not ev_over > ev_under:
        raise PairError(f"ev_over ({ev_over}) must exceed ev_under ({ev_under})")
    return ExposurePair(expose(radiance, ev_over, gamma), expose(radiance, ev_under, gamma), name)


def load_pair_dir(path: PathLike) -> List[ExposurePair]:
    """Load ``<name>_oe.ppm`` / ``<name>_ue.ppm`` pairs sorted by name; orphans are warned about."""
    root = Path(path)
    if not root.is_dir():
        raise PairError(f"{root} is not a directory")
    over, under = {}, {}
    for f in sorted(root.iterdir()):
        if f.name.endswith("_oe.ppm"):
            over[f.name[: -len("_oe.ppm")]] = f
        elif f.name.endswith("_ue.ppm"):
            under[f.name[: -len("_ue.ppm")]] = f
    orphans = sorted(set(over) ^ set(under))
    if orphans:
        listing = ", ".join((over.get(n) or under.get(n)).name for n in orphans)
        warnings.warn(f"{root}: ignoring unpaired file(s): {listing}", stacklevel=2)
    pairs = []
    for name in sorted(set(over) & set(under)):
        oe, ue = load_ppm(over[name]), load_ppm(under[name])
        if oe.shape != ue.shape:
            raise PairError(f"pair {name!r}: size mismatch {oe.shape} vs {ue.shape}")
        pairs.append(ExposurePair(oe, ue, name))
    return pairs


def save_pair(pair: ExposurePair, directory: PathLike, name: str) -> None:
    directory = Path(directory)
    save_ppm(pair.over, directory / f"{name}_oe.ppm")
    save_ppm(pair.under, directory / f"{name}_ue.ppm")


# ----------------------------------------------------------------- synthesis
def _smoothstep(edge: np.ndarray, softness: float) -> np.ndarray:
    return expit(edge / softness)


def synth_radiance(seed: int, size: int = 64, complexity: int = 6) -> np.ndarray:
    """Deterministic synthetic linear-radiance scene of shape ``(size, size, 3)``.

    Log-radiance is built from a smooth illumination ramp, soft-edged shapes of
    random albedo and brightness, a deep-shadow region, a bright light source
    and a little fine texture, which yields a p99/p1 ratio well above 100:1.
    """
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    if complexity < 1:
        raise ValueError("complexity must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)

    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5)
    log_r = rng.uniform(1.2, 2.2) * ramp * np.log(10)  # ~1-2 decades of illumination falloff
    log_r = np.repeat(log_r[..., None], 3, axis=2)
    log_r += np.log(rng.uniform(0.3, 0.8, 3))

    for _ in range(complexity):
        cx, cy = rng.uniform(0, 1, 2)
        rx, ry = rng.uniform(0.08, 0.3, 2)
        soft = rng.uniform(0.01, 0.05)
        if rng.random() < 0.5:
            d = 1.0 - np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
        else:
            d = np.minimum(rx - np.abs(xx - cx), ry - np.abs(yy - cy)) / max(rx, ry)
        mask = _smoothstep(d, soft)[..., None]
        albedo = np.log(rng.uniform(0.05, 1.0, 3))
        log_r = log_r * (1 - mask) + (log_r + albedo + rng.normal(0, 0.8)) * mask

    # deep shadow
    cx, cy = rng.uniform(0.1, 0.9, 2)
    d = 1.0 - np.sqrt(((xx - cx) / 0.22) ** 2 + ((yy - cy) / 0.18) ** 2)
    log_r -= 2.5 * _smoothstep(d, 0.04)[..., None]

    # bright source
    cx, cy = rng.uniform(0.15, 0.85, 2)
    r2 = ((xx - cx) ** 2 + (yy - cy) ** 2) / rng.uniform(0.004, 0.012)
    log_r += (np.log(rng.uniform(30, 120)) * np.exp(-r2))[..., None]

    # fine texture so gradient-driven fusion has detail to find
    fx, fy = rng.uniform(6, 18, 2)
    phase = rng.uniform(0, 2 * np.pi, 2)
    tex = np.sin(2 * np.pi * fx * xx + phase[0]) * np.sin(2 * np.pi * fy * yy + phase[1])
    log_r += (0.6 * tex + 0.1 * rng.standard_normal((size, size)))[..., None]

    return np.exp(log_r)


def expose(radiance: np.ndarray, ev: float, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """LDR capture: ``clamp(2**ev * r / r_ref, 0, 1) ** (1/gamma)``, ``r_ref`` = 90th percentile."""
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    r = np.asarray(radiance, dtype=np.float64)
    if np.any(r < 0) or not np.all(np.isfinite(r)):
        raise ValueError("radiance must be finite and non-negative")
    r_ref = np.percentile(r, 90)
    if r_ref <= 0:
        raise ValueError("degenerate radiance map (90th percentile is zero)")
    return np.clip((2.0 ** ev) * r / r_ref, 0.0, 1.0) ** (1.0 / gamma)


def dynamic_range(radiance: np.ndarray) -> float:
    lo, hi = np.percentile(radiance, [1, 99])
    return float(hi / lo)


def synth_pair(seed: int, size: int = 64, ev_over: float = DEFAULT_EV_OVER, ev_under: float = DEFAULT_EV_UNDER,
               gamma: float = DEFAULT_GAMMA, quantize_8bit: bool = True) -> ExposurePair:
    """Synthetic pair; by default quantised to 8 bits so it matches what PPM storage round-trips."""
    pair = make_pair(synth_radiance(seed, size), ev_over, ev_under, gamma, name=f"scene{seed:05d}")
    if quantize_8bit:
        pair = ExposurePair(quantize(pair.over) / 255.0, quantize(pair.under) / 255.0, pair.name)
    return pair
