"""Style-modulated UNet generator, conditional patch discriminator and checkpoint I/O."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from .autodiff import (
    Tensor,
    concat_channels,
    conv2d,
    conv2d_modulated,
    instance_norm,
    leaky_relu,
    linear,
    nearest_upsample_2x,
    tanh,
)
from .imaging import PathLike, atomic_write_bytes

SLOPE = 0.2
CHECKPOINT_MAGIC = b"EMEF"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


@dataclass(frozen=True)
class NetConfig:
    size: int = 64
    base: int = 32
    depth: int = 4
    n_styles: int = 4
    d_latent: int = 64
    eps: float = 1e-8
    max_channels: int = 128
    head_hidden: int = 32

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.size % (2 ** self.depth):
            raise ValueError(f"input size {self.size} must be divisible by 2^depth = {2 ** self.depth}")
        if self.n_styles < 1 or self.d_latent < 1 or self.base < 1:
            raise ValueError("n_styles, d_latent and base must be positive")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.head_hidden < 0:
            raise ValueError("head_hidden must be >= 0")

    def channels(self) -> List[int]:
        return [min(self.base * 2 ** i, self.max_channels) for i in range(self.depth)]

    def to_array(self) -> np.ndarray:
        return np.array([self.size, self.base, self.depth, self.n_styles, self.d_latent, self.eps,
                         self.max_channels, self.head_hidden], dtype=np.float64)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "NetConfig":
        vals = [float(v) for v in np.asarray(arr).reshape(-1)]
        if len(vals) != 8:
            raise CheckpointError(f"net config record has {len(vals)} fields, expected 8")
        size, base, depth, n, d, eps, maxc, hidden = vals
        # eps is stored as float32; 7 significant digits recover the configured decimal value
        eps = float(f"{np.float32(eps):.7g}")
        return cls(int(size), int(base), int(depth), int(n), int(d), eps, int(maxc), int(hidden))


def image_to_tensor(img: np.ndarray, dtype=np.float32) -> Tensor:
    """``(H, W, C)`` array -> ``(1, C, H, W)`` constant tensor."""
    arr = np.asarray(img, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[..., None]
    return Tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)[None]))


def tensor_to_image(t: Union[Tensor, np.ndarray]) -> np.ndarray:
    data = t.data if isinstance(t, Tensor) else t
    return np.ascontiguousarray(data[0].transpose(1, 2, 0)).astype(np.float64)


def _he(rng, shape, gain=2.0):
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(gain / fan_in)


class _Module:
    params: Dict[str, Tensor]

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def requires_grad_(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise CheckpointError(f"parameter mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}")
        for k, p in self.params.items():
            if tuple(state[k].shape) != p.shape:
                raise CheckpointError(f"{k}: shape {tuple(state[k].shape)} != expected {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)


class Generator(_Module):
    """UNet whose decoder blocks (all but the last) are style control blocks.

    The style code goes through a two-layer MLP to a latent vector; each style
    control block maps the latent to per-input-channel scales with its own
    affine, modulates and demodulates its kernel, then adds a bias and applies
    a leaky ReLU. The output head is a plain convolution and ``(tanh + 1) / 2``.
    """

    def __init__(self, config: NetConfig = NetConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.soft_labels = True  # how the codes were drawn in training; selects the reference codes
        rng = np.random.default_rng(seed)
        cfg = config
        ch = cfg.channels()
        p: Dict[str, np.ndarray] = {}
        p["mlp.0.weight"] = rng.standard_normal((cfg.d_latent, cfg.n_styles)) / np.sqrt(cfg.n_styles)
        p["mlp.0.bias"] = np.zeros(cfg.d_latent)
        p["mlp.1.weight"] = rng.standard_normal((cfg.d_latent, cfg.d_latent)) / np.sqrt(cfg.d_latent)
        p["mlp.1.bias"] = np.zeros(cfg.d_latent)
        cin = 6
        for i, c in enumerate(ch):
            p[f"enc.{i}.weight"] = _he(rng, (c, cin, 3, 3))
            p[f"enc.{i}.bias"] = np.zeros(c)
            p[f"enc.{i}.norm.weight"] = np.ones(c)
            p[f"enc.{i}.norm.bias"] = np.zeros(c)
            cin = c
        x_ch = ch[-1]
        for level in range(cfg.depth - 1, 0, -1):
            skip = ch[level - 1]
            cin_scb = x_ch + skip
            cout = ch[level - 1]
            p[f"scb.{level}.affine.weight"] = rng.standard_normal((cin_scb, cfg.d_latent)) / np.sqrt(cfg.d_latent)
            p[f"scb.{level}.affine.bias"] = np.ones(cin_scb)
            p[f"scb.{level}.weight"] = rng.standard_normal((cout, cin_scb, 3, 3))
            p[f"scb.{level}.bias"] = np.zeros(cout)
            x_ch = cout
        cin = x_ch + 6
        if cfg.head_hidden:
            p["head.hidden.weight"] = _he(rng, (cfg.head_hidden, cin, 3, 3))
            p["head.hidden.bias"] = np.zeros(cfg.head_hidden)
            cin = cfg.head_hidden
        p["head.weight"] = _he(rng, (3, cin, 3, 3), gain=1.0)
        p["head.bias"] = np.zeros(3)
        self.params = {k: Tensor(v.astype(self.dtype), requires_grad=True) for k, v in p.items()}

    # -- pieces ------------------------------------------------------------
    def map_style(self, code) -> Tensor:
        """Style code (length n) -> latent (length d_latent)."""
        code = code if isinstance(code, Tensor) else Tensor(np.asarray(code, dtype=self.dtype))
        if code.shape != (self.config.n_styles,):
            raise ValueError(f"style code must have length {self.config.n_styles}, got shape {code.shape}")
        P = self.params
        h = leaky_relu(linear(code, P["mlp.0.weight"], P["mlp.0.bias"]), SLOPE)
        return linear(h, P["mlp.1.weight"], P["mlp.1.bias"])

    def scb_forward(self, x: Tensor, latent: Tensor, level: int, demodulate: bool = True,
                    eps: Optional[float] = None, allow_zero_eps: bool = False) -> Tensor:
        P = self.params
        style = linear(latent, P[f"scb.{level}.affine.weight"], P[f"scb.{level}.affine.bias"])
        out = conv2d_modulated(x, P[f"scb.{level}.weight"], style, self.config.eps if eps is None else eps,
                               demodulate, b=P[f"scb.{level}.bias"], allow_zero_eps=allow_zero_eps)
        return leaky_relu(out, SLOPE)

    def _inputs(self, over, under) -> Tensor:
        size = self.config.size
        for name, img in (("over", over), ("under", under)):
            shape = img.shape[-2:] if isinstance(img, Tensor) else np.asarray(img).shape[:2]
            if tuple(shape) != (size, size):
                raise ValueError(f"{name} image is {tuple(shape)}, network expects {size}x{size}")
        o = over if isinstance(over, Tensor) else image_to_tensor(over, self.dtype)
        u = under if isinstance(under, Tensor) else image_to_tensor(under, self.dtype)
        return concat_channels([o, u])

    def forward_latent(self, over, under, latent: Tensor) -> Tensor:
        """Generator output for an explicit latent vector (bypasses the MLP)."""
        P = self.params
        x0 = self._inputs(over, under)
        skips = []
        x = x0
        for i in range(self.config.depth):
            x = conv2d(x, P[f"enc.{i}.weight"], P[f"enc.{i}.bias"], stride=2, pad=1)
            x = leaky_relu(instance_norm(x, P[f"enc.{i}.norm.weight"], P[f"enc.{i}.norm.bias"]), SLOPE)
            skips.append(x)
        for level in range(self.config.depth - 1, 0, -1):
            x = concat_channels([nearest_upsample_2x(x), skips[level - 1]])
            x = self.scb_forward(x, latent, level)
        x = concat_channels([nearest_upsample_2x(x), x0])
        if self.config.head_hidden:
            x = leaky_relu(conv2d(x, P["head.hidden.weight"], P["head.hidden.bias"], pad=1), SLOPE)
        x = conv2d(x, P["head.weight"], P["head.bias"], pad=1)
        return (tanh(x) + 1.0) * 0.5

    def forward(self, over, under, code) -> Tensor:
        """Fused image ``(1, 3, H, W)`` in [0, 1] for an exposure pair and a style code."""
        return self.forward_latent(over, under, self.map_style(code))

    __call__ = forward

    def fuse(self, over, under, code) -> np.ndarray:
        from .autodiff import no_grad
        with no_grad():
            return tensor_to_image(self.forward(over, under, code))


class Discriminator(_Module):
    """Conditional patch discriminator on (candidate, over, under); returns logits per patch."""

    def __init__(self, base: int = 32, n_blocks: int = 3, seed: int = 1, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.n_blocks = n_blocks
        p = {}
        cin = 9
        for i in range(n_blocks):
            c = base * 2 ** i
            p[f"block.{i}.weight"] = _he(rng, (c, cin, 3, 3))
            p[f"block.{i}.bias"] = np.zeros(c)
            if i > 0:
                p[f"block.{i}.norm.weight"] = np.ones(c)
                p[f"block.{i}.norm.bias"] = np.zeros(c)
            cin = c
        p["out.weight"] = _he(rng, (1, cin, 3, 3), gain=1.0)
        p["out.bias"] = np.zeros(1)
        self.params = {k: Tensor(v.astype(self.dtype), requires_grad=True) for k, v in p.items()}

    def forward(self, candidate, over, under) -> Tensor:
        def prep(img):
            return img if isinstance(img, Tensor) else image_to_tensor(img, self.dtype)

        cand, o, u = prep(candidate), prep(over), prep(under)
        if not (cand.shape[-2:] == o.shape[-2:] == u.shape[-2:]):
            raise ValueError(f"discriminator inputs differ in size: {cand.shape}, {o.shape}, {u.shape}")
        P = self.params
        x = concat_channels([cand, o, u])
        for i in range(self.n_blocks):
            x = conv2d(x, P[f"block.{i}.weight"], P[f"block.{i}.bias"], stride=2, pad=1)
            if i > 0:
                x = instance_norm(x, P[f"block.{i}.norm.weight"], P[f"block.{i}.norm.bias"])
            x = leaky_relu(x, SLOPE)
        return conv2d(x, P["out.weight"], P["out.bias"], pad=1)

    __call__ = forward


# ----------------------------------------------------------------- checkpoint format
def encode_tensors(tensors: Dict[str, np.ndarray]) -> bytes:
    """``EMEF`` | u32 version | u32 count | per tensor: u32 name len, name, u32 rank, u32 dims, f32 LE data."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_tensors(buf: bytes) -> Dict[str, np.ndarray]:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not an EMEF checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(buf):
                raise CheckpointError(f"truncated data for tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last tensor")
    return out


_CONFIG_KEY = "meta.net_config"
_SOFT_KEY = "meta.soft_labels"


def save_generator(gen: Generator, path: PathLike, extra: Optional[Dict[str, np.ndarray]] = None) -> None:
    tensors = {_CONFIG_KEY: gen.config.to_array(), _SOFT_KEY: np.array([float(gen.soft_labels)])}
    tensors.update(gen.state_dict())
    tensors.update(extra or {})
    atomic_write_bytes(path, encode_tensors(tensors))


def load_generator(path: PathLike, dtype=np.float32) -> Generator:
    from pathlib import Path

    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint {p} does not exist")
    tensors = decode_tensors(p.read_bytes())
    if _CONFIG_KEY not in tensors:
        raise CheckpointError("checkpoint has no network configuration")
    gen = Generator(NetConfig.from_array(tensors.pop(_CONFIG_KEY)), dtype=dtype)
    if _SOFT_KEY in tensors:
        gen.soft_labels = bool(tensors.pop(_SOFT_KEY)[0])
    gen.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("meta.")})
    return gen


def set_requires_grad(modules: Iterable[_Module], flag: bool) -> None:
    for m in modules:
        m.requires_grad_(flag)


def mean_abs_diff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(a) - np.asarray(b))))


def distinct_codes(n: int) -> Sequence[np.ndarray]:
    return [np.eye(n)[i] for i in range(n)]
