"""Patch tokenisation, a small single-head transformer encoder and the
frozen stub embedders that stand in for the pretrained image/text towers."""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError


@dataclass(frozen=True)
class TokenGridSpec:
    input_hw: tuple[int, int]
    patch_hw: tuple[int, int] = (32, 32)
    stride_hw: tuple[int, int] = (16, 24)

    def __post_init__(self):
        for name in ("input_hw", "patch_hw", "stride_hw"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if min(self.stride_hw) < 1 or min(self.patch_hw) < 1:
            raise InvalidInputError("patch and stride sizes must be >= 1")


def token_grid(spec: TokenGridSpec) -> tuple[int, int, int]:
    """Return (n_rows, n_cols, n_tokens) of valid patch placements."""
    (ir, ic), (pr, pc), (sr, sc) = spec.input_hw, spec.patch_hw, spec.stride_hw
    if pr > ir or pc > ic:
        raise InvalidInputError(f"patch {spec.patch_hw} larger than input {spec.input_hw}")
    rows = 1 + (ir - pr) // sr
    cols = 1 + (ic - pc) // sc
    return rows, cols, rows * cols


@dataclass
class EncoderParams:
    """Named tensors of one encoder plus the grid they were built for.

    Tensor names: ``patch_proj`` (patch_area x width), ``positional``
    (n_tokens x width), ``blocks.<i>.*`` and ``out_proj`` (width x dim).
    """

    spec: TokenGridSpec
    tensors: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)

    @property
    def depth(self) -> int:
        return len({k.split(".")[1] for k in self.tensors if k.startswith("blocks.")})

    @property
    def width(self) -> int:
        return self.tensors["patch_proj"].shape[1]

    @property
    def dim(self) -> int:
        return self.tensors["out_proj"].shape[1]

    def clone(self, dtype: torch.dtype | None = None) -> "EncoderParams":
        return EncoderParams(self.spec, OrderedDict(
            (k, v.detach().clone().to(dtype or v.dtype)) for k, v in self.tensors.items()))

    def requires_grad_(self, flag: bool = True) -> "EncoderParams":
        for v in self.tensors.values():
            v.requires_grad_(flag)
        return self

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]


_BLOCK_SHAPES = (
    ("ln1.weight", lambda w: (w,)), ("ln1.bias", lambda w: (w,)),
    ("attn.qkv", lambda w: (w, 3 * w)), ("attn.qkv_bias", lambda w: (3 * w,)),
    ("attn.out", lambda w: (w, w)), ("attn.out_bias", lambda w: (w,)),
    ("ln2.weight", lambda w: (w,)), ("ln2.bias", lambda w: (w,)),
    ("mlp.fc1", lambda w: (w, 4 * w)), ("mlp.fc1_bias", lambda w: (4 * w,)),
    ("mlp.fc2", lambda w: (4 * w, w)), ("mlp.fc2_bias", lambda w: (w,)),
)


def init_encoder(spec: TokenGridSpec, seed: int, width: int = 64, depth: int = 2,
                 dim: int = 32, dtype: torch.dtype = torch.float32) -> EncoderParams:
    """Seeded ViT-style initialisation (truncated-free normal, std 0.02)."""
    gen = torch.Generator().manual_seed(int(seed))
    _, _, n_tokens = token_grid(spec)
    patch_area = spec.patch_hw[0] * spec.patch_hw[1]

    def normal(*shape, std=0.02):
        return torch.randn(*shape, generator=gen, dtype=torch.float64).mul_(std).to(dtype)

    t: OrderedDict[str, torch.Tensor] = OrderedDict()
    t["patch_proj"] = normal(patch_area, width, std=1.0 / math.sqrt(patch_area))
    t["positional"] = normal(n_tokens, width)
    for i in range(depth):
        for name, shape_fn in _BLOCK_SHAPES:
            shape = shape_fn(width)
            if name.endswith("weight"):
                val = torch.ones(shape, dtype=dtype)
            elif len(shape) == 1:
                val = torch.zeros(shape, dtype=dtype)
            else:
                val = normal(*shape)
            t[f"blocks.{i}.{name}"] = val
    t["out_proj"] = normal(width, dim, std=1.0 / math.sqrt(width))
    return EncoderParams(spec, t)


def extract_patches(m: torch.Tensor, spec: TokenGridSpec) -> torch.Tensor:
    """(..., rows, cols) -> (..., n_tokens, patch_area), grid in row-major order."""
    (pr, pc), (sr, sc) = spec.patch_hw, spec.stride_hw
    p = m.unfold(-2, pr, sr).unfold(-2, pc, sc)
    return p.reshape(*p.shape[:-4], p.shape[-4] * p.shape[-3], pr * pc)


def _as_tensor(m, dtype) -> torch.Tensor:
    if isinstance(m, torch.Tensor):
        return m.to(dtype)
    return torch.as_tensor(np.asarray(m), dtype=dtype)


def patch_embed(m, spec: TokenGridSpec, params: EncoderParams,
                positional: torch.Tensor | None = None) -> torch.Tensor:
    """Project every patch and add its positional row.

    ``m`` may carry leading batch dimensions; its last two must equal
    ``spec.input_hw``.
    """
    proj = params["patch_proj"]
    x = _as_tensor(m, proj.dtype)
    if tuple(x.shape[-2:]) != spec.input_hw:
        raise InvalidInputError(f"input shape {tuple(x.shape[-2:])} != spec {spec.input_hw}")
    pos = params["positional"] if positional is None else positional
    if pos.shape[0] != token_grid(spec)[2]:
        raise InvalidInputError("positional table does not match the token grid")
    return extract_patches(x, spec) @ proj + pos


def _block(x: torch.Tensor, params: EncoderParams, i: int) -> torch.Tensor:
    p = lambda name: params[f"blocks.{i}.{name}"]  # noqa: E731
    width = x.shape[-1]
    h = F.layer_norm(x, (width,), p("ln1.weight"), p("ln1.bias"))
    q, k, v = (h @ p("attn.qkv") + p("attn.qkv_bias")).split(width, dim=-1)
    att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(width), dim=-1)
    x = x + (att @ v) @ p("attn.out") + p("attn.out_bias")
    h = F.layer_norm(x, (width,), p("ln2.weight"), p("ln2.bias"))
    return x + F.gelu(h @ p("mlp.fc1") + p("mlp.fc1_bias")) @ p("mlp.fc2") + p("mlp.fc2_bias")


def encode_unnormalized(tokens: torch.Tensor, params: EncoderParams) -> torch.Tensor:
    if tokens.shape[-2] == 0:
        raise InvalidInputError("cannot encode an empty token sequence")
    x = tokens
    for i in range(params.depth):
        x = _block(x, params, i)
    return x.mean(dim=-2) @ params["out_proj"]


def encode(tokens: torch.Tensor, params: EncoderParams) -> torch.Tensor:
    """Blocks, mean-pool, output projection and L2 normalisation.

    Works on ``(n_tokens, width)`` or batched ``(..., n_tokens, width)``.
    """
    z = encode_unnormalized(tokens, params)
    return z / z.norm(dim=-1, keepdim=True)


def encode_matrix(m, params: EncoderParams) -> torch.Tensor:
    return encode(patch_embed(m, params.spec, params), params)


def segment_spec(spec: TokenGridSpec, seg_rows: int) -> TokenGridSpec:
    return TokenGridSpec((seg_rows, spec.input_hw[1]), spec.patch_hw, spec.stride_hw)


def segment_positional(params: EncoderParams, seg_rows: int, L: int) -> list[torch.Tensor]:
    """Positional rows for each segment, taken from the full-clip grid at the
    segment's time offset so segments keep their absolute position."""
    spec = params.spec
    full_rows, full_cols, _ = token_grid(spec)
    seg_grid_rows, seg_cols, _ = token_grid(segment_spec(spec, seg_rows))
    if seg_cols != full_cols or seg_grid_rows > full_rows:
        raise InvalidInputError("segment grid does not fit inside the clip grid")
    pos = params["positional"].reshape(full_rows, full_cols, -1)
    out = []
    for l in range(L):
        offset = min((l * seg_rows) // spec.stride_hw[0], full_rows - seg_grid_rows)
        out.append(pos[offset:offset + seg_grid_rows].reshape(seg_grid_rows * seg_cols, -1))
    return out


def encode_segments(m, L: int, params: EncoderParams) -> torch.Tensor:
    """Encode ``L`` equal contiguous time segments independently.

    Trailing rows that do not fill a whole segment are dropped. Returns an
    ``(..., L, dim)`` tensor of unit vectors.
    """
    x = _as_tensor(m, params["patch_proj"].dtype)
    rows = x.shape[-2]
    if L < 1 or L > rows:
        raise InvalidInputError(f"cannot split {rows} rows into {L} segments")
    if x.shape[-1] != params.spec.input_hw[1]:
        raise InvalidInputError("feature width does not match the encoder grid")
    seg_rows = rows // L
    sspec = segment_spec(params.spec, seg_rows)
    positions = segment_positional(params, seg_rows, L)
    proj = params["patch_proj"]
    tokens = torch.stack([
        extract_patches(x[..., l * seg_rows:(l + 1) * seg_rows, :], sspec) @ proj + positions[l]
        for l in range(L)
    ], dim=-3)
    return encode(tokens, params)


def init_audio_from_image(image_params: EncoderParams, audio_spec: TokenGridSpec) -> EncoderParams:
    """Copy the image tower into an audio tower with a different token grid.

    Every same-shaped tensor is copied; the positional table is resampled
    to the audio token count by linear interpolation over the flattened
    token index.
    """
    if tuple(image_params.spec.patch_hw) != tuple(audio_spec.patch_hw):
        raise InvalidInputError(
            f"patch shapes differ: {image_params.spec.patch_hw} vs {audio_spec.patch_hw}")
    _, _, n_audio = token_grid(audio_spec)
    out = image_params.clone()
    out.spec = audio_spec
    pos = image_params["positional"].detach()
    n_image = pos.shape[0]
    if n_audio != n_image:
        src = np.linspace(0.0, 1.0, n_image)
        dst = np.linspace(0.0, 1.0, n_audio)
        pos64 = pos.to(torch.float64).numpy()
        new = np.stack([np.interp(dst, src, pos64[:, j]) for j in range(pos64.shape[1])], axis=1)
        out.tensors["positional"] = torch.as_tensor(new, dtype=pos.dtype)
    return out


class StubEmbedder:
    """Frozen stand-in for a pretrained image or text tower.

    Maps ``(key, latent)`` to a unit vector: a fixed semi-orthogonal
    projection of the latent plus a small key-specific offset. Image and
    text stubs built with the same ``seed`` share one projection, i.e. one
    aligned embedding space.
    """

    def __init__(self, seed: int, dim: int = 32, latent_dim: int = 16, jitter: float = 0.05):
        self.seed = int(seed)
        self.dim = dim
        self.latent_dim = latent_dim
        self.jitter = jitter
        g = np.random.default_rng([self.seed, 0x5EED])
        raw = g.standard_normal((dim, latent_dim))
        if latent_dim <= dim:
            q, r = np.linalg.qr(raw)
            raw = q * np.sign(np.diag(r))[None, :]
        else:
            raw /= math.sqrt(dim)
        self._proj = raw
        self._proj.setflags(write=False)

    def _key_offset(self, key: str) -> np.ndarray:
        h = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")
        return np.random.default_rng([self.seed, h]).standard_normal(self.dim)

    def __call__(self, key: str, latent) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float64)
        if z.shape != (self.latent_dim,):
            raise InvalidInputError(f"latent must have shape ({self.latent_dim},)")
        v = self._proj @ z + self.jitter * self._key_offset(key)
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise InvalidInputError("stub embedding collapsed to the zero vector")
        return v / norm

    def embed_many(self, keys, latents) -> np.ndarray:
        out = [self(k, z) for k, z in zip(keys, latents)]
        return np.stack(out) if out else np.zeros((0, self.dim))

    def fingerprint(self) -> str:
        return hashlib.sha256(self._proj.tobytes()).hexdigest()


def stub_embedder(seed: int, dim: int = 32, latent_dim: int = 16, jitter: float = 0.05) -> StubEmbedder:
    return StubEmbedder(seed, dim, latent_dim, jitter)


def params_to_arrays(params: EncoderParams, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((prefix + k, v.detach().cpu().numpy()) for k, v in params.tensors.items())


def params_from_arrays(arrays, spec: TokenGridSpec, prefix: str = "",
                       dtype: torch.dtype = torch.float32) -> EncoderParams:
    t = OrderedDict(
        (k[len(prefix):], torch.as_tensor(np.array(v), dtype=dtype))
        for k, v in arrays.items() if k.startswith(prefix))
    if "patch_proj" not in t:
        raise InvalidInputError(f"no encoder tensors under prefix {prefix!r}")
    return EncoderParams(spec, t)
