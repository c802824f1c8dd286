"""Toy CLIP-style encoders, residual-free dense attention, and the teacher-student bundle."""

from __future__ import annotations

import copy
import json
import math
import re
import warnings
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_SCHEMA = 1
STRATEGIES = ("frozen", "ema", "online")
MIN_TEMPERATURE = 0.01


@dataclass
class VisionEncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    depth: int = 4
    width: int = 32
    heads: int = 4
    embed_dim: int = 32
    channels: int = 3
    seed: int = 0
    pixel_mean: tuple = (0.5, 0.5, 0.5)
    pixel_std: tuple = (0.25, 0.25, 0.25)
    patch_path: str = "custom"  # patch tokens from the residual-free final block or the standard one

    def __post_init__(self):
        if self.patch_path not in ("custom", "standard"):
            raise ValueError(f"unknown patch_path {self.patch_path!r}")
        self.pixel_mean = tuple(self.pixel_mean)
        self.pixel_std = tuple(self.pixel_std)
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size


@dataclass
class TextEncoderConfig:
    vocab_size: int = 4096
    max_len: int = 77
    depth: int = 2
    width: int = 32
    heads: int = 4
    embed_dim: int = 32
    seed: int = 1

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.max_len < 3:
            raise ValueError("max_len must leave room for start/end tokens")


class EncodedImage(NamedTuple):
    cls: torch.Tensor  # B x E
    patches: torch.Tensor  # B x h x w x E


class EncodedText(NamedTuple):
    cls: torch.Tensor  # B x E


class QuickGELU(nn.Module):
    def forward(self, x):
        return x * torch.sigmoid(1.702 * x)


class SelfAttention(nn.Module):
    """Multi-head attention with explicit q/k/v so the dense path can reuse them."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.in_proj = nn.Linear(width, 3 * width)
        self.out_proj = nn.Linear(width, width)

    def qkv(self, x):
        B, L, D = x.shape
        q, k, v = self.in_proj(x).chunk(3, dim=-1)
        split = lambda t: t.reshape(B, L, self.heads, self.head_dim).transpose(1, 2)
        return split(q), split(k), split(v)

    def merge(self, out):
        B, H, L, Dh = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(B, L, H * Dh))

    def forward(self, x, mask=None):
        q, k, v = self.qkv(x)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if mask is not None:
            logits = logits + mask
        return self.merge(logits.softmax(dim=-1) @ v)

    def _self_maps(self, q, k, v) -> dict[str, torch.Tensor]:
        scale = math.sqrt(self.head_dim)
        return {name: (t @ t.transpose(-1, -2) / scale).softmax(dim=-1)
                for name, t in (("qq", q), ("kk", k), ("vv", v))}

    def attention_maps(self, x) -> dict[str, torch.Tensor]:
        """The three row-stochastic self-similarity maps, each ``B x H x L x L``."""
        return self._self_maps(*self.qkv(x))

    def custom_attention(self, x, return_attn: bool = False):
        """Residual-free attention summing the q-q, k-k and v-v self-similarity maps."""
        q, k, v = self.qkv(x)
        maps = self._self_maps(q, k, v)
        attn = maps["qq"] + maps["kk"] + maps["vv"]
        y = self.merge(attn @ v)
        return (y, attn) if return_attn else y


class ResidualBlock(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, heads)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(OrderedDict([
            ("c_fc", nn.Linear(width, 4 * width)),
            ("gelu", QuickGELU()),
            ("c_proj", nn.Linear(4 * width, width)),
        ]))

    def forward(self, x, mask=None):
        x = x + self.attn(self.ln_1(x), mask)
        return x + self.mlp(self.ln_2(x))


def _init_transformer(module: nn.Module, width: int, depth: int, generator: torch.Generator):
    proj_std = width ** -0.5 * (2 * depth) ** -0.5
    for name, p in module.named_parameters():
        if p.ndim == 1:
            if name.endswith("weight"):
                nn.init.ones_(p)
            else:
                nn.init.zeros_(p)
            continue
        std = width ** -0.5
        if "c_proj" in name or "out_proj" in name:
            std = proj_std
        with torch.no_grad():
            p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * std)


class VisionEncoder(nn.Module):
    def __init__(self, config: VisionEncoderConfig):
        super().__init__()
        self.config = config
        c = config
        self.patch_embed = nn.Linear(c.channels * c.patch_size ** 2, c.width, bias=False)
        self.class_embedding = nn.Parameter(torch.zeros(c.width))
        self.positional_embedding = nn.Parameter(torch.zeros(c.grid ** 2 + 1, c.width))
        self.ln_pre = nn.LayerNorm(c.width)
        self.blocks = nn.ModuleList(ResidualBlock(c.width, c.heads) for _ in range(c.depth))
        self.ln_post = nn.LayerNorm(c.width)
        self.proj = nn.Linear(c.width, c.embed_dim)
        g = torch.Generator().manual_seed(c.seed)
        _init_transformer(self, c.width, c.depth, g)
        with torch.no_grad():
            self.class_embedding.copy_(torch.randn(c.width, generator=g) * c.width ** -0.5)
            self.proj.bias.zero_()

    def _tokens(self, images: torch.Tensor) -> torch.Tensor:
        c = self.config
        if images.ndim == 3:
            images = images.unsqueeze(0)
        B, H, W, C = images.shape
        if H != c.image_size or W != c.image_size or C != c.channels:
            raise ValueError(f"expected images {c.image_size}x{c.image_size}x{c.channels}, got {H}x{W}x{C}")
        p, g = c.patch_size, c.grid
        dt = self.patch_embed.weight.dtype
        images = (images.to(dt) - torch.tensor(c.pixel_mean, dtype=dt)) / torch.tensor(c.pixel_std, dtype=dt)
        patches = images.reshape(B, g, p, g, p, C).permute(0, 1, 3, 2, 4, 5).reshape(B, g * g, p * p * C)
        x = self.patch_embed(patches)
        cls = self.class_embedding.expand(B, 1, -1)
        x = torch.cat([cls, x], dim=1) + self.positional_embedding
        return self.ln_pre(x)

    def _head(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.ln_post(x))

    def forward(self, images: torch.Tensor) -> EncodedImage:
        x = self.pre_final(images)
        last = self.blocks[-1]
        g = self.config.grid
        if self.config.patch_path == "standard":
            out = self._head(last(x))
            return EncodedImage(out[:, 0], out[:, 1:].reshape(out.shape[0], g, g, -1))
        cls = self._head(last(x)[:, 0])
        dense = self._head(last.attn.custom_attention(last.ln_1(x)))[:, 1:]
        return EncodedImage(cls, dense.reshape(dense.shape[0], g, g, -1))

    def pre_final(self, images: torch.Tensor) -> torch.Tensor:
        """Token sequence entering the last block."""
        x = self._tokens(images)
        for blk in self.blocks[:-1]:
            x = blk(x)
        return x

    def dense(self, images: torch.Tensor, return_attn: bool = False):
        x = self.pre_final(images)
        last = self.blocks[-1]
        y, attn = last.attn.custom_attention(last.ln_1(x), return_attn=True)
        out = self._head(y)[:, 1:]
        g = self.config.grid
        grid = out.reshape(out.shape[0], g, g, -1)
        return (grid, attn) if return_attn else grid


# -- text ---------------------------------------------------------------------

_WORD = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


class HashTokenizer:
    """Word-level tokenizer hashing lowercase words into a fixed vocabulary.

    Ids 0/1/2 are padding, start and end. Sequences longer than ``max_len`` are
    truncated (end token kept) with a warning; ``truncations`` counts them.
    """

    PAD, SOT, EOT = 0, 1, 2

    def __init__(self, vocab_size: int = 4096, max_len: int = 77):
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.truncations = 0

    def words(self, text: str) -> list[str]:
        return _WORD.findall(text.lower())

    def encode(self, text: str) -> list[int]:
        words = self.words(text)
        if not words:
            raise ValueError(f"text {text!r} is empty after tokenization")
        ids = [3 + zlib.crc32(w.encode("utf-8")) % (self.vocab_size - 3) for w in words]
        ids = [self.SOT] + ids + [self.EOT]
        if len(ids) > self.max_len:
            self.truncations += 1
            warnings.warn(f"text with {len(ids)} tokens truncated to {self.max_len}", stacklevel=3)
            ids = ids[: self.max_len - 1] + [self.EOT]
        return ids

    def batch(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        seqs = [self.encode(t) for t in texts]
        out = torch.zeros(len(seqs), self.max_len, dtype=torch.long)
        for i, s in enumerate(seqs):
            out[i, : len(s)] = torch.tensor(s)
        return out, torch.tensor([len(s) - 1 for s in seqs], dtype=torch.long)


def extend_positional_embeddings(table: torch.Tensor, target_len: int = 248, keep: int = 20) -> torch.Tensor:
    """Stretch a positional table: rows ``< keep`` copied, the rest interpolated
    linearly at a fixed integer factor (the last source row extrapolates along
    the final slope)."""
    n = table.shape[0]
    if target_len < n:
        raise ValueError(f"target length {target_len} shorter than source {n}")
    if keep >= n:
        raise ValueError("keep must be smaller than the source length")
    span = target_len - keep
    if span % (n - keep):
        raise ValueError(f"({target_len}-{keep}) not a multiple of ({n}-{keep})")
    factor = span // (n - keep)
    src = table[keep:]
    nxt = torch.cat([src[1:], (2 * src[-1] - src[-2]).unsqueeze(0)])
    frac = torch.arange(factor, dtype=table.dtype, device=table.device) / factor
    mid = src.unsqueeze(1) + frac[None, :, None] * (nxt - src).unsqueeze(1)
    return torch.cat([table[:keep], mid.reshape(-1, table.shape[1])])


class TextEncoder(nn.Module):
    def __init__(self, config: TextEncoderConfig):
        super().__init__()
        self.config = config
        c = config
        self.tokenizer = HashTokenizer(c.vocab_size, c.max_len)
        self.token_embedding = nn.Embedding(c.vocab_size, c.width)
        self.positional_embedding = nn.Parameter(torch.zeros(c.max_len, c.width))
        self.blocks = nn.ModuleList(ResidualBlock(c.width, c.heads) for _ in range(c.depth))
        self.ln_final = nn.LayerNorm(c.width)
        self.proj = nn.Linear(c.width, c.embed_dim)
        g = torch.Generator().manual_seed(c.seed)
        _init_transformer(self, c.width, c.depth, g)
        with torch.no_grad():
            self.positional_embedding.copy_(torch.randn(c.max_len, c.width, generator=g) * 0.01)
            self.token_embedding.weight.mul_(0.02 / c.width ** -0.5)
            self.proj.bias.zero_()

    def _mask(self, L, dtype):
        return torch.full((L, L), float("-inf"), dtype=dtype).triu(1)

    def forward(self, texts: Sequence[str]) -> EncodedText:
        if isinstance(texts, str):
            texts = [texts]
        ids, eot = self.tokenizer.batch(texts)
        return self.encode_ids(ids, eot)

    def encode_ids(self, ids: torch.Tensor, eot: torch.Tensor) -> EncodedText:
        x = self.token_embedding(ids) + self.positional_embedding[: ids.shape[1]]
        mask = self._mask(ids.shape[1], x.dtype)
        for blk in self.blocks:
            x = blk(x, mask)
        x = self.ln_final(x[torch.arange(x.shape[0]), eot])
        return EncodedText(self.proj(x))

    def extend_context(self, target_len: int = 248, keep: int = 20) -> None:
        with torch.no_grad():
            table = extend_positional_embeddings(self.positional_embedding.data, target_len, keep)
        self.positional_embedding = nn.Parameter(table)
        self.config.max_len = target_len
        self.tokenizer.max_len = target_len


def encode_image(encoder: VisionEncoder, image) -> EncodedImage:
    return encoder(_as_tensor(image, encoder))


def encode_text(encoder: TextEncoder, text) -> EncodedText:
    return encoder(text)


def dense_features(encoder: VisionEncoder, image) -> torch.Tensor:
    """h x w grid (batched: B x h x w x E) from the residual-free final block."""
    return encoder.dense(_as_tensor(image, encoder))


def _as_tensor(image, module: nn.Module) -> torch.Tensor:
    dtype = next(module.parameters()).dtype
    if isinstance(image, torch.Tensor):
        return image.to(dtype)
    return torch.as_tensor(np.asarray(image), dtype=dtype)


def similarity(a, b) -> torch.Tensor:
    """Cosine similarity; zero vectors are an error rather than a silent 0."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine similarity of a zero-norm vector")
    return (a * b).sum(-1) / (na * nb)


# -- teacher / student --------------------------------------------------------

class TeacherStudentBundle(nn.Module):
    """Student and teacher vision encoders, text encoder and learnable temperature.

    Under ``online`` the teacher *is* the student; under ``frozen`` and ``ema``
    the teacher is a detached copy that never receives gradients.
    """

    def __init__(self, vision: VisionEncoderConfig, text: TextEncoderConfig,
                 strategy: str = "online", momentum: float = 0.999, text_frozen: bool = False,
                 shared_temperature: bool = True, init_temperature: float = 0.07,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown teacher strategy {strategy!r}")
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if vision.embed_dim != text.embed_dim:
            raise ValueError("vision and text embedding dims differ")
        self.strategy = strategy
        self.momentum = momentum
        self.shared_temperature = shared_temperature
        self.student = VisionEncoder(vision)
        self.text = TextEncoder(text)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1.0 / init_temperature)))
        self.logit_scale_loc = None
        if not shared_temperature:
            self.logit_scale_loc = nn.Parameter(torch.tensor(math.log(1.0 / init_temperature)))
        self.to(dtype)
        self.teacher_copy = None
        if strategy != "online":
            self.teacher_copy = copy.deepcopy(self.student)
            self.teacher_copy.requires_grad_(False)
        self.text_frozen = False
        self.set_text_frozen(text_frozen)

    @property
    def teacher(self) -> VisionEncoder:
        return self.student if self.teacher_copy is None else self.teacher_copy

    @property
    def detach_teacher(self) -> bool:
        return self.strategy != "online"

    def set_text_frozen(self, frozen: bool) -> None:
        self.text_frozen = frozen
        self.text.requires_grad_(not frozen)

    def temperature(self, which: str = "glo") -> torch.Tensor:
        scale = self.logit_scale_loc if which == "loc" and self.logit_scale_loc is not None else self.logit_scale
        return torch.exp(-scale).clamp(min=MIN_TEMPERATURE)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def update_teacher(self) -> None:
        update_teacher(self)


def update_teacher(bundle: TeacherStudentBundle) -> None:
    if bundle.strategy != "ema":
        return
    mu = bundle.momentum
    with torch.no_grad():
        for t, s in zip(bundle.teacher_copy.parameters(), bundle.student.parameters()):
            t.mul_(mu).add_(s.detach(), alpha=1.0 - mu)


# -- checkpoints --------------------------------------------------------------

def bundle_config(bundle: TeacherStudentBundle) -> dict:
    return {
        "vision": asdict(bundle.student.config),
        "text": asdict(bundle.text.config),
        "strategy": bundle.strategy,
        "momentum": bundle.momentum,
        "text_frozen": bundle.text_frozen,
        "shared_temperature": bundle.shared_temperature,
    }


def bundle_from_config(cfg: dict, dtype=torch.float64) -> TeacherStudentBundle:
    return TeacherStudentBundle(VisionEncoderConfig(**cfg["vision"]), TextEncoderConfig(**cfg["text"]),
                                strategy=cfg["strategy"], momentum=cfg["momentum"],
                                text_frozen=cfg["text_frozen"],
                                shared_temperature=cfg.get("shared_temperature", True), dtype=dtype)


def save_checkpoint(path, bundle: TeacherStudentBundle, extra: dict | None = None) -> None:
    """One ``.npz`` archive of named arrays plus a JSON block under ``__meta__``."""
    arrays = {k: v.detach().cpu().numpy() for k, v in bundle.state_dict().items()}
    meta = {"schema": CHECKPOINT_SCHEMA, "config": bundle_config(bundle), **(extra or {})}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    if meta.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {meta.get('schema')}")
    return arrays, meta


def load_checkpoint(path, dtype=torch.float64) -> tuple[TeacherStudentBundle, dict]:
    arrays, meta = read_checkpoint(path)
    cfg = meta["config"]
    bundle = bundle_from_config(cfg, dtype=dtype)
    if cfg["text"]["max_len"] != arrays["text.positional_embedding"].shape[0]:
        raise ValueError("text positional table does not match configured max_len")
    bundle.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    return bundle, meta


def import_weights(module: nn.Module, archive, mapping: dict[str, str] | None = None,
                   strict: bool = False) -> list[str]:
    """Copy arrays from a flat name->array archive into ``module``.

    ``mapping`` renames archive keys to parameter names; keys not in it are
    matched by identity. Returns the parameter names that were filled.
    """
    mapping = mapping or {}
    with np.load(archive) as data:
        src = {mapping.get(k, k): data[k] for k in data.files}
    state = module.state_dict()
    filled = []
    for name, arr in src.items():
        if name not in state:
            if strict:
                raise KeyError(f"no parameter named {name!r}")
            continue
        if tuple(arr.shape) != tuple(state[name].shape):
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {tuple(state[name].shape)}")
        state[name] = torch.as_tensor(arr, dtype=state[name].dtype)
        filled.append(name)
    module.load_state_dict(state)
    return filled
