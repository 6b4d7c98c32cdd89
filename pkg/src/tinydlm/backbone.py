"""The denoiser: a small pre-norm transformer with rotary positions.

Attention masks are boolean (True = may attend).  Rotary tables are computed
on the fly, so they never show up among the parameters.  ``forward`` can also
consume and emit per-layer key/value tensors so samplers can cache them.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BackboneError, CheckpointError

CHECKPOINT_MAGIC = b"TDLMCKPT"
FORMAT_VERSION = 1


@dataclass
class BackboneConfig:
    vocab_size: int = 260
    d_model: int = 256
    n_layers: int = 6
    n_heads: int = 8
    d_ff: int = 1024
    max_seq_len: int = 1024
    rope_base: float = 10000.0
    right_shift_logits: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise BackboneError(f"{name} must be positive, got {getattr(self, name)}")
        if self.rope_base <= 0:
            raise BackboneError(f"rope_base must be positive, got {self.rope_base}")
        if self.d_model % self.n_heads:
            raise BackboneError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise BackboneError("head dimension must be even for rotary embeddings")

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class MaskKind(str, enum.Enum):
    FULL = "full_bidirectional"
    CAUSAL = "causal"
    BLOCK_CAUSAL = "block_causal"
    TWO_STREAM = "bd3lm_two_stream"


@dataclass(frozen=True)
class AttentionMaskSpec:
    kind: MaskKind = MaskKind.FULL
    block_size: int | None = None
    explicit: torch.Tensor | None = field(default=None, compare=False)

    @classmethod
    def full(cls):
        return cls(MaskKind.FULL)

    @classmethod
    def causal(cls):
        return cls(MaskKind.CAUSAL)

    @classmethod
    def block_causal(cls, block_size: int):
        return cls(MaskKind.BLOCK_CAUSAL, block_size)

    @classmethod
    def two_stream(cls, block_size: int):
        return cls(MaskKind.TWO_STREAM, block_size)


FULL = AttentionMaskSpec.full()


def build_attention_mask(spec: AttentionMaskSpec, seq_len: int) -> torch.Tensor:
    """Boolean [L', L'] matrix; L' = 2L for the two-stream layout ([noised | clean])."""
    if spec.explicit is not None:
        return spec.explicit.bool()
    kind = MaskKind(spec.kind)
    if kind in (MaskKind.BLOCK_CAUSAL, MaskKind.TWO_STREAM):
        if spec.block_size is None or spec.block_size <= 0:
            raise BackboneError(f"block_size must be positive, got {spec.block_size}")
    idx = torch.arange(seq_len)
    if kind is MaskKind.FULL:
        return torch.ones(seq_len, seq_len, dtype=torch.bool)
    if kind is MaskKind.CAUSAL:
        return idx[None, :] <= idx[:, None]
    blk = idx // spec.block_size
    if kind is MaskKind.BLOCK_CAUSAL:
        return blk[None, :] <= blk[:, None]
    same = blk[None, :] == blk[:, None]
    before = blk[None, :] < blk[:, None]
    upto = blk[None, :] <= blk[:, None]
    top = torch.cat([same, before], dim=1)  # noised queries
    bottom = torch.cat([torch.zeros_like(same), upto], dim=1)  # clean queries
    return torch.cat([top, bottom], dim=0)


def _rope_tables(positions: torch.Tensor, head_dim: int, base: float, dtype):
    inv = 1.0 / (base ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim))
    ang = positions.to(torch.float64)[:, None] * inv[None, :]
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def _rotate(x, cos, sin):
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


class SelfAttention(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.d_model // cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model, bias=False)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model, bias=False)

    def forward(self, x, cos, sin, mask, past=None):
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k = _rotate(q, cos, sin), _rotate(k, cos, sin)
        new_kv = (k, v)
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask, float("-inf"))
        att = torch.softmax(scores, dim=-1).nan_to_num(0.0)  # rows with no visible key
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(y), new_kv


class TransformerBlock(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = SelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff), nn.GELU(), nn.Linear(cfg.d_ff, cfg.d_model)
        )

    def forward(self, x, cos, sin, mask, past=None):
        a, kv = self.attn(self.ln1(x), cos, sin, mask, past)
        x = x + a
        return x + self.mlp(self.ln2(x)), kv


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig, meta: dict | None = None):
        super().__init__()
        self.config = cfg
        self.meta = dict(meta or {})
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.apply(self._init)

    @staticmethod
    def _init(m):
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, std=0.02)
        if isinstance(m, nn.Linear) and m.bias is not None:
            nn.init.zeros_(m.bias)

    @property
    def right_shift_logits(self) -> bool:
        return self.config.right_shift_logits

    @property
    def dtype(self):
        return self.head.weight.dtype

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(
        self,
        tokens: torch.Tensor,
        mask_spec: AttentionMaskSpec | None = None,
        *,
        attention_mask: torch.Tensor | None = None,
        positions: torch.Tensor | None = None,
        past: list | None = None,
        past_visible: torch.Tensor | None = None,
        return_kv: bool = False,
    ):
        """Per-position vocabulary logits ``[B, L, V]``.

        ``attention_mask`` ([B, L] bool) hides keys (padding); ``past`` is a
        per-layer list of rotated ``(k, v)`` for extra key positions and
        ``past_visible`` ([L, Lp] bool) restricts which of them each query sees.
        """
        cfg = self.config
        if tokens.dim() != 2:
            raise BackboneError(f"tokens must be [B, L], got shape {tuple(tokens.shape)}")
        b, n = tokens.shape
        if n and (int(tokens.min()) < 0 or int(tokens.max()) >= cfg.vocab_size):
            bad = int(tokens.max()) if int(tokens.max()) >= cfg.vocab_size else int(tokens.min())
            raise BackboneError(f"token id {bad} outside [0, {cfg.vocab_size})")
        spec = mask_spec or FULL
        two_stream = spec.explicit is None and MaskKind(spec.kind) is MaskKind.TWO_STREAM
        if positions is None:
            if two_stream:
                if n % 2:
                    raise BackboneError("two-stream input must have even width")
                positions = torch.arange(n // 2).repeat(2)
            else:
                positions = torch.arange(n)
        if n and int(positions.max()) >= cfg.max_seq_len:
            raise BackboneError(f"position {int(positions.max())} exceeds max_seq_len={cfg.max_seq_len}")

        self_mask = build_attention_mask(spec, n // 2 if two_stream else n)
        if self_mask.shape != (n, n):
            raise BackboneError(f"attention mask shape {tuple(self_mask.shape)} != ({n}, {n})")
        mask = self_mask[None, None]
        if attention_mask is not None:
            keys = attention_mask.bool()
            mask = mask & keys[:, None, None, :]
        if past is not None:
            p_len = past[0][0].shape[2]
            pv = torch.ones(n, p_len, dtype=torch.bool) if past_visible is None else past_visible
            pv = pv[None, None].expand(mask.shape[0], 1, n, p_len)
            mask = torch.cat([pv, mask.expand(pv.shape[0], 1, n, n)], dim=-1)

        cos, sin = _rope_tables(positions, cfg.d_model // cfg.n_heads, cfg.rope_base, self.dtype)
        x = self.tok_emb(tokens)
        kvs = []
        for i, blk in enumerate(self.blocks):
            x, kv = blk(x, cos, sin, mask, None if past is None else past[i])
            kvs.append(kv)
        logits = self.head(self.ln_f(x))
        if cfg.right_shift_logits and n:
            logits = torch.cat([logits[:, :1], logits[:, :-1]], dim=1)
        return (logits, kvs) if return_kv else logits

    def backward(self, loss: torch.Tensor) -> dict[str, torch.Tensor]:
        """Gradients of ``loss`` for every parameter (zeros where unused)."""
        if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
            raise BackboneError("backward() needs a loss computed from a taped forward pass")
        names, params = zip(*self.named_parameters())
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        return {
            n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, grads)
        }


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(model: Backbone, path: str | Path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors, chunks, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "meta": {**model.meta, **(meta or {})},
        "tensors": tensors,
        "payload_bytes": offset,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for c in chunks:
            f.write(c)
    tmp.replace(path)
    sidecar = path.with_suffix(".config.json")
    sidecar.write_text(json.dumps(manifest["config"], indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)", field="magic")
    (version,) = struct.unpack("<I", data[8:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {version} unsupported (expected {FORMAT_VERSION})",
            field="format_version",
        )
    (mlen,) = struct.unpack("<Q", data[12:20])
    if 20 + mlen > len(data):
        raise CheckpointError(f"{path}: truncated manifest", field="manifest")
    try:
        manifest = json.loads(data[20 : 20 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest ({e})", field="manifest") from e
    if manifest.get("format_version") != version:
        raise CheckpointError(f"{path}: manifest format_version disagrees with header", field="format_version")
    return manifest, data[20 + mlen :]


def load_checkpoint(
    path: str | Path, expected_config: BackboneConfig | None = None, dtype=torch.float32
) -> Backbone:
    manifest, payload = read_manifest(path)
    cfg = BackboneConfig.from_dict(manifest["config"])
    if expected_config is not None:
        for f in fields(BackboneConfig):
            want, got = getattr(expected_config, f.name), getattr(cfg, f.name)
            if want != got:
                raise CheckpointError(
                    f"{path}: config field {f.name} is {got} in checkpoint, expected {want}",
                    field=f.name,
                )
    declared = manifest.get("payload_bytes")
    if declared != len(payload):
        raise CheckpointError(
            f"{path}: payload has {len(payload)} bytes, manifest declares {declared} (truncated?)",
            field="payload_bytes",
        )
    model = Backbone(cfg, meta=manifest.get("meta"))
    state = model.state_dict()
    seen, expected_offset = set(), 0
    new_state = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in state:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}", field=name)
        shape = tuple(entry["shape"])
        if shape != tuple(state[name].shape):
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {shape}, model expects {tuple(state[name].shape)}",
                field=name,
            )
        if entry.get("dtype") != "float32":
            raise CheckpointError(f"{path}: tensor {name!r} has dtype {entry.get('dtype')}", field=name)
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if entry["offset"] != expected_offset or entry["offset"] + nbytes > len(payload):
            raise CheckpointError(
                f"{path}: tensor {name!r} offset {entry['offset']} inconsistent "
                f"(expected {expected_offset})",
                field=name,
            )
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=entry["offset"])
        new_state[name] = torch.from_numpy(arr.reshape(shape).copy())
        expected_offset += nbytes
        seen.add(name)
    missing = set(state) - seen
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}", field=sorted(missing)[0])
    if expected_offset != len(payload):
        raise CheckpointError(f"{path}: payload size disagrees with manifest", field="payload_bytes")
    model.load_state_dict(new_state)
    return model.to(dtype)
