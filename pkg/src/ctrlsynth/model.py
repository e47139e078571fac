"""Bidirectional transformer over the unified layout, with a codebook classifier at every
target position and scalar relevance/fidelity logits read at [REL] and [FDL].

The same architecture runs causally for the left-to-right baseline; an
``ARSession`` decodes it incrementally with cached keys and values.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .codec import N_SPECIAL_POSITIONS, PAD, SPECIAL, TARGET, TEXT, VISUAL, LayoutSequence
from .nn import Block, StateError, causal_mask


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    K: int = 64
    n_image: int = 64
    grid_w: int = 8
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_text: int = 8
    max_visuals: int = 3
    causal: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_image % self.grid_w:
            raise ValueError("n_image must be a whole number of grid rows")

    @property
    def max_len(self) -> int:
        visual = self.max_visuals * self.n_image + max(self.max_visuals - 1, 0)
        return 2 + self.max_text + 1 + visual + 1 + self.n_image

    @property
    def n_positions(self) -> int:
        return N_SPECIAL_POSITIONS + self.max_text + 2 * self.n_image


@dataclass
class ModelOutput:
    token_logits: torch.Tensor  # (B, n_image, K)
    rel_logit: torch.Tensor  # (B,)
    fdl_logit: torch.Tensor  # (B,)

    def rel_score(self) -> torch.Tensor:
        return torch.sigmoid(self.rel_logit)

    def fdl_score(self) -> torch.Tensor:
        return torch.sigmoid(self.fdl_logit)


def rel_score(output: ModelOutput) -> float:
    return float(torch.sigmoid(output.rel_logit.reshape(-1)[0]))


def fdl_score(output: ModelOutput) -> float:
    return float(torch.sigmoid(output.fdl_logit.reshape(-1)[0]))


class ControlTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        # one table per modality, stored back to back
        self.pos_emb = nn.Embedding(config.n_positions, config.d_model)
        self.blocks = nn.ModuleList(
            Block(config.d_model, config.n_heads, config.d_ff) for _ in range(config.n_layers)
        )
        self.ln_f = nn.LayerNorm(config.d_model)
        self.token_head = nn.Linear(config.d_model, config.K)
        self.rel_head = nn.Linear(config.d_model, 1)
        self.fdl_head = nn.Linear(config.d_model, 1)
        self.forward_count = 0
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.weight.dtype

    def table_offsets(self) -> dict[int, int]:
        c = self.config
        return {
            SPECIAL: 0,
            TEXT: N_SPECIAL_POSITIONS,
            VISUAL: N_SPECIAL_POSITIONS + c.max_text,
            TARGET: N_SPECIAL_POSITIONS + c.max_text + c.n_image,
        }

    def hidden(self, tokens, positions, attn_mask, caches=None) -> torch.Tensor:
        x = self.tok_emb(tokens) + self.pos_emb(positions)
        for i, block in enumerate(self.blocks):
            x = block(x, attn_mask, None if caches is None else caches[i])
        return self.ln_f(x)

    def forward(self, batch: dict) -> ModelOutput:
        tokens = batch["tokens"]
        keys = batch["valid"][:, None, :]
        if self.config.causal:
            attn_mask = keys & causal_mask(tokens.shape[1])[None]
        else:
            attn_mask = keys.expand(-1, tokens.shape[1], -1)
        h = self.hidden(tokens, batch["positions"], attn_mask)
        self.forward_count += tokens.shape[0]
        idx = batch["target_index"]
        if self.config.causal:
            # position p predicts the token at p + 1
            idx = idx - 1
        rows = torch.arange(tokens.shape[0])[:, None]
        return ModelOutput(
            self.token_head(h[rows, idx]),
            self.rel_head(h[:, 0]).squeeze(-1),
            self.fdl_head(h[:, 1]).squeeze(-1),
        )


def layout_positions(layout: LayoutSequence, model: ControlTransformer) -> np.ndarray:
    from .codec import position_ids

    offsets = model.table_offsets()
    local = position_ids(layout)
    base = np.vectorize(offsets.__getitem__)(layout.modality)
    return local + base


def collate(layouts: list[LayoutSequence], model: ControlTransformer) -> dict:
    """Right-pad a list of layouts into batch tensors."""
    c = model.config
    longest = max(len(x) for x in layouts)
    if longest > c.max_len:
        raise ValueError(f"layout length {longest} exceeds model maximum {c.max_len}")
    n = len(layouts)
    tokens = np.full((n, longest), PAD, dtype=np.int64)
    positions = np.zeros((n, longest), dtype=np.int64)
    valid = np.zeros((n, longest), dtype=bool)
    target_index = np.zeros((n, c.n_image), dtype=np.int64)
    for i, layout in enumerate(layouts):
        if layout.n_image != c.n_image:
            raise ValueError(f"layout has {layout.n_image} target tokens, model expects {c.n_image}")
        if (layout.modality == TEXT).sum() > c.max_text:
            raise ValueError(f"text longer than {c.max_text} tokens")
        L = len(layout)
        tokens[i, :L] = layout.tokens
        positions[i, :L] = layout_positions(layout, model)
        valid[i, :L] = True
        target_index[i] = np.arange(L - c.n_image, L)
    if tokens.max() >= c.vocab_size:
        raise ValueError("token id outside the model vocabulary")
    return {
        "tokens": torch.from_numpy(tokens),
        "positions": torch.from_numpy(positions),
        "valid": torch.from_numpy(valid),
        "target_index": torch.from_numpy(target_index),
    }


def forward(layouts, model: ControlTransformer) -> ModelOutput:
    if isinstance(layouts, LayoutSequence):
        layouts = [layouts]
    return model(collate(layouts, model))


class ARSession:
    """Incremental causal decoding with a per-layer key/value cache.

    ``start`` consumes the control prefix and returns logits for the first
    target token; each ``step`` appends one target token and returns logits
    for the next.
    """

    def __init__(self, model: ControlTransformer, layout: LayoutSequence):
        if not model.config.causal:
            raise ValueError("incremental decoding needs a causal model")
        self.model = model
        self.layout = layout
        self.positions = torch.from_numpy(layout_positions(layout, model))
        self.start_index = len(layout) - layout.n_image
        self.caches = [dict() for _ in model.blocks]
        self.length = 0
        self.n_target = 0

    def _run(self, tokens: np.ndarray, positions: torch.Tensor) -> torch.Tensor:
        n = len(tokens)
        total = self.length + n
        mask = torch.ones(n, total, dtype=torch.bool)
        mask[:, self.length:] = causal_mask(n)
        h = self.model.hidden(torch.as_tensor(tokens)[None], positions[None], mask[None], self.caches)
        self.length = total
        self.model.forward_count += 1
        return self.model.token_head(h[0, -1])

    @torch.no_grad()
    def start(self) -> torch.Tensor:
        if self.length:
            raise StateError("session already started")
        prefix = self.layout.tokens[: self.start_index]
        return self._run(prefix, self.positions[: self.start_index])

    @torch.no_grad()
    def step(self, code: int) -> torch.Tensor:
        if self.length != self.start_index + self.n_target:
            raise StateError("cache does not match the decoded prefix")
        if self.n_target >= self.layout.n_image - 1:
            raise StateError("all target positions already fed")
        p = self.start_index + self.n_target
        token = np.array([code + self.layout.code_offset])
        self.n_target += 1
        return self._run(token, self.positions[p : p + 1])


MAGIC = b"UFCB"
VERSION = 1
_CONFIG_FIELDS = [f.name for f in fields(ModelConfig)]


def save_checkpoint(model: ControlTransformer, path) -> None:
    cfg = asdict(model.config)
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    out += struct.pack(f"<{len(_CONFIG_FIELDS)}I", *(int(cfg[k]) for k in _CONFIG_FIELDS))
    for name, tensor in model.state_dict().items():
        raw = name.encode("utf-8")
        data = tensor.detach().to(torch.float32).numpy()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape)
        out += data.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path, dtype=torch.float64) -> ControlTransformer:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    values = struct.unpack_from(f"<{len(_CONFIG_FIELDS)}I", raw, 8)
    kwargs = dict(zip(_CONFIG_FIELDS, values))
    kwargs["causal"] = bool(kwargs["causal"])
    model = ControlTransformer(ModelConfig(**kwargs)).to(dtype)
    expected = model.state_dict()
    pos = 8 + 4 * len(_CONFIG_FIELDS)
    state = {}
    while pos < len(raw):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        name = raw[pos + 2 : pos + 2 + nlen].decode("utf-8")
        pos += 2 + nlen
        (rank,) = struct.unpack_from("<B", raw, pos)
        dims = struct.unpack_from(f"<{rank}I", raw, pos + 1)
        pos += 1 + 4 * rank
        if name not in expected or tuple(expected[name].shape) != dims:
            raise ValueError(f"{path}: tensor {name} {dims} does not fit the stored config")
        count = int(np.prod(dims))
        data = np.frombuffer(raw, "<f4", count, pos).reshape(dims)
        pos += 4 * count
        state[name] = torch.from_numpy(data.astype(np.float32)).to(dtype)
    missing = set(expected) - set(state)
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")
    model.load_state_dict(state)
    return model
