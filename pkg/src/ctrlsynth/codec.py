"""Unified token layout for multi-modal controls plus the target grid.

Layout order::

    [REL] [FDL] text... [EOT] vc1... [SEP] vc2... [EOV] target...

One embedding id space holds the eight special tokens, the words, then the
codebook entries. Position ids come from four separate tables (special, text,
visual control, target) chosen by each token's modality.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPECIALS = ("[REL]", "[FDL]", "[EOT]", "[EOV]", "[SEP]", "[MASK]", "[PAD]", "[UNK]")
REL, FDL, EOT, EOV, SEP, MASK, PAD, UNK = range(8)
N_SPECIAL_POSITIONS = 5  # REL, FDL, EOT, EOV, SEP

SPECIAL, TEXT, VISUAL, TARGET = range(4)


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    words: tuple[str, ...]
    K: int

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate words in vocabulary")

    @property
    def word_offset(self) -> int:
        return len(SPECIALS)

    @property
    def code_offset(self) -> int:
        return len(SPECIALS) + len(self.words)

    @property
    def size(self) -> int:
        return self.code_offset + self.K

    def word_id(self, word: str) -> int:
        try:
            return self.word_offset + self.words.index(word)
        except ValueError:
            return UNK

    def encode_text(self, words) -> list[int]:
        return [self.word_id(w) for w in words]

    def decode_text(self, ids) -> list[str]:
        out = []
        for i in ids:
            out.append(SPECIALS[i] if i < self.word_offset else self.words[i - self.word_offset])
        return out

    def code_token(self, codes) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        if codes.size and (codes.min() < 0 or codes.max() >= self.K):
            raise IndexError(f"code id out of range [0, {self.K})")
        return codes + self.code_offset

    def save(self, path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.words), encoding="utf-8")

    @classmethod
    def load(cls, path, K: int) -> "Vocabulary":
        words = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(w for w in words if w), K)


@dataclass
class ControlSet:
    """Text word ids, visual-control code grids, and an optional preservation mask.

    ``preserved_codes`` spans the whole target; entries outside the mask are -1.
    """

    text: list[int] | None = None
    visuals: list[np.ndarray] = field(default_factory=list)
    preserve_mask: np.ndarray | None = None
    preserved_codes: np.ndarray | None = None

    def __post_init__(self):
        self.visuals = [np.asarray(v, dtype=np.int64) for v in self.visuals]
        if self.preserve_mask is not None:
            self.preserve_mask = np.asarray(self.preserve_mask, dtype=bool)
            codes = np.asarray(self.preserved_codes, dtype=np.int64)
            if codes.shape != self.preserve_mask.shape:
                raise ContractError("preserved_codes must match preserve_mask length")
            self.preserved_codes = np.where(self.preserve_mask, codes, -1)
            if (self.preserved_codes[self.preserve_mask] < 0).any():
                raise ContractError("preserved position without a code")

    @classmethod
    def preserve(cls, grid, mask, **kwargs) -> "ControlSet":
        grid = np.asarray(grid).reshape(-1)
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        return cls(preserve_mask=mask, preserved_codes=np.where(mask, grid, -1), **kwargs)

    def preserved(self, n: int) -> np.ndarray:
        if self.preserve_mask is None:
            return np.zeros(n, dtype=bool)
        if len(self.preserve_mask) != n:
            raise ContractError(f"preserve_mask length {len(self.preserve_mask)} != {n}")
        return self.preserve_mask

    @property
    def has_text(self) -> bool:
        return bool(self.text)

    @property
    def is_empty(self) -> bool:
        return not self.text and not self.visuals


@dataclass
class LayoutSequence:
    tokens: np.ndarray
    modality: np.ndarray
    masked: np.ndarray
    preserved: np.ndarray
    targets: np.ndarray  # target codes, including the ones hidden under [MASK]
    visual_shapes: tuple[tuple[int, int], ...]
    grid_w: int
    code_offset: int

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def n_image(self) -> int:
        return len(self.targets)

    @property
    def target_slice(self) -> slice:
        return slice(len(self.tokens) - self.n_image, len(self.tokens))

    @property
    def mask_flags(self) -> np.ndarray:
        return self.masked[self.target_slice]

    def with_targets(self, codes, mask_flags) -> "LayoutSequence":
        """Same controls, new target state; preserved positions keep their codes."""
        codes = np.asarray(codes, dtype=np.int64)
        mask_flags = np.asarray(mask_flags, dtype=bool)
        keep = self.preserved[self.target_slice]
        if (mask_flags & keep).any():
            raise ContractError("cannot mask a preserved position")
        codes = np.where(keep, self.targets, codes)
        tokens, masked = self.tokens.copy(), self.masked.copy()
        tokens[self.target_slice] = np.where(mask_flags, MASK, codes + self.code_offset)
        masked[self.target_slice] = mask_flags
        return LayoutSequence(tokens, self.modality, masked, self.preserved, codes,
                              self.visual_shapes, self.grid_w, self.code_offset)


def build_sequence(controls: ControlSet, target_codes, mask_flags, vocab: Vocabulary,
                   grid_w: int) -> LayoutSequence:
    target_codes = np.asarray(target_codes, dtype=np.int64).reshape(-1)
    mask_flags = np.asarray(mask_flags, dtype=bool).reshape(-1)
    n = len(target_codes)
    if len(mask_flags) != n:
        raise ContractError("mask_flags length differs from target length")
    keep = controls.preserved(n)
    if (mask_flags & keep).any():
        raise ContractError("mask requested on a preserved position")
    if keep.any():
        codes = np.where(keep, controls.preserved_codes, target_codes)
    else:
        codes = target_codes.copy()
    # codes under [MASK] may be placeholders; only visible ones are range-checked
    target_tokens = np.full(n, MASK, dtype=np.int64)
    target_tokens[~mask_flags] = vocab.code_token(codes[~mask_flags])

    tokens = [REL, FDL]
    modality = [SPECIAL, SPECIAL]
    text = list(controls.text or [])
    tokens += text
    modality += [TEXT] * len(text)
    tokens.append(EOT)
    modality.append(SPECIAL)
    for i, grid in enumerate(controls.visuals):
        if i:
            tokens.append(SEP)
            modality.append(SPECIAL)
        flat = vocab.code_token(grid.reshape(-1))
        tokens += flat.tolist()
        modality += [VISUAL] * len(flat)
    tokens.append(EOV)
    modality.append(SPECIAL)
    tokens += target_tokens.tolist()
    modality += [TARGET] * n

    total = len(tokens)
    masked = np.zeros(total, dtype=bool)
    masked[total - n:] = mask_flags
    preserved = np.zeros(total, dtype=bool)
    preserved[total - n:] = keep
    layout = LayoutSequence(
        np.array(tokens, dtype=np.int64), np.array(modality, dtype=np.int8), masked, preserved,
        codes, tuple(tuple(v.shape) for v in controls.visuals), grid_w, vocab.code_offset,
    )
    return layout


def parse_sequence(layout: LayoutSequence, vocab: Vocabulary):
    """Inverse of ``build_sequence``: (text ids, visual grids, target codes, mask flags)."""
    tokens, modality = layout.tokens, layout.modality
    text = tokens[modality == TEXT].tolist()
    flat = tokens[modality == VISUAL] - vocab.code_offset
    visuals, pos = [], 0
    for h, w in layout.visual_shapes:
        visuals.append(flat[pos:pos + h * w].reshape(h, w))
        pos += h * w
    return text, visuals, layout.targets.copy(), layout.mask_flags.copy()


def position_ids(layout: LayoutSequence) -> np.ndarray:
    """Per-token index into the table selected by the token's modality."""
    out = np.zeros(len(layout), dtype=np.int64)
    special_slot = {REL: 0, FDL: 1, EOT: 2, EOV: 3, SEP: 4}
    text_i = 0
    shapes = iter(layout.visual_shapes)
    vis_left, vis_i, vis_w = 0, 0, 1
    for i, (tok, mod) in enumerate(zip(layout.tokens, layout.modality)):
        if mod == SPECIAL:
            out[i] = special_slot[int(tok)]
        elif mod == TEXT:
            out[i] = text_i
            text_i += 1
        elif mod == VISUAL:
            if vis_left == 0:
                h, vis_w = next(shapes)
                vis_left, vis_i = h * vis_w, 0
            r, c = divmod(vis_i, vis_w)
            # crop-local (row, col) laid out on the target grid's row stride
            out[i] = r * layout.grid_w + c
            vis_i += 1
            vis_left -= 1
    n = layout.n_image
    out[len(layout) - n:] = np.arange(n)
    return out


def apply_preservation(codes, controls: ControlSet) -> np.ndarray:
    codes = np.array(codes, dtype=np.int64, copy=True)
    if controls.preserve_mask is None:
        return codes
    keep = controls.preserved(len(codes))
    codes[keep] = controls.preserved_codes[keep]
    return codes
