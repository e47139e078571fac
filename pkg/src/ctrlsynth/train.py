"""Training for the masked-sequence model and the left-to-right baseline.

Each positive sample draws a control combination and a masking strategy;
relevance negatives swap controls across the batch, and fidelity negatives
are images decoded by an earlier snapshot of the model from text alone.
"""

from __future__ import annotations

import copy
import enum
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from . import vq
from .codec import ContractError, ControlSet, LayoutSequence, Vocabulary, build_sequence
from .data import LEXICON, DatasetRecord
from .decode import PnagConfig, pnag_decode
from .model import ControlTransformer, ModelConfig, forward, save_checkpoint
from .nn import Adam, backward, token_cross_entropy

log = logging.getLogger(__name__)


class MaskStrategy(enum.IntEnum):
    RANDOM_COUNT = 0
    ALL = 1
    IN_BOXES = 2
    OUT_BOXES = 3


class Combo(enum.IntEnum):
    TC_VC = 0
    TC = 1
    VC = 2
    EMPTY = 3


STRATEGY_PROBS = (0.70, 0.10, 0.10, 0.10)
COMBO_PROBS = (0.20, 0.55, 0.20, 0.05)
LOSS_WEIGHTS = (1.0, 0.5, 0.5)


@dataclass
class TrainConfig:
    lambdas: tuple[float, float, float] = LOSS_WEIGHTS
    strategy_probs: tuple[float, ...] = STRATEGY_PROBS
    combo_probs: tuple[float, ...] = COMBO_PROBS
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    warmup_steps: int = 100
    fdl_start_fraction: float = 0.25
    fdl_negative_ratio: float = 0.125
    rel_negative_fraction: float = 0.5
    max_visuals: int = 3
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    K: int = 64
    patch: int = 4
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        for name in ("strategy_probs", "combo_probs"):
            probs = getattr(self, name)
            if len(probs) != 4 or abs(sum(probs) - 1) > 1e-9 or min(probs) < 0:
                raise ValueError(f"{name} must be four non-negative values summing to 1")
        if len(self.lambdas) != 3 or min(self.lambdas) < 0:
            raise ValueError("lambdas must be three non-negative weights")

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        defaults = cls()
        kwargs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if not sep or key not in known:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            current = getattr(defaults, key)
            if isinstance(current, tuple):
                kwargs[key] = tuple(float(v) for v in raw.split(","))
            else:
                kwargs[key] = type(current)(raw)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def model_config(self, vocab: Vocabulary, n_image: int, grid_w: int, causal: bool = False) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab.size, K=vocab.K, n_image=n_image, grid_w=grid_w,
            n_layers=self.n_layers, d_model=self.d_model, n_heads=self.n_heads, d_ff=self.d_ff,
            max_text=8, max_visuals=self.max_visuals, causal=causal,
        )


def _inverse_cdf(probs, u: float) -> int:
    return min(int(np.searchsorted(np.cumsum(probs), u, side="right")), len(probs) - 1)


def sample_mask_strategy(rng: np.random.Generator, probs=STRATEGY_PROBS) -> MaskStrategy:
    return MaskStrategy(_inverse_cdf(probs, rng.random()))


def sample_control_combo(rng: np.random.Generator, probs=COMBO_PROBS) -> Combo:
    return Combo(_inverse_cdf(probs, rng.random()))


def random_boxes(rng: np.random.Generator, h: int, w: int) -> list[tuple[int, int, int, int]]:
    """1-3 boxes (top, left, height, width) with sides uniform in [1, h] x [1, w]."""
    boxes = []
    for _ in range(int(rng.integers(1, 4))):
        bh, bw = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
        top, left = int(rng.integers(0, h - bh + 1)), int(rng.integers(0, w - bw + 1))
        boxes.append((top, left, bh, bw))
    return boxes


def boxes_to_mask(boxes, h: int, w: int) -> np.ndarray:
    grid = np.zeros((h, w), dtype=bool)
    for top, left, bh, bw in boxes:
        grid[top:top + bh, left:left + bw] = True
    return grid.reshape(-1)


def apply_mask_strategy(strategy: MaskStrategy, h: int, w: int, preserve_mask=None,
                        rng: np.random.Generator | None = None, boxes=None) -> np.ndarray:
    """Mask flags over the flattened h x w target; preserved positions are never masked."""
    n = h * w
    keep = np.zeros(n, dtype=bool) if preserve_mask is None else np.asarray(preserve_mask, dtype=bool)
    maskable = np.flatnonzero(~keep)
    if len(maskable) == 0:
        raise ContractError("no maskable position")
    while True:
        flags = np.zeros(n, dtype=bool)
        if strategy == MaskStrategy.RANDOM_COUNT:
            count = int(rng.integers(1, len(maskable) + 1))
            flags[rng.choice(maskable, size=count, replace=False)] = True
        elif strategy == MaskStrategy.ALL:
            flags[:] = True
        else:
            inside = boxes_to_mask(boxes if boxes is not None else random_boxes(rng, h, w), h, w)
            flags = inside if strategy == MaskStrategy.IN_BOXES else ~inside
        flags &= ~keep
        if flags.any():
            return flags
        if boxes is not None or rng is None:
            raise ContractError("fixed boxes leave nothing to mask")


def crop_boxes(rng: np.random.Generator, h: int, w: int, max_crops: int = 3) -> list[tuple[int, int, int, int]]:
    """1..max_crops patch-aligned regions, each between 2x2 and (h-1)x(w-1) patches."""
    out = []
    for _ in range(int(rng.integers(1, max_crops + 1))):
        bh, bw = int(rng.integers(2, h)), int(rng.integers(2, w))
        top, left = int(rng.integers(0, h - bh + 1)), int(rng.integers(0, w - bw + 1))
        out.append((top, left, bh, bw))
    return out


def crop_region(image: np.ndarray, box, codebook: vq.Codebook, patch: int = 4) -> np.ndarray:
    top, left, bh, bw = box
    h, w = image.shape[0] // patch, image.shape[1] // patch
    if not (2 <= bh <= h - 1 and 2 <= bw <= w - 1):
        raise ValueError(f"crop {bh}x{bw} patches outside [2, {h - 1}] x [2, {w - 1}]")
    if top < 0 or left < 0 or top + bh > h or left + bw > w:
        raise ValueError("crop leaves the image")
    pixels = image[top * patch:(top + bh) * patch, left * patch:(left + bw) * patch]
    return vq.encode_image(pixels, codebook, patch, patch)


def crop_visual_control(image: np.ndarray, codebook: vq.Codebook, rng: np.random.Generator,
                        patch: int = 4, max_crops: int = 3) -> list[np.ndarray]:
    h, w = image.shape[0] // patch, image.shape[1] // patch
    return [crop_region(image, box, codebook, patch) for box in crop_boxes(rng, h, w, max_crops)]


@dataclass
class TrainSample:
    layout: LayoutSequence
    controls: ControlSet
    msm: bool = True
    rel_label: int | None = 1
    fdl_label: int | None = 1
    combo: Combo | None = None

    @property
    def msm_targets(self) -> np.ndarray:
        return self.layout.targets[self.layout.mask_flags]


@dataclass
class Corpus:
    """Dataset records tokenized once: target grids and caption word ids."""

    grids: np.ndarray  # (N, h, w)
    text: list[list[int]]
    vocab: Vocabulary

    @classmethod
    def build(cls, records: list[DatasetRecord], codebook: vq.Codebook, patch: int = 4,
              vocab: Vocabulary | None = None) -> "Corpus":
        vocab = vocab or Vocabulary(LEXICON, codebook.K)
        grids = np.stack([vq.encode_image(r.image, codebook, patch, patch) for r in records])
        return cls(grids, [vocab.encode_text(r.words) for r in records], vocab)

    def __len__(self) -> int:
        return len(self.grids)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.grids.shape[1], self.grids.shape[2]


def make_controls(corpus: Corpus, i: int, combo: Combo, rng: np.random.Generator,
                  max_visuals: int = 3) -> ControlSet:
    h, w = corpus.grid_shape
    text = corpus.text[i] if combo in (Combo.TC_VC, Combo.TC) else None
    visuals = []
    if combo in (Combo.TC_VC, Combo.VC):
        # slicing the code grid equals re-encoding the pixel crop: crops are patch-aligned
        for top, left, bh, bw in crop_boxes(rng, h, w, max_visuals):
            visuals.append(corpus.grids[i, top:top + bh, left:left + bw].copy())
    return ControlSet(text, visuals)


def make_sample(corpus: Corpus, i: int, rng: np.random.Generator, config: TrainConfig) -> TrainSample:
    h, w = corpus.grid_shape
    combo = sample_control_combo(rng, config.combo_probs)
    controls = make_controls(corpus, i, combo, rng, config.max_visuals)
    strategy = sample_mask_strategy(rng, config.strategy_probs)
    flags = apply_mask_strategy(strategy, h, w, None, rng)
    layout = build_sequence(controls, corpus.grids[i].reshape(-1), flags, corpus.vocab, w)
    return TrainSample(layout, controls, combo=combo)


def make_rel_negatives(samples: list[TrainSample], vocab: Vocabulary, rng=None,
                       fraction: float = 1.0) -> list[TrainSample]:
    """Swap controls across samples by rotating them one step; targets and masks stay put."""
    eligible = [s for s in samples if not s.controls.is_empty]
    if rng is not None and fraction < 1.0 and len(eligible) > 2:
        k = max(2, int(round(fraction * len(eligible))))
        pick = np.sort(rng.choice(len(eligible), size=k, replace=False))
        eligible = [eligible[j] for j in pick]
    if len(eligible) < 2:
        return []
    out = []
    for j, sample in enumerate(eligible):
        donor = eligible[(j + 1) % len(eligible)]
        layout = build_sequence(donor.controls, sample.layout.targets, sample.layout.mask_flags,
                                vocab, sample.layout.grid_w)
        out.append(TrainSample(layout, donor.controls, msm=False, rel_label=0, fdl_label=1))
    return out


FDL_DECODE = PnagConfig(B=1)


def make_fdl_negatives(snapshot: ControlTransformer | None, texts: list[list[int]], n: int,
                       vocab: Vocabulary, seed: int, config: PnagConfig = FDL_DECODE) -> list[np.ndarray]:
    """Decode ``n`` grids from text alone with an earlier parameter snapshot."""
    if snapshot is None or n <= 0:
        return []
    grids = []
    for k in range(n):
        text = texts[k % len(texts)]
        grids.append(pnag_decode(ControlSet(text), snapshot, vocab, config, seed=seed + k).codes)
    return grids


def fdl_negative_samples(grids, texts, corpus: Corpus, rng, config: TrainConfig) -> list[TrainSample]:
    h, w = corpus.grid_shape
    out = []
    for grid, text in zip(grids, texts):
        controls = ControlSet(text)
        flags = apply_mask_strategy(sample_mask_strategy(rng, config.strategy_probs), h, w, None, rng)
        layout = build_sequence(controls, grid, flags, corpus.vocab, w)
        out.append(TrainSample(layout, controls, msm=False, rel_label=None, fdl_label=0))
    return out


def msm_loss(token_logits: torch.Tensor, samples: list[TrainSample]) -> torch.Tensor:
    """Mean cross-entropy over the masked target positions of samples that train MSM."""
    rows, targets = [], []
    for b, s in enumerate(samples):
        if not s.msm:
            continue
        idx = np.flatnonzero(s.layout.mask_flags)
        rows.append(token_logits[b, torch.from_numpy(idx)])
        targets.append(torch.from_numpy(s.msm_targets))
    if not rows:
        raise ContractError("no masked positions to score")
    return token_cross_entropy(torch.cat(rows), torch.cat(targets))


def binary_loss(logits: torch.Tensor, labels: list[int | None]) -> torch.Tensor | None:
    idx = [i for i, y in enumerate(labels) if y is not None]
    if not idx:
        return None
    y = torch.tensor([labels[i] for i in idx], dtype=logits.dtype)
    return F.binary_cross_entropy_with_logits(logits[idx], y)


def total_loss(msm, rel, fdl, lambdas=LOSS_WEIGHTS):
    """lambda_1 * msm + lambda_2 * rel + lambda_3 * fdl; a missing term contributes 0."""
    total = 0.0
    for weight, term in zip(lambdas, (msm, rel, fdl)):
        if term is not None:
            total = total + weight * term
    return total


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    fdl_negatives: list[int] = field(default_factory=list)
    seconds: float = 0.0


class TrainingError(RuntimeError):
    pass


def _lr_at(step: int, total: int, config: TrainConfig) -> float:
    if step < config.warmup_steps:
        return config.lr * (step + 1) / config.warmup_steps
    progress = (step - config.warmup_steps) / max(1, total - config.warmup_steps)
    return config.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(progress, 1.0))))


def fdl_start_epoch(config: TrainConfig) -> int:
    return math.ceil(config.fdl_start_fraction * config.epochs)


def new_model(config: TrainConfig, corpus: Corpus, causal: bool = False) -> ControlTransformer:
    h, w = corpus.grid_shape
    torch.manual_seed(config.seed)
    model = ControlTransformer(config.model_config(corpus.vocab, h * w, w, causal))
    return model.to(config.torch_dtype)


def _train_step(model, opt, loss, step, total_steps, config, out_dir, checkpoints):
    if not torch.isfinite(loss):
        kept = checkpoints[-1] if checkpoints else None
        raise TrainingError(f"non-finite loss at step {step}; last good checkpoint: {kept}")
    opt.lr = _lr_at(step, total_steps, config)
    opt.step(backward(loss, model))


def train(corpus: Corpus, config: TrainConfig, out_dir=None, model: ControlTransformer | None = None,
          progress=None) -> tuple[ControlTransformer, TrainReport]:
    """Optimise lambda-weighted MSM + relevance + fidelity losses; checkpoint every epoch."""
    started = time.perf_counter()
    model = model or new_model(config, corpus)
    opt = Adam(model, lr=config.lr)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    report = TrainReport()
    steps_per_epoch = math.ceil(len(corpus) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    snapshot = None
    step = 0
    for epoch in range(config.epochs):
        epoch_rng = np.random.default_rng([config.seed, 1, epoch])
        order = epoch_rng.permutation(len(corpus))
        fdl_on = snapshot is not None and epoch >= fdl_start_epoch(config)
        fdl_grids, fdl_texts = [], []
        if fdl_on:
            n_neg = int(round(config.fdl_negative_ratio * len(corpus)))
            prompts = epoch_rng.choice(len(corpus), size=n_neg, replace=True)
            fdl_texts = [corpus.text[p] for p in prompts]
            fdl_grids = make_fdl_negatives(snapshot, fdl_texts, n_neg, corpus.vocab,
                                           seed=config.seed * 1_000_003 + epoch * 10_007)
            if out_dir is not None:
                np.save(out_dir / f"fdl_negatives_{epoch:03d}.npy", np.stack(fdl_grids))
        report.fdl_negatives.append(len(fdl_grids))
        running = []
        model.train()
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            samples = [make_sample(corpus, int(i), np.random.default_rng([config.seed, 2, epoch, int(i)]), config)
                       for i in idx]
            batch_rng = np.random.default_rng([config.seed, 3, epoch, b])
            samples += make_rel_negatives(samples, corpus.vocab, batch_rng, config.rel_negative_fraction)
            if fdl_on:
                lo = b * len(fdl_grids) // steps_per_epoch
                hi = (b + 1) * len(fdl_grids) // steps_per_epoch
                samples += fdl_negative_samples(fdl_grids[lo:hi], fdl_texts[lo:hi], corpus, batch_rng, config)
            out = forward([s.layout for s in samples], model)
            msm = msm_loss(out.token_logits, samples)
            rel = binary_loss(out.rel_logit, [s.rel_label for s in samples])
            fdl = binary_loss(out.fdl_logit, [s.fdl_label for s in samples]) if fdl_on else None
            loss = total_loss(msm, rel, fdl, config.lambdas)
            _train_step(model, opt, loss, step, total_steps, config, out_dir, report.checkpoints)
            step += 1
            running.append(loss.item())
            report.losses.append(running[-1])
        model.eval()
        report.epoch_losses.append(float(np.mean(running)))
        if progress:
            progress(f"epoch {epoch + 1}/{config.epochs} loss {report.epoch_losses[-1]:.4f} "
                     f"fdl_negatives {len(fdl_grids)} ({time.perf_counter() - started:.0f}s)")
        if out_dir is not None:
            path = out_dir / f"epoch_{epoch + 1:03d}.ufcb"
            save_checkpoint(model, path)
            report.checkpoints.append(path)
        snapshot = copy.deepcopy(model)
    if out_dir is not None:
        save_checkpoint(model, out_dir / "final.ufcb")
    report.seconds = time.perf_counter() - started
    return model, report


def ar_loss(token_logits: torch.Tensor, samples: list[TrainSample]) -> torch.Tensor:
    targets = torch.from_numpy(np.stack([s.layout.targets for s in samples]))
    return token_cross_entropy(token_logits.reshape(-1, token_logits.shape[-1]), targets.reshape(-1))


def make_ar_sample(corpus: Corpus, i: int, rng, config: TrainConfig) -> TrainSample:
    h, w = corpus.grid_shape
    combo = sample_control_combo(rng, config.combo_probs)
    controls = make_controls(corpus, i, combo, rng, config.max_visuals)
    layout = build_sequence(controls, corpus.grids[i].reshape(-1), np.zeros(h * w, dtype=bool),
                            corpus.vocab, w)
    return TrainSample(layout, controls, msm=False, rel_label=None, fdl_label=None, combo=combo)


def train_ar(corpus: Corpus, config: TrainConfig, out_dir=None, model: ControlTransformer | None = None,
             progress=None) -> tuple[ControlTransformer, TrainReport]:
    """Teacher-forced left-to-right training of the causal baseline."""
    started = time.perf_counter()
    model = model or new_model(config, corpus, causal=True)
    if not model.config.causal:
        raise ValueError("train_ar needs a causal model")
    opt = Adam(model, lr=config.lr)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    report = TrainReport()
    steps_per_epoch = math.ceil(len(corpus) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(len(corpus))
        running = []
        model.train()
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            samples = [make_ar_sample(corpus, int(i), np.random.default_rng([config.seed, 2, epoch, int(i)]), config)
                       for i in idx]
            out = forward([s.layout for s in samples], model)
            loss = ar_loss(out.token_logits, samples)
            _train_step(model, opt, loss, step, total_steps, config, out_dir, report.checkpoints)
            step += 1
            running.append(loss.item())
            report.losses.append(running[-1])
        model.eval()
        report.epoch_losses.append(float(np.mean(running)))
        if progress:
            progress(f"ar epoch {epoch + 1}/{config.epochs} loss {report.epoch_losses[-1]:.4f} "
                     f"({time.perf_counter() - started:.0f}s)")
        if out_dir is not None:
            path = out_dir / f"ar_epoch_{epoch + 1:03d}.ufcb"
            save_checkpoint(model, path)
            report.checkpoints.append(path)
    if out_dir is not None:
        save_checkpoint(model, out_dir / "ar_final.ufcb")
    report.seconds = time.perf_counter() - started
    return model, report


@torch.no_grad()
def ar_heldout_nll(model: ControlTransformer, corpus: Corpus, config: TrainConfig, seed: int = 0) -> float:
    """Mean per-token negative log-likelihood on ``corpus`` with the training control mix."""
    rng = np.random.default_rng(seed)
    samples = [make_ar_sample(corpus, i, rng, config) for i in range(len(corpus))]
    total = 0.0
    for lo in range(0, len(samples), 64):
        chunk = samples[lo:lo + 64]
        out = forward([s.layout for s in chunk], model)
        total += float(ar_loss(out.token_logits, chunk)) * len(chunk)
    return total / len(samples)
