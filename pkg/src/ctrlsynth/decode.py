"""Inference: progressive non-autoregressive decoding (PNAG), Mask-Predict (MNAG), and
left-to-right decoding for the causal baseline.

Randomness is drawn from per-purpose substreams keyed on ``(seed, t, b)``, so
candidate construction does not depend on evaluation order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec import MASK, ControlSet, LayoutSequence, Vocabulary, build_sequence
from .model import ARSession, ControlTransformer, collate, forward


class UnsupportedControl(ValueError):
    pass


REMASK_MODES = ("inverse_confidence", "confidence", "lowest")


@dataclass(frozen=True)
class PnagConfig:
    B: int = 5
    sigma: float = 0.5
    alpha: float = 0.8
    beta: float = 0.2
    T: int = 10
    patience: int | None = 3  # None runs all T iterations
    temperature: float = 1.0
    greedy: bool = False
    remask_weighting: str = "inverse_confidence"
    select_final: bool = False  # MNAG keeps the last iteration instead of the best-scored one

    def __post_init__(self):
        if self.B < 1 or self.T < 1:
            raise ValueError("B and T must be >= 1")
        if not 0 <= self.sigma <= 1:
            raise ValueError("sigma must lie in [0, 1]")
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta > 1 + 1e-12:
            raise ValueError("need alpha, beta >= 0 and alpha + beta <= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.remask_weighting not in REMASK_MODES:
            raise ValueError(f"remask_weighting must be one of {REMASK_MODES}")


def mask_count(t: int, config: PnagConfig, n_image: int, n_maskable: int | None = None) -> int:
    """floor(N_I * (alpha + (T - t) / (T - 1) * beta)), clamped to the maskable count."""
    if not 1 <= t <= config.T:
        raise ValueError(f"iteration {t} outside 1..{config.T}")
    decay = 0.0 if config.T == 1 else (config.T - t) / (config.T - 1)
    # rounding guard so exact products such as 64 * 1.0 do not floor to 63
    n = math.floor(n_image * (config.alpha + decay * config.beta) + 1e-9)
    limit = n_image if n_maskable is None else n_maskable
    return max(0, min(n, limit))


@dataclass
class DecodeState:
    codes: np.ndarray  # -1 where nothing has been predicted yet
    confidence: np.ndarray
    preserved: np.ndarray
    s_max: float = 0.0
    t_max: int = 0
    best_codes: np.ndarray | None = None
    stall: int = 0

    @classmethod
    def initial(cls, controls: ControlSet, n_image: int) -> "DecodeState":
        keep = controls.preserved(n_image)
        codes = np.full(n_image, -1, dtype=np.int64)
        if keep.any():
            codes[keep] = controls.preserved_codes[keep]
        confidence = np.where(keep, 1.0, 0.0)
        return cls(codes, confidence, keep, best_codes=codes.copy())


@dataclass
class TraceRecord:
    t: int
    scores: np.ndarray
    selected: int
    mask: np.ndarray
    codes: np.ndarray
    candidate_masks: list[np.ndarray] = field(default_factory=list, repr=False)


@dataclass
class DecodeResult:
    codes: np.ndarray
    trace: list[TraceRecord]
    t_max: int
    s_max: float
    forward_passes: int

    @property
    def iterations(self) -> int:
        return len(self.trace)


def _rng(seed: int, t: int, b: int) -> np.random.Generator:
    return np.random.default_rng([seed, t, b])


def remask(state: DecodeState, n: int, config: PnagConfig, rng: np.random.Generator | None) -> np.ndarray:
    """Pick ``n`` non-preserved positions to mask; never-predicted positions are always masked."""
    maskable = np.flatnonzero(~state.preserved)
    n = min(n, len(maskable))
    y = state.confidence[maskable]
    if n == 0:
        chosen = maskable[:0]
    elif config.remask_weighting == "lowest":
        chosen = maskable[np.argsort(y, kind="stable")[:n]]
    else:
        w = 1.0 - y if config.remask_weighting == "inverse_confidence" else y.copy()
        w = np.maximum(w, 1e-12)
        # weighted sampling without replacement: the n largest log(u) / w keys
        keys = np.log(rng.random(len(w))) / w
        chosen = maskable[np.argpartition(-keys, n - 1)[:n]]
    mask = np.zeros(len(state.codes), dtype=bool)
    mask[chosen] = True
    mask |= state.codes < 0
    return mask


def remask_candidates(state: DecodeState, t: int, config: PnagConfig, seed: int) -> list[np.ndarray]:
    """One mask per candidate b, each drawn from its own ``(seed, t, b)`` stream."""
    n_maskable = int((~state.preserved).sum())
    n = mask_count(t, config, len(state.codes), n_maskable)
    return [remask(state, n, config, _rng(seed, t, b)) for b in range(config.B)]


class CandidateBatch:
    """Collated tensors for one control layout, reused across iterations.

    Only the target tokens differ between candidates and iterations, so each
    step rewrites those slots instead of rebuilding the batch.
    """

    def __init__(self, base: LayoutSequence, model: ControlTransformer):
        self.model = model
        self.template = collate([base], model)
        self.slots = self.template["target_index"][0]
        self.keep = base.preserved[base.target_slice]
        self.kept_codes = base.targets
        self.code_offset = base.code_offset

    def __call__(self, codes: np.ndarray, masks: list[np.ndarray]) -> dict:
        filled = np.where(self.keep, self.kept_codes, np.maximum(codes, 0)) + self.code_offset
        targets = np.where(np.stack(masks), MASK, filled)
        n = len(masks)
        batch = {k: v.expand(n, *v.shape[1:]) for k, v in self.template.items()}
        tokens = self.template["tokens"].repeat(n, 1)
        tokens[:, self.slots] = torch.from_numpy(targets)
        batch["tokens"] = tokens
        return batch


def comprehensive_score(rel: float, fdl: float, sigma: float) -> float:
    return sigma * rel + (1 - sigma) * fdl


def score_candidate(layout, model: ControlTransformer, sigma: float) -> float:
    with torch.no_grad():
        out = forward([layout], model)
    return comprehensive_score(float(out.rel_score()[0]), float(out.fdl_score()[0]), sigma)


def predict_step(logits: torch.Tensor, mask: np.ndarray, codes: np.ndarray, confidence: np.ndarray,
                 rng: np.random.Generator, temperature: float = 1.0, greedy: bool = False):
    """Sample every masked position from softmax(logits / temperature).

    Confidence receives the untempered probability of the sampled code.
    Returns new (codes, confidence) arrays.
    """
    codes, confidence = codes.copy(), confidence.copy()
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        return codes, confidence
    rows = logits[torch.from_numpy(idx)].to(torch.float64)
    probs = torch.softmax(rows, dim=-1).numpy()
    if greedy:
        picks = probs.argmax(-1)
    else:
        tempered = probs if temperature == 1.0 else torch.softmax(rows / temperature, dim=-1).numpy()
        cdf = np.cumsum(tempered, axis=-1)
        u = rng.random(len(idx)) * cdf[:, -1]
        picks = np.minimum((cdf < u[:, None]).sum(-1), probs.shape[-1] - 1)
    codes[idx] = picks
    confidence[idx] = probs[np.arange(len(idx)), picks]
    return codes, confidence


def _check_model(model: ControlTransformer, vocab: Vocabulary, causal: bool) -> None:
    c = model.config
    if c.K != vocab.K or c.vocab_size != vocab.size:
        raise ValueError("model and vocabulary disagree on K or vocabulary size")
    if c.causal != causal:
        raise ValueError("wrong model mode for this decoder")


def pnag_decode(controls: ControlSet, model: ControlTransformer, vocab: Vocabulary,
                config: PnagConfig = PnagConfig(), seed: int = 0) -> DecodeResult:
    _check_model(model, vocab, causal=False)
    n_image, grid_w = model.config.n_image, model.config.grid_w
    state = DecodeState.initial(controls, n_image)
    base = build_sequence(controls, np.where(state.codes < 0, 0, state.codes),
                          ~state.preserved, vocab, grid_w)
    batch = CandidateBatch(base, model)
    start_count = model.forward_count
    trace: list[TraceRecord] = []
    for t in range(1, config.T + 1):
        masks = remask_candidates(state, t, config, seed)
        with torch.inference_mode():
            out = model(batch(state.codes, masks))
        scores = (config.sigma * out.rel_score() + (1 - config.sigma) * out.fdl_score()).numpy()
        b = int(np.argmax(scores))
        mask = masks[b]
        # the selected candidate's forward already holds its token distributions
        state.codes, state.confidence = predict_step(
            out.token_logits[b], mask, state.codes, state.confidence,
            _rng(seed, t, config.B), config.temperature, config.greedy,
        )
        trace.append(TraceRecord(t, scores.astype(np.float64), b, mask, state.codes.copy(),
                                 masks))
        score = float(scores[b])
        if config.select_final:
            state.t_max, state.best_codes, state.s_max = t, state.codes.copy(), score
        elif score > state.s_max:
            state.s_max, state.t_max, state.best_codes, state.stall = score, t, state.codes.copy(), 0
        else:
            state.stall += 1
        if config.patience is not None and state.stall >= config.patience:
            break
    return DecodeResult(state.best_codes.copy(), trace, state.t_max, state.s_max,
                        model.forward_count - start_count)


def mnag_config(T: int = 10, alpha: float = 0.8, beta: float = 0.2, temperature: float = 1.0,
                greedy: bool = False) -> PnagConfig:
    return PnagConfig(B=1, alpha=alpha, beta=beta, T=T, patience=None, temperature=temperature,
                      greedy=greedy, remask_weighting="lowest", select_final=True)


def mnag_decode(controls: ControlSet, model: ControlTransformer, vocab: Vocabulary, T: int = 10,
                seed: int = 0, **kwargs) -> DecodeResult:
    """Mask-Predict: one candidate, lowest-confidence re-masking, exactly T iterations."""
    return pnag_decode(controls, model, vocab, mnag_config(T, **kwargs), seed)


def _ar_prefix(controls: ControlSet, n_image: int) -> np.ndarray:
    keep = controls.preserved(n_image)
    k = int(np.argmin(keep)) if not keep.all() else n_image
    if keep[k:].any():
        raise UnsupportedControl(
            "left-to-right decoding only honours preserved blocks at the start of the sequence"
        )
    return controls.preserved_codes[:k] if k else np.zeros(0, dtype=np.int64)


def ar_decode(controls: ControlSet, model: ControlTransformer, vocab: Vocabulary, seed: int = 0,
              temperature: float = 1.0, greedy: bool = False, use_cache: bool = True) -> DecodeResult:
    _check_model(model, vocab, causal=True)
    n_image = model.config.n_image
    prefix = _ar_prefix(controls, n_image)
    layout = build_sequence(ControlSet(controls.text, controls.visuals), np.zeros(n_image, dtype=np.int64),
                            np.ones(n_image, dtype=bool), vocab, model.config.grid_w)
    rng = np.random.default_rng(seed)
    codes = np.full(n_image, -1, dtype=np.int64)
    confidence = np.zeros(n_image)
    start_count = model.forward_count
    session = ARSession(model, layout) if use_cache else None
    for i in range(n_image):
        if session is not None:
            logits = session.start() if i == 0 else session.step(int(codes[i - 1]))
        else:
            partial = np.zeros(n_image, dtype=bool)
            partial[i:] = True
            with torch.no_grad():
                out = forward([layout.with_targets(np.maximum(codes, 0), partial)], model)
            logits = out.token_logits[0, i]
        if i < len(prefix):
            codes[i], confidence[i] = prefix[i], 1.0
            continue
        step_mask = np.zeros(1, dtype=bool)
        step_mask[0] = True
        c, y = predict_step(logits[None], step_mask, codes[i:i + 1], confidence[i:i + 1], rng,
                            temperature, greedy)
        codes[i], confidence[i] = c[0], y[0]
    return DecodeResult(codes, [], 0, 0.0, model.forward_count - start_count)


TRACE_MAGIC = b"UFCT"
TRACE_VERSION = 1


def write_trace(result: DecodeResult, path) -> None:
    """Binary trace: header, then per iteration t, B scores, selected b, mask bits, u16 codes."""
    trace = result.trace
    n_image = len(result.codes)
    B = len(trace[0].scores) if trace else 0
    out = bytearray(TRACE_MAGIC)
    out += struct.pack("<IIIII", TRACE_VERSION, n_image, B, len(trace), result.t_max)
    for rec in trace:
        out += struct.pack("<I", rec.t)
        out += np.asarray(rec.scores, dtype="<f8").tobytes()
        out += struct.pack("<I", rec.selected)
        out += np.packbits(rec.mask.astype(np.uint8), bitorder="little").tobytes()
        out += np.maximum(rec.codes, 0).astype("<u2").tobytes()
    Path(path).write_bytes(bytes(out))


def read_trace(path) -> tuple[int, list[TraceRecord]]:
    raw = Path(path).read_bytes()
    if raw[:4] != TRACE_MAGIC:
        raise ValueError(f"{path}: not a trace file")
    version, n_image, B, count, t_max = struct.unpack_from("<IIIII", raw, 4)
    if version != TRACE_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos, records = 24, []
    nbytes = (n_image + 7) // 8
    for _ in range(count):
        (t,) = struct.unpack_from("<I", raw, pos)
        scores = np.frombuffer(raw, "<f8", B, pos + 4).copy()
        pos += 4 + 8 * B
        (selected,) = struct.unpack_from("<I", raw, pos)
        bits = np.frombuffer(raw, np.uint8, nbytes, pos + 4)
        mask = np.unpackbits(bits, count=n_image, bitorder="little").astype(bool)
        pos += 4 + nbytes
        codes = np.frombuffer(raw, "<u2", n_image, pos).astype(np.int64)
        pos += 2 * n_image
        records.append(TraceRecord(t, scores, selected, mask, codes))
    return t_max, records


def trace_summary(result: DecodeResult) -> str:
    lines = [f"{'t':>3} {'selected':>8} {'masked':>6}  scores"]
    for rec in result.trace:
        scores = " ".join(f"{s:.4f}" for s in rec.scores)
        lines.append(f"{rec.t:>3} {rec.selected:>8} {int(rec.mask.sum()):>6}  {scores}")
    lines.append(f"best iteration {result.t_max} score {result.s_max:.4f}, "
                 f"{result.forward_passes} forward passes")
    return "\n".join(lines)

