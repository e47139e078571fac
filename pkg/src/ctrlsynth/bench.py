"""Evaluation harness: decoding latency, control compliance, and preservation exactness."""

from __future__ import annotations

import gc
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats

from . import data, vq
from .codec import ControlSet, Vocabulary
from .decode import DecodeResult, PnagConfig, UnsupportedControl, ar_decode, mnag_decode, pnag_decode
from .model import ControlTransformer

DecodeFn = Callable[[ControlSet, int], DecodeResult]
CHANCE_RATE = 1 / len(data.all_specs())
WARMUP = 5


def pnag_fn(model, vocab, config: PnagConfig = PnagConfig()) -> DecodeFn:
    return lambda controls, seed: pnag_decode(controls, model, vocab, config, seed)


def mnag_fn(model, vocab, T: int = 10) -> DecodeFn:
    return lambda controls, seed: mnag_decode(controls, model, vocab, T, seed)


def ar_fn(model, vocab) -> DecodeFn:
    return lambda controls, seed: ar_decode(controls, model, vocab, seed)


@dataclass
class RateResult:
    rate: float
    low: float
    high: float
    n: int
    outcomes: np.ndarray = field(repr=False)


def binomial_interval(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    ci = stats.binomtest(k, n).proportion_ci(confidence_level=level, method="exact")
    return float(ci.low), float(ci.high)


def _rate(outcomes) -> RateResult:
    outcomes = np.asarray(outcomes, dtype=bool)
    k, n = int(outcomes.sum()), len(outcomes)
    low, high = binomial_interval(k, n)
    return RateResult(k / n if n else 0.0, low, high, n, outcomes)


def prompt_specs(n: int, seed: int) -> list[data.AttributeSpec]:
    """n prompts cycling through seeded permutations of all specs, so coverage is balanced."""
    rng = np.random.default_rng([seed, 0])
    specs = data.all_specs()
    out: list[data.AttributeSpec] = []
    while len(out) < n:
        out.extend(specs[i] for i in rng.permutation(len(specs)))
    return out[:n]


def compliance_suite(decode_fn: DecodeFn, vocab: Vocabulary, codebook: vq.Codebook, n_prompts: int,
                     seed: int = 0, grid_shape: tuple[int, int] = (8, 8)) -> RateResult:
    """Text-only prompts; each decoded image is judged by the compliance oracle."""
    outcomes = []
    for i, spec in enumerate(prompt_specs(n_prompts, seed)):
        result = decode_fn(ControlSet(vocab.encode_text(spec.words)), seed * 100003 + i)
        image = vq.decode_tokens(result.codes.reshape(grid_shape), codebook)
        outcomes.append(data.compliance_oracle(image, spec.words))
    return _rate(outcomes)


@dataclass
class PairedComparison:
    a: RateResult
    b: RateResult
    wins: int  # prompts where a complied and b did not
    losses: int
    p_value: float  # one-sided exact sign test that a beats b

    @property
    def difference(self) -> float:
        return self.a.rate - self.b.rate

    def a_better(self, level: float = 0.95) -> bool:
        return self.p_value < 1 - level


def paired_comparison(a: RateResult, b: RateResult) -> PairedComparison:
    if a.n != b.n:
        raise ValueError("paired comparison needs the same prompts")
    wins = int((a.outcomes & ~b.outcomes).sum())
    losses = int((~a.outcomes & b.outcomes).sum())
    p = stats.binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue if wins + losses else 1.0
    return PairedComparison(a, b, wins, losses, float(p))


@dataclass
class PreservationResult:
    rate: float
    n_cases: int
    exact: int
    unsupported: int


def random_preservation(rng: np.random.Generator, grid: np.ndarray) -> np.ndarray:
    """Boolean mask for one random axis-aligned box (possibly empty) over ``grid``."""
    h, w = grid.shape
    r0, c0 = rng.integers(0, h + 1), rng.integers(0, w + 1)
    r1, c1 = rng.integers(r0, h + 1), rng.integers(c0, w + 1)
    mask = np.zeros((h, w), dtype=bool)
    mask[r0:r1, c0:c1] = True
    return mask


def preservation_suite(decode_fn: DecodeFn, vocab: Vocabulary, grids: list[np.ndarray], n_cases: int,
                       seed: int = 0, with_text: bool = True) -> PreservationResult:
    """Decode with random preserved boxes; a case is exact when every preserved code survives.

    Decoders that refuse the control (``UnsupportedControl``) are counted, not raised.
    """
    rng = np.random.default_rng([seed, 1])
    specs = data.all_specs()
    exact = unsupported = 0
    for i in range(n_cases):
        grid = np.asarray(grids[rng.integers(len(grids))])
        mask = random_preservation(rng, grid)
        text = vocab.encode_text(specs[rng.integers(len(specs))].words) if with_text else None
        controls = ControlSet.preserve(grid, mask, text=text)
        try:
            codes = decode_fn(controls, seed * 100003 + i).codes
        except UnsupportedControl:
            unsupported += 1
            continue
        flat = mask.reshape(-1)
        exact += bool(np.array_equal(codes[flat], grid.reshape(-1)[flat]))
    return PreservationResult(exact / n_cases if n_cases else 1.0, n_cases, exact, unsupported)


@dataclass
class MethodTiming:
    name: str
    seconds: np.ndarray
    forward_passes: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.seconds.mean())

    @property
    def p50(self) -> float:
        return float(np.percentile(self.seconds, 50))

    @property
    def p95(self) -> float:
        return float(np.percentile(self.seconds, 95))


@dataclass
class BenchReport:
    timings: dict[str, MethodTiming] = field(default_factory=dict)
    compliance: dict[str, RateResult] = field(default_factory=dict)
    preservation: dict[str, PreservationResult] = field(default_factory=dict)
    extra: dict[str, float] = field(default_factory=dict)

    def ratio(self, slow: str, fast: str) -> float:
        return self.timings[slow].mean / self.timings[fast].mean

    def items(self) -> list[tuple[str, str]]:
        out = []
        for name, t in self.timings.items():
            out += [(f"{name}.sec_mean", f"{t.mean:.6f}"), (f"{name}.sec_p50", f"{t.p50:.6f}"),
                    (f"{name}.sec_p95", f"{t.p95:.6f}"),
                    (f"{name}.forward_passes_mean", f"{t.forward_passes.mean():.3f}"),
                    (f"{name}.forward_passes_max", str(int(t.forward_passes.max())))]
        for name, r in self.compliance.items():
            out += [(f"{name}.compliance", f"{r.rate:.4f}"), (f"{name}.compliance_low", f"{r.low:.4f}"),
                    (f"{name}.compliance_high", f"{r.high:.4f}"), (f"{name}.prompts", str(r.n))]
        for name, p in self.preservation.items():
            out += [(f"{name}.preservation", f"{p.rate:.4f}"), (f"{name}.preservation_cases", str(p.n_cases)),
                    (f"{name}.unsupported", str(p.unsupported))]
        out += [(k, f"{v:.6g}") for k, v in self.extra.items()]
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.items())

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def table(self) -> str:
        names = list(dict.fromkeys([*self.timings, *self.compliance, *self.preservation]))
        header = ("method", "sec/sample", "p50", "p95", "passes", "compliance", "95% CI", "preserved")
        rows = [header]
        for n in names:
            t, c, p = self.timings.get(n), self.compliance.get(n), self.preservation.get(n)
            rows.append((
                n,
                f"{t.mean:.4f}" if t else "-", f"{t.p50:.4f}" if t else "-", f"{t.p95:.4f}" if t else "-",
                f"{t.forward_passes.mean():.1f}" if t else "-",
                f"{c.rate:.3f}" if c else "-", f"[{c.low:.3f}, {c.high:.3f}]" if c else "-",
                f"{p.rate:.3f}" if p else "-",
            ))
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
        lines += [f"{k} = {v}" for k, v in self.items() if "." not in k]
        return "\n".join(lines)


def check_matching(ar_model: ControlTransformer, nar_model: ControlTransformer) -> None:
    a, b = ar_model.config, nar_model.config
    keys = ("vocab_size", "K", "n_image", "n_layers", "d_model", "n_heads", "d_ff")
    if any(getattr(a, k) != getattr(b, k) for k in keys) or not a.causal or b.causal:
        raise ValueError("benchmark needs a causal and a bidirectional model of identical size")
    if ar_model.dtype != nar_model.dtype:
        raise ValueError("models use different dtypes")


def time_method(name: str, decode_fn: DecodeFn, model: ControlTransformer, prompts: list[ControlSet],
                seed: int = 0, warmup: int = WARMUP) -> MethodTiming:
    for i in range(warmup):
        decode_fn(prompts[i % len(prompts)], seed + 10**6 + i)
    seconds, passes = [], []
    # as timeit does: keep collector pauses out of the measurement
    gc.collect()
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i, controls in enumerate(prompts):
            start = model.forward_count
            t0 = time.perf_counter()
            decode_fn(controls, seed + i)
            seconds.append(time.perf_counter() - t0)
            passes.append(model.forward_count - start)
    finally:
        if was_enabled:
            gc.enable()
    return MethodTiming(name, np.array(seconds), np.array(passes))


def benchmark_speed(ar_model: ControlTransformer, nar_model: ControlTransformer, vocab: Vocabulary,
                    configs: dict[str, PnagConfig], n_samples: int = 100, seed: int = 0,
                    include_mnag: bool = True, warmup: int = WARMUP) -> BenchReport:
    """Time AR decoding against each PNAG config (and MNAG) on the same text prompts."""
    check_matching(ar_model, nar_model)
    prompts = [ControlSet(vocab.encode_text(s.words)) for s in prompt_specs(n_samples, seed)]
    report = BenchReport()
    report.timings["ar"] = time_method("ar", ar_fn(ar_model, vocab), ar_model, prompts, seed, warmup)
    if include_mnag:
        report.timings["mnag"] = time_method("mnag", mnag_fn(nar_model, vocab), nar_model, prompts, seed, warmup)
    for name, cfg in configs.items():
        report.timings[name] = time_method(name, pnag_fn(nar_model, vocab, cfg), nar_model, prompts, seed, warmup)
    return report
