"""Shared builders for small models and layouts."""

import numpy as np
import torch

from ctrlsynth.codec import ControlSet, Vocabulary, build_sequence
from ctrlsynth.data import LEXICON
from ctrlsynth.model import ControlTransformer, ModelConfig, forward
from ctrlsynth.nn import backward
from ctrlsynth.train import TrainSample, binary_loss, msm_loss, total_loss

SMALL_K = 16
SMALL_H = SMALL_W = 4


def small_vocab(K=SMALL_K):
    return Vocabulary(LEXICON, K)


def small_model(width=16, n_layers=1, causal=False, seed=0, K=SMALL_K, h=SMALL_H, w=SMALL_W, heads=4):
    torch.manual_seed(seed)
    vocab = small_vocab(K)
    cfg = ModelConfig(vocab_size=vocab.size, K=K, n_image=h * w, grid_w=w, n_layers=n_layers,
                      d_model=width, n_heads=heads, d_ff=2 * width, max_text=8, causal=causal)
    return ControlTransformer(cfg).double(), vocab


def random_layouts(vocab, n, rng, h=SMALL_H, w=SMALL_W, with_mask=True):
    words = list(LEXICON)
    out = []
    for _ in range(n):
        text = vocab.encode_text(rng.choice(words, size=rng.integers(0, 6)).tolist()) or None
        visuals = [rng.integers(0, vocab.K, size=(rng.integers(1, h), rng.integers(1, w)))
                   for _ in range(rng.integers(0, 3))]
        target = rng.integers(0, vocab.K, size=h * w)
        mask = rng.random(h * w) < 0.5 if with_mask else np.zeros(h * w, dtype=bool)
        mask[rng.integers(h * w)] = with_mask
        out.append(build_sequence(ControlSet(text, visuals), target, mask, vocab, w))
    return out


def tiny_model_and_batch(width=16, n_layers=1, seed=0):
    model, vocab = small_model(width, n_layers, seed=seed)
    # push the weights away from their zero-bias init so every path carries gradient
    with torch.no_grad():
        g = torch.Generator().manual_seed(seed + 1)
        for p in model.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    rng = np.random.default_rng(seed)
    layouts = random_layouts(vocab, 4, rng)
    samples = [TrainSample(l, ControlSet(), rel_label=int(i % 2), fdl_label=int(i < 2))
               for i, l in enumerate(layouts)]

    def loss_fn(m):
        out = forward([s.layout for s in samples], m)
        return total_loss(
            msm_loss(out.token_logits, samples),
            binary_loss(out.rel_logit, [s.rel_label for s in samples]),
            binary_loss(out.fdl_logit, [s.fdl_label for s in samples]),
        )

    return model, loss_fn


def finite_difference_check(model, loss_fn, eps=1e-4, per_tensor=12, seed=0):
    """Worst relative error between analytic and central-difference gradients on sampled entries."""
    grads = backward(loss_fn(model), model)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            g = grads[name].reshape(-1)
            picks = rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
            for i in picks:
                old = flat[i].item()
                flat[i] = old + eps
                up = float(loss_fn(model))
                flat[i] = old - eps
                down = float(loss_fn(model))
                flat[i] = old
                numeric = (up - down) / (2 * eps)
                analytic = float(g[i])
                scale = max(abs(numeric), abs(analytic), 1e-6)
                worst = max(worst, abs(numeric - analytic) / scale)
    return worst
