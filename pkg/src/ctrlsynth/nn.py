"""Tensor engine: thin layers over torch autograd plus the few contracts the rest of the
package relies on (probability floor, single-use backward, NaN-guarded Adam)."""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

PROB_FLOOR = 1e-12


class StateError(RuntimeError):
    pass


def softmax(logits, dim: int = -1) -> torch.Tensor:
    logits = torch.as_tensor(logits, dtype=torch.float64)
    if logits.numel() == 0:
        raise ValueError("softmax of an empty vector")
    shifted = logits - logits.amax(dim=dim, keepdim=True)
    e = shifted.exp()
    return e / e.sum(dim=dim, keepdim=True)


def cross_entropy(probs, target: int) -> float:
    """-ln(probs[target]), with the probability clamped at 1e-12."""
    probs = torch.as_tensor(probs, dtype=torch.float64)
    if not 0 <= target < probs.shape[-1]:
        raise IndexError(f"target {target} out of range for {probs.shape[-1]} classes")
    return float(-torch.log(probs[..., target].clamp_min(PROB_FLOOR)))


def token_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over rows of ``logits``; log-probabilities floored like ``cross_entropy``."""
    logp = F.log_softmax(logits, dim=-1).clamp_min(math.log(PROB_FLOOR))
    return -logp.gather(-1, targets[:, None]).mean()


def causal_mask(n: int) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool).tril()


class SelfAttention(nn.Module):
    """Multi-head self-attention. ``attn_mask[i, j]`` True lets position i read position j."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.last_weights: torch.Tensor | None = None

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        b, n, d = t.shape
        return t.view(b, n, self.n_heads, d // self.n_heads).transpose(1, 2)

    def forward(self, x, attn_mask=None, cache=None, keep_weights=False):
        b, n, d = x.shape
        q, k, v = (self._split(t) for t in self.qkv(x).chunk(3, dim=-1))
        if cache is not None:
            if cache.get("k") is not None:
                k = torch.cat([cache["k"], k], dim=2)
                v = torch.cat([cache["v"], v], dim=2)
            cache["k"], cache["v"] = k, v
        if attn_mask is not None and attn_mask.shape[-2:] != (n, k.shape[2]):
            raise ValueError(f"attn_mask {tuple(attn_mask.shape)} does not match {n}x{k.shape[2]}")
        m = None
        if attn_mask is not None:
            m = attn_mask if attn_mask.dim() == 4 else attn_mask.view(-1, 1, *attn_mask.shape[-2:])
        if keep_weights:
            scores = q @ k.transpose(-1, -2) / math.sqrt(d // self.n_heads)
            if m is not None:
                scores = scores.masked_fill(~m, float("-inf"))
            self.last_weights = torch.softmax(scores, dim=-1)
            out = self.last_weights @ v
        else:
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=m)
        out = out.transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, d_ff), nn.GELU(), nn.Linear(d_ff, d_model))

    def forward(self, x, attn_mask=None, cache=None):
        x = x + self.attn(self.ln1(x), attn_mask, cache)
        return x + self.ff(self.ln2(x))


def attention_layer(x, block: Block, attn_mask) -> torch.Tensor:
    """Apply one block to a single (seq, width) sequence."""
    x = torch.as_tensor(x)
    attn_mask = torch.as_tensor(attn_mask, dtype=torch.bool)
    if x.dim() != 2 or attn_mask.shape != (x.shape[0], x.shape[0]):
        raise ValueError(f"input {tuple(x.shape)} and mask {tuple(attn_mask.shape)} disagree")
    return block(x[None], attn_mask[None])[0]


def backward(loss: torch.Tensor, module: nn.Module) -> dict[str, torch.Tensor]:
    """Gradients of a scalar loss for every named parameter of ``module``.

    A loss can be differentiated once; a second call raises ``StateError``.
    """
    if getattr(loss, "_spent", False):
        raise StateError("backward already ran for this loss; run a new forward pass")
    names, params = zip(*module.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    loss._spent = True
    return {
        name: torch.zeros_like(p) if g is None else g
        for name, p, g in zip(names, params, grads)
    }


class Adam:
    """Adam with bias correction over a module's parameters; refuses non-finite gradients."""

    def __init__(self, module: nn.Module, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.module = module
        self.opt = torch.optim.Adam(module.parameters(), lr=lr, betas=betas, eps=eps)

    @property
    def lr(self) -> float:
        return self.opt.param_groups[0]["lr"]

    @lr.setter
    def lr(self, value: float) -> None:
        for group in self.opt.param_groups:
            group["lr"] = value

    def step(self, grads: dict[str, torch.Tensor]) -> None:
        bad = [n for n, g in grads.items() if not torch.isfinite(g).all()]
        if bad:
            raise FloatingPointError(f"non-finite gradient in {', '.join(bad)}")
        for name, p in self.module.named_parameters():
            p.grad = grads[name].to(p.dtype)
        self.opt.step()
        self.opt.zero_grad(set_to_none=True)
