"""Conformer backbone: residual half-step feed-forward, self-attention, convolution.

One block computes
    y = x + 1/2 FF(x)
    y = y + MSA(y)
    y = y + Conv(y)
    out = LayerNorm(y + 1/2 FF(y))
over a sequence of tokens. A flattened length-k frame is factored into
`tokens` tokens of width k/tokens (path-major), so attention mixes sniffing
paths globally while the convolution picks up local subcarrier structure
within each token. tokens=1 keeps the frame as a single vector.

All arithmetic defaults to float64 so analytic (autograd) gradients can be
validated against central finite differences at tight tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

DEFAULT_DTYPE = torch.float64


@dataclass(frozen=True)
class ConformerConfig:
    k: int  # flattened input dimension e * f
    L: int = 4  # number of blocks
    n: int = 6  # attention heads
    d_ff: int = 128  # feed-forward hidden width
    Ke: int = 15  # convolution kernel size (odd)
    tokens: int = 1  # sequence factorization of the k-vector
    project_io: bool = True  # learned input/output layers around the blocks

    def __post_init__(self) -> None:
        if self.k < 1 or self.L < 1 or self.n < 1 or self.d_ff < 1:
            raise ValueError("k, L, n, d_ff must all be >= 1")
        if self.Ke < 1 or self.Ke % 2 == 0:
            raise ValueError(f"convolution kernel must be odd, got {self.Ke}")
        if self.tokens < 1 or self.k % self.tokens != 0:
            raise ValueError(f"tokens={self.tokens} must divide k={self.k}")
        if self.d_token % self.n != 0:
            raise ValueError(
                f"token width {self.d_token} not divisible by n={self.n} heads"
            )

    @property
    def d_token(self) -> int:
        return self.k // self.tokens

    @property
    def d_head(self) -> int:
        return self.d_token // self.n


def init_linear(weight: torch.Tensor, bias: torch.Tensor | None, gen: torch.Generator) -> None:
    """Scaled-uniform fan-in initialization U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    fan_in = weight.shape[1]
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=gen)
        if bias is not None:
            bias.uniform_(-bound, bound, generator=gen)


class FeedForward(nn.Module):
    """Two-layer expand/contract feed-forward with a smooth activation."""

    def __init__(self, d: int, d_ff: int, gen: torch.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(d_ff, d, dtype=dtype))
        self.b1 = nn.Parameter(torch.empty(d_ff, dtype=dtype))
        self.w2 = nn.Parameter(torch.empty(d, d_ff, dtype=dtype))
        self.b2 = nn.Parameter(torch.empty(d, dtype=dtype))
        init_linear(self.w1, self.b1, gen)
        init_linear(self.w2, self.b2, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(F.silu(F.linear(x, self.w1, self.b1)), self.w2, self.b2)


class SelfAttention(nn.Module):
    """Multi-head scaled dot-product self-attention over the token sequence.

    Per head: Softmax(Q K^T / sqrt(d_head)) V with Q = y W_Q, K = y W_K,
    V = y W_V; heads concatenate and project through W_O. No positional
    encoding, so the module is equivariant to token permutations.
    """

    def __init__(self, d: int, n_heads: int, gen: torch.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        if d % n_heads != 0:
            raise ValueError(f"width {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.wq = nn.Parameter(torch.empty(d, d, dtype=dtype))
        self.wk = nn.Parameter(torch.empty(d, d, dtype=dtype))
        self.wv = nn.Parameter(torch.empty(d, d, dtype=dtype))
        self.wo = nn.Parameter(torch.empty(d, d, dtype=dtype))
        for w in (self.wq, self.wk, self.wv, self.wo):
            init_linear(w, None, gen)

    def attention_weights(self, y: torch.Tensor) -> torch.Tensor:
        """Softmax attention matrix, shape (..., heads, T, T); rows sum to 1."""
        q = self._split(y @ self.wq)
        k = self._split(y @ self.wk)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        return torch.softmax(scores, dim=-1)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        # (..., T, d) -> (..., heads, T, d_head)
        *lead, T, d = t.shape
        return t.view(*lead, T, self.n_heads, self.d_head).transpose(-3, -2)

    def _merge(self, t: torch.Tensor) -> torch.Tensor:
        *lead, _, T, _ = t.shape
        return t.transpose(-3, -2).reshape(*lead, T, self.n_heads * self.d_head)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        attn = self.attention_weights(y)
        v = self._split(y @ self.wv)
        return self._merge(attn @ v) @ self.wo


class ConvModule(nn.Module):
    """ReLU of a same-padded 1-D convolution along each token's feature axis.

    A single length-Ke kernel and scalar bias, shared across positions and
    tokens; a centered unit kernel with zero bias reduces to ReLU(input).
    """

    def __init__(self, Ke: int, gen: torch.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        if Ke % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {Ke}")
        self.Ke = Ke
        self.kernel = nn.Parameter(torch.empty(Ke, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros((), dtype=dtype))
        bound = 1.0 / math.sqrt(Ke)
        with torch.no_grad():
            self.kernel.uniform_(-bound, bound, generator=gen)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        *lead, d = y.shape
        flat = y.reshape(-1, 1, d)
        conv = F.conv1d(flat, self.kernel.view(1, 1, -1), padding=self.Ke // 2)
        return F.relu(conv + self.bias).reshape(*lead, d)


class ConformerBlock(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int, Ke: int, gen: torch.Generator,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.ff1 = FeedForward(d, d_ff, gen, dtype)
        self.attn = SelfAttention(d, n_heads, gen, dtype)
        self.conv = ConvModule(Ke, gen, dtype)
        self.ff2 = FeedForward(d, d_ff, gen, dtype)
        self.norm = nn.LayerNorm(d, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x + 0.5 * self.ff1(x)
        y = y + self.attn(y)
        y = y + self.conv(y)
        return self.norm(y + 0.5 * self.ff2(y))


class ConformerBackbone(nn.Module):
    """Input layer, L Conformer blocks, output layer; maps k -> k features.

    With project_io the tokens pass through a learned width-preserving input
    projection plus a per-token offset (token identity without positional
    encoding), and the flattened block output through a k x k output layer.
    Without it the backbone is the bare block stack.
    """

    def __init__(self, config: ConformerConfig, seed: int = 0, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        d = config.d_token
        if config.project_io:
            self.in_w = nn.Parameter(torch.empty(d, d, dtype=dtype))
            self.in_b = nn.Parameter(torch.empty(d, dtype=dtype))
            init_linear(self.in_w, self.in_b, gen)
            self.token_offset = nn.Parameter(torch.zeros(config.tokens, d, dtype=dtype))
            self.out_w = nn.Parameter(torch.empty(config.k, config.k, dtype=dtype))
            self.out_b = nn.Parameter(torch.empty(config.k, dtype=dtype))
            init_linear(self.out_w, self.out_b, gen)
        self.blocks = nn.ModuleList(
            ConformerBlock(d, config.n, config.d_ff, config.Ke, gen, dtype)
            for _ in range(config.L)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        single = x.dim() == 1
        if single:
            x = x.unsqueeze(0)
        if x.shape[-1] != cfg.k:
            raise ValueError(f"expected input width {cfg.k}, got {x.shape[-1]}")
        tok = x.reshape(*x.shape[:-1], cfg.tokens, cfg.d_token)
        if cfg.project_io:
            tok = F.linear(tok, self.in_w, self.in_b) + self.token_offset
        for block in self.blocks:
            tok = block(tok)
        out = tok.reshape(*x.shape[:-1], cfg.k)
        if cfg.project_io:
            out = F.linear(out, self.out_w, self.out_b)
        return out.squeeze(0) if single else out


def backbone_forward(x: torch.Tensor, backbone: ConformerBackbone) -> torch.Tensor:
    """Functional alias for applying the backbone to a feature vector."""
    return backbone(x)
