"""Core tokenizer: refine frame tokens, select soft tokens, pool across scales,
and aggregate into a fixed-size compact set conditioned on the question.

All stages are differentiable. Attention weights and pooling maps are kept
row-stochastic so every produced token is a convex combination of its sources.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .encoder import FrameEncoder, TextEmbedder, TextEmbedding, TokenGrid, Vocab, frames_to_tensor
from .volume import FrameStack

# Cap on score-matrix elements held at once; larger batches are chunked.
_CHUNK_ELEMENTS = 1 << 25


@dataclass
class Mu2Config:
    """Shape and depth settings for the tokenizer stack."""

    embed_dim: int = 768
    heads: int = 8
    svr_layers: int = 4
    tta_layers: int = 4
    top_k: int = 1024
    n_queries: int = 1024
    pool_kernels: tuple[int, ...] = (1, 2, 4)
    max_distance: int = 32

    def __post_init__(self):
        self.pool_kernels = tuple(int(s) for s in self.pool_kernels)
        for name in ("embed_dim", "heads", "svr_layers", "tta_layers", "top_k",
                     "n_queries", "max_distance"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.embed_dim % self.heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}"
            )
        ks = self.pool_kernels
        if not ks or ks[0] != 1 or list(ks) != sorted(set(ks)):
            raise ValueError(
                f"pool_kernels must be strictly ascending and start at 1, got {list(ks)}"
            )
        for s in ks:
            if self.top_k % s:
                raise ValueError(
                    f"top_k {self.top_k} is not divisible by pool kernel {s}"
                )

    @property
    def pooled_length(self) -> int:
        return sum(self.top_k // s for s in self.pool_kernels)


class RelBiasTable(nn.Module):
    """Per-head additive attention bias indexed by clipped key-query offset."""

    def __init__(self, heads: int, max_distance: int):
        super().__init__()
        self.max_distance = max_distance
        span = 2 * max_distance + 1
        self.table = nn.Parameter(torch.empty(heads, span))
        bound = 1.0 / math.sqrt(span)
        nn.init.uniform_(self.table, -bound, bound)

    def matrix(self, n: int) -> torch.Tensor:
        """Bias matrix [heads, n, n]; entry (i, j) reads the table at clip(i - j)."""
        idx = torch.arange(n).unsqueeze(1) - torch.arange(n).unsqueeze(0)
        idx = idx.clamp(-self.max_distance, self.max_distance) + self.max_distance
        return self.table[:, idx]


class RelPosSelfAttention(nn.Module):
    """Multi-head self-attention with a relative-position bias on the scores."""

    def __init__(self, embed_dim: int, heads: int, max_distance: int):
        super().__init__()
        assert embed_dim % heads == 0
        self.heads = heads
        self.head_dim = embed_dim // heads
        self.q = nn.Linear(embed_dim, embed_dim)
        # a key bias shifts every score in a row equally, which softmax
        # cancels, so the key path carries no bias
        self.k = nn.Linear(embed_dim, embed_dim, bias=False)
        self.v = nn.Linear(embed_dim, embed_dim)
        self.out = nn.Linear(embed_dim, embed_dim)
        self.bias = RelBiasTable(heads, max_distance)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        b, n, e = x.shape
        h, d = self.heads, self.head_dim
        q = self.q(x).reshape(b, n, h, d).transpose(1, 2)  # [B, H, n, d]
        k = self.k(x).reshape(b, n, h, d).transpose(1, 2)
        v = self.v(x).reshape(b, n, h, d).transpose(1, 2)
        bias = self.bias.matrix(n)  # [H, n, n]
        chunk = b if h * n * n <= _CHUNK_ELEMENTS else max(1, _CHUNK_ELEMENTS // (h * n * n))
        outs, weights = [], []
        for i in range(0, b, chunk):
            scores = q[i:i + chunk] @ k[i:i + chunk].transpose(-1, -2) / math.sqrt(d)
            attn = torch.softmax(scores + bias, dim=-1)  # [b, H, n, n]
            outs.append(attn @ v[i:i + chunk])
            if return_weights:
                weights.append(attn)
        merged = torch.cat(outs).transpose(1, 2).reshape(b, n, e)
        out = self.out(merged)
        if return_weights:
            return out, torch.cat(weights)
        return out


def _feed_forward(embed_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(embed_dim, 2 * embed_dim),
        nn.GELU(),
        nn.Linear(2 * embed_dim, embed_dim),
    )


class RefinerLayer(nn.Module):
    """Relative-position attention and a feed-forward block, both residual."""

    def __init__(self, embed_dim: int, heads: int, max_distance: int):
        super().__init__()
        self.attn = RelPosSelfAttention(embed_dim, heads, max_distance)
        self.ffn = _feed_forward(embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(x)
        return x + self.ffn(x)


class TokenRefiner(nn.Module):
    """Stack of refiner layers alternating spatial and temporal attention.

    Odd layers (1st, 3rd, ...) attend within each frame; even layers attend
    across frames at a fixed token slot.
    """

    def __init__(self, embed_dim: int, heads: int, n_layers: int, max_distance: int):
        super().__init__()
        self.layers = nn.ModuleList(
            RefinerLayer(embed_dim, heads, max_distance) for _ in range(n_layers)
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = tokens  # [T, N_v, E]
        for i, layer in enumerate(self.layers):
            if i % 2 == 0:
                x = layer(x)
            else:
                x = layer(x.transpose(0, 1)).transpose(0, 1)
            if not torch.isfinite(x).all():
                raise ValueError(f"refiner layer {i + 1}: non-finite activations")
        return x


@dataclass
class SoftTokenSet:
    """Soft selections: tokens [k, E], weights [k, n] over the flattened sources."""

    tokens: torch.Tensor
    weights: torch.Tensor


class SoftTokenSelector(nn.Module):
    """k learned selectors, each a softmax-weighted average of all tokens."""

    def __init__(self, embed_dim: int, top_k: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(embed_dim, top_k))
        bound = 1.0 / math.sqrt(embed_dim)
        nn.init.uniform_(self.weight, -bound, bound)

    def forward(self, tokens: torch.Tensor) -> SoftTokenSet:
        flat = tokens.reshape(-1, tokens.shape[-1])  # [n, E]
        scores = flat @ self.weight  # [n, k]
        alpha = torch.softmax(scores, dim=0)
        return SoftTokenSet(alpha.T @ flat, alpha.T)


@dataclass
class PooledTokens:
    """Concatenated weighted pools: tokens [L, E], one weight per kernel."""

    tokens: torch.Tensor
    scale_weights: torch.Tensor


def pooling_matrix(k: int, kernel: int, dtype=torch.float64) -> torch.Tensor:
    """Row-stochastic averaging map [k / kernel, k] for one pooling kernel."""
    if kernel < 1 or k % kernel:
        raise ValueError(f"token count {k} is not divisible by kernel {kernel}")
    rows = k // kernel
    m = torch.zeros(rows, k, dtype=dtype)
    for r in range(rows):
        m[r, r * kernel:(r + 1) * kernel] = 1.0 / kernel
    return m


class DynamicMultiScalePool(nn.Module):
    """Average-pool at several kernels and weight each scale by a learned gate."""

    def __init__(self, embed_dim: int, kernels: tuple[int, ...]):
        super().__init__()
        kernels = tuple(int(s) for s in kernels)
        if not kernels or kernels[0] != 1 or list(kernels) != sorted(set(kernels)):
            raise ValueError(
                f"pool kernels must be strictly ascending and start at 1, got {list(kernels)}"
            )
        self.kernels = kernels
        hidden = max(embed_dim // 2, 1)
        # a gate output bias shifts all scale logits equally, which softmax
        # cancels, so the last layer carries no bias
        self.gate = nn.Sequential(
            nn.Linear(embed_dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, 1, bias=False),
        )

    def forward(self, tokens: torch.Tensor) -> PooledTokens:
        k, e = tokens.shape
        for s in self.kernels:
            if k % s:
                raise ValueError(f"token count {k} is not divisible by pool kernel {s}")
        pooled = [tokens.reshape(k // s, s, e).mean(dim=1) for s in self.kernels]
        logits = torch.cat([self.gate(p.mean(dim=0)) for p in pooled])
        w = torch.softmax(logits, dim=0)
        out = torch.cat([w[i] * p for i, p in enumerate(pooled)])
        return PooledTokens(out, w)


class AggregatorLayer(nn.Module):
    """One aggregation round: refresh queries against the question text, then
    rebuild them as convex combinations of the pooled tokens."""

    def __init__(self, embed_dim: int, heads: int):
        super().__init__()
        assert embed_dim % heads == 0
        self.heads = heads
        self.head_dim = embed_dim // heads
        self.text_q = nn.Linear(embed_dim, embed_dim)
        # key biases are cancelled by the row softmax, so both key paths
        # carry none
        self.text_k = nn.Linear(embed_dim, embed_dim, bias=False)
        self.text_v = nn.Linear(embed_dim, embed_dim)
        self.text_out = nn.Linear(embed_dim, embed_dim)
        self.ffn = _feed_forward(embed_dim)
        self.pool_q = nn.Linear(embed_dim, embed_dim)
        self.pool_k = nn.Linear(embed_dim, embed_dim, bias=False)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        n, e = x.shape
        return x.reshape(n, self.heads, self.head_dim).transpose(0, 1)  # [H, n, d]

    def forward(self, queries: torch.Tensor, text: TextEmbedding,
                pooled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if not bool(text.mask.any()):
            raise ValueError("question embedding has no unmasked positions")
        scale = math.sqrt(self.head_dim)
        # Text conditioning with residual paths.
        q = self._split(self.text_q(queries))  # [H, M, d]
        k = self._split(self.text_k(text.vectors))  # [H, N_q, d]
        v = self._split(self.text_v(text.vectors))
        scores = q @ k.transpose(-1, -2) / scale  # [H, M, N_q]
        scores = scores.masked_fill(~text.mask.view(1, 1, -1), float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        heard = (attn @ v).transpose(0, 1).reshape(queries.shape)
        u = queries + self.text_out(heard)
        u = u + self.ffn(u)
        # Convex rebuild from the pooled tokens: identity value path, no residual.
        q2 = self._split(self.pool_q(u))  # [H, M, d]
        k2 = self._split(self.pool_k(pooled))  # [H, L, d]
        assign = torch.softmax(q2 @ k2.transpose(-1, -2) / scale, dim=-1)  # [H, M, L]
        assign = assign.mean(dim=0)  # [M, L]
        return assign @ pooled, assign


@dataclass
class CompactTokens:
    """Final token set [M, E] with provenance weights [M, L] over pooled tokens."""

    tokens: torch.Tensor
    provenance_weights: torch.Tensor


class TokenAggregator(nn.Module):
    """Learned query bank iterated through aggregation layers.

    The pooled token set stays fixed across layers; each layer's output becomes
    the next layer's queries. Provenance weights come from the last rebuild.
    """

    def __init__(self, embed_dim: int, heads: int, n_queries: int, n_layers: int):
        super().__init__()
        self.queries = nn.Parameter(torch.empty(n_queries, embed_dim))
        bound = 1.0 / math.sqrt(embed_dim)
        nn.init.uniform_(self.queries, -bound, bound)
        self.layers = nn.ModuleList(AggregatorLayer(embed_dim, heads) for _ in range(n_layers))

    def forward(self, text: TextEmbedding, pooled: torch.Tensor) -> CompactTokens:
        u = self.queries
        assign = None
        for layer in self.layers:
            u, assign = layer(u, text, pooled)
        return CompactTokens(u, assign)


@dataclass
class TokenizeResult:
    grid: TokenGrid
    refined: torch.Tensor
    selected: SoftTokenSet
    pooled: PooledTokens
    compact: CompactTokens


class Mu2Model(nn.Module):
    """Full pipeline from a frame stack and a question to compact tokens."""

    def __init__(self, cfg: Mu2Config, patch: tuple[int, int, int],
                 n_text_positions: int, vocab: Vocab, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(seed)
        self.encoder = FrameEncoder(patch, cfg.embed_dim)
        self.text = TextEmbedder(vocab, n_text_positions, cfg.embed_dim)
        self.refiner = TokenRefiner(cfg.embed_dim, cfg.heads, cfg.svr_layers, cfg.max_distance)
        self.selector = SoftTokenSelector(cfg.embed_dim, cfg.top_k)
        self.pool = DynamicMultiScalePool(cfg.embed_dim, cfg.pool_kernels)
        self.aggregator = TokenAggregator(cfg.embed_dim, cfg.heads, cfg.n_queries, cfg.tta_layers)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def tokenize_detailed(self, stack: FrameStack, question: str) -> TokenizeResult:
        def stage(name, fn, *args):
            try:
                return fn(*args)
            except ValueError as err:
                raise ValueError(f"{name}: {err}") from err

        with torch.no_grad():
            frames = frames_to_tensor(stack, self.dtype)
            grid = stage("encode", self.encoder, frames)
            text = stage("embed_text", self.text, question)
            refined = stage("refine", self.refiner, grid.tokens)
            selected = stage("select", self.selector, refined)
            pooled = stage("pool", self.pool, selected.tokens)
            compact = stage("aggregate", self.aggregator, text, pooled.tokens)
        return TokenizeResult(grid, refined, selected, pooled, compact)

    def tokenize(self, stack: FrameStack, question: str) -> CompactTokens:
        return self.tokenize_detailed(stack, question).compact
