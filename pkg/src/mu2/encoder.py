"""Patch encoding of frame stacks and bag-of-words embedding of questions."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import torch
from torch import nn

from .textutil import words
from .volume import FrameStack


class Vocab:
    """Ordered token table. Index 0 is reserved for unknown tokens."""

    def __init__(self, tokens: list[str]):
        seen = {}
        for tok in tokens:
            if not tok or tok != tok.strip().lower():
                raise ValueError(f"vocab tokens must be non-empty lowercase, got {tok!r}")
            if tok in seen:
                raise ValueError(f"duplicate vocab token {tok!r}")
            seen[tok] = len(seen) + 1
        self.index = seen
        self.tokens = list(seen)

    def __len__(self) -> int:
        # Includes the unknown slot.
        return len(self.index) + 1

    def lookup(self, token: str) -> int:
        return self.index.get(token, 0)

    @classmethod
    def build(cls, texts: list[str], max_size: int = 512, min_count: int = 1) -> "Vocab":
        """Most frequent tokens first, ties alphabetical, capped at max_size."""
        if max_size < 1:
            raise ValueError(f"max_size must be >= 1, got {max_size}")
        counts = Counter()
        for text in texts:
            counts.update(words(text))
        kept = [t for t, c in counts.items() if c >= min_count]
        kept.sort(key=lambda t: (-counts[t], t))
        return cls(kept[:max_size])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.tokens:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.strip()])


@dataclass
class TextEmbedding:
    """Fixed-length question embedding: vectors [N_q, E], mask [N_q] (True = real token)."""

    vectors: torch.Tensor
    mask: torch.Tensor


@dataclass
class TokenGrid:
    """Per-frame visual tokens [T, N_v, E]; index 0 of each frame is the global token."""

    tokens: torch.Tensor

    @property
    def frames(self) -> int:
        return self.tokens.shape[0]

    @property
    def tokens_per_frame(self) -> int:
        return self.tokens.shape[1]


class TextEmbedder(nn.Module):
    """Embedding lookup padded or truncated to a fixed number of positions."""

    def __init__(self, vocab: Vocab, n_positions: int, embed_dim: int):
        super().__init__()
        if n_positions < 1:
            raise ValueError(f"n_positions must be >= 1, got {n_positions}")
        self.vocab = vocab
        self.n_positions = n_positions
        self.table = nn.Parameter(torch.empty(len(vocab), embed_dim))
        nn.init.uniform_(self.table, -1.0 / math.sqrt(embed_dim), 1.0 / math.sqrt(embed_dim))

    def forward(self, question: str) -> TextEmbedding:
        toks = words(question)
        if not toks:
            raise ValueError("question is empty after tokenization")
        toks = toks[: self.n_positions]
        idx = torch.tensor([self.vocab.lookup(t) for t in toks], dtype=torch.long)
        vectors = torch.zeros(self.n_positions, self.table.shape[1], dtype=self.table.dtype)
        vectors[: len(toks)] = self.table[idx]
        mask = torch.zeros(self.n_positions, dtype=torch.bool)
        mask[: len(toks)] = True
        return TextEmbedding(vectors, mask)


def _extract_patches(frames: torch.Tensor, patch: tuple[int, int, int]) -> torch.Tensor:
    """[T, K, H, W] -> [T, n_patches, pd * ph * pw], row-major patch order."""
    t, k, h, w = frames.shape
    pd, ph, pw = patch
    for size, step, name in ((k, pd, "slice"), (h, ph, "height"), (w, pw, "width")):
        if step < 1 or size % step:
            raise ValueError(f"{name} axis of size {size} is not divisible by patch size {step}")
    x = frames.reshape(t, k // pd, pd, h // ph, ph, w // pw, pw)
    x = x.permute(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(t, (k // pd) * (h // ph) * (w // pw), pd * ph * pw)


class FrameEncoder(nn.Module):
    """Linear projection of flattened patches plus one global token per frame.

    The global token is a learned projection of that frame's mean patch token
    and sits at index 0 of the frame's token row.
    """

    def __init__(self, patch: tuple[int, int, int], embed_dim: int):
        super().__init__()
        pd, ph, pw = patch
        if min(pd, ph, pw) < 1:
            raise ValueError(f"patch sizes must be >= 1, got {patch}")
        self.patch = (pd, ph, pw)
        self.patch_proj = nn.Linear(pd * ph * pw, embed_dim)
        self.global_proj = nn.Linear(embed_dim, embed_dim)

    def forward(self, frames: torch.Tensor) -> TokenGrid:
        assert frames.dim() == 4, f"expected [T, K, H, W], got {tuple(frames.shape)}"
        flat = _extract_patches(frames, self.patch)  # [T, P, voxels]
        patch_tokens = self.patch_proj(flat)  # [T, P, E]
        global_tokens = self.global_proj(patch_tokens.mean(dim=1, keepdim=True))  # [T, 1, E]
        return TokenGrid(torch.cat([global_tokens, patch_tokens], dim=1))


def frames_to_tensor(stack: FrameStack, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(stack.data).to(dtype)
