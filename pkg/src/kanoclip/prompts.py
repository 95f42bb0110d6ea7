"""Learnable normal/abnormal prompts and the knowledge-driven loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import EmptyClassName, InvalidConfig, UnknownClass, ZeroNormVector

NORMAL_WORDS = ("normal", "perfect")
ABNORMAL_WORDS = ("abnormal", "defective")


class PromptBank(nn.Module):
    """Two shared learnable prefixes of K token embeddings each.

    A prompt is ``prefix + embed(state word) + embed(class name)``; the
    prefixes are the only parameters and are shared by every class.
    """

    def __init__(
        self,
        K: int = 12,
        token_dim: int = 16,
        normal_words: Sequence[str] = NORMAL_WORDS,
        abnormal_words: Sequence[str] = ABNORMAL_WORDS,
        class_names: Sequence[str] = (),
    ):
        super().__init__()
        if K < 1 or token_dim < 1:
            raise InvalidConfig("K and token_dim must be positive")
        if not normal_words or not abnormal_words:
            raise InvalidConfig("state word lists must be non-empty")
        if set(normal_words) & set(abnormal_words):
            raise InvalidConfig("normal and abnormal state words must be disjoint")
        self.K = K
        self.normal_prefix = nn.Parameter(torch.zeros(K, token_dim))
        self.abnormal_prefix = nn.Parameter(torch.zeros(K, token_dim))
        self.normal_words = list(normal_words)
        self.abnormal_words = list(abnormal_words)
        self.class_names = list(class_names)


def init_prompt_bank(K: int = 12, token_dim: int = 16, seed: int = 0, **kwargs) -> PromptBank:
    """Prompt bank with prefixes drawn from N(0, 0.02^2) under ``seed``."""
    if K < 1 or token_dim < 1:
        raise InvalidConfig("K and token_dim must be positive")
    bank = PromptBank(K, token_dim, **kwargs)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        bank.normal_prefix.copy_(torch.randn(K, token_dim, generator=gen) * 0.02)
        bank.abnormal_prefix.copy_(torch.randn(K, token_dim, generator=gen) * 0.02)
    return bank


def assemble_prompts(bank: PromptBank, class_name: str, encoder, allow_unseen: bool = True):
    """Token-embedding sequences for every normal and abnormal state word."""
    if not class_name or not class_name.strip():
        raise EmptyClassName("class name must be non-empty")
    if not allow_unseen and class_name not in bank.class_names:
        raise UnknownClass(class_name)
    class_emb = encoder.embed_ids(encoder.tokenize(class_name))

    def build(prefix, words):
        return [
            torch.cat([prefix, encoder.embed_ids(encoder.tokenize(w)).to(prefix.dtype),
                       class_emb.to(prefix.dtype)])
            for w in words
        ]

    return build(bank.normal_prefix, bank.normal_words), build(bank.abnormal_prefix, bank.abnormal_words)


@dataclass
class TextFeatures:
    normal_mean: torch.Tensor  # unnormalized mean over normal variants
    abnormal_mean: torch.Tensor

    @property
    def F_n(self) -> torch.Tensor:
        return F.normalize(self.normal_mean, dim=-1)

    @property
    def F_a(self) -> torch.Tensor:
        return F.normalize(self.abnormal_mean, dim=-1)

    @property
    def F_text(self) -> torch.Tensor:
        """(2, C): row 0 normal, row 1 abnormal."""
        return torch.stack([self.F_n, self.F_a], dim=-2)


def encode_prompt_bank(bank: PromptBank, class_name: str, encoder) -> TextFeatures:
    normal, abnormal = assemble_prompts(bank, class_name, encoder)
    feats = encoder.encode_tokens(normal + abnormal)
    n = len(normal)
    return TextFeatures(feats[:n].mean(dim=0), feats[n:].mean(dim=0))


def kd_loss(knowledge: torch.Tensor, normal: torch.Tensor, abnormal: torch.Tensor) -> torch.Tensor:
    """Hinge ``max(0, d(k, a) - d(k, n))`` on L2-normalized vectors.

    Zero once the knowledge embedding is at least as close to the abnormal
    prompt mean as to the normal one. Batched over leading dims.
    """
    for name, vec in (("knowledge", knowledge), ("normal", normal), ("abnormal", abnormal)):
        if bool((torch.linalg.vector_norm(vec.detach(), dim=-1) == 0).any()):
            raise ZeroNormVector(f"{name} vector has zero norm")
    k = knowledge / torch.linalg.vector_norm(knowledge, dim=-1, keepdim=True)
    n = normal / torch.linalg.vector_norm(normal, dim=-1, keepdim=True)
    a = abnormal / torch.linalg.vector_norm(abnormal, dim=-1, keepdim=True)
    d_ka = torch.linalg.vector_norm(k - a, dim=-1)
    d_kn = torch.linalg.vector_norm(k - n, dim=-1)
    return torch.relu(d_ka - d_kn)
