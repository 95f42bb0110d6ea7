"""Causal transformer text encoder and a hashing word tokenizer.

The encoder accepts either raw text or a sequence of token embeddings, so
learnable prompt prefixes can be spliced in front of embedded words. Start
and end markers are added inside the encoder; the feature is read at the end
marker, as in CLIP.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .errors import EncoderFailure, InvalidConfig
from .visual import ResidualAttentionBlock

_WORD = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


class HashTokenizer:
    """Lower-cased word/punctuation tokens hashed into a fixed vocabulary.

    Any string tokenizes, which is what unseen (zero-shot) class names need.
    Ids 0-2 are reserved for padding and the start/end markers.
    """

    pad_id, sot_id, eot_id = 0, 1, 2

    def __init__(self, vocab_size: int):
        if vocab_size < 4:
            raise InvalidConfig("vocab_size must be at least 4")
        self.vocab_size = vocab_size

    def __call__(self, text: str) -> list[int]:
        span = self.vocab_size - 3
        return [3 + zlib.crc32(w.encode("utf-8")) % span for w in _WORD.findall(text.lower())]


@dataclass
class TextConfig:
    vocab_size: int = 1024
    context_length: int = 77
    width: int = 16
    layers: int = 2
    heads: int = 4
    output_dim: int = 16


class TextEncoder(nn.Module):
    def __init__(self, config: TextConfig, tokenizer=None):
        super().__init__()
        self.config = config
        self.tokenizer = tokenizer or HashTokenizer(config.vocab_size)
        w = config.width
        self.token_embedding = nn.Embedding(config.vocab_size, w)
        self.positional_embedding = nn.Parameter(torch.empty(config.context_length, w))
        self.transformer = nn.Module()
        self.transformer.resblocks = nn.ModuleList(
            ResidualAttentionBlock(w, config.heads) for _ in range(config.layers)
        )
        self.ln_final = nn.LayerNorm(w)
        self.text_projection = nn.Parameter(torch.empty(w, config.output_dim))
        mask = torch.full((config.context_length, config.context_length), float("-inf")).triu(1)
        self.register_buffer("attn_mask", mask, persistent=False)
        self.reset_parameters()

    def reset_parameters(self):
        # CLIP's initialization scheme
        w, layers = self.config.width, self.config.layers
        attn_std = w ** -0.5
        proj_std = attn_std * (2 * layers) ** -0.5
        fc_std = (2 * w) ** -0.5
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        nn.init.normal_(self.positional_embedding, std=0.01)
        for block in self.transformer.resblocks:
            nn.init.normal_(block.attn.in_proj_weight, std=attn_std)
            nn.init.normal_(block.attn.out_proj.weight, std=proj_std)
            nn.init.normal_(block.mlp.c_fc.weight, std=fc_std)
            nn.init.normal_(block.mlp.c_proj.weight, std=proj_std)
        nn.init.normal_(self.text_projection, std=attn_std)

    @property
    def embed_dim(self) -> int:
        return self.config.output_dim

    @property
    def token_dim(self) -> int:
        return self.config.width

    def tokenize(self, text: str) -> list[int]:
        return self.tokenizer(text)

    def embed_ids(self, ids: Sequence[int]) -> torch.Tensor:
        return self.token_embedding(torch.as_tensor(list(ids), dtype=torch.long))

    def encode_tokens(self, sequences) -> torch.Tensor:
        """Encode token-embedding sequences.

        ``sequences`` is one (L, width) tensor or a list of them (lengths may
        differ). Returns (C,) or (n, C) respectively.
        """
        single = isinstance(sequences, torch.Tensor)
        seqs = [sequences] if single else list(sequences)
        if not seqs:
            raise EncoderFailure("nothing to encode")
        width = self.config.width
        lengths = [s.shape[0] for s in seqs]
        total = max(lengths) + 2
        if total > self.config.context_length:
            raise EncoderFailure(
                f"sequence of {max(lengths)} tokens exceeds context {self.config.context_length - 2}"
            )
        dtype = self.positional_embedding.dtype
        sot = self.token_embedding.weight[HashTokenizer.sot_id]
        eot = self.token_embedding.weight[HashTokenizer.eot_id]
        pad = self.token_embedding.weight[HashTokenizer.pad_id]
        rows = []
        for s in seqs:
            if s.ndim != 2 or s.shape[1] != width:
                raise EncoderFailure(f"token embeddings must be (L, {width}), got {tuple(s.shape)}")
            filler = pad.expand(total - 2 - s.shape[0], width)
            rows.append(torch.cat([sot[None], s.to(dtype), eot[None], filler]))
        x = torch.stack(rows) + self.positional_embedding[:total]
        mask = self.attn_mask[:total, :total]
        for block in self.transformer.resblocks:
            x = block(x, mask)
        x = self.ln_final(x)
        eot_pos = torch.as_tensor(lengths) + 1
        feats = x[torch.arange(len(seqs)), eot_pos] @ self.text_projection
        return feats[0] if single else feats

    def encode_text(self, text: str | Sequence[str]) -> torch.Tensor:
        limit = self.config.context_length - 2
        if isinstance(text, str):
            return self.encode_tokens(self.embed_ids(self.tokenize(text)[:limit]))
        return self.encode_tokens([self.embed_ids(self.tokenize(t)[:limit]) for t in text])
