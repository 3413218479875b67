"""Text branch: tokenizer, learnable prompt context and the text transformer."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn

from .config import DISTORTION_NAMES, SCENE_NAMES, ModelConfig, Taxonomy
from .layers import TransformerLayer, causal_mask, l2_normalize

SOS = "<|startoftext|>"
EOS = "<|endoftext|>"
UNK = "<|unk|>"

# words used by the fixed zero-shot prompts ("a photo of a {class}")
HANDCRAFTED_TEMPLATE = "a photo of a {}"


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    eos_index: int

    def __len__(self):
        return len(self.ids)


class Tokenizer:
    """Lowercasing tokenizer over a fixed vocabulary.

    The default vocabulary is word level and covers every taxonomy label plus
    the handcrafted prompt template. ``from_vocab_file`` accepts a BPE-style
    vocabulary (one token per line, ``</w>`` marking word ends) and splits
    words by greedy longest match.
    """

    def __init__(self, vocab: Sequence[str], max_len: int = 32, subword: bool = False):
        self.vocab = list(vocab)
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise ValueError("vocabulary contains duplicate tokens")
        for special in (SOS, EOS, UNK):
            if special not in self.index:
                self.index[special] = len(self.vocab)
                self.vocab.append(special)
        self.max_len = max_len
        self.subword = subword
        self.sos_id = self.index[SOS]
        self.eos_id = self.index[EOS]
        self.unk_id = self.index[UNK]

    @classmethod
    def default(cls, max_len: int = 32) -> "Tokenizer":
        words = [SOS, EOS, UNK]
        for text in (*SCENE_NAMES, *DISTORTION_NAMES, HANDCRAFTED_TEMPLATE.format("")):
            for w in _words(text):
                if w not in words:
                    words.append(w)
        return cls(words, max_len=max_len)

    @classmethod
    def from_vocab_file(cls, path: str | Path, max_len: int = 77) -> "Tokenizer":
        tokens = [line.rstrip("\n") for line in Path(path).read_text(encoding="utf-8").splitlines()]
        tokens = [t for t in tokens if t]
        return cls(tokens, max_len=max_len, subword=True)

    def __len__(self):
        return len(self.vocab)

    def _word_ids(self, word: str) -> list[int]:
        if not self.subword:
            return [self.index.get(word, self.unk_id)]
        ids, rest = [], word + "</w>"
        while rest:
            for end in range(len(rest), 0, -1):
                if rest[:end] in self.index:
                    ids.append(self.index[rest[:end]])
                    rest = rest[end:]
                    break
            else:
                ids.append(self.unk_id)
                break
        return ids

    def encode_words(self, text: str) -> list[int]:
        words = _words(text)
        if not words:
            raise ValueError("cannot tokenize empty text")
        return [i for w in words for i in self._word_ids(w)]

    def tokenize(self, text: str) -> TokenSequence:
        ids = [self.sos_id, *self.encode_words(text), self.eos_id]
        if len(ids) > self.max_len:
            raise ValueError(f"token sequence of length {len(ids)} exceeds max_text_len={self.max_len}")
        return TokenSequence(tuple(ids), len(ids) - 1)


def _words(text: str) -> list[str]:
    return re.findall(r"\S+", text.lower())


class PromptContext(nn.Module):
    """Learnable context vectors shared by every class prompt of one taxonomy."""

    def __init__(self, length: int, dim: int, kind: str):
        super().__init__()
        self.kind = kind
        self.vectors = nn.Parameter(torch.randn(length, dim) * 0.02)

    def __len__(self):
        return self.vectors.shape[0]


class TextEncoder(nn.Module):
    """Frozen text transformer; the EOS output is projected into the shared space."""

    def __init__(self, cfg: ModelConfig, tokenizer: Tokenizer | None = None):
        super().__init__()
        self.tokenizer = tokenizer or Tokenizer.default(cfg.max_text_len)
        dim = cfg.embed_dim
        self.token_embedding = nn.Embedding(len(self.tokenizer), dim)
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        self.positional_embedding = nn.Parameter(torch.randn(cfg.max_text_len, dim) * 0.01)
        self.layers = nn.ModuleList(
            TransformerLayer(dim, cfg.text_heads, cfg.mlp_ratio) for _ in range(cfg.text_layers)
        )
        self.ln_final = nn.LayerNorm(dim)
        self.text_projection = nn.Linear(dim, dim, bias=False)
        nn.init.normal_(self.text_projection.weight, std=dim**-0.5)

    def assemble_prompt(self, ctx: PromptContext, class_name: str) -> torch.Tensor:
        """[SOS] + context rows + class-token rows + [EOS] as a (L, dim) matrix."""
        class_ids = self.tokenizer.encode_words(class_name)
        if self.tokenizer.unk_id in class_ids:
            raise KeyError(f"unknown class name {class_name!r}")
        length = 2 + len(ctx) + len(class_ids)
        if length > self.positional_embedding.shape[0]:
            raise ValueError(f"prompt of length {length} exceeds max_text_len")
        emb = self.token_embedding.weight
        sos = emb[self.tokenizer.sos_id].unsqueeze(0)
        eos = emb[self.tokenizer.eos_id].unsqueeze(0)
        return torch.cat([sos, ctx.vectors.to(emb.dtype), emb[class_ids], eos], dim=0)

    def embed_text(self, text: str) -> tuple[torch.Tensor, int]:
        seq = self.tokenizer.tokenize(text)
        return self.token_embedding.weight[list(seq.ids)], seq.eos_index

    def encode_text(self, seqs: torch.Tensor | Sequence[torch.Tensor],
                    eos_index: Sequence[int] | None = None) -> torch.Tensor:
        """Encode one (L, dim) sequence or a list of them; EOS defaults to the last row."""
        single = isinstance(seqs, torch.Tensor) and seqs.dim() == 2
        if single:
            seqs = [seqs]
        if eos_index is None:
            eos_index = [s.shape[0] - 1 for s in seqs]
        length = max(s.shape[0] for s in seqs)
        # padding sits after EOS, and the causal mask keeps it out of the EOS state
        x = torch.stack([nn.functional.pad(s, (0, 0, 0, length - s.shape[0])) for s in seqs])
        x = x + self.positional_embedding[:length].to(x.dtype)
        mask = causal_mask(length, dtype=x.dtype, device=x.device)
        for layer in self.layers:
            x = layer(x, mask=mask)
        x = self.ln_final(x)
        eos = x[torch.arange(x.shape[0]), torch.as_tensor(list(eos_index))]
        z = l2_normalize(self.text_projection(eos))
        if not torch.isfinite(z).all():
            raise FloatingPointError("non-finite text embedding")
        return z[0] if single else z

    def encode_taxonomy(self, ctx: PromptContext, tax: Taxonomy) -> torch.Tensor:
        """(K, embed_dim) class embeddings, one unit row per taxonomy label."""
        if ctx.kind != tax.kind:
            raise ValueError(f"context kind {ctx.kind!r} does not match taxonomy kind {tax.kind!r}")
        return self.encode_text([self.assemble_prompt(ctx, name) for name in tax.names])

    def encode_handcrafted(self, tax: Taxonomy, template: str = HANDCRAFTED_TEMPLATE) -> torch.Tensor:
        """Class embeddings from fixed text prompts (no learnable context)."""
        pairs = [self.embed_text(template.format(name)) for name in tax.names]
        return self.encode_text([p[0] for p in pairs], [p[1] for p in pairs])
