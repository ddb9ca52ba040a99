"""
Prompt-conditioned report decoder.

Sequence layout (token ids):

    BOS  s_1 ... s_18  w_1 ... w_k  EOS  PAD ...

s_d is the shared state token ([POS]/[NEG]/[BLA]/[UNC]) of disease d; the
position of a state token identifies its disease. Training uses teacher
forcing: inputs are tokens[:, :-1], targets are tokens[:, 1:].
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError, ShapeError
from .fusion import FeedForward, MultiHeadAttention
from .labels import ClinicalState
from .numcore import Dropout, linear, norm

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")
STATE_TOKENS = tuple(s.token for s in ClinicalState)
STATE_OFFSET = len(SPECIALS)
MASK_MODES = ("full", "prompt_masked")


# ---------------- vocabulary ----------------

@dataclass
class Vocab:
    tokens: list[str] = field(default_factory=lambda: list(SPECIALS) + list(STATE_TOKENS))

    def __post_init__(self):
        if tuple(self.tokens[: STATE_OFFSET + len(STATE_TOKENS)]) != SPECIALS + STATE_TOKENS:
            raise DataError("vocabulary must start with <pad> <bos> <eos> and the four state tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("vocabulary has duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, reports: Iterable[Sequence[str]]) -> "Vocab":
        words = sorted({w for report in reports for w in report} - set(SPECIALS) - set(STATE_TOKENS))
        return cls(list(SPECIALS) + list(STATE_TOKENS) + words)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.tokens) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        path = Path(path)
        if not path.exists():
            raise DataError(f"vocab file not found: {path}")
        return cls([line for line in path.read_text(encoding="utf-8").splitlines() if line])

    def word_id(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise DataError(f"word '{word}' is not in the vocabulary") from None

    @staticmethod
    def state_id(state: int) -> int:
        return STATE_OFFSET + int(state)

    def is_state(self, token_id: int) -> bool:
        return STATE_OFFSET <= token_id < STATE_OFFSET + len(STATE_TOKENS)

    def render(self, ids: Sequence[int], show_prompt: bool = False) -> str:
        out = []
        for i in ids:
            if i in (PAD, BOS, EOS):
                continue
            if self.is_state(i) and not show_prompt:
                continue
            out.append(self.tokens[i])
        return " ".join(out)


def encode_report(
    vocab: Vocab,
    prompt_states: Sequence[int],
    words: Sequence[str],
    max_len: int,
) -> tuple[list[int], bool]:
    """BOS + prompt + words + EOS, dropping trailing words to fit max_len. Returns (ids, truncated)."""
    room = max_len - 2 - len(prompt_states)
    if room < 0:
        raise ConfigError(f"max_len={max_len} cannot hold BOS, {len(prompt_states)} prompt tokens and EOS")
    kept = list(words[:room])
    ids = [BOS] + [vocab.state_id(s) for s in prompt_states] + [vocab.word_id(w) for w in kept] + [EOS]
    return ids, len(kept) < len(words)


def pad_batch(seqs: Sequence[Sequence[int]]) -> torch.Tensor:
    t = max(len(s) for s in seqs)
    out = torch.full((len(seqs), t), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


# ---------------- model ----------------

def causal_mask(t: int) -> torch.Tensor:
    return torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)


class DecoderBlock(nn.Module):
    def __init__(self, d_m: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_m, heads)
        self.ln_self = norm(d_m)
        self.cross_attn = MultiHeadAttention(d_m, heads)
        self.ln_cross = norm(d_m)
        self.ffn = FeedForward(d_m, 4 * d_m, dropout)
        self.ln_ffn = norm(d_m)
        self.dropout = Dropout(dropout)

    def forward(self, x: torch.Tensor, memory: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        a, _ = self.self_attn(x, x, x, mask=mask)
        x = self.ln_self(x + self.dropout(a))
        a, _ = self.cross_attn(x, memory, memory)
        x = self.ln_cross(x + self.dropout(a))
        return self.ln_ffn(x + self.dropout(self.ffn(x)))


class ReportDecoder(nn.Module):
    def __init__(
        self,
        vocab_size: int,
        d_mem: int,
        d_m: int = 64,
        heads: int = 4,
        n_layers: int = 2,
        max_len: int = 64,
        dropout: float = 0.0,
    ):
        super().__init__()
        if d_m % heads:
            raise ConfigError(f"decoder width {d_m} is not divisible by {heads} heads")
        self.max_len = max_len
        self.d_mem = d_mem
        self.tok_emb = nn.Embedding(vocab_size, d_m, dtype=torch.float64)
        self.pos_emb = nn.Embedding(max_len, d_m, dtype=torch.float64)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)
        self.mem_proj = linear(d_mem, d_m)
        self.blocks = nn.ModuleList(DecoderBlock(d_m, heads, dropout) for _ in range(n_layers))
        self.dropout = Dropout(dropout)
        self.out = linear(d_m, vocab_size)

    def encode_memory(self, v_fused: torch.Tensor) -> torch.Tensor:
        if v_fused.dim() != 3 or v_fused.shape[-1] != self.d_mem:
            raise ShapeError("decoder_forward", v_fused.shape, (-1, -1, self.d_mem))
        return self.mem_proj(v_fused)

    def decode(self, tokens: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        b, t = tokens.shape
        if t > self.max_len:
            raise ShapeError("decoder_forward", tokens.shape, (b, self.max_len), "sequence longer than max_len")
        if memory.shape[0] != b:
            raise ShapeError("decoder_forward", tokens.shape, memory.shape)
        pos = torch.arange(t)
        x = self.dropout(self.tok_emb(tokens) + self.pos_emb(pos)[None])
        mask = causal_mask(t)
        for block in self.blocks:
            x = block(x, memory, mask)
        return self.out(x)

    def forward(self, tokens: torch.Tensor, v_fused: torch.Tensor) -> torch.Tensor:
        return self.decode(tokens, self.encode_memory(v_fused))


def decoder_forward(tokens: torch.Tensor, v_fused: torch.Tensor, decoder: ReportDecoder) -> torch.Tensor:
    return decoder(tokens, v_fused)


@dataclass(frozen=True)
class NllResult:
    loss: torch.Tensor
    n_tokens: int

    @property
    def empty(self) -> bool:
        return self.n_tokens == 0


def nll_loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    mask_mode: str = "full",
    prompt_len: int = 18,
) -> NllResult:
    """Token-mean NLL over non-PAD targets; prompt_masked also skips the first prompt_len targets."""
    if mask_mode not in MASK_MODES:
        raise ConfigError(f"unknown mask mode '{mask_mode}' (choose from {', '.join(MASK_MODES)})")
    if logits.shape[:2] != targets.shape:
        raise ShapeError("nll_loss", logits.shape, targets.shape)
    keep = targets != PAD
    if mask_mode == "prompt_masked":
        keep[:, :prompt_len] = False
    n = int(keep.sum())
    if n == 0:
        return NllResult(logits.sum() * 0.0, 0)
    log_p = torch.log_softmax(logits, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return NllResult(-(log_p * keep.to(log_p.dtype)).sum() / n, n)


def total_objective(
    l_ce: torch.Tensor,
    l_aux: torch.Tensor,
    l_nll: torch.Tensor,
    lambda_cls: float = 1.0,
    lambda_lm: float = 1.0,
) -> torch.Tensor:
    return lambda_cls * (l_ce + l_aux) + lambda_lm * l_nll


# ---------------- decoding ----------------

StepFn = Callable[[list[int]], np.ndarray]


def beam_search(
    step_fn: StepFn,
    prefix: Sequence[int],
    beam_width: int,
    max_len: int,
    eos_id: int = EOS,
    alpha: float = 1.0,
) -> list[int]:
    """
    Length-normalized beam search. step_fn maps a token sequence to the
    next-token log-probabilities. Hypotheses are ranked by
    logp / n_generated ** alpha; the EOS token is not returned.
    """
    if beam_width < 1:
        raise ConfigError(f"beam_width must be >= 1, got {beam_width}")
    prefix = list(prefix)
    n_prefix = len(prefix)

    def normalized(seq: list[int], logp: float) -> float:
        n = len(seq) - n_prefix
        return logp / (n ** alpha) if n > 0 else logp

    alive: list[tuple[list[int], float]] = [(prefix, 0.0)]
    finished: list[tuple[list[int], float]] = []
    while alive and len(alive[0][0]) < max_len and len(finished) < beam_width:
        candidates = []
        for seq, logp in alive:
            log_probs = np.asarray(step_fn(seq), dtype=np.float64)
            # up to k of the top 2k can be EOS
            top = np.argsort(-log_probs, kind="stable")[: 2 * beam_width]
            candidates.extend((seq + [int(tok)], logp + float(log_probs[tok])) for tok in top)
        candidates.sort(key=lambda c: -c[1])
        alive = []
        for rank, (seq, logp) in enumerate(candidates):
            if seq[-1] == eos_id:
                if rank < beam_width:
                    finished.append((seq, logp))
            elif len(alive) < beam_width:
                alive.append((seq, logp))
            if len(alive) == beam_width:
                break
    finished.extend(alive)
    best, _ = max(finished, key=lambda c: normalized(*c))
    return best[:-1] if best[-1] == eos_id and len(best) > n_prefix else best


def greedy_decode(step_fn: StepFn, prefix: Sequence[int], max_len: int, eos_id: int = EOS) -> list[int]:
    seq = list(prefix)
    while len(seq) < max_len:
        tok = int(np.argmax(np.asarray(step_fn(seq))))
        if tok == eos_id:
            break
        seq.append(tok)
    return seq


@torch.no_grad()
def generate(
    decoder: ReportDecoder,
    v_fused: torch.Tensor,
    prompt_states: Sequence[int],
    beam_width: int = 3,
    max_len: int | None = None,
) -> list[int]:
    """Decode one report for one item (v_fused is N x D or 1 x N x D). Returns prompt + word ids."""
    if v_fused.dim() == 2:
        v_fused = v_fused[None]
    max_len = decoder.max_len if max_len is None else min(max_len, decoder.max_len)
    memory = decoder.encode_memory(v_fused)

    def step(seq: list[int]) -> np.ndarray:
        logits = decoder.decode(torch.as_tensor([seq], dtype=torch.long), memory)[0, -1]
        return torch.log_softmax(logits, dim=-1).numpy()

    prefix = [BOS] + [Vocab.state_id(s) for s in prompt_states]
    return beam_search(step, prefix, beam_width, max_len)[1:]


def render_reports(vocab: Vocab, sequences: Sequence[Sequence[int]], show_prompt: bool = False) -> list[str]:
    return [vocab.render(seq, show_prompt) for seq in sequences]
