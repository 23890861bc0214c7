"""Sequence encoders, the cross-attentive denoising decoder, and scoring."""

from __future__ import annotations

import math

import torch
from torch import nn

from .schedule import DiffusionSchedule

ENCODER_KINDS = ("attention", "recurrent")
NOISE_SCALE_MODES = ("variance", "sqrt")


def visibility(nonpad: torch.Tensor) -> torch.Tensor:
    """[B, L, L] mask: query j sees key k iff k <= j and k is a real item.

    The diagonal is always visible so that fully padded prefixes keep a
    well-defined softmax.
    """
    L = nonpad.shape[-1]
    causal = torch.ones(L, L, dtype=torch.bool, device=nonpad.device).tril()
    eye = torch.eye(L, dtype=torch.bool, device=nonpad.device)
    return causal & (nonpad[:, None, :] | eye)


def masked_attention(q, k, v, visible, dropout: nn.Module | None = None):
    """Scaled dot-product attention over the last two axes.

    q: [..., Lq, h], k/v: [..., Lk, h], visible: broadcastable [..., Lq, Lk].
    Returns (output, weights). Hidden keys get exactly zero weight.
    """
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    scores = scores.masked_fill(~visible, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    if dropout is not None:
        weights = dropout(weights)
    return weights @ v, weights


class MultiHeadAttention(nn.Module):
    """Bias-free Q/K/V projections, heads concatenated without an output matrix."""

    def __init__(self, d: int, n_heads: int = 1, dropout: float = 0.0):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"hidden size {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)
        self.dropout = nn.Dropout(dropout)
        for lin in (self.w_q, self.w_k, self.w_v):
            nn.init.xavier_uniform_(lin.weight)

    def _split(self, x):
        *lead, L, d = x.shape
        return x.reshape(*lead, L, self.n_heads, d // self.n_heads).transpose(-2, -3)

    def forward(self, queries, keys, visible):
        q = self._split(self.w_q(queries))
        k = self._split(self.w_k(keys))
        v = self._split(self.w_v(keys))
        out, weights = masked_attention(q, k, v, visible.unsqueeze(-3), self.dropout)
        out = out.transpose(-2, -3)
        return out.reshape(*out.shape[:-2], -1), weights


class FeedForward(nn.Module):
    def __init__(self, d: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Dropout(dropout), nn.Linear(d, d))

    def forward(self, x):
        return self.net(x)


class AttentionBlock(nn.Module):
    def __init__(self, d: int, n_heads: int, dropout: float):
        super().__init__()
        self.attn_norm = nn.LayerNorm(d, eps=1e-8)
        self.attn = MultiHeadAttention(d, n_heads, dropout)
        self.ffn_norm = nn.LayerNorm(d, eps=1e-8)
        self.ffn = FeedForward(d, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, visible):
        h = self.attn_norm(x)
        attn, _ = self.attn(h, h, visible)
        x = x + self.dropout(attn)
        return x + self.dropout(self.ffn(self.ffn_norm(x)))


class AttentionEncoder(nn.Module):
    """Stack of causal self-attention blocks."""

    kind = "attention"

    def __init__(self, d: int, n_blocks: int = 2, n_heads: int = 2, dropout: float = 0.2):
        super().__init__()
        self.blocks = nn.ModuleList(AttentionBlock(d, n_heads, dropout) for _ in range(n_blocks))
        self.final_norm = nn.LayerNorm(d, eps=1e-8)

    def forward(self, E, nonpad):
        visible = visibility(nonpad)
        x = E
        for block in self.blocks:
            x = block(x, visible) * nonpad.unsqueeze(-1)
        return self.final_norm(x)


class RecurrentEncoder(nn.Module):
    """Single-layer GRU run left to right over the padded sequence."""

    kind = "recurrent"

    def __init__(self, d: int, dropout: float = 0.2, **_):
        super().__init__()
        self.gru = nn.GRU(d, d, batch_first=True)
        self.dropout = nn.Dropout(dropout)
        self.final_norm = nn.LayerNorm(d, eps=1e-8)

    def forward(self, E, nonpad):
        out, _ = self.gru(E)
        return self.final_norm(self.dropout(out))


def make_encoder(kind: str, d: int, n_blocks: int = 2, n_heads: int = 2, dropout: float = 0.2) -> nn.Module:
    if kind == "attention":
        return AttentionEncoder(d, n_blocks, n_heads, dropout)
    if kind == "recurrent":
        return RecurrentEncoder(d, dropout)
    raise ValueError(f"unknown encoder kind {kind!r}; expected one of {ENCODER_KINDS}")


class DenoisingDecoder(nn.Module):
    """Cross-attention with the step embedding as query and e_s as keys/values."""

    def __init__(self, d: int, n_heads: int = 1):
        super().__init__()
        self.attn = MultiHeadAttention(d, n_heads, dropout=0.0)

    def forward(self, e_s, e_t, nonpad):
        queries = e_t.expand_as(e_s)
        mu, _ = self.attn(queries, e_s, visibility(nonpad))
        return mu


class CDDRec(nn.Module):
    """All learnable state: item/position/step tables, encoder and decoder."""

    def __init__(
        self,
        item_count: int,
        d: int = 128,
        max_len: int = 20,
        T: int = 10,
        encoder: str = "attention",
        n_blocks: int = 2,
        n_heads: int = 2,
        decoder_heads: int = 1,
        dropout: float = 0.2,
        noise_scale_mode: str = "variance",
        posterior_variance_mode: str = "ratio",
        variance_floor: float = 0.0,
    ):
        super().__init__()
        if noise_scale_mode not in NOISE_SCALE_MODES:
            raise ValueError(f"unknown noise scale mode {noise_scale_mode!r}")
        self.item_count = item_count
        self.d = d
        self.max_len = max_len
        self.T = T
        self.noise_scale_mode = noise_scale_mode
        self.posterior_variance_mode = posterior_variance_mode
        self.variance_floor = variance_floor

        self.item_embeddings = nn.Embedding(item_count + 1, d, padding_idx=0)
        self.position_embeddings = nn.Embedding(max_len, d)
        self.step_embeddings = nn.Embedding(T + 1, d)
        for table in (self.item_embeddings, self.position_embeddings, self.step_embeddings):
            nn.init.normal_(table.weight, std=0.02)
        self.zero_padding_row()

        self.input_dropout = nn.Dropout(dropout)
        self.encoder = make_encoder(encoder, d, n_blocks, n_heads, dropout)
        self.decoder = DenoisingDecoder(d, decoder_heads)

    @torch.no_grad()
    def zero_padding_row(self):
        self.item_embeddings.weight[0].zero_()

    def _check_ids(self, ids):
        if ids.shape[-1] != self.max_len:
            raise ValueError(f"sequence length {ids.shape[-1]} != max_len {self.max_len}")
        if ids.numel() and (ids.min() < 0 or ids.max() > self.item_count):
            raise IndexError(f"item index outside [0, {self.item_count}]")

    def _check_step(self, t: int):
        if not 0 <= t <= self.T:
            raise ValueError(f"step {t} outside [0, {self.T}]")

    def encode(self, input_ids: torch.Tensor) -> torch.Tensor:
        """e_s [B, L, d]; dropout follows ``self.training``."""
        self._check_ids(input_ids)
        nonpad = input_ids != 0
        positions = torch.arange(self.max_len, device=input_ids.device)
        E = self.item_embeddings(input_ids) + self.position_embeddings(positions)
        E = self.input_dropout(E) * nonpad.unsqueeze(-1)
        return self.encoder(E, nonpad) * nonpad.unsqueeze(-1)

    def denoise_mean(self, e_s: torch.Tensor, t: int, nonpad: torch.Tensor) -> torch.Tensor:
        self._check_step(t)
        e_t = self.step_embeddings.weight[t]
        return self.decoder(e_s, e_t, nonpad)

    def noise_scale(self, t: int, schedule: DiffusionSchedule) -> float:
        # step 0 is the clean state and has no reverse-step variance
        if t == 0:
            return 0.0
        var = schedule.posterior_variance(t, self.posterior_variance_mode, self.variance_floor)
        return var if self.noise_scale_mode == "variance" else math.sqrt(var)

    def sample_prediction(self, mu, t: int, schedule: DiffusionSchedule, generator=None, deterministic: bool = False):
        """x_hat = mu + scale_t * eps; ``deterministic`` returns ``mu`` itself."""
        if deterministic:
            return mu
        scale = self.noise_scale(t, schedule)
        if scale == 0.0:
            return mu
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
        return mu + scale * eps

    def diffuse_targets(self, target_ids, t: int, schedule: DiffusionSchedule, generator=None, identity: bool = False):
        x0 = self.item_embeddings(target_ids)
        if identity or t == 0:
            return x0
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype, device=x0.device)
        return schedule.marginal_sample(x0, t, eps)

    def final_mean(self, input_ids: torch.Tensor, t: int) -> torch.Tensor:
        e_s = self.encode(input_ids)
        return self.denoise_mean(e_s, t, input_ids != 0)[:, -1, :]

    def predict_scores(self, input_ids: torch.Tensor, t_infer: int = 0) -> torch.Tensor:
        """[B, item_count] dot-product scores; column k is item k + 1."""
        mu = self.final_mean(input_ids, t_infer)
        return mu @ self.item_embeddings.weight[1:].T

    def score_trajectory(self, input_ids: torch.Tensor) -> torch.Tensor:
        """[T + 1, B, item_count] scores from the deterministic mean at every step."""
        e_s = self.encode(input_ids)
        nonpad = input_ids != 0
        items = self.item_embeddings.weight[1:]
        return torch.stack(
            [self.denoise_mean(e_s, t, nonpad)[:, -1, :] @ items.T for t in range(self.T + 1)]
        )
