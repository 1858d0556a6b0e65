"""Causal sequence model over (value-to-go, cost-to-go, state, action) tokens.

Each decision step contributes four tokens in that order; all four share a
learned absolute-step embedding. The policy distribution for step t is read
at the state-token position (so it conditions on past actions but not the
current one) and the outcome predictor is read at the action-token position
(so it conditions on the current action).

Scalar streams are standardized with dataset statistics held in buffers, so
checkpoints are self-contained: reloading reproduces forward outputs bit for
bit.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import STATE_DIM

CHECKPOINT_MAGIC = b"PROBIDCK"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {torch.float32: 1, torch.float64: 2}
_CODE_DTYPES = {1: torch.float32, 2: torch.float64}


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context_steps: int = 16
    max_timestep: int = 48
    action_bound: float = 2.0
    sigma_floor: float = 2e-3
    sigma_cap: float = 1.0
    dtype: str = "float32"  # "float32" | "float64"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.context_steps < 1:
            raise ValueError("context_steps must be >= 1")
        if self.action_bound < 0:
            raise ValueError("action_bound must be > 0 (0 = resolve from data)")
        if self.action_bound > 0 and not (0 < self.sigma_floor < self.sigma_cap):
            raise ValueError("need 0 < sigma_floor < sigma_cap")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float32 if self.dtype == "float32" else torch.float64


class PolicyOutput(NamedTuple):
    mu: torch.Tensor     # (B, T) bid multiplier mean, in [0, action_bound]
    sigma: torch.Tensor  # (B, T) std, in [sigma_floor, sigma_cap]


class PredictorOutput(NamedTuple):
    r_hat: torch.Tensor  # (B, T) predicted future value, standardized scale
    c_hat: torch.Tensor  # (B, T) predicted future cost, standardized scale


class NormStats(NamedTuple):
    """Dataset standardization statistics for the scalar streams and state."""

    rtg_mean: float
    rtg_std: float
    ctg_mean: float
    ctg_std: float
    act_mean: float
    act_std: float
    state_mean: np.ndarray  # (16,)
    state_std: np.ndarray   # (16,)


class _Block(nn.Module):
    def __init__(self, d: int, n_heads: int, n_layers: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, 2 * d)
        self.ff2 = nn.Linear(2 * d, d)
        nn.init.normal_(self.qkv.weight, std=0.02)
        nn.init.normal_(self.ff1.weight, std=0.02)
        # residual-branch outputs scaled down with depth
        nn.init.normal_(self.proj.weight, std=0.02 / math.sqrt(2 * n_layers))
        nn.init.normal_(self.ff2.weight, std=0.02 / math.sqrt(2 * n_layers))
        for lin in (self.qkv, self.proj, self.ff1, self.ff2):
            nn.init.zeros_(lin.bias)

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        B, S, D = x.shape
        return x.view(B, S, self.n_heads, D // self.n_heads).transpose(1, 2)

    def forward(self, x: torch.Tensor, kv_sink: list | None = None) -> torch.Tensor:
        B, S, D = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q, k, v = map(self._split_heads, (q, k, v))
        if kv_sink is not None:
            kv_sink.append((k.detach(), v.detach()))
        y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        y = y.transpose(1, 2).reshape(B, S, D)
        x = x + self.proj(y)
        return x + self.ff2(F.gelu(self.ff1(self.ln2(x))))

    def forward_substituted(self, x_sub: torch.Tensor, k_cache: torch.Tensor,
                            v_cache: torch.Tensor, allow: torch.Tensor) -> torch.Tensor:
        """Advance substituted single tokens one block, attending to the
        cached base-sequence keys/values plus themselves.

        x_sub: (B, Q, D) residual streams of the substituted tokens
        k_cache/v_cache: (B, H, S, dh) from the base forward
        allow: (Q, S + Q) bool; columns [0, S) gate the cache (strictly
               earlier positions only, never the query's own base slot) and
               columns [S, S + Q) are the identity (each query sees itself)
        """
        B, Q, D = x_sub.shape
        H = self.n_heads
        dh = D // H
        h = self.ln1(x_sub)
        q, k_self, v_self = self.qkv(h).chunk(3, dim=-1)
        q = q.view(B, Q, H, dh).transpose(1, 2)
        k = torch.cat([k_cache, k_self.view(B, Q, H, dh).transpose(1, 2)], dim=2)
        v = torch.cat([v_cache, v_self.view(B, Q, H, dh).transpose(1, 2)], dim=2)
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=allow)
        y = y.transpose(1, 2).reshape(B, Q, D)
        x_sub = x_sub + self.proj(y)
        return x_sub + self.ff2(F.gelu(self.ff1(self.ln2(x_sub))))


class PolicyModel(nn.Module):
    """Backbone plus Gaussian action head and outcome-predictor head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.action_bound <= 0:
            raise ValueError("model needs a resolved positive action_bound")
        self.config = config
        d = config.d_model
        self.embed_rtg = nn.Linear(1, d)
        self.embed_ctg = nn.Linear(1, d)
        self.embed_state = nn.Linear(STATE_DIM, d)
        self.embed_action = nn.Linear(1, d)
        self.embed_time = nn.Embedding(config.max_timestep, d)
        self.blocks = nn.ModuleList(
            [_Block(d, config.n_heads, config.n_layers) for _ in range(config.n_layers)])
        self.ln_f = nn.LayerNorm(d)
        self.policy_head = nn.Linear(d, 2)
        self.pred_hidden = nn.Linear(d, d)
        self.pred_out = nn.Linear(d, 2)

        for lin in (self.embed_rtg, self.embed_ctg, self.embed_state, self.embed_action):
            nn.init.normal_(lin.weight, std=0.02)
            nn.init.zeros_(lin.bias)
        nn.init.normal_(self.embed_time.weight, std=0.02)
        nn.init.normal_(self.policy_head.weight, std=0.01)
        nn.init.zeros_(self.policy_head.bias)
        nn.init.normal_(self.pred_hidden.weight, std=0.02)
        nn.init.zeros_(self.pred_hidden.bias)
        nn.init.normal_(self.pred_out.weight, std=0.02)
        nn.init.zeros_(self.pred_out.bias)

        # dataset statistics and bounds travel with the checkpoint
        dt = config.torch_dtype
        self.register_buffer("norm_scalars", torch.ones(6, dtype=dt))
        self.register_buffer("norm_state_mean", torch.zeros(STATE_DIM, dtype=dt))
        self.register_buffer("norm_state_std", torch.ones(STATE_DIM, dtype=dt))
        self.register_buffer("bounds", torch.tensor(
            [config.action_bound, config.sigma_floor, config.sigma_cap], dtype=dt))
        self.register_buffer("zero_ctg", torch.zeros(1, dtype=dt))
        self.norm_scalars[0::2] = 0.0  # means zero, stds one

        self.to(dt)

    # -- standardization -------------------------------------------------

    def set_normalization(self, stats: NormStats) -> None:
        dt = self.config.torch_dtype
        self.norm_scalars = torch.tensor(
            [stats.rtg_mean, stats.rtg_std, stats.ctg_mean, stats.ctg_std,
             stats.act_mean, stats.act_std], dtype=dt)
        self.norm_state_mean = torch.as_tensor(stats.state_mean, dtype=dt)
        self.norm_state_std = torch.as_tensor(stats.state_std, dtype=dt)

    def set_zero_ctg(self, flag: bool) -> None:
        """Train/infer with the cost stream blanked (single-stream ablations)."""
        self.zero_ctg = torch.tensor([1.0 if flag else 0.0],
                                     dtype=self.config.torch_dtype)

    @property
    def action_bound(self) -> float:
        return float(self.bounds[0])

    def std_action(self, a: torch.Tensor) -> torch.Tensor:
        return (a - self.norm_scalars[4]) / self.norm_scalars[5]

    def destd_pred(self, r_hat: torch.Tensor, c_hat: torch.Tensor):
        """Map predictor outputs back to raw value/cost units."""
        r = r_hat * self.norm_scalars[1] + self.norm_scalars[0]
        c = c_hat * self.norm_scalars[3] + self.norm_scalars[2]
        return r, c

    def std_pred_targets(self, r: torch.Tensor, c: torch.Tensor):
        rr = (r - self.norm_scalars[0]) / self.norm_scalars[1]
        cc = (c - self.norm_scalars[2]) / self.norm_scalars[3]
        return rr, cc

    # -- forward ---------------------------------------------------------

    def _embed_tokens(self, rtg, ctg, states, actions, timesteps):
        dt = self.config.torch_dtype
        rtg = rtg.to(dt)
        ctg = ctg.to(dt)
        states = states.to(dt)
        actions = actions.to(dt)
        B, T = rtg.shape
        if T > self.config.context_steps:
            raise ValueError(f"window of {T} steps exceeds context {self.config.context_steps}")

        r = (rtg - self.norm_scalars[0]) / self.norm_scalars[1]
        c = (ctg - self.norm_scalars[2]) / self.norm_scalars[3]
        c = c * (1.0 - self.zero_ctg)
        s = (states - self.norm_state_mean) / self.norm_state_std
        a = self.std_action(actions)

        tok = torch.stack([
            self.embed_rtg(r.unsqueeze(-1)),
            self.embed_ctg(c.unsqueeze(-1)),
            self.embed_state(s),
            self.embed_action(a.unsqueeze(-1)),
        ], dim=2)  # (B, T, 4, d)
        tok = tok + self.embed_time(timesteps - 1).unsqueeze(2)
        return tok.view(B, 4 * T, -1)

    def forward(self, rtg, ctg, states, actions, timesteps,
                detach_predictor: bool = False, want_cache: bool = False):
        """All inputs (B, T) except states (B, T, 16); timesteps are 1-based
        absolute step indices. Returns per-step policy and predictor outputs,
        plus the detached attention cache for counterfactual queries when
        `want_cache` is set.

        The action at the final step may be a placeholder when acting online:
        the policy read position cannot attend to it.
        """
        if not (torch.isfinite(rtg).all() and torch.isfinite(ctg).all()
                and torch.isfinite(states).all() and torch.isfinite(actions).all()):
            raise ValueError("non-finite model input")
        B, T = rtg.shape
        x = self._embed_tokens(rtg, ctg, states, actions, timesteps)
        caches: list | None = [] if want_cache else None
        for block in self.blocks:
            x = block(x, kv_sink=caches)
        h = self.ln_f(x).view(B, T, 4, -1)
        policy = self._policy_from_hidden(h[:, :, 2])
        h_a = h[:, :, 3]
        if detach_predictor:
            h_a = h_a.detach()
        pred = self._pred_from_hidden(h_a)
        if want_cache:
            return policy, pred, {"kv": caches, "timesteps": timesteps}
        return policy, pred

    def _policy_from_hidden(self, h_s: torch.Tensor) -> PolicyOutput:
        raw = self.policy_head(h_s)
        lam_max, sig_lo, sig_hi = self.bounds
        mu = lam_max * torch.sigmoid(raw[..., 0])
        sigma = sig_lo + (sig_hi - sig_lo) * torch.sigmoid(raw[..., 1])
        return PolicyOutput(mu=mu, sigma=sigma)

    def _pred_from_hidden(self, h_a: torch.Tensor) -> PredictorOutput:
        z = self.pred_out(F.gelu(self.pred_hidden(h_a)))
        return PredictorOutput(r_hat=z[..., 0], c_hat=z[..., 1])

    # -- counterfactual substitution --------------------------------------

    @torch.no_grad()
    def predict_for_actions(self, cache, candidate_actions: torch.Tensor) -> PredictorOutput:
        """Predictor outputs with the step-t action token replaced by each
        candidate, every other token kept at its logged value.

        candidate_actions: (B, T, K) raw action values. Exact equivalent of
        rebuilding the full sequence per candidate and reading position t,
        at the cost of one extra token per candidate.
        """
        B, T, K = candidate_actions.shape
        d = self.config.d_model
        a = self.std_action(candidate_actions.to(self.config.torch_dtype))
        x = self.embed_action(a.unsqueeze(-1))  # (B, T, K, d)
        x = x + self.embed_time(cache["timesteps"] - 1).unsqueeze(2)
        x = x.view(B, T * K, d)

        S = 4 * T
        Q = T * K
        pos = torch.arange(T) * 4 + 3  # own slot of each step's action token
        allow = (torch.arange(S).view(1, -1) < pos.view(-1, 1))  # (T, S)
        allow = torch.cat([allow.repeat_interleave(K, dim=0), torch.eye(Q, dtype=torch.bool)],
                          dim=1)  # (Q, S + Q): cache prefix plus self

        for block, (k_cache, v_cache) in zip(self.blocks, cache["kv"]):
            x = block.forward_substituted(x, k_cache, v_cache, allow)
        h = self.ln_f(x).view(B, T, K, d)
        return self._pred_from_hidden(h)


# -- losses ---------------------------------------------------------------

def masked_step_mean(per_step: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over valid steps per sequence, then mean over the batch."""
    mask = mask.to(per_step.dtype)
    per_seq = (per_step * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)
    return per_seq.mean()


def nll_loss(policy: PolicyOutput, actions: torch.Tensor,
             mask: torch.Tensor) -> torch.Tensor:
    """Gaussian negative log-likelihood of the logged actions."""
    a = actions.to(policy.mu.dtype)
    per = (torch.log(policy.sigma) + 0.5 * math.log(2.0 * math.pi)
           + (a - policy.mu) ** 2 / (2.0 * policy.sigma ** 2))
    return masked_step_mean(per, mask)


def entropy(policy: PolicyOutput, mask: torch.Tensor) -> torch.Tensor:
    per = 0.5 * torch.log(2.0 * math.pi * math.e * policy.sigma ** 2)
    return masked_step_mean(per, mask)


# -- checkpoint i/o --------------------------------------------------------

class CheckpointError(ValueError):
    pass


def _named_tensors(model: PolicyModel) -> dict[str, torch.Tensor]:
    out = dict(model.state_dict())
    cfg = model.config
    out["meta/model_config"] = torch.tensor(
        [cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.context_steps,
         cfg.max_timestep], dtype=torch.float64)
    # exact float64 copies so the rebuilt config matches the original even
    # when the arithmetic buffers are float32
    out["meta/bounds"] = torch.tensor(
        [cfg.action_bound, cfg.sigma_floor, cfg.sigma_cap], dtype=torch.float64)
    return out

def save_checkpoint(model: PolicyModel, path: str | Path) -> None:
    tensors = _named_tensors(model)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        arr = t.numpy()
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", _DTYPE_CODES[t.dtype]))
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    Path(path).write_bytes(buf.getvalue())


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint file")
    return b


def read_checkpoint_tensors(path: str | Path) -> dict[str, torch.Tensor]:
    with Path(path).open("rb") as f:
        if _read_exact(f, 8) != CHECKPOINT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, name_len).decode("utf-8")
            (dtype_code,) = struct.unpack("<B", _read_exact(f, 1))
            if dtype_code not in _CODE_DTYPES:
                raise CheckpointError(f"unknown tensor dtype code {dtype_code}")
            (rank,) = struct.unpack("<B", _read_exact(f, 1))
            dims = [struct.unpack("<Q", _read_exact(f, 8))[0] for _ in range(rank)]
            dtype = _CODE_DTYPES[dtype_code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if dims else dtype.itemsize
            np_dtype = np.dtype("<f4" if dtype is torch.float32 else "<f8")
            count_elems = int(np.prod(dims, dtype=np.int64)) if dims else 1
            data = np.frombuffer(_read_exact(f, count_elems * np_dtype.itemsize),
                                 dtype=np_dtype).reshape(dims)
            tensors[name] = torch.from_numpy(data.copy())
        if f.read(1) != b"":
            raise CheckpointError("trailing bytes after last tensor")
    return tensors


def load_checkpoint(path: str | Path) -> PolicyModel:
    tensors = read_checkpoint_tensors(path)
    try:
        meta = tensors.pop("meta/model_config")
        bounds = tensors.pop("meta/bounds")
    except KeyError as e:
        raise CheckpointError(f"checkpoint missing tensor {e}") from e
    dtype = "float32" if tensors["policy_head.weight"].dtype is torch.float32 else "float64"
    cfg = ModelConfig(
        d_model=int(meta[0]), n_layers=int(meta[1]), n_heads=int(meta[2]),
        context_steps=int(meta[3]), max_timestep=int(meta[4]),
        action_bound=float(bounds[0]), sigma_floor=float(bounds[1]),
        sigma_cap=float(bounds[2]), dtype=dtype)
    model = PolicyModel(cfg)
    model.load_state_dict(tensors)
    return model


def finite_difference_check(model: PolicyModel, loss_fn, h: float = 1e-5,
                            rel_floor: float = 1e-5) -> float:
    """Compare autograd gradients of `loss_fn()` (a closure over the model)
    against central finite differences for every parameter entry.

    Returns the worst relative error. Meant for tiny double-precision models;
    cost is two loss evaluations per parameter.
    """
    if model.config.torch_dtype is not torch.float64:
        raise ValueError("gradient checking requires a float64 model")
    model.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for p in model.parameters():
        grad = p.grad if p.grad is not None else torch.zeros_like(p)
        flat, gflat = p.data.view(-1), grad.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                fd = (up - down) / (2.0 * h)
                ad = float(gflat[i])
                rel = abs(ad - fd) / max(abs(ad), abs(fd), rel_floor)
                worst = max(worst, rel)
    return worst


def compute_norm_stats(rtg: np.ndarray, ctg: np.ndarray, actions: np.ndarray,
                       states: np.ndarray) -> NormStats:
    """Pooled dataset statistics; stds floored away from zero."""
    def ms(x):
        return float(np.mean(x)), max(float(np.std(x)), 1e-6)

    rm, rs = ms(rtg)
    cm, cs = ms(ctg)
    am, as_ = ms(actions)
    sm = states.reshape(-1, STATE_DIM).mean(axis=0)
    ss = np.maximum(states.reshape(-1, STATE_DIM).std(axis=0), 1e-6)
    return NormStats(rtg_mean=rm, rtg_std=rs, ctg_mean=cm, ctg_std=cs,
                     act_mean=am, act_std=as_, state_mean=sm, state_std=ss)
