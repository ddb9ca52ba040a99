"""
64-bit dense tensor layer shared by every model module.

torch supplies the tensors, reverse-mode autograd and AdamW; this module
pins the dtype, adds shape-checked primitives, the named parameter store
with learning-rate group tags, the finite-difference checker, the plateau
rule, the splitmix64 seed deriver and the GDMRGCKPT1 checkpoint codec.
"""
from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataError, ShapeError

DTYPE = torch.float64

LR_GROUPS = ("encoder", "new_modules", "decoder")
DEFAULT_GROUP_MULTIPLIERS = {"encoder": 0.1, "new_modules": 1.0, "decoder": 0.5}

CKPT_MAGIC = b"GDMRGCKPT1"

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


# ---------------------------------------------------------------------------
# splitmix64
# ---------------------------------------------------------------------------

def splitmix64(x: int) -> int:
    """One splitmix64 output for input state x (64-bit wrap-around)."""
    z = (x + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """
    splitmix64 counter generator.

    The raw stream is only used to derive seeds: bulk sampling goes through
    numpy PCG64 / torch generators seeded from it, so identical seeds give
    identical streams on every platform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_u64(self) -> int:
        out = splitmix64((self.seed + self.counter * _GOLDEN) & _MASK64)
        self.counter += 1
        return out

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def derive(self, key: int) -> "Rng":
        return Rng(splitmix64(self.seed ^ (int(key) & _MASK64)))

    def numpy_generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.next_u64()))

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(self.next_u64() >> 1)
        return g


def seed_everything(seed: int) -> None:
    """Seed torch's global stream (dropout masks) and pin single-threaded math."""
    torch.manual_seed(Rng(seed).derive(0xD0).next_u64() >> 1)
    torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def check_finite(t: torch.Tensor, op: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"{op}: non-finite value in output")
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1:
        raise ShapeError("matmul", a.shape, b.shape, "scalars are not matrices")
    inner_b = b.shape[-2] if b.dim() >= 2 else b.shape[0]
    if a.shape[-1] != inner_b:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def _broadcast(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast("add", a, b)
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast("mul", a, b)
    return a * b


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if weight.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", x.shape, weight.shape)
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def dropout(
    x: torch.Tensor,
    rate: float,
    training: bool,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Inverted dropout; identity (same tensor) when not training or rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


def scaled_dot_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    q: [..., Tq, dh], k/v: [..., Tk, dh]; mask is True where attention is blocked.
    Returns (output [..., Tq, dh], weights [..., Tq, Tk]).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention", q.shape, k.shape)
    energy = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    if mask is not None:
        energy = energy.masked_fill(mask, float("-inf"))
    weights = torch.softmax(energy, dim=-1)
    return weights @ v, weights


class Dropout(nn.Module):
    def __init__(self, rate: float = 0.0):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return dropout(x, self.rate, self.training)

    def extra_repr(self) -> str:
        return f"rate={self.rate}"


def linear(d_in: int, d_out: int, bias: bool = True) -> nn.Linear:
    return nn.Linear(d_in, d_out, bias=bias, dtype=DTYPE)


def norm(d: int) -> nn.LayerNorm:
    return nn.LayerNorm(d, eps=1e-5, dtype=DTYPE)


# ---------------------------------------------------------------------------
# ParamStore / gradients
# ---------------------------------------------------------------------------

@dataclass
class ParamStore:
    """Named parameters with a learning-rate group tag each."""

    params: "OrderedDict[str, nn.Parameter]" = field(default_factory=OrderedDict)
    groups: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_module(
        cls,
        module: nn.Module,
        group_of: Callable[[str], str] = lambda name: "new_modules",
        trainable_only: bool = True,
    ) -> "ParamStore":
        store = cls()
        for name, p in module.named_parameters():
            if trainable_only and not p.requires_grad:
                continue
            store.add(name, p, group_of(name))
        return store

    def add(self, name: str, param: nn.Parameter, group: str = "new_modules") -> None:
        if group not in LR_GROUPS:
            raise ValueError(f"unknown lr group '{group}' for {name}; expected one of {LR_GROUPS}")
        self.params[name] = param
        self.groups[name] = group

    def __len__(self) -> int:
        return len(self.params)

    def __iter__(self):
        return iter(self.params.items())

    def numel(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def by_group(self) -> dict[str, list[nn.Parameter]]:
        out: dict[str, list[nn.Parameter]] = {g: [] for g in LR_GROUPS}
        for name, p in self.params.items():
            out[self.groups[name]].append(p)
        return out

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad(self, name: str) -> torch.Tensor:
        p = self.params[name]
        return torch.zeros_like(p) if p.grad is None else p.grad


def grad_eval(loss: torch.Tensor, store: ParamStore) -> dict[str, torch.Tensor]:
    """Reverse-mode pass; gradients accumulate into the store until zero_grad()."""
    if loss.numel() != 1:
        raise ValueError(f"grad_eval needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()
    return {name: store.grad(name) for name in store.params}


def _as_tensor_list(params) -> list[torch.Tensor]:
    if isinstance(params, ParamStore):
        return list(params.params.values())
    if isinstance(params, Mapping):
        return list(params.values())
    return list(params)


def finite_diff_check(
    loss_fn: Callable[[], torch.Tensor],
    params: ParamStore | Mapping[str, torch.Tensor] | Sequence[torch.Tensor],
    eps: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """
    max over scalar entries of |analytic - central difference| / max(1, |analytic|).

    loss_fn must be deterministic (dropout off). max_entries subsamples the
    perturbed entries per tensor with a seeded generator.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    tensors = [t for t in _as_tensor_list(params) if t.numel() > 0]
    if not tensors:
        return 0.0

    loss = loss_fn()
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g.detach() for t, g in zip(tensors, grads)]

    gen = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            flat = t.data.view(-1)
            gflat = g.reshape(-1)
            idx: Iterable[int] = range(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = sorted(gen.choice(flat.numel(), size=max_entries, replace=False).tolist())
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = loss_fn().item()
                flat[i] = orig - eps
                f_minus = loss_fn().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                analytic = gflat[i].item()
                err = abs(analytic - numeric) / max(1.0, abs(analytic))
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# AdamW with lr groups / plateau rule
# ---------------------------------------------------------------------------

def lr_by_group(base_lr: float, multipliers: Mapping[str, float] | None = None) -> dict[str, float]:
    mult = dict(DEFAULT_GROUP_MULTIPLIERS)
    if multipliers:
        mult.update(multipliers)
    return {g: base_lr * mult[g] for g in LR_GROUPS}


class GroupedAdamW:
    """torch AdamW with one param group per lr tag."""

    def __init__(
        self,
        store: ParamStore,
        lrs: Mapping[str, float],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        _check_lrs(lrs)
        groups = [
            {"params": ps, "lr": float(lrs[tag]), "name": tag}
            for tag, ps in store.by_group().items()
            if ps
        ]
        if not groups:
            # torch refuses an empty optimizer; a zero-parameter model has nothing to update
            groups = [{"params": [nn.Parameter(torch.zeros(0, dtype=DTYPE))], "lr": 0.0, "name": "new_modules"}]
        self.optimizer = torch.optim.AdamW(
            groups, betas=(beta1, beta2), eps=eps, weight_decay=weight_decay, foreach=False
        )
        self.base_lrs = {tag: float(lrs[tag]) for tag in LR_GROUPS if tag in lrs}
        self.steps = 0

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=True)

    def set_lrs(self, lrs: Mapping[str, float]) -> None:
        _check_lrs(lrs)
        for group in self.optimizer.param_groups:
            if group["name"] in lrs:
                group["lr"] = float(lrs[group["name"]])

    def current_lrs(self) -> dict[str, float]:
        out = dict(self.base_lrs)
        for group in self.optimizer.param_groups:
            out[group["name"]] = group["lr"]
        return out

    def step(self) -> int:
        self.optimizer.step()
        self.steps += 1
        return self.steps


def build_optimizer(
    store: ParamStore,
    base_lr: float,
    multipliers: Mapping[str, float] | None = None,
    **kwargs,
) -> GroupedAdamW:
    return GroupedAdamW(store, lr_by_group(base_lr, multipliers), **kwargs)


def _check_lrs(lrs: Mapping[str, float]) -> None:
    for tag, lr in lrs.items():
        if tag not in LR_GROUPS:
            raise ValueError(f"unknown lr group '{tag}'")
        if lr < 0:
            raise ValueError(f"negative learning rate for group '{tag}': {lr}")


def adamw_step(optimizer: GroupedAdamW, lrs: Mapping[str, float] | None = None) -> int:
    """One decoupled-weight-decay update; returns the advanced step counter."""
    if lrs is not None:
        optimizer.set_lrs(lrs)
    return optimizer.step()


def plateau_step(
    history: Sequence[float],
    factor: float,
    patience: int,
    min_lr: float = 0.0,
    base_lr: float = 1.0,
    threshold: float = 0.0,
) -> float:
    """
    Replay the plateau rule over a maximised metric history and return the
    current lr multiplier. Every `patience` consecutive non-improving
    evaluations multiply by `factor`; base_lr * multiplier never drops below min_lr.
    """
    if not 0.0 < factor < 1.0:
        raise ValueError(f"factor must be in (0, 1), got {factor}")
    if patience < 1:
        raise ValueError(f"patience must be >= 1, got {patience}")
    floor = min(1.0, min_lr / base_lr) if base_lr > 0 else 1.0
    mult = 1.0
    best = -math.inf
    stalls = 0
    for value in history:
        if value > best + threshold:
            best = value
            stalls = 0
            continue
        stalls += 1
        if stalls >= patience:
            mult = max(mult * factor, floor)
            stalls = 0
    return mult


class PlateauScheduler:
    def __init__(self, optimizer: GroupedAdamW, factor: float, patience: int, min_lr: float):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.history: list[float] = []
        self.multiplier = 1.0

    def step(self, metric: float) -> float:
        self.history.append(float(metric))
        self.multiplier = plateau_step(self.history, self.factor, self.patience)
        lrs = {
            tag: max(base * self.multiplier, min(self.min_lr, base))
            for tag, base in self.optimizer.base_lrs.items()
        }
        self.optimizer.set_lrs(lrs)
        return self.multiplier


# ---------------------------------------------------------------------------
# GDMRGCKPT1 checkpoint codec
# ---------------------------------------------------------------------------

def save_checkpoint(state: Mapping[str, torch.Tensor], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(CKPT_MAGIC)
        for name, tensor in state.items():
            raw = name.encode("utf-8")
            arr = tensor.detach().cpu().to(torch.float64).contiguous().numpy()
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.astype("<f8", copy=False).tobytes(order="C"))
    return path


def load_checkpoint(path: str | Path) -> "OrderedDict[str, torch.Tensor]":
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise DataError(f"{path}: expected magic {CKPT_MAGIC.decode()} at offset 0")

    def take(offset: int, n: int) -> bytes:
        if offset + n > len(blob):
            raise DataError(f"{path}: truncated record at byte offset {offset}")
        return blob[offset: offset + n]

    state: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    off = len(CKPT_MAGIC)
    while off < len(blob):
        (n_name,) = struct.unpack("<I", take(off, 4))
        off += 4
        name = take(off, n_name).decode("utf-8")
        off += n_name
        (rank,) = struct.unpack("<I", take(off, 4))
        off += 4
        shape = []
        for _ in range(rank):
            (dim,) = struct.unpack("<Q", take(off, 8))
            shape.append(dim)
            off += 8
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(off, 8 * count), dtype="<f8").reshape(shape)
        off += 8 * count
        state[name] = torch.from_numpy(data.astype(np.float64))
    return state
