"""Differentiation and optimisation substrate.

Reverse-mode gradients come from torch autograd on float64 CPU tensors.  On
top of it this module provides the pieces the model code needs: a named
parameter store with its own Adam state, closed-form Gaussian / categorical
densities and divergences, a central-difference gradient checker, and the
checkpoint container.

Checkpoint layout (all integers little-endian)::

    magic        8 bytes   b"EQDDMCK\\0"
    version      u32       currently 1
    meta_len     u32       length of the UTF-8 JSON metadata blob
    meta         bytes
    n_records    u32
    per record:
      name_len   u32, name (UTF-8)
      ndim       u32, shape (u64 x ndim)
      data       float64 little-endian, C order, prod(shape) values
"""
from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
LOG_2PI = math.log(2.0 * math.pi)
TINY = float(np.finfo(np.float64).tiny)

CHECKPOINT_MAGIC = b"EQDDMCK\0"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


def tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


class ParamStore:
    """Named float64 parameters plus Adam moment accumulators.

    Shapes are fixed at registration.  ``params`` entries are leaf tensors
    shared with whatever module created them, so in-place optimizer updates are
    seen by the model.
    """

    def __init__(self, params: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]] = ()):
        self.params: OrderedDict[str, torch.Tensor] = OrderedDict()
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.step_count = 0
        items = params.items() if isinstance(params, Mapping) else params
        for name, p in items:
            self.add(name, p)

    def add(self, name: str, p: torch.Tensor) -> torch.Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        if p.dtype != DTYPE:
            raise TypeError(f"{name}: parameters must be float64")
        if not p.requires_grad:
            p.requires_grad_(True)
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def numel(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, p.detach().cpu().numpy().copy()) for k, p in self.params.items())

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        missing = [k for k in self.params if k not in state]
        if strict and missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, p in self.params.items():
            if name not in state:
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {tuple(p.shape)}")
            with torch.no_grad():
                p.copy_(torch.from_numpy(arr))


def grad(output: torch.Tensor, params: ParamStore) -> OrderedDict[str, torch.Tensor]:
    """Reverse-mode gradient of a scalar with respect to every stored parameter."""
    if output.dim() != 0 and output.numel() != 1:
        raise ValueError(f"grad needs a scalar output, got shape {tuple(output.shape)}")
    names = params.names()
    tensors = [params[n] for n in names]
    if not output.requires_grad:
        return OrderedDict((n, torch.zeros_like(t)) for n, t in zip(names, tensors))
    gs = torch.autograd.grad(output.reshape(()), tensors, allow_unused=True)
    return OrderedDict(
        (n, torch.zeros_like(t) if g is None else g.detach()) for n, t, g in zip(names, tensors, gs)
    )


def adam_step(
    params: ParamStore,
    grads: Mapping[str, torch.Tensor],
    lr: float = 1e-2,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    params.step_count += 1
    t = params.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
            m = params.m.get(name)
            if m is None:
                m = params.m[name] = torch.zeros_like(p)
                params.v[name] = torch.zeros_like(p)
            v = params.v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))


# -- densities ---------------------------------------------------------------


def _check_scale(sigma: torch.Tensor) -> None:
    if not bool((sigma > 0).all()):
        raise ValueError("standard deviations must be strictly positive")


def softplus(x: torch.Tensor) -> torch.Tensor:
    return F.softplus(x)


def inv_softplus(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def gauss_logpdf(x: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Diagonal Gaussian log density, summed over the last axis."""
    sigma = torch.as_tensor(sigma, dtype=DTYPE)
    _check_scale(sigma)
    z = (x - mu) / sigma
    return (-0.5 * z * z - torch.log(sigma) - 0.5 * LOG_2PI).sum(-1)


def kl_gauss(mu1: torch.Tensor, sigma1: torch.Tensor, mu2: torch.Tensor, sigma2: torch.Tensor) -> torch.Tensor:
    """KL(N(mu1, diag sigma1^2) || N(mu2, diag sigma2^2)), summed over the last axis."""
    sigma1 = torch.as_tensor(sigma1, dtype=DTYPE)
    sigma2 = torch.as_tensor(sigma2, dtype=DTYPE)
    _check_scale(sigma1)
    _check_scale(sigma2)
    r = sigma1 / sigma2
    d = (mu1 - mu2) / sigma2
    return 0.5 * (r * r + d * d - 1.0 - 2.0 * torch.log(r)).sum(-1)


def safe_log(p: torch.Tensor) -> torch.Tensor:
    """``log`` with probabilities floored at the smallest normal float64."""
    return torch.log(p.clamp_min(TINY))


def kl_cat(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """KL(p || q) over the last axis; 0 log 0 = 0.

    Entries of ``p`` below the smallest normal float count as zero, which keeps
    second derivatives finite (``1/p`` overflows for subnormal ``p``).
    """
    p = torch.as_tensor(p, dtype=DTYPE)
    q = torch.as_tensor(q, dtype=DTYPE)
    live = p >= TINY
    logratio = torch.where(live, torch.log(torch.where(live, p, 1.0)) - safe_log(q), torch.zeros_like(p))
    return (p * logratio).sum(-1)


def reparam_sample(mu: torch.Tensor, sigma: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    _check_scale(torch.as_tensor(sigma))
    return mu + sigma * eps


# -- gradient checking -------------------------------------------------------


def finite_difference_grad(
    fn: Callable[[], torch.Tensor], params: ParamStore, h: float = 1e-4
) -> OrderedDict[str, torch.Tensor]:
    """Central differences of a scalar closure with respect to every parameter entry."""
    out = OrderedDict()
    with torch.no_grad():
        for name, p in params.params.items():
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(fn())
                flat[i] = orig - h
                fm = float(fn())
                flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * h)
            out[name] = g
    return out


def gradient_relative_errors(
    analytic: Mapping[str, torch.Tensor], numeric: Mapping[str, torch.Tensor], floor: float = 1e-8
) -> dict[str, float]:
    """Per-parameter ``|g - g_fd| / max(|g|, |g_fd|)`` in the Euclidean norm."""
    errs = {}
    for name, g in analytic.items():
        n = numeric[name]
        denom = max(float(g.norm()), float(n.norm()), floor)
        errs[name] = float((g - n).norm()) / denom
    return errs


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)), meta_bytes]
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[OrderedDict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an eqddm checkpoint")
    pos = 8
    version, meta_len = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(buf[pos : pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nl,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nl].decode()
        pos += nl
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return arrays, meta
