"""Equivariant switching state-space model: generative networks, ELBO, training
and rolling prediction.

Generative model per sequence (timesteps 0-based, ``L = max(lags)``)::

    s_0 ~ Uniform(S)            s_t | s_{t-1}, z_{t-1} ~ Cat(pi^{s_{t-1}}(z_{t-1}))
    z_t ~ N(0, I)  (t < L)      z_t | z_{t-lags}, s_t  ~ N(mu^{s_t}(z_{t-lags}), sigma^{s_t}(z_{t-lags}))
    x_t | z_t ~ N(mu_x(z_t), sigma_x^2 I)

``mu_x`` and every ``mu^s`` are SO(3)-equivariant, ``pi^s`` and ``sigma^s``
invariant.  The variational family is mean-field: free Gaussians per (n, t)
with one scale per latent block (so rotating a posterior gives a posterior of
the same family), and ``q(s_t)`` obtained from Bayes' rule with the
transition likelihood of a reparameterised sample.
"""
from __future__ import annotations

import contextlib
import dataclasses
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence as Seq

import numpy as np
import torch
from torch import nn

from . import diffcore as dc
from . import equivariant as eq
from .data import DataTransform, Sequence
from .diffcore import DTYPE, ParamStore
from .lie import SO, RepSignature

log = logging.getLogger(__name__)

# per-row convergence of the test-time Newton solve
STEP_TOL = 1e-8
GRAD_TOL = 1e-10

VARIANTS = ("equivariant", "ablation")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    S: int = 2
    K: int = 3
    lags: tuple[int, ...] = (1, 2)
    D: int = 1
    latent_signature: str = ""  # empty: K/3 copies of the vector type
    emission_width: int = 2
    emission_depth: int = 3
    transition_width: int = 5
    switch_width: int = 3
    sigma_x: float = 0.1
    train_sigma_x: bool = False
    init_sigma_z: float = 0.1
    lr: float = 1e-2
    epochs: int = 1500
    seed: int = 0
    infer_steps: int = 50
    warmup_window: int = 6  # 0 disables the joint warm-up fit
    variant: str = "equivariant"

    def __post_init__(self):
        self.lags = tuple(sorted({int(l) for l in self.lags}))
        if not self.lags or self.lags[0] < 1:
            raise ConfigError("lags must be positive integers")
        if self.S < 1 or self.K < 1 or self.D < 1:
            raise ConfigError("S, K and D must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.sigma_x > 0:
            raise ConfigError("sigma_x must be positive")
        if self.warmup_window and self.warmup_window <= self.max_lag:
            raise ConfigError(f"warmup_window must be 0 or exceed the largest lag ({self.max_lag})")
        if self.latent_signature:
            try:
                sig = RepSignature.parse(self.latent_signature)
            except ValueError as e:
                raise ConfigError(str(e)) from None
            if any(r > 1 for _, r in sig.terms):
                raise ConfigError("latent signature may only use ranks 0 and 1")
            if sig.size(3) != self.K:
                raise ConfigError(f"latent signature {sig} has size {sig.size(3)}, K = {self.K}")
        elif self.K % 3:
            raise ConfigError(f"K = {self.K} is not a multiple of 3; give an explicit latent_signature")

    @property
    def max_lag(self) -> int:
        return self.lags[-1]

    @property
    def latent_sig(self) -> RepSignature:
        if self.latent_signature:
            return RepSignature.parse(self.latent_signature)
        return RepSignature([(self.K // 3, 1)])

    @property
    def obs_sig(self) -> RepSignature:
        return RepSignature([(self.D, 1)])

    @property
    def n_blocks(self) -> int:
        return len(self.latent_sig.blocks(3))

    # -- flat key = value text ------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lags"] = list(self.lags)
        return d

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**{k: (tuple(v) if k == "lags" else v) for k, v in d.items()})

    @classmethod
    def parse_value(cls, key: str, text: str):
        types = {f.name: f.type for f in fields(cls)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        t = types[key]
        text = text.strip()
        try:
            if key == "lags":
                return tuple(int(x) for x in text.split(",") if x.strip())
            if t == "bool":
                if text.lower() in ("1", "true", "yes", "on"):
                    return True
                if text.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(text)
            if t == "int":
                return int(text)
            if t == "float":
                return float(text)
            return text
        except ValueError:
            raise ConfigError(f"bad value for {key}: {text!r}") from None

    @classmethod
    def parse_text(cls, text: str, source: str = "<config>") -> dict:
        out = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{source}:{lineno}: expected key = value")
            key = key.strip()
            try:
                out[key] = cls.parse_value(key, value)
            except ConfigError as e:
                raise ConfigError(f"{source}:{lineno}: {e}") from None
        return out

    @classmethod
    def load(cls, path: str | Path, **overrides) -> ModelConfig:
        values = cls.parse_text(Path(path).read_text(), str(path))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


# -- generative model ----------------------------------------------------------


class DynamicalModel(nn.Module):
    """Emission, per-state transition and per-state switch networks."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.group = SO(3)
        equivariant = config.variant == "equivariant"
        rng = np.random.default_rng(config.seed)
        lat, obs = config.latent_sig, config.obs_sig
        build = lambda spec: eq.build_network(spec, self.group, rng, equivariant)  # noqa: E731
        self.emission = build(eq.emission_spec(lat, obs, config.emission_width, config.emission_depth))
        self.transitions = nn.ModuleList(
            [build(eq.transition_spec(lat, len(config.lags), config.transition_width)) for _ in range(config.S)]
        )
        self.switches = nn.ModuleList([build(eq.switch_spec(lat, config.S, config.switch_width)) for _ in range(config.S)])
        raw = torch.tensor(float(dc.inv_softplus(config.sigma_x)), dtype=DTYPE)
        if config.train_sigma_x:
            self.sigma_x_raw = nn.Parameter(raw)
        else:
            self.register_buffer("sigma_x_raw", raw)

    @property
    def sigma_x(self) -> torch.Tensor:
        return dc.softplus(self.sigma_x_raw)

    def emission_mean(self, z: torch.Tensor) -> torch.Tensor:
        return self.emission(z)

    def transition(self, s: int, z_hist: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if not 0 <= s < self.config.S:
            raise IndexError(f"state {s} out of range for S = {self.config.S}")
        return self.transitions[s](z_hist)

    def transition_all(self, z_hist: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Means and scales for every state, stacked on axis -2."""
        outs = [net(z_hist) for net in self.transitions]
        return torch.stack([m for m, _ in outs], dim=-2), torch.stack([s for _, s in outs], dim=-2)

    def switch_probs(self, s_prev: int, z_prev: torch.Tensor) -> torch.Tensor:
        if not 0 <= s_prev < self.config.S:
            raise IndexError(f"state {s_prev} out of range for S = {self.config.S}")
        return self.switches[s_prev](z_prev)

    def switch_all(self, z_prev: torch.Tensor) -> torch.Tensor:
        """``P[..., s_prev, s]`` for every previous state."""
        return torch.stack([net(z_prev) for net in self.switches], dim=-2)

    def n_free(self) -> int:
        return sum(p.numel() for p in self.parameters())


@contextlib.contextmanager
def frozen(model: DynamicalModel):
    """Evaluate with cached weights and no parameter gradients."""
    flags = [p.requires_grad for p in model.parameters()]
    layers = [m for m in model.modules() if isinstance(m, eq.EquivariantLinear)]
    model.requires_grad_(False)
    for m in layers:
        m.freeze()
    try:
        yield model
    finally:
        for m in layers:
            m.freeze(False)
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)


def build_model(config: ModelConfig) -> DynamicalModel:
    return DynamicalModel(config)


def build_ablation(config: ModelConfig) -> DynamicalModel:
    """Same architecture and training path with unconstrained dense weights."""
    return DynamicalModel(dataclasses.replace(config, variant="ablation"))


def lag_history(z: torch.Tensor, lags: Seq[int]) -> torch.Tensor:
    """``(..., T, K) -> (..., T - max(lags), |lags|, K)``; row i holds ``z[L + i - l]`` per lag."""
    L, T = max(lags), z.shape[-2]
    return torch.stack([z[..., L - l : T - l, :] for l in lags], dim=-2)


# -- variational parameters ----------------------------------------------------


class VariationalParams(nn.Module):
    """Per-sequence ``mu (T, K)`` and unconstrained scale ``rho (T, blocks)``."""

    def __init__(self, config: ModelConfig, lengths: Seq[int]):
        super().__init__()
        rho0 = float(dc.inv_softplus(config.init_sigma_z))
        self.mu = nn.ParameterList([nn.Parameter(torch.zeros(T, config.K, dtype=DTYPE)) for T in lengths])
        self.rho = nn.ParameterList(
            [nn.Parameter(torch.full((T, config.n_blocks), rho0, dtype=DTYPE)) for T in lengths]
        )
        self.register_buffer("block_idx", torch.as_tensor(block_index(config.latent_sig), dtype=torch.long))

    def sigma(self, n: int) -> torch.Tensor:
        return block_sigma(self.rho[n], self.block_idx)

    def __len__(self):
        return len(self.mu)


def block_index(sig: RepSignature) -> list[int]:
    return [i for i, (_, _, size) in enumerate(sig.blocks(3)) for _ in range(size)]


def block_sigma(rho: torch.Tensor, block_idx: torch.Tensor) -> torch.Tensor:
    return dc.softplus(rho)[..., block_idx]


def param_store(model: DynamicalModel, variational: VariationalParams | None = None) -> ParamStore:
    store = ParamStore((f"theta.{k}", p) for k, p in model.named_parameters())
    if variational is not None:
        for n in range(len(variational)):
            store.add(f"phi.{n}.mu", variational.mu[n])
            store.add(f"phi.{n}.rho", variational.rho[n])
    return store


# -- ELBO ----------------------------------------------------------------------


@dataclass
class ElboTerms:
    recon: torch.Tensor  # (T,)
    kl_discrete: torch.Tensor  # (T,)
    kl_continuous: torch.Tensor  # (T,)
    q_state: torch.Tensor  # (T, S)

    @property
    def per_step(self) -> torch.Tensor:
        return self.recon + self.kl_discrete + self.kl_continuous


def reconstruction(model: DynamicalModel, z: torch.Tensor, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked Gaussian negative log-likelihood of ``x`` under the emission, summed over the last axis."""
    sx = model.sigma_x
    r = (x - model.emission_mean(z)) / sx
    nll = 0.5 * r * r + torch.log(sx) + 0.5 * dc.LOG_2PI
    return torch.where(mask, nll, torch.zeros_like(nll)).sum(-1)


def _normalise_log(logits: torch.Tensor, fallback: torch.Tensor, where: str) -> torch.Tensor:
    ok = torch.isfinite(logits.max(dim=-1, keepdim=True).values)
    if bool(ok.all()):
        return torch.softmax(logits, dim=-1)
    log.warning("state posterior underflow at %s; using the prior", where)
    safe = torch.where(ok, logits, torch.zeros_like(logits))
    return torch.where(ok, torch.softmax(safe, dim=-1), fallback)


def q_state_posterior(
    model: DynamicalModel,
    q_prev: torch.Tensor,
    z_prev: torch.Tensor,
    z_t: torch.Tensor,
    z_hist: torch.Tensor,
) -> torch.Tensor:
    """Bayes-rule state posterior from a latent sample.

    The prior mixes the switch networks over ``q_prev``; the likelihood of
    ``z_t`` under each state's transition Gaussian reweights it.
    """
    prior = (q_prev.unsqueeze(-2) @ model.switch_all(z_prev)).squeeze(-2)
    means, sigmas = model.transition_all(z_hist)
    loglik = dc.gauss_logpdf(z_t.unsqueeze(-2), means, sigmas)
    return _normalise_log(dc.safe_log(prior) + loglik, prior, "q_state_posterior")


def elbo_terms(
    model: DynamicalModel,
    mu: torch.Tensor,
    sigma: torch.Tensor,
    x: torch.Tensor,
    mask: torch.Tensor,
    eps: torch.Tensor,
) -> ElboTerms:
    """Per-timestep negative ELBO pieces for one sequence (single-sample estimator)."""
    cfg = model.config
    S, L = cfg.S, cfg.max_lag
    T = mu.shape[0]
    z = dc.reparam_sample(mu, sigma, eps)
    recon = reconstruction(model, z, x, mask)

    loglik = torch.zeros(T, S, dtype=DTYPE)
    kl_cont = [dc.kl_gauss(mu[: min(L, T)], sigma[: min(L, T)], torch.zeros(()), torch.ones(()))]
    if T > L:
        means, sigmas = model.transition_all(lag_history(z, cfg.lags))
        loglik = torch.cat([loglik[:L], dc.gauss_logpdf(z[L:].unsqueeze(-2), means, sigmas)])
    P = model.switch_all(z[:-1])  # (T-1, S_prev, S)

    q = _state_recursion(P, loglik)
    kl_disc = torch.zeros(T, dtype=DTYPE)
    if T > 1:
        kl_disc = torch.cat([kl_disc[:1], _expect(q[:-1], dc.kl_cat(q[1:].unsqueeze(-2), P))])
    if T > L:
        kl_cont.append(_expect(q[L:], dc.kl_gauss(mu[L:].unsqueeze(-2), sigma[L:].unsqueeze(-2), means, sigmas)))
    return ElboTerms(recon, kl_disc, torch.cat(kl_cont), q)


def _expect(q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """``sum_s q[s] v[s]`` with states of zero weight contributing exactly zero."""
    live = q > 0
    return torch.where(live, q * torch.where(live, v, torch.zeros_like(v)), torch.zeros_like(q)).sum(-1)


def _state_recursion(P: torch.Tensor, loglik: torch.Tensor) -> torch.Tensor:
    """``q_t = softmax(log(q_{t-1} P_t) + loglik_t)`` from a uniform ``q_0``.

    The lean loop runs first; only if it produced a non-finite row is the
    recursion redone with the per-step prior fallback.
    """
    T, S = loglik.shape
    q = [torch.full((S,), 1.0 / S, dtype=DTYPE)]
    for t in range(1, T):
        q.append(torch.softmax(dc.safe_log(q[-1] @ P[t - 1]) + loglik[t], dim=-1))
    out = torch.stack(q)
    if bool(torch.isfinite(out).all()):
        return out
    q = q[:1]
    for t in range(1, T):
        prior = q[-1] @ P[t - 1]
        q.append(_normalise_log(dc.safe_log(prior) + loglik[t], prior, f"t={t}"))
    return torch.stack(q)


@dataclass
class ElboResult:
    loss: torch.Tensor  # negative ELBO, scalar
    recon: float
    kl_discrete: float
    kl_continuous: float
    terms: list[ElboTerms]


def elbo(
    model: DynamicalModel,
    variational: VariationalParams,
    sequences: Seq[Sequence],
    eps: Seq[np.ndarray | torch.Tensor],
) -> ElboResult:
    """Negative ELBO summed over sequences and timesteps, with a term breakdown."""
    terms = []
    for n, seq in enumerate(sequences):
        x = torch.as_tensor(seq.filled(0.0), dtype=DTYPE)
        m = torch.as_tensor(seq.mask)
        e = torch.as_tensor(np.asarray(eps[n]), dtype=DTYPE)
        terms.append(elbo_terms(model, variational.mu[n], variational.sigma(n), x, m, e))
    for n, tm in enumerate(terms):
        per = tm.per_step.detach()
        bad = torch.nonzero(~torch.isfinite(per))
        if len(bad):
            raise dc.NonFiniteError(f"non-finite ELBO term in sequence {n} ({sequences[n].name}) at t={int(bad[0])}")
    loss = sum(tm.per_step.sum() for tm in terms)
    return ElboResult(
        loss,
        float(sum(tm.recon.detach().sum() for tm in terms)),
        float(sum(tm.kl_discrete.detach().sum() for tm in terms)),
        float(sum(tm.kl_continuous.detach().sum() for tm in terms)),
        terms,
    )


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: DynamicalModel
    variational: VariationalParams
    trace: list[float] = field(default_factory=list)

    def reconstruction(self, n: int = 0) -> np.ndarray:
        """Emission of the posterior means of training sequence ``n`` (model units)."""
        with torch.no_grad():
            return self.model.emission_mean(self.variational.mu[n]).numpy().copy()

    @property
    def smoothed_trace(self) -> np.ndarray:
        """Running minimum of an exponential moving average of the loss."""
        if not self.trace:
            return np.zeros(0)
        ema, out = self.trace[0], []
        for v in self.trace:
            ema = 0.95 * ema + 0.05 * v
            out.append(ema)
        return np.minimum.accumulate(out)


def check_sequences(config: ModelConfig, sequences: Seq[Sequence]) -> None:
    for seq in sequences:
        if seq.n_joints != config.D:
            raise ConfigError(f"sequence {seq.name!r} has {seq.n_joints} joints, config D = {config.D}")
        if seq.T <= config.max_lag:
            raise ConfigError(f"sequence {seq.name!r} has T = {seq.T} <= max lag {config.max_lag}")


def train(
    config: ModelConfig,
    sequences: Seq[Sequence],
    rng: np.random.Generator | None = None,
    model: DynamicalModel | None = None,
    progress=None,
) -> TrainResult:
    """Joint Adam ascent on the ELBO over generative and variational parameters.

    ``sequences`` must already be in model units (see :class:`DataTransform`).
    A fresh standard-normal draw per (sequence, timestep) is used at every step.
    """
    check_sequences(config, sequences)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    model = build_model(config) if model is None else model
    variational = VariationalParams(config, [s.T for s in sequences])
    store = param_store(model, variational)
    trace: list[float] = []
    for epoch in range(config.epochs):
        eps = [rng.standard_normal((s.T, config.K)) for s in sequences]
        res = elbo(model, variational, sequences, eps)
        grads = dc.grad(res.loss, store)
        dc.adam_step(store, grads, lr=config.lr)
        trace.append(float(res.loss.detach()))
        if progress is not None:
            progress(epoch, res)
    return TrainResult(model, variational, trace)


# -- test-time inference --------------------------------------------------------


@dataclass
class StepContext:
    """Everything a timestep's inference needs from the past (batched over B)."""

    t: int
    q_prev: torch.Tensor | None  # (B, S)
    P: torch.Tensor | None  # (B, S, S) switch matrix from z_{t-1}
    means: torch.Tensor | None  # (B, S, K) transition means, t >= L
    sigmas: torch.Tensor | None

    def repeat(self, n: int) -> StepContext:
        """The context for ``n`` stacked copies of the batch."""

        def rep(a):
            return None if a is None else a.repeat(n, *([1] * (a.dim() - 1)))

        return StepContext(self.t, rep(self.q_prev), rep(self.P), rep(self.means), rep(self.sigmas))

    @property
    def prior(self) -> torch.Tensor:
        return (self.q_prev.unsqueeze(-2) @ self.P).squeeze(-2)


def _slice_objective(
    model: DynamicalModel, mu: torch.Tensor, sigma: torch.Tensor, x: torch.Tensor, mask: torch.Tensor, ctx: StepContext
) -> tuple[torch.Tensor, torch.Tensor]:
    """One timestep's negative ELBO at ``z = mu`` (per batch row) and its ``q(s_t)``."""
    recon = reconstruction(model, mu, x, mask)
    B, S = mu.shape[0], model.config.S
    if ctx.means is None:
        kl_cont = dc.kl_gauss(mu, sigma, torch.zeros(()), torch.ones(()))
        if ctx.q_prev is None:
            q = torch.full((B, S), 1.0 / S, dtype=DTYPE)
            kl_disc = torch.zeros(B, dtype=DTYPE)
        else:
            q = ctx.prior
            kl_disc = _expect(ctx.q_prev, dc.kl_cat(q.unsqueeze(-2), ctx.P))
        return recon + kl_cont + kl_disc, q
    prior = ctx.prior
    loglik = dc.gauss_logpdf(mu.unsqueeze(-2), ctx.means, ctx.sigmas)
    q = _normalise_log(dc.safe_log(prior) + loglik, prior, f"infer t={ctx.t}")
    kl_disc = _expect(ctx.q_prev, dc.kl_cat(q.unsqueeze(-2), ctx.P))
    kl_cont = _expect(q, dc.kl_gauss(mu.unsqueeze(-2), sigma.unsqueeze(-2), ctx.means, ctx.sigmas))
    return recon + kl_disc + kl_cont, q


def infer_step(
    model: DynamicalModel,
    x: torch.Tensor,
    mask: torch.Tensor,
    ctx: StepContext,
    mu0: torch.Tensor,
    sigma0: torch.Tensor,
    steps: int = 50,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Fit ``q(z_t)`` for one new timestep with the generative model frozen.

    Minimises the timestep's negative ELBO slice over ``(mu, log-scale)`` per
    batch row with damped Newton steps (Levenberg-Marquardt with an
    eigenvalue shift).  The update commutes with rotations of ``mu``, so a
    rotated observation and history give the rotated posterior.  Rows with no
    observed entries keep their prior-predictive initialisation.

    Returns ``(mu, sigma, q_state)``.
    """
    cfg = model.config
    block_idx = torch.as_tensor(block_index(cfg.latent_sig), dtype=torch.long)
    K, nb = cfg.K, cfg.n_blocks
    rho0 = torch.as_tensor(dc.inv_softplus(sigma0.detach().numpy()[:, _first_of_block(cfg)]), dtype=DTYPE)
    u = torch.cat([mu0.detach(), rho0], dim=-1)
    active = mask.any(dim=-1)

    def f(u):
        mu, rho = u[:, :K], u[:, K:]
        val, q = _slice_objective(model, mu, block_sigma(rho, block_idx), x, mask, ctx)
        return val, q

    n, B = K + nb, u.shape[0]
    ctx_rep = ctx.repeat(n)
    x_rep, mask_rep = x.repeat(n, 1), mask.repeat(n, 1)
    sel = torch.eye(n, dtype=DTYPE).unsqueeze(1)

    def f_rep(u):
        mu, rho = u[:, :K], u[:, K:]
        return _slice_objective(model, mu, block_sigma(rho, block_idx), x_rep, mask_rep, ctx_rep)

    lam = torch.full((B,), 1e-3, dtype=DTYPE)
    done = torch.zeros(u.shape[0], dtype=torch.bool)
    eye = torch.eye(n, dtype=DTYPE)
    with torch.enable_grad():
        for _ in range(steps if bool(active.any()) else 0):
            # n stacked copies of the batch: copy i's gradient picks out Hessian row i
            uu = u.repeat(n, 1).requires_grad_(True)
            vals, _ = f_rep(uu)
            (g,) = torch.autograd.grad(vals.sum(), uu, create_graph=True)
            (H,) = torch.autograd.grad((g.view(n, B, n) * sel).sum(), uu)
            H = H.view(n, B, n).transpose(0, 1)
            g, val = g[:B], vals[:B]
            H = 0.5 * (H + H.transpose(-1, -2))
            g = g.detach()
            finite = torch.isfinite(H).flatten(1).all(-1) & torch.isfinite(g).all(-1)
            if not bool(finite.all()):
                log.warning("non-finite curvature at t=%d for rows %s", ctx.t, torch.nonzero(~finite).flatten().tolist())
                H = torch.where(finite[:, None, None], H, eye)
                g = torch.where(finite[:, None], g, torch.zeros_like(g))
            done = done | (g.abs().max(dim=-1).values < GRAD_TOL)
            if bool((done | ~active).all()):
                break
            evals = torch.linalg.eigvalsh(H)
            shift = torch.clamp(-evals[:, 0], min=0.0) + lam * (1.0 + evals.abs().max(dim=-1).values)
            step = -torch.linalg.solve(H + shift[:, None, None] * eye, g.unsqueeze(-1)).squeeze(-1)
            with torch.no_grad():
                new_val, _ = f(u + step)
            ok = (new_val <= val.detach()) & torch.isfinite(new_val) & active
            u = torch.where(ok[:, None], u + step, u)
            lam = torch.where(ok, lam / 3.0, lam * 4.0).clamp(1e-12, 1e12)
            done = done | (ok & (step.abs().max(dim=-1).values < STEP_TOL))
            if bool((done | ~active).all()):
                break
    with torch.no_grad():
        mu, rho = u[:, :K], u[:, K:]
        sigma = block_sigma(rho, block_idx)
        _, q = f(u)
    return mu, sigma, q


def fit_warmup(
    model: DynamicalModel,
    x: torch.Tensor,
    mask: torch.Tensor,
    mu0: torch.Tensor,
    sigma0: torch.Tensor,
    max_iter: int = 200,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Refit the first ``W`` latents of one sequence jointly on their ELBO at ``eps = 0``.

    Filtering the opening steps one at a time leaves whatever the latent
    encodes beyond the current frame (velocity, say) at its N(0, I) prior.
    Once ``W`` frames are in, the transition terms tie those steps together.
    ``x, mask: (W, 3D)``; ``mu0, sigma0: (W, K)`` start the L-BFGS run.
    Returns ``(mu, sigma, q_state)``.
    """
    cfg = model.config
    block_idx = torch.as_tensor(block_index(cfg.latent_sig), dtype=torch.long)
    zeros = torch.zeros_like(mu0)
    rho0 = dc.inv_softplus(sigma0.detach().numpy()[:, _first_of_block(cfg)])
    with torch.enable_grad():
        mu = mu0.detach().clone().requires_grad_(True)
        rho = torch.as_tensor(rho0, dtype=DTYPE).requires_grad_(True)
        opt = torch.optim.LBFGS(
            [mu, rho],
            max_iter=max_iter,
            tolerance_grad=1e-10,
            tolerance_change=1e-14,
            line_search_fn="strong_wolfe",
        )

        def closure():
            opt.zero_grad()
            loss = elbo_terms(model, mu, block_sigma(rho, block_idx), x, mask, zeros).per_step.sum()
            loss.backward()
            return loss

        opt.step(closure)
    with torch.no_grad():
        sigma = block_sigma(rho, block_idx)
        terms = elbo_terms(model, mu, sigma, x, mask, zeros)
    if not bool(torch.isfinite(terms.per_step).all()):
        log.warning("warm-up fit diverged; keeping the filtered latents")
        return mu0, sigma0, None
    return mu.detach(), sigma, terms.q_state


def _first_of_block(cfg: ModelConfig) -> list[int]:
    return [off for _, off, _ in cfg.latent_sig.blocks(3)]


def step_context(model: DynamicalModel, t: int, mu_hist: torch.Tensor, q_hist: torch.Tensor) -> StepContext:
    """Context for timestep ``t`` from inferred means ``mu_hist (B, >=t, K)`` and states ``q_hist``."""
    cfg = model.config
    q_prev = P = means = sigmas = None
    if t > 0:
        q_prev = q_hist[:, t - 1]
        P = model.switch_all(mu_hist[:, t - 1])
    if t >= cfg.max_lag:
        hist = torch.stack([mu_hist[:, t - l] for l in cfg.lags], dim=-2)
        means, sigmas = model.transition_all(hist)
    return StepContext(t, q_prev, P, means, sigmas)


@dataclass
class RollingResult:
    """Outputs of :func:`rolling_predict` for one sequence, in model units."""

    pred: np.ndarray  # (T, 3D), NaN during warm-up
    pred_std: np.ndarray  # (T, 3D)
    pred_state: np.ndarray  # (T,) predicted state, -1 during warm-up
    q_state: np.ndarray  # (T, S) inferred posterior after seeing x_t
    mu: np.ndarray  # (T, K)
    sigma: np.ndarray  # (T, K)
    warmup: int

    @property
    def states(self) -> np.ndarray:
        return self.q_state.argmax(axis=-1)


def _emission_jacobian(model: DynamicalModel, z: torch.Tensor) -> torch.Tensor:
    """``(B, 3D, K)`` Jacobian of the emission mean at every row of ``z``."""
    with torch.enable_grad():
        zz = z.detach().clone().requires_grad_(True)
        x = model.emission_mean(zz)
        rows = [torch.autograd.grad(x[:, j].sum(), zz, retain_graph=True)[0] for j in range(x.shape[-1])]
    return torch.stack(rows, dim=1)


@torch.no_grad()
def rolling_predict(
    model: DynamicalModel, sequences: Seq[Sequence], steps: int | None = None
) -> list[RollingResult]:
    """One-step-ahead predictions over each sequence with the model frozen.

    At every ``t >= max(lags)`` the next state is the argmax of the switch
    mixture ``sum_s q(s_{t-1}=s) pi^s(z_{t-1})``, the next latent is that
    state's transition mean and the prediction is its emission.  Then
    :func:`infer_step` conditions on the true ``x_t``.  Once
    ``config.warmup_window`` frames have been seen, the opening latents are
    refit jointly (:func:`fit_warmup`); later predictions still only use past
    frames.  Sequences of equal length are processed as one batch; each row
    only ever sees its own data.
    """
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(sequences):
        groups.setdefault(s.T, []).append(i)
    out: list[RollingResult | None] = [None] * len(sequences)
    with frozen(model):
        for idx in groups.values():
            for i, r in zip(idx, _rolling_batch(model, [sequences[i] for i in idx], steps)):
                out[i] = r
    return out


def _rolling_batch(model: DynamicalModel, seqs: list[Sequence], steps: int | None) -> list[RollingResult]:
    cfg = model.config
    check_sequences(cfg, seqs)
    steps = cfg.infer_steps if steps is None else steps
    B, T, K, S, L = len(seqs), seqs[0].T, cfg.K, cfg.S, cfg.max_lag
    X = torch.as_tensor(np.stack([s.filled(0.0) for s in seqs]), dtype=DTYPE)
    M = torch.as_tensor(np.stack([s.mask for s in seqs]))
    mu_hist = torch.zeros(B, T, K, dtype=DTYPE)
    sig_hist = torch.zeros(B, T, K, dtype=DTYPE)
    q_hist = torch.zeros(B, T, S, dtype=DTYPE)
    pred = torch.full((B, T, X.shape[-1]), float("nan"), dtype=DTYPE)
    pred_std = torch.full_like(pred, float("nan"))
    pred_state = torch.full((B, T), -1, dtype=torch.long)
    rows = torch.arange(B)
    W = cfg.warmup_window
    for t in range(T):
        if W and t == W:
            for b in range(B):
                mu_w, sig_w, q_w = fit_warmup(model, X[b, :W], M[b, :W], mu_hist[b, :W], sig_hist[b, :W])
                if q_w is not None:
                    mu_hist[b, :W], sig_hist[b, :W], q_hist[b, :W] = mu_w, sig_w, q_w
        ctx = step_context(model, t, mu_hist, q_hist)
        if ctx.means is not None:
            s_hat = ctx.prior.argmax(dim=-1)
            z_hat = ctx.means[rows, s_hat]
            sz = ctx.sigmas[rows, s_hat]
            x_hat = model.emission_mean(z_hat)
            J = _emission_jacobian(model, z_hat)
            var = model.sigma_x**2 + (J * J * (sz * sz).unsqueeze(-2)).sum(-1)
            pred[:, t], pred_std[:, t], pred_state[:, t] = x_hat, var.sqrt(), s_hat
            mu0, sig0 = z_hat, sz
        else:
            mu0 = torch.zeros(B, K, dtype=DTYPE)
            sig0 = torch.ones(B, K, dtype=DTYPE)
        mu, sig, q = infer_step(model, X[:, t], M[:, t], ctx, mu0, sig0, steps)
        mu_hist[:, t], sig_hist[:, t], q_hist[:, t] = mu, sig, q
    return [
        RollingResult(
            pred[b].numpy().copy(),
            pred_std[b].numpy().copy(),
            pred_state[b].numpy().copy(),
            q_hist[b].numpy().copy(),
            mu_hist[b].numpy().copy(),
            sig_hist[b].numpy().copy(),
            L,
        )
        for b in range(B)
    ]


# -- checkpoints ---------------------------------------------------------------


def save_model(
    path: str | Path,
    model: DynamicalModel,
    transform: DataTransform,
    variational: VariationalParams | None = None,
) -> None:
    store = param_store(model, variational)
    meta = {
        "config": model.config.to_dict(),
        "transform": {"center": list(transform.center), "scale": transform.scale},
    }
    dc.save_checkpoint(path, store.state_dict(), meta)


def load_model(path: str | Path, config: ModelConfig | None = None) -> tuple[DynamicalModel, DataTransform]:
    """Rebuild the model from a checkpoint; ``config`` overrides the stored one (shapes must agree)."""
    arrays, meta = dc.load_checkpoint(path)
    config = config or ModelConfig.from_dict(meta["config"])
    model = build_model(config)
    store = param_store(model)
    store.load_state_dict({k: v for k, v in arrays.items() if k.startswith("theta.")})
    tr = meta.get("transform", {})
    transform = DataTransform(tuple(tr.get("center", (0.0, 0.0, 0.0))), float(tr.get("scale", 1.0)))
    return model, transform
