"""
Per-client FedDAE model: dual encoders, gating network, posterior
combination, reparameterized sampling, shared decoder and the beta-ELBO.

The forward pass (elbo) records an ElboTape; backward_elbo() turns it into
gradients of -L_beta for all four parameter groups:
  global encoder (phi), local encoder (phi_u), gate (psi_u), decoder (theta).

Encoders emit [mu, log_var] (width 2k). Posteriors are combined in variance
space:
  mu  = w1 * mu_g  + w2 * mu_l
  var = w1^2 * var_g + w2^2 * var_l
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from errors import ConfigurationError, PoisonedUpdateError, ShapeMismatchError
from nn_core import DenseNet, Tape, backward, forward, softmax

logger = logging.getLogger(f"feddae.{__name__}")

VAR_FLOOR = 1e-12
LOG_PROB_FLOOR = 1e-10

GLOBAL_ENCODER = "global_encoder"
LOCAL_ENCODER = "local_encoder"
DECODER = "decoder"


@dataclass
class GaussianPosterior:
    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self) -> None:
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if self.mu.shape != self.log_var.shape or self.mu.ndim != 1:
            raise ShapeMismatchError(f"Posterior mu {self.mu.shape} and log_var {self.log_var.shape} disagree")

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @property
    def latent_dim(self) -> int:
        return self.mu.shape[0]


class GateParams:
    """Gating network h_psi(r) = softmax(r^T psi), psi in R^{m x 2}."""

    def __init__(self, psi: np.ndarray) -> None:
        self.psi = np.array(psi, dtype=np.float64)
        if self.psi.ndim != 2 or self.psi.shape[1] != 2:
            raise ShapeMismatchError(f"Gate parameters must be m x 2, got {self.psi.shape}")
        self.grad_psi = np.zeros_like(self.psi)

    @classmethod
    def zeros(cls, n_items: int) -> "GateParams":
        return cls(np.zeros((n_items, 2)))

    @property
    def n_items(self) -> int:
        return self.psi.shape[0]

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {"psi": self.psi}

    def named_grads(self) -> dict[str, np.ndarray]:
        return {"psi": self.grad_psi}

    def zero_grads(self) -> None:
        self.grad_psi.fill(0.0)

    def copy(self) -> "GateParams":
        return GateParams(self.psi.copy())


@dataclass
class ModelBundle:
    global_encoder: DenseNet
    local_encoder: DenseNet
    gate: GateParams
    decoder: DenseNet
    # Global-encoder weight for the fixed-weight ablation; None = learned gate
    fixed_weight: float | None = None

    def __post_init__(self) -> None:
        m = self.global_encoder.in_dim
        out = self.global_encoder.out_dim
        if out % 2:
            raise ShapeMismatchError(f"Encoder output width must be 2k, got {out}")
        k = out // 2
        if self.local_encoder.in_dim != m or self.local_encoder.out_dim != out:
            raise ShapeMismatchError(
                f"Local encoder maps {self.local_encoder.in_dim} -> {self.local_encoder.out_dim}, expected {m} -> {out}"
            )
        if self.decoder.in_dim != k or self.decoder.out_dim != m:
            raise ShapeMismatchError(
                f"Decoder maps {self.decoder.in_dim} -> {self.decoder.out_dim}, expected {k} -> {m}"
            )
        if self.gate.n_items != m:
            raise ShapeMismatchError(f"Gate expects {self.gate.n_items} items, encoders expect {m}")
        if self.fixed_weight is not None and not 0.0 <= self.fixed_weight <= 1.0:
            raise ConfigurationError("fixed_weight", f"must lie in [0, 1], got {self.fixed_weight}")

    @property
    def n_items(self) -> int:
        return self.global_encoder.in_dim

    @property
    def latent_dim(self) -> int:
        return self.decoder.in_dim

    def zero_grads(self) -> None:
        self.global_encoder.zero_grads()
        self.local_encoder.zero_grads()
        self.gate.zero_grads()
        self.decoder.zero_grads()


@dataclass
class BetaSchedule:
    """beta(step) = cap * min(1, step / total_anneal_steps); cap straight away when total is 0."""

    total_anneal_steps: int
    cap: float = 1.0
    current_step: int = 0

    def __post_init__(self) -> None:
        if self.total_anneal_steps < 0:
            raise ConfigurationError("anneal_steps", f"must be >= 0, got {self.total_anneal_steps}")
        if not 0.0 <= self.cap <= 1.0:
            raise ConfigurationError("beta_cap", f"must lie in [0, 1], got {self.cap}")

    def beta(self, offset: int = 0) -> float:
        step = self.current_step + offset
        if self.total_anneal_steps == 0:
            return self.cap
        return self.cap * min(1.0, step / self.total_anneal_steps)


def encoder_dims(n_items: int, latent_dim: int, hidden_dim: int, n_layers: int) -> list[int]:
    """m -> d (x n_layers-1) -> 2k."""
    return [n_items] + [hidden_dim] * (n_layers - 1) + [2 * latent_dim]


def decoder_dims(n_items: int, latent_dim: int, hidden_dim: int, n_layers: int) -> list[int]:
    """k -> d (x n_layers-1) -> m."""
    return [latent_dim] + [hidden_dim] * (n_layers - 1) + [n_items]


def init_global_nets(
    n_items: int, latent_dim: int, hidden_dim: int, n_layers: int, seed: int
) -> tuple[DenseNet, DenseNet]:
    encoder = DenseNet.build(encoder_dims(n_items, latent_dim, hidden_dim, n_layers), seed, GLOBAL_ENCODER)
    decoder = DenseNet.build(decoder_dims(n_items, latent_dim, hidden_dim, n_layers), seed, DECODER)
    return encoder, decoder


def init_local_encoder(
    n_items: int, latent_dim: int, hidden_dim: int, n_layers: int, seed: int, client_id: int
) -> DenseNet:
    return DenseNet.build(
        encoder_dims(n_items, latent_dim, hidden_dim, n_layers),
        seed,
        LOCAL_ENCODER,
        stream=("client", client_id),
    )


def _split_head(head: np.ndarray) -> GaussianPosterior:
    k = head.shape[0] // 2
    return GaussianPosterior(head[:k].copy(), head[k:].copy())


def encode(
    encoder: DenseNet,
    r_u: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    dropout_rate: float = 0.0,
) -> GaussianPosterior:
    """Posterior (mu, log_var) read from the encoder's 2k-wide head."""
    head, _ = forward(encoder, r_u, train_mode=train_mode, dropout_rate=dropout_rate, rng=rng)
    return _split_head(head)


def gate_weights(gate: GateParams, r_u: np.ndarray) -> tuple[float, float]:
    r_u = np.asarray(r_u, dtype=np.float64)
    if r_u.shape != (gate.n_items,):
        raise ShapeMismatchError(f"Gate expects r_u of length {gate.n_items}, got shape {r_u.shape}")
    w = softmax(r_u @ gate.psi)
    return float(w[0]), float(w[1])


def _combine(
    gp_global: GaussianPosterior, gp_local: GaussianPosterior, w1: float, w2: float
) -> tuple[GaussianPosterior, np.ndarray]:
    """Combined posterior plus the mask of latent dims whose variance hit VAR_FLOOR."""
    if gp_global.latent_dim != gp_local.latent_dim:
        raise ShapeMismatchError(f"Posterior widths differ: {gp_global.latent_dim} vs {gp_local.latent_dim}")
    if not (np.isfinite(w1) and np.isfinite(w2)):
        raise PoisonedUpdateError("gate_weights", f"w1={w1}, w2={w2}")
    unclamped = np.zeros(gp_global.latent_dim, dtype=bool)
    # Degenerate gates return the component itself; exp/log would not round-trip bit-exactly
    if w1 == 1.0 and w2 == 0.0:
        return GaussianPosterior(gp_global.mu.copy(), gp_global.log_var.copy()), unclamped
    if w1 == 0.0 and w2 == 1.0:
        return GaussianPosterior(gp_local.mu.copy(), gp_local.log_var.copy()), unclamped
    mu = w1 * gp_global.mu + w2 * gp_local.mu
    raw = w1 * w1 * gp_global.var + w2 * w2 * gp_local.var
    clamped = raw < VAR_FLOOR
    if np.any(clamped):
        logger.debug("Combined variance clamped at %g in %d of %d dims", VAR_FLOOR, int(clamped.sum()), raw.size)
    return GaussianPosterior(mu, np.log(np.maximum(raw, VAR_FLOOR))), clamped


def combine_posteriors(
    gp_global: GaussianPosterior, gp_local: GaussianPosterior, w1: float, w2: float
) -> GaussianPosterior:
    """Gate-weighted sum of two independent Gaussians (variance clamped at VAR_FLOOR)."""
    combined, _ = _combine(gp_global, gp_local, w1, w2)
    return combined


def reparameterize(
    gp: GaussianPosterior, rng: np.random.Generator | None = None, noise: np.ndarray | None = None
) -> np.ndarray:
    """z = mu + exp(log_var / 2) * eps with eps ~ N(0, I_k) (or the given noise)."""
    if noise is None:
        if rng is None:
            raise ConfigurationError("rng", "sampling z needs a random generator or explicit noise")
        noise = rng.standard_normal(gp.latent_dim)
    return gp.mu + np.exp(0.5 * gp.log_var) * noise


def _decode(decoder: DenseNet, z: np.ndarray, candidates: np.ndarray | None = None) -> tuple[np.ndarray, Tape]:
    logits, tape = forward(decoder, z)
    if candidates is not None:
        logits = logits[candidates]
    return softmax(logits), tape


def decode(decoder: DenseNet, z: np.ndarray) -> np.ndarray:
    """Item distribution pi = softmax(f_theta(z))."""
    pi, _ = _decode(decoder, z)
    return pi


def multinomial_log_likelihood(r_u: np.ndarray, pi: np.ndarray) -> float:
    return float(np.sum(np.asarray(r_u, dtype=np.float64) * np.log(np.asarray(pi) + LOG_PROB_FLOOR)))


def kl_to_standard_normal(gp: GaussianPosterior) -> float:
    return float(0.5 * np.sum(np.exp(gp.log_var) + gp.mu**2 - 1.0 - gp.log_var))


@dataclass
class ElboTape:
    """Everything backward_elbo() needs from one ELBO evaluation."""

    r: np.ndarray
    global_tape: Tape
    local_tape: Tape
    decoder_tape: Tape
    posterior_global: GaussianPosterior
    posterior_local: GaussianPosterior
    w: np.ndarray
    gate_learned: bool
    mu: np.ndarray
    var: np.ndarray
    var_clamped: np.ndarray
    noise: np.ndarray
    z: np.ndarray
    pi: np.ndarray
    beta: float
    candidates: np.ndarray | None = None
    log_likelihood: float = 0.0
    kl: float = 0.0


def _resolve_gate(bundle: ModelBundle, r_u: np.ndarray) -> tuple[np.ndarray, bool]:
    if bundle.fixed_weight is not None:
        return np.array([bundle.fixed_weight, 1.0 - bundle.fixed_weight]), False
    return np.array(gate_weights(bundle.gate, r_u)), True


def elbo(
    bundle: ModelBundle,
    r_u: np.ndarray,
    beta: float,
    train_mode: bool = True,
    rng: np.random.Generator | None = None,
    dropout_rate: float = 0.0,
    noise: np.ndarray | None = None,
    candidates: np.ndarray | None = None,
) -> tuple[float, ElboTape]:
    """
    Single-sample estimate of L_beta = log p(r|z) - beta * KL(q(z|r) || N(0, I)).

    Random draws, in order: the dropout mask (train_mode and dropout_rate > 0),
    then eps (unless noise is given). candidates restricts the softmax
    normalisation to those item indices (masked loss mode).
    """
    if not 0.0 <= beta <= 1.0:
        raise ConfigurationError("beta", f"must lie in [0, 1], got {beta}")
    r = np.asarray(r_u, dtype=np.float64)
    if r.shape != (bundle.n_items,):
        raise ShapeMismatchError(f"Interaction row must have length {bundle.n_items}, got shape {r.shape}")

    x = r
    if train_mode and dropout_rate > 0.0:
        if rng is None:
            raise ConfigurationError("rng", "dropout in train mode needs a random generator")
        if not dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate", f"must lie in [0, 1), got {dropout_rate}")
        keep = rng.random(r.shape[0]) >= dropout_rate
        x = r * (keep / (1.0 - dropout_rate))

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        head_g, global_tape = forward(bundle.global_encoder, x)
        head_l, local_tape = forward(bundle.local_encoder, x)
        post_g = _split_head(head_g)
        post_l = _split_head(head_l)

        w, learned = _resolve_gate(bundle, r)
        combined, clamped = _combine(post_g, post_l, float(w[0]), float(w[1]))

        if noise is None:
            if rng is None:
                raise ConfigurationError("rng", "sampling z needs a random generator or explicit noise")
            noise = rng.standard_normal(bundle.latent_dim)
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (bundle.latent_dim,):
            raise ShapeMismatchError(f"Noise must have shape ({bundle.latent_dim},), got {noise.shape}")
        z = reparameterize(combined, noise=noise)

        if candidates is not None:
            candidates = np.unique(np.asarray(candidates, dtype=np.int64))
        pi, decoder_tape = _decode(bundle.decoder, z, candidates)
        log_likelihood = multinomial_log_likelihood(r if candidates is None else r[candidates], pi)
        kl = kl_to_standard_normal(combined)
        loss = log_likelihood - beta * kl

    if not np.isfinite(loss):
        raise PoisonedUpdateError("elbo", f"log_likelihood={log_likelihood}, kl={kl}")

    tape = ElboTape(
        r=r,
        global_tape=global_tape,
        local_tape=local_tape,
        decoder_tape=decoder_tape,
        posterior_global=post_g,
        posterior_local=post_l,
        w=w,
        gate_learned=learned,
        mu=combined.mu,
        var=combined.var,
        var_clamped=clamped,
        noise=noise,
        z=z,
        pi=pi,
        beta=beta,
        candidates=candidates,
        log_likelihood=log_likelihood,
        kl=kl,
    )
    return float(loss), tape


def backward_elbo(bundle: ModelBundle, tape: ElboTape) -> None:
    """Accumulate gradients of -L_beta into all four parameter groups of bundle."""
    r, pi, beta = tape.r, tape.pi, tape.beta
    w1, w2 = float(tape.w[0]), float(tape.w[1])
    post_g, post_l = tape.posterior_global, tape.posterior_local

    # -d log-likelihood / d logits, exact for the floored log
    r_c = r if tape.candidates is None else r[tape.candidates]
    a = r_c * pi / (pi + LOG_PROB_FLOOR)
    d_logits_c = pi * a.sum() - a
    if tape.candidates is None:
        d_logits = d_logits_c
    else:
        d_logits = np.zeros(bundle.n_items)
        d_logits[tape.candidates] = d_logits_c

    d_z = backward(bundle.decoder, tape.decoder_tape, d_logits)

    sd = np.sqrt(tape.var)
    d_mu = d_z + beta * tape.mu
    d_var = d_z * tape.noise / (2.0 * sd) + beta * 0.5 * (1.0 - 1.0 / tape.var)
    d_var = np.where(tape.var_clamped, 0.0, d_var)

    var_g, var_l = post_g.var, post_l.var
    d_head_g = np.concatenate([w1 * d_mu, w1 * w1 * d_var * var_g])
    d_head_l = np.concatenate([w2 * d_mu, w2 * w2 * d_var * var_l])
    backward(bundle.global_encoder, tape.global_tape, d_head_g)
    backward(bundle.local_encoder, tape.local_tape, d_head_l)

    if tape.gate_learned:
        d_w = np.array(
            [
                d_mu @ post_g.mu + d_var @ (2.0 * w1 * var_g),
                d_mu @ post_l.mu + d_var @ (2.0 * w2 * var_l),
            ]
        )
        d_logits_gate = tape.w * (d_w - tape.w @ d_w)
        bundle.gate.grad_psi += np.outer(r, d_logits_gate)


def predict_scores(bundle: ModelBundle, r_u: np.ndarray) -> np.ndarray:
    """Decoder logits at the combined posterior mean; no dropout, no sampling."""
    r = np.asarray(r_u, dtype=np.float64)
    post_g = encode(bundle.global_encoder, r)
    post_l = encode(bundle.local_encoder, r)
    w, _ = _resolve_gate(bundle, r)
    combined = combine_posteriors(post_g, post_l, float(w[0]), float(w[1]))
    logits, _ = forward(bundle.decoder, combined.mu)
    return logits


def dense_row(positives: Sequence[int] | np.ndarray, n_items: int) -> np.ndarray:
    """Binary interaction vector r_u from a list of positive item indices."""
    row = np.zeros(n_items)
    row[np.asarray(positives, dtype=np.int64)] = 1.0
    return row
