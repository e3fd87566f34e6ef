"""Finite-difference certification of every gradient path training uses.

All checks run in double precision on small random networks: generator
parameters (through the critic), critic parameters, the critic's input
gradient, and the gradient penalty's parameter gradient, which exercises
the differentiated backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Tensor, backward, max_relative_error
from .losses import bce_gan_losses, critic_loss, generator_loss, gradient_penalty
from .models import Discriminator, Generator, ModelConfig

CHECK_CFG = ModelConfig(image_size=8, latent_dim=5, base_width=4, n_blocks=1,
                        precision="double")
DEFAULT_TOL = 1e-4
FD_H = 1e-6
# central differences at h=1e-6 carry ~1e-10 absolute noise; a coordinate whose
# gradient sits under this floor on both sides is indistinguishable from zero
NOISE_FLOOR = 1e-8


def agreement_error(ad: np.ndarray, fd: np.ndarray,
                    noise_floor: float = NOISE_FLOOR) -> float:
    """Max relative error, ignoring coordinates that are zero up to FD noise."""
    ad = np.asarray(ad, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    mag = np.maximum(np.abs(ad), np.abs(fd))
    live = mag >= noise_floor
    if not np.any(live):
        return 0.0
    return max_relative_error(ad[live], fd[live])


@dataclass(frozen=True)
class CheckResult:
    name: str
    trial: int
    max_rel_err: float


def _fd_on_coords(f, vec: np.ndarray, idxs: np.ndarray, h: float = FD_H) -> np.ndarray:
    out = np.zeros(len(idxs))
    work = vec.astype(np.float64).copy()
    for i, j in enumerate(idxs):
        orig = work[j]
        work[j] = orig + h
        fp = f(work)
        work[j] = orig - h
        fm = f(work)
        work[j] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out


def _pick(rng, size, count):
    return rng.choice(size, size=min(count, size), replace=False)


def _check_generator_params(disc, gen, rng, coords, sign) -> float:
    phi_d = disc.init_params(rng)
    phi_g = gen.init_params(rng)
    z = rng.standard_normal((2, gen.cfg.latent_dim))

    def value(vec):
        ps = phi_g.with_vector(vec)
        with Graph("double"):
            fake = gen.forward(ps.bind(trainable=False), Tensor(z.copy()))
            return generator_loss(disc.forward(phi_d.bind(trainable=False), fake)).item()

    with Graph("double"):
        bound = phi_g.bind()
        fake = gen.forward(bound, Tensor(z.copy()))
        loss = generator_loss(disc.forward(phi_d.bind(trainable=False), fake))
        grad = sign * bound.flatten_grads(backward(loss))
    idxs = _pick(rng, phi_g.total_len, coords)
    fd = _fd_on_coords(value, phi_g.vector, idxs)
    return agreement_error(grad[idxs], fd)


def _check_discriminator_params(disc, gen, rng, coords, sign) -> float:
    phi_d = disc.init_params(rng)
    s = disc.cfg.image_size
    x = np.tanh(rng.standard_normal((2, 1, s, s)))
    y = np.tanh(rng.standard_normal((2, 1, s, s)))

    def value(vec):
        ps = phi_d.with_vector(vec)
        with Graph("double"):
            bound = ps.bind(trainable=False)
            return critic_loss(disc.forward(bound, Tensor(x.copy())),
                               disc.forward(bound, Tensor(y.copy()))).item()

    with Graph("double"):
        bound = phi_d.bind()
        loss = critic_loss(disc.forward(bound, Tensor(x.copy())),
                           disc.forward(bound, Tensor(y.copy())))
        grad = sign * bound.flatten_grads(backward(loss))
    idxs = _pick(rng, phi_d.total_len, coords)
    fd = _fd_on_coords(value, phi_d.vector, idxs)
    return agreement_error(grad[idxs], fd)


def _check_discriminator_input(disc, gen, rng, coords, sign) -> float:
    phi_d = disc.init_params(rng)
    s = disc.cfg.image_size
    x0 = np.tanh(rng.standard_normal((1, 1, s, s)))

    def value(flat):
        with Graph("double"):
            xt = Tensor(flat.reshape(x0.shape).copy())
            return disc.forward(phi_d.bind(trainable=False), xt).sum().item()

    with Graph("double"):
        xt = Tensor(x0.copy(), requires_grad=True)
        score = disc.forward(phi_d.bind(trainable=False), xt)
        grad = sign * backward(score.sum())[xt].data.reshape(-1)
    idxs = _pick(rng, x0.size, coords)
    fd = _fd_on_coords(value, x0.reshape(-1), idxs)
    return agreement_error(grad[idxs], fd)


def _check_gradient_penalty(disc, gen, rng, coords, sign) -> float:
    phi_d = disc.init_params(rng)
    s = disc.cfg.image_size
    x = np.tanh(rng.standard_normal((2, 1, s, s)))
    y = np.tanh(rng.standard_normal((2, 1, s, s)))
    eps = rng.uniform(size=(2, 1, 1, 1))

    def value(vec):
        ps = phi_d.with_vector(vec)
        with Graph("double"):
            bound = ps.bind(trainable=False)
            pen = gradient_penalty(lambda v: disc.forward(bound, v),
                                   Tensor(x.copy()), Tensor(y.copy()),
                                   gp_lambda=10.0, eps=eps)
            return pen.item()

    with Graph("double"):
        bound = phi_d.bind()
        pen = gradient_penalty(lambda v: disc.forward(bound, v),
                               Tensor(x.copy()), Tensor(y.copy()),
                               gp_lambda=10.0, eps=eps)
        grad = sign * bound.flatten_grads(backward(pen))
    idxs = _pick(rng, phi_d.total_len, coords)
    fd = _fd_on_coords(value, phi_d.vector, idxs)
    return agreement_error(grad[idxs], fd)


def _check_bce(disc, gen, rng, coords, sign) -> float:
    real = rng.standard_normal((3, 1))
    fake0 = rng.standard_normal((3, 1))

    def value(flat):
        with Graph("double"):
            d, _ = bce_gan_losses(Tensor(real.copy()), Tensor(flat.reshape(3, 1).copy()))
            return d.item()

    with Graph("double"):
        ft = Tensor(fake0.copy(), requires_grad=True)
        d, _ = bce_gan_losses(Tensor(real.copy()), ft)
        grad = sign * backward(d)[ft].data.reshape(-1)
    fd = _fd_on_coords(value, fake0.reshape(-1), np.arange(3))
    return agreement_error(grad, fd)


CHECKS = (
    ("generator-params", _check_generator_params),
    ("critic-params", _check_discriminator_params),
    ("critic-input", _check_discriminator_input),
    ("gradient-penalty", _check_gradient_penalty),
    ("bce-losses", _check_bce),
)


def run_gradcheck(trials: int = 20, seed: int = 0, tol: float = DEFAULT_TOL,
                  coords: int = 24, corrupt: bool = False,
                  log=None) -> tuple[float, list[CheckResult], bool]:
    """Returns (max error over all checks, per-check results, all under tol).

    corrupt=True flips the sign of every reverse-mode gradient before the
    comparison; the run must then fail, proving the check has teeth.
    """
    disc = Discriminator(CHECK_CFG)
    gen = Generator(CHECK_CFG)
    sign = -1.0 if corrupt else 1.0
    results: list[CheckResult] = []
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial,)))
        for name, fn in CHECKS:
            err = fn(disc, gen, rng, coords, sign)
            results.append(CheckResult(name, trial, err))
            worst = max(worst, err)
            if log is not None:
                log(f"trial {trial:2d} {name:18s} max rel err {err:.3e}")
    return worst, results, worst < tol
