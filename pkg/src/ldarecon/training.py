"""Unrolled training of the conv feature map and the per-phase step sizes.

The trainable set is ``theta = {W_0..W_3, alpha_k, tau_k, eps0}``. Steps and
``eps0`` are optimized through their logarithms so they stay positive. A
forward pass runs ``K`` phases of the descent scheme on a batch of samples
while recording every differentiable quantity on a small reverse-mode
:class:`Tape`; discrete decisions (u/v branch, the I0/I1 partition inside the
dual map, eps reductions) are taken from the forward values and frozen.
"""
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ldarecon import numerics
from ldarecon import regularizer as reg
from ldarecon.errors import InvalidArgument, InvalidConfiguration, NumericalFailure, TrainingFailure
from ldarecon.feature_map import (
    DEFAULT_DELTA, ConvNetMap, ConvNetParams, activation, activation_curvature, activation_grad)
from ldarecon.fidelity import IdentityOperator, LeastSquares
from ldarecon.serialize import load_arrays, save_arrays


# ---------------------------------------------------------------- tape


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Node:
    __slots__ = ("value", "parents", "vjp", "index", "live")

    def __init__(self, value, parents, vjp, index, live):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.index = index
        self.live = live

    @property
    def shape(self):
        return np.shape(self.value)


class Tape:
    """Linear record of operations; :meth:`backward` walks it in reverse.

    Only nodes that depend on a parameter are differentiated ("live").
    """

    def __init__(self, backend=None):
        self.nodes = []
        self.params = {}
        self.backend = backend

    def _push(self, value, parents=(), vjp=None, live=None):
        if live is None:
            live = any(p.live for p in parents)
        node = Node(value, parents, vjp if live else None, len(self.nodes), live)
        self.nodes.append(node)
        return node

    def param(self, name, value):
        node = self._push(np.array(value, dtype=np.float64), live=True)
        self.params[name] = node
        return node

    def const(self, value):
        return self._push(value, live=False)

    def add(self, a, b):
        return self._push(a.value + b.value, (a, b),
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    def sub(self, a, b):
        return self._push(a.value - b.value, (a, b),
                          lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))

    def mul(self, a, b):
        return self._push(a.value * b.value, (a, b),
                          lambda g: (_unbroadcast(g * b.value, a.shape),
                                     _unbroadcast(g * a.value, b.shape)))

    def exp(self, a):
        out = np.exp(a.value)
        return self._push(out, (a,), lambda g: (g * out,))

    def index(self, a, i):
        def vjp(g):
            full = np.zeros_like(a.value)
            full[i] = g
            return (full,)
        return self._push(a.value[i], (a,), vjp)

    def reshape(self, a, shape):
        return self._push(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))

    def conv(self, h, w):
        out = numerics.conv2d(h.value, w.value, backend=self.backend)
        return self._push(out, (h, w), lambda g: (
            numerics.conv2d_transpose(g, w.value, backend=self.backend) if h.live else None,
            numerics.conv2d_kernel_grad(h.value, g, backend=self.backend) if w.live else None))

    def conv_t(self, e, w):
        out = numerics.conv2d_transpose(e.value, w.value, backend=self.backend)
        return self._push(out, (e, w), lambda g: (
            numerics.conv2d(g, w.value, backend=self.backend) if e.live else None,
            numerics.conv2d_kernel_grad(g, e.value, backend=self.backend) if w.live else None))

    def act(self, a, delta):
        return self._push(activation(a.value, delta), (a,),
                          lambda g: (g * activation_grad(a.value, delta),))

    def act_prime(self, a, delta):
        return self._push(activation_grad(a.value, delta), (a,),
                          lambda g: (g * activation_curvature(a.value, delta),))

    def dual(self, gnode, eps):
        """Closed-form dual maximizer with the I0/I1 split frozen at this value.

        ``eps`` holds one value per sample (leading axis of ``gnode``).
        """
        gv = gnode.value
        norms = np.linalg.norm(gv, axis=-1, keepdims=True)
        e = eps.value.reshape(eps.shape + (1,) * (gv.ndim - eps.value.ndim))
        inside = norms <= e
        safe = np.where(inside, 1.0, norms)
        unit = gv / safe
        out = np.where(inside, gv / e, unit)

        def vjp(c):
            outer = (c - unit * np.sum(unit * c, axis=-1, keepdims=True)) / safe
            dg = np.where(inside, c / e, outer)
            de = np.where(inside, -np.sum(c * gv, axis=-1, keepdims=True) / (e * e), 0.0)
            return dg, _unbroadcast(de, e.shape).reshape(eps.shape)
        return self._push(out, (gnode, eps), vjp)

    def grad_f(self, x, fidelity):
        return self._push(fidelity.grad(x.value), (x,), lambda g: (fidelity.hessian_apply(g),))

    def select(self, mask, a, b):
        m = np.asarray(mask, dtype=bool).reshape(mask.shape + (1,) * (a.value.ndim - mask.ndim))
        return self._push(np.where(m, a.value, b.value), (a, b),
                          lambda g: (np.where(m, g, 0.0), np.where(m, 0.0, g)))

    def backward(self, out, seed):
        """Gradients of ``<seed, out>`` with respect to every parameter, by name."""
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != out.shape:
            raise InvalidArgument(f"seed shape {seed.shape} does not match output {out.shape}")
        grads = {out.index: seed}
        for node in reversed(self.nodes[:out.index + 1]):
            if node.vjp is None:
                continue
            g = grads.pop(node.index, None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.live:
                    continue
                prev = grads.get(parent.index)
                grads[parent.index] = pg if prev is None else prev + pg
        return {name: grads.get(n.index, np.zeros_like(n.value)) for name, n in self.params.items()}


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class ParamSet:
    conv_params: ConvNetParams
    alphas: np.ndarray
    taus: np.ndarray
    eps0: float

    def __post_init__(self):
        alphas = np.array(self.alphas, dtype=np.float64).ravel()
        taus = np.array(self.taus, dtype=np.float64).ravel()
        if alphas.shape != taus.shape:
            raise InvalidArgument("alphas and taus must have one entry per phase")
        if np.any(alphas <= 0) or np.any(taus <= 0) or not self.eps0 > 0:
            raise InvalidArgument("step sizes and eps0 must be positive")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "eps0", float(self.eps0))

    @property
    def K(self):
        return self.alphas.size

    @classmethod
    def initial(cls, K, depth, rng, alpha=0.5, tau=0.25, eps0=0.05, delta=DEFAULT_DELTA):
        return cls(ConvNetParams.xavier(depth, rng, delta), np.full(K, alpha), np.full(K, tau), eps0)

    def extend(self, K):
        """Grow to ``K`` phases; new phases copy the last phase's step sizes."""
        if K < self.K:
            raise InvalidArgument(f"cannot shrink from {self.K} to {K} phases")
        pad = K - self.K
        return ParamSet(self.conv_params,
                        np.concatenate([self.alphas, np.full(pad, self.alphas[-1])]),
                        np.concatenate([self.taus, np.full(pad, self.taus[-1])]), self.eps0)

    def to_vector(self):
        """Unconstrained coordinates: kernels, log alphas, log taus, log eps0."""
        parts = [k.ravel() for k in self.conv_params.kernels]
        parts += [np.log(self.alphas), np.log(self.taus), [math.log(self.eps0)]]
        return np.concatenate(parts)

    def from_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.to_vector().size:
            raise InvalidArgument("parameter vector length mismatch")
        kernels, pos = [], 0
        for k in self.conv_params.kernels:
            kernels.append(vec[pos:pos + k.size].reshape(k.shape))
            pos += k.size
        K = self.K
        return ParamSet(ConvNetParams(tuple(kernels), self.conv_params.delta),
                        np.exp(vec[pos:pos + K]), np.exp(vec[pos + K:pos + 2 * K]),
                        math.exp(vec[pos + 2 * K]))

    def save(self, path, meta=None):
        arrays = {f"W{i}": k for i, k in enumerate(self.conv_params.kernels)}
        arrays.update(alphas=self.alphas, taus=self.taus, eps0=np.array([self.eps0]))
        info = {"kind": "lda_params", "delta": self.conv_params.delta, "K": self.K}
        info.update(meta or {})
        return save_arrays(path, arrays, info)

    @classmethod
    def load(cls, path):
        arrays, meta = load_arrays(path)
        params = ConvNetParams(tuple(arrays[f"W{i}"] for i in range(4)), meta["delta"])
        return cls(params, arrays["alphas"], arrays["taus"], float(arrays["eps0"][0]))


@dataclass(frozen=True)
class ParamGrad:
    """Gradient in the unconstrained coordinates of :meth:`ParamSet.to_vector`."""

    kernels: tuple
    log_alphas: np.ndarray
    log_taus: np.ndarray
    log_eps0: float

    def to_vector(self):
        parts = [k.ravel() for k in self.kernels]
        parts += [self.log_alphas, self.log_taus, [self.log_eps0]]
        return np.concatenate(parts)

    @classmethod
    def zeros(cls, theta):
        return cls(tuple(np.zeros_like(k) for k in theta.conv_params.kernels),
                   np.zeros(theta.K), np.zeros(theta.K), 0.0)


class TrainSample(NamedTuple):
    b: np.ndarray
    x_hat: np.ndarray
    x0: np.ndarray


def stack_samples(samples):
    """Stack samples into batch arrays ``(b, x_hat, x0)``; checks shapes agree."""
    if isinstance(samples, TrainSample):
        samples = [samples]
    samples = list(samples)
    if not samples:
        raise InvalidArgument("need at least one sample")
    b = np.stack([np.asarray(s.b) for s in samples])
    x_hat = np.stack([np.asarray(s.x_hat, dtype=np.float64) for s in samples])
    x0 = np.stack([np.asarray(s.x0, dtype=np.float64) for s in samples])
    if x_hat.shape != x0.shape or b.ndim != 2:
        raise InvalidArgument("inconsistent sample shapes")
    return b, x_hat, x0


# ---------------------------------------------------------------- unrolling


@dataclass
class PhaseRecord:
    k: int
    eps: np.ndarray
    branch: np.ndarray
    reduced: np.ndarray
    grad_norm: np.ndarray


@dataclass
class UnrollTape:
    tape: Tape
    output: Node
    theta: ParamSet
    phases: list = field(default_factory=list)


def _tape_grad_r(tape, x, eps, kernels, delta):
    h = tape.reshape(x, x.shape + (1,))
    pre = []
    for w in kernels:
        a = tape.conv(h, w)
        pre.append(a)
        h = tape.act(a, delta)
    d = tape.dual(h, eps)
    for a, w in zip(reversed(pre), reversed(kernels)):
        d = tape.conv_t(tape.mul(tape.act_prime(a, delta), d), w)
    return tape.reshape(d, x.shape)


def _phi_eps(fidelity, fmap, x, eps):
    gvals, cache = fmap.forward_cached(x)
    return fidelity.value(x) + reg.r_eps(gvals, eps, batch_ndim=1), gvals, cache


def unroll_forward(theta, samples, operator=None, map_template=None, K=None, gamma=0.5,
                   sigma=1.0, variant="lda", backend=None):
    """Run ``K`` phases on a batch of samples, recording a tape.

    Parameters
    ----------
    theta : ParamSet
    samples : TrainSample or sequence of TrainSample
    operator : forward operator shared by the batch (identity by default)
    map_template : ConvNetMap, optional
        Supplies the image shape and conv backend; kernels come from ``theta``.
    K : int, optional
        Phase count, at most ``theta.K``; defaults to ``theta.K``.
    variant : {"lda", "gd"}
        ``"gd"`` switches the u-candidate off.

    Returns
    -------
    x_K : ndarray, shape (N, h, w)
    tape : UnrollTape
    """
    if variant not in ("lda", "gd"):
        raise InvalidConfiguration(f"unknown variant {variant!r}")
    b, _, x0 = stack_samples(samples)
    shape = x0.shape[1:]
    K = theta.K if K is None else K
    if not 0 <= K <= theta.K:
        raise InvalidArgument(f"K={K} outside [0, {theta.K}]")
    if map_template is not None:
        backend = map_template.backend if backend is None else backend
        if map_template.image_shape != shape:
            raise InvalidArgument("map template shape differs from the samples")
    operator = IdentityOperator(shape) if operator is None else operator
    fidelity = LeastSquares(operator, b)
    fmap = ConvNetMap(shape, theta.conv_params, backend=backend)
    delta = theta.conv_params.delta
    n = x0.shape[0]

    tape = Tape(backend)
    kernels = [tape.param(f"W{i}", k) for i, k in enumerate(theta.conv_params.kernels)]
    log_a = tape.param("log_alphas", np.log(theta.alphas))
    log_t = tape.param("log_taus", np.log(theta.taus))
    log_e = tape.param("log_eps0", math.log(theta.eps0))
    alphas, taus, eps0 = tape.exp(log_a), tape.exp(log_t), tape.exp(log_e)
    x = tape.const(x0)
    reductions = np.zeros(n)
    phases = []
    for k in range(K):
        alpha = tape.index(alphas, k)
        eps = tape.mul(eps0, tape.const(gamma ** reductions))
        ev = eps.value
        z = tape.sub(x, tape.mul(alpha, tape.grad_f(x, fidelity)))
        v = tape.sub(z, tape.mul(alpha, _tape_grad_r(tape, x, eps, kernels, delta)))
        phi_v, g_v, pre_v = _phi_eps(fidelity, fmap, v.value, ev)
        if variant == "lda":
            u = tape.sub(z, tape.mul(tape.index(taus, k), _tape_grad_r(tape, z, eps, kernels, delta)))
            phi_u, g_u, pre_u = _phi_eps(fidelity, fmap, u.value, ev)
            take_u = phi_u <= phi_v
        else:
            u, g_u, pre_u = v, g_v, pre_v
            take_u = np.zeros(n, dtype=bool)
        x = tape.select(take_u, u, v) if take_u.any() else v
        xv = x.value
        if not np.all(np.isfinite(xv)):
            raise NumericalFailure(f"non-finite iterate in phase {k}", {"phase": k, "eps": ev})
        sel = take_u.reshape((n,) + (1,) * 3)
        gvals = np.where(sel, g_u, g_v)
        pre = [np.where(sel, a, c) for a, c in zip(pre_u, pre_v)]
        grad = fidelity.grad(xv) + fmap.vjp(xv, reg.dual_max(gvals, ev), cache=pre)
        grad_norm = np.sqrt(np.sum(grad * grad, axis=(1, 2)))
        reduced = grad_norm < sigma * gamma * ev
        phases.append(PhaseRecord(k, ev.copy(), np.where(take_u, "u", "v"), reduced, grad_norm))
        reductions = reductions + reduced
    return x.value, UnrollTape(tape, x, theta, phases)


def loss(x_K, x_hat):
    """Mean squared error over all pixels (and samples)."""
    x_K = np.asarray(x_K, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x_K.shape != x_hat.shape:
        raise InvalidArgument(f"shape mismatch {x_K.shape} vs {x_hat.shape}")
    return float(np.mean((x_K - x_hat) ** 2))


def loss_grad(x_K, x_hat):
    return 2.0 * (np.asarray(x_K) - np.asarray(x_hat)) / np.size(x_K)


def unroll_backward(utape, grad_loss):
    """Reverse pass: gradient of ``<grad_loss, x_K>`` in unconstrained coordinates."""
    grads = utape.tape.backward(utape.output, grad_loss)
    if not utape.phases:
        return ParamGrad.zeros(utape.theta)
    return ParamGrad(tuple(grads[f"W{i}"] for i in range(4)), grads["log_alphas"],
                     grads["log_taus"], float(grads["log_eps0"]))


def loss_and_grad(theta, samples, operator=None, K=None, gamma=0.5, sigma=1.0, variant="lda",
                  backend=None):
    _, x_hat, _ = stack_samples(samples)
    x_K, utape = unroll_forward(theta, samples, operator, K=K, gamma=gamma, sigma=sigma,
                                variant=variant, backend=backend)
    return loss(x_K, x_hat), unroll_backward(utape, loss_grad(x_K, x_hat))


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params, grad):
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    """Staged training schedule.

    ``stages`` lists ``(K, steps)`` pairs; each stage after the first adds
    two phases. Optimizer state is reset at each stage.
    """

    stages: tuple = ((3, 100), (5, 100))
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 16
    depth: int = 8
    alpha0: float = 0.5
    tau0: float = 0.25
    eps0: float = 0.05
    gamma: float = 0.5
    sigma: float = 1.0
    variant: str = "lda"
    divergence_factor: float = 1e3

    def __post_init__(self):
        stages = tuple((int(k), int(s)) for k, s in self.stages)
        if not stages:
            raise InvalidConfiguration("need at least one stage")
        for (k0, _), (k1, _) in zip(stages, stages[1:]):
            if k1 != k0 + 2:
                raise InvalidConfiguration("warm-start stages must grow K by 2")
        if stages[0][0] < 1 or any(s < 0 for _, s in stages):
            raise InvalidConfiguration("invalid stage")
        if self.learning_rate < 0 or self.batch_size < 1:
            raise InvalidConfiguration("learning_rate must be >= 0 and batch_size >= 1")
        if self.variant not in ("lda", "gd"):
            raise InvalidConfiguration(f"unknown variant {self.variant!r}")
        object.__setattr__(self, "stages", stages)


def train(dataset, config, rng, operator=None, init=None, checkpoint_dir=None, backend=None):
    """Warm-start staged Adam on the unrolled reconstruction loss.

    Returns
    -------
    theta : ParamSet
    curve : list of (step, mean_loss)
        Mini-batch loss before each update.
    """
    dataset = list(dataset)
    if not dataset:
        raise InvalidArgument("dataset is empty")
    b, x_hat, x0 = stack_samples(dataset)
    n = len(dataset)
    K0 = config.stages[0][0]
    theta = init if init is not None else ParamSet.initial(
        K0, config.depth, rng, config.alpha0, config.tau0, config.eps0)
    curve = []
    initial = None
    step = 0
    batch = min(config.batch_size, n)
    for stage, (K, steps) in enumerate(config.stages):
        theta = theta.extend(K)
        adam = Adam(config.learning_rate, config.adam_beta1, config.adam_beta2)
        for _ in range(steps):
            idx = np.sort(rng.choice(n, batch, replace=False)) if batch < n else np.arange(n)
            subset = [TrainSample(b[i], x_hat[i], x0[i]) for i in idx]
            value, grad = loss_and_grad(theta, subset, operator, K=K, gamma=config.gamma,
                                        sigma=config.sigma, variant=config.variant,
                                        backend=backend)
            initial = value if initial is None else initial
            if not math.isfinite(value) or value > config.divergence_factor * initial:
                raise TrainingFailure(
                    f"training diverged at step {step} (loss {value:.3e}, initial {initial:.3e})",
                    {"step": step, "stage": stage, "loss": value, "initial": initial})
            curve.append((step, value))
            vec = adam.step(theta.to_vector(), grad.to_vector())
            if not np.all(np.isfinite(vec)):
                raise TrainingFailure(f"non-finite parameters at step {step}", {"step": step})
            theta = theta.from_vector(vec)
            step += 1
        if checkpoint_dir is not None:
            theta.save(Path(checkpoint_dir) / f"stage{stage}_K{K}", {"step": step})
    return theta, curve


def evaluate(theta, dataset, operator=None, variant="lda", gamma=0.5, sigma=1.0, backend=None):
    """Reconstructions and mean loss of ``theta`` over a dataset (no gradients)."""
    _, x_hat, _ = stack_samples(dataset)
    x_K, _ = unroll_forward(theta, dataset, operator, gamma=gamma, sigma=sigma, variant=variant,
                            backend=backend)
    return x_K, loss(x_K, x_hat)


def write_loss_curve(path, curve):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "mean_loss"])
        for step, value in curve:
            writer.writerow([step, format(value, ".17g")])
