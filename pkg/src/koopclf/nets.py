"""Tanh MLPs for the encoder, decoder and CLF, plus the Adam optimizer.

Networks share one flat parameter vector. Two evaluation paths exist:

* ``*_var`` functions build autodiff graphs (training, gradient checks);
* plain numpy functions (``forward``, ``forward_jac``, ``clf_value_grad``)
  are used by the controller and for re-checking falsifier counterexamples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple
    final_linear: bool = False

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError(f"bad layer widths {self.widths}")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def layer_shapes(self):
        return [(self.widths[i + 1], self.widths[i]) for i in range(self.n_layers)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())

    def unpack(self, params):
        """Split a flat parameter array into ``[(W, b), ...]``."""
        params = np.asarray(params, dtype=float)
        if params.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {params.size}")
        out, k = [], 0
        for o, i in self.layer_shapes():
            W = params[k:k + o * i].reshape(o, i)
            k += o * i
            b = params[k:k + o]
            k += o
            out.append((W, b))
        return out

    def to_dict(self) -> dict:
        return {"kind": "mlp", "widths": list(self.widths), "final_linear": self.final_linear}


@dataclass(frozen=True)
class QuadraticClfSpec:
    """``V(z) = z^T (gamma I + W(z)^T W(z)) z`` with ``W(z)`` an ``n_w x N`` network output."""

    N: int
    gamma: float = 0.1
    n_w: int = 2
    hidden: tuple = (6,)

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def net(self) -> MlpSpec:
        return MlpSpec((self.N,) + self.hidden + (self.n_w * self.N,), final_linear=True)

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def to_dict(self) -> dict:
        return {"kind": "quadratic", "N": self.N, "gamma": self.gamma, "n_w": self.n_w,
                "hidden": list(self.hidden)}


def spec_from_dict(d: dict):
    if d["kind"] == "mlp":
        return MlpSpec(tuple(d["widths"]), d["final_linear"])
    if d["kind"] == "quadratic":
        return QuadraticClfSpec(d["N"], d["gamma"], d["n_w"], tuple(d["hidden"]))
    raise ValueError(f"unknown network kind {d['kind']!r}")


def init_params(spec, rng: np.random.Generator) -> np.ndarray:
    """Uniform in ``+-1/sqrt(fan_in)`` for weights and biases."""
    mlp = spec.net if isinstance(spec, QuadraticClfSpec) else spec
    chunks = []
    for o, i in mlp.layer_shapes():
        bound = 1.0 / np.sqrt(i)
        chunks.append(rng.uniform(-bound, bound, size=o * i))
        chunks.append(rng.uniform(-bound, bound, size=o))
    return np.concatenate(chunks)


# ---------------------------------------------------------------------------
# plain numpy evaluation


def forward(spec: MlpSpec, params, x) -> np.ndarray:
    y = np.asarray(x, dtype=float)
    layers = spec.unpack(params)
    for k, (W, b) in enumerate(layers):
        y = y @ W.T + b
        if k < len(layers) - 1 or not spec.final_linear:
            y = np.tanh(y)
    return y


def forward_jac(spec: MlpSpec, params, x):
    """Output and input Jacobian, ``y (..., out)`` and ``J (..., out, in)``."""
    y = np.asarray(x, dtype=float)
    J = np.broadcast_to(np.eye(spec.n_in), y.shape[:-1] + (spec.n_in, spec.n_in))
    layers = spec.unpack(params)
    for k, (W, b) in enumerate(layers):
        y = y @ W.T + b
        J = W @ J
        if k < len(layers) - 1 or not spec.final_linear:
            y = np.tanh(y)
            J = (1.0 - y * y)[..., :, None] * J
    return y, J


def clf_value(clf, params, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if isinstance(clf, QuadraticClfSpec):
        Wz = _wz(clf, forward(clf.net, params, z), z)
        return clf.gamma * np.sum(z * z, axis=-1) + np.sum(Wz * Wz, axis=-1)
    return forward(clf, params, z)[..., 0]


def _wz(clf, wflat, z):
    W = wflat.reshape(wflat.shape[:-1] + (clf.n_w, clf.N))
    return np.einsum("...rj,...j->...r", W, z)


def clf_value_grad(clf, params, z):
    """``V(z)`` and ``dV/dz`` without building a graph."""
    z = np.asarray(z, dtype=float)
    if isinstance(clf, QuadraticClfSpec):
        wflat, dW = forward_jac(clf.net, params, z)
        W = wflat.reshape(wflat.shape[:-1] + (clf.n_w, clf.N))
        dW = dW.reshape(dW.shape[:-2] + (clf.n_w, clf.N, clf.N))
        Wz = np.einsum("...rj,...j->...r", W, z)
        # d(Wz)_r/dz_k = W_rk + sum_j dW_rj/dz_k z_j
        Jwz = W + np.einsum("...rjk,...j->...rk", dW, z)
        V = clf.gamma * np.sum(z * z, axis=-1) + np.sum(Wz * Wz, axis=-1)
        g = 2.0 * clf.gamma * z + 2.0 * np.einsum("...rk,...r->...k", Jwz, Wz)
        return V, g
    y, J = forward_jac(clf, params, z)
    return y[..., 0], J[..., 0, :]


# ---------------------------------------------------------------------------
# autodiff evaluation


def layer_vars(spec: MlpSpec, theta: ad.Var, offset: int = 0):
    out, k = [], offset
    for o, i in spec.layer_shapes():
        W = ad.slice_flat(theta, k, k + o * i, (o, i))
        k += o * i
        b = ad.slice_flat(theta, k, k + o, (o,))
        k += o
        out.append((W, b))
    return out


def forward_var(spec: MlpSpec, theta: ad.Var, x, offset: int = 0) -> ad.Var:
    y = ad.const(x)
    layers = layer_vars(spec, theta, offset)
    for k, (W, b) in enumerate(layers):
        y = ad.add(ad.matmul(y, ad.transpose(W)), b)
        if k < len(layers) - 1 or not spec.final_linear:
            y = ad.tanh(y)
    return y


def clf_value_var(clf, theta: ad.Var, z, offset: int = 0) -> ad.Var:
    """Per-row CLF values for ``z`` of shape ``(B, N)``."""
    z = ad.const(z)
    if isinstance(clf, QuadraticClfSpec):
        wflat = forward_var(clf.net, theta, z, offset)
        W = ad.reshape(wflat, (z.shape[0], clf.n_w, clf.N))
        Wz = ad.reshape(ad.matmul(W, ad.reshape(z, (z.shape[0], clf.N, 1))), (z.shape[0], clf.n_w))
        return ad.add(ad.mul(clf.gamma, ad.vsum(ad.mul(z, z), axis=1)), ad.vsum(ad.mul(Wz, Wz), axis=1))
    y = forward_var(clf, theta, z, offset)
    return ad.reshape(y, (z.shape[0],))


def input_gradient(clf, theta: ad.Var, z: ad.Var, offset: int = 0):
    """``V(z)`` and ``dV/dz`` as graph nodes; the gradient stays differentiable in ``theta``."""
    V = clf_value_var(clf, theta, z, offset)
    (g,) = ad.grad(V, [z], create_graph=True)
    return V, g


def param_gradient(loss: ad.Var, theta: ad.Var) -> np.ndarray:
    (g,) = ad.grad(loss, [theta])
    return g


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(state: AdamState, params, grad, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(params, state)`` without mutating inputs."""
    grad = np.asarray(grad, dtype=float)
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new = np.asarray(params, dtype=float) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# the three networks on one parameter vector


def _shift(phi, phi0, x):
    """``phi - phi0`` with rows at ``x == 0`` set to exactly zero (batched
    products need not reproduce ``phi0`` bit for bit)."""
    z = phi - phi0
    return np.where(np.all(x == 0, axis=-1, keepdims=True), 0.0, z)


@dataclass
class NetworkBundle:
    encoder: MlpSpec
    decoder: MlpSpec
    clf: object
    theta: np.ndarray = field(default=None, repr=False)
    state_inclusive: bool = False  # z = [x; Phi(x) - Phi(0)]

    def __post_init__(self):
        N = self.N
        if self.decoder.n_in != N or self.decoder.n_out != self.encoder.n_in:
            raise ValueError("decoder widths do not match the lift")
        clf_in = self.clf.N if isinstance(self.clf, QuadraticClfSpec) else self.clf.n_in
        if clf_in != N:
            raise ValueError("CLF input width must equal the lifted dimension")
        if not isinstance(self.clf, QuadraticClfSpec) and self.clf.n_out != 1:
            raise ValueError("MLP CLF must have a scalar output")
        if self.theta is not None:
            self.theta = np.asarray(self.theta, dtype=float)
            if self.theta.size != self.size:
                raise ValueError("parameter vector does not match layout")

    @property
    def N(self) -> int:
        return self.encoder.n_out + (self.encoder.n_in if self.state_inclusive else 0)

    @property
    def offsets(self):
        e = self.encoder.n_params
        d = self.decoder.n_params
        return {"encoder": 0, "decoder": e, "clf": e + d}

    @property
    def size(self) -> int:
        return self.encoder.n_params + self.decoder.n_params + self.clf.n_params

    def layout(self):
        """``{name: (start, stop)}`` slices of the flat parameter vector."""
        o = self.offsets
        return {"encoder": (0, o["decoder"]), "decoder": (o["decoder"], o["clf"]),
                "clf": (o["clf"], self.size)}

    def part(self, name: str, theta=None) -> np.ndarray:
        theta = self.theta if theta is None else theta
        a, b = self.layout()[name]
        return theta[a:b]

    def init(self, seed: int) -> "NetworkBundle":
        rng = np.random.default_rng(seed)
        self.theta = np.concatenate([init_params(self.encoder, rng), init_params(self.decoder, rng),
                                     init_params(self.clf, rng)])
        return self

    # numpy helpers on the current parameters
    def lift(self, x, theta=None) -> np.ndarray:
        """Origin-shifted lift ``Phi(x) - Phi(0)``, preceded by ``x`` when state-inclusive."""
        p = self.part("encoder", theta)
        x = np.asarray(x, dtype=float)
        z = _shift(forward(self.encoder, p, x), forward(self.encoder, p, np.zeros(self.encoder.n_in)), x)
        return np.concatenate([x, z], axis=-1) if self.state_inclusive else z

    def lift_jac(self, x, theta=None):
        p = self.part("encoder", theta)
        x = np.asarray(x, dtype=float)
        z, J = forward_jac(self.encoder, p, x)
        z = _shift(z, forward(self.encoder, p, np.zeros(self.encoder.n_in)), x)
        if self.state_inclusive:
            eye = np.broadcast_to(np.eye(x.shape[-1]), J.shape[:-2] + (x.shape[-1],) * 2)
            return np.concatenate([x, z], axis=-1), np.concatenate([eye, J], axis=-2)
        return z, J

    def decode(self, z, theta=None) -> np.ndarray:
        return forward(self.decoder, self.part("decoder", theta), z)

    def V(self, z, theta=None) -> np.ndarray:
        return clf_value(self.clf, self.part("clf", theta), z)

    def V_grad(self, z, theta=None):
        return clf_value_grad(self.clf, self.part("clf", theta), z)

    # graph builders
    def lift_var(self, theta: ad.Var, x) -> ad.Var:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        both = forward_var(self.encoder, theta, np.vstack([x, np.zeros((1, x.shape[1]))]),
                           self.offsets["encoder"])
        n = x.shape[0]
        z = ad.sub(ad.take_axis(both, 0, 0, n), ad.take_axis(both, 0, n, n + 1))
        return ad.concat([ad.const(x), z], axis=1) if self.state_inclusive else z

    def decode_var(self, theta: ad.Var, z) -> ad.Var:
        return forward_var(self.decoder, theta, z, self.offsets["decoder"])

    def V_var(self, theta: ad.Var, z) -> ad.Var:
        return clf_value_var(self.clf, theta, z, self.offsets["clf"])

    def V_grad_var(self, theta: ad.Var, z):
        return input_gradient(self.clf, theta, z, self.offsets["clf"])

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "decoder": self.decoder.to_dict(),
                "clf": self.clf.to_dict(), "state_inclusive": self.state_inclusive}


def default_bundle(n: int, N: int, hidden_enc=(6,), hidden_dec=(16, 16), hidden_clf=(6,),
                   clf_kind: str = "quadratic", gamma: float = 0.1, n_w: int = 2,
                   clf_final_linear: bool = True, state_inclusive: bool = True) -> NetworkBundle:
    """Bundle with lifted dimension ``N`` (including the ``n`` state copies when state-inclusive)."""
    n_phi = N - n if state_inclusive else N
    if n_phi < 1:
        raise ValueError(f"lifted dimension {N} leaves no learned observables for n = {n}")
    enc = MlpSpec((n,) + tuple(hidden_enc) + (n_phi,), final_linear=False)
    dec = MlpSpec((N,) + tuple(hidden_dec) + (n,), final_linear=True)
    if clf_kind == "quadratic":
        clf = QuadraticClfSpec(N, gamma, n_w, tuple(hidden_clf))
    elif clf_kind == "mlp":
        clf = MlpSpec((N,) + tuple(hidden_clf) + (1,), final_linear=clf_final_linear)
    else:
        raise ValueError(f"unknown CLF kind {clf_kind!r}")
    return NetworkBundle(enc, dec, clf, state_inclusive=state_inclusive)
