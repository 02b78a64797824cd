"""A small fully-connected denoiser network with hand-written backward pass.

The network is deliberately tiny (a few thousand parameters): it exists to
exercise the training objectives and conditioning pathways exactly, not to
scale.  Parameters and gradients travel as flat name->array dicts, which
keeps the optimizer, EMA, and serialization trivial.

Input layout: [x features | sinusoidal features of the noise conditioner |
optional observation features].  Label conditioning modulates each hidden
activation with a learned per-dimension scale and shift derived from the
label embedding; the all-zeros embedding leaves activations untouched, so a
null label reproduces the unconditional pathway exactly.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError

CONDITIONING_MODES = ("none", "adaln", "channel_concat")
NULL_LABEL = -1


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _silu(z):
    return z * _sigmoid(z)


def _silu_grad(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


class MlpDenoiser:
    """MLP backbone F(x_in, c_noise) with optional conditioning pathway."""

    def __init__(self, dim: int, hidden=(64, 64), conditioning: str = "none",
                 n_labels: int = 0, label_dim: int = 8, obs_dim: int = 0,
                 n_freqs: int = 8, rng: np.random.Generator | None = None):
        if conditioning not in CONDITIONING_MODES:
            raise DomainError(f"unknown conditioning mode {conditioning!r}")
        if conditioning == "adaln" and n_labels < 1:
            raise DomainError("adaln conditioning needs n_labels >= 1")
        if conditioning == "channel_concat" and obs_dim < 1:
            raise DomainError("channel_concat conditioning needs obs_dim >= 1")
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.conditioning = conditioning
        self.n_labels = int(n_labels) if conditioning == "adaln" else 0
        self.label_dim = int(label_dim) if conditioning == "adaln" else 0
        self.obs_dim = int(obs_dim) if conditioning == "channel_concat" else 0
        self.n_freqs = int(n_freqs)
        # geometric frequencies 1, 2, 4, ... applied to the noise conditioner
        self.freqs = 2.0 ** np.arange(self.n_freqs)
        self.d_in = self.dim + 2 * self.n_freqs + self.obs_dim

        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, np.ndarray] = {}
        widths = (self.d_in,) + self.hidden
        for layer, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            self.params[f"W{layer}"] = rng.normal(
                0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)
            )
            self.params[f"b{layer}"] = np.zeros(fan_out)
            if self.conditioning == "adaln":
                self.params[f"adaln_scale{layer}"] = np.zeros((self.label_dim, fan_out))
                self.params[f"adaln_shift{layer}"] = np.zeros((self.label_dim, fan_out))
        self.params["W_out"] = rng.normal(
            0.0, 1.0 / np.sqrt(widths[-1]), (widths[-1], self.dim)
        )
        self.params["b_out"] = np.zeros(self.dim)
        if self.conditioning == "adaln":
            self.params["label_embed"] = rng.normal(0.0, 1.0, (self.n_labels, self.label_dim))

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def noise_features(self, c_noise):
        """Sinusoidal features of the (log-scaled) noise conditioner."""
        c = np.atleast_1d(np.asarray(c_noise, dtype=np.float64))[:, None]
        angles = c * self.freqs
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    def label_embedding(self, labels, batch: int):
        """(batch, label_dim) embedding rows; NULL_LABEL maps to zeros."""
        emb = np.zeros((batch, self.label_dim))
        if labels is None:
            return emb, None
        labels = np.asarray(labels, dtype=np.intp)
        valid = labels != NULL_LABEL
        emb[valid] = self.params["label_embed"][labels[valid]]
        return emb, labels

    def forward(self, x, c_noise, labels=None, obs=None, want_cache: bool = False):
        """Raw network output, optionally with the cache backward needs."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise DomainError(f"x has {x.shape[1]} features, expected {self.dim}")
        batch = x.shape[0]
        parts = [x, self.noise_features(np.broadcast_to(
            np.asarray(c_noise, dtype=np.float64), (batch,)))]
        if self.conditioning == "channel_concat":
            if obs is None:
                raise DomainError("channel_concat model needs an observation input")
            obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
            if obs.shape != (batch, self.obs_dim):
                raise DomainError(
                    f"obs must have shape ({batch}, {self.obs_dim}), got {obs.shape}"
                )
            parts.append(obs)
        h = np.concatenate(parts, axis=1)

        emb, label_idx = (None, None)
        if self.conditioning == "adaln":
            emb, label_idx = self.label_embedding(labels, batch)

        cache = {"inputs": [h], "pre": [], "act": [], "emb": emb,
                 "labels": label_idx}
        for layer in range(len(self.hidden)):
            z = h @ self.params[f"W{layer}"] + self.params[f"b{layer}"]
            a = _silu(z)
            if self.conditioning == "adaln":
                scale = emb @ self.params[f"adaln_scale{layer}"]
                shift = emb @ self.params[f"adaln_shift{layer}"]
                h = a * (1.0 + scale) + shift
            else:
                h = a
            cache["pre"].append(z)
            cache["act"].append(a)
            cache["inputs"].append(h)
        out = h @ self.params["W_out"] + self.params["b_out"]
        if want_cache:
            return out, cache
        return out

    def backward(self, cache, dout):
        """Gradients of sum(dout * output) w.r.t. every parameter."""
        grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        h_last = cache["inputs"][-1]
        grads["W_out"] = h_last.T @ dout
        grads["b_out"] = dout.sum(axis=0)
        dh = dout @ self.params["W_out"].T
        emb = cache["emb"]
        demb = None if emb is None else np.zeros_like(emb)
        for layer in reversed(range(len(self.hidden))):
            a = cache["act"][layer]
            z = cache["pre"][layer]
            if self.conditioning == "adaln":
                scale = emb @ self.params[f"adaln_scale{layer}"]
                grads[f"adaln_scale{layer}"] = emb.T @ (dh * a)
                grads[f"adaln_shift{layer}"] = emb.T @ dh
                demb += (dh * a) @ self.params[f"adaln_scale{layer}"].T
                demb += dh @ self.params[f"adaln_shift{layer}"].T
                da = dh * (1.0 + scale)
            else:
                da = dh
            dz = da * _silu_grad(z)
            h_in = cache["inputs"][layer]
            grads[f"W{layer}"] = h_in.T @ dz
            grads[f"b{layer}"] = dz.sum(axis=0)
            dh = dz @ self.params[f"W{layer}"].T
        if self.conditioning == "adaln" and cache["labels"] is not None:
            labels = cache["labels"]
            valid = labels != NULL_LABEL
            np.add.at(grads["label_embed"], labels[valid], demb[valid])
        return grads

    def spawn_like(self) -> "MlpDenoiser":
        """Same architecture with freshly allocated (zero) parameters."""
        clone = MlpDenoiser(
            self.dim, self.hidden, self.conditioning, self.n_labels,
            self.label_dim, self.obs_dim, self.n_freqs,
            rng=np.random.default_rng(0),
        )
        for name in clone.params:
            clone.params[name] = np.zeros_like(clone.params[name])
        return clone


class AdamOptimizer:
    """Adaptive-moment optimizer with bias correction and decoupled decay."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0:
            raise DomainError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        """Update params in place from matching gradient arrays."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = grads[name]
            m = self._m.setdefault(name, np.zeros_like(p))
            v = self._v.setdefault(name, np.zeros_like(p))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p
            p -= self.lr * update


def adam_step(opt: AdamOptimizer, params: dict, grads: dict) -> dict:
    """Functional wrapper: returns the updated parameter dict."""
    opt.step(params, grads)
    return params


def ema_update(ema_params: dict, params: dict, beta: float) -> dict:
    """In-place exponential moving average: ema <- beta*ema + (1-beta)*p."""
    if not 0.0 <= beta < 1.0:
        raise DomainError("ema beta must lie in [0, 1)")
    for name, p in params.items():
        ema_params[name] += (1.0 - beta) * (p - ema_params[name])
    return ema_params
