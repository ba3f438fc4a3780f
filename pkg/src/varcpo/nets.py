"""Small tanh MLPs with hand-written reverse and forward mode derivatives.

All parameters of an approximator live in one flat vector so that the
trust-region solver can work on plain numpy arrays. Policies expose the
score-function gradient, the mean KL divergence to a frozen copy, and exact
Fisher-vector products computed from the closed-form Fisher of the output
distribution.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

FORMAT_HEADER = "varcpo-approximator 1"


class MLP:
    """Fully connected tanh network with a linear output layer."""

    def __init__(self, sizes, activation: str = "tanh", rng=None, zero_last: bool = True):
        if activation != "tanh":
            raise ValueError(f"unsupported activation {activation!r}")
        self.sizes = [int(s) for s in sizes]
        self.activation = activation
        self.shapes = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.shapes += [(fan_in, fan_out), (fan_out,)]
        self.size = sum(math.prod(s) for s in self.shapes)
        self.params = np.zeros(self.size)
        if rng is not None:
            self.init(rng, zero_last)

    def init(self, rng, zero_last: bool = True):
        layers = self.layers()
        for i, (w, b) in enumerate(layers):
            b[:] = 0.0
            if zero_last and i == len(layers) - 1:
                w[:] = 0.0
                continue
            a = rng.standard_normal(w.shape)
            q, r = np.linalg.qr(a if a.shape[0] >= a.shape[1] else a.T)
            q = q * np.sign(np.diag(r))
            w[:] = q if a.shape[0] >= a.shape[1] else q.T
            if i == len(layers) - 1:
                w *= 0.01

    def layers(self):
        out, i = [], 0
        views = []
        for shape in self.shapes:
            n = math.prod(shape)
            views.append(self.params[i:i + n].reshape(shape))
            i += n
        for j in range(0, len(views), 2):
            out.append((views[j], views[j + 1]))
        return out

    def split(self, flat):
        """View a flat parameter-shaped vector as per-layer (W, b) pairs."""
        out, i = [], 0
        for j in range(0, len(self.shapes), 2):
            nw, nb = math.prod(self.shapes[j]), self.shapes[j + 1][0]
            out.append((flat[i:i + nw].reshape(self.shapes[j]), flat[i + nw:i + nw + nb]))
            i += nw + nb
        return out

    def forward(self, x):
        x = np.atleast_2d(x)
        if x.shape[1] != self.sizes[0]:
            raise ValueError(f"input dimension {x.shape[1]} != {self.sizes[0]}")
        acts = [x]
        layers = self.layers()
        for w, b in layers[:-1]:
            acts.append(np.tanh(acts[-1] @ w + b))
        w, b = layers[-1]
        return acts[-1] @ w + b, acts

    def backward(self, acts, dout) -> np.ndarray:
        """Gradient of ``sum(dout * output)`` with respect to the parameters."""
        grad = np.zeros(self.size)
        glayers = self.split(grad)
        layers = self.layers()
        delta = dout
        for i in range(len(layers) - 1, -1, -1):
            gw, gb = glayers[i]
            gw[:] = acts[i].T @ delta
            gb[:] = delta.sum(axis=0)
            if i:
                delta = (delta @ layers[i][0].T) * (1.0 - acts[i] ** 2)
        return grad

    def jvp(self, acts, v) -> np.ndarray:
        """Directional derivative of the outputs along parameter direction ``v``."""
        layers = self.layers()
        vlayers = self.split(v)
        dh = np.zeros_like(acts[0])
        for i, ((w, _), (vw, vb)) in enumerate(zip(layers, vlayers)):
            dz = dh @ w + acts[i] @ vw + vb
            if i < len(layers) - 1:
                dh = (1.0 - acts[i + 1] ** 2) * dz
        return dz


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class Approximator:
    head_kind = ""

    def __init__(self, net: MLP):
        self.net = net

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    def get_params(self) -> np.ndarray:
        return self.params.copy()

    def set_params(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != self.params.shape:
            raise ValueError("parameter vector has the wrong size")
        self.params[:] = flat

    def copy(self):
        other = self.__class__.__new__(self.__class__)
        other.__dict__.update(self.__dict__)
        other.net = MLP(self.net.sizes, self.net.activation)
        other.net.params[:] = self.net.params[: other.net.size]
        self._copy_extra(other)
        return other

    def _copy_extra(self, other):
        pass


class CategoricalPolicy(Approximator):
    head_kind = "CategoricalPolicy"

    def __init__(self, obs_dim: int, n_actions: int, hidden=(64, 64), rng=None):
        super().__init__(MLP([obs_dim, *hidden, n_actions], rng=rng))

    @property
    def architecture(self):
        return self.net.sizes

    def forward_policy(self, x) -> np.ndarray:
        """Action probabilities, one row per input."""
        logits, _ = self.net.forward(x)
        return np.exp(_log_softmax(logits))

    dist = forward_policy

    def sample(self, probs, rng) -> int:
        probs = np.asarray(probs).reshape(-1)
        u = rng.random()
        return int(min(np.searchsorted(np.cumsum(probs), u, side="right"), len(probs) - 1))

    def mode(self, probs) -> int:
        return int(np.argmax(probs))

    def log_prob(self, x, actions) -> np.ndarray:
        logits, _ = self.net.forward(x)
        logp = _log_softmax(logits)
        return logp[np.arange(len(logp)), np.asarray(actions, dtype=int)]

    def weighted_score(self, x, actions, weights) -> np.ndarray:
        """``sum_i weights_i * grad log pi(a_i | x_i)``."""
        logits, acts = self.net.forward(x)
        p = np.exp(_log_softmax(logits))
        d = -p
        d[np.arange(len(p)), np.asarray(actions, dtype=int)] += 1.0
        return self.net.backward(acts, d * np.asarray(weights, dtype=float)[:, None])

    def log_prob_grad(self, x, action) -> np.ndarray:
        return self.weighted_score(np.atleast_2d(x), [action], [1.0])

    def kl_from(self, old_dist, x) -> np.ndarray:
        """Per-state ``KL(old || self)``."""
        logits, _ = self.net.forward(x)
        logp_new = _log_softmax(logits)
        p_old = np.asarray(old_dist)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p_old > 0, p_old * (np.log(p_old) - logp_new), 0.0)
        return np.maximum(terms.sum(axis=1), 0.0)

    def kl_grad(self, old_dist, x) -> np.ndarray:
        """Gradient of the mean ``KL(old || self)`` over the batch."""
        logits, acts = self.net.forward(x)
        p_new = np.exp(_log_softmax(logits))
        return self.net.backward(acts, (p_new - old_dist) / len(p_new))

    def fisher_vector_product(self, x, v, damping: float = 0.0) -> np.ndarray:
        logits, acts = self.net.forward(x)
        p = np.exp(_log_softmax(logits))
        u = self.net.jvp(acts, v)
        mu = p * u - p * (p * u).sum(axis=1, keepdims=True)
        return self.net.backward(acts, mu / len(p)) + damping * v

    def entropy(self, x) -> np.ndarray:
        logits, _ = self.net.forward(x)
        logp = _log_softmax(logits)
        return -(np.exp(logp) * logp).sum(axis=1)

    def extra_lines(self):
        return []


class GaussianPolicy(Approximator):
    """Diagonal Gaussian with state-independent log standard deviation.

    The flat parameter vector is the network parameters followed by the
    log-stddev entries, which are clamped to ``log_std_bounds`` on use.
    """

    head_kind = "GaussianPolicy"

    def __init__(self, obs_dim: int, action_dim: int, hidden=(64, 64), rng=None,
                 init_log_std: float = -0.5, log_std_bounds=(-5.0, 2.0)):
        net = MLP([obs_dim, *hidden, action_dim], rng=rng)
        self.action_dim = action_dim
        self.log_std_bounds = tuple(float(b) for b in log_std_bounds)
        self._flat = np.concatenate([net.params, np.full(action_dim, init_log_std)])
        net.params = self._flat[: net.size]
        super().__init__(net)

    def _copy_extra(self, other):
        other._flat = np.concatenate([self.net.params, self.log_std_raw])
        other.net.params = other._flat[: other.net.size]

    @property
    def params(self) -> np.ndarray:
        return self._flat

    @property
    def architecture(self):
        return self.net.sizes

    @property
    def log_std_raw(self) -> np.ndarray:
        return self._flat[self.net.size:]

    @property
    def log_std(self) -> np.ndarray:
        return np.clip(self.log_std_raw, *self.log_std_bounds)

    def _std_mask(self):
        lo, hi = self.log_std_bounds
        raw = self.log_std_raw
        return ((raw >= lo) & (raw <= hi)).astype(float)

    def forward_policy(self, x):
        mean, _ = self.net.forward(x)
        return mean, np.broadcast_to(self.log_std, mean.shape).copy()

    dist = forward_policy

    def sample(self, dist, rng) -> np.ndarray:
        mean, log_std = dist
        mean, log_std = np.asarray(mean).reshape(-1), np.asarray(log_std).reshape(-1)
        return mean + np.exp(log_std) * rng.standard_normal(mean.shape)

    def mode(self, dist) -> np.ndarray:
        return np.asarray(dist[0]).reshape(-1)

    def log_prob(self, x, actions) -> np.ndarray:
        mean, _ = self.net.forward(x)
        a = np.asarray(actions, dtype=float).reshape(mean.shape)
        ls = self.log_std
        z = (a - mean) * np.exp(-ls)
        return (-0.5 * z**2 - ls - 0.5 * math.log(2 * math.pi)).sum(axis=1)

    def weighted_score(self, x, actions, weights) -> np.ndarray:
        mean, acts = self.net.forward(x)
        a = np.asarray(actions, dtype=float).reshape(mean.shape)
        w = np.asarray(weights, dtype=float)[:, None]
        inv_var = np.exp(-2.0 * self.log_std)
        g_net = self.net.backward(acts, w * (a - mean) * inv_var)
        g_std = (w * ((a - mean) ** 2 * inv_var - 1.0)).sum(axis=0) * self._std_mask()
        return np.concatenate([g_net, g_std])

    def log_prob_grad(self, x, action) -> np.ndarray:
        return self.weighted_score(np.atleast_2d(x), np.atleast_2d(action), [1.0])

    def kl_from(self, old_dist, x) -> np.ndarray:
        mean_o, ls_o = old_dist
        mean_n, _ = self.net.forward(x)
        ls_n = self.log_std
        terms = ls_n - ls_o + (np.exp(2 * ls_o) + (mean_o - mean_n) ** 2) / (2 * np.exp(2 * ls_n)) - 0.5
        return np.maximum(terms.sum(axis=1), 0.0)

    def kl_grad(self, old_dist, x) -> np.ndarray:
        mean_o, ls_o = old_dist
        mean_n, acts = self.net.forward(x)
        n = len(mean_n)
        inv_var = np.exp(-2.0 * self.log_std)
        g_net = self.net.backward(acts, (mean_n - mean_o) * inv_var / n)
        g_std = (1.0 - (np.exp(2 * ls_o) + (mean_o - mean_n) ** 2) * inv_var).mean(axis=0)
        return np.concatenate([g_net, g_std * self._std_mask()])

    def fisher_vector_product(self, x, v, damping: float = 0.0) -> np.ndarray:
        mean, acts = self.net.forward(x)
        n_net = self.net.size
        u = self.net.jvp(acts, v[:n_net])
        inv_var = np.exp(-2.0 * self.log_std)
        f_net = self.net.backward(acts, u * inv_var / len(mean))
        mask = self._std_mask()
        f_std = 2.0 * mask * v[n_net:] * mask
        return np.concatenate([f_net, f_std]) + damping * v

    def extra_lines(self):
        return [f"log_std_bounds {self.log_std_bounds[0]!r} {self.log_std_bounds[1]!r}"]


class ValueHead(Approximator):
    """Scalar critic; predictions are the network output times ``scale``."""

    head_kind = "ValueHead"

    def __init__(self, obs_dim: int, hidden=(64, 64), rng=None, scale: float = 1.0):
        super().__init__(MLP([obs_dim, *hidden, 1], rng=rng))
        self.scale = float(scale)

    @property
    def architecture(self):
        return self.net.sizes

    def value_forward(self, x) -> np.ndarray:
        out, _ = self.net.forward(x)
        return out[:, 0] * self.scale

    def mse(self, x, targets) -> float:
        out, _ = self.net.forward(x)
        return float(np.mean((out[:, 0] - np.asarray(targets) / self.scale) ** 2))

    def value_grad(self, x, targets) -> tuple[float, np.ndarray]:
        """Scaled-space mean squared error and its parameter gradient."""
        out, acts = self.net.forward(x)
        err = out[:, 0] - np.asarray(targets, dtype=float) / self.scale
        grad = self.net.backward(acts, (2.0 / len(err)) * err[:, None])
        return float(np.mean(err**2)), grad

    def extra_lines(self):
        return [f"scale {self.scale!r}"]


def _fmt(a) -> str:
    return " ".join(f"{v:.17g}" for v in np.asarray(a).reshape(-1))


def save_approximator(obj, path):
    lines = [FORMAT_HEADER, f"head_kind {obj.head_kind}",
             "architecture " + " ".join(str(s) for s in obj.architecture) + f" {obj.net.activation}"]
    lines += obj.extra_lines()
    arrays = [a for pair in obj.net.layers() for a in pair]
    if isinstance(obj, GaussianPolicy):
        arrays.append(obj.log_std_raw)
    lines.append(f"arrays {len(arrays)}")
    lines += [_fmt(a) for a in arrays]
    Path(path).write_text("\n".join(lines) + "\n")


def load_approximator(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != FORMAT_HEADER:
        raise ValueError(f"{path}: not a {FORMAT_HEADER!r} file")
    fields = {}
    i = 1
    while not lines[i].startswith("arrays "):
        key, _, rest = lines[i].partition(" ")
        fields[key] = rest.split()
        i += 1
    n_arrays = int(lines[i].split()[1])
    arrays = [np.array([float(t) for t in ln.split()]) for ln in lines[i + 1:i + 1 + n_arrays]]
    kind = fields["head_kind"][0]
    sizes = [int(s) for s in fields["architecture"][:-1]]
    hidden = tuple(sizes[1:-1])
    if kind == "CategoricalPolicy":
        obj = CategoricalPolicy(sizes[0], sizes[-1], hidden)
    elif kind == "GaussianPolicy":
        bounds = tuple(float(b) for b in fields["log_std_bounds"])
        obj = GaussianPolicy(sizes[0], sizes[-1], hidden, log_std_bounds=bounds)
    elif kind == "ValueHead":
        obj = ValueHead(sizes[0], hidden, scale=float(fields["scale"][0]))
    else:
        raise ValueError(f"unknown head kind {kind!r}")
    obj.set_params(np.concatenate(arrays))
    return obj
