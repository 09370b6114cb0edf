"""Feed-forward tanh networks.

Weights are stored ``(out, in)`` so a batch ``X`` of shape ``(n, in)`` maps to
``X @ W.T + b``. Hidden layers use tanh, the output layer is linear.
"""
from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad

DEFAULT_HIDDEN = 40


class Mlp:
    def __init__(self, widths, weights, biases, seed=None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid widths {widths}")
        if len(weights) != len(widths) - 1 or len(biases) != len(widths) - 1:
            raise ValueError("need one weight matrix and bias per layer")
        for i, (W, b) in enumerate(zip(weights, biases)):
            if np.shape(W) != (widths[i + 1], widths[i]) or np.shape(b) != (widths[i + 1],):
                raise ValueError(f"layer {i} has inconsistent shapes")
        self.widths = widths
        self.weights = [np.asarray(W, dtype=np.float64) for W in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.seed = seed

    @classmethod
    def init(cls, widths, seed):
        """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid widths {widths}")
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(widths, weights, biases, seed=seed)

    @property
    def n_params(self):
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def param_arrays(self):
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    def named_params(self, prefix):
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.W{i}"] = W
            out[f"{prefix}.b{i}"] = b
        return out

    def load_named(self, params, prefix):
        for i in range(len(self.weights)):
            self.weights[i] = np.asarray(params[f"{prefix}.W{i}"], dtype=np.float64)
            self.biases[i] = np.asarray(params[f"{prefix}.b{i}"], dtype=np.float64)

    def forward(self, x, params=None):
        """Apply the network to a vector or an ``(n, in)`` batch.

        ``params`` optionally replaces the stored arrays with tape Vars (same
        order as :meth:`param_arrays`).
        """
        if params is None:
            params = self.param_arrays()
        if np.shape(ad.value(x))[-1] != self.widths[0]:
            raise ValueError(f"input width {np.shape(ad.value(x))[-1]} != {self.widths[0]}")
        h = x
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            W, b = params[2 * i], params[2 * i + 1]
            h = ad.add(ad.matmul(h, ad.transpose(W)), b)
            if i < n_layers - 1:
                h = ad.tanh(h)
        return h

    __call__ = forward

    def pointwise(self, b, m, params=None):
        """Apply a (2 -> 1) network to every entry of ``b`` with input (b_ij, m).

        Recorded as one tape node whose backward pass recomputes the hidden
        activations, so memory stays O(b.size) however wide the network is.
        """
        if self.widths[0] != 2 or self.widths[-1] != 1:
            raise ValueError("pointwise needs a network with widths (2, ..., 1)")
        if params is None:
            params = self.param_arrays()
        bv = ad.value(b)
        pv = [ad.value(q) for q in params]
        z = bv.reshape(-1, 1)
        n_layers = len(self.widths) - 1

        def activations():
            W0 = pv[0]
            acts = [np.tanh(z * W0[:, 0] + (m * W0[:, 1] + pv[1]))] if n_layers > 1 else []
            for i in range(1, n_layers - 1):
                acts.append(np.tanh(acts[-1] @ pv[2 * i].T + pv[2 * i + 1]))
            return acts

        acts = activations()
        if n_layers > 1:
            out = acts[-1] @ pv[-2].T + pv[-1]
        else:
            out = z * pv[0][:, 0] + (m * pv[0][:, 1] + pv[1])
        out = out.reshape(bv.shape)
        args = [b] + list(params)
        tape = ad._tape_of(args)
        if tape is None:
            return out
        del acts

        def backward(g):
            acts = activations()
            g = g.reshape(-1, 1)
            grads = [None] * len(pv)
            for i in range(n_layers - 1, -1, -1):
                inp = acts[i - 1] if i > 0 else None
                if i > 0:
                    grads[2 * i] = g.T @ inp
                    grads[2 * i + 1] = g.sum(0)
                    g = (g @ pv[2 * i]) * (1.0 - inp * inp)
                else:
                    W0 = pv[0]
                    grads[0] = np.stack([g.T @ z[:, 0], m * g.sum(0)], axis=1)
                    grads[1] = g.sum(0)
                    gz = (g @ W0[:, :1]).reshape(bv.shape)
            all_grads = [gz] + grads
            return tuple(gr for a, gr in zip(args, all_grads) if isinstance(a, ad.Var))

        parents = [a for a in args if isinstance(a, ad.Var)]
        return tape.record("mlp_pointwise", out, parents, backward)

    # serialization: JSON header line + flat little-endian float64 blob

    def to_bytes(self):
        header = json.dumps({"widths": self.widths, "seed": self.seed}).encode()
        flat = np.concatenate([p.ravel() for p in self.param_arrays()]).astype("<f8")
        return len(header).to_bytes(4, "little") + header + flat.tobytes()

    @classmethod
    def from_bytes(cls, blob):
        n = int.from_bytes(blob[:4], "little")
        meta = json.loads(blob[4:4 + n].decode())
        flat = np.frombuffer(blob[4 + n:], dtype="<f8").astype(np.float64)
        widths = meta["widths"]
        weights, biases, pos = [], [], 0
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            weights.append(flat[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in))
            pos += fan_in * fan_out
            biases.append(flat[pos:pos + fan_out].copy())
            pos += fan_out
        if pos != flat.size:
            raise ValueError("parameter blob length does not match widths")
        return cls(widths, weights, biases, seed=meta.get("seed"))


def mlp_widths(n_in, n_out, hidden=DEFAULT_HIDDEN, layers=2):
    return [n_in] + [hidden] * layers + [n_out]
