"""A small shared-backbone multi-head network with hand-written backprop.

Backbone: bias-free dense layers ``a_l = act(a_{l-1} W_l^T)``, one block per
layer. Each (language, task) pair owns a linear head ``out = a_L V^T + c``.
Task losses are softmax cross-entropy (``"ce"``) or half mean squared error
(``"mse"``). The unsupervised proxy reconstructs the input through the
backbone and the tied linear decoder ``x_hat = a_L W_L ... W_1`` and scores
``1/(2n) sum ||x_hat - x||^2``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..param_space import UNSUP, Backbone, Head, ParamVector, Supervised
from .base import Problem, ProblemSpec


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class ToyMultitaskNet(Problem):
    def __init__(self, T: int = 2, N: int = 2, widths: Sequence[int] = (16, 16, 16, 16), input_dim: int = 8,
                 dataset_sizes: int | Sequence[int] = 256, unlabeled_size: int = 512, n_classes: int = 4,
                 out_dim: int = 2, task_losses: Sequence[str] | None = None, activation: str = "tanh",
                 unsupervised: bool = True, init_scale: float = 0.5, seed: int = 0,
                 language_seeds: Sequence[int] | None = None, label_noise: float = 0.1):
        if T < 1 or N < 1:
            raise ValueError("T and N must be at least 1")
        widths = [int(w) for w in widths]
        if not widths or any(w < 1 for w in widths) or input_dim < 1:
            raise ValueError("invalid widths")
        if activation not in ("tanh", "linear"):
            raise ValueError(f"unknown activation {activation!r}")
        task_losses = list(task_losses) if task_losses is not None else (["ce", "mse"] * N)[:N]
        if len(task_losses) != N or any(t not in ("ce", "mse") for t in task_losses):
            raise ValueError("task_losses needs one of 'ce'/'mse' per task")
        sizes = [int(dataset_sizes)] * T if np.isscalar(dataset_sizes) else [int(s) for s in dataset_sizes]
        if len(sizes) != T or any(s < 1 for s in sizes):
            raise ValueError("dataset_sizes needs one positive size per language")
        lang_seeds = list(language_seeds) if language_seeds is not None else [seed * 1000 + t for t in range(T)]
        if len(lang_seeds) != T:
            raise ValueError("language_seeds needs one seed per language")

        self.T, self.N, self.widths, self.input_dim = T, N, widths, input_dim
        self.task_losses, self.activation, self.init_scale = task_losses, activation, init_scale
        self.n_classes, self.out_dim = n_classes, out_dim

        # per-language inputs; tasks of one language share inputs, labels differ
        self.X, self.Y = [], {}
        for t in range(T):
            rng = np.random.default_rng(lang_seeds[t])
            mix = rng.standard_normal((input_dim, input_dim)) / np.sqrt(input_dim)
            shift = 0.5 * rng.standard_normal(input_dim)
            X = rng.standard_normal((sizes[t], input_dim)) @ mix + shift
            self.X.append(X)
            for n in range(N):
                teacher = rng.standard_normal((input_dim, max(n_classes, out_dim)))
                feats = np.tanh(X @ teacher)
                if task_losses[n] == "ce":
                    self.Y[(t, n)] = np.argmax(feats[:, :n_classes] + label_noise * rng.standard_normal((sizes[t], n_classes)), axis=1)
                else:
                    self.Y[(t, n)] = feats[:, :out_dim] + label_noise * rng.standard_normal((sizes[t], out_dim))
        rng = np.random.default_rng(seed * 1000 + 999)
        pool = np.concatenate(self.X)
        self.Xu = pool[rng.integers(0, pool.shape[0], unlabeled_size)] + 0.1 * rng.standard_normal((unlabeled_size, input_dim)) if unsupervised else None

        dims_in = [input_dim] + widths[:-1]
        self.w_shapes = [(w, d) for w, d in zip(widths, dims_in)]
        head_dims = {}
        for t in range(T):
            for n in range(N):
                o = n_classes if task_losses[n] == "ce" else out_dim
                head_dims[(t, n)] = o * widths[-1] + o

        optimum = None
        if unsupervised and activation == "linear":
            k = min(widths)
            sv = np.linalg.svd(self.Xu, compute_uv=False)
            optimum = float((sv[k:] ** 2).sum() / (2 * self.Xu.shape[0]))
        objectives = tuple(Supervised(t, n) for t in range(T) for n in range(N)) + ((UNSUP,) if unsupervised else ())
        self.stochastic = True
        self.spec = ProblemSpec(
            name="toy_multitask_net",
            backbone_blocks=tuple((Backbone(i), w * d) for i, (w, d) in enumerate(self.w_shapes)),
            heads=tuple(((t, n), head_dims[(t, n)]) for t in range(T) for n in range(N)),
            objectives=objectives,
            has_unsupervised=unsupervised,
            unsup_optimum=optimum,
            params={"T": T, "N": N, "widths": widths, "input_dim": input_dim, "dataset_sizes": sizes,
                    "unlabeled_size": unlabeled_size, "n_classes": n_classes, "out_dim": out_dim,
                    "task_losses": task_losses, "activation": activation, "unsupervised": unsupervised,
                    "init_scale": init_scale, "seed": seed, "language_seeds": lang_seeds,
                    "label_noise": label_noise},
        )
        self._setup_layout()

    # -- parameters -------------------------------------------------------

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        parts = []
        for w, d in self.w_shapes:
            parts.append(self.init_scale * rng.standard_normal(w * d) / np.sqrt(d))
        for (t, n), dim in self.spec.heads:
            parts.append(self.init_scale * rng.standard_normal(dim) / np.sqrt(self.widths[-1]))
        return ParamVector(self.layout, np.concatenate(parts))

    def _weights(self, params: ParamVector) -> list[np.ndarray]:
        return [params[Backbone(i)].reshape(s) for i, s in enumerate(self.w_shapes)]

    def _head(self, params: ParamVector, t: int, n: int) -> tuple[np.ndarray, np.ndarray]:
        o = self.n_classes if self.task_losses[n] == "ce" else self.out_dim
        flat = params[Head(t, n)]
        return flat[: o * self.widths[-1]].reshape(o, self.widths[-1]), flat[o * self.widths[-1]:]

    # -- forward / backward ----------------------------------------------

    def _act(self, z):
        return np.tanh(z) if self.activation == "tanh" else z

    def _dact(self, a):
        return 1.0 - a * a if self.activation == "tanh" else np.ones_like(a)

    def _forward(self, Ws, X):
        acts = [X]
        for W in Ws:
            acts.append(self._act(acts[-1] @ W.T))
        return acts

    def _backward(self, Ws, acts, d_top) -> list[np.ndarray]:
        grads = [None] * len(Ws)
        da = d_top
        for l in range(len(Ws) - 1, -1, -1):
            dz = da * self._dact(acts[l + 1])
            grads[l] = dz.T @ acts[l]
            da = dz @ Ws[l]
        return grads

    def _batch_indices(self, batch, n_rows: int, stream_id: int) -> np.ndarray | None:
        if batch.full:
            return None
        rng = np.random.default_rng(np.random.SeedSequence([*batch.key, stream_id]))
        return rng.integers(0, n_rows, batch.size)

    def _evaluate(self, params, labeled, unlabeled, grads):
        Ws = self._weights(params)
        losses, bg, hg = {}, {}, {}
        acts_cache = {}
        for k, o in enumerate(self.supervised):
            t, n = o.language, o.task
            idx = self._batch_indices(labeled, self.X[t].shape[0], k)
            X = self.X[t] if idx is None else self.X[t][idx]
            Y = self.Y[(t, n)] if idx is None else self.Y[(t, n)][idx]
            if idx is None and t in acts_cache:
                acts = acts_cache[t]
            else:
                acts = self._forward(Ws, X)
                if idx is None:
                    acts_cache[t] = acts
            V, c = self._head(params, t, n)
            out = acts[-1] @ V.T + c
            m = X.shape[0]
            if self.task_losses[n] == "ce":
                p = _softmax(out)
                losses[o] = float(-np.mean(np.log(p[np.arange(m), Y] + 1e-300)))
                dout = p
                dout[np.arange(m), Y] -= 1.0
                dout /= m
            else:
                r = out - Y
                losses[o] = float(0.5 * np.sum(r * r) / m)
                dout = r / m
            if grads:
                hg[o] = np.concatenate([(dout.T @ acts[-1]).ravel(), dout.sum(axis=0)])
                bg[o] = np.concatenate([g.ravel() for g in self._backward(Ws, acts, dout @ V)])
        if self.Xu is not None:
            idx = self._batch_indices(unlabeled, self.Xu.shape[0], 10_000)
            X = self.Xu if idx is None else self.Xu[idx]
            acts = self._forward(Ws, X)
            rs = [acts[-1]]
            for W in reversed(Ws):
                rs.append(rs[-1] @ W)
            # rs[j] is the decoder state after j transposed layers; rs[-1] = x_hat
            r = rs[-1] - X
            m = X.shape[0]
            losses[UNSUP] = float(0.5 * np.sum(r * r) / m)
            if grads:
                L = len(Ws)
                dW = [np.zeros_like(W) for W in Ws]
                dr = r / m
                for j in range(L, 0, -1):
                    l = L - j  # rs[j] = rs[j-1] @ Ws[l]
                    dW[l] += rs[j - 1].T @ dr
                    dr = dr @ Ws[l].T
                enc = self._backward(Ws, acts, dr)
                bg[UNSUP] = np.concatenate([(a + b).ravel() for a, b in zip(dW, enc)])
        return losses, bg, hg

    def perturbed(self, objective: Supervised, rng: np.random.Generator) -> "ToyMultitaskNet":
        """Copy with ``objective``'s labels/targets redrawn."""
        import copy

        other = copy.copy(self)
        other.Y = dict(self.Y)
        t, n = objective.language, objective.task
        Y = self.Y[(t, n)]
        if self.task_losses[n] == "ce":
            other.Y[(t, n)] = rng.integers(0, self.n_classes, Y.shape[0])
        else:
            other.Y[(t, n)] = Y + rng.standard_normal(Y.shape)
        return other


def toy_multitask_net(T: int = 2, N: int = 2, widths: Sequence[int] = (16, 16, 16, 16),
                      dataset_sizes: int | Sequence[int] = 256, seed: int = 0, **kwargs) -> ToyMultitaskNet:
    return ToyMultitaskNet(T=T, N=N, widths=widths, dataset_sizes=dataset_sizes, seed=seed, **kwargs)
