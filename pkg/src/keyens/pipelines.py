"""Prediction pipelines seen by the attacks.

A pipeline answers ``probs(x, rng)`` for a batch of plaintext images and, when
it is white-box, ``loss_grad(x, labels, rng, target)`` returning the
per-example loss the attacker ascends and its gradient with respect to the
plaintext.

Threat models for key-encrypted pipelines:

* ``keys_known=True``: the attacker differentiates through the encryption
  (gradient pulled back with the inverse permutation).
* ``keys_known=False`` (default): the attacker holds the sub-model weights but
  not the keys, so gradients are taken as if the sub-models read plaintext
  directly. The resulting perturbation is then scrambled by the real key.

For the random ensemble, ``gradient_mode="stochastic"`` draws a fresh subset for
every gradient query; ``"full"`` differentiates the deterministic all-N average.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .ensemble import RandomEnsemble, average_selected, member_probs, probs_random, probs_simple
from .errors import GradientUnavailable, ShapeMismatch
from .model import SubModel, _forward_cache, backward, flatten, softmax
from .rngcore import RngStream, uniform_subset_masks
from .transform import ShuffleKey, backprop_through_encrypt, encrypt, encrypt_tagged


class Pipeline:
    name = "pipeline"
    randomized = False
    white_box = True

    def probs(self, x: np.ndarray, rng: Optional[RngStream] = None) -> np.ndarray:
        raise NotImplementedError

    def predict(self, x: np.ndarray, rng: Optional[RngStream] = None) -> np.ndarray:
        return self.probs(x, rng).argmax(axis=1)

    def loss_grad(self, x, labels, rng=None, target=None):
        raise GradientUnavailable(f"{self.name} does not expose gradients")

    def describe(self) -> dict:
        return {"name": self.name, "randomized": self.randomized}


def _loss_and_dprobs(pbar: np.ndarray, labels: np.ndarray, target: Optional[np.ndarray]):
    """Ascent objective on averaged probabilities and the class index it reads.

    Untargeted: ``-log pbar[y]``. Targeted: ``log pbar[t]``.
    """
    n = np.arange(len(labels))
    if target is None:
        cls, sign = labels, -1.0
    else:
        cls, sign = target, 1.0
    p = np.clip(pbar[n, cls], 1e-300, None)
    return sign * np.log(p), cls, sign / p


class ModelPipeline(Pipeline):
    """One sub-model; ``key=None`` is an undefended plain model."""

    def __init__(self, model: SubModel, key: Optional[ShuffleKey] = None,
                 keys_known: bool = True, name: Optional[str] = None):
        self.model, self.key, self.keys_known = model, key, keys_known
        self.name = name or ("baseline" if key is None else f"model[{key.key_id}]")

    def probs(self, x, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if self.key is not None:
            return softmax(self.model.logits_encrypted(encrypt_tagged(x, self.key)))
        return softmax(self._forward(x)[0])

    def _forward(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 4:
            raise ShapeMismatch(f"expected (B, H, W, C) images, got {z.shape}")
        return _forward_cache(self.model, flatten(z))

    def loss_grad(self, x, labels, rng=None, target=None):
        x = np.asarray(x, dtype=np.float64)
        through_key = self.key is not None and self.keys_known
        z = encrypt(x, self.key) if through_key else x
        logits, acts = self._forward(z)
        p = softmax(logits)
        loss, cls, scale = _loss_and_dprobs(p, np.asarray(labels), target)
        n = np.arange(len(cls))
        # d log p_c / d logits = onehot(c) - p
        dlogits = -p * p[n, cls][:, None]
        dlogits[n, cls] += p[n, cls]
        dlogits *= scale[:, None]
        _, gin = backward(self.model, acts, dlogits, need_params=False)
        grad = gin.reshape(x.shape)
        if through_key:
            grad = backprop_through_encrypt(grad, self.key)
        return loss, grad

    def describe(self):
        return {**super().describe(), "keys_known": self.keys_known if self.key is not None else None}


class EnsemblePipeline(Pipeline):
    """Simple (``randomized=False``) or random (``randomized=True``) ensemble."""

    def __init__(self, ensemble: RandomEnsemble, randomized: bool, keys_known: bool = False,
                 gradient_mode: str = "stochastic", name: Optional[str] = None):
        if gradient_mode not in ("stochastic", "full"):
            raise ValueError(f"unknown gradient_mode {gradient_mode!r}")
        self.ensemble, self.randomized = ensemble, randomized
        self.keys_known, self.gradient_mode = keys_known, gradient_mode
        self.name = name or ("random_ensemble" if randomized else "simple_ensemble")

    def probs(self, x, rng=None):
        if self.randomized:
            if rng is None:
                raise ValueError("random ensemble inference needs an explicit RngStream")
            return probs_random(self.ensemble, x, rng)
        return probs_simple(self.ensemble, x)

    def loss_grad(self, x, labels, rng=None, target=None):
        e = self.ensemble
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4:
            raise ShapeMismatch(f"expected (B, H, W, C) images, got {x.shape}")
        b = x.shape[0]
        if self.randomized and self.gradient_mode == "stochastic":
            if rng is None:
                raise ValueError("stochastic gradients need an explicit RngStream")
            mask = uniform_subset_masks(rng, e.n, e.selection_size, b)
        else:
            mask = np.ones((b, e.n), dtype=bool)
        caches, probs = [], []
        for key, m in e.members:
            z = encrypt(x, key) if self.keys_known else x
            logits, acts = _forward_cache(m, flatten(z))
            caches.append(acts)
            probs.append(softmax(logits))
        probs = np.stack(probs)
        pbar = average_selected(probs, mask)
        loss, cls, scale = _loss_and_dprobs(pbar, np.asarray(labels), target)
        n = np.arange(b)
        count = mask.sum(axis=1)
        grad = np.zeros_like(x)
        for i, (key, m) in enumerate(e.members):
            if not mask[:, i].any():
                continue
            p = probs[i]
            w = (mask[:, i] / count) * scale * p[n, cls]
            dlogits = -p * w[:, None]
            dlogits[n, cls] += w
            _, gin = backward(m, caches[i], dlogits, need_params=False)
            gin = gin.reshape(x.shape)
            grad += backprop_through_encrypt(gin, key) if self.keys_known else gin
        return loss, grad

    def describe(self):
        return {**super().describe(), "keys_known": self.keys_known,
                "gradient_mode": self.gradient_mode if self.randomized else "full",
                "n": self.ensemble.n, "s": self.ensemble.selection_size if self.randomized else self.ensemble.n}


class BlackBoxPipeline(Pipeline):
    """Wraps a bare ``probs(x, rng)`` callable; gradients are unavailable."""

    white_box = False

    def __init__(self, probs_fn, randomized: bool = False, name: str = "black_box"):
        self._probs_fn, self.randomized, self.name = probs_fn, randomized, name

    def probs(self, x, rng=None):
        return self._probs_fn(x, rng)


class QueryOracle:
    """Probability-only view of a pipeline that counts queried images.

    The pipeline is captured in a closure, so the oracle has no attribute
    through which gradients could be reached.
    """

    def __init__(self, pipeline: Pipeline, rng: Optional[RngStream] = None):
        def query(x):
            return pipeline.probs(x, rng)
        self._query = query
        self.randomized = pipeline.randomized
        self.queries = 0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self.queries += x.shape[0]
        return self._query(x)
