"""Ensembles of key-bound sub-models with simple (all N) and random (S of N) inference."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import EnsembleError, FormatError, ShapeMismatch
from .model import SubModel, TrainConfig, load_model, save_model, softmax, train_submodel
from .rngcore import RngStream, uniform_subset, uniform_subset_masks
from .transform import ShuffleKey, encrypt_tagged, gen_key

MANIFEST_FORMAT = "keyens-ensemble"
MANIFEST_VERSION = 1
MIN_MEMBERS = 4
MIN_SELECTION = 3


@dataclass(frozen=True)
class Prediction:
    probs: np.ndarray
    argmax_class: int
    selected_member_indices: tuple[int, ...]


@dataclass
class RandomEnsemble:
    members: list[tuple[ShuffleKey, SubModel]]
    selection_size: int
    rng_seed: int = 0

    def __post_init__(self):
        validate_members(self.members, self.selection_size)

    @property
    def n(self) -> int:
        return len(self.members)

    @property
    def num_classes(self) -> int:
        return self.members[0][1].num_classes

    def selection_stream(self) -> RngStream:
        return RngStream(self.rng_seed)


def validate_members(members, s: int, min_members: int = MIN_MEMBERS) -> None:
    n = len(members)
    if n < min_members or not MIN_SELECTION <= s <= n:
        raise EnsembleError(f"need N >= {min_members} and {MIN_SELECTION} <= S <= N, got N={n}, S={s}")
    seeds = [k.seed for k, _ in members]
    if len(set(seeds)) != n:
        raise EnsembleError("member keys must have distinct seeds")
    for i, (k, m) in enumerate(members):
        if m.key_id != k.key_id:
            raise EnsembleError(f"member {i}: model bound to {m.key_id!r}, paired key is {k.key_id!r}")
    dims = {(m.layer_dims[0], m.num_classes) for _, m in members}
    if len(dims) != 1:
        raise EnsembleError("members disagree on input size or class count")


def build_ensemble(dataset, n: int, s: int, seeds: Sequence[int], cfg: TrainConfig,
                   block_size: int = 4, progress=None) -> RandomEnsemble:
    """Train one sub-model per key seed, each on the dataset encrypted with its own key."""
    seeds = [int(x) for x in seeds]
    if n < MIN_MEMBERS or not MIN_SELECTION <= s <= n:
        raise EnsembleError(f"need N >= {MIN_MEMBERS} and {MIN_SELECTION} <= S <= N, got N={n}, S={s}")
    if len(seeds) != n:
        raise EnsembleError(f"expected {n} key seeds, got {len(seeds)}")
    if len(set(seeds)) != n:
        raise EnsembleError("duplicate key seeds")
    channels = dataset.images.shape[-1]
    root = RngStream(cfg.rng_seed)
    members = []
    for i, seed in enumerate(seeds):
        key = gen_key(seed, block_size, channels)
        member_cfg = TrainConfig(cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.momentum,
                                 root.derive(f"member{i}").next_u64(), cfg.hidden)
        cb = None
        if progress is not None:
            cb = lambda rec, i=i: progress({"member": i, **rec})
        members.append((key, train_submodel(dataset, key, member_cfg, cb)))
    return RandomEnsemble(members, s, root.derive("selection").next_u64())


def member_probs(e: RandomEnsemble, images: np.ndarray) -> np.ndarray:
    """Softmax of every member on its own key's ciphertext: shape (N, B, K).

    Each member only ever sees images encrypted with its paired key; the
    ciphertext tag is checked by :meth:`SubModel.logits_encrypted`.
    """
    images = np.asarray(images, dtype=np.float64)
    d0 = e.members[0][1].input_dim
    if images.ndim != 4 or int(np.prod(images.shape[1:])) != d0:
        raise ShapeMismatch(f"expected (B, H, W, C) images with H*W*C = {d0}, got {images.shape}")
    return np.stack([softmax(m.logits_encrypted(encrypt_tagged(images, k))) for k, m in e.members])


def average_selected(probs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean of the selected members' probability vectors.

    ``probs`` is (N, B, K) and ``mask`` (B, N). Simple and random inference both
    go through here so that selecting all members reproduces the simple
    ensemble bit for bit.
    """
    weights = mask.T[:, :, None].astype(np.float64)
    return (probs * weights).sum(axis=0) / mask.sum(axis=1)[:, None]


def probs_simple(e: RandomEnsemble, images: np.ndarray) -> np.ndarray:
    p = member_probs(e, images)
    return average_selected(p, np.ones((p.shape[1], e.n), dtype=bool))


def probs_random(e: RandomEnsemble, images: np.ndarray, rng: RngStream, return_mask: bool = False):
    """Batched random inference: a fresh S-subset per image."""
    p = member_probs(e, images)
    mask = uniform_subset_masks(rng, e.n, e.selection_size, p.shape[1])
    out = average_selected(p, mask)
    return (out, mask) if return_mask else out


def _as_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeMismatch(f"expected a single (H, W, C) image, got shape {x.shape}")
    return x[None]


def _prediction(probs: np.ndarray, selected) -> Prediction:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return Prediction(probs, int(np.argmax(probs)), tuple(int(i) for i in selected))


def predict_random(e: RandomEnsemble, x: np.ndarray, rng: RngStream) -> Prediction:
    p = member_probs(e, _as_batch(x))
    subset = uniform_subset(rng, e.n, e.selection_size)
    mask = np.zeros((1, e.n), dtype=bool)
    mask[0, subset] = True
    return _prediction(average_selected(p, mask)[0], subset)


def predict_simple(e: RandomEnsemble, x: np.ndarray) -> Prediction:
    return _prediction(probs_simple(e, _as_batch(x))[0], range(e.n))


def predict_single(e: RandomEnsemble, member_index: int, x: np.ndarray) -> Prediction:
    if not 0 <= member_index < e.n:
        raise IndexError(f"member index {member_index} out of range for N={e.n}")
    key, m = e.members[member_index]
    logits = m.logits_encrypted(encrypt_tagged(_as_batch(x), key))
    return _prediction(softmax(logits)[0], (member_index,))


def save_ensemble(e: RandomEnsemble, directory, manifest_name: str = "manifest.json") -> Path:
    """Write one checkpoint per member plus a JSON manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (key, m) in enumerate(e.members):
        name = f"member{i}.ksmd"
        save_model(m, directory / name)
        entries.append({"seed": key.seed, "block_size": key.block_size,
                        "channels": key.channels, "checkpoint": name})
    manifest = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "n": e.n,
                "s": e.selection_size, "rng_seed": e.rng_seed, "members": entries}
    path = directory / manifest_name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_ensemble(path) -> RandomEnsemble:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: not an ensemble manifest")
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {manifest.get('version')}")
    members = []
    for entry in manifest["members"]:
        key = gen_key(int(entry["seed"]), int(entry["block_size"]), int(entry["channels"]))
        members.append((key, load_model(path.parent / entry["checkpoint"])))
    if len(members) != manifest["n"]:
        raise EnsembleError(f"{path}: manifest lists {len(members)} members but n={manifest['n']}")
    return RandomEnsemble(members, int(manifest["s"]), int(manifest.get("rng_seed", 0)))
