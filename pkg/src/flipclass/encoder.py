"""Tiny single-head transformer-style encoder with a cosine prototype head.

Inputs are flat vectors treated as one token each, so attention mixes the
rows of a mini-batch: queries and keys of a layer are ``batch x d_model``
matrices. This is what lets the teacher keys of a weak-view batch be aligned
with the student queries of the parallel strong-view batch.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import linalg
from .align import AlignConfig, AttentionSlice, teacher_update
from .errors import DomainError, NumericError, ShapeError

CHECKPOINT_VERSION = 1
BLOCK_PARAMS = ("W_Q", "W_K", "W_V", "W_O", "W_1", "W_2")


@dataclass
class EncoderConfig:
    d_in: int
    n_classes: int
    d_model: int = 32
    d_ff: int = 64
    n_blocks: int = 2
    layer_norm: bool = False


class EncoderParams:
    """Named parameter matrices plus the architecture they belong to.

    Names are ``W_in``, ``b{i}.W_Q`` ... ``b{i}.W_2`` for each block and
    ``prototypes`` (one unit-norm row per class slot).
    """

    def __init__(self, config: EncoderConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        self.arrays = {k: linalg.as_matrix(v) for k, v in arrays.items()}
        self._check_shapes()

    @classmethod
    def init(cls, config: EncoderConfig, stream: linalg.RngStream) -> "EncoderParams":
        d, f = config.d_model, config.d_ff
        arrays = {"W_in": linalg.rng_gaussian(stream, config.d_in, d, 0.0, 1.0 / math.sqrt(config.d_in))}
        for b in range(config.n_blocks):
            for name, shape in _block_shapes(d, f).items():
                arrays[f"b{b}.{name}"] = linalg.rng_gaussian(stream, *shape, 0.0, 1.0 / math.sqrt(shape[0]))
        protos = linalg.rng_gaussian(stream, config.n_classes, d, 0.0, 1.0)
        arrays["prototypes"] = linalg.row_l2_normalize(protos)
        return cls(config, arrays)

    @classmethod
    def zeros(cls, config: EncoderConfig) -> "EncoderParams":
        shapes = {"W_in": (config.d_in, config.d_model)}
        for b in range(config.n_blocks):
            for name, shape in _block_shapes(config.d_model, config.d_ff).items():
                shapes[f"b{b}.{name}"] = shape
        shapes["prototypes"] = (config.n_classes, config.d_model)
        return cls(config, {k: np.zeros(s) for k, s in shapes.items()})

    def _check_shapes(self):
        cfg = self.config
        expected = {"W_in": (cfg.d_in, cfg.d_model), "prototypes": (cfg.n_classes, cfg.d_model)}
        for b in range(cfg.n_blocks):
            for name, shape in _block_shapes(cfg.d_model, cfg.d_ff).items():
                expected[f"b{b}.{name}"] = shape
        if set(expected) != set(self.arrays):
            raise ShapeError(f"parameter names mismatch: {sorted(set(expected) ^ set(self.arrays))}")
        for k, shape in expected.items():
            if self.arrays[k].shape != shape:
                raise ShapeError(f"{k} has shape {self.arrays[k].shape}, expected {shape}")

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "EncoderParams":
        return EncoderParams(EncoderConfig(**asdict(self.config)), {k: v.copy() for k, v in self.arrays.items()})

    def renormalize_prototypes(self) -> None:
        self.arrays["prototypes"] = linalg.row_l2_normalize(self.arrays["prototypes"])

    def save(self, path) -> None:
        """Write an ``.npz`` checkpoint; the round trip is bitwise exact."""
        cfg = asdict(self.config)
        meta = np.array([CHECKPOINT_VERSION] + [int(cfg[k]) for k in _CFG_KEYS], dtype=np.int64)
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=meta, **self.arrays)

    @classmethod
    def load(cls, path) -> "EncoderParams":
        with np.load(Path(path)) as data:
            meta = data["__meta__"]
            if int(meta[0]) != CHECKPOINT_VERSION:
                raise DomainError(f"unsupported checkpoint version {int(meta[0])}")
            cfg = EncoderConfig(**{k: int(v) for k, v in zip(_CFG_KEYS, meta[1:])})
            cfg.layer_norm = bool(cfg.layer_norm)
            arrays = {k: data[k].copy() for k in data.files if k != "__meta__"}
        return cls(cfg, arrays)


_CFG_KEYS = ("d_in", "n_classes", "d_model", "d_ff", "n_blocks", "layer_norm")


def _block_shapes(d: int, f: int) -> dict[str, tuple[int, int]]:
    return {"W_Q": (d, d), "W_K": (d, d), "W_V": (d, d), "W_O": (d, d), "W_1": (d, f), "W_2": (f, d)}


@dataclass
class ForwardArtifacts:
    features: np.ndarray  # l2-normalised, batch x d_model
    logits: np.ndarray  # cosine scores against prototypes, batch x n_classes
    queries: list[np.ndarray]  # per layer, batch x d_model
    keys: list[np.ndarray]  # per layer, keys actually used by the attention
    tape: ad.Tape
    feature_var: ad.Var
    logit_var: ad.Var
    param_vars: dict[str, ad.Var] = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.queries)


KeyHook = Callable[[int, np.ndarray], np.ndarray]


def forward(batch, params: EncoderParams, tape: ad.Tape | None = None, key_hook: KeyHook | None = None,
            trainable: bool = True) -> ForwardArtifacts:
    """Run the encoder on ``batch`` (rows are samples).

    With ``tape`` given and ``trainable`` true the parameters are recorded as
    differentiable leaves (see ``param_vars``); otherwise everything is a
    constant. ``key_hook(layer, K)`` may replace a layer's keys before the
    attention is formed.
    """
    x = linalg.as_matrix(batch)
    cfg = params.config
    if x.shape[1] != cfg.d_in:
        raise ShapeError(f"batch has {x.shape[1]} columns, encoder expects {cfg.d_in}")
    if tape is None:
        tape, trainable = ad.Tape(), False
    leaf = tape.param if trainable else tape.const
    pv = {name: leaf(value) for name, value in params.arrays.items()}

    inv_sqrt_d = 1.0 / math.sqrt(cfg.d_model)
    h = tape.const(x) @ pv["W_in"]
    queries, keys = [], []
    for b in range(cfg.n_blocks):
        p = {name: pv[f"b{b}.{name}"] for name in BLOCK_PARAMS}
        hn = ad.layer_norm(h) if cfg.layer_norm else h
        q = hn @ p["W_Q"]
        k = hn @ p["W_K"]
        v = hn @ p["W_V"]
        if key_hook is not None:
            k_new = key_hook(b, k.value)
            if k_new is not k.value:
                k = tape.const(k_new) if not k.requires_grad else k + tape.const(k_new - k.value)
        queries.append(q.value)
        keys.append(k.value)
        attn = ad.row_softmax((q @ k.T) * inv_sqrt_d) @ v
        h = h + attn @ p["W_O"]
        hn = ad.layer_norm(h) if cfg.layer_norm else h
        h = h + ad.gelu(hn @ p["W_1"]) @ p["W_2"]
    try:
        z = ad.row_l2_normalize(h)
    except DomainError as exc:
        raise NumericError("encoder produced a zero feature vector") from exc
    logits = z @ pv["prototypes"].T
    return ForwardArtifacts(z.value, logits.value, queries, keys, tape, z, logits, pv if trainable else {})


def classify(z, prototypes, temperature: float) -> np.ndarray:
    """Row-wise ``softmax(z prototypes^T / temperature)``."""
    if not temperature > 0:
        raise DomainError("temperature must be positive")
    return linalg.row_softmax(linalg.matmul(z, linalg.transpose(prototypes)) / temperature)


def forward_teacher_aligned(teacher_batch, student: ForwardArtifacts, params: EncoderParams,
                            cfg: AlignConfig) -> ForwardArtifacts:
    """Teacher forward whose keys at ``cfg.target_layers`` take one update step toward
    the student queries of the same layer. Nothing is recorded for gradients."""
    teacher_batch = linalg.as_matrix(teacher_batch)
    if teacher_batch.shape[0] != student.features.shape[0]:
        raise ShapeError("teacher and student batches must have the same rows")
    if not cfg.target_layers or cfg.gamma_update == 0:
        return forward(teacher_batch, params)
    cfg.validate_layers(params.config.n_blocks)
    targets = set(cfg.target_layers)

    def hook(layer, K):
        if layer not in targets:
            return K
        W_K = params[f"b{layer}.W_K"]
        return teacher_update(AttentionSlice(student.queries[layer], K, W_K), cfg)

    return forward(teacher_batch, params, key_hook=hook)
