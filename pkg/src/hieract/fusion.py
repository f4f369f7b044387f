"""Attention-weighted fusion of per-level probability vectors.

Each level's distribution is encoded by its own linear + ReLU layer into a
shared hidden space; a single attention vector scores each encoding, the
softmax-weighted sum goes through a one-hidden-layer MLP and a linear
classifier over the fine labels.  Gradients are written out by hand and
checked against finite differences in the test suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, Divergence, ShapeMismatch
from .hierarchy import LabelHierarchy

CHECKPOINT_FORMAT = "hieract-fusion-v1"


@dataclass
class FusionParams:
    enc_W: list[np.ndarray]  # (H, |L_i|) per level
    enc_b: list[np.ndarray]  # (H,)
    att_w: np.ndarray  # (H,)
    mlp_W: np.ndarray  # (H, H)
    mlp_b: np.ndarray  # (H,)
    cls_W: np.ndarray  # (|L_n|, H)
    cls_b: np.ndarray  # (|L_n|,)

    @property
    def hidden_dim(self) -> int:
        return self.att_w.shape[0]

    @property
    def level_sizes(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.enc_W)

    def tensors(self) -> list[np.ndarray]:
        """All parameter arrays in a fixed order (used for flattening)."""
        out = []
        for w, b in zip(self.enc_W, self.enc_b):
            out += [w, b]
        return out + [self.att_w, self.mlp_W, self.mlp_b, self.cls_W, self.cls_b]

    def names(self) -> list[str]:
        out = []
        for i in range(len(self.enc_W)):
            out += [f"enc_W{i}", f"enc_b{i}"]
        return out + ["att_w", "mlp_W", "mlp_b", "cls_W", "cls_b"]

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def with_flat(self, vec: np.ndarray) -> "FusionParams":
        arrays = []
        k = 0
        for t in self.tensors():
            arrays.append(np.array(vec[k : k + t.size], dtype=np.float64).reshape(t.shape))
            k += t.size
        if k != vec.size:
            raise ShapeMismatch(f"flat vector has {vec.size} entries, expected {k}")
        return _from_tensors(arrays, len(self.enc_W))

    def copy(self) -> "FusionParams":
        return self.with_flat(self.flat())


def _from_tensors(arrays: list[np.ndarray], num_levels: int) -> FusionParams:
    enc = arrays[: 2 * num_levels]
    att_w, mlp_W, mlp_b, cls_W, cls_b = arrays[2 * num_levels :]
    return FusionParams(list(enc[0::2]), list(enc[1::2]), att_w, mlp_W, mlp_b, cls_W, cls_b)


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def init_params(level_sizes: Sequence[int], hidden_dim: int = 64, seed: int = 0) -> FusionParams:
    rng = np.random.default_rng(seed)
    H = hidden_dim
    return FusionParams(
        enc_W=[_glorot(rng, H, s) for s in level_sizes],
        enc_b=[np.zeros(H) for _ in level_sizes],
        att_w=_glorot(rng, 1, H)[0],
        mlp_W=_glorot(rng, H, H),
        mlp_b=np.zeros(H),
        cls_W=_glorot(rng, level_sizes[-1], H),
        cls_b=np.zeros(level_sizes[-1]),
    )


@dataclass(frozen=True)
class FusionOutput:
    per_level_weights: np.ndarray  # (B, L)
    fused_hidden: np.ndarray  # (B, H)
    fine_distribution: np.ndarray  # (B, |L_n|)


@dataclass
class _Cache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    enc: list[np.ndarray]
    alpha: np.ndarray
    fused: np.ndarray
    mlp_pre: np.ndarray
    mlp_out: np.ndarray
    probs: np.ndarray


def _softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _as_batch(params: FusionParams, per_level) -> list[np.ndarray]:
    if len(per_level) != len(params.enc_W):
        raise ShapeMismatch(f"expected {len(params.enc_W)} levels, got {len(per_level)}")
    batch = []
    for i, (p, w) in enumerate(zip(per_level, params.enc_W)):
        p = np.asarray(p, dtype=np.float64)
        if p.ndim == 1:
            p = p[None, :]
        if p.ndim != 2 or p.shape[1] != w.shape[1]:
            raise ShapeMismatch(f"level {i}: expected width {w.shape[1]}, got shape {p.shape}")
        batch.append(p)
    if len({p.shape[0] for p in batch}) != 1:
        raise ShapeMismatch("levels disagree on batch size")
    return batch


def _forward(params: FusionParams, batch: list[np.ndarray]) -> _Cache:
    pre = [p @ W.T + b for p, W, b in zip(batch, params.enc_W, params.enc_b)]
    enc = [np.maximum(z, 0.0) for z in pre]
    logits = np.stack([h @ params.att_w for h in enc], axis=1)
    alpha = _softmax(logits, axis=1)
    fused = sum(alpha[:, i : i + 1] * h for i, h in enumerate(enc))
    mlp_pre = fused @ params.mlp_W.T + params.mlp_b
    mlp_out = np.maximum(mlp_pre, 0.0)
    probs = _softmax(mlp_out @ params.cls_W.T + params.cls_b, axis=1)
    return _Cache(batch, pre, enc, alpha, fused, mlp_pre, mlp_out, probs)


def fusion_forward(params: FusionParams, per_level) -> FusionOutput:
    """Fuse one point (1-D vectors) or a batch (``(B, |L_i|)`` arrays).

    Outputs always carry a leading batch axis.
    """
    c = _forward(params, _as_batch(params, per_level))
    return FusionOutput(c.alpha, c.fused, c.probs)


def _backward(params: FusionParams, c: _Cache, targets: np.ndarray) -> tuple[float, FusionParams]:
    B = c.probs.shape[0]
    with np.errstate(divide="ignore"):
        loss = -np.mean(np.log(c.probs[np.arange(B), targets]))
    d_logits = c.probs.copy()
    d_logits[np.arange(B), targets] -= 1.0
    d_logits /= B

    g_cls_W = d_logits.T @ c.mlp_out
    g_cls_b = d_logits.sum(axis=0)
    d_mlp_pre = (d_logits @ params.cls_W) * (c.mlp_pre > 0)
    g_mlp_W = d_mlp_pre.T @ c.fused
    g_mlp_b = d_mlp_pre.sum(axis=0)
    d_fused = d_mlp_pre @ params.mlp_W

    # through the attention softmax
    d_alpha = np.stack([(d_fused * h).sum(axis=1) for h in c.enc], axis=1)
    d_att_logit = c.alpha * (d_alpha - (c.alpha * d_alpha).sum(axis=1, keepdims=True))
    g_att_w = np.zeros_like(params.att_w)
    g_enc_W, g_enc_b = [], []
    for i, h in enumerate(c.enc):
        g_att_w += d_att_logit[:, i] @ h
        d_h = c.alpha[:, i : i + 1] * d_fused + d_att_logit[:, i : i + 1] * params.att_w
        d_pre = d_h * (c.pre[i] > 0)
        g_enc_W.append(d_pre.T @ c.inputs[i])
        g_enc_b.append(d_pre.sum(axis=0))
    grads = FusionParams(g_enc_W, g_enc_b, g_att_w, g_mlp_W, g_mlp_b, g_cls_W, g_cls_b)
    return float(loss), grads


def _check_targets(params: FusionParams, targets, batch_size: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if t.shape != (batch_size,):
        raise ShapeMismatch(f"{t.size} targets for a batch of {batch_size}")
    if np.any(t < 0) or np.any(t >= params.cls_W.shape[0]):
        raise DataError("target label out of range")
    return t


def fusion_backward(params: FusionParams, per_level, target) -> tuple[float, FusionParams]:
    """Mean cross-entropy over the batch and its exact gradient for every tensor."""
    batch = _as_batch(params, per_level)
    t = _check_targets(params, target, batch[0].shape[0])
    return _backward(params, _forward(params, batch), t)


@dataclass
class TrainResult:
    params: FusionParams
    losses: list[float]


def fusion_train(
    dataset: tuple[Sequence[np.ndarray], np.ndarray],
    epochs: int = 100,
    lr: float = 0.1,
    seed: int = 0,
    hidden_dim: int = 64,
    batch_size: int = 32,
    params: FusionParams | None = None,
) -> TrainResult:
    """Mini-batch gradient descent.

    ``dataset`` is ``(per_level, labels)`` with ``per_level[i]`` of shape
    ``(N, |L_i|)``.  The same seed drives initialisation and shuffling.
    """
    per_level, labels = dataset
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise DataError("training set is empty")
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_params([np.shape(p)[1] for p in per_level], hidden_dim, seed)
    else:
        params = params.copy()
    batch_all = _as_batch(params, per_level)
    _check_targets(params, labels, batch_all[0].shape[0])

    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, grads = _backward(params, _forward(params, [p[idx] for p in batch_all]), labels[idx])
            if not np.isfinite(loss):
                raise Divergence(f"non-finite loss at epoch {epoch}", epoch)
            total += loss * len(idx)
            if lr != 0.0:
                for t, g in zip(params.tensors(), grads.tensors()):
                    t -= lr * g
        losses.append(total / n)
        if not np.isfinite(params.flat()).all():
            raise Divergence(f"non-finite parameters at epoch {epoch}", epoch)
    return TrainResult(params, losses)


def predict(params: FusionParams, per_level) -> np.ndarray:
    return fusion_forward(params, per_level).fine_distribution.argmax(axis=1)


def expand_to_fine(h: LabelHierarchy, per_level) -> list[np.ndarray]:
    """Copy every node's probability onto each of its leaves."""
    out = []
    for i, p in enumerate(per_level):
        p = np.asarray(p, dtype=np.float64)
        if p.shape[-1] != h.level_sizes[i]:
            raise ShapeMismatch(f"level {i}: expected width {h.level_sizes[i]}, got {p.shape[-1]}")
        out.append(p[..., h.fine_to_level(i)])
    return out


def fuse_baseline(
    h: LabelHierarchy,
    per_level,
    mode: str = "simple-add",
    weights: Sequence[float] | None = None,
) -> np.ndarray:
    """Non-learned fusion: leaf-expanded levels summed (optionally weighted), renormalized."""
    if len(per_level) != h.num_levels:
        raise ShapeMismatch(f"expected {h.num_levels} levels, got {len(per_level)}")
    expanded = expand_to_fine(h, per_level)
    if mode == "simple-add":
        w = np.ones(h.num_levels)
    elif mode == "weighted-add":
        w = default_level_weights(h.num_levels) if weights is None else np.asarray(weights, float)
        if w.shape != (h.num_levels,):
            raise ShapeMismatch(f"need {h.num_levels} level weights, got {w.shape}")
    else:
        raise ValueError(f"unknown baseline mode {mode!r}")
    total = sum(wi * e for wi, e in zip(w, expanded))
    return total / total.sum(axis=-1, keepdims=True)


def default_level_weights(num_levels: int) -> np.ndarray:
    """Fixed weights growing linearly toward the fine level, summing to 1."""
    w = np.arange(1, num_levels + 1, dtype=np.float64)
    return w / w.sum()


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(params: FusionParams, path: str | Path, hierarchy_digest: str = "") -> None:
    """JSON header line, then every tensor as little-endian float64."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "hierarchy": hierarchy_digest,
        "hidden_dim": params.hidden_dim,
        "num_levels": len(params.enc_W),
        "names": params.names(),
        "shapes": [list(t.shape) for t in params.tensors()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    flat = params.flat().astype("<f8")
    Path(path).write_bytes(blob + flat.tobytes())


def load_checkpoint(path: str | Path, hierarchy_digest: str | None = None) -> FusionParams:
    raw = Path(path).read_bytes()
    cut = raw.find(b"\n")
    if cut < 0:
        raise DataError("checkpoint has no header line")
    try:
        header = json.loads(raw[:cut].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"bad checkpoint header: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"unsupported checkpoint format {header.get('format')!r}")
    if hierarchy_digest is not None and header.get("hierarchy") != hierarchy_digest:
        raise DataError("checkpoint was trained for a different hierarchy")
    body = raw[cut + 1 :]
    sizes = [int(np.prod(s)) for s in header["shapes"]]
    if len(body) != 8 * sum(sizes):
        raise DataError(f"checkpoint body has {len(body)} bytes, expected {8 * sum(sizes)}")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    arrays, k = [], 0
    for shape, size in zip(header["shapes"], sizes):
        arrays.append(values[k : k + size].reshape(shape).copy())
        k += size
    return _from_tensors(arrays, header["num_levels"])
