"""Projection/cluster head over fixed embeddings, trained by plain SGD.

The head is embedding -> hidden (tanh) -> projection, length-normalized to
give z, followed by a linear cluster head on z producing class logits. All
gradients are computed analytically; updates use gradient-norm clipping and
decoupled weight decay on the weight matrices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .bundle import DatasetBundle
from .losses import ce_loss, cwcl_loss, iwcl_loss, positive_counts, total_loss, LossBreakdown
from .rot import PseudoLabelSet


class NonFiniteLossError(RuntimeError):
    code = "NONFINITE_LOSS"


@dataclass
class TrainConfig:
    tau: float = 0.07
    omega: float = 0.5
    learning_rate: float = 2e-3
    epochs: int = 4
    batch_size: int = 512
    aug_sigma: float = 0.1
    seed: int = 0
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    d_hidden: int = 256
    d_proj: int = 128
    # "adamw" scales each parameter's step individually, which keeps the
    # cross-entropy head training even when the contrastive sums dominate
    optimizer: str = "adamw"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not 0 <= self.omega <= 1:
            raise ValueError("omega must be in [0, 1]")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError("optimizer must be 'sgd' or 'adamw'")


@dataclass
class HeadParameters:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wc: np.ndarray
    bc: np.ndarray

    def copy(self) -> "HeadParameters":
        return HeadParameters(*(getattr(self, f).copy() for f in _PARAM_FIELDS))


_PARAM_FIELDS = ("w1", "b1", "w2", "b2", "wc", "bc")
_WEIGHT_FIELDS = ("w1", "w2", "wc")


def init_head(dim: int, d_hidden: int, d_proj: int, k: int, rng: np.random.Generator) -> HeadParameters:
    """Uniform(-s, s) init with s = 1/sqrt(fan_in) per layer; deterministic per rng."""

    def layer(fan_in, fan_out):
        s = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-s, s, size=(fan_in, fan_out))
        b = rng.uniform(-s, s, size=fan_out)
        return w, b

    w1, b1 = layer(dim, d_hidden)
    w2, b2 = layer(d_hidden, d_proj)
    wc, bc = layer(d_proj, k)
    return HeadParameters(w1, b1, w2, b2, wc, bc)


def _softmax(logits):
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    return e / e.sum(axis=1, keepdims=True)


def _forward_cache(head: HeadParameters, x):
    x = np.asarray(x, dtype=np.float64)
    a1 = x @ head.w1 + head.b1
    r = np.tanh(a1)
    a2 = r @ head.w2 + head.b2
    norms = np.maximum(np.linalg.norm(a2, axis=1, keepdims=True), 1e-12)
    z = a2 / norms
    logits = z @ head.wc + head.bc
    return {"x": x, "r": r, "a2": a2, "norms": norms, "z": z, "logits": logits}


def forward(head: HeadParameters, x):
    """(Z, P): unit-norm projections and row-stochastic class probabilities."""
    cache = _forward_cache(head, x)
    return cache["z"], _softmax(cache["logits"])


def _backward(head: HeadParameters, cache, grad_z, grad_logits, grads):
    """Accumulate parameter gradients for one view into ``grads``."""
    z = cache["z"]
    if grad_logits is not None:
        grads["wc"] += z.T @ grad_logits
        grads["bc"] += grad_logits.sum(axis=0)
        grad_z = grad_z + grad_logits @ head.wc.T
    # through the length normalization z = a2 / ||a2||
    da2 = (grad_z - z * (z * grad_z).sum(axis=1, keepdims=True)) / cache["norms"]
    r = cache["r"]
    grads["w2"] += r.T @ da2
    grads["b2"] += da2.sum(axis=0)
    dr = da2 @ head.w2.T
    da1 = dr * (1.0 - r * r)
    grads["w1"] += cache["x"].T @ da1
    grads["b1"] += da1.sum(axis=0)


def batch_loss_and_grads(head: HeadParameters, x, x_aug, pseudo: PseudoLabelSet, cfg: TrainConfig):
    """Combined batch objective and its gradient w.r.t. every head parameter."""
    base = _forward_cache(head, x)
    aug = _forward_cache(head, x_aug)
    p = _softmax(base["logits"])

    counts = positive_counts(pseudo)
    coef = 1.0 / (1.0 + counts)
    _, cwcl_vals, grad_z_c = cwcl_loss(base["z"], pseudo, cfg.tau, weights=cfg.omega * coef)
    _, iwcl_vals, grad_z_i, grad_zb = iwcl_loss(
        base["z"], aug["z"], cfg.tau, weights=cfg.omega * coef
    )
    ce_val, grad_logits = ce_loss(p, pseudo)

    breakdown = total_loss(cwcl_vals, iwcl_vals, counts, ce_val, cfg.omega)
    grads = {f: np.zeros_like(getattr(head, f)) for f in _PARAM_FIELDS}
    _backward(head, base, grad_z_c + grad_z_i, (1.0 - cfg.omega) * grad_logits, grads)
    _backward(head, aug, grad_zb, None, grads)
    return breakdown, grads


@dataclass
class OptState:
    """First/second moment accumulators threaded across update steps."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def fresh(cls, head: HeadParameters) -> "OptState":
        return cls(
            m={f: np.zeros_like(getattr(head, f)) for f in _PARAM_FIELDS},
            v={f: np.zeros_like(getattr(head, f)) for f in _PARAM_FIELDS},
        )


def _update_step(head: HeadParameters, grads, cfg: TrainConfig, state: OptState) -> HeadParameters:
    flat = np.concatenate([grads[f].ravel() for f in _PARAM_FIELDS])
    gnorm = float(np.linalg.norm(flat))
    scale = 1.0 if gnorm <= cfg.clip_norm or gnorm == 0 else cfg.clip_norm / gnorm
    new = {}
    if cfg.optimizer == "adamw":
        b1, b2, eps = 0.9, 0.999, 1e-8
        state.t += 1
        for f in _PARAM_FIELDS:
            g = scale * grads[f]
            state.m[f] = b1 * state.m[f] + (1 - b1) * g
            state.v[f] = b2 * state.v[f] + (1 - b2) * g * g
            m_hat = state.m[f] / (1 - b1 ** state.t)
            v_hat = state.v[f] / (1 - b2 ** state.t)
            value = getattr(head, f) - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
            if cfg.weight_decay and f in _WEIGHT_FIELDS:
                value = value - cfg.learning_rate * cfg.weight_decay * getattr(head, f)
            new[f] = value
    else:
        for f in _PARAM_FIELDS:
            value = getattr(head, f) - cfg.learning_rate * scale * grads[f]
            if cfg.weight_decay and f in _WEIGHT_FIELDS:
                value = value - cfg.learning_rate * cfg.weight_decay * getattr(head, f)
            new[f] = value
    return HeadParameters(**new)


def augment_embeddings(x, sigma: float, rng: np.random.Generator):
    """Gaussian embedding-space stand-in for token-level augmentation."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return x + sigma * rng.standard_normal(x.shape)


def _pseudo_slice(pseudo: PseudoLabelSet, idx) -> PseudoLabelSet:
    return PseudoLabelSet(
        soft=pseudo.soft[idx],
        hard=pseudo.hard[idx],
        confidence=pseudo.confidence[idx],
        clean=pseudo.clean[idx],
        loss=None if pseudo.loss is None else pseudo.loss[idx],
    )


def train_epoch(head: HeadParameters, bundle: DatasetBundle, pseudo: PseudoLabelSet,
                cfg: TrainConfig, epoch: int = 0, opt_state: OptState | None = None):
    """One pass over the training rows in shuffled batches.

    ``pseudo`` is aligned with ``bundle.train_idx`` order. Optimizer moments
    are threaded through ``opt_state`` when the caller wants them to persist
    across epochs. Returns the updated head and the mean loss breakdown.
    """
    rows = bundle.train_idx
    x_all = bundle.embeddings[rows].astype(np.float64)
    aug_all = None if bundle.augmented is None else bundle.augmented[rows].astype(np.float64)
    state = opt_state if opt_state is not None else OptState.fresh(head)

    rng = np.random.default_rng((cfg.seed, epoch, 0x7E57))
    order = rng.permutation(len(rows))
    sums = np.zeros(4)
    n_batches = 0
    for start in range(0, len(order), cfg.batch_size):
        batch = order[start : start + cfg.batch_size]
        x = x_all[batch]
        x_aug = aug_all[batch] if aug_all is not None else augment_embeddings(x, cfg.aug_sigma, rng)
        breakdown, grads = batch_loss_and_grads(head, x, x_aug, _pseudo_slice(pseudo, batch), cfg)
        if not np.isfinite(breakdown.l_total):
            raise NonFiniteLossError(
                f"epoch {epoch}, batch {n_batches}: total loss {breakdown.l_total}"
            )
        head = _update_step(head, grads, cfg, state)
        sums += [breakdown.l_cwcl, breakdown.l_iwcl, breakdown.l_ce, breakdown.l_total]
        n_batches += 1
    if n_batches:
        sums /= n_batches
    return head, LossBreakdown(*sums)


def supervised_warmup(head: HeadParameters, bundle: DatasetBundle, cfg: TrainConfig,
                      epochs: int) -> HeadParameters:
    """Cross-entropy on the labeled rows' true labels; zero epochs is identity."""
    rows = bundle.labeled_idx
    if rows.size == 0:
        raise ValueError("warm-up needs at least one labeled row")
    labels = bundle.training_labels()[rows]
    x_all = bundle.embeddings[rows].astype(np.float64)
    k = head.wc.shape[1]
    state = OptState.fresh(head)
    for epoch in range(epochs):
        rng = np.random.default_rng((cfg.seed, epoch, 0xA3))
        order = rng.permutation(len(rows))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            cache = _forward_cache(head, x_all[batch])
            p = _softmax(cache["logits"])
            pseudo = PseudoLabelSet(
                soft=np.zeros((len(batch), k)),
                hard=labels[batch],
                confidence=np.ones(len(batch)),
                clean=np.ones(len(batch), dtype=bool),
            )
            loss, grad_logits = ce_loss(p, pseudo)
            if not np.isfinite(loss):
                raise NonFiniteLossError(f"warm-up epoch {epoch}: loss {loss}")
            grads = {f: np.zeros_like(getattr(head, f)) for f in _PARAM_FIELDS}
            _backward(head, cache, np.zeros_like(cache["z"]), grad_logits, grads)
            head = _update_step(head, grads, cfg, state)
    return head


def save_head(head: HeadParameters, path) -> None:
    """Checkpoint: manifest JSON plus one float32 little-endian blob."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    shapes = {f: list(getattr(head, f).shape) for f in _PARAM_FIELDS}
    (root / "head.json").write_text(
        json.dumps({"format_version": 1, "order": list(_PARAM_FIELDS), "shapes": shapes},
                   sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    blob = np.concatenate([getattr(head, f).ravel() for f in _PARAM_FIELDS])
    blob.astype("<f4").tofile(root / "head.bin")


def load_head(path) -> HeadParameters:
    root = Path(path)
    meta = json.loads((root / "head.json").read_text(encoding="utf-8"))
    blob = np.fromfile(root / "head.bin", dtype="<f4").astype(np.float64)
    arrays = {}
    offset = 0
    for f in meta["order"]:
        shape = tuple(meta["shapes"][f])
        size = int(np.prod(shape))
        arrays[f] = blob[offset : offset + size].reshape(shape)
        offset += size
    return HeadParameters(**arrays)
