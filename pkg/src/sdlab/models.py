"""Trainable target language model and its feature-level draft head.

The target is a fixed-window MLP over character embeddings: the hidden
activation ``f`` before the LM head doubles as the per-position feature
vector that the draft head and the length predictor consume. The draft
head maps (token embedding, feature) to the next feature and reuses the
target's embedding table and LM head, so its token distributions live on
the same vocabulary.

All forward/backward passes are written out: gradients are checked
against finite differences in the test suite, and training is plain
minibatch gradient descent with an optional cosine-decayed learning
rate. With a fixed seed every training run is bit-reproducible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import Rng
from .tokens import argmax_dist, sample

_MAGIC = b"SDLB1"
_KIND_TARGET = 0
_KIND_DRAFT = 1


@dataclass
class ModelDims:
    window: int = 8
    d_embed: int = 32
    d_feature: int = 64


@dataclass
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int
    seed: int
    schedule: str = "cosine"  # "cosine" or "constant"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("training hyperparameters must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class TargetLM:
    vocab_size: int
    window: int
    d_embed: int
    d_feature: int
    emb: np.ndarray       # (V, d_e)
    w_hidden: np.ndarray  # (d_f, window*d_e)
    b_hidden: np.ndarray  # (d_f,)
    w_head: np.ndarray    # (V, d_f)
    b_head: np.ndarray    # (V,)

    @property
    def pad_id(self) -> int:
        return self.vocab_size

    def params(self) -> dict[str, np.ndarray]:
        return {
            "emb": self.emb,
            "w_hidden": self.w_hidden,
            "b_hidden": self.b_hidden,
            "w_head": self.w_head,
            "b_head": self.b_head,
        }


@dataclass
class DraftHead:
    lm: TargetLM           # embedding and LM head shared by reference
    w_step: np.ndarray     # (d_f, d_e + d_f)
    b_step: np.ndarray     # (d_f,)

    def params(self) -> dict[str, np.ndarray]:
        return {"w_step": self.w_step, "b_step": self.b_step}


def init_target_lm(vocab_size: int, dims: ModelDims, seed: int) -> TargetLM:
    rng = Rng(seed)
    w, de, df = dims.window, dims.d_embed, dims.d_feature

    def glorot(rows, cols):
        a = np.sqrt(6.0 / (rows + cols))
        return rng.uniform_array((rows, cols), -a, a)

    return TargetLM(
        vocab_size=vocab_size,
        window=w,
        d_embed=de,
        d_feature=df,
        emb=rng.uniform_array((vocab_size, de), -1.0, 1.0) / np.sqrt(de),
        w_hidden=glorot(df, w * de),
        b_hidden=np.zeros(df),
        w_head=glorot(vocab_size, df),
        b_head=np.zeros(vocab_size),
    )


def init_draft_head(lm: TargetLM, seed: int) -> DraftHead:
    rng = Rng(seed)
    din = lm.d_embed + lm.d_feature
    a = np.sqrt(6.0 / (lm.d_feature + din))
    return DraftHead(
        lm=lm,
        w_step=rng.uniform_array((lm.d_feature, din), -a, a),
        b_step=np.zeros(lm.d_feature),
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax (float64)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _emb_with_pad(lm: TargetLM) -> np.ndarray:
    return np.vstack([lm.emb, np.zeros((1, lm.d_embed))])


def _window_ids(lm: TargetLM, ids: np.ndarray) -> np.ndarray:
    """(n, window) token ids ending at each position, left-padded with pad_id."""
    n = len(ids)
    padded = np.full(n + lm.window - 1, lm.pad_id, dtype=np.int64)
    padded[lm.window - 1 :] = ids
    return np.lib.stride_tricks.sliding_window_view(padded, lm.window)


def _forward_windows(lm: TargetLM, win: np.ndarray):
    """Hidden features and next-token distributions for (n, window) id rows."""
    x = _emb_with_pad(lm)[win].reshape(len(win), lm.window * lm.d_embed)
    feats = np.tanh(x @ lm.w_hidden.T + lm.b_hidden)
    dists = softmax(feats @ lm.w_head.T + lm.b_head)
    return dists, feats


def target_forward_batch(lm: TargetLM, prefix: list[int]):
    """Distributions and features at every position of ``prefix``.

    Row i conditions on prefix[: i + 1]; this is the single forward pass
    the engine charges per verification.
    """
    ids = np.asarray(prefix, dtype=np.int64)
    if len(ids) == 0:
        raise ValueError("prefix must be non-empty")
    if ids.min() < 0 or ids.max() >= lm.vocab_size:
        raise ValueError("token id out of range")
    return _forward_windows(lm, _window_ids(lm, ids))


def target_forward(lm: TargetLM, prefix: list[int]):
    """(dist, feature) after consuming the whole prefix."""
    dists, feats = target_forward_batch(lm, prefix)
    return dists[-1], feats[-1]


def greedy_continuation(
    lm: TargetLM, prefix: list[int], n: int, terminator: int | None = None
) -> list[int]:
    """n tokens of repeated argmax; stops after emitting the terminator."""
    if n < 0:
        raise ValueError("n must be >= 0")
    seq = list(prefix)
    out: list[int] = []
    for _ in range(n):
        dist, _ = target_forward(lm, seq)
        t = argmax_dist(dist)
        out.append(t)
        seq.append(t)
        if terminator is not None and t == terminator:
            break
    return out


def draft_feature_step(dh: DraftHead, token: int, feat: np.ndarray) -> np.ndarray:
    """Predicted feature at the position following (token, feat)."""
    x = np.concatenate([dh.lm.emb[token], feat])
    return np.tanh(dh.w_step @ x + dh.b_step)


def draft_autoregress(
    dh: DraftHead,
    seed_token: int,
    seed_feature: np.ndarray,
    k: int,
    mode: str = "greedy",
    rng: Rng | None = None,
):
    """k draft tokens continuing past the seed position.

    The first step uses the seed pair; later steps condition on the
    head's own predicted features. Returns (tokens, dists (k, V),
    features (k, d_f)).
    """
    if k < 0:
        raise ValueError("draft length must be >= 0")
    lm = dh.lm
    tokens: list[int] = []
    dists = np.empty((k, lm.vocab_size))
    feats = np.empty((k, lm.d_feature))
    t_cur, f_cur = seed_token, seed_feature
    for i in range(k):
        f_hat = draft_feature_step(dh, t_cur, f_cur)
        dist = softmax(lm.w_head @ f_hat + lm.b_head)
        t_next = argmax_dist(dist) if mode == "greedy" else sample(dist, rng)
        tokens.append(t_next)
        dists[i] = dist
        feats[i] = f_hat
        t_cur, f_cur = t_next, f_hat
    return tokens, dists, feats


def _lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.schedule == "constant" or total_steps <= 0:
        return cfg.learning_rate
    return 0.5 * cfg.learning_rate * (1.0 + np.cos(np.pi * step / total_steps))


def lm_loss_and_grads(lm: TargetLM, win: np.ndarray, targets: np.ndarray):
    """Mean next-token cross-entropy over a batch of windows, with grads."""
    b = len(win)
    x = _emb_with_pad(lm)[win].reshape(b, lm.window * lm.d_embed)
    feats = np.tanh(x @ lm.w_hidden.T + lm.b_hidden)
    probs = softmax(feats @ lm.w_head.T + lm.b_head)
    loss = -np.mean(np.log(probs[np.arange(b), targets] + 1e-300))

    dlogits = probs.copy()
    dlogits[np.arange(b), targets] -= 1.0
    dlogits /= b
    g_w_head = dlogits.T @ feats
    g_b_head = dlogits.sum(axis=0)
    dfeat = dlogits @ lm.w_head
    dpre = dfeat * (1.0 - feats * feats)
    g_w_hidden = dpre.T @ x
    g_b_hidden = dpre.sum(axis=0)
    dx = (dpre @ lm.w_hidden).reshape(b, lm.window, lm.d_embed)
    g_emb = np.zeros_like(lm.emb)
    flat = win.reshape(-1)
    real = flat < lm.vocab_size  # pad rows carry no parameters
    np.add.at(g_emb, flat[real], dx.reshape(-1, lm.d_embed)[real])
    grads = {
        "emb": g_emb,
        "w_hidden": g_w_hidden,
        "b_hidden": g_b_hidden,
        "w_head": g_w_head,
        "b_head": g_b_head,
    }
    return loss, grads


def train_lm(
    corpus_ids: list[int],
    vocab_size: int,
    dims: ModelDims,
    cfg: TrainConfig,
) -> tuple[TargetLM, list[float]]:
    """Train a fresh target LM on next-token prediction over ``corpus_ids``."""
    ids = np.asarray(corpus_ids, dtype=np.int64)
    if len(ids) <= dims.window + 1:
        raise ValueError("corpus too short for the context window")
    lm = init_target_lm(vocab_size, dims, cfg.seed)
    win_all = _window_ids(lm, ids)
    # Full windows only: position i predicts ids[i + 1].
    starts = np.arange(dims.window - 1, len(ids) - 1)
    rng = Rng(cfg.seed ^ 0xD1CE)
    total_steps = cfg.epochs * max(1, (len(starts) + cfg.batch_size - 1) // cfg.batch_size)
    losses: list[float] = []
    step = 0
    for _ in range(cfg.epochs):
        order = starts[rng.permutation(len(starts))]
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            loss, grads = lm_loss_and_grads(lm, win_all[batch], ids[batch + 1])
            if not np.isfinite(loss):
                raise ValueError("training diverged: loss is not finite")
            lr = _lr_at(cfg, step, total_steps)
            for name, p in lm.params().items():
                p -= lr * grads[name]
            losses.append(float(loss))
            step += 1
    return lm, losses


def draft_loss_and_grads(
    dh: DraftHead,
    tokens: np.ndarray,
    feats_in: np.ndarray,
    feats_next: np.ndarray,
    targets: np.ndarray,
    alpha: float,
):
    """Feature-regression + token cross-entropy loss, teacher-forced.

    Only w_step/b_step receive gradients; the shared embedding and LM
    head stay frozen.
    """
    lm = dh.lm
    b = len(tokens)
    x = np.concatenate([lm.emb[tokens], feats_in], axis=1)
    f_hat = np.tanh(x @ dh.w_step.T + dh.b_step)
    probs = softmax(f_hat @ lm.w_head.T + lm.b_head)
    err = f_hat - feats_next
    loss = alpha * np.mean((err * err).sum(axis=1)) - np.mean(
        np.log(probs[np.arange(b), targets] + 1e-300)
    )

    dlogits = probs.copy()
    dlogits[np.arange(b), targets] -= 1.0
    dlogits /= b
    df_hat = dlogits @ lm.w_head + alpha * 2.0 * err / b
    dpre = df_hat * (1.0 - f_hat * f_hat)
    return loss, {"w_step": dpre.T @ x, "b_step": dpre.sum(axis=0)}


def corpus_features(lm: TargetLM, ids: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Target features at every corpus position, computed in chunks."""
    win = _window_ids(lm, ids)
    out = np.empty((len(ids), lm.d_feature))
    for lo in range(0, len(ids), chunk):
        _, out[lo : lo + chunk] = _forward_windows(lm, win[lo : lo + chunk])
    return out


def train_draft(
    corpus_ids: list[int],
    lm: TargetLM,
    cfg: TrainConfig,
    alpha: float = 1.0,
) -> tuple[DraftHead, list[float]]:
    """Train a draft head against the frozen target on ``corpus_ids``."""
    ids = np.asarray(corpus_ids, dtype=np.int64)
    if len(ids) <= lm.window + 1:
        raise ValueError("corpus too short for the context window")
    dh = init_draft_head(lm, cfg.seed)
    feats = corpus_features(lm, ids)
    # Pair (token_i, f_i) -> (f_{i+1}, token_{i+1}) over full-window positions.
    starts = np.arange(lm.window - 1, len(ids) - 1)
    rng = Rng(cfg.seed ^ 0xDAF7)
    total_steps = cfg.epochs * max(1, (len(starts) + cfg.batch_size - 1) // cfg.batch_size)
    losses: list[float] = []
    step = 0
    for _ in range(cfg.epochs):
        order = starts[rng.permutation(len(starts))]
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            loss, grads = draft_loss_and_grads(
                dh, ids[batch], feats[batch], feats[batch + 1], ids[batch + 1], alpha
            )
            if not np.isfinite(loss):
                raise ValueError("training diverged: loss is not finite")
            lr = _lr_at(cfg, step, total_steps)
            dh.w_step -= lr * grads["w_step"]
            dh.b_step -= lr * grads["b_step"]
            losses.append(float(loss))
            step += 1
    return dh, losses


# --- serialization -----------------------------------------------------------
#
# One container for both models: magic "SDLB1", four int32 LE dims
# (window, d_embed, d_feature, vocab_size), one kind byte, then the
# kind's tensors row-major as float64 LE.


def _write_tensors(fh, kind: int, dims: tuple[int, int, int, int], tensors) -> None:
    fh.write(_MAGIC)
    fh.write(struct.pack("<4i", *dims))
    fh.write(struct.pack("<B", kind))
    for t in tensors:
        fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def _read_header(fh):
    if fh.read(5) != _MAGIC:
        raise ValueError("not a model file (bad magic)")
    dims = struct.unpack("<4i", fh.read(16))
    (kind,) = struct.unpack("<B", fh.read(1))
    return dims, kind


def _read_tensor(fh, shape) -> np.ndarray:
    n = int(np.prod(shape))
    buf = fh.read(8 * n)
    if len(buf) != 8 * n:
        raise ValueError("truncated model file")
    return np.frombuffer(buf, dtype="<f8").reshape(shape).copy()


def save_target(lm: TargetLM, path: str | Path) -> None:
    with open(path, "wb") as fh:
        _write_tensors(
            fh,
            _KIND_TARGET,
            (lm.window, lm.d_embed, lm.d_feature, lm.vocab_size),
            [lm.emb, lm.w_hidden, lm.b_hidden, lm.w_head, lm.b_head],
        )


def load_target(path: str | Path) -> TargetLM:
    with open(path, "rb") as fh:
        (w, de, df, v), kind = _read_header(fh)
        if kind != _KIND_TARGET:
            raise ValueError(f"expected a target model, found kind {kind}")
        return TargetLM(
            vocab_size=v,
            window=w,
            d_embed=de,
            d_feature=df,
            emb=_read_tensor(fh, (v, de)),
            w_hidden=_read_tensor(fh, (df, w * de)),
            b_hidden=_read_tensor(fh, (df,)),
            w_head=_read_tensor(fh, (v, df)),
            b_head=_read_tensor(fh, (v,)),
        )


def save_draft(dh: DraftHead, path: str | Path) -> None:
    lm = dh.lm
    with open(path, "wb") as fh:
        _write_tensors(
            fh,
            _KIND_DRAFT,
            (lm.window, lm.d_embed, lm.d_feature, lm.vocab_size),
            [dh.w_step, dh.b_step],
        )


def load_draft(path: str | Path, lm: TargetLM) -> DraftHead:
    with open(path, "rb") as fh:
        (w, de, df, v), kind = _read_header(fh)
        if kind != _KIND_DRAFT:
            raise ValueError(f"expected a draft head, found kind {kind}")
        if (w, de, df, v) != (lm.window, lm.d_embed, lm.d_feature, lm.vocab_size):
            raise ValueError("draft head dimensions do not match the target model")
        return DraftHead(
            lm=lm,
            w_step=_read_tensor(fh, (df, de + df)),
            b_step=_read_tensor(fh, (df,)),
        )
