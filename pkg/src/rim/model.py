"""Prediction model: embeddings, neighbor attention, feature interactions, MLP.

The target row and each retrieved neighbor are embedded by concatenating
per-field embeddings (multi-value fields mean-pool their values).  Neighbors
are combined by target-aware attention over bilinear logits, producing an
aggregated feature vector and an aggregated label embedding with the same
weights.  All pairwise interactions among the 2F+1 blocks of
[target fields, aggregated fields, aggregated label] feed an MLP whose final
layer is concatenated with the aggregated label embedding again (the direct
link) before the task head.

Gradients are hand-derived reverse-mode for this fixed architecture; training
is plain minibatch Adam in float64.  Everything is deterministic given the
seed: neighbors are processed in ascending sample-id order and batch
composition comes from one seeded generator.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dataset import Table
from .errors import ConfigError, DataError, FormatError, NumericError

TASK_BINARY = "binary"
TASK_REGRESSION = "regression"
INTERACTIONS = ("inner", "kernel", "micro")

CHECKPOINT_MAGIC = b"RIMMDL"
CHECKPOINT_VERSION = 1

LOSS_EPS = 1e-12


def _check_task(task: str) -> None:
    if task not in (TASK_BINARY, TASK_REGRESSION):
        raise ConfigError(f"unknown task {task!r}")


@dataclass
class TrainConfig:
    d: int = 16
    k: int = 10
    lr: float = 1e-3
    l2: float = 1e-4
    batch_size: int = 100
    epochs: int = 5
    seed: int = 0
    interaction: str = "inner"
    mlp_widths: tuple = (200, 80)
    micro_widths: tuple = (40, 5)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    disable_label: bool = False

    def __post_init__(self):
        if self.interaction not in INTERACTIONS:
            raise ConfigError(f"unknown interaction kind {self.interaction!r}")
        if self.d < 1 or self.k < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("sizes must be positive")
        if self.l2 < 0:
            raise ConfigError("l2 weight must be >= 0")
        if not self.mlp_widths:
            raise ConfigError("need at least one MLP hidden layer")
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)
        self.micro_widths = tuple(int(w) for w in self.micro_widths)


class ModelParams:
    """All learnable arrays plus the shape/config metadata they imply."""

    def __init__(self, n_fields: int, d: int, n_classes: int, vocab_size: int,
                 interaction: str, mlp_widths: tuple, micro_widths: tuple,
                 disable_label: bool, arrays: dict):
        self.n_fields = n_fields
        self.d = d
        self.n_classes = n_classes
        self.vocab_size = vocab_size
        self.interaction = interaction
        self.mlp_widths = tuple(mlp_widths)
        self.micro_widths = tuple(micro_widths)
        self.disable_label = disable_label
        self.arrays = arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def n_blocks(self) -> int:
        return 2 * self.n_fields + 1

    @property
    def n_interactions(self) -> int:
        nb = self.n_blocks
        return nb * (nb - 1) // 2

    @property
    def input_dim(self) -> int:
        fd = self.n_fields * self.d
        return 2 * fd + self.d + self.n_interactions

    def block_names(self) -> list:
        names = ["emb", "label_emb", "att_w"]
        if self.interaction == "kernel":
            names.append("kernel")
        elif self.interaction == "micro":
            names += ["micro_w1", "micro_b1", "micro_w2", "micro_b2",
                      "micro_w3", "micro_b3"]
        for i in range(len(self.mlp_widths)):
            names += [f"mlp_w{i}", f"mlp_b{i}"]
        names += ["out_w", "out_b"]
        return names

    def weight_names(self) -> list:
        """Blocks carrying the L2 penalty: dense weight matrices, not the
        embedding tables and not biases (untouched embedding rows must keep
        zero gradient)."""
        skip = {"emb", "label_emb"}
        return [n for n in self.block_names()
                if n not in skip and not n.rsplit("_", 1)[-1].startswith("b")]


def init_params(config: TrainConfig, vocab_size: int, n_fields: int,
                n_classes: int) -> ModelParams:
    """Seeded uniform init in [-1/sqrt(d), 1/sqrt(d)] for embeddings and
    weights; biases start at zero."""
    d = config.d
    fd = n_fields * d
    bound = 1.0 / np.sqrt(d)
    rng = np.random.default_rng(config.seed)

    def u(*shape):
        return rng.uniform(-bound, bound, size=shape)

    arrays = {
        "emb": u(vocab_size, d),
        "label_emb": u(n_classes, d),
        "att_w": u(fd, fd),
    }
    if config.interaction == "kernel":
        arrays["kernel"] = u(d, d)
    elif config.interaction == "micro":
        h1, h2 = config.micro_widths
        arrays["micro_w1"] = u(2 * d, h1)
        arrays["micro_b1"] = np.zeros(h1)
        arrays["micro_w2"] = u(h1, h2)
        arrays["micro_b2"] = np.zeros(h2)
        arrays["micro_w3"] = u(h2)
        arrays["micro_b3"] = np.zeros(1)
    params = ModelParams(n_fields, d, n_classes, vocab_size, config.interaction,
                         config.mlp_widths, config.micro_widths,
                         config.disable_label, arrays)
    prev = params.input_dim
    for i, width in enumerate(config.mlp_widths):
        arrays[f"mlp_w{i}"] = u(prev, width)
        arrays[f"mlp_b{i}"] = np.zeros(width)
        prev = width
    arrays["out_w"] = u(prev + d)
    arrays["out_b"] = np.zeros(1)
    return params


def zero_grads(params: ModelParams) -> dict:
    return {name: np.zeros_like(params[name]) for name in params.block_names()}


def _slot_ids(slot) -> list:
    return sorted(slot) if isinstance(slot, frozenset) else [slot]


def embed_sample(params: ModelParams, sample) -> np.ndarray:
    """Concatenation of per-field embeddings; multi-value fields mean-pool."""
    d = params.d
    x = np.empty(params.n_fields * d)
    emb = params["emb"]
    for i, slot in enumerate(sample.slots):
        ids = _slot_ids(slot)
        if any(fid >= params.vocab_size or fid < 0 for fid in ids):
            raise DataError(f"feature id out of range in sample {sample.sample_id}")
        if len(ids) == 1:
            x[i * d:(i + 1) * d] = emb[ids[0]]
        elif ids:
            x[i * d:(i + 1) * d] = emb[ids].mean(axis=0)
        else:
            x[i * d:(i + 1) * d] = 0.0
    return x


def _scatter_embedding(d_emb: np.ndarray, sample, dx: np.ndarray, d: int) -> None:
    for i, slot in enumerate(sample.slots):
        ids = _slot_ids(slot)
        if not ids:
            continue
        chunk = dx[i * d:(i + 1) * d]
        if len(ids) == 1:
            d_emb[ids[0]] += chunk
        else:
            np.add.at(d_emb, ids, chunk[None, :] / len(ids))


def attention_weights(params: ModelParams, x_t: np.ndarray,
                      neighbor_x: np.ndarray) -> np.ndarray:
    """Softmax over bilinear logits x_k^T W x_t, stabilized by max-shift."""
    if neighbor_x.shape[0] == 0:
        return np.empty(0)
    logits = neighbor_x @ (params["att_w"] @ x_t)
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


def aggregate(alpha: np.ndarray, neighbor_x: np.ndarray,
              label_classes: np.ndarray, label_emb: np.ndarray):
    """Attention-weighted sums of neighbor embeddings and label embeddings."""
    if alpha.size == 0:
        return np.zeros(neighbor_x.shape[1] if neighbor_x.ndim == 2 else 0), \
            np.zeros(label_emb.shape[1])
    if label_classes.size and label_classes.max() >= label_emb.shape[0]:
        raise DataError("neighbor label class out of range")
    r = neighbor_x.T @ alpha
    l_vec = label_emb[label_classes].T @ alpha
    return r, l_vec


def _interaction_forward(blocks: np.ndarray, params: ModelParams):
    nb = blocks.shape[0]
    iu = np.triu_indices(nb, k=1)
    kind = params.interaction
    if kind == "inner":
        gram = blocks @ blocks.T
        return gram[iu], (iu, None)
    if kind == "kernel":
        gram = blocks @ params["kernel"] @ blocks.T
        return gram[iu], (iu, None)
    # micro: one shared two-layer network applied to every block pair
    pair_in = np.concatenate([blocks[iu[0]], blocks[iu[1]]], axis=1)
    a1 = pair_in @ params["micro_w1"] + params["micro_b1"]
    z1 = np.maximum(a1, 0.0)
    a2 = z1 @ params["micro_w2"] + params["micro_b2"]
    z2 = np.maximum(a2, 0.0)
    out = z2 @ params["micro_w3"] + params["micro_b3"][0]
    return out, (iu, (pair_in, a1, z1, a2, z2))


def interact(c_combine: np.ndarray, kind: str, params: ModelParams) -> np.ndarray:
    """One scalar per unordered block pair, lexicographic (p, q) order."""
    if kind != params.interaction:
        raise ConfigError(f"params were built for {params.interaction!r}, not {kind!r}")
    e_inter, _ = _interaction_forward(np.asarray(c_combine, dtype=np.float64), params)
    return e_inter


@dataclass
class ForwardTrace:
    target: object
    neighbors: tuple
    x_t: np.ndarray
    neighbor_x: np.ndarray
    label_classes: np.ndarray
    alpha: np.ndarray
    r: np.ndarray
    l_vec: np.ndarray
    blocks: np.ndarray
    e_inter: np.ndarray
    inter_aux: tuple
    inp: np.ndarray
    pre_acts: list
    post_acts: list
    u: np.ndarray
    z_out: float
    yhat: float
    task: str


def _assert_finite(arr, stage: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value at {stage}")


def forward(params: ModelParams, target, neighbors, task: str) -> tuple:
    """Single-sample forward pass; returns (yhat, trace).

    `neighbors` is a retrieved set (possibly empty); they are re-sorted by
    ascending sample id so the aggregation is order-invariant bit-for-bit.
    """
    _check_task(task)
    d, f = params.d, params.n_fields
    fd = f * d
    neighbors = tuple(sorted(neighbors, key=lambda n: n.sample_id))
    x_t = embed_sample(params, target)

    if neighbors:
        neighbor_x = np.stack([embed_sample(params, n) for n in neighbors])
        alpha = attention_weights(params, x_t, neighbor_x)
        if params.disable_label:
            label_classes = np.empty(0, dtype=np.int64)
            r = neighbor_x.T @ alpha
            l_vec = np.zeros(d)
        else:
            if any(n.label_class is None for n in neighbors):
                raise DataError("neighbor labels must be discretized to class ids")
            label_classes = np.array([n.label_class for n in neighbors],
                                     dtype=np.int64)
            r, l_vec = aggregate(alpha, neighbor_x, label_classes,
                                 params["label_emb"])
    else:
        neighbor_x = np.empty((0, fd))
        label_classes = np.empty(0, dtype=np.int64)
        alpha = np.empty(0)
        r = np.zeros(fd)
        l_vec = np.zeros(d)

    blocks = np.concatenate([x_t.reshape(f, d), r.reshape(f, d),
                             l_vec.reshape(1, d)])
    e_inter, inter_aux = _interaction_forward(blocks, params)
    _assert_finite(e_inter, "interaction layer")

    inp = np.concatenate([x_t, r, l_vec, e_inter])
    pre_acts, post_acts = [], []
    h = inp
    for i in range(len(params.mlp_widths)):
        a = h @ params[f"mlp_w{i}"] + params[f"mlp_b{i}"]
        _assert_finite(a, f"mlp layer {i}")
        h = np.maximum(a, 0.0)
        pre_acts.append(a)
        post_acts.append(h)
    u = np.concatenate([h, l_vec])
    z_out = float(u @ params["out_w"] + params["out_b"][0])
    _assert_finite(z_out, "output layer")
    if task == TASK_BINARY:
        yhat = 1.0 / (1.0 + np.exp(-z_out))
    else:
        yhat = z_out
    trace = ForwardTrace(target, neighbors, x_t, neighbor_x, label_classes,
                         alpha, r, l_vec, blocks, e_inter, inter_aux, inp,
                         pre_acts, post_acts, u, z_out, yhat, task)
    return yhat, trace


def l2_penalty(params: ModelParams) -> float:
    return float(sum(np.sum(params[n] ** 2) for n in params.weight_names()))


def loss(yhat: float, y: float, task: str, lam: float,
         params: ModelParams) -> float:
    """Cross-entropy (binary) or squared error (regression) plus the L2 term
    over the dense weight matrices."""
    _check_task(task)
    if task == TASK_BINARY:
        p = min(max(yhat, LOSS_EPS), 1.0 - LOSS_EPS)
        data_term = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    else:
        data_term = (yhat - y) ** 2
    if lam:
        return float(data_term + lam * l2_penalty(params))
    return float(data_term)


def backward(trace: ForwardTrace, params: ModelParams, y: float, task: str,
             lam: float, into: Optional[dict] = None,
             scale: float = 1.0) -> dict:
    """Exact gradients of loss() w.r.t. every parameter block.

    When `into` is given, `scale` times the gradient is accumulated there
    (the minibatch path); otherwise a fresh gradient dict is returned.
    """
    _check_task(task)
    grads = zero_grads(params) if into is None else into
    d, f = params.d, params.n_fields
    fd = f * d

    if task == TASK_BINARY:
        dz_out = trace.yhat - y
    else:
        dz_out = 2.0 * (trace.yhat - y)
    dz_out *= scale

    h_last = trace.post_acts[-1]
    grads["out_w"] += dz_out * trace.u
    grads["out_b"][0] += dz_out
    du = dz_out * params["out_w"]
    dh = du[:h_last.shape[0]]
    dl = du[h_last.shape[0]:].copy()

    for i in reversed(range(len(params.mlp_widths))):
        da = dh * (trace.pre_acts[i] > 0.0)
        below = trace.inp if i == 0 else trace.post_acts[i - 1]
        grads[f"mlp_w{i}"] += np.outer(below, da)
        grads[f"mlp_b{i}"] += da
        dh = params[f"mlp_w{i}"] @ da
    dinp = dh

    dx_t = dinp[:fd].copy()
    dr = dinp[fd:2 * fd].copy()
    dl += dinp[2 * fd:2 * fd + d]
    dg = dinp[2 * fd + d:]

    # interaction backward over the block matrix
    blocks = trace.blocks
    nb = blocks.shape[0]
    iu, micro_aux = trace.inter_aux
    s = np.zeros((nb, nb))
    s[iu] = dg
    if params.interaction == "inner":
        d_blocks = s @ blocks + s.T @ blocks
    elif params.interaction == "kernel":
        phi = params["kernel"]
        d_blocks = s @ (blocks @ phi.T) + s.T @ (blocks @ phi)
        grads["kernel"] += blocks.T @ s @ blocks
    else:
        pair_in, a1, z1, a2, z2 = micro_aux
        ds = dg
        grads["micro_w3"] += z2.T @ ds
        grads["micro_b3"][0] += ds.sum()
        dz2 = np.outer(ds, params["micro_w3"])
        da2 = dz2 * (a2 > 0.0)
        grads["micro_w2"] += z1.T @ da2
        grads["micro_b2"] += da2.sum(axis=0)
        dz1 = da2 @ params["micro_w2"].T
        da1 = dz1 * (a1 > 0.0)
        grads["micro_w1"] += pair_in.T @ da1
        grads["micro_b1"] += da1.sum(axis=0)
        d_pair = da1 @ params["micro_w1"].T
        d_blocks = np.zeros_like(blocks)
        np.add.at(d_blocks, iu[0], d_pair[:, :d])
        np.add.at(d_blocks, iu[1], d_pair[:, d:])

    dx_t += d_blocks[:f].ravel()
    dr += d_blocks[f:2 * f].ravel()
    dl += d_blocks[2 * f]

    k = trace.alpha.size
    if k:
        if params.disable_label:
            d_alpha = trace.neighbor_x @ dr
        else:
            lam_rows = params["label_emb"][trace.label_classes]
            d_alpha = trace.neighbor_x @ dr + lam_rows @ dl
            np.add.at(grads["label_emb"], trace.label_classes,
                      np.outer(trace.alpha, dl))
        d_neighbor_x = np.outer(trace.alpha, dr)
        # softmax
        d_logits = trace.alpha * (d_alpha - trace.alpha @ d_alpha)
        w_x = params["att_w"] @ trace.x_t
        xtdz = trace.neighbor_x.T @ d_logits
        grads["att_w"] += np.outer(xtdz, trace.x_t)
        d_neighbor_x += np.outer(d_logits, w_x)
        dx_t += params["att_w"].T @ xtdz
        for j, n in enumerate(trace.neighbors):
            _scatter_embedding(grads["emb"], n, d_neighbor_x[j], d)

    _scatter_embedding(grads["emb"], trace.target, dx_t, d)

    if lam:
        two_lam = 2.0 * lam * scale
        for name in params.weight_names():
            grads[name] += two_lam * params[name]
    return grads


def init_adam(params: ModelParams) -> dict:
    state = {name: (np.zeros_like(params[name]), np.zeros_like(params[name]))
             for name in params.block_names()}
    state["_t"] = 0
    return state


def adam_step(params: ModelParams, grads: dict, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple:
    """Bias-corrected Adam; updates params and state in place and returns them."""
    state["_t"] += 1
    t = state["_t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in params.block_names():
        g = grads[name]
        m, v = state[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params.arrays[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


@dataclass
class TrainResult:
    params: ModelParams
    history: list = field(default_factory=list)


def train(config: TrainConfig, train_table: Table, source, task: str,
          eval_fn=None) -> TrainResult:
    """Minibatch training over the train table with neighbors from `source`.

    `source` provides ``neighbors_for(sample)`` (index-backed, cached, random
    or empty).  Fully deterministic given ``config.seed``.
    """
    _check_task(task)
    if not train_table.samples:
        raise DataError("empty train set")
    if train_table.label_bins is None:
        raise DataError("discretize labels before training")
    n_classes = train_table.label_bins[2]
    params = init_params(config, train_table.vocab.size,
                         train_table.n_features, n_classes)
    state = init_adam(params)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    samples = train_table.samples
    n = len(samples)
    history = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = [samples[i] for i in order[start:start + config.batch_size]]
            grads = zero_grads(params)
            inv = 1.0 / len(batch)
            for s in batch:
                yhat, trace = forward(params, s, source.neighbors_for(s), task)
                total += loss(yhat, s.label, task, config.l2, params)
                backward(trace, params, s.label, task, config.l2,
                         into=grads, scale=inv)
            adam_step(params, grads, state, config.lr, config.beta1,
                      config.beta2, config.eps)
        entry = {"epoch": epoch, "train_loss": total / n}
        if eval_fn is not None:
            entry["eval"] = eval_fn(params)
        history.append(entry)
    return TrainResult(params, history)


def predict(params: ModelParams, targets: Table, source, task: str) -> np.ndarray:
    """Batch forward only; never mutates parameters."""
    out = np.empty(len(targets.samples))
    for i, s in enumerate(targets.samples):
        out[i], _ = forward(params, s, source.neighbors_for(s), task)
    return out


def save_checkpoint(params: ModelParams, path, task: str,
                    retrieval_k: int = 0) -> None:
    meta = {
        "F": params.n_fields, "d": params.d, "L": params.n_classes,
        "V": params.vocab_size, "K": retrieval_k,
        "interaction": params.interaction,
        "mlp_widths": list(params.mlp_widths),
        "micro_widths": list(params.micro_widths),
        "disable_label": params.disable_label,
        "task": task,
        "blocks": [[n, list(params[n].shape)] for n in params.block_names()],
    }
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<B", CHECKPOINT_VERSION))
    payload = json.dumps(meta, sort_keys=True).encode()
    out.write(struct.pack("<I", len(payload)))
    out.write(payload)
    for name in params.block_names():
        out.write(params[name].astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(out.getvalue())


def load_checkpoint(path) -> tuple:
    """Returns (params, task, retrieval_k)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    try:
        if buf.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise FormatError("not a RIMMDL file (bad magic)")
        (version,) = struct.unpack("<B", buf.read(1))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported RIMMDL version {version}")
        (meta_len,) = struct.unpack("<I", buf.read(4))
        meta = json.loads(buf.read(meta_len).decode())
        arrays = {}
        for name, shape in meta["blocks"]:
            count = int(np.prod(shape)) if shape else 1
            data = buf.read(8 * count)
            if len(data) != 8 * count:
                raise FormatError("truncated RIMMDL file")
            arrays[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
        params = ModelParams(meta["F"], meta["d"], meta["L"], meta["V"],
                             meta["interaction"], tuple(meta["mlp_widths"]),
                             tuple(meta["micro_widths"]), meta["disable_label"],
                             arrays)
        return params, meta["task"], meta["K"]
    except struct.error:
        raise FormatError("truncated RIMMDL file")
