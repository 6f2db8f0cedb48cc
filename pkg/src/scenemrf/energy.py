"""Trainable energy functions and their training losses.

Per-box input features are the candidate's raw feature vector concatenated
with its range encoding. One self-attention layer with a residual
connection mixes them across boxes. Unary energies come from a two-layer
perceptron over a box's mixed feature; pairwise energies from a
three-layer perceptron over the ordered concatenation of two boxes'
features, so ``pairwise[b, b', r]`` and ``pairwise[b', b, r]`` differ in
general.

Weights are kept as named float64 arrays. Forward functions accept either
an :class:`EnergyModelParams` (evaluated as constants) or the dict returned
by :meth:`EnergyModelParams.bind`, whose entries are tape leaves.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .bp import forest_nll
from .graph import Node, Vocabulary, build_scene_mrf, check_assignment
from .posenc import FrequencySet, encode_boxes
from .trees import random_spanning_forest

CHECKPOINT_VERSION = 1
MAX_BOXES = 64


@dataclass
class TrainConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 20
    steps: int = 1500
    dropout_p: float = 0.2
    seed: int = 0
    hidden: int = 64
    attn_dim: int = 32
    n_freqs: int = 128
    theta_max: int = 48
    theta_low: int = 6
    loss: str = "bp"  # or "pl"

    def __post_init__(self):
        if not 0 <= self.dropout_p <= 1:
            raise ValueError("dropout_p must lie in [0, 1]")
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0 or self.hidden < 1 or self.attn_dim < 1:
            raise ValueError("rates and sizes must be positive")
        if self.loss not in ("bp", "pl"):
            raise ValueError(f"unknown loss {self.loss!r}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


_SHAPES = (
    ("mix_q", ("d", "a")),
    ("mix_k", ("d", "a")),
    ("mix_v", ("d", "a")),
    ("mix_o", ("a", "d")),
    ("un_w1", ("d", "h")),
    ("un_b1", (1, "h")),
    ("un_w2", ("h", "O")),
    ("un_b2", (1, "O")),
    ("pw_w1", ("2d", "h")),
    ("pw_b1", (1, "h")),
    ("pw_w2", ("h", "h")),
    ("pw_b2", (1, "h")),
    ("pw_w3", ("h", "R")),
    ("pw_b3", (1, "R")),
)


@dataclass
class EnergyModelParams:
    arrays: dict
    feature_dim: int
    hidden: int
    attn_dim: int
    n_objects: int
    n_relations: int

    def __post_init__(self):
        dims = {"d": self.feature_dim, "2d": 2 * self.feature_dim, "a": self.attn_dim,
                "h": self.hidden, "O": self.n_objects, "R": self.n_relations}
        for name, shape in _SHAPES:
            want = tuple(dims.get(s, s) for s in shape)
            got = self.arrays[name].shape
            if got != want:
                raise ValueError(f"{name}: expected shape {want}, got {got}")
            if not np.all(np.isfinite(self.arrays[name])):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def names(self):
        return [name for name, _ in _SHAPES]

    def bind(self, tape):
        return {name: tape.watch(self.arrays[name]) for name in self.names}

    def constants(self):
        return {name: Tensor(self.arrays[name]) for name in self.names}

    def replace(self, arrays):
        return EnergyModelParams(arrays, self.feature_dim, self.hidden, self.attn_dim,
                                 self.n_objects, self.n_relations)

    def zeros_like(self):
        return self.replace({k: np.zeros_like(v) for k, v in self.arrays.items()})


def init_params(feature_dim, n_objects, n_relations, hidden=64, attn_dim=32, seed=0, zero=False):
    rng = np.random.default_rng(seed)
    dims = {"d": feature_dim, "2d": 2 * feature_dim, "a": attn_dim, "h": hidden, "O": n_objects, "R": n_relations}
    arrays = {}
    for name, shape in _SHAPES:
        shape = tuple(dims.get(s, s) for s in shape)
        if zero or shape[0] == 1:
            arrays[name] = np.zeros(shape)
        else:
            scale = np.sqrt(2.0 / shape[0])
            if name == "mix_o":
                scale *= 0.1
            arrays[name] = rng.normal(0.0, scale, shape)
    return EnergyModelParams(arrays, feature_dim, hidden, attn_dim, n_objects, n_relations)


def _weights(p):
    return p.constants() if isinstance(p, EnergyModelParams) else p


# -- forward ------------------------------------------------------------------


def input_features(c, f):
    """Raw candidate features concatenated with the range encoding (constant)."""
    return np.concatenate([c.features, encode_boxes(c.boxes, f)], axis=1)


def _repeat_row(row, n):
    return ad.gather(row, 0, np.zeros(n, dtype=np.intp))


def _affine(x, w, b):
    return ad.add(ad.matmul(x, w), _repeat_row(b, x.shape[0]))


def mix_features(x0, p, return_weights=False):
    """One self-attention layer with a residual connection over box rows."""
    w = _weights(p)
    x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
    n = x0.shape[0]
    q = ad.matmul(x0, w["mix_q"])
    k = ad.matmul(x0, w["mix_k"])
    v = ad.matmul(x0, w["mix_v"])
    scores = ad.scale(ad.matmul(q, ad.permute(k, (1, 0))), 1.0 / np.sqrt(q.shape[1]))
    norm = ad.reshape(ad.reduce_logsumexp(scores, 1), (n, 1))
    attn = ad.exp(ad.sub(scores, ad.gather(norm, 1, np.zeros(n, dtype=np.intp))))
    out = ad.add(x0, ad.matmul(ad.matmul(attn, v), w["mix_o"]))
    return (out, attn.data) if return_weights else out


def compute_features(c, f, p):
    if c.n_boxes > MAX_BOXES:
        raise ValueError(f"{c.n_boxes} candidates exceed the {MAX_BOXES}-box guard")
    x0 = input_features(c, f)
    return mix_features(x0, p)


def unary_energies(p, feats):
    w = _weights(p)
    if feats.shape[1] != w["un_w1"].shape[0]:
        raise ValueError(f"feature dim {feats.shape[1]} does not match model ({w['un_w1'].shape[0]})")
    h = ad.relu(_affine(feats, w["un_w1"], w["un_b1"]))
    return _affine(h, w["un_w2"], w["un_b2"])


def pairwise_energies(p, feats, max_boxes=MAX_BOXES):
    """``n x n x R`` energies from the ordered concatenation of two boxes' features."""
    w = _weights(p)
    n, d = feats.shape
    if n > max_boxes:
        raise ValueError(f"{n} boxes exceed the pairwise memory guard of {max_boxes}")
    if 2 * d != w["pw_w1"].shape[0]:
        raise ValueError(f"feature dim {d} does not match model ({w['pw_w1'].shape[0] // 2})")
    # concat(f_b, f_b') @ W1 == f_b @ W1[:d] + f_b' @ W1[d:]
    first = ad.matmul(feats, ad.gather(w["pw_w1"], 0, np.arange(d)))
    second = ad.matmul(feats, ad.gather(w["pw_w1"], 0, np.arange(d, 2 * d)))
    rows = np.repeat(np.arange(n), n)
    cols = np.tile(np.arange(n), n)
    pre = ad.add(ad.gather(first, 0, rows), ad.gather(second, 0, cols))
    h1 = ad.relu(ad.add(pre, _repeat_row(w["pw_b1"], n * n)))
    h2 = ad.relu(_affine(h1, w["pw_w2"], w["pw_b2"]))
    out = _affine(h2, w["pw_w3"], w["pw_b3"])
    return ad.reshape(out, (n, n, out.shape[1]))


def energies(p, c, f, x0=None):
    """Unary and pairwise energy tables for a candidate set."""
    feats = mix_features(input_features(c, f) if x0 is None else x0, p)
    return unary_energies(p, feats), pairwise_energies(p, feats)


# -- augmentation and losses ------------------------------------------------


def category_dropout(q, p, seed):
    """Each node independently becomes the generic "object" with probability ``p``."""
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    if p == 0:
        return q
    rng = np.random.default_rng(seed)
    draws = rng.random(len(q.nodes))
    nodes = [Node(n.id, n.category, True) if u < p else n for n, u in zip(q.nodes, draws)]
    return q.with_nodes(nodes)


def _check_gt(item):
    nb = item.candidates.n_boxes
    for node in item.query.node_ids:
        if node not in item.gt:
            raise ValueError(f"ground truth misses node {node}")
        if not 0 <= item.gt[node] < nb:
            raise IndexError(f"ground-truth box {item.gt[node]} outside 0..{nb - 1}")


def grounding_loss(p, item, f, seed, x0=None, query=None):
    """``-log P(gt)`` on a random spanning tree (forest) of the query.

    ``query`` overrides ``item.query``, e.g. after category dropout.
    """
    _check_gt(item)
    q = item.query if query is None else query
    un, pw = energies(p, item.candidates, f, x0)
    tree = random_spanning_forest(q, seed)
    mrf = build_scene_mrf(tree, un, pw)
    return forest_nll(mrf, item.gt)


def pseudo_likelihood_loss(p, item, f, mode="node", x0=None, query=None):
    """Sum over nodes of ``-log P(a_i = gt | neighbours at gt)``."""
    if mode != "node":
        raise ValueError("only node-conditional pseudo-likelihood is implemented")
    _check_gt(item)
    q = item.query if query is None else query
    un, pw = energies(p, item.candidates, f, x0)
    mrf = build_scene_mrf(q, un, pw)
    check_assignment(mrf, item.gt)
    nb = mrf.n_boxes
    gt = item.gt
    total = None
    for i in mrf.node_ids:
        energy = mrf.unary[i]
        for fac in mrf.pairwise:
            if fac.src == i:
                energy = ad.add(energy, ad.reshape(ad.gather(fac.energy, 1, [gt[fac.dst]]), (nb,)))
            if fac.dst == i:
                energy = ad.add(energy, ad.reshape(ad.gather(fac.energy, 0, [gt[fac.src]]), (nb,)))
        log_norm = ad.reduce_logsumexp(ad.neg(energy), 0)
        term = ad.add(ad.reshape(ad.gather(energy, 0, [gt[i]]), ()), log_norm)
        total = term if total is None else ad.add(total, term)
    return total


# -- optimizer ------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def fresh(cls, params):
        return cls(0, {k: np.zeros_like(a) for k, a in params.arrays.items()},
                   {k: np.zeros_like(a) for k, a in params.arrays.items()})


def adam_step(params, grads, state, config):
    """Bias-corrected Adam update; returns ``(new_params, new_state)``."""
    t = state.step + 1
    arrays, m_new, v_new = {}, {}, {}
    for name in params.names:
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != params.arrays[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params.arrays[name].shape}")
        m = config.beta1 * state.m[name] + (1 - config.beta1) * g
        v = config.beta2 * state.v[name] + (1 - config.beta2) * g * g
        m_hat = m / (1 - config.beta1 ** t)
        v_hat = v / (1 - config.beta2 ** t)
        arrays[name] = params.arrays[name] - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
        m_new[name], v_new[name] = m, v
    return params.replace(arrays), AdamState(t, m_new, v_new)


def loss_and_grads(params, items, f, seeds, config, x0s=None):
    """Mean loss over ``items`` and its gradient per parameter name.

    ``seeds[i]`` drives both category dropout and tree extraction for item
    ``i``. Item losses are summed in list order.
    """
    tape = Tape()
    w = params.bind(tape)
    total = None
    for idx, (item, seed) in enumerate(zip(items, seeds)):
        ss = np.random.SeedSequence(seed).generate_state(2)
        q = category_dropout(item.query, config.dropout_p, int(ss[0]))
        x0 = None if x0s is None else x0s[idx]
        if config.loss == "pl":
            loss = pseudo_likelihood_loss(w, item, f, x0=x0, query=q)
        else:
            loss = grounding_loss(w, item, f, int(ss[1]), x0=x0, query=q)
        total = loss if total is None else ad.add(total, loss)
    mean = ad.scale(total, 1.0 / len(items))
    grads = ad.backward(mean)
    return mean.item(), {name: grads[w[name].node_id].data for name in params.names}


# -- checkpoints ------------------------------------------------------------------


def _encode_array(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d):
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"]).copy()


def save_checkpoint(path, params, freqs, vocab, config, state=None, extra=None):
    """Versioned JSON container; arrays are stored as raw little-endian float64."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "dims": {
            "feature_dim": params.feature_dim,
            "hidden": params.hidden,
            "attn_dim": params.attn_dim,
            "n_objects": params.n_objects,
            "n_relations": params.n_relations,
        },
        "params": {k: _encode_array(params.arrays[k]) for k in params.names},
        "frequencies": freqs.to_dict(),
        "vocabulary": vocab.to_dict(),
        "config": config.to_dict(),
        "adam": None if state is None else {
            "step": state.step,
            "m": {k: _encode_array(v) for k, v in state.m.items()},
            "v": {k: _encode_array(v) for k, v in state.v.items()},
        },
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path):
    """Returns ``(params, freqs, vocab, config, adam_state, extra)``."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    params = EnergyModelParams({k: _decode_array(v) for k, v in doc["params"].items()}, **doc["dims"])
    state = None
    if doc["adam"] is not None:
        state = AdamState(
            doc["adam"]["step"],
            {k: _decode_array(v) for k, v in doc["adam"]["m"].items()},
            {k: _decode_array(v) for k, v in doc["adam"]["v"].items()},
        )
    return (
        params,
        FrequencySet.from_dict(doc["frequencies"]),
        Vocabulary.from_dict(doc["vocabulary"]),
        TrainConfig.from_dict(doc["config"]),
        state,
        doc["extra"],
    )
