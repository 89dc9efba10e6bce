"""Multi-query associative recall data and a one-layer toy recall model.

Sequences follow ``k1 v1 ... kn vn <SEP> q1 ... qm``; the target at each query
position is the value bound to that key earlier in the sequence, every other
position is ignored. Token ids: keys ``[0, vk)``, values ``[vk, vk + vv)``,
then ``SEP`` and ``PAD``.

The toy model is a single momentum delta layer trained with hand-derived
gradients (the recurrent adjoint plus element-wise chain rules) and SGD with
momentum. Each position sees ``[emb(x_t), emb(x_{t-1})]``, a fixed width-2
token shift standing in for the short convolution of the full block; without
it one linear-attention layer has no way to tie a key to the value after it.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .adjoint import mdn_recurrent_backward
from .gating import GateConfig, GateSeq, compute_gates, compute_gates_vjp
from .recurrent import AttnInputs, DualState, mdn_recurrent_forward

IGNORE = -100


class NumericalFault(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class MqarInstance:
    tokens: np.ndarray     # [T] int
    targets: np.ndarray    # [T] int, IGNORE off the query positions
    n_pairs: int
    vocab_k: int
    vocab_v: int

    @property
    def sep(self) -> int:
        return self.vocab_k + self.vocab_v

    @property
    def pad(self) -> int:
        return self.vocab_k + self.vocab_v + 1


def min_length(n_pairs: int, n_queries: int) -> int:
    return 2 * n_pairs + 1 + n_queries


def _layout(keys, values, queries, vocab_k, vocab_v, T):
    n, m = len(keys), len(queries)
    sep, pad = vocab_k + vocab_v, vocab_k + vocab_v + 1
    tokens = np.full(T, pad, dtype=np.int64)
    targets = np.full(T, IGNORE, dtype=np.int64)
    tokens[0:2 * n:2] = keys
    tokens[1:2 * n:2] = np.asarray(values) + vocab_k
    tokens[2 * n] = sep
    bound = dict(zip(keys, values))
    for j, qk in enumerate(queries):
        tokens[2 * n + 1 + j] = qk
        targets[2 * n + 1 + j] = bound[qk]
    return tokens, targets


def encode_mqar(pairs, queries, key_symbols, value_symbols, T=None) -> MqarInstance:
    """Build an instance from symbolic pairs, e.g. ``[("L", "2"), ...]``."""
    kid = {s: i for i, s in enumerate(key_symbols)}
    vid = {s: i for i, s in enumerate(value_symbols)}
    keys = [kid[k] for k, _ in pairs]
    values = [vid[v] for _, v in pairs]
    if len(set(keys)) != len(keys):
        raise ValueError("keys must be distinct")
    qs = [kid[q] for q in queries]
    if any(q not in keys for q in qs):
        raise ValueError("every query must be one of the keys")
    T = min_length(len(pairs), len(qs)) if T is None else T
    tokens, targets = _layout(keys, values, qs, len(key_symbols), len(value_symbols), T)
    return MqarInstance(tokens, targets, len(pairs), len(key_symbols), len(value_symbols))


def generate_mqar(vocab_k: int, vocab_v: int, n_pairs: int, n_queries: int, T: int | None = None,
                  seed=0) -> MqarInstance:
    """Random instance; distinct keys, queries drawn uniformly from the present keys."""
    T = min_length(n_pairs, n_queries) if T is None else T
    if n_pairs < 1 or n_queries < 1:
        raise ValueError("need at least one pair and one query")
    if n_pairs > vocab_k:
        raise ValueError(f"cannot draw {n_pairs} distinct keys from a vocabulary of {vocab_k}")
    if vocab_v < 1:
        raise ValueError("value vocabulary is empty")
    if T < min_length(n_pairs, n_queries):
        raise ValueError(f"T={T} too short for {n_pairs} pairs and {n_queries} queries")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keys = rng.choice(vocab_k, size=n_pairs, replace=False)
    values = rng.integers(vocab_v, size=n_pairs)
    queries = keys[rng.integers(n_pairs, size=n_queries)]
    tokens, targets = _layout(list(keys), list(values), list(queries), vocab_k, vocab_v, T)
    return MqarInstance(tokens, targets, n_pairs, vocab_k, vocab_v)


def generate_batch(rng: np.random.Generator, batch: int, vocab_k, vocab_v, n_pairs, n_queries, T=None):
    insts = [generate_mqar(vocab_k, vocab_v, n_pairs, n_queries, T, rng) for _ in range(batch)]
    return np.stack([i.tokens for i in insts]), np.stack([i.targets for i in insts])


# ---------------------------------------------------------------- toy model


@dataclass
class TrainConfig:
    dim: int = 64
    heads: int = 1
    steps: int = 2000
    lr: float = 0.5
    momentum: float = 0.9
    batch: int = 32
    vocab_k: int = 16
    vocab_v: int = 16
    n_pairs: int = 2
    n_queries: int = 2
    seq_len: int | None = None
    eval_every: int = 100
    eval_size: int = 256
    seed: int = 0
    gate: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.steps < 0 or self.batch < 1 or self.eval_every < 1 or self.eval_size < 1:
            raise ValueError("steps >= 0, batch >= 1, eval_every >= 1 and eval_size >= 1 required")

    def to_dict(self) -> dict:
        return asdict(self)


def _l2n(x, eps=1e-6):
    n = np.sqrt((x * x).sum(-1, keepdims=True)) + eps
    return x / n, n


def _l2n_back(g, y, n):
    return (g - y * (y * g).sum(-1, keepdims=True)) / n


def _log_softmax(z):
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


class ToyModel:
    """Embedding -> one momentum delta layer -> linear readout over value ids."""

    def __init__(self, cfg: TrainConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, H = cfg.dim, cfg.heads
        self.dh = d // H
        vocab = cfg.vocab_k + cfg.vocab_v + 2
        d_in = 2 * d
        self.gate_cfg = GateConfig.for_model(d_in, H, **cfg.gate)
        u = 1 / math.sqrt(d)
        init = lambda *shape: rng.uniform(-u, u, size=shape)
        self.params = {
            "emb": init(vocab, d),
            "Wq": init(d_in, d), "Wk": init(d_in, d), "Wv": init(d_in, d),
            "Wg": np.zeros((d_in, 4 * H)), "bg": np.zeros(4 * H),
            "corr": np.zeros(H),
            "Wo": init(d, cfg.vocab_v), "bo": np.zeros(cfg.vocab_v),
        }

    def _features(self, tokens):
        e = self.params["emb"][tokens]
        prev = np.zeros_like(e)
        prev[:, 1:] = e[:, :-1]
        return np.concatenate([e, prev], axis=-1)

    def forward(self, tokens):
        P = self.params
        B, T = tokens.shape
        H, dh = self.cfg.heads, self.dh
        x = self._features(tokens)
        qr = (x @ P["Wq"]).reshape(B, T, H, dh)
        kr = (x @ P["Wk"]).reshape(B, T, H, dh)
        v = (x @ P["Wv"]).reshape(B, T, H, dh)
        qc = qr - P["corr"][None, None, :, None] * kr
        q, nq = _l2n(qc)
        k, nk = _l2n(kr)
        pre = (x @ P["Wg"] + P["bg"]).reshape(B, T, 4, H)
        gates = compute_gates(pre[:, :, 0], pre[:, :, 1], pre[:, :, 2], pre[:, :, 3], self.gate_cfg)
        inputs = AttnInputs(q, k, v, gates)
        o, finals = mdn_recurrent_forward(inputs)
        logits = o.reshape(B, T, H * dh) @ P["Wo"] + P["bo"]
        cache = dict(x=x, kr=kr, qc=qc, q=q, nq=nq, k=k, nk=nk, pre=pre, inputs=inputs,
                     o=o, finals=finals, tokens=tokens)
        return logits, cache

    def loss(self, logits, targets):
        mask = targets != IGNORE
        n = max(int(mask.sum()), 1)
        lp = _log_softmax(logits)
        picked = np.take_along_axis(lp, np.where(mask, targets, 0)[..., None], -1)[..., 0]
        loss = -(picked * mask).sum() / n
        pred = logits.argmax(-1)
        acc = float(((pred == targets) & mask).sum() / n)
        return float(loss), acc, lp, mask, n

    def backward(self, logits, targets, cache):
        P = self.params
        cfg = self.cfg
        B, T = targets.shape
        H, dh = cfg.heads, self.dh
        _, _, lp, mask, n = self.loss(logits, targets)
        dlogits = np.exp(lp)
        np.put_along_axis(dlogits, np.where(mask, targets, 0)[..., None],
                          np.take_along_axis(dlogits, np.where(mask, targets, 0)[..., None], -1) - 1, -1)
        dlogits *= mask[..., None] / n
        grads = {}
        of = cache["o"].reshape(B, T, H * dh)
        grads["Wo"] = np.einsum("btd,btv->dv", of, dlogits)
        grads["bo"] = dlogits.sum((0, 1))
        dO = (dlogits @ P["Wo"].T).reshape(B, T, H, dh)

        gb = mdn_recurrent_backward(cache["inputs"], dO)
        pre = cache["pre"]
        dpa, dpb, dpm, dpe = compute_gates_vjp(pre[:, :, 0], pre[:, :, 1], pre[:, :, 2], pre[:, :, 3],
                                               self.gate_cfg, gb.d_log_alpha, gb.d_beta,
                                               gb.d_log_mu, gb.d_eta)
        dpre = np.stack([dpa, dpb, dpm, dpe], axis=2).reshape(B, T, 4 * H)
        x = cache["x"]
        grads["Wg"] = np.einsum("bti,btj->ij", x, dpre)
        grads["bg"] = dpre.sum((0, 1))

        dqc = _l2n_back(gb.d_q, cache["q"], cache["nq"])
        dkr = _l2n_back(gb.d_k, cache["k"], cache["nk"])
        corr = P["corr"][None, None, :, None]
        dkr = dkr - corr * dqc
        grads["corr"] = -(dqc * cache["kr"]).sum((0, 1, 3))
        dqr = dqc
        flat = lambda a: a.reshape(B, T, H * dh)
        grads["Wq"] = np.einsum("bti,btj->ij", x, flat(dqr))
        grads["Wk"] = np.einsum("bti,btj->ij", x, flat(dkr))
        grads["Wv"] = np.einsum("bti,btj->ij", x, flat(gb.d_v))
        dx = (flat(dqr) @ P["Wq"].T + flat(dkr) @ P["Wk"].T + flat(gb.d_v) @ P["Wv"].T
              + dpre @ P["Wg"].T)
        d = cfg.dim
        demb = np.zeros_like(P["emb"])
        tokens = cache["tokens"]
        np.add.at(demb, tokens, dx[..., :d])
        np.add.at(demb, tokens[:, :-1], dx[:, 1:, d:])
        grads["emb"] = demb
        return grads


def _diagnose(model: ToyModel, cache) -> str:
    g = compute_gates(*(cache["pre"][:, :, i] for i in range(4)), model.gate_cfg)
    alpha, beta = np.exp(g.log_alpha), g.beta
    msgs = []
    if not np.all((alpha > 0) & (alpha < 1)) or not np.all(beta < 1 - alpha):
        msgs.append("gate range violated (quadrant constraint)")
    norms = cache["finals"].norm()
    if not np.all(np.isfinite(norms)):
        msgs.append("state norm non-finite")
    else:
        msgs.append(f"max final state norm {float(norms.max()):.3g}")
    if not all(np.all(np.isfinite(p)) for p in model.params.values()):
        msgs.append("parameters non-finite")
    return "; ".join(msgs)


def train_toy(cfg: TrainConfig, progress=None) -> list[dict]:
    """Train the toy model; returns the trace ``[{step, loss, acc}, ...]``.

    Loss and accuracy are measured on a fixed held-out evaluation set at
    step 0, every ``eval_every`` steps and after the last step.
    """
    rng = np.random.default_rng(cfg.seed)
    model = ToyModel(cfg, rng)
    eval_rng = np.random.default_rng([cfg.seed, 1])
    ev_tok, ev_tgt = generate_batch(eval_rng, cfg.eval_size, cfg.vocab_k, cfg.vocab_v,
                                    cfg.n_pairs, cfg.n_queries, cfg.seq_len)
    data_rng = np.random.default_rng([cfg.seed, 2])
    vel = {k: np.zeros_like(v) for k, v in model.params.items()}
    trace = []

    def evaluate(step):
        logits, cache = model.forward(ev_tok)
        loss, acc, *_ = model.loss(logits, ev_tgt)
        if not math.isfinite(loss):
            raise NumericalFault(f"non-finite eval loss at step {step}: {_diagnose(model, cache)}")
        trace.append({"step": step, "loss": loss, "acc": acc})
        if progress:
            progress(trace[-1])

    evaluate(0)
    for step in range(1, cfg.steps + 1):
        tok, tgt = generate_batch(data_rng, cfg.batch, cfg.vocab_k, cfg.vocab_v,
                                  cfg.n_pairs, cfg.n_queries, cfg.seq_len)
        logits, cache = model.forward(tok)
        loss, *_ = model.loss(logits, tgt)
        if not math.isfinite(loss):
            raise NumericalFault(f"non-finite training loss at step {step}: {_diagnose(model, cache)}")
        grads = model.backward(logits, tgt, cache)
        for name, g in grads.items():
            vel[name] = cfg.momentum * vel[name] + g
            model.params[name] -= cfg.lr * vel[name]
        if step % cfg.eval_every == 0 or step == cfg.steps:
            evaluate(step)
    return trace


def trace_to_csv(trace: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "acc"])
    for row in trace:
        w.writerow([row["step"], repr(row["loss"]), repr(row["acc"])])
    return buf.getvalue()
