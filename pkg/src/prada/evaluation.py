"""Decoding, accuracy, domain probing and embedding projection."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import TOKENIZER, StudentModel, encode_questions
from .text import END, QUESTION_END, extract_answer, normalize_answer

__all__ = ["extract_answer", "greedy_decode", "greedy_decode_batch", "accuracy", "eval_accuracy",
           "domain_probe", "pca_2d", "project_embeddings", "EvalReport", "ProjectionExport"]


# ----------------------------------------------------------------------------
# decoding


@dataclass
class Decoded:
    text: str
    truncated: bool


def _ln(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + ad.LN_EPS) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(ad._GELU_C * (x + 0.044715 * x * x * x)))


class _Cache:
    """Per-layer key/value buffers for incremental greedy decoding."""

    def __init__(self, model: StudentModel, batch: int, length: int):
        c = model.config
        self.p = {k: v.data for k, v in model.params.items()}
        self.c = c
        self.nh, self.hd = c.heads, c.hidden // c.heads
        self.k_p = c.prompt_len
        self.K = np.zeros((c.layers, batch, self.nh, self.k_p + length, self.hd))
        self.V = np.zeros_like(self.K)
        for l in range(c.layers):
            if self.k_p:
                k, v = self._kv(l, self.p[f"prompt.{l}"])
                self.K[l, :, :, :self.k_p] = k.reshape(self.k_p, self.nh, self.hd).transpose(1, 0, 2)
                self.V[l, :, :, :self.k_p] = v.reshape(self.k_p, self.nh, self.hd).transpose(1, 0, 2)

    def _kv(self, l, x):
        p, H = self.p, self.c.hidden
        h = _ln(x, p[f"h{l}.ln1.g"], p[f"h{l}.ln1.b"])
        qkv = h @ p[f"h{l}.attn.w_qkv"] + p[f"h{l}.attn.b_qkv"]
        return qkv[..., H:2 * H], qkv[..., 2 * H:]

    def step(self, ids: np.ndarray, t: int) -> np.ndarray:
        """Feed token index ``t`` for every row; returns next-token logits (B, V)."""
        p, c, nh, hd = self.p, self.c, self.nh, self.hd
        B, H = ids.shape[0], c.hidden
        s = self.k_p + t
        x = p["tok_emb"][ids] + p["pos_emb"][t]
        for l in range(c.layers):
            pre = f"h{l}."
            h = _ln(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            qkv = h @ p[pre + "attn.w_qkv"] + p[pre + "attn.b_qkv"]
            q = qkv[:, :H].reshape(B, nh, hd)
            self.K[l, :, :, s] = qkv[:, H:2 * H].reshape(B, nh, hd)
            self.V[l, :, :, s] = qkv[:, 2 * H:].reshape(B, nh, hd)
            K, V = self.K[l, :, :, :s + 1], self.V[l, :, :, :s + 1]
            scores = np.einsum("bhd,bhsd->bhs", q, K) / np.sqrt(hd)
            scores -= scores.max(axis=-1, keepdims=True)
            w = np.exp(scores)
            w /= w.sum(axis=-1, keepdims=True)
            att = np.einsum("bhs,bhsd->bhd", w, V).reshape(B, H)
            x = x + att @ p[pre + "attn.w_o"] + p[pre + "attn.b_o"]
            h = _ln(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            x = x + _gelu(h @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]) @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]
        h = _ln(x, p["lm.ln.g"], p["lm.ln.b"])
        return h @ p["lm.w"] + p["lm.b"]


def greedy_decode_batch(model: StudentModel, questions, max_new_tokens: int) -> list[Decoded]:
    """Argmax decoding of each formatted question until " END" or the budget runs out.

    Rows advance in lockstep: row b is fed its own context tokens until they
    run out, then its own previous prediction.
    """
    for q in questions:
        if not q.endswith(QUESTION_END):
            raise ValueError(f"question must end with {QUESTION_END!r}: {q[-30:]!r}")
    if not questions:
        return []
    contexts = [TOKENIZER.encode(q + " ") for q in questions]
    if max_new_tokens <= 0:
        return [Decoded("", True) for _ in questions]
    c = model.config
    limit = c.max_seq - c.prompt_len
    longest = max(len(ctx) for ctx in contexts)
    if longest > limit:
        raise ValueError(f"question of {longest} tokens does not fit max_seq {c.max_seq}")
    length = min(longest + max_new_tokens, limit)
    cache = _Cache(model, len(questions), length)
    out: list[list[int]] = [[] for _ in questions]
    done = np.zeros(len(questions), dtype=bool)
    truncated = np.zeros(len(questions), dtype=bool)
    end_ids = TOKENIZER.encode(END)
    ids = np.zeros(len(questions), dtype=np.int64)
    for t in range(length):
        for b, ctx in enumerate(contexts):
            if t < len(ctx):
                ids[b] = ctx[t]
            elif out[b]:
                ids[b] = out[b][-1]
        logits = cache.step(ids, t)
        nxt = logits.argmax(axis=-1)
        for b, ctx in enumerate(contexts):
            if done[b] or t < len(ctx) - 1:
                continue
            out[b].append(int(nxt[b]))
            if out[b][-len(end_ids):] == end_ids:
                done[b] = True
            elif len(out[b]) >= max_new_tokens or len(ctx) + len(out[b]) >= limit:
                done[b] = truncated[b] = True
        if done.all():
            break
    truncated |= ~done
    return [Decoded(TOKENIZER.decode(o), bool(tr)) for o, tr in zip(out, truncated)]


def greedy_decode(model: StudentModel, question: str, max_new_tokens: int) -> Decoded:
    return greedy_decode_batch(model, [question], max_new_tokens)[0]


def greedy_decode_reference(model: StudentModel, question: str, max_new_tokens: int) -> Decoded:
    """Uncached decoding that reruns the full forward pass for every token."""
    if not question.endswith(QUESTION_END):
        raise ValueError(f"question must end with {QUESTION_END!r}")
    ids = TOKENIZER.encode(question + " ")
    end_ids = TOKENIZER.encode(END)
    out: list[int] = []
    limit = model.config.max_seq - model.config.prompt_len
    with ad.no_grad():
        while len(out) < max_new_tokens and len(ids) + len(out) < limit:
            logits = model.lm_logits(model.features(np.array([ids + out]))).data[0, -1]
            out.append(int(logits.argmax()))
            if out[-len(end_ids):] == end_ids:
                return Decoded(TOKENIZER.decode(out), False)
    return Decoded(TOKENIZER.decode(out), True)


# ----------------------------------------------------------------------------
# accuracy


@dataclass
class EvalRecord:
    q: str
    gold: str
    completion: str
    extracted: str | None
    correct: bool
    truncated: bool


@dataclass
class EvalReport:
    dataset: str
    records: list[EvalRecord]

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def accuracy_fraction(self) -> Fraction:
        return Fraction(sum(r.correct for r in self.records), self.n)

    @property
    def accuracy(self) -> float:
        return float(self.accuracy_fraction)

    def summary(self) -> dict:
        f = self.accuracy_fraction
        return {"dataset": self.dataset, "n": self.n, "correct": f.numerator * (self.n // f.denominator),
                "accuracy": self.accuracy}

    def write(self, json_path, jsonl_path) -> None:
        Path(json_path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        with open(jsonl_path, "w", encoding="utf-8", newline="\n") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), ensure_ascii=False) + "\n")


def is_correct(extracted: str | None, gold: str) -> bool:
    return extracted is not None and normalize_answer(extracted) == normalize_answer(gold)


def accuracy(model: StudentModel, eval_set, max_new_tokens: int = 200, dataset: str = "eval",
             batch: int = 64) -> EvalReport:
    """Decode every (formatted question, gold answer) pair and score the extracted answers."""
    eval_set = list(eval_set)
    if not eval_set:
        raise ValueError("accuracy() needs a non-empty evaluation set")
    records = []
    for i in range(0, len(eval_set), batch):
        chunk = eval_set[i:i + batch]
        for (q, gold), dec in zip(chunk, greedy_decode_batch(model, [q for q, _ in chunk], max_new_tokens)):
            ext = extract_answer(dec.text)
            records.append(EvalRecord(q, gold, dec.text, ext, is_correct(ext, gold), dec.truncated))
    return EvalReport(dataset, records)


def eval_accuracy(model: StudentModel, eval_set, max_new_tokens: int = 200) -> float:
    return accuracy(model, eval_set, max_new_tokens).accuracy


# ----------------------------------------------------------------------------
# pooled features, probe, projection


def pooled_features(model: StudentModel, questions, batch: int = 64) -> np.ndarray:
    """Mean of final-layer features over question positions, the domain head's input."""
    k_p, max_seq = model.config.prompt_len, model.config.max_seq
    rows = []
    with ad.no_grad():
        for i in range(0, len(questions), batch):
            b = encode_questions(questions[i:i + batch], k_p, max_seq)
            rows.append(model.pooled(model.features(b.tokens), b.question_mask).data)
    return np.concatenate(rows, axis=0)


def fit_logistic(X: np.ndarray, y: np.ndarray, l2: float = 1e-2, iters: int = 50) -> np.ndarray:
    """Newton-method L2-regularized logistic regression; returns weights with bias last."""
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    w = np.zeros(Xb.shape[1])
    reg = l2 * np.eye(Xb.shape[1])
    reg[-1, -1] = 0.0
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-np.clip(Xb @ w, -500, 500)))
        grad = Xb.T @ (p - y) / len(y) + reg @ w
        hess = (Xb * (p * (1 - p))[:, None]).T @ Xb / len(y) + reg
        delta = np.linalg.solve(hess + 1e-10 * np.eye(len(w)), grad)
        w -= delta
        if np.max(np.abs(delta)) < 1e-12:
            break
    return w


@dataclass
class ProbeResult:
    accuracy: float
    n_train: int
    n_test: int


def domain_probe(model: StudentModel, source_questions, target_questions, seed: int = 0,
                 train_frac: float = 0.8) -> ProbeResult:
    """Held-out accuracy of a fresh linear classifier on frozen pooled features.

    Near 0.5 means the domains are indistinguishable; near 1.0 separable.
    """
    if len(source_questions) != len(target_questions):
        raise ValueError(f"probe needs balanced classes: {len(source_questions)} source vs "
                         f"{len(target_questions)} target questions")
    if len(source_questions) < 5:
        raise ValueError("probe needs at least 5 questions per domain")
    X = pooled_features(model, list(source_questions) + list(target_questions))
    y = np.r_[np.zeros(len(source_questions)), np.ones(len(target_questions))]
    order = np.random.default_rng(seed).permutation(len(y))
    cut = int(round(train_frac * len(y)))
    tr, te = order[:cut], order[cut:]
    mu, sd = X[tr].mean(axis=0), X[tr].std(axis=0) + 1e-12
    Z = (X - mu) / sd
    w = fit_logistic(Z[tr], y[tr])
    pred = (np.hstack([Z[te], np.ones((len(te), 1))]) @ w) > 0
    return ProbeResult(float(np.mean(pred == y[te])), len(tr), len(te))


def pca_2d(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project rows of X onto their top two principal axes.

    Returns (coords (n, 2), axes (2, d), mean (d,)). Each axis is flipped so its
    first non-negligible entry is positive.
    """
    X = np.asarray(X, dtype=float)
    mean = X.mean(axis=0)
    Xc = X - mean
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    axes = vt[:2].copy()
    if axes.shape[0] < 2:
        axes = np.vstack([axes, np.zeros((2 - axes.shape[0], X.shape[1]))])
    for i in range(2):
        nz = np.flatnonzero(np.abs(axes[i]) > 1e-12)
        if nz.size and axes[i, nz[0]] < 0:
            axes[i] = -axes[i]
    return Xc @ axes.T, axes, mean


@dataclass
class ProjectionExport:
    rows: list[tuple[float, float, str, str]]   # x, y, domain, arm

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "domain", "arm"])
        for x, y, d, a in self.rows:
            w.writerow([repr(float(x)), repr(float(y)), d, a])
        return buf.getvalue()

    def __add__(self, other: "ProjectionExport") -> "ProjectionExport":
        return ProjectionExport(self.rows + other.rows)


def project_embeddings(model: StudentModel, questions_by_domain: dict[str, list[str]],
                       arm: str = "model") -> ProjectionExport:
    """Principal-component projection of pooled question features, one row per question."""
    if len(questions_by_domain) < 2:
        raise ValueError("projection needs samples from at least two domains")
    for d, qs in questions_by_domain.items():
        if len(qs) < 10:
            raise ValueError(f"domain {d!r} has {len(qs)} samples; at least 10 required")
    labels, qs = [], []
    for d, items in questions_by_domain.items():
        labels += [d] * len(items)
        qs += list(items)
    coords, _, _ = pca_2d(pooled_features(model, qs))
    if not np.all(np.isfinite(coords)):
        raise FloatingPointError("non-finite projection coordinates")
    return ProjectionExport([(x, y, d, arm) for (x, y), d in zip(coords, labels)])
