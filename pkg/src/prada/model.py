"""Student model: tiny decoder-only transformer, LM head, deep prompt banks, domain head.

Parameters live in four disjoint groups so each can be frozen or given its own
learning rate:

    theta_f  token/position embeddings and the transformer blocks
    theta_y  final layer norm and vocabulary projection
    prompt   one (k_p, H) prompt bank per layer
    theta_d  domain classifier MLP (H -> H/2 -> classes)
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ALPHABET = "".join(chr(c) for c in range(32, 127)) + "\n"
GROUPS = ("theta_f", "theta_y", "prompt", "theta_d")
MAGIC = b"PRADA1\0"


class LengthError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class CharTokenizer:
    """Character-level tokenizer over 95 printable ASCII symbols plus newline."""

    def __init__(self, alphabet: str = ALPHABET):
        self.alphabet = alphabet
        self._index = {ch: i for i, ch in enumerate(alphabet)}

    @property
    def vocab_size(self) -> int:
        return len(self.alphabet)

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[ch] for ch in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} is outside the tokenizer alphabet") from None

    def decode(self, ids) -> str:
        return "".join(self.alphabet[int(i)] for i in ids)


TOKENIZER = CharTokenizer()


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 96
    hidden: int = 32
    layers: int = 2
    heads: int = 2
    max_seq: int = 256
    prompt_len: int = 4
    domain_classes: int = 2
    mlp_ratio: int = 4

    def validate(self) -> "ModelConfig":
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} is not divisible by heads {self.heads}")
        if self.prompt_len < 0 or self.layers < 0:
            raise ValueError("prompt_len and layers must be non-negative")
        if self.max_seq <= self.prompt_len:
            raise ValueError("max_seq must exceed prompt_len")
        if self.hidden < 2 or self.domain_classes < 2:
            raise ValueError("hidden and domain_classes must be at least 2")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ----------------------------------------------------------------------------
# batches


@dataclass
class SequenceBatch:
    """Padded token batch with per-position masks over the prompt-extended sequence.

    Position s of the model input is a prompt slot for s < k_p and token
    s - k_p otherwise; logits at s predict the token at s + 1.
    """

    tokens: np.ndarray          # (B, T) int
    targets: np.ndarray         # (B, k_p + T) int
    loss_mask: np.ndarray       # (B, k_p + T)
    question_mask: np.ndarray   # (B, k_p + T)
    prompt_len: int

    def __len__(self) -> int:
        return self.tokens.shape[0]


def _pad(rows: list[list[int]]) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.zeros((len(rows), width), dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def _check_len(n: int, k_p: int, max_seq: int) -> None:
    if n + k_p > max_seq:
        raise LengthError(f"sequence of {n} tokens plus {k_p} prompt slots exceeds max_seq {max_seq}")


def encode_pairs(pairs, k_p: int, max_seq: int, tokenizer: CharTokenizer = TOKENIZER) -> SequenceBatch:
    """Encode (formatted question, completion) pairs.

    The model sees ``question + " " + completion``; loss covers completion
    tokens only and the question mask covers the formatted question.
    """
    rows, spans = [], []
    for q, c in pairs:
        context = tokenizer.encode(q + " ")
        ids = context + tokenizer.encode(c)
        _check_len(len(ids), k_p, max_seq)
        rows.append(ids)
        spans.append((len(q), len(context), len(ids)))
    tokens = _pad(rows)
    B, T = tokens.shape
    S = k_p + T
    targets = np.zeros((B, S), dtype=np.int64)
    loss = np.zeros((B, S))
    qmask = np.zeros((B, S))
    for i, (nq, nctx, n) in enumerate(spans):
        targets[i, k_p - 1 if k_p else 0:k_p + n - 1] = tokens[i, 0 if k_p else 1:n]
        loss[i, k_p + nctx - 1:k_p + n - 1] = 1.0
        qmask[i, k_p:k_p + nq] = 1.0
    return SequenceBatch(tokens, targets, loss, qmask, k_p)


def encode_questions(questions, k_p: int, max_seq: int, tokenizer: CharTokenizer = TOKENIZER) -> SequenceBatch:
    """Question-only batch (target domain); no loss positions."""
    rows = []
    for q in questions:
        ids = tokenizer.encode(q)
        _check_len(len(ids), k_p, max_seq)
        rows.append(ids)
    tokens = _pad(rows)
    B, T = tokens.shape
    qmask = np.zeros((B, k_p + T))
    for i, r in enumerate(rows):
        qmask[i, k_p:k_p + len(r)] = 1.0
    return SequenceBatch(tokens, np.zeros((B, k_p + T), dtype=np.int64), np.zeros((B, k_p + T)), qmask, k_p)


def encode_text(lines, max_seq: int, tokenizer: CharTokenizer = TOKENIZER) -> SequenceBatch:
    """Plain next-token batch without prompt slots, every real token scored."""
    rows = []
    for line in lines:
        ids = tokenizer.encode(line)
        _check_len(len(ids), 0, max_seq)
        rows.append(ids)
    tokens = _pad(rows)
    B, T = tokens.shape
    targets = np.zeros((B, T), dtype=np.int64)
    targets[:, :-1] = tokens[:, 1:]
    loss = np.zeros((B, T))
    for i, r in enumerate(rows):
        loss[i, :len(r) - 1] = 1.0
    return SequenceBatch(tokens, targets, loss, np.zeros((B, T)), 0)


# ----------------------------------------------------------------------------
# model


class StudentModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config.validate()
        self.params: dict[str, Tensor] = {}
        self.groups: dict[str, list[str]] = {g: [] for g in GROUPS}
        self._init(np.random.default_rng(seed))

    # -- construction -------------------------------------------------------

    def _add(self, group: str, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)
        self.groups[group].append(name)

    def _init(self, rng: np.random.Generator) -> None:
        c = self.config
        H, V, L = c.hidden, c.vocab_size, c.layers
        F = c.mlp_ratio * H
        std = 0.02
        proj_std = std / np.sqrt(2 * max(L, 1))
        self._add("theta_f", "tok_emb", rng.normal(0, std, (V, H)))
        self._add("theta_f", "pos_emb", rng.normal(0, std, (c.max_seq, H)))
        for l in range(L):
            p = f"h{l}."
            self._add("theta_f", p + "ln1.g", np.ones(H))
            self._add("theta_f", p + "ln1.b", np.zeros(H))
            self._add("theta_f", p + "attn.w_qkv", rng.normal(0, std, (H, 3 * H)))
            self._add("theta_f", p + "attn.b_qkv", np.zeros(3 * H))
            self._add("theta_f", p + "attn.w_o", rng.normal(0, proj_std, (H, H)))
            self._add("theta_f", p + "attn.b_o", np.zeros(H))
            self._add("theta_f", p + "ln2.g", np.ones(H))
            self._add("theta_f", p + "ln2.b", np.zeros(H))
            self._add("theta_f", p + "mlp.w1", rng.normal(0, std, (H, F)))
            self._add("theta_f", p + "mlp.b1", np.zeros(F))
            self._add("theta_f", p + "mlp.w2", rng.normal(0, proj_std, (F, H)))
            self._add("theta_f", p + "mlp.b2", np.zeros(H))
        self._add("theta_y", "lm.ln.g", np.ones(H))
        self._add("theta_y", "lm.ln.b", np.zeros(H))
        self._add("theta_y", "lm.w", rng.normal(0, std, (H, V)))
        self._add("theta_y", "lm.b", np.zeros(V))
        self._init_prompts(rng)
        Hd = H // 2
        self._add("theta_d", "dom.w1", rng.normal(0, 1 / np.sqrt(H), (H, Hd)))
        self._add("theta_d", "dom.b1", np.zeros(Hd))
        self._add("theta_d", "dom.w2", rng.normal(0, 1 / np.sqrt(Hd), (Hd, c.domain_classes)))
        self._add("theta_d", "dom.b2", np.zeros(c.domain_classes))

    def _init_prompts(self, rng: np.random.Generator) -> None:
        c = self.config
        if c.prompt_len == 0:
            return
        for l in range(max(c.layers, 1)):
            self._add("prompt", f"prompt.{l}", rng.normal(0, 0.02, (c.prompt_len, c.hidden)))

    @classmethod
    def from_backbone(cls, source: "StudentModel", prompt_len: int, seed: int) -> "StudentModel":
        """Copy theta_f, theta_y and theta_d from ``source``; seed fresh prompt banks."""
        cfg = ModelConfig.from_dict({**source.config.to_dict(), "prompt_len": prompt_len})
        model = cls.__new__(cls)
        model.config = cfg.validate()
        model.params, model.groups = {}, {g: [] for g in GROUPS}
        for g in ("theta_f", "theta_y"):
            for name in source.groups[g]:
                model._add(g, name, source.params[name].data.copy())
        model._init_prompts(np.random.default_rng(seed))
        for name in source.groups["theta_d"]:
            model._add("theta_d", name, source.params[name].data.copy())
        return model

    def clone(self) -> "StudentModel":
        model = self.__class__.__new__(self.__class__)
        model.config = self.config
        model.params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                        for k, v in self.params.items()}
        model.groups = {g: list(names) for g, names in self.groups.items()}
        return model

    # -- parameter access ---------------------------------------------------

    def group_params(self, group: str) -> list[Tensor]:
        return [self.params[n] for n in self.groups[group]]

    def group_of(self, name: str) -> str:
        for g, names in self.groups.items():
            if name in names:
                return g
        raise KeyError(name)

    def set_trainable(self, groups) -> None:
        groups = set(groups)
        for g, names in self.groups.items():
            for n in names:
                self.params[n].requires_grad = g in groups

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=ad.DTYPE)

    def group_hash(self, group: str) -> str:
        h = hashlib.sha256()
        for name in self.groups[group]:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def parameter_counts(self) -> dict[str, int]:
        counts = {g: int(sum(self.params[n].data.size for n in names)) for g, names in self.groups.items()}
        counts["embedding"] = int(self.params["tok_emb"].data.size)
        counts["total"] = sum(counts[g] for g in GROUPS)
        return counts

    # -- forward ------------------------------------------------------------

    def attach_prompts(self, tokens, use_prompts: bool = True) -> Tensor:
        """Layer-0 input: prompt bank 0 as a prefix, then token plus position embeddings."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        B, T = tokens.shape
        k_p = self.config.prompt_len if use_prompts else 0
        _check_len(T, k_p, self.config.max_seq)
        p = self.params
        x = ad.embedding_gather(p["tok_emb"], tokens) + p["pos_emb"][:T]
        if k_p:
            bank = ad.expand(p["prompt.0"], (B, k_p, self.config.hidden))
            x = ad.concat_rows([bank, x], axis=1)
        return x

    def forward_features(self, x: Tensor, use_prompts: bool = True) -> Tensor:
        """Causal transformer stack; returns the residual stream (B, S, H)."""
        c = self.config
        k_p = c.prompt_len if use_prompts else 0
        p = self.params
        B, S, H = x.shape
        nh, hd = c.heads, H // c.heads
        for l in range(c.layers):
            pre = f"h{l}."
            if l > 0 and k_p:
                bank = ad.expand(p[f"prompt.{l}"], (B, k_p, H))
                x = ad.concat_rows([bank, x[:, k_p:]], axis=1)
            h = ad.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            qkv = ad.linear(h, p[pre + "attn.w_qkv"], p[pre + "attn.b_qkv"])
            qkv = ad.transpose(ad.reshape(qkv, (B, S, 3, nh, hd)), (2, 0, 3, 1, 4))
            att = ad.causal_attention(qkv[0], qkv[1], qkv[2])
            att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, S, H))
            x = x + ad.linear(att, p[pre + "attn.w_o"], p[pre + "attn.b_o"])
            h = ad.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            h = ad.gelu(ad.linear(h, p[pre + "mlp.w1"], p[pre + "mlp.b1"]))
            x = x + ad.linear(h, p[pre + "mlp.w2"], p[pre + "mlp.b2"])
        return x

    def features(self, tokens, use_prompts: bool = True) -> Tensor:
        return self.forward_features(self.attach_prompts(tokens, use_prompts), use_prompts)

    def lm_logits(self, features: Tensor) -> Tensor:
        p = self.params
        h = ad.layer_norm(features, p["lm.ln.g"], p["lm.ln.b"])
        return ad.linear(h, p["lm.w"], p["lm.b"])

    def pooled(self, features: Tensor, question_mask) -> Tensor:
        return ad.mean_pool_rows(features, question_mask)

    def domain_logits(self, features: Tensor, question_mask, reverse: bool = True,
                      detach: bool = False) -> Tensor:
        """Mean-pool question rows, pass through the reversal layer, classify.

        ``detach`` cuts the graph below the pooled features so only theta_d
        sees the domain loss.
        """
        p = self.params
        z = self.pooled(features, question_mask)
        if detach:
            z = ad.detach(z)
        elif reverse:
            z = ad.grad_reverse(z)
        h = ad.tanh(ad.linear(z, p["dom.w1"], p["dom.b1"]))
        return ad.linear(h, p["dom.w2"], p["dom.b2"])


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: StudentModel, extra: dict | None = None,
                    arrays: dict[str, np.ndarray] | None = None) -> None:
    """Write magic, a length-prefixed JSON header, then raw little-endian float64 arrays.

    ``arrays`` adds named non-parameter arrays (optimizer state and the like).
    """
    entries, blobs, offset = [], [], 0
    named = [(n, model.params[n].data, model.group_of(n)) for n in model.params]
    named += [(n, a, None) for n, a in (arrays or {}).items()]
    for name, arr, group in named:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "group": group, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": model.config.to_dict(), "arrays": entries, "extra": extra or {}},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack_from("<Q", blob, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(blob[start:start + n].decode("utf-8"))
    base = start + n
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=base + e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return header, arrays


def load_checkpoint(path, expect: ModelConfig | None = None) -> tuple[StudentModel, dict, dict[str, np.ndarray]]:
    """Rebuild a model from ``path``; returns (model, extra, non-parameter arrays)."""
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    if expect is not None and (cfg.hidden, cfg.vocab_size) != (expect.hidden, expect.vocab_size):
        raise CheckpointError(
            f"checkpoint {path} has hidden={cfg.hidden}, vocab={cfg.vocab_size} but config "
            f"expects hidden={expect.hidden}, vocab={expect.vocab_size}")
    model = StudentModel.__new__(StudentModel)
    model.config = cfg.validate()
    model.params, model.groups = {}, {g: [] for g in GROUPS}
    others = {}
    for e in header["arrays"]:
        if e["group"] is None:
            others[e["name"]] = arrays[e["name"]]
        else:
            model._add(e["group"], e["name"], arrays[e["name"]])
    return model, header.get("extra", {}), others
