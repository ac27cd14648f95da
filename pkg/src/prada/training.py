"""Training stages: backbone pretraining, prompt learning, domain-adversarial fine-tuning.

The adversarial objective is recorded on one tape as

    L_y + lambda * (L_d(source) + L_d(target))

with the pooled question features passed through the gradient reversal layer
before the domain head. Plain SGD on that objective gives exactly

    theta_f <- theta_f - mu * (dL_y/dtheta_f - lambda * dL_d/dtheta_f)
    theta_y <- theta_y - mu * dL_y/dtheta_y
    theta_d <- theta_d - mu * lambda * dL_d/dtheta_d
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .model import (GROUPS, SequenceBatch, StudentModel, encode_pairs, encode_questions, encode_text,
                    load_checkpoint, save_checkpoint)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "L_y", "L_d_src", "L_d_tgt", "lambda", "src_acc", "tgt_acc")
OPTIMIZERS = ("sgd", "momentum", "adam")
SCHEDULES = ("constant", "dann_ramp")


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# configuration


@dataclass
class LambdaSchedule:
    kind: str = "dann_ramp"
    lam_max: float = 1.0
    gamma: float = 10.0

    def validate(self) -> "LambdaSchedule":
        if self.kind not in SCHEDULES:
            raise ConfigError(f"unknown lambda schedule {self.kind!r}; expected one of {SCHEDULES}")
        if self.lam_max < 0:
            raise ConfigError("lam_max must be non-negative")
        return self


def lambda_at(schedule: LambdaSchedule, p: float) -> float:
    """Domain-loss weight at training progress ``p`` in [0, 1]."""
    if not 0.0 <= p <= 1.0:
        warnings.warn(f"training progress {p} outside [0, 1]; clamping", stacklevel=2)
        p = min(max(p, 0.0), 1.0)
    if schedule.kind == "constant":
        return float(schedule.lam_max)
    if schedule.kind == "dann_ramp":
        return float(schedule.lam_max * (2.0 / (1.0 + math.exp(-schedule.gamma * p)) - 1.0))
    raise ConfigError(f"unknown lambda schedule {schedule.kind!r}")


@dataclass
class RunConfig:
    mu_prompt: float = 1e-3
    mu_finetune: float = 5e-5
    lam: LambdaSchedule = field(default_factory=LambdaSchedule)
    batch_source: int = 16
    batch_target: int = 16
    optimizer: str = "sgd"
    prompt_keeps_rate: bool = False
    pretrain_steps: int = 2000
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 16
    pretrain_lines: int = 6000
    prompt_steps: int = 500
    max_steps: int = 6000
    patience: int = 5
    eval_every: int = 500
    eval_size: int = 64
    max_new_tokens: int = 200
    checkpoint_every: int = 500
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        self.lam.validate()
        if not 1e-4 <= self.mu_prompt <= 1e-3:
            raise ConfigError(f"mu_prompt={self.mu_prompt} outside the prompt-learning range [1e-4, 1e-3]")
        if not 1e-6 <= self.mu_finetune <= 1e-4:
            raise ConfigError(f"mu_finetune={self.mu_finetune} outside the fine-tuning range [1e-6, 1e-4]")
        if self.mu_prompt < 10 * self.mu_finetune * (1 - 1e-12):
            raise ConfigError(
                f"learning-rate difference strategy violated: mu_prompt/mu_finetune = "
                f"{self.mu_prompt / self.mu_finetune:.3g} < 10 (prompt learning must run an order "
                f"of magnitude hotter than overall fine-tuning)")
        for name in ("batch_source", "batch_target", "pretrain_batch", "pretrain_lines", "eval_every",
                     "eval_size", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if abs(self.batch_source - self.batch_target) > 1:
            raise ConfigError("source and target batch sizes must be balanced (differ by at most 1)")
        for name in ("pretrain_steps", "prompt_steps", "max_steps", "patience", "max_new_tokens"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "lam" in d and isinstance(d["lam"], dict):
            extra = set(d["lam"]) - {"kind", "lam_max", "gamma"}
            if extra:
                raise ConfigError(f"unknown lambda schedule keys: {sorted(extra)}")
            d["lam"] = LambdaSchedule(**d["lam"])
        return cls(**d)


# ----------------------------------------------------------------------------
# optimizers


class SGD:
    kind = "sgd"

    def __init__(self, lrs: dict[str, float]):
        self.lrs = dict(lrs)

    def step(self, model: StudentModel, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            lr = self.lrs.get(model.group_of(name), 0.0)
            if lr:
                p = model.params[name]
                p.data = p.data - lr * g

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        pass


class Momentum(SGD):
    kind = "momentum"

    def __init__(self, lrs, beta: float = 0.9):
        super().__init__(lrs)
        self.beta = beta
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, model, grads):
        for name, g in grads.items():
            lr = self.lrs.get(model.group_of(name), 0.0)
            if not lr:
                continue
            v = self.beta * self.velocity.get(name, 0.0) + g
            self.velocity[name] = v
            p = model.params[name]
            p.data = p.data - lr * v

    def state_dict(self):
        return {f"v.{k}": v for k, v in self.velocity.items()}

    def load_state_dict(self, state):
        self.velocity = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("v.")}


class Adam(SGD):
    kind = "adam"

    def __init__(self, lrs, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(lrs)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, model, grads):
        for name, g in grads.items():
            lr = self.lrs.get(model.group_of(name), 0.0)
            if not lr:
                continue
            t = self.t.get(name, 0) + 1
            m = self.b1 * self.m.get(name, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(name, 0.0) + (1 - self.b2) * (g * g)
            self.m[name], self.v[name], self.t[name] = m, v, t
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            p = model.params[name]
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        out.update({f"t.{k}": np.array(float(v)) for k, v in self.t.items()})
        return out

    def load_state_dict(self, state):
        self.m = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("m.")}
        self.v = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("v.")}
        self.t = {k[2:]: int(v) for k, v in state.items() if k.startswith("t.")}


def make_optimizer(kind: str, lrs: dict[str, float]):
    try:
        return {"sgd": SGD, "momentum": Momentum, "adam": Adam}[kind](lrs)
    except KeyError:
        raise ConfigError(f"unknown optimizer {kind!r}") from None


def trainable_grads(model: StudentModel) -> dict[str, np.ndarray]:
    """Collect and clear leaf gradients so a later step never reuses a stale one."""
    out = {}
    for n, p in model.params.items():
        if p.requires_grad and p.grad is not None:
            out[n] = p.grad
        p.grad = None
    return out


# ----------------------------------------------------------------------------
# sampling


class EpochSampler:
    """Shuffled index batches; reshuffles on every pass through the data."""

    def __init__(self, n: int, batch: int, seed):
        if n < 1:
            raise ConfigError("cannot sample from an empty dataset")
        self.n, self.batch = n, batch
        self.rng = np.random.default_rng(seed)
        self.perm = self.rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        out = []
        while len(out) < self.batch:
            if self.pos == self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            take = min(self.batch - len(out), self.n - self.pos)
            out.extend(self.perm[self.pos:self.pos + take].tolist())
            self.pos += take
        return np.array(out)

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "perm": self.perm.tolist(), "pos": self.pos}

    def restore(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.perm = np.array(state["perm"], dtype=np.int64)
        self.pos = int(state["pos"])


# ----------------------------------------------------------------------------
# stage 0: backbone pretraining


def lm_loss(model: StudentModel, batch: SequenceBatch, use_prompts: bool = True) -> ad.Tensor:
    feats = model.features(batch.tokens, use_prompts=use_prompts)
    return ad.softmax_cross_entropy(model.lm_logits(feats), batch.targets, batch.loss_mask)


def text_loss(model: StudentModel, lines, batch: int = 64) -> float:
    """Mean next-token CE over ``lines`` (token weighted), without prompts."""
    total, count = 0.0, 0.0
    for i in range(0, len(lines), batch):
        b = encode_text(lines[i:i + batch], model.config.max_seq)
        n = b.loss_mask.sum()
        total += lm_loss(model, b, use_prompts=False).item() * n
        count += n
    return total / count


def pretrain_backbone(model: StudentModel, corpus: list[str], steps: int, lr: float = 3e-3,
                      batch: int = 16, seed: int = 0) -> list[float]:
    """Next-token training of theta_f and theta_y on plain text (Adam, no prompts)."""
    losses = []
    if steps == 0:
        return losses
    model.set_trainable(("theta_f", "theta_y"))
    opt = Adam({"theta_f": lr, "theta_y": lr})
    sampler = EpochSampler(len(corpus), batch, [seed, 0])
    try:
        for step in range(steps):
            b = encode_text([corpus[i] for i in sampler.next()], model.config.max_seq)
            with ad.Tape() as tape:
                loss = lm_loss(model, b, use_prompts=False)
                tape.backward(loss)
            _guard(loss.item(), step, "pretrain")
            opt.step(model, trainable_grads(model))
            losses.append(loss.item())
    finally:
        model.set_trainable(GROUPS)
    return losses


# ----------------------------------------------------------------------------
# stage 1: prompt learning


def completion_loss(model: StudentModel, pairs, batch: int = 64) -> float:
    """Mean completion-token CE over (question, completion) pairs."""
    total, count = 0.0, 0.0
    for i in range(0, len(pairs), batch):
        b = encode_pairs(pairs[i:i + batch], model.config.prompt_len, model.config.max_seq)
        n = b.loss_mask.sum()
        total += lm_loss(model, b).item() * n
        count += n
    return total / count


def prompt_learning_stage(model: StudentModel, source, cfg: RunConfig, steps: int | None = None) -> list[float]:
    """Train only the prompt banks on completion CE at ``mu_prompt``."""
    if not source:
        raise ConfigError("prompt learning needs a non-empty source set")
    steps = cfg.prompt_steps if steps is None else steps
    if model.config.prompt_len == 0:
        warnings.warn("prompt_len is 0: prompt learning stage is a no-op", stacklevel=2)
        return []
    pairs = [(r.q, r.c) for r in source]
    model.set_trainable(("prompt",))
    opt = make_optimizer(cfg.optimizer, {"prompt": cfg.mu_prompt})
    sampler = EpochSampler(len(pairs), cfg.batch_source, [cfg.seed, 1])
    losses = []
    try:
        for step in range(steps):
            b = encode_pairs([pairs[i] for i in sampler.next()], model.config.prompt_len, model.config.max_seq)
            with ad.Tape() as tape:
                loss = lm_loss(model, b)
                tape.backward(loss)
            _guard(loss.item(), step, "prompt")
            opt.step(model, trainable_grads(model))
            losses.append(loss.item())
    finally:
        model.set_trainable(GROUPS)
    return losses


# ----------------------------------------------------------------------------
# stage 2: domain-adversarial fine-tuning


@dataclass
class StepLosses:
    L_y: float
    L_d_src: float
    L_d_tgt: float

    @property
    def L_d(self) -> float:
        return self.L_d_src + self.L_d_tgt


def finetune_lrs(cfg: RunConfig) -> dict[str, float]:
    lrs = {g: cfg.mu_finetune for g in GROUPS}
    if cfg.prompt_keeps_rate:
        lrs["prompt"] = cfg.mu_prompt
    return lrs


def _domain_labels(n: int, label: int) -> np.ndarray:
    return np.full(n, label, dtype=np.int64)


def adversarial_objective(model: StudentModel, src: SequenceBatch, tgt: SequenceBatch, lam: float,
                          reverse: bool = True):
    """Record the joint objective on the active tape; returns (total, L_y, L_d_src, L_d_tgt).

    With ``lam == 0`` the domain head runs on detached features (probe mode):
    theta_d still learns to classify domains while the other groups see only L_y.
    """
    probe = lam == 0
    f_s = model.features(src.tokens)
    L_y = ad.softmax_cross_entropy(model.lm_logits(f_s), src.targets, src.loss_mask)
    if probe:
        with ad.no_grad():
            f_t = model.features(tgt.tokens)
    else:
        f_t = model.features(tgt.tokens)
    d_s = ad.softmax_cross_entropy(model.domain_logits(f_s, src.question_mask, reverse, detach=probe),
                                   _domain_labels(len(src), 0))
    d_t = ad.softmax_cross_entropy(model.domain_logits(f_t, tgt.question_mask, reverse, detach=probe),
                                   _domain_labels(len(tgt), 1))
    domain = d_s + d_t
    total = L_y + (domain if probe else ad.scale(domain, lam))
    return total, L_y, d_s, d_t


def adversarial_step(model: StudentModel, optimizer, src: SequenceBatch, tgt: SequenceBatch,
                     lam: float) -> StepLosses:
    """One optimizer step on the reversal-layer objective for every trainable group."""
    if abs(len(src) - len(tgt)) > 1:
        raise ad.ContractError(f"domain labels unbalanced: {len(src)} source vs {len(tgt)} target rows")
    with ad.Tape() as tape:
        total, L_y, d_s, d_t = adversarial_objective(model, src, tgt, lam)
        if not np.isfinite(total.item()):
            raise DivergenceError(f"non-finite objective: L_y={L_y.item()} L_d_src={d_s.item()} "
                                  f"L_d_tgt={d_t.item()} lambda={lam}")
        tape.backward(total)
    optimizer.step(model, trainable_grads(model))
    return StepLosses(L_y.item(), d_s.item(), d_t.item())


def vanilla_step(model: StudentModel, optimizer, src: SequenceBatch) -> float:
    """Plain fine-tuning step on L_y alone (the no-adaptation baseline)."""
    with ad.Tape() as tape:
        L_y = lm_loss(model, src)
        tape.backward(L_y)
    optimizer.step(model, trainable_grads(model))
    return L_y.item()


def _guard(value: float, step: int, stage: str) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"{stage} loss became non-finite at step {step}")


@dataclass
class TrainState:
    step: int = 0
    best_acc: float = -1.0
    best_step: int = -1
    bad_evals: int = 0
    best_state: dict[str, np.ndarray] | None = None
    rows: list[dict] = field(default_factory=list)
    stopped: str = ""


def metric_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (repr(float(r[c])) if c != "step" else int(r[c]))
                    for c in METRIC_COLUMNS])
    return buf.getvalue()


def read_metric_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for r in csv.DictReader(fh):
            rows.append({k: (int(v) if k == "step" else (float(v) if v != "" else None)) for k, v in r.items()})
        return rows


class AdversarialTrainer:
    """Stage-2 loop with evaluation, early stopping and resumable state."""

    def __init__(self, model: StudentModel, source, target_questions, cfg: RunConfig,
                 source_eval=None, target_eval=None, evaluate: Callable | None = None):
        if not source:
            raise ConfigError("adversarial training needs source samples")
        if not target_questions:
            raise ConfigError("adversarial training needs target questions")
        self.model, self.cfg = model, cfg.validate()
        self.pairs = [(r.q, r.c) for r in source]
        self.target = list(target_questions)
        self.source_eval = list(source_eval or [])[:cfg.eval_size]
        self.target_eval = list(target_eval or [])[:cfg.eval_size]
        if evaluate is None:
            from .evaluation import eval_accuracy as evaluate
        self.evaluate = evaluate
        self.optimizer = make_optimizer(cfg.optimizer, finetune_lrs(cfg))
        self.src_sampler = EpochSampler(len(self.pairs), cfg.batch_source, [cfg.seed, 2])
        self.tgt_sampler = EpochSampler(len(self.target), cfg.batch_target, [cfg.seed, 3])
        self.state = TrainState()

    def batches(self) -> tuple[SequenceBatch, SequenceBatch]:
        k_p, max_seq = self.model.config.prompt_len, self.model.config.max_seq
        src = encode_pairs([self.pairs[i] for i in self.src_sampler.next()], k_p, max_seq)
        tgt = encode_questions([self.target[i] for i in self.tgt_sampler.next()], k_p, max_seq)
        return src, tgt

    def lam_now(self) -> float:
        p = self.state.step / max(self.cfg.max_steps, 1)
        return lambda_at(self.cfg.lam, min(p, 1.0))

    def _eval(self, row: dict) -> None:
        cfg, st = self.cfg, self.state
        if self.source_eval:
            acc = self.evaluate(self.model, self.source_eval, cfg.max_new_tokens)
            row["src_acc"] = acc
            if acc >= st.best_acc:
                if acc > st.best_acc:
                    st.bad_evals = 0
                else:
                    st.bad_evals += 1
                st.best_acc, st.best_step = acc, st.step
                st.best_state = self.model.state_dict()
            else:
                st.bad_evals += 1
        if self.target_eval:
            row["tgt_acc"] = self.evaluate(self.model, self.target_eval, cfg.max_new_tokens)

    def run(self, halt_at: int | None = None, checkpoint_path=None) -> TrainState:
        """Train until ``max_steps`` or patience runs out; restores the best snapshot.

        ``halt_at`` stops early after that many total steps without restoring,
        leaving the resumable state in ``checkpoint_path``.
        """
        cfg, st = self.cfg, self.state
        while st.step < cfg.max_steps and not st.stopped:
            if halt_at is not None and st.step >= halt_at:
                return st
            lam = self.lam_now()
            src, tgt = self.batches()
            try:
                losses = adversarial_step(self.model, self.optimizer, src, tgt, lam)
            except DivergenceError as exc:
                raise DivergenceError(f"step {st.step}: {exc}") from None
            st.step += 1
            row = {"step": st.step, "L_y": losses.L_y, "L_d_src": losses.L_d_src,
                   "L_d_tgt": losses.L_d_tgt, "lambda": lam, "src_acc": None, "tgt_acc": None}
            if st.step % cfg.eval_every == 0 or st.step == cfg.max_steps:
                self._eval(row)
                if self.source_eval and cfg.patience and st.bad_evals >= cfg.patience:
                    st.stopped = "patience"
            st.rows.append(row)
            if checkpoint_path is not None and (st.step % cfg.checkpoint_every == 0):
                self.save(checkpoint_path)
        if not st.stopped:
            st.stopped = "max_steps"
        if st.best_state is not None:
            self.model.load_state_dict(st.best_state)
        return st

    # -- resumable state --------------------------------------------------

    def save(self, path) -> None:
        st = self.state
        arrays = {f"opt.{k}": np.asarray(v, dtype=float) for k, v in self.optimizer.state_dict().items()}
        if st.best_state is not None:
            arrays.update({f"best.{k}": v for k, v in st.best_state.items()})
        extra = {
            "kind": "adversarial_resume",
            "config": self.cfg.to_dict(),
            "step": st.step, "best_acc": st.best_acc, "best_step": st.best_step,
            "bad_evals": st.bad_evals, "stopped": st.stopped, "rows": st.rows,
            "src_sampler": self.src_sampler.state(), "tgt_sampler": self.tgt_sampler.state(),
        }
        tmp = Path(str(path) + ".tmp")
        save_checkpoint(tmp, self.model, extra=extra, arrays=arrays)
        tmp.replace(path)

    def restore(self, path) -> None:
        model, extra, arrays = load_checkpoint(path, expect=self.model.config)
        if extra.get("kind") != "adversarial_resume":
            raise ConfigError(f"{path} is not an adversarial-stage resume checkpoint")
        self.model.load_state_dict(model.state_dict())
        self.optimizer.load_state_dict({k[4:]: v for k, v in arrays.items() if k.startswith("opt.")})
        best = {k[5:]: v for k, v in arrays.items() if k.startswith("best.")}
        st = self.state
        st.step, st.best_acc, st.best_step = extra["step"], extra["best_acc"], extra["best_step"]
        st.bad_evals, st.stopped, st.rows = extra["bad_evals"], extra["stopped"], extra["rows"]
        st.best_state = best or None
        self.src_sampler.restore(extra["src_sampler"])
        self.tgt_sampler.restore(extra["tgt_sampler"])


def train_adversarial(model: StudentModel, source, target_questions, cfg: RunConfig,
                      source_eval=None, target_eval=None) -> tuple[StudentModel, list[dict]]:
    trainer = AdversarialTrainer(model, source, target_questions, cfg, source_eval, target_eval)
    st = trainer.run()
    log.info("adversarial stage stopped (%s) at step %d; best source acc %.3f at step %d",
             st.stopped, st.step, st.best_acc, st.best_step)
    return model, st.rows


def write_metrics(path, rows: list[dict]) -> None:
    Path(path).write_text(metric_csv(rows), encoding="utf-8")


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
