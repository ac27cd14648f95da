"""Component ablation: four arms trained from one shared backbone and compared on held-out sets."""

from __future__ import annotations

import csv
import io
import logging
import statistics
import time
from dataclasses import dataclass, field, replace

from .evaluation import accuracy, domain_probe
from .model import StudentModel
from .training import AdversarialTrainer, ConfigError, LambdaSchedule, RunConfig, prompt_learning_stage

log = logging.getLogger(__name__)

CHECK = "✓"


@dataclass(frozen=True)
class Arm:
    """One row of the ablation table.

    ``prompts`` switches the prompt adapter (and Stage 1) on; ``domain`` switches
    the reversal-layer domain loss on. Both must agree with the concrete
    ``prompt_len`` and ``lam`` settings.
    """
    name: str
    prompts: bool
    domain: bool
    prompt_len: int
    lam: LambdaSchedule

    def validate(self) -> "Arm":
        if self.prompts and self.prompt_len == 0:
            raise ConfigError(f"arm {self.name!r} uses prompts but prompt_len is 0")
        if not self.prompts and self.prompt_len != 0:
            raise ConfigError(f"arm {self.name!r} has no prompts but prompt_len is {self.prompt_len}")
        active = self.lam.lam_max > 0
        if self.domain and not active:
            raise ConfigError(f"arm {self.name!r} uses the domain loss but lambda is 0")
        if not self.domain and active:
            raise ConfigError(f"arm {self.name!r} has no domain loss but lam_max is {self.lam.lam_max}")
        self.lam.validate()
        return self

    @property
    def components(self) -> tuple[bool, bool, bool]:
        return (True, self.prompts, self.domain)


def default_arms(prompt_len: int, lam: LambdaSchedule) -> list[Arm]:
    """The four component combinations: L_y, +L_p, +L_d, and all three."""
    off = LambdaSchedule("constant", 0.0)
    return [
        Arm("L_y", False, False, 0, off),
        Arm("L_y+L_p", True, False, prompt_len, off),
        Arm("L_y+L_d", False, True, 0, lam),
        Arm("full", True, True, prompt_len, lam),
    ]


def select_arms(names, prompt_len: int, lam: LambdaSchedule) -> list[Arm]:
    table = {a.name: a for a in default_arms(prompt_len, lam)}
    unknown = [n for n in names if n not in table]
    if unknown:
        raise ConfigError(f"unknown arms {unknown}; expected some of {list(table)}")
    return [table[n] for n in names]


@dataclass
class RunResult:
    arm: str
    column: str
    seed: int
    target_acc: float
    source_acc: float
    probe_acc: float
    steps: int
    seconds: float
    rows: list[dict] = field(default_factory=list, repr=False)


@dataclass
class AblationGrid:
    arms: list[Arm]
    columns: list[str]
    results: list[RunResult]

    def cell(self, arm: str, column: str, metric: str = "target_acc") -> list[float]:
        return [getattr(r, metric) for r in self.results if r.arm == arm and r.column == column]

    def mean(self, arm: str, column: str, metric: str = "target_acc") -> float:
        return statistics.fmean(self.cell(arm, column, metric))

    def std(self, arm: str, column: str, metric: str = "target_acc") -> float:
        vals = self.cell(arm, column, metric)
        return statistics.pstdev(vals) if len(vals) > 1 else 0.0

    def to_csv(self) -> str:
        """One row per arm: component flags, then mean target accuracy (percent) per column."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", "L_y", "L_p", "L_d", *self.columns])
        for a in self.arms:
            w.writerow([a.name, *(int(c) for c in a.components),
                        *(f"{100 * self.mean(a.name, col):.2f}" for col in self.columns)])
        return buf.getvalue()

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", "column", "seed", "target_acc", "source_acc", "probe_acc", "steps"])
        for r in self.results:
            w.writerow([r.arm, r.column, r.seed, repr(r.target_acc), repr(r.source_acc), repr(r.probe_acc),
                        r.steps])
        return buf.getvalue()

    def table(self) -> str:
        """Fixed-width text table: component checkmarks, then mean ± std per column."""
        width = max(16, *(len(c) + 2 for c in self.columns))
        head = f"{'L_y':^5}{'L_p':^5}{'L_d':^5}|" + "".join(f"{c:>{width}}" for c in self.columns)
        lines = [head, "-" * len(head)]
        for a in self.arms:
            marks = "".join(f"{CHECK if on else '':^5}" for on in a.components)
            cells = "".join(f"{100 * self.mean(a.name, c):>{width - 8}.2f} ± {100 * self.std(a.name, c):5.2f}"
                            for c in self.columns)
            lines.append(f"{marks}|{cells}")
        return "\n".join(lines) + "\n"


def run_arm(backbone: StudentModel, arm: Arm, data: dict, cfg: RunConfig, seed: int,
            column: str = "target", probe_size: int = 64, checkpoint_path=None) -> tuple[StudentModel, RunResult]:
    """Stage 1 (when the arm has prompts) and Stage 2 from a copy of ``backbone``."""
    arm.validate()
    cfg = replace(cfg, lam=arm.lam, seed=seed).validate()
    t0 = time.perf_counter()
    model = StudentModel.from_backbone(backbone, arm.prompt_len, seed)
    if arm.prompts:
        prompt_learning_stage(model, data["source"], cfg)
    trainer = AdversarialTrainer(model, data["source"], data["target"], cfg, data["source_eval"],
                                 data["target_eval"])
    st = trainer.run(checkpoint_path=checkpoint_path)
    tgt = accuracy(model, data["target_eval"], cfg.max_new_tokens, "target_eval").accuracy
    src = accuracy(model, data["source_eval"], cfg.max_new_tokens, "source_eval").accuracy
    n = min(probe_size, len(data["source_eval"]), len(data["target_eval"]))
    probe = domain_probe(model, [q for q, _ in data["source_eval"][:n]],
                         [q for q, _ in data["target_eval"][:n]], seed=seed).accuracy
    res = RunResult(arm.name, column, seed, tgt, src, probe, st.step, time.perf_counter() - t0, st.rows)
    log.info("arm %s seed %d: target %.3f source %.3f probe %.3f (%d steps, %.0fs)",
             arm.name, seed, tgt, src, probe, st.step, res.seconds)
    return model, res


def run_ablation(backbone: StudentModel, arms: list[Arm], datasets: dict[str, dict], cfg: RunConfig,
                 seeds, probe_size: int = 64) -> AblationGrid:
    """Train every arm for every seed on every target column.

    All runs start from the same ``backbone`` weights and use the same
    evaluation sets for a given column.
    """
    if not arms:
        raise ConfigError("no ablation arms selected")
    if not seeds:
        raise ConfigError("no seeds given")
    for a in arms:
        a.validate()
    results = []
    for column, data in datasets.items():
        for arm in arms:
            for seed in seeds:
                _, res = run_arm(backbone, arm, data, cfg, seed, column, probe_size)
                results.append(res)
    return AblationGrid(list(arms), list(datasets), results)
