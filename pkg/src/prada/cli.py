"""Command-line interface: ``prada <subcommand> ...``.

Subcommands: gen, train, eval, ablate, project, plot, rerun. Every command
writes into an output directory guarded by a lock file and records a
manifest.json with the config snapshot, seed, input digests, artifact digests
and per-stage wall-clock time.

Configuration precedence is flag > config file > built-in default. Config
files are JSON objects holding training fields at the top level and model
fields under "model", for example::

    {"mu_finetune": 1e-4, "optimizer": "adam",
     "lam": {"kind": "dann_ramp", "lam_max": 0.3, "gamma": 10.0},
     "model": {"hidden": 32, "prompt_len": 4}}

Exit codes: 0 success, 2 usage error, 3 config error, 4 data error,
5 numeric divergence. PRADA_SEED sets the default seed; without it a seed
is drawn and recorded in the manifest.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import secrets
import sys
import time
from dataclasses import fields
from pathlib import Path

from . import __version__
from . import ablation as abl
from . import teacher as tch
from .autodiff import ContractError, DegenerateBatchError
from .evaluation import accuracy, project_embeddings
from .model import CheckpointError, LengthError, ModelConfig, StudentModel, load_checkpoint, save_checkpoint
from .plots import convergence_svg, scatter_svg
from .training import (AdversarialTrainer, ConfigError, DivergenceError, LambdaSchedule, RunConfig,
                       metric_csv, pretrain_backbone, prompt_learning_stage, read_metric_csv)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4, 5
MANIFEST = "manifest.json"
LOCK = ".prada.lock"
STAGES = ("pretrain", "prompt", "adversarial")

log = logging.getLogger("prada")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ----------------------------------------------------------------------------
# seeds and configuration


def resolve_seed(flag: int | None) -> tuple[int, str]:
    """Seed from --seed, then PRADA_SEED, else a freshly drawn one."""
    if flag is not None:
        return flag, "flag"
    env = os.environ.get("PRADA_SEED")
    if env not in (None, ""):
        try:
            return int(env), "env"
        except ValueError:
            raise UsageError(f"PRADA_SEED must be an integer, got {env!r}") from None
    return secrets.randbelow(2 ** 31), "drawn"


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


_RUN_FLAGS = [f for f in fields(RunConfig) if f.name not in ("lam", "seed")]
_MODEL_FLAGS = list(fields(ModelConfig))


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (flag > --config file > default)")
    g.add_argument("--config", type=Path, help="JSON config file")
    for f in _RUN_FLAGS + _MODEL_FLAGS:
        default = f.default
        kind = _bool if isinstance(default, bool) else type(default)
        extra = {"choices": ("sgd", "momentum", "adam")} if f.name == "optimizer" else {}
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None,
                       help=f"default {default}", **extra)
    g.add_argument("--lambda-kind", dest="lam_kind", help="lambda schedule: constant or dann_ramp")
    g.add_argument("--lambda-max", dest="lam_max", type=float, help="lambda (or its ramp ceiling)")
    g.add_argument("--gamma", dest="lam_gamma", type=float, help="ramp steepness")


def load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def build_configs(args, seed: int) -> tuple[RunConfig, ModelConfig]:
    data = load_config_file(getattr(args, "config", None))
    model_d = dict(data.pop("model", {}) or {})
    unknown = set(model_d) - {f.name for f in _MODEL_FLAGS}
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    lam_d = dict(data.get("lam", {}) or {})
    for f in _RUN_FLAGS:
        if getattr(args, f.name, None) is not None:
            data[f.name] = getattr(args, f.name)
    for key, attr in (("kind", "lam_kind"), ("lam_max", "lam_max"), ("gamma", "lam_gamma")):
        if getattr(args, attr, None) is not None:
            lam_d[key] = getattr(args, attr)
    data["lam"] = lam_d
    data["seed"] = seed
    for f in _MODEL_FLAGS:
        if getattr(args, f.name, None) is not None:
            model_d[f.name] = getattr(args, f.name)
    cfg = RunConfig.from_dict(data)
    try:
        cfg.validate()
        mcfg = ModelConfig.from_dict({**ModelConfig().to_dict(), **model_d}).validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg, mcfg


# ----------------------------------------------------------------------------
# output directory, lock and manifest


class Workspace:
    """Output directory with an exclusive lock, tracked inputs/artifacts and a manifest."""

    def __init__(self, out, command: str, argv: list[str], seed: int, seed_source: str,
                 force: bool = False, resume: bool = False):
        self.out = Path(out)
        self.command, self.argv = command, argv
        self.seed, self.seed_source = seed, seed_source
        self.force, self.resume = force, resume
        self.inputs: dict[str, str] = {}
        self.artifacts: list[str] = []
        self.timings: dict[str, float] = {}
        self.config: dict = {}
        self.status = "complete"
        self._lock = None

    def __enter__(self) -> "Workspace":
        self.out.mkdir(parents=True, exist_ok=True)
        lock = self.out / LOCK
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DataError(f"{self.out} is locked by another prada process (remove {lock} if stale)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        self._lock = lock
        if (self.out / MANIFEST).exists() and not (self.force or self.resume):
            self._release()
            raise DataError(f"{self.out} already holds a run; pass --force to overwrite")
        return self

    def _release(self) -> None:
        if self._lock is not None:
            self._lock.unlink(missing_ok=True)
            self._lock = None

    def __exit__(self, *exc) -> None:
        self._release()

    def path(self, name: str) -> Path:
        return self.out / name

    def add_input(self, path) -> None:
        p = Path(path)
        if not p.exists():
            raise DataError(f"input {p} does not exist")
        files = sorted(x for x in p.iterdir() if x.is_file() and x.name not in (MANIFEST, LOCK)) \
            if p.is_dir() else [p]
        for f in files:
            self.inputs[str(f.resolve())] = sha256_file(f)

    def add_artifact(self, name: str) -> Path:
        if name not in self.artifacts:
            self.artifacts.append(name)
        return self.out / name

    def write_text(self, name: str, text: str) -> Path:
        path = self.add_artifact(name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        return path

    @contextlib.contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = round(time.perf_counter() - t0, 3)

    def manifest(self) -> dict:
        return {
            "tool": "prada", "version": __version__, "command": self.command, "argv": self.argv,
            "cwd": os.getcwd(), "seed": self.seed, "seed_source": self.seed_source,
            "config": self.config, "inputs": self.inputs,
            "artifacts": {a: sha256_file(self.out / a) for a in self.artifacts},
            "wall_clock_seconds": self.timings, "status": self.status,
        }

    def finish(self) -> dict:
        m = self.manifest()
        (self.out / MANIFEST).write_text(json.dumps(m, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return m


def _load_dataset_dir(path) -> dict:
    try:
        data = tch.load_domain_datasets(path)
    except (FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read datasets from {path}: {exc}") from None
    if not data["source"]:
        raise DataError(f"{path}: source.jsonl is empty")
    return data


def _load_specs(path) -> tuple[tch.TaskSpec, tch.TaskSpec]:
    spec_file = Path(path) / "specs.json"
    if not spec_file.exists():
        raise DataError(f"{spec_file} missing; pretraining needs the generator specs written by `prada gen`")
    d = json.loads(spec_file.read_text(encoding="utf-8"))
    return tch.TaskSpec.from_dict(d["source"]), tch.TaskSpec.from_dict(d["target"])


def _load_model(path, expect: ModelConfig | None = None) -> StudentModel:
    if not Path(path).exists():
        raise DataError(f"checkpoint {path} does not exist")
    model, _, _ = load_checkpoint(path, expect=expect)
    return model


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen(args, ws: Workspace) -> int:
    source_spec, target_spec = tch.default_shift(args.task, ws.seed)
    teacher = tch.TeacherParams(args.diversity, args.temperature, args.error_rate, ws.seed)
    n_target = args.n_target if args.n_target is not None else args.n
    ws.config = {"task": args.task, "n": args.n, "n_target": n_target, "n_eval": args.n_eval,
                 "source_spec": source_spec.to_dict(), "target_spec": target_spec.to_dict(),
                 "teacher": {"diversity": args.diversity, "temperature": args.temperature,
                             "error_rate": args.error_rate, "seed": ws.seed}}
    with ws.stage("gen"):
        ds = tch.build_domain_datasets(source_spec, target_spec, args.n, n_target, teacher, args.n_eval)
        for path in ds.write(ws.out):
            ws.add_artifact(path.name)
        ws.write_text("specs.json", json.dumps({"source": source_spec.to_dict(), "target": target_spec.to_dict(),
                                                "teacher": ws.config["teacher"]}, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(ds.source)} source completions ({args.n} questions), {len(ds.target)} target questions "
          f"to {ws.out}")
    return EXIT_OK


def _train_pretrain(ws, data_dir, cfg, mcfg) -> StudentModel:
    source_spec, target_spec = _load_specs(data_dir)
    with ws.stage("pretrain"):
        model = StudentModel(mcfg, seed=cfg.seed)
        corpus = tch.pretrain_corpus(source_spec, target_spec, cfg.pretrain_lines, cfg.seed)
        losses = pretrain_backbone(model, corpus, cfg.pretrain_steps, cfg.pretrain_lr, cfg.pretrain_batch,
                                   cfg.seed)
        save_checkpoint(ws.add_artifact("stage0.ckpt"), model, extra={"stage": "pretrain"})
        ws.write_text("pretrain_loss.csv", "step,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(losses)))
    return model


def _train_prompt(ws, data, cfg, mcfg, base: StudentModel) -> StudentModel:
    with ws.stage("prompt"):
        model = StudentModel.from_backbone(base, mcfg.prompt_len, cfg.seed)
        losses = prompt_learning_stage(model, data["source"], cfg)
        save_checkpoint(ws.add_artifact("stage1.ckpt"), model, extra={"stage": "prompt"})
        ws.write_text("prompt_loss.csv", "step,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(losses)))
    return model


def _train_adversarial(ws, data, cfg, model: StudentModel, resume: bool, halt_at: int | None) -> int:
    resume_path = ws.path("resume.ckpt")
    with ws.stage("adversarial"):
        trainer = AdversarialTrainer(model, data["source"], data["target"], cfg, data["source_eval"],
                                     data["target_eval"])
        if resume:
            if not resume_path.exists():
                raise DataError(f"--resume given but {resume_path} does not exist")
            trainer.restore(resume_path)
            log.info("resumed at step %d", trainer.state.step)
        st = trainer.run(halt_at=halt_at, checkpoint_path=resume_path)
        if halt_at is not None and st.step >= halt_at and not st.stopped:
            trainer.save(resume_path)
            ws.status = f"halted at step {st.step}"
            print(f"halted at step {st.step}; continue with --resume")
            return EXIT_OK
        save_checkpoint(ws.add_artifact("stage2.ckpt"), model,
                        extra={"stage": "adversarial", "stopped": st.stopped, "best_step": st.best_step})
        ws.write_text("metrics.csv", metric_csv(st.rows))
        ws.write_text("convergence.svg", convergence_svg(st.rows))
    resume_path.unlink(missing_ok=True)
    print(f"adversarial stage stopped ({st.stopped}) after {st.step} steps; best source accuracy "
          f"{st.best_acc:.3f} at step {st.best_step}")
    return EXIT_OK


def cmd_train(args, ws: Workspace) -> int:
    cfg, mcfg = build_configs(args, ws.seed)
    ws.config = {"run": cfg.to_dict(), "model": mcfg.to_dict(), "stage": args.stage}
    ws.add_input(args.data)
    if args.init:
        ws.add_input(args.init)
    ws.write_text("config.json", json.dumps(ws.config, indent=2, sort_keys=True) + "\n")
    if args.resume and args.stage not in ("adversarial", "all"):
        raise UsageError("--resume applies to the adversarial stage only")
    data = _load_dataset_dir(args.data)
    stages = STAGES if args.stage == "all" else (args.stage,)
    model = None
    if args.resume and args.stage == "all":
        stages = ("adversarial",)
        if not ws.path("stage1.ckpt").exists():
            raise DataError("--resume needs the stage1.ckpt written before the halt")
        ws.artifacts += [a for a in ("stage0.ckpt", "pretrain_loss.csv", "stage1.ckpt", "prompt_loss.csv")
                         if ws.path(a).exists()]
    if "pretrain" in stages:
        model = _train_pretrain(ws, args.data, cfg, mcfg)
    if "prompt" in stages:
        base = model or _load_model(args.init or ws.path("stage0.ckpt"), expect=mcfg)
        model = _train_prompt(ws, data, cfg, mcfg, base)
    if "adversarial" in stages:
        if model is None:
            model = _load_model(args.init or ws.path("stage1.ckpt"), expect=mcfg)
        return _train_adversarial(ws, data, cfg, model, args.resume, args.halt_at)
    return EXIT_OK


def _eval_set(args) -> tuple[str, list[tuple[str, str]]]:
    p = Path(args.data)
    path = p / f"{args.split}.jsonl" if p.is_dir() else p
    if not path.exists():
        raise DataError(f"evaluation file {path} does not exist")
    rows = tch.read_jsonl(path)
    if not rows:
        raise DataError(f"evaluation file {path} is empty")
    if any("a" not in r or "q" not in r for r in rows):
        raise DataError(f"{path}: every evaluation record needs 'q' and 'a' fields")
    return path.stem, [(r["q"], r["a"]) for r in rows]


def cmd_eval(args, ws: Workspace) -> int:
    cfg, mcfg = build_configs(args, ws.seed)
    expect = mcfg if (args.config or args.hidden or args.vocab_size) else None
    ws.config = {"max_new_tokens": cfg.max_new_tokens, "split": args.split}
    ws.add_input(args.checkpoint)
    ws.add_input(args.data)
    model = _load_model(args.checkpoint, expect=expect)
    name, pairs = _eval_set(args)
    if args.limit:
        pairs = pairs[:args.limit]
    with ws.stage("eval"):
        report = accuracy(model, pairs, cfg.max_new_tokens, dataset=name)
        report.write(ws.add_artifact("report.json"), ws.add_artifact("samples.jsonl"))
    print(f"{name}: accuracy {report.accuracy:.4f} ({report.accuracy_fraction}) over {report.n} samples")
    return EXIT_OK


def cmd_ablate(args, ws: Workspace) -> int:
    cfg, mcfg = build_configs(args, ws.seed)
    seeds = args.seeds if args.seeds else [ws.seed, ws.seed + 1, ws.seed + 2]
    arms = abl.select_arms(args.arms, mcfg.prompt_len, cfg.lam)
    ws.config = {"run": cfg.to_dict(), "model": mcfg.to_dict(), "seeds": seeds, "arms": args.arms}
    ws.add_input(args.data)
    data = _load_dataset_dir(args.data)
    if args.init:
        ws.add_input(args.init)
        backbone = _load_model(args.init, expect=mcfg)
    else:
        backbone = _train_pretrain(ws, args.data, cfg, mcfg)
    results = []
    for arm in arms:
        for seed in seeds:
            with ws.stage(f"{arm.name}/seed{seed}"):
                _, res = abl.run_arm(backbone, arm, data, cfg, seed, args.column)
            results.append(res)
            ws.write_text(f"metrics_{arm.name}_seed{seed}.csv", metric_csv(res.rows))
            print(f"{arm.name:8s} seed {seed}: target {res.target_acc:.3f} source {res.source_acc:.3f} "
                  f"probe {res.probe_acc:.3f}")
    grid = abl.AblationGrid(arms, [args.column], results)
    ws.write_text("grid.csv", grid.to_csv())
    ws.write_text("grid.txt", grid.table())
    ws.write_text("runs.csv", grid.runs_csv())
    print(grid.table(), end="")
    return EXIT_OK


def cmd_project(args, ws: Workspace) -> int:
    if len(set(args.domains)) < 2:
        raise DataError("projection needs samples from at least two domains")
    labels = args.arm_names or [Path(c).stem for c in args.checkpoint]
    if len(labels) != len(args.checkpoint):
        raise UsageError("--arm-names needs one label per --checkpoint")
    ws.config = {"domains": args.domains, "n": args.n, "arms": labels}
    ws.add_input(args.data)
    data = _load_dataset_dir(args.data)
    pools = {"source": [q for q, _ in data["source_eval"]], "target": [q for q, _ in data["target_eval"]],
             "target_train": data["target"], "source_train": sorted({r.q for r in data["source"]})}
    unknown = [d for d in args.domains if d not in pools]
    if unknown:
        raise UsageError(f"unknown domains {unknown}; choose from {sorted(pools)}")
    questions = {d: pools[d][:args.n] for d in args.domains}
    export = None
    with ws.stage("project"):
        for ckpt, label in zip(args.checkpoint, labels):
            ws.add_input(ckpt)
            part = project_embeddings(_load_model(ckpt), questions, arm=label)
            export = part if export is None else export + part
        ws.write_text("projection.csv", export.to_csv())
        ws.write_text("projection.svg", scatter_svg(export.rows))
    print(f"projected {len(export.rows)} samples to {ws.path('projection.csv')}")
    return EXIT_OK


def cmd_plot(args, ws: Workspace) -> int:
    ws.add_input(args.metrics)
    ws.config = {"window": args.window}
    try:
        rows = read_metric_csv(args.metrics)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{args.metrics} is not a metric log: {exc}") from None
    if not rows:
        raise DataError(f"{args.metrics} has no rows")
    ws.write_text("convergence.svg", convergence_svg(rows, args.window))
    print(f"wrote {ws.path('convergence.svg')}")
    return EXIT_OK


def _replace_out(argv: list[str], out: str) -> list[str]:
    res, skip = [], False
    for i, tok in enumerate(argv):
        if skip:
            skip = False
            continue
        if tok == "--out":
            res += ["--out", out]
            skip = True
        elif tok.startswith("--out="):
            res.append(f"--out={out}")
        else:
            res.append(tok)
    return res + (["--force"] if "--force" not in res else [])


def cmd_rerun(args) -> int:
    path = Path(args.manifest)
    if path.is_dir():
        path = path / MANIFEST
    try:
        m = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"manifest {path} not found") from None
    changed = [p for p, d in m["inputs"].items() if not Path(p).exists() or sha256_file(p) != d]
    if changed:
        raise DataError(f"inputs changed since the original run: {changed}")
    out = str(Path(args.out).resolve())
    argv = ["--seed", str(m["seed"]), *_replace_out(m["argv"], out)]
    here = os.getcwd()
    os.chdir(m["cwd"])
    try:
        code = main(argv)
    finally:
        os.chdir(here)
    if code != EXIT_OK:
        return code
    fresh = json.loads((Path(out) / MANIFEST).read_text(encoding="utf-8"))
    diff = sorted(a for a in set(m["artifacts"]) | set(fresh["artifacts"])
                  if m["artifacts"].get(a) != fresh["artifacts"].get(a))
    if diff:
        print(f"rerun differs from the manifest in: {', '.join(diff)}", file=sys.stderr)
        return EXIT_DATA
    print(f"rerun reproduced all {len(fresh['artifacts'])} artifacts byte-for-byte")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser and entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prada", description="Distill scripted chain-of-thought rationales into a tiny student with "
                                            "prompt tuning and domain-adversarial fine-tuning.",
                                epilog="Config precedence: flag > --config file > default. "
                                       "Exit codes: 0 ok, 2 usage, 3 config, 4 data, 5 divergence.")
    p.add_argument("--seed", type=int, default=None, help="global seed (default: $PRADA_SEED, else drawn)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--version", action="version", version=f"prada {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    g = sub.add_parser("gen", help="generate source/target datasets with the scripted teacher")
    g.add_argument("--task", required=True, choices=tch.TASK_KINDS)
    g.add_argument("--n", type=int, default=2000, help="source questions (default 2000)")
    g.add_argument("--n-target", type=int, default=None, help="unlabeled target questions (default --n)")
    g.add_argument("--n-eval", type=int, default=200, help="held-out questions per domain")
    g.add_argument("--diversity", type=int, default=4, help="teacher generations per question")
    g.add_argument("--temperature", type=float, default=0.9)
    g.add_argument("--error-rate", type=float, default=0.2)

    t = sub.add_parser("train", help="run training stages")
    t.add_argument("--data", required=True, type=Path, help="dataset directory from `prada gen`")
    t.add_argument("--stage", choices=(*STAGES, "all"), default="all")
    t.add_argument("--init", type=Path, help="checkpoint to start from (default: previous stage in --out)")
    t.add_argument("--resume", action="store_true", help="continue an interrupted adversarial stage")
    t.add_argument("--halt-at", type=int, default=None, help="stop the adversarial stage after this many steps")
    add_config_flags(t)

    e = sub.add_parser("eval", help="decode and score an evaluation set")
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path, help="JSONL file of {q, a} or a dataset directory")
    e.add_argument("--split", default="target_eval", choices=("target_eval", "source_eval"))
    e.add_argument("--limit", type=int, default=0, help="score only the first N samples")
    add_config_flags(e)

    a = sub.add_parser("ablate", help="train and compare the component arms")
    a.add_argument("--data", required=True, type=Path)
    a.add_argument("--init", type=Path, help="shared stage-0 checkpoint (default: pretrain one here)")
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--arms", nargs="+", default=["L_y", "L_y+L_p", "L_y+L_d", "full"])
    a.add_argument("--column", default="target", help="label of the target column")
    add_config_flags(a)

    pr = sub.add_parser("project", help="2-D principal-component projection of pooled features")
    pr.add_argument("--checkpoint", required=True, type=Path, nargs="+")
    pr.add_argument("--arm-names", nargs="+")
    pr.add_argument("--data", required=True, type=Path)
    pr.add_argument("--domains", nargs="+", default=["source", "target"])
    pr.add_argument("--n", type=int, default=100, help="questions per domain")

    pl = sub.add_parser("plot", help="convergence chart from a metric CSV")
    pl.add_argument("--metrics", required=True, type=Path)
    pl.add_argument("--window", type=int, default=50)

    for sp in (g, t, e, a, pr, pl):
        sp.add_argument("--out", required=True, type=Path, help="output directory")
        sp.add_argument("--force", action="store_true", help="overwrite an existing run in --out")

    r = sub.add_parser("rerun", help="repeat a run from its manifest and compare artifacts")
    r.add_argument("--manifest", required=True, type=Path)
    r.add_argument("--out", required=True, type=Path)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "project": cmd_project, "plot": cmd_plot}


def _strip_seed(argv: list[str]) -> list[str]:
    res, skip = [], False
    for tok in argv:
        if skip:
            skip = False
        elif tok == "--seed":
            skip = True
        elif not tok.startswith("--seed=") and tok not in ("-v", "--verbose"):
            res.append(tok)
    return res


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            return cmd_rerun(args)
        seed, source = resolve_seed(args.seed)
        with Workspace(args.out, args.command, _strip_seed(argv), seed, source, force=args.force,
                       resume=getattr(args, "resume", False)) as ws:
            code = COMMANDS[args.command](args, ws)
            ws.finish()
            return code
    except UsageError as exc:
        print(f"prada: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError) as exc:
        print(f"prada: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"prada: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, LengthError, DegenerateBatchError, ContractError, FileNotFoundError,
            json.JSONDecodeError, ValueError) as exc:
        print(f"prada: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
