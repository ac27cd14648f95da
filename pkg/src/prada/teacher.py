"""Synthetic reasoning tasks and a scripted chain-of-thought teacher.

Three task kinds, each with a source and a shifted target variant:

* ``last_letter``: concatenate the last letters of quoted words
* ``coin_flip``: track a coin through flip / no-flip actions
* ``mod_add``: add two numbers and reduce modulo m

Every sample is a pure function of ``(TaskSpec, index)``. The teacher turns
a sample into ``D`` rationales; temperature controls phrasing variety and
``error_rate`` corrupts single steps so the correctness filter has work to do.
"""

from __future__ import annotations

import json
import math
import random
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .text import extract_answer, format_completion, format_question, normalize_answer

TASK_KINDS = ("last_letter", "coin_flip", "mod_add")
EVAL_OFFSET = 1_000_000

LEXICONS: dict[str, tuple[str, ...]] = {
    # nature, animals, food
    "nature": tuple("""
        ant ape bat bee bird boar bug calf cat clam cod colt cow crab crow cub deer dog dove duck
        eel elk emu fawn fish flea fly fox frog gnat goat gull hare hawk hen hog jay kid kite lamb
        lark lion lynx mole moth mouse mule newt owl ox pig pony pup ram rat seal shark sheep slug
        snail snake swan tick toad trout tuna wasp whale wolf worm yak bean beet bread cake corn
        egg fig grape ham kale leek lime meat melon milk nut oat pea pear plum rice rye salt soup
        tea yam apple berry cherry honey lemon mango olive onion peach bloom brook cliff cloud dew
        dune fern field frost grass hill lake leaf marsh moss oak pine pond rain reed river rock
        sand sea seed shore sky snow soil stone storm sun thorn tide tree vine wave weed wind
    """.split()),
    # tools, household, town
    "town": tuple("""
        anvil awl axe bolt brush chisel clamp drill file gauge hinge hoe jack knife ladder lathe
        lever mallet nail pliers plow rake rasp saw screw shovel sickle spade tongs trowel vise
        wedge wrench bed bench blanket bowl box broom bucket candle carpet chair clock couch cup
        desk dish door drawer fork glass jar jug kettle lamp mat mirror mug oven pan pillow plate
        pot quilt rug shelf sink sofa spoon stool stove table towel tray vase bank barn bridge
        cabin canal castle chapel church court dock farm fort garage gate hall harbor hotel house
        hut inn jail lane mall manor market mill motel museum office palace park plaza port ranch
        road school shop square store street tavern temple tower track tunnel villa wall yard zoo
    """.split()),
    "names_a": tuple("""
        Alice Bob Carol Dave Erin Frank Grace Heidi Ivan Judy Karl Laura Mike Nina Oscar Peggy
        Quinn Rita Sam Tina Uma Victor Wendy Xena Yuri Zoe Abel Beth Cody Dana
    """.split()),
    "names_b": tuple("""
        Aaron Bella Caleb Daisy Ethan Fiona Gavin Hazel Isaac Jade Kevin Lily Mason Nora Owen
        Piper Reed Sadie Tyler Vera Wyatt Yara Zack Anya Blake Clara Derek Elena Felix Gemma
    """.split()),
}

_FILLER_SYLLABLES = tuple(a + b for a in "bdfgklmnprstvz" for b in "aeiou")


@dataclass(frozen=True)
class TaskSpec:
    """Generator description for one synthetic domain.

    ``count_range`` is the inclusive range of words (last_letter), flips
    (coin_flip) or operand values (mod_add).
    """

    kind: str
    lexicon: str = "nature"
    count_range: tuple[int, int] = (2, 2)
    template: int = 0
    seed: int = 0
    modulus: int = 10

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        object.__setattr__(self, "count_range", tuple(int(v) for v in self.count_range))
        lo, hi = self.count_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad count_range {self.count_range}")
        if self.kind != "mod_add" and self.lexicon not in LEXICONS:
            raise ValueError(f"unknown lexicon {self.lexicon!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["count_range"] = list(self.count_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**{**d, "count_range": tuple(d.get("count_range", (2, 2)))})


def default_shift(kind: str, seed: int = 0) -> tuple[TaskSpec, TaskSpec]:
    """Source/target pair for the default domain shift of each task."""
    if kind == "last_letter":
        return (TaskSpec(kind, "nature", (2, 2), 0, seed), TaskSpec(kind, "town", (3, 3), 0, seed))
    if kind == "coin_flip":
        return (TaskSpec(kind, "names_a", (2, 3), 0, seed), TaskSpec(kind, "names_b", (4, 6), 0, seed))
    if kind == "mod_add":
        return (TaskSpec(kind, "", (1, 50), 0, seed), TaskSpec(kind, "", (50, 99), 1, seed))
    raise ValueError(f"unknown task kind {kind!r}")


@dataclass(frozen=True)
class Sample:
    q: str
    a: str
    kind: str
    facts: tuple = field(default=(), compare=False)


@dataclass(frozen=True)
class ReasoningSample:
    q: str          # "<question> ###"
    c: str          # "<rationale> --> <answer> END"
    domain: str     # "source" | "target"


def _rng(*key) -> random.Random:
    return random.Random(":".join(str(k) for k in key))


# ----------------------------------------------------------------------------
# generators

_LL_QUESTIONS = (
    "Take the last letters of the words in '{words}' and concatenate them.",
    "Concatenate the last letter of each word in '{words}'.",
)
_CF_QUESTIONS = (
    "A coin is heads up. {actions} Is the coin still heads up?",
    "A coin starts heads up. {actions} Is it still heads up?",
)
_MA_QUESTIONS = (
    "What is ({a} + {b}) mod {m}?",
    "Add {a} and {b}, then give the remainder when divided by {m}.",
)


def sample_at(spec: TaskSpec, index: int) -> Sample:
    """The ``index``-th sample of ``spec``; a pure function of both."""
    rng = _rng("sample", spec.kind, spec.lexicon, spec.count_range, spec.template, spec.seed,
               spec.modulus, index)
    lo, hi = spec.count_range
    if spec.kind == "last_letter":
        words = rng.sample(LEXICONS[spec.lexicon], rng.randint(lo, hi))
        q = _LL_QUESTIONS[spec.template % 2].format(words=" ".join(words))
        return Sample(q, "".join(w[-1] for w in words), spec.kind, tuple(words))
    if spec.kind == "coin_flip":
        n = rng.randint(lo, hi)
        names = rng.sample(LEXICONS[spec.lexicon], n)
        flips = tuple(rng.random() < 0.5 for _ in range(n))
        actions = " ".join(f"{nm} flips the coin." if f else f"{nm} does not flip the coin."
                           for nm, f in zip(names, flips))
        q = _CF_QUESTIONS[spec.template % 2].format(actions=actions)
        return Sample(q, "yes" if sum(flips) % 2 == 0 else "no", spec.kind, tuple(zip(names, flips)))
    a, b = rng.randint(lo, hi), rng.randint(lo, hi)
    q = _MA_QUESTIONS[spec.template % 2].format(a=a, b=b, m=spec.modulus)
    return Sample(q, str((a + b) % spec.modulus), spec.kind, (a, b, spec.modulus))


def generate_samples(spec: TaskSpec, n: int, start: int = 0) -> list[Sample]:
    if n < 1:
        raise ValueError("n must be at least 1")
    return [sample_at(spec, start + i) for i in range(n)]


# ----------------------------------------------------------------------------
# teacher

_LL_STEPS = (
    "The last letter of '{w}' is '{l}'.",
    "'{w}' ends with '{l}'.",
    "The word '{w}' ends in '{l}'.",
)
_LL_SUMMARY = ("", " Putting them together gives '{a}'.", " Together that is '{a}'.")
_CF_STEPS = (
    ("{n} flips the coin, so it is {s} up.", "{n} does not flip the coin, so it is still {s} up."),
    ("After {n} flips it, the coin is {s} up.", "{n} leaves it alone, so the coin is {s} up."),
)
_MA_STEPS = (
    ("{x} + {y} = {s}.", "{s} mod {m} = {r}."),
    ("The sum of {x} and {y} is {s}.", "{s} divided by {m} leaves remainder {r}."),
)


@dataclass(frozen=True)
class TeacherParams:
    diversity: int = 4
    temperature: float = 0.9
    error_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.diversity < 1:
            raise ValueError("diversity D must be at least 1")
        if not 0 <= self.error_rate < 0.5:
            raise ValueError("error_rate must lie in [0, 0.5)")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")


def _pick(rng: random.Random, n: int, temperature: float) -> int:
    """Choose among ``n`` ranked alternatives; weight exp(-rank / t), argmax at t = 0."""
    if temperature <= 0 or n == 1:
        return 0
    weights = [math.exp(-k / temperature) for k in range(n)]
    return rng.choices(range(n), weights=weights)[0]


def _one_rationale(sample: Sample, rng: random.Random, t: float, corrupt: bool) -> tuple[str, str]:
    if sample.kind == "last_letter":
        words = list(sample.facts)
        letters = [w[-1] for w in words]
        if corrupt:
            i = rng.randrange(len(words))
            letters[i] = rng.choice([ch for ch in "abcdefghijklmnopqrstuvwxyz" if ch != letters[i]])
        tpl = _LL_STEPS[_pick(rng, len(_LL_STEPS), t)]
        answer = "".join(letters)
        steps = " ".join(tpl.format(w=w, l=l) for w, l in zip(words, letters))
        return steps + _LL_SUMMARY[_pick(rng, len(_LL_SUMMARY), t)].format(a=answer), answer
    if sample.kind == "coin_flip":
        flips = [f for _, f in sample.facts]
        if corrupt:
            i = rng.randrange(len(flips))
            flips[i] = not flips[i]
        flip_tpl, keep_tpl = _CF_STEPS[_pick(rng, len(_CF_STEPS), t)]
        heads, steps = True, []
        for (name, _), f in zip(sample.facts, flips):
            heads ^= f
            steps.append((flip_tpl if f else keep_tpl).format(n=name, s="heads" if heads else "tails"))
        return " ".join(steps), "yes" if heads else "no"
    a, b, m = sample.facts
    s = a + b
    if corrupt:
        s += rng.choice([d for d in range(1, 10) if d % m])
    x, y = (b, a) if t > 0 and rng.random() < 0.5 * (1 - math.exp(-t)) else (a, b)
    add_tpl, mod_tpl = _MA_STEPS[_pick(rng, len(_MA_STEPS), t)]
    r = s % m
    return " ".join([add_tpl.format(x=x, y=y, s=s), mod_tpl.format(s=s, m=m, r=r)]), str(r)


def teacher_cot(sample: Sample, temperature: float = 0.9, diversity: int = 4,
                error_rate: float = 0.2, seed: int = 0, key=None) -> list[tuple[str, str]]:
    """``diversity`` (rationale, answer) generations for one sample.

    ``key`` individualizes the random stream per sample (defaults to the
    question text) so generation is independent of call order.
    """
    TeacherParams(diversity, temperature, error_rate, seed)
    key = sample.q if key is None else key
    out = []
    for j in range(diversity):
        rng = _rng("teacher", seed, temperature, key, j)
        corrupt = rng.random() < error_rate
        out.append(_one_rationale(sample, rng, temperature, corrupt))
    return out


def filter_and_format(sample: Sample, generations, domain: str = "source",
                      dedupe: bool = True) -> list[ReasoningSample]:
    """Keep generations whose answer matches gold; format and drop duplicate completions."""
    gold = normalize_answer(sample.a)
    kept, seen = [], set()
    for rationale, answer in generations:
        if normalize_answer(answer) != gold:
            continue
        c = format_completion(rationale, sample.a)
        if dedupe and c in seen:
            continue
        seen.add(c)
        kept.append(ReasoningSample(format_question(sample.q), c, domain))
    return kept


# ----------------------------------------------------------------------------
# datasets


@dataclass
class DomainDatasets:
    source: list[ReasoningSample]
    target: list[str]                       # formatted target questions, unlabeled
    target_eval: list[tuple[str, str]]      # (formatted question, gold answer), held out
    source_eval: list[tuple[str, str]]
    source_spec: TaskSpec
    target_spec: TaskSpec
    teacher: TeacherParams

    FILES = ("source.jsonl", "target.jsonl", "target_eval.jsonl", "source_eval.jsonl")

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = {
            "source.jsonl": [{"q": r.q, "c": r.c, "domain": "source"} for r in self.source],
            "target.jsonl": [{"q": q, "domain": "target"} for q in self.target],
            "target_eval.jsonl": [{"q": q, "a": a} for q, a in self.target_eval],
            "source_eval.jsonl": [{"q": q, "a": a} for q, a in self.source_eval],
        }
        paths = []
        for name in self.FILES:
            path = out / name
            write_jsonl(path, rows[name])
            paths.append(path)
        return paths


def write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def build_domain_datasets(source_spec: TaskSpec, target_spec: TaskSpec, n_source: int, n_target: int,
                          teacher: TeacherParams = TeacherParams(), n_eval: int = 200) -> DomainDatasets:
    """Teacher-labelled source corpus plus unlabeled target questions.

    Target gold answers only appear in ``target_eval``, drawn from a disjoint
    index range so training never sees them.
    """
    if source_spec == target_spec:
        warnings.warn("source and target specs are identical; there is no domain shift to adapt across",
                      stacklevel=2)
    source = []
    for i, s in enumerate(generate_samples(source_spec, n_source)):
        gens = teacher_cot(s, teacher.temperature, teacher.diversity, teacher.error_rate,
                           teacher.seed, key=("source", i))
        source.extend(filter_and_format(s, gens, "source"))
    target = [format_question(s.q) for s in generate_samples(target_spec, n_target)]
    target_eval = [(format_question(s.q), s.a) for s in generate_samples(target_spec, n_eval, EVAL_OFFSET)]
    source_eval = [(format_question(s.q), s.a) for s in generate_samples(source_spec, n_eval, EVAL_OFFSET)]
    return DomainDatasets(source, target, target_eval, source_eval, source_spec, target_spec, teacher)


def load_domain_datasets(data_dir) -> dict:
    d = Path(data_dir)
    missing = [n for n in DomainDatasets.FILES if not (d / n).exists()]
    if missing:
        raise FileNotFoundError(f"{d}: missing dataset files {missing}")
    src = [ReasoningSample(r["q"], r["c"], "source") for r in read_jsonl(d / "source.jsonl")]
    return {
        "source": src,
        "target": [r["q"] for r in read_jsonl(d / "target.jsonl")],
        "target_eval": [(r["q"], r["a"]) for r in read_jsonl(d / "target_eval.jsonl")],
        "source_eval": [(r["q"], r["a"]) for r in read_jsonl(d / "source_eval.jsonl")],
    }


def retained_round_trip(samples: list[ReasoningSample], golds: list[str]) -> bool:
    return all(extract_answer(r.c) == g for r, g in zip(samples, golds))


# ----------------------------------------------------------------------------
# pretraining text and divergence diagnostics


def filler_text(n: int, seed: int = 0) -> list[str]:
    """Generic sentences about made-up words and small sums.

    Stands in for the broad text a pretrained model would have seen: spelling
    facts, word lists, counting and addition, none of it in task format.
    """
    lines = []
    for i in range(n):
        rng = _rng("filler", seed, i)
        word = "".join(rng.choice(_FILLER_SYLLABLES) for _ in range(rng.randint(1, 3)))
        kind = rng.randrange(6)
        if kind == 5:
            ws = [word] + ["".join(rng.choice(_FILLER_SYLLABLES) for _ in range(rng.randint(1, 3)))
                           for _ in range(rng.randint(0, 3))]
            listed = ", ".join(f"'{w}'" for w in ws)
            lines.append(f"The words in '{' '.join(ws)}' are {listed}.")
        elif kind == 0:
            lines.append(f"The last letter of '{word}' is '{word[-1]}'.")
        elif kind == 1:
            lines.append(f"The first letter of '{word}' is '{word[0]}'.")
        elif kind == 2:
            lines.append(f"The word '{word}' has {len(word)} letters.")
        elif kind == 3:
            a, b = rng.randint(0, 99), rng.randint(0, 99)
            lines.append(f"{a} + {b} = {a + b}.")
        else:
            other = "".join(rng.choice(_FILLER_SYLLABLES) for _ in range(rng.randint(1, 3)))
            lines.append(f"'{word}' and '{other}' are two words.")
    return lines


def pretrain_corpus(source_spec: TaskSpec, target_spec: TaskSpec, n: int, seed: int = 0) -> list[str]:
    """Questions from both domains (no completions) interleaved with filler text."""
    third = max(n // 3, 1)
    offset = 2 * EVAL_OFFSET
    src = [s.q for s in generate_samples(source_spec, third, offset)]
    tgt = [s.q for s in generate_samples(target_spec, third, offset)]
    lines = src + tgt + filler_text(n - 2 * third, seed)
    random.Random(f"corpus:{seed}").shuffle(lines)
    return lines


def bigram_distribution(texts) -> Counter:
    c = Counter()
    for t in texts:
        c.update(t[i:i + 2] for i in range(len(t) - 1))
    return c


def js_divergence(p: Counter, q: Counter) -> float:
    """Jensen-Shannon divergence (natural log) between two count tables."""
    zp, zq = sum(p.values()), sum(q.values())
    total = 0.0
    for k in set(p) | set(q):
        a, b = p.get(k, 0) / zp, q.get(k, 0) / zq
        m = 0.5 * (a + b)
        if a:
            total += 0.5 * a * math.log(a / m)
        if b:
            total += 0.5 * b * math.log(b / m)
    return total
