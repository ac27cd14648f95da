import csv
import io
import json
from fractions import Fraction

import numpy as np
import pytest

from prada import autodiff as ad
from prada import evaluation as ev
from prada.ablation import AblationGrid, Arm, RunResult, default_arms, select_arms
from prada.model import ModelConfig, StudentModel
from prada.plots import convergence_svg, moving_average, scatter_svg
from prada.training import ConfigError, LambdaSchedule, RunConfig, prompt_learning_stage
from prada.teacher import ReasoningSample

from conftest import perturb


def test_extract_answer_examples():
    assert ev.extract_answer("...'t'. The last letter of 'dog' is 'g'. --> tg END") == "tg"
    assert ev.extract_answer("garbled") is None
    assert ev.extract_answer("a --> b --> c END") == "c"
    assert ev.extract_answer("x --> y") is None


def _random_model(prompt_len=2, seed=0):
    m = StudentModel(ModelConfig(hidden=16, layers=2, heads=2, max_seq=96, prompt_len=prompt_len), seed=seed)
    return perturb(m, seed=seed, scale=0.4)


@pytest.mark.parametrize("prompt_len", [0, 3])
def test_cached_decoder_matches_full_recompute(prompt_len):
    m = _random_model(prompt_len)
    qs = ["ab cd ###", "a much longer question here ###", "x ###"]
    batch = ev.greedy_decode_batch(m, qs, 25)
    for q, got in zip(qs, batch):
        ref = ev.greedy_decode_reference(m, q, 25)
        assert got == ref


def test_decode_is_deterministic():
    m = _random_model()
    assert ev.greedy_decode(m, "abc ###", 20) == ev.greedy_decode(m, "abc ###", 20)


def test_zero_budget_gives_empty_truncated_completion():
    out = ev.greedy_decode(_random_model(), "abc ###", 0)
    assert out.text == "" and out.truncated


def test_question_must_end_with_marker():
    with pytest.raises(ValueError, match="###"):
        ev.greedy_decode(_random_model(), "abc", 5)


def _overfit_single_pair(q, c, steps=300):
    from prada.training import RunConfig, AdversarialTrainer
    m = StudentModel(ModelConfig(hidden=16, layers=1, heads=2, max_seq=64, prompt_len=0), seed=0)
    cfg = RunConfig(optimizer="adam", mu_finetune=1e-4, batch_source=1, batch_target=1, max_steps=steps,
                    eval_every=10 ** 6, lam=LambdaSchedule("constant", 0.0))
    trainer = AdversarialTrainer(m, [ReasoningSample(q, c, "source")], ["zz ###"], cfg)
    trainer.optimizer.lrs = {g: 2e-2 for g in trainer.optimizer.lrs}   # memorization smoke test only
    trainer.run()
    return m


def test_overfit_model_reproduces_training_completion():
    q, c = "ab cd ###", "b d --> bd END"
    m = _overfit_single_pair(q, c)
    out = ev.greedy_decode(m, q, 40)
    assert out.text == c and not out.truncated
    rep = ev.accuracy(m, [(q, "bd")])
    assert rep.accuracy == 1.0


def test_accuracy_report_counts_exactly():
    m = _random_model()
    pairs = [("ab ###", "b"), ("cd ###", "d"), ("ef ###", "f")]
    rep = ev.accuracy(m, pairs, max_new_tokens=8, dataset="toy")
    assert rep.n == 3 and len(rep.records) == 3
    assert rep.accuracy_fraction == Fraction(sum(r.correct for r in rep.records), 3)
    # random weights never emit the markers: absent extraction counts as wrong
    assert all(r.extracted is None and not r.correct for r in rep.records)


def test_accuracy_of_all_correct_records():
    recs = [ev.EvalRecord("q ###", "a", "x --> a END", "a", True, False)] * 4
    rep = ev.EvalReport("toy", recs)
    assert rep.accuracy == 1.0 and rep.summary()["correct"] == 4


def test_report_files(tmp_path):
    recs = [ev.EvalRecord("q ###", "a", "x --> a END", "a", True, False),
            ev.EvalRecord("r ###", "b", "junk", None, False, True),
            ev.EvalRecord("s ###", "c", "y --> C END", "C", True, False)]
    rep = ev.EvalReport("toy", recs)
    rep.write(tmp_path / "r.json", tmp_path / "r.jsonl")
    summary = json.loads((tmp_path / "r.json").read_text())
    assert summary == {"dataset": "toy", "n": 3, "correct": 2, "accuracy": 2 / 3}
    rows = [json.loads(x) for x in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert len(rows) == 3 and sum(r["correct"] for r in rows) / 3 == summary["accuracy"]


def test_empty_eval_set_is_error():
    with pytest.raises(ValueError, match="non-empty"):
        ev.accuracy(_random_model(), [])


def test_is_correct_normalizes():
    assert ev.is_correct(" EN ", "en")
    assert not ev.is_correct(None, "en")


# ----------------------------------------------------------------------------
# probe and projection


def test_probe_on_identical_domains_is_chance():
    m = _random_model()
    rng = np.random.default_rng(0)
    words = ["".join(rng.choice(list("abcdefgh"), size=rng.integers(2, 6))) for _ in range(400)]
    qs = [f"{a} {b} ###" for a, b in zip(words[::2], words[1::2])]
    accs = [ev.domain_probe(m, qs[:100], qs[100:], seed=s).accuracy for s in range(3)]
    assert abs(np.mean(accs) - 0.5) <= 0.07


def test_probe_separates_distinct_domains():
    m = _random_model()
    src = [f"{'ab' * (i % 3 + 1)} ###" for i in range(60)]
    tgt = [f"{'XYZ' * (i % 3 + 1)} ###" for i in range(60)]
    assert ev.domain_probe(m, src, tgt).accuracy > 0.9


def test_probe_is_deterministic_and_requires_balance():
    m = _random_model()
    src = [f"a{i} ###" for i in range(30)]
    tgt = [f"b{i} ###" for i in range(30)]
    assert ev.domain_probe(m, src, tgt, seed=1) == ev.domain_probe(m, src, tgt, seed=1)
    with pytest.raises(ValueError, match="balanced"):
        ev.domain_probe(m, src, tgt[:20])


def test_logistic_fit_matches_separating_direction():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 2))
    y = (X @ np.array([2.0, -1.0]) + 0.3 > 0).astype(float)
    w = ev.fit_logistic(X, y, l2=1e-3)
    direction = w[:2] / np.linalg.norm(w[:2])
    assert abs(direction @ np.array([2.0, -1.0]) / np.sqrt(5) - 1) < 0.02


def test_pca_recovers_planted_plane():
    rng = np.random.default_rng(0)
    basis, _ = np.linalg.qr(rng.normal(size=(3, 2)))
    coef = rng.normal(size=(50, 2)) * [3.0, 1.0]
    X = coef @ basis.T + np.array([1.0, -2.0, 0.5])
    coords, axes, mean = ev.pca_2d(X)
    recon = coords @ axes + mean
    assert np.max(np.abs(recon - X)) < 1e-8
    # brute-force eigendecomposition of the covariance spans the same plane
    w, v = np.linalg.eigh(np.cov(X.T))
    top = v[:, np.argsort(w)[::-1][:2]]
    assert np.allclose(np.abs(top.T @ axes.T), np.eye(2), atol=1e-8)


def test_pca_sign_canonical():
    X = np.random.default_rng(2).normal(size=(20, 4))
    for Y in (X, -X):
        _, axes, _ = ev.pca_2d(Y)
        for a in axes:
            assert a[np.flatnonzero(np.abs(a) > 1e-12)[0]] > 0
    np.testing.assert_allclose(np.abs(ev.pca_2d(X)[0]), np.abs(ev.pca_2d(-X)[0]), atol=1e-12)


def test_projection_rows_and_duplicates():
    m = _random_model()
    qs = {"source": [f"a{i % 5} ###" for i in range(12)], "target": [f"Q{i} ###" for i in range(10)]}
    exp = ev.project_embeddings(m, qs, arm="full")
    assert len(exp.rows) == 22
    assert exp.rows[0][:2] == exp.rows[5][:2]
    assert all(np.isfinite(r[0]) and np.isfinite(r[1]) for r in exp.rows)
    rows = list(csv.reader(io.StringIO(exp.to_csv())))
    assert rows[0] == ["x", "y", "domain", "arm"] and len(rows) == 23
    svg = scatter_svg(exp.rows)
    assert svg.startswith("<svg") and svg.count("<circle") == 22


def test_projection_needs_two_domains_and_ten_samples():
    m = _random_model()
    with pytest.raises(ValueError, match="two domains"):
        ev.project_embeddings(m, {"source": [f"a{i} ###" for i in range(12)]})
    with pytest.raises(ValueError, match="at least 10"):
        ev.project_embeddings(m, {"a": ["x ###"] * 3, "b": ["y ###"] * 12})


# ----------------------------------------------------------------------------
# plots


def test_moving_average():
    np.testing.assert_allclose(moving_average([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])
    np.testing.assert_allclose(moving_average([5.0] * 10, 50), [5.0] * 10)


def test_convergence_svg():
    rows = [{"step": i + 1, "L_y": 2.0 / (i + 1), "L_d_src": 0.7, "L_d_tgt": 0.7} for i in range(80)]
    svg = convergence_svg(rows)
    assert svg.count("<polyline") == 3 and svg.rstrip().endswith("</svg>")


# ----------------------------------------------------------------------------
# ablation bookkeeping


def test_default_arms_mirror_component_table():
    arms = default_arms(4, LambdaSchedule("dann_ramp", 0.3))
    assert [a.name for a in arms] == ["L_y", "L_y+L_p", "L_y+L_d", "full"]
    assert [a.components for a in arms] == [(True, False, False), (True, True, False),
                                            (True, False, True), (True, True, True)]
    for a in arms:
        a.validate()


def test_arm_contradictions_are_config_errors():
    with pytest.raises(ConfigError, match="prompt_len is 0"):
        Arm("L_y+L_p", True, False, 0, LambdaSchedule("constant", 0.0)).validate()
    with pytest.raises(ConfigError, match="lambda is 0"):
        Arm("L_y+L_d", False, True, 0, LambdaSchedule("constant", 0.0)).validate()
    with pytest.raises(ConfigError, match="no domain loss"):
        Arm("L_y", False, False, 0, LambdaSchedule("constant", 0.5)).validate()
    with pytest.raises(ConfigError, match="unknown arms"):
        select_arms(["everything"], 4, LambdaSchedule())


def test_single_arm_single_seed_grid():
    arm = default_arms(4, LambdaSchedule())[0]
    grid = AblationGrid([arm], ["last_letter"], [RunResult("L_y", "last_letter", 0, 0.25, 0.5, 0.9, 10, 1.0)])
    lines = grid.to_csv().splitlines()
    assert lines == ["arm,L_y,L_p,L_d,last_letter", "L_y,1,0,0,25.00"]
    table = grid.table().splitlines()
    assert len(table) == 3 and "25.00" in table[2] and "✓" in table[2]


def test_grid_means_over_seeds():
    arms = default_arms(2, LambdaSchedule())
    res = [RunResult(a.name, "t", s, 0.1 * (i + 1) + 0.01 * s, 0.5, 0.5, 1, 0.0)
           for i, a in enumerate(arms) for s in range(3)]
    grid = AblationGrid(arms, ["t"], res)
    assert abs(grid.mean("full", "t") - 0.41) < 1e-12
    assert len(grid.runs_csv().splitlines()) == 13


def test_arms_share_backbone(small_datasets):
    """Every arm starts from the same backbone weights; only prompts and later training differ."""
    from prada.ablation import run_arm
    backbone = StudentModel(ModelConfig(hidden=8, layers=1, heads=1, max_seq=256, prompt_len=0), seed=0)
    data = {"source": small_datasets.source, "target": small_datasets.target,
            "source_eval": small_datasets.source_eval[:6], "target_eval": small_datasets.target_eval[:6]}
    cfg = RunConfig(max_steps=0, prompt_steps=0, eval_every=1, max_new_tokens=4, batch_source=2, batch_target=2)
    hashes = set()
    for arm in default_arms(2, LambdaSchedule("constant", 0.5)):
        model, res = run_arm(backbone, arm, data, cfg, seed=0, probe_size=8)
        hashes.add(model.group_hash("theta_f"))
        assert res.steps == 0
    assert hashes == {backbone.group_hash("theta_f")}
