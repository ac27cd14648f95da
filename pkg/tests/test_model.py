import numpy as np
import pytest

from prada import autodiff as ad
from prada.model import (ALPHABET, GROUPS, TOKENIZER, CheckpointError, LengthError, ModelConfig, StudentModel,
                         encode_pairs, encode_questions, encode_text, load_checkpoint, save_checkpoint)

from conftest import perturb, tiny_config, tiny_model


def test_alphabet_is_printable_ascii_plus_newline():
    assert len(ALPHABET) == 96 and TOKENIZER.vocab_size == 96
    text = "The last letter of 'apple' is 'e'. --> e END\n"
    assert TOKENIZER.decode(TOKENIZER.encode(text)) == text


def test_tokenizer_rejects_unknown_character():
    with pytest.raises(ValueError, match="outside"):
        TOKENIZER.encode("café")


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        ModelConfig(hidden=10, heads=3).validate()


def test_encode_pairs_layout(short_pairs):
    k_p = 2
    b = encode_pairs(short_pairs[:1], k_p, 64)
    q, c = short_pairs[0]
    ids = TOKENIZER.encode(q + " " + c)
    assert b.tokens[0].tolist() == ids
    scored = np.flatnonzero(b.loss_mask[0])
    # logits at position s predict token s + 1 - k_p; scored targets spell the completion
    assert TOKENIZER.decode(b.targets[0, scored]) == c
    assert TOKENIZER.decode(b.tokens[0, np.flatnonzero(b.question_mask[0]) - k_p]) == q


def test_encode_pairs_without_prompts_scores_same_text(short_pairs):
    b = encode_pairs(short_pairs, 0, 64)
    for i, (_, c) in enumerate(short_pairs):
        assert TOKENIZER.decode(b.targets[i, b.loss_mask[i] > 0]) == c


def test_encode_questions_has_no_loss_positions():
    b = encode_questions(["abc ###", "a ###"], 3, 64)
    assert b.loss_mask.sum() == 0
    assert b.question_mask.sum(axis=1).tolist() == [7, 5]


def test_encode_text_scores_every_next_token():
    b = encode_text(["hello", "hi"], 16)
    assert b.loss_mask.sum() == 4 + 1
    assert TOKENIZER.decode(b.targets[0, :4]) == "ello"


def test_length_limit():
    with pytest.raises(LengthError, match="max_seq"):
        encode_pairs([("a" * 30 + " ###", "b END")], 4, 32)


def test_groups_are_disjoint_and_cover_all_parameters():
    m = tiny_model()
    seen = [n for g in GROUPS for n in m.groups[g]]
    assert sorted(seen) == sorted(m.params) and len(seen) == len(set(seen))
    assert m.groups["prompt"] == ["prompt.0", "prompt.1"]
    assert m.params["prompt.0"].shape == (2, 8)


def test_parameter_budget_of_default_model():
    counts = StudentModel(ModelConfig(), seed=0).parameter_counts()
    assert counts["total"] < 1_000_000


def test_prompt_prefix_lengthens_sequence():
    m = tiny_model()
    toks = np.array([TOKENIZER.encode("abc ###")])
    with ad.no_grad():
        assert m.features(toks).shape == (1, 2 + 7, 8)
        assert m.features(toks, use_prompts=False).shape == (1, 7, 8)


def test_deep_prompts_reach_every_layer():
    """Changing the layer-1 prompt bank moves the token features."""
    m = perturb(tiny_model())
    toks = np.array([TOKENIZER.encode("abc ###")])
    with ad.no_grad():
        before = m.features(toks).data.copy()
        m.params["prompt.1"].data = np.random.default_rng(1).normal(size=(2, 8))
        after = m.features(toks).data
    assert not np.allclose(before[:, 2:], after[:, 2:])


def test_causality():
    m = perturb(tiny_model())
    a = np.array([TOKENIZER.encode("abcdef")])
    b = np.array([TOKENIZER.encode("abcxyz")])
    with ad.no_grad():
        fa, fb = m.features(a).data, m.features(b).data
    np.testing.assert_array_equal(fa[:, :2 + 3], fb[:, :2 + 3])


def test_end_to_end_gradcheck_two_layers_h8():
    """Spot-check every parameter tensor of a 2-layer H=8 model against central differences."""
    pairs = [("ab c ###", "b c --> bc END"), ("de ###", "e --> e END")]
    for seed in range(10):
        m = perturb(tiny_model(seed=seed), seed=seed, scale=0.2)
        src = encode_pairs(pairs, 2, 64)
        tgt = encode_questions(["fgh i ###", "jk ###"], 2, 64)

        def objective():
            f_s = m.features(src.tokens)
            f_t = m.features(tgt.tokens)
            ly = ad.softmax_cross_entropy(m.lm_logits(f_s), src.targets, src.loss_mask)
            ds = ad.softmax_cross_entropy(m.domain_logits(f_s, src.question_mask, reverse=False), [0, 0])
            dt = ad.softmax_cross_entropy(m.domain_logits(f_t, tgt.question_mask, reverse=False), [1, 1])
            return ly + ad.scale(ds + dt, 0.7)

        with ad.Tape() as tape:
            tape.backward(objective())
        grads = {k: p.grad.copy() for k, p in m.params.items()}
        rng = np.random.default_rng(seed)
        for name, p in m.params.items():
            flat = p.data.reshape(-1)
            g = grads[name].reshape(-1)
            for i in rng.choice(flat.size, size=min(4, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + 1e-5
                with ad.no_grad():
                    fp = objective().item()
                flat[i] = orig - 1e-5
                with ad.no_grad():
                    fm = objective().item()
                flat[i] = orig
                num = (fp - fm) / 2e-5
                err = ad.relative_error(np.array([g[i]]), np.array([num]))[0]
                assert err < 1e-4, f"seed {seed} {name}[{i}]: analytic {g[i]} numeric {num}"


def test_from_backbone_copies_backbone_and_seeds_prompts():
    base = tiny_model(seed=1)
    a = StudentModel.from_backbone(base, 3, seed=5)
    b = StudentModel.from_backbone(base, 3, seed=5)
    c = StudentModel.from_backbone(base, 0, seed=5)
    for g in ("theta_f", "theta_y", "theta_d"):
        assert a.group_hash(g) == base.group_hash(g)
    assert a.group_hash("prompt") == b.group_hash("prompt")
    assert a.params["prompt.0"].shape == (3, 8)
    assert c.groups["prompt"] == []


def test_checkpoint_round_trip(tmp_path):
    m = perturb(tiny_model())
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m, extra={"note": "x"}, arrays={"opt.m": np.arange(3.0)})
    back, extra, arrays = load_checkpoint(path)
    assert extra == {"note": "x"}
    np.testing.assert_array_equal(arrays["opt.m"], np.arange(3.0))
    for k, v in m.params.items():
        assert np.array_equal(v.data, back.params[k].data)
    assert back.groups == m.groups and back.config == m.config
    save_checkpoint(tmp_path / "again.ckpt", back, extra={"note": "x"}, arrays={"opt.m": np.arange(3.0)})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_config_mismatch_names_both(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tiny_model())
    with pytest.raises(CheckpointError, match=r"hidden=8.*hidden=16"):
        load_checkpoint(path, expect=tiny_config(hidden=16))


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_clone_is_independent():
    m = tiny_model()
    c = m.clone()
    c.params["tok_emb"].data[0, 0] += 1.0
    assert m.params["tok_emb"].data[0, 0] != c.params["tok_emb"].data[0, 0]
