import numpy as np
import pytest

from hrvkit.core import HeadId, normalize_hrv, head_order
from hrvkit.adapter import build_raw_online
from hrvkit.errors import DataError, PreconditionError, UnknownConceptError
from hrvkit.toy import (ToyConfig, PlantSpec, ToyEngine, concept_prompts, plant_concept_head,
                        toy_prompts)
from hrvkit.vocab import Word


def test_encode_layout(toy):
    enc = toy.encode_text([Word("a"), Word("oak tree", 2)])
    assert enc.embeddings.shape == (8, 16)
    assert enc.semantic_mask.tolist() == [False, True, True, True, False, False, False, False]
    assert [(s.start, s.stop) for s in enc.spans] == [(1, 2), (2, 4)]
    np.testing.assert_allclose(np.linalg.norm(enc.embeddings, axis=1), 1.0)
    # the end token fills every trailing slot
    assert np.array_equal(enc.embeddings[4], enc.embeddings[7])


def test_embeddings_are_context_free(toy):
    a = toy.encode_text("a red tree")
    b = toy.encode_text("the tree red")
    assert np.array_equal(a.embeddings[2], b.embeddings[3])


def test_encode_overflow(toy):
    with pytest.raises(DataError):
        toy.encode_text("a b c d e f g")


def test_config_text_round_trip(tmp_path):
    cfg = ToyConfig(layers=2, T=7, eta=0.25)
    assert ToyConfig.from_text(cfg.to_text()) == cfg
    p = tmp_path / "toy.cfg"
    p.write_text("layers=2\n# comment\nT = 7\n")
    assert ToyConfig.load(p).T == 7
    with pytest.raises(DataError):
        ToyConfig.from_text("colour=3\n")
    with pytest.raises(PreconditionError):
        ToyConfig(F=0)


def test_planting_changes_only_planted_keys(toy):
    hid = HeadId(1, 2)
    planted = plant_concept_head(toy, PlantSpec.disjoint({"Color": [hid]}, 10.0))
    h = toy.flat(hid)
    u = toy.concept_direction("Color")
    b = toy.bias[h] / np.linalg.norm(toy.bias[h])
    np.testing.assert_array_equal(planted.Wk[h], toy.Wk[h] + 10.0 * np.outer(u, b))
    for i in range(len(toy.Wk)):
        if i != h:
            assert planted.Wk[i] is toy.Wk[i]
    assert toy.planted == {} and planted.planted == {hid: "Color"}


def test_planting_rejects_unknown_concept_and_head(toy):
    with pytest.raises(UnknownConceptError):
        plant_concept_head(toy, PlantSpec.disjoint({"Colour": [HeadId(0, 0)]}))
    with pytest.raises(PreconditionError):
        plant_concept_head(toy, PlantSpec.disjoint({"Color": [HeadId(9, 0)]}))


def test_zero_gain_is_a_no_op(toy):
    planted = plant_concept_head(toy, PlantSpec.disjoint({"Color": [HeadId(0, 0)]}, 0.0))
    a = toy.generate_with_hooks("a red", 2)
    assert planted.generate_with_hooks("a red", 2).same_as(a)


def test_score_planted_by_hand(toy):
    run = toy.generate_with_hooks("a red", 2)
    u = toy.concept_direction("Color")
    want = sum(float(row @ u) for row in run.final) / len(run.final)
    assert abs(toy.score_planted(run, "Color") - want) < 1e-12


def test_single_planted_head_recovered(small_vocab):
    eng = ToyEngine(ToyConfig(), small_vocab)
    hid = HeadId(2, 1)
    pe = plant_concept_head(eng, PlantSpec.disjoint({"Plants": [hid]}, 10.0))
    hrv = normalize_hrv(build_raw_online(pe, small_vocab, toy_prompts(small_vocab, 10, 0), 1))
    assert pe.head_ids[head_order(hrv, "Plants", "morhf")[0]] == hid


def test_prompt_helpers(small_vocab):
    ps = toy_prompts(small_vocab, 30, seed=4)
    assert ps == toy_prompts(small_vocab, 30, seed=4)
    assert all(sum(w.n_tokens for w in p) <= 6 for p in ps)
    cp = concept_prompts(small_vocab, "Plants")
    assert len(cp) == 4 and cp[0][-1] == Word("tree")


def test_edit_without_replacement_matches_plain_runs(toy):
    src, tgt = toy.generate_edit("a red tree", "a blue tree", 3, lambda h, t, ms, mt: mt)
    assert src.same_as(toy.generate_with_hooks("a red tree", 3))
    assert tgt.same_as(toy.generate_with_hooks("a blue tree", 3))
