import pytest

from hrvkit.errors import DataError, PreconditionError, UnknownConceptError
from hrvkit.vocab import POLYSEMY_CASES, ConceptVocabulary, Word, default_vocabulary


def test_default_vocabulary_shape():
    v = default_vocabulary()
    assert len(v) == 34
    assert all(len(c.words) == 10 for c in v)
    assert v.names[:3] == ["Color", "Animals", "Plants"]
    assert "Color" in v.names and "Plants" in v.names


def test_multiword_entries_carry_token_counts():
    v = default_vocabulary()
    words = {w.text: w for w in v.all_words()}
    assert words["oak tree"].n_tokens == 2
    assert words["black and white"].n_tokens == 3


def test_word_parse_round_trip():
    for spec in ["cat", "oak tree#2", "Rio de Janeiro#3"]:
        assert str(Word.parse(spec)) == spec
    with pytest.raises(PreconditionError):
        Word("", 1)
    with pytest.raises(PreconditionError):
        Word("x", 0)


def test_tsv_round_trip_and_fingerprint():
    v = default_vocabulary()
    back = ConceptVocabulary.from_tsv(v.to_tsv())
    assert back == v
    assert back.fingerprint() == v.fingerprint()
    assert v.extended("Fruit", ["apple"]).fingerprint() != v.fingerprint()


def test_vocabulary_rejects_bad_input():
    with pytest.raises(PreconditionError):
        ConceptVocabulary([("Only", ["x"])])
    with pytest.raises(PreconditionError):
        ConceptVocabulary([("A", ["x"]), ("A", ["y"])])
    with pytest.raises(PreconditionError):
        ConceptVocabulary([("A", []), ("B", ["y"])])
    with pytest.raises(DataError):
        ConceptVocabulary.from_tsv("justonecolumn\n")


def test_unknown_concept():
    with pytest.raises(UnknownConceptError):
        default_vocabulary().index("Colour")


def test_extended_appends():
    v = default_vocabulary().extended("Fruit", ["apple", "pear"])
    assert len(v) == 35 and v.names[-1] == "Fruit"


def test_polysemy_cases_reference_known_concepts():
    names = set(default_vocabulary().names)
    assert len(POLYSEMY_CASES) == 10
    for prompt, token, desired, undesired in POLYSEMY_CASES:
        assert desired in names and undesired in names
        assert token in prompt
