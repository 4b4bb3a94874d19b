import json

import pytest

from ctglip.experiment import BENCHMARK_ORGANS
from ctglip.reportproc import (
    ABNORMAL,
    DICTIONARY,
    NORMAL,
    PARSED,
    LexiconError,
    OrganDescription,
    OrganLexicon,
    mentions,
    normal_template,
    organ_template,
    parse_report,
    split_sentences,
)
from ctglip.synthdata import CohortSpec, generate_subject


@pytest.fixture
def lexicon():
    return OrganLexicon({1: ("liver", ["hepatic"]), 2: ("spleen", ["splenic"]), 3: ("kidney", ["renal"])})


def test_templates():
    assert organ_template("liver") == "this is a liver in the CT scan"
    assert normal_template("liver") == "no evident abnormality in liver"
    with pytest.raises(ValueError):
        organ_template("")
    with pytest.raises(ValueError):
        normal_template("")


def test_mentions_whole_word():
    assert mentions("Fatty liver.", "liver")
    assert not mentions("deliverable", "liver")
    assert mentions("no evident abnormality", "no evident")


class TestOrganDescription:
    def test_empty_text(self):
        with pytest.raises(ValueError):
            OrganDescription(1, NORMAL, "")

    def test_bad_polarity(self):
        with pytest.raises(ValueError):
            OrganDescription(1, "maybe", "x")

    def test_dictionary_entries_are_abnormal(self):
        with pytest.raises(ValueError):
            OrganDescription(1, NORMAL, "x", DICTIONARY)


class TestLexicon:
    def test_lookup(self, lexicon):
        assert lexicon.ids() == [1, 2, 3]
        assert lexicon.name(2) == "spleen"
        assert lexicon.id_of("kidney") == 3
        assert lexicon.organs_mentioned("Renal cyst seen.") == [3]
        with pytest.raises(LexiconError):
            lexicon.name(9)
        with pytest.raises(LexiconError):
            lexicon.id_of("heart")

    def test_duplicate_name(self):
        with pytest.raises(LexiconError):
            OrganLexicon({1: ("liver", []), 2: ("liver", [])})

    def test_shared_synonym(self):
        with pytest.raises(LexiconError, match="shared"):
            OrganLexicon({1: ("liver", ["abdominal"]), 2: ("spleen", ["abdominal"])})

    def test_json_round_trip(self, lexicon, tmp_path):
        lexicon.save(tmp_path / "lex.json")
        back = OrganLexicon.load(tmp_path / "lex.json")
        assert back.entries == lexicon.entries

    def test_malformed_file_reports_location(self, tmp_path):
        (tmp_path / "lex.json").write_text('{"1": {"name": "liver",}}')
        with pytest.raises(LexiconError, match=r"lex.json:1:"):
            OrganLexicon.load(tmp_path / "lex.json")


def test_split_sentences():
    assert split_sentences("A b. C d.\nE f.") == ["A b.", "C d.", "E f."]
    assert split_sentences("  ") == []


class TestParseReport:
    def test_normal_and_abnormal(self, lexicon):
        parsed = parse_report("Fatty liver. Spleen is unremarkable.", lexicon)
        got = [(d.organ_id, d.polarity, d.text, d.source) for d in parsed]
        assert got == [(1, ABNORMAL, "Fatty liver.", PARSED), (2, NORMAL, "Spleen is unremarkable.", PARSED)]
        assert parsed.abnormal_organs() == {1}

    def test_unassigned_sentences(self, lexicon):
        parsed = parse_report("Liver and spleen enlarged. Heart normal.", lexicon)
        assert len(parsed) == 0
        assert parsed.unassigned == ["Liver and spleen enlarged.", "Heart normal."]

    def test_synonym_assignment(self, lexicon):
        parsed = parse_report("Hepatic cyst.", lexicon)
        assert parsed[0].organ_id == 1 and parsed[0].polarity == ABNORMAL

    def test_custom_negations(self, lexicon):
        parsed = parse_report("Liver clear.", lexicon, negations=("clear",))
        assert parsed[0].polarity == NORMAL

    def test_empty_report(self, lexicon):
        parsed = parse_report("", lexicon)
        assert len(parsed) == 0 and parsed.unassigned == []

    def test_empty_lexicon(self):
        with pytest.raises(LexiconError):
            parse_report("Fatty liver.", OrganLexicon({}))

    def test_to_json(self, lexicon):
        doc = parse_report("Fatty liver. Heart ok.", lexicon).to_json()
        assert json.loads(json.dumps(doc)) == {
            "descriptions": [{"organ_id": 1, "polarity": "abnormal", "text": "Fatty liver.", "source": "parsed"}],
            "unassigned": ["Heart ok."],
        }


def test_round_trip_on_generated_reports():
    spec = CohortSpec(60, BENCHMARK_ORGANS, abnormality_rate=0.4, master_seed=3)
    lexicon = spec.lexicon()
    for i in range(spec.n_subjects):
        s = generate_subject(spec, i)
        parsed = parse_report(s.report, lexicon)
        assert parsed.unassigned == []
        assert parsed.abnormal_organs() == set(s.truth.abnormal)
        normals = {d.organ_id for d in parsed if d.polarity == NORMAL}
        assert not normals & set(s.truth.abnormal)
