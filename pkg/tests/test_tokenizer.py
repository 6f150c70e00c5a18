import numpy as np
import pytest

from fundusfuse.data import NEGATIVE_NOTE
from fundusfuse.errors import MissingFile
from fundusfuse.synth import TEMPLATES
from fundusfuse.tokenizer import Tokenizer, tokenize_text


@pytest.fixture(scope="module")
def tok():
    return Tokenizer.build(list(TEMPLATES.values()) + [NEGATIVE_NOTE], max_tokens=128)


def test_empty_string(tok):
    t = tokenize_text("", tok)
    assert t.ids.shape == (128,)
    assert list(t.ids[:2]) == [tok.bos_id, tok.eos_id]
    assert (t.ids[2:] == tok.pad_id).all()
    assert t.mask.sum() == 2 and t.mask[:2].all()


def test_long_note_truncated(tok):
    note = " ".join(["drusen"] * 300)
    t = tok(note)
    assert t.mask.all()
    assert len(t.ids) == 128
    assert t.ids[0] == tok.bos_id and t.ids[127] == tok.eos_id
    assert (t.ids[1:127] == tok.index["drusen"]).all()


def test_fixed_string_snapshot(tok):
    # vocabulary built from the synthetic templates; ids frozen from a reference run
    assert tok.encode("Diabetic retinopathy is present.") == [2, 7, 18, 13, 16, 4, 3]
    assert len(tok) == 98


def test_stable_across_instances(tok):
    other = Tokenizer.build(list(TEMPLATES.values()) + [NEGATIVE_NOTE], max_tokens=128)
    note = "Macular edema is present. Drusen are present."
    np.testing.assert_array_equal(tok(note).ids, other(note).ids)


def test_unknown_word_falls_back_to_pieces(tok):
    ids = tok.encode("retinopathies")
    assert tok.unk_id not in ids
    assert tok.decode(ids) == "retinopathies"
    assert tok.encode("!")[1] == tok.unk_id


def test_decode_roundtrip(tok):
    note = "Diabetic retinopathy is present. Macular edema is present."
    assert tok.decode(tok(note).ids) == "diabetic retinopathy is present . macular edema is present ."


def test_save_load(tok, tmp_path):
    tok.save(tmp_path / "vocab.txt")
    again = Tokenizer.load(tmp_path / "vocab.txt", 128)
    assert again.vocab == tok.vocab
    with pytest.raises(MissingFile):
        Tokenizer.load(tmp_path / "missing.txt")


def test_bert_style_markers():
    t = Tokenizer(["[PAD]", "[UNK]", "[CLS]", "[SEP]", "eye"], max_tokens=8)
    assert t.encode("eye") == [2, 4, 3]


def test_missing_special_rejected():
    with pytest.raises(ValueError):
        Tokenizer(["[PAD]", "[UNK]", "eye"])
