import numpy as np
import pytest

from cada.errors import LoadError, ValidationError
from cada.textproc import (
    ADJ,
    CLS_ID,
    ENC,
    ENC_ID,
    MASK_ID,
    NOUN,
    OTHER,
    PAD_ID,
    UNK_ID,
    PosLexicon,
    Vocabulary,
    detokenize,
    extract_attributes,
    mask_attributes,
    mask_random_tokens,
    tokenize,
)

CAPTION = "a person with short black hair wearing a red jacket"


def test_tokenize_layout(vocab):
    tokens = tokenize(CAPTION, vocab, max_len=16)
    assert tokens.ids[0] == CLS_ID
    assert tokens.length == 11
    assert tokens.ids[1] == vocab.encode("a")
    assert np.all(tokens.ids[11:] == PAD_ID)
    assert tokens.pad_mask.tolist() == [False] * 11 + [True] * 5


def test_tokenize_truncates(vocab):
    tokens = tokenize(CAPTION, vocab, max_len=4)
    assert tokens.length == 4
    assert tokens.words == ("a", "person", "with")
    assert not tokens.pad_mask.any()


def test_tokenize_unknown_word(vocab):
    tokens = tokenize("a zebra", vocab, max_len=8)
    assert tokens.ids[2] == UNK_ID


def test_tokenize_rejects_empty(vocab):
    with pytest.raises(ValidationError):
        tokenize("  ,.  ", vocab)


def test_tokenize_encoder_leading(vocab):
    tokens = tokenize(CAPTION, vocab, max_len=16, leading=ENC)
    assert tokens.ids[0] == ENC_ID
    swapped = tokenize(CAPTION, vocab, max_len=16).with_leading(ENC_ID)
    assert np.array_equal(swapped.ids, tokens.ids)


def test_attribute_spans(vocab, lexicon):
    tokens = tokenize(CAPTION, vocab, max_len=16, lexicon=lexicon)
    assert tokens.attribute_spans == [(4, 7), (9, 11)]
    assert [vocab.decode(i) for i in tokens.ids[4:7]] == ["short", "black", "hair"]


def test_unclosed_adjectives_are_skipped(vocab):
    lexicon = PosLexicon(dict(red=ADJ, blue=ADJ, jacket=NOUN, the=OTHER))
    tokens = tokenize("the red the blue jacket", vocab, max_len=8)
    assert extract_attributes(tokens, lexicon) == [(4, 6)]


def test_mask_rate_extremes(vocab, lexicon, rng):
    tokens = tokenize(CAPTION, vocab, max_len=16, lexicon=lexicon)
    nothing = mask_attributes(tokens, tokens.attribute_spans, 0.0, rng)
    assert nothing.n_masked == 0
    assert np.array_equal(nothing.ids, tokens.ids)

    everything = mask_attributes(tokens, tokens.attribute_spans, 1.0, rng)
    assert everything.mask_positions.tolist() == [4, 5, 6, 9, 10]
    assert np.all(everything.ids[everything.mask_positions] == MASK_ID)
    assert np.array_equal(everything.restore(), tokens.ids)


def test_mask_rate_is_per_span(vocab, lexicon):
    tokens = tokenize(CAPTION, vocab, max_len=16, lexicon=lexicon)
    rng = np.random.default_rng(11)
    hits = 0
    for _ in range(5000):
        masked = mask_attributes(tokens, tokens.attribute_spans, 0.8, rng)
        # Spans are masked whole or not at all.
        hits += int(4 in masked.mask_positions) + int(9 in masked.mask_positions)
        assert (4 in masked.mask_positions) == (6 in masked.mask_positions)
    assert hits / 10_000 == pytest.approx(0.8, abs=0.02)


def test_mask_rate_range(vocab, rng):
    tokens = tokenize(CAPTION, vocab, max_len=16)
    with pytest.raises(ValidationError):
        mask_attributes(tokens, [], 1.5, rng)
    with pytest.raises(ValidationError):
        mask_random_tokens(tokens, -0.1, rng)


def test_random_token_mask_skips_specials(vocab, rng):
    tokens = tokenize(CAPTION, vocab, max_len=16)
    masked = mask_random_tokens(tokens, 1.0, rng)
    assert masked.mask_positions.tolist() == list(range(1, 11))
    assert masked.ids[0] == CLS_ID
    assert np.all(masked.ids[11:] == PAD_ID)


def test_detokenize_drops_specials(vocab):
    tokens = tokenize(CAPTION, vocab, max_len=16)
    assert " ".join(detokenize(tokens, vocab)) == CAPTION


def test_vocabulary_round_trip(tmp_path, vocab):
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    loaded = Vocabulary.load(path)
    assert loaded.id_to_token == vocab.id_to_token


def test_vocabulary_duplicates(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("red\nblue\nred\n")
    with pytest.raises(LoadError):
        Vocabulary.load(path)


def test_lexicon_round_trip_and_errors(tmp_path, lexicon):
    path = tmp_path / "lexicon.tsv"
    lexicon.save(path)
    assert PosLexicon.load(path).tags == lexicon.tags
    assert lexicon.tag("zebra") == OTHER

    path.write_text("red ADJ\n")
    with pytest.raises(LoadError):
        PosLexicon.load(path)
    with pytest.raises(ValidationError):
        PosLexicon(dict(red="COLOR"))
    with pytest.raises(LoadError):
        PosLexicon.load(tmp_path / "missing.tsv")
