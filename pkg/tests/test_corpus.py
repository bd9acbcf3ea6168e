import os
import tempfile

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corpus import (
    CLS_ID,
    EOS_ID,
    MASK_ID,
    FIRST_CONTENT_ID,
    NUM_SPECIAL,
    SEPARATOR_ID,
    Vocabulary,
    description_window,
    detokenize,
    load_corpus,
    mask_mentions,
    mask_sequence,
    mask_tokens,
    tokenize,
    write_corpus,
)
from exceptions import DataFormatError
from models import AnnotatedSequence, Mention, Question


class TestVocabulary:
    """Tests for Vocabulary"""

    def test_special_ids_fixed(self, vocab):
        """Test special tokens take ids 0-4 and the separator id 5"""
        assert vocab.id('[MASK]') == MASK_ID == 0
        assert vocab.id('[CLS]') == CLS_ID == 1
        assert vocab.id('[EOS]') == EOS_ID == 2
        assert vocab.separator_id == 5
        assert vocab.id('alpha') == 6

    def test_unknown_word_maps_to_unk(self, vocab):
        """Test out-of-vocabulary words become [UNK]"""
        assert vocab.encode(['zeta']) == [4]

    def test_duplicate_token(self):
        """Test duplicate content tokens are rejected"""
        with pytest.raises(ValueError, match="duplicate"):
            Vocabulary(['a', 'a'])

    def test_file_round_trip(self, vocab):
        """Test a saved vocabulary reloads with the same ids"""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = vocab.to_file(os.path.join(tmpdir, 'vocab.txt'))
            loaded = Vocabulary.from_file(path)
        assert loaded.tokens == vocab.tokens

    def test_file_without_specials(self):
        """Test a vocabulary file must start with the special tokens"""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = os.path.join(tmpdir, 'vocab.txt')
            with open(path, 'w') as f:
                f.write("alpha\nbeta\n")
            with pytest.raises(DataFormatError, match="special tokens"):
                Vocabulary.from_file(path)

    def test_tokenize_wraps(self, vocab):
        """Test tokenize adds [CLS] and [EOS] and detokenize strips them"""
        ids = tokenize("alpha of the beta", vocab)
        assert ids[0] == CLS_ID and ids[-1] == EOS_ID
        assert detokenize(ids, vocab) == "alpha of the beta"


class TestAnnotatedSequence:
    """Tests for corpus lines"""

    def test_parse_line(self, vocab):
        """Test tokens and mentions are read from one line"""
        seq = AnnotatedSequence.from_line("[CLS] alpha beta of the [EOS]\t3:1:2", vocab)
        assert seq.tokens == [1, 6, 7, 10, 11, 2]
        assert seq.mentions == [Mention(3, 1, 2)]

    def test_mention_on_wrapper_rejected(self, vocab):
        """Test a mention covering [CLS] is a format error with its line number"""
        with pytest.raises(DataFormatError, match="corpus.tsv:7"):
            AnnotatedSequence.from_line("[CLS] alpha [EOS]\t0:0:1", vocab, path='corpus.tsv', line_number=7)

    def test_overlapping_mentions_rejected(self, vocab):
        """Test overlapping spans are rejected"""
        with pytest.raises(DataFormatError, match="overlaps"):
            AnnotatedSequence.from_line("[CLS] alpha beta gamma [EOS]\t0:1:2;1:2:3", vocab)

    def test_corpus_file_round_trip(self, vocab):
        """Test written sequences load back unchanged"""
        sequences = [
            AnnotatedSequence([1, 6, 7, 2], [Mention(0, 1, 1)]),
            AnnotatedSequence([1, 8, 2], []),
        ]
        with tempfile.TemporaryDirectory() as tmpdir:
            path = write_corpus(sequences, vocab, os.path.join(tmpdir, 'corpus.tsv'))
            assert load_corpus(path, vocab) == sequences

    def test_question_line(self, vocab):
        """Test a question line keeps candidates and hop count"""
        question = Question((1, 6, 7, 2), Mention(4, 1, 1), 2, (2, 3, 5), 2)
        assert Question.from_line(question.to_line(vocab), vocab) == question

    def test_question_line_field_count(self, vocab):
        """Test a short question line is a format error"""
        with pytest.raises(DataFormatError, match="5 fields"):
            Question.from_line("[CLS] alpha [EOS]\t0:1:1", vocab)


class TestMasking:
    """Tests for token and mention masking"""

    def test_token_count_is_ceiling(self):
        """Test 15% of 20 usable positions selects 3"""
        tokens = [CLS_ID] + list(range(NUM_SPECIAL + 1, NUM_SPECIAL + 21)) + [EOS_ID]
        _, targets = mask_tokens(tokens, vocab_size=40, rate=0.15, seed=0)
        assert len(targets) == 3

    def test_mix_is_exact_for_ten(self):
        """Test ten selections split 8 masked, 1 random, 1 unchanged"""
        tokens = [CLS_ID] + [NUM_SPECIAL + 1 + (i % 30) for i in range(50)] + [EOS_ID]
        corrupted, targets = mask_tokens(tokens, vocab_size=40, rate=0.2, seed=4)
        assert len(targets) == 10
        masked = sum(1 for position, _ in targets if corrupted[position] == MASK_ID)
        assert masked == 8

    def test_specials_never_selected(self):
        """Test [CLS] and [EOS] positions are never targets"""
        tokens = [CLS_ID, 8, 9, EOS_ID]
        _, targets = mask_tokens(tokens, vocab_size=20, rate=0.5, seed=1)
        assert all(0 < position < 3 for position, _ in targets)

    def test_separator_never_selected(self):
        """Test a [SEP] between two segments is never a target"""
        tokens = [CLS_ID, 8, 9, 10, SEPARATOR_ID, 11, 12, 13, EOS_ID]
        for seed in range(20):
            _, targets = mask_tokens(tokens, vocab_size=20, rate=0.9, seed=seed)
            assert 4 not in {position for position, _ in targets}

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_random_replacements_are_content(self, seed):
        """Test corrupted positions hold [MASK], the original, or a content token"""
        tokens = [CLS_ID] + [FIRST_CONTENT_ID + (i % 7) for i in range(40)] + [EOS_ID]
        corrupted, targets = mask_tokens(tokens, vocab_size=FIRST_CONTENT_ID + 7, rate=0.5, seed=seed)
        for position, _ in targets:
            assert corrupted[position] == MASK_ID or corrupted[position] >= FIRST_CONTENT_ID
        assert SEPARATOR_ID not in corrupted

    def test_no_usable_positions(self):
        """Test a sequence of specials selects nothing"""
        assert mask_tokens([CLS_ID, EOS_ID], vocab_size=20) == ([CLS_ID, EOS_ID], [])

    def test_bad_rate(self):
        """Test a rate outside (0, 1) raises"""
        with pytest.raises(ValueError, match="mask rate"):
            mask_tokens([CLS_ID, 7, EOS_ID], vocab_size=20, rate=1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 12), st.integers(0, 10_000))
    def test_mentions_partition(self, count, seed):
        """Test visible and masked mentions partition the input"""
        mentions = [Mention(i, i + 1, i + 1) for i in range(count)]
        visible, masked = mask_mentions(mentions, rate=0.15, seed=seed)
        assert sorted(visible + masked, key=lambda m: m.entity) == mentions
        assert len(masked) == (0 if count == 0 else -(-15 * count // 100))

    def test_mask_sequence_seeded(self):
        """Test equal seeds give equal corruption"""
        seq = AnnotatedSequence([CLS_ID, 7, 8, 9, 10, EOS_ID], [Mention(0, 1, 2)])
        assert mask_sequence(seq, 20, 0.15, 0.15, seed=5) == mask_sequence(seq, 20, 0.15, 0.15, seed=5)


class TestDescriptionWindow:
    """Tests for description clipping"""

    def test_keeps_surviving_mention(self):
        """Test a mention inside the window is used"""
        tokens, span = description_window([CLS_ID, 7, 8, 9, EOS_ID], [(2, 3)], max_len=8)
        assert span == (2, 3)
        assert tokens == [CLS_ID, 7, 8, 9, EOS_ID]

    def test_clipped_mention_falls_back(self):
        """Test a mention cut off by clipping falls back to (1, 1)"""
        tokens, span = description_window([CLS_ID, 7, 8, 9, 10, 11, EOS_ID], [(4, 5)], max_len=4)
        assert tokens == [CLS_ID, 7, 8, EOS_ID]
        assert span == (1, 1)

    def test_no_mention(self):
        """Test a description without mentions uses (1, 1)"""
        assert description_window([CLS_ID, 7, EOS_ID])[1] == (1, 1)
