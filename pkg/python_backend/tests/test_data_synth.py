'''
Tests for corpus generation, tokenization, the dataset file format and corpus statistics.
'''

import numpy as np
import pytest

from numerics import ContractViolation
from data_synth import (
    BOS,
    EOT,
    UNK,
    DatasetFormatError,
    DatasetRecord,
    SynthConfig,
    Vocabulary,
    build_vocabulary,
    generate_classification_set,
    generate_dataset,
    read_dataset,
    read_vocabulary,
    render_captions,
    render_image,
    split_words,
    tokenize,
    truncate_words,
    with_attribute,
    write_dataset,
    write_vocabulary,
)
from corpus_stats import calculate_statistics, first_mention_positions, max_caption_tokens

# -------------------------------------------------------------------------------------------------
# Generation
# -------------------------------------------------------------------------------------------------


class TestGeneration:

    def test_same_seed_same_corpus(self):
        first = [s.as_record() for s in generate_dataset(7, 12)]
        second = [s.as_record() for s in generate_dataset(7, 12)]
        assert first == second

    def test_different_seed_different_corpus(self):
        first = [s.as_record() for s in generate_dataset(7, 12)]
        second = [s.as_record() for s in generate_dataset(8, 12)]
        assert first != second

    def test_default_long_captions_are_long(self):
        samples = generate_dataset(7, 8)
        for s in samples:
            assert len(split_words(s.captions.long_text)) == 50
            assert len(split_words(s.captions.short_text)) < 20

    def test_short_caption_is_prefix_of_content(self):
        sample = generate_dataset(7, 1)[0]
        for a in sample.scene.attributes[: sample.scene.primary_count]:
            assert f'a {a.color} {a.object}' in sample.captions.short_text
            assert f'a {a.color} {a.object} in the {a.position}' in sample.captions.long_text

    def test_siblings_share_primaries_and_short_caption(self):
        samples = generate_dataset(7, 8)
        groups = {}
        for s in samples:
            groups.setdefault(s.scene.group_id, []).append(s)
        for members in groups.values():
            assert len(members) == 4
            assert len({m.captions.short_text for m in members}) == 1
            assert len({m.captions.long_text for m in members}) == len(members)

    def test_tail_attributes_only_in_long_caption(self):
        for s in generate_dataset(7, 8):
            for a in s.scene.attributes[s.scene.primary_count:]:
                assert f'a {a.color} {a.object} in the {a.position}' in s.captions.long_text
                assert a.object not in split_words(s.captions.short_text)

    def test_late_mentions_exist(self):
        text = generate_dataset(7, 1)[0].captions.long_text
        objects = [a.object for a in generate_dataset(7, 1)[0].scene.attributes]
        assert max(first_mention_positions(text, objects).values()) > 30

    def test_image_shape_and_salience(self):
        sample = generate_dataset(7, 1)[0]
        assert sample.image.shape == (16, 16)
        saliences = [a.salience for a in sample.scene.attributes]
        assert saliences == sorted(saliences, reverse=True)

    def test_image_depends_on_attribute(self):
        config = SynthConfig(noise=0.0)
        sample = generate_dataset(7, 1, config)[0]
        new_color = 'green' if sample.scene.attributes[0].color != 'green' else 'red'
        changed = with_attribute(sample.scene, 0, color=new_color)
        rng = np.random.default_rng(0)
        assert not np.allclose(render_image(sample.scene, config, rng), render_image(changed, config, rng))

    def test_captions_follow_attribute_edits(self):
        sample = generate_dataset(7, 1)[0]
        changed = with_attribute(sample.scene, 3, object='zebra-striped-thing')
        assert 'zebra-striped-thing' in render_captions(changed).long_text
        assert 'zebra-striped-thing' not in render_captions(changed).short_text

    def test_invalid_config(self):
        with pytest.raises(ContractViolation):
            SynthConfig(primary_count=7).validate()
        with pytest.raises(ContractViolation):
            generate_dataset(0, 0)

    def test_classification_set(self):
        images, labels, names = generate_classification_set(3, 5, 4)
        assert len(images) == len(labels) == 20
        assert sorted(set(labels)) == [0, 1, 2, 3]
        assert len(set(names)) == 4
        assert all(len(split_words(n)) == 2 for n in names)


# -------------------------------------------------------------------------------------------------
# Vocabulary / tokenization
# -------------------------------------------------------------------------------------------------


class TestTokenization:

    def test_vocabulary_covers_corpus(self, vocab):
        for s in generate_dataset(7, 20):
            for word in split_words(s.captions.long_text):
                assert word in vocab.index

    def test_reserved_ids(self, vocab):
        seq = tokenize('a photo of a red cat', vocab, 77)
        assert seq.ids[0] == BOS and seq.ids[-1] == EOT
        assert seq.length == 8

    def test_truncation_keeps_eot(self, vocab):
        seq = tokenize('a photo of a red cat', vocab, 5)
        assert seq.length == 5
        assert seq.ids[-1] == EOT
        assert seq.ids[1:4] == tuple(vocab.id_of(w) for w in ['a', 'photo', 'of'])

    def test_unknown_word_maps_to_unk(self, caplog):
        vocab = build_vocabulary()
        with caplog.at_level('WARNING'):
            seq = tokenize('a flibbertigibbet', vocab, 10)
            tokenize('a flibbertigibbet', vocab, 10)
        assert seq.ids[2] == UNK
        assert sum('flibbertigibbet' in r.message for r in caplog.records) == 1

    def test_empty_text(self, vocab):
        assert tokenize('', vocab, 77).ids == (BOS, EOT)

    def test_long_caption_truncated_to_context(self, vocab):
        text = ' '.join(['red'] * 100)
        seq = tokenize(text, vocab, 77)
        assert seq.length == 77
        assert seq.ids[-1] == EOT

    def test_prefix_stable(self, vocab):
        text = generate_dataset(7, 1)[0].captions.long_text
        for m1, m2 in [(3, 10), (10, 30), (22, 77)]:
            short, long = tokenize(text, vocab, m1).ids[:-1], tokenize(text, vocab, m2).ids[:-1]
            assert long[: len(short)] == short

    def test_max_len_too_small(self, vocab):
        with pytest.raises(ContractViolation):
            tokenize('a', vocab, 2)

    def test_truncate_words(self):
        assert truncate_words('one two three four', 2) == 'one two'
        assert truncate_words('one two', 10) == 'one two'

    def test_vocabulary_roundtrip(self, tmp_path, vocab):
        write_vocabulary(tmp_path / 'vocab.txt', vocab)
        loaded = read_vocabulary(tmp_path / 'vocab.txt')
        assert loaded.tokens == vocab.tokens
        assert len(loaded) == len(vocab)

    def test_vocabulary_rejects_reserved(self):
        with pytest.raises(ContractViolation):
            Vocabulary(['<pad>', 'cat'])


# -------------------------------------------------------------------------------------------------
# Dataset files
# -------------------------------------------------------------------------------------------------


class TestDatasetFiles:

    def test_write_read_write_is_byte_identical(self, tmp_path):
        records = [s.as_record() for s in generate_dataset(7, 6)]
        write_dataset(tmp_path / 'a.jsonl', records)
        loaded = read_dataset(tmp_path / 'a.jsonl')
        assert loaded == records
        write_dataset(tmp_path / 'b.jsonl', loaded)
        assert (tmp_path / 'a.jsonl').read_bytes() == (tmp_path / 'b.jsonl').read_bytes()

    def test_field_order(self, tmp_path):
        write_dataset(tmp_path / 'a.jsonl', [s.as_record() for s in generate_dataset(7, 1)])
        line = (tmp_path / 'a.jsonl').read_text().splitlines()[0]
        assert line.index('"id"') < line.index('"long"') < line.index('"short"') < line.index('"image"')

    def test_empty_file(self, tmp_path):
        (tmp_path / 'empty.jsonl').write_text('')
        assert read_dataset(tmp_path / 'empty.jsonl') == []

    def test_malformed_line_reports_line_number(self, tmp_path):
        good = [s.as_record() for s in generate_dataset(7, 2)]
        write_dataset(tmp_path / 'a.jsonl', good)
        with open(tmp_path / 'a.jsonl', 'a') as fh:
            fh.write('{"id": 3, "long": \n')
        with pytest.raises(DatasetFormatError, match='line 3'):
            read_dataset(tmp_path / 'a.jsonl')

    def test_wrong_field_order_rejected(self, tmp_path):
        (tmp_path / 'a.jsonl').write_text('{"long": "x", "id": 0, "short": "y", "image": [[0.0]]}\n')
        with pytest.raises(DatasetFormatError, match='line 1'):
            read_dataset(tmp_path / 'a.jsonl')

    def test_record_equality_uses_image_values(self):
        a = DatasetRecord(0, 'l', 's', np.zeros((2, 2)))
        b = DatasetRecord(0, 'l', 's', np.ones((2, 2)))
        assert a != b


# -------------------------------------------------------------------------------------------------
# Corpus statistics
# -------------------------------------------------------------------------------------------------


class TestCorpusStats:

    def test_statistics(self):
        records = [s.as_record() for s in generate_dataset(7, 8)]
        stats = calculate_statistics(records)
        assert stats['records'] == 8
        assert stats['imageShape'] == [16, 16]
        long_stats = next(s for s in stats['statistics'] if s['column'] == 'long_tokens')
        assert long_stats['min'] == long_stats['max'] == 50

    def test_empty(self):
        assert calculate_statistics([])['records'] == 0

    def test_max_caption_tokens(self):
        records = [s.as_record() for s in generate_dataset(7, 4)]
        assert max_caption_tokens(records, 'long') == 50
        with pytest.raises(ValueError):
            max_caption_tokens(records, 'medium')

    def test_first_mentions(self):
        positions = first_mention_positions('a photo of a red cat', ['red', 'cat', 'dog'])
        assert positions == {'red': 4, 'cat': 5, 'dog': -1}
