import pytest
import torch

from regalign.data.concepts import (Lexicon, ConceptPool, extract_concepts, fill_prompt, build_concept_pool,
                                    count_concepts, encode_concepts, make_pool, pool_from_vocabulary)
from regalign.utils.errors import BadTemplate, EmptyPool, CorruptFile

LEXICON = Lexicon(adjectives=['red', 'green', 'blue', 'big'], nouns=['circle', 'square', 'bar'])


class TestExtractConcepts:
    @pytest.mark.parametrize('caption, expected', [
        ('a photo of a red circle and a blue square', ['red circle', 'blue square']),
        ('A Photo of a RED Circle.', ['red circle']),
        ('a big red bar', ['big red bar']),
        ('a circle', ['circle']),
        ('a red photo of nothing', []),
        ('', []),
        ('red, circle', ['red circle']),
    ])
    def test_chunks(self, caption, expected):
        assert extract_concepts(caption, LEXICON) == expected

    def test_adjacent_nouns_split(self):
        assert extract_concepts('square circle', LEXICON) == ['square', 'circle']

    def test_unknown_word_breaks_chunk(self):
        assert extract_concepts('a red shiny circle', LEXICON) == ['circle']


class TestFillPrompt:
    def test_fill(self):
        assert fill_prompt('red circle', 'a photo of a {}') == 'a photo of a red circle'

    @pytest.mark.parametrize('template', ['a photo', '{} and {}'])
    def test_bad_template(self, template):
        with pytest.raises(BadTemplate):
            fill_prompt('red circle', template)


class TestConceptPool:
    CAPTIONS = [
        'a photo of a red circle',
        'a photo of a red circle and a blue square',
        'a photo of a blue square',
        'a photo of a green bar',
    ]

    def test_frequency_filter_and_order(self, text_encoder):
        pool = build_concept_pool(self.CAPTIONS, 2, 'a photo of a {}', text_encoder, LEXICON)
        assert pool.texts == ['blue square', 'red circle']
        assert [c.frequency for c in pool.concepts] == [2, 2]
        assert [c.id for c in pool.concepts] == [0, 1]
        assert pool.embeddings.shape == (2, text_encoder.embed_dim)
        norms = torch.linalg.vector_norm(pool.embeddings, dim=-1)
        torch.testing.assert_close(norms, torch.ones(2, dtype=torch.float64))

    def test_counts(self):
        counts = count_concepts(self.CAPTIONS, LEXICON)
        assert counts == {'red circle': 2, 'blue square': 2, 'green bar': 1}

    def test_empty_pool(self, text_encoder):
        with pytest.raises(EmptyPool):
            build_concept_pool(self.CAPTIONS, 3, 'a photo of a {}', text_encoder, LEXICON)
        with pytest.raises(EmptyPool):
            make_pool([], ['{}'], text_encoder)

    def test_bad_template_rejected(self, text_encoder):
        with pytest.raises(BadTemplate):
            build_concept_pool(self.CAPTIONS, 1, 'a photo', text_encoder, LEXICON)

    def test_prompt_ensemble(self, text_encoder):
        templates = ['a photo of a {}', 'a {} in the scene']
        row = encode_concepts(['red circle'], templates, text_encoder)[0]
        mean = (text_encoder.encode('a photo of a red circle') + text_encoder.encode('a red circle in the scene')) / 2
        torch.testing.assert_close(row, mean / torch.linalg.vector_norm(mean))

    def test_round_trip(self, tmp_path, text_encoder):
        pool = build_concept_pool(self.CAPTIONS, 1, ['a photo of a {}'], text_encoder, LEXICON)
        pool.save(tmp_path / 'concepts.json', config_digest='0123456789abcdef')
        loaded = ConceptPool.load(tmp_path / 'concepts.json', text_encoder)
        assert loaded.texts == pool.texts
        assert loaded.templates == pool.templates
        torch.testing.assert_close(loaded.embeddings, pool.embeddings)
        assert loaded.index('green bar') == pool.index('green bar')

    def test_corrupt_file(self, tmp_path, text_encoder):
        path = tmp_path / 'concepts.json'
        path.write_text('{"concepts": [')
        with pytest.raises(CorruptFile):
            ConceptPool.load(path, text_encoder)
        with pytest.raises(CorruptFile):
            ConceptPool.load(tmp_path / 'missing.json', text_encoder)

    def test_from_vocabulary(self, text_encoder):
        vocabulary = ['red circle', 'red square', 'blue circle']
        pool = pool_from_vocabulary(vocabulary, ['a photo of a {}'], text_encoder,
                                    captions=self.CAPTIONS, lexicon=LEXICON)
        assert pool.texts == vocabulary
        assert [c.frequency for c in pool.concepts] == [2, 0, 0]


class TestLexicon:
    def test_load_and_extend(self, tmp_path):
        path = tmp_path / 'words.txt'
        path.write_text('# extra words\n[adjectives]\nshiny\n\n[nouns]\nstar\n')
        lexicon = Lexicon.load(path, extend=LEXICON)
        assert 'shiny' in lexicon.adjectives and 'red' in lexicon.adjectives
        assert 'star' in lexicon.nouns and 'circle' in lexicon.nouns
        assert extract_concepts('a shiny red star', lexicon) == ['shiny red star']

    def test_dump_load(self, tmp_path):
        LEXICON.dump(tmp_path / 'words.txt')
        lexicon = Lexicon.load(tmp_path / 'words.txt')
        assert lexicon.adjectives == LEXICON.adjectives
        assert lexicon.nouns == LEXICON.nouns

    def test_bad_files(self, tmp_path):
        path = tmp_path / 'words.txt'
        path.write_text('[verbs]\nrun\n')
        with pytest.raises(CorruptFile):
            Lexicon.load(path)
        path.write_text('red\n[nouns]\ncircle\n')
        with pytest.raises(CorruptFile):
            Lexicon.load(path)
