import re
import json
from pathlib import Path
from collections import Counter
from dataclasses import dataclass
from typing import List

import nltk
import torch

from regalign.utils.errors import BadTemplate, EmptyPool, CorruptFile
from regalign.utils.log import logger
from regalign.utils.misc import parallel_map

PLACEHOLDER = '{}'
ADJECTIVE_TAG = 'JJ'
NOUN_TAG = 'NN'
OTHER_TAG = 'O'
CHUNK_GRAMMAR = r'NP: {<JJ>*<NN>}'

_TOKEN_RE = re.compile(r'[a-z]+')


class Lexicon(object):
    def __init__(self, adjectives, nouns):
        self.adjectives = frozenset(w.strip().lower() for w in adjectives if w.strip())
        self.nouns = frozenset(w.strip().lower() for w in nouns if w.strip())
        assert self.adjectives.isdisjoint(self.nouns), 'a word cannot be both adjective and noun'

    def tag(self, word):
        if word in self.nouns:
            return NOUN_TAG
        if word in self.adjectives:
            return ADJECTIVE_TAG
        return OTHER_TAG

    def __len__(self):
        return len(self.adjectives) + len(self.nouns)

    @classmethod
    def from_vocabulary(cls, colors, shapes):
        return cls(adjectives=colors, nouns=shapes)

    @classmethod
    def load(cls, path, extend=None):
        """Read a word-list file with ``[adjectives]`` and ``[nouns]`` sections.

        Words from ``extend`` (another Lexicon) are merged in, so a user file
        can add vocabulary on top of the synthetic one.
        """
        sections = {'adjectives': [], 'nouns': []}
        current = None
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as e:
            raise CorruptFile(path, str(e))

        for line in lines:
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            if line.startswith('[') and line.endswith(']'):
                current = line[1:-1].strip().lower()
                if current not in sections:
                    raise CorruptFile(path, f'unknown section [{current}]')
                continue
            if current is None:
                raise CorruptFile(path, 'word listed before any section header')
            sections[current].append(line)

        if extend is not None:
            sections['adjectives'].extend(extend.adjectives)
            sections['nouns'].extend(extend.nouns)
        return cls(sections['adjectives'], sections['nouns'])

    def dump(self, path):
        lines = ['[adjectives]', *sorted(self.adjectives), '', '[nouns]', *sorted(self.nouns), '']
        Path(path).write_text('\n'.join(lines))


_chunker = nltk.RegexpParser(CHUNK_GRAMMAR)


def extract_concepts(caption, lexicon):
    """Maximal ``[adjective]* noun`` chunks over the lexicon, left to right.

    Words outside the lexicon break a chunk; an adjective run that is not
    closed by a noun is dropped.
    """
    tokens = _TOKEN_RE.findall(caption.lower())
    if not tokens:
        return []

    tree = _chunker.parse([(word, lexicon.tag(word)) for word in tokens])
    return [' '.join(word for word, _ in subtree.leaves())
            for subtree in tree.subtrees(filter=lambda t: t.label() == 'NP')]


def fill_prompt(concept, template):
    if template.count(PLACEHOLDER) != 1:
        raise BadTemplate(f'template must contain exactly one "{{}}": {template!r}')
    return template.replace(PLACEHOLDER, concept)


@dataclass
class Concept:
    text: str
    frequency: int
    id: int


class ConceptPool(object):
    """Ordered concepts with one unit-norm embedding row per concept."""

    def __init__(self, concepts: List[Concept], embeddings: torch.Tensor, templates):
        assert len(concepts) == embeddings.shape[0], 'one embedding row per concept'
        self.concepts = concepts
        self.embeddings = embeddings
        self.templates = list(templates)

    @property
    def texts(self):
        return [c.text for c in self.concepts]

    @property
    def template(self):
        return self.templates[0]

    def index(self, text):
        for concept in self.concepts:
            if concept.text == text:
                return concept.id
        raise KeyError(text)

    def __len__(self):
        return len(self.concepts)

    def to_json(self):
        return {
            'template': self.template,
            'templates': self.templates,
            'concepts': [{'text': c.text, 'frequency': c.frequency} for c in self.concepts],
            'embedding_dim': int(self.embeddings.shape[1]),
        }

    def save(self, path, config_digest=None):
        data = self.to_json()
        if config_digest is not None:
            data['config_digest'] = config_digest
        Path(path).write_text(json.dumps(data, sort_keys=True, indent=2) + '\n')

    @classmethod
    def load(cls, path, text_encoder):
        try:
            data = json.loads(Path(path).read_text())
            templates = data.get('templates') or [data['template']]
            entries = [(c['text'], int(c['frequency'])) for c in data['concepts']]
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise CorruptFile(path, str(e))

        pool = make_pool(entries, templates, text_encoder)
        if pool.embeddings.shape[1] != data.get('embedding_dim', pool.embeddings.shape[1]):
            raise CorruptFile(path, 'embedding_dim does not match the text encoder')
        return pool


def encode_concepts(texts, templates, text_encoder):
    """Prompt-ensembled embeddings: mean over templates, re-normalised."""
    rows = []
    for text in texts:
        prompts = [fill_prompt(text, template) for template in templates]
        embedding = torch.stack([text_encoder.encode(p) for p in prompts]).mean(dim=0)
        rows.append(embedding / torch.linalg.vector_norm(embedding))
    return torch.stack(rows)


def make_pool(entries, templates, text_encoder):
    if not entries:
        raise EmptyPool('the concept pool is empty')
    for template in templates:
        fill_prompt('x', template)

    concepts = [Concept(text=text, frequency=freq, id=i) for i, (text, freq) in enumerate(entries)]
    embeddings = encode_concepts([c.text for c in concepts], templates, text_encoder)
    return ConceptPool(concepts, embeddings, templates)


def count_concepts(captions, lexicon, n_jobs=1):
    counts = Counter()
    for concepts in parallel_map(list(captions), extract_concepts, const_args={'lexicon': lexicon}, n_jobs=n_jobs):
        counts.update(concepts)
    return counts


def build_concept_pool(captions, min_freq, template, text_encoder, lexicon, n_jobs=1):
    """Concepts with frequency >= ``min_freq``, by descending frequency then text.

    ``template`` is a single template string or a list (prompt ensemble).
    """
    assert min_freq >= 1
    templates = [template] if isinstance(template, str) else list(template)

    counts = count_concepts(captions, lexicon, n_jobs=n_jobs)
    kept = sorted(((text, freq) for text, freq in counts.items() if freq >= min_freq),
                  key=lambda item: (-item[1], item[0]))
    logger.info(f'Concept pool: {len(kept)} of {len(counts)} parsed concepts have frequency >= {min_freq}')
    if not kept:
        raise EmptyPool(f'no concept reaches min_freq={min_freq}')

    return make_pool(kept, templates, text_encoder)


def pool_from_vocabulary(vocabulary, templates, text_encoder, captions=None, lexicon=None):
    """Pool made of the category names themselves, in category id order."""
    counts = count_concepts(captions, lexicon) if captions is not None and lexicon is not None else Counter()
    return make_pool([(text, counts.get(text, 0)) for text in vocabulary], templates, text_encoder)
