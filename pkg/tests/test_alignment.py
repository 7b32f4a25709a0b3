import json

import pytest
import torch

from regalign.data.concepts import ConceptPool
from regalign.data.scenes import Box
from regalign.inference.alignment import (label_features, pseudo_label, pseudo_label_batch, collect_negatives,
                                          dump_pseudo_labels)
from regalign.inference.proposals import RegionProposal, make_proposals
from regalign.model.encoders import model_from_checkpoint
from regalign.utils.errors import EmptyPool, NonPositiveTemperature


@pytest.fixture(scope='module')
def teacher(teacher_ckpt):
    return model_from_checkpoint(teacher_ckpt)


def _proposals(cfg, scene, seed=0):
    return make_proposals(scene, 'oracle_rpn', 6, seed, cfg.proposals)


class TestLabelFeatures:
    def test_identity(self):
        embeddings = torch.eye(4, dtype=torch.float64)
        ids, scores, q = label_features(embeddings[[2, 0]], embeddings, 0.1)
        assert ids.tolist() == [2, 0]
        torch.testing.assert_close(scores, torch.ones(2, dtype=torch.float64))
        torch.testing.assert_close(q.sum(dim=-1), torch.ones(2, dtype=torch.float64))
        assert q.argmax(dim=-1).tolist() == [2, 0]

    def test_tie_takes_first_index(self):
        row = torch.tensor([0.6, 0.8], dtype=torch.float64)
        embeddings = torch.stack([torch.tensor([1.0, 0.0], dtype=torch.float64), row, row])
        ids, _, _ = label_features(row[None], embeddings, 0.1)
        assert ids.tolist() == [1]

    def test_temperature(self):
        embeddings = torch.eye(3, dtype=torch.float64)
        with pytest.raises(NonPositiveTemperature):
            label_features(embeddings, embeddings, 0.0)
        _, _, sharp = label_features(embeddings[:1], embeddings, 0.01)
        _, _, flat = label_features(embeddings[:1], embeddings, 10.0)
        assert sharp[0, 0] > flat[0, 0]

    def test_positive_scaling(self):
        gen = torch.Generator().manual_seed(0)
        for _ in range(200):
            n_concepts = int(torch.randint(2, 9, (1,), generator=gen))
            features = torch.randn(3, 8, dtype=torch.float64, generator=gen)
            embeddings = torch.nn.functional.normalize(torch.randn(n_concepts, 8, dtype=torch.float64,
                                                                   generator=gen), dim=-1)
            factor = float(torch.empty(1, dtype=torch.float64).uniform_(0.01, 100.0, generator=gen))
            ids, scores, q = label_features(features, embeddings, 0.01)
            for scaled in (label_features(factor * features, embeddings, 0.01),
                           label_features(features, factor * embeddings, 0.01)):
                assert torch.equal(scaled[0], ids)
                torch.testing.assert_close(scaled[1], scores, rtol=0, atol=1e-12)
                torch.testing.assert_close(scaled[2], q, rtol=0, atol=1e-9)
            torch.testing.assert_close(q.sum(dim=-1), torch.ones(3, dtype=torch.float64), rtol=0, atol=1e-9)
            assert torch.equal(q.argmax(dim=-1), ids)

    def test_matches_brute_force(self):
        gen = torch.Generator().manual_seed(1)
        embeddings = torch.randn(4, 8, dtype=torch.float64, generator=gen)
        features = torch.randn(20, 8, dtype=torch.float64, generator=gen)
        ids, _, _ = label_features(features, embeddings, 0.01)
        for row, m in zip(features, ids.tolist()):
            cosines = [float(row @ e / (row.norm() * e.norm())) for e in embeddings]
            assert m == max(range(4), key=lambda j: cosines[j])


class TestPseudoLabel:
    def test_pairs(self, cfg, dataset, pool, teacher):
        scenes = dataset.train[:3]
        proposals = [_proposals(cfg, s, i) for i, s in enumerate(scenes)]
        pairs = pseudo_label_batch(teacher, scenes, proposals, pool, cfg.train.tau)
        assert [len(p) for p in pairs] == [len(p) for p in proposals]
        for scene, scene_pairs in zip(scenes, pairs):
            for pair in scene_pairs:
                assert pair.scene_id == scene.id
                assert 0 <= pair.concept_id < len(pool)
                assert -1.0 - 1e-9 <= pair.teacher_score <= 1.0 + 1e-9
                assert pair.soft_target.shape == (len(pool),)
                assert pair.soft_target.sum().item() == pytest.approx(1.0)
                assert int(pair.soft_target.argmax()) == pair.concept_id

    def test_batch_matches_single(self, cfg, dataset, pool, teacher):
        scenes = dataset.train[:2]
        proposals = [_proposals(cfg, s, i) for i, s in enumerate(scenes)]
        batched = pseudo_label_batch(teacher, scenes, proposals, pool, cfg.train.tau)
        single = pseudo_label(teacher, scenes[1], proposals[1], pool, cfg.train.tau)
        assert [p.concept_id for p in single] == [p.concept_id for p in batched[1]]
        assert [p.teacher_score for p in single] == pytest.approx([p.teacher_score for p in batched[1]])

    def test_teacher_untouched(self, cfg, dataset, pool, teacher):
        digest = teacher.digest()
        scene = dataset.train[0]
        pseudo_label(teacher, scene, _proposals(cfg, scene), pool, cfg.train.tau)
        assert teacher.digest() == digest

    def test_degenerate_proposals_skipped(self, cfg, dataset, pool, teacher):
        scene = dataset.train[0]
        proposals = [RegionProposal(Box(0.0, 0.0, 16.0, 16.0), 1.0, 'random'),
                     RegionProposal(Box(4.0, 4.0, 4.0 + 1e-7, 12.0), 1.0, 'random')]
        pairs = pseudo_label(teacher, scene, proposals, pool, cfg.train.tau)
        assert len(pairs) == 1
        assert pairs[0].box == proposals[0].box

    def test_empty_pool(self, cfg, dataset, teacher):
        empty = ConceptPool([], torch.zeros(0, cfg.text.embed_dim, dtype=torch.float64), ['a photo of a {}'])
        scene = dataset.train[0]
        with pytest.raises(EmptyPool):
            pseudo_label(teacher, scene, _proposals(cfg, scene), empty, cfg.train.tau)


class TestNegatives:
    def test_deduplicated_and_own_excluded(self):
        assert collect_negatives([3, 5, 3, 7, 5], 0) == {5, 7}
        assert collect_negatives([3, 5, 3, 7, 5], 1) == {3, 7}

    def test_single_concept_batch(self):
        assert collect_negatives([4, 4, 4], 2) == set()


class TestDump:
    def test_records(self, tmp_path, cfg, dataset, pool, teacher):
        scene = dataset.train[0]
        pairs = pseudo_label(teacher, scene, _proposals(cfg, scene), pool, cfg.train.tau)
        path = tmp_path / 'pseudo.jsonl'
        dump_pseudo_labels(pairs, path, pool=pool, top_k=2, config_digest='c' * 16)
        header, *records = [json.loads(line) for line in path.read_text().splitlines()]
        assert header == {'header': True, 'config_digest': 'c' * 16, 'n_pairs': len(pairs)}
        assert len(records) == len(pairs)
        first = records[0]
        assert first['concept'] == pool.concepts[pairs[0].concept_id].text
        if len(pool) > 2:
            assert len(first['soft_target_top']['ids']) == 2
            assert first['soft_target_top']['ids'][0] == pairs[0].concept_id
        else:
            assert len(first['soft_target']) == len(pool)
