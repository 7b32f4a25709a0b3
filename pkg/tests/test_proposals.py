import numpy as np
import pytest

from regalign.data.scenes import Box, Scene
from regalign.inference.proposals import (RegionProposal, propose_random, propose_oracle_rpn, propose_ground_truth,
                                          make_proposals, objectness, drop_degenerate, OBJECTNESS_FLOOR)
from regalign.utils.errors import BadConfig


class TestRandomProposals:
    def test_inside_image(self):
        proposals = propose_random(3, 50, 32, 4)
        assert len(proposals) == 50
        for p in proposals:
            assert p.box.x1 >= 0 and p.box.y1 >= 0
            assert p.box.x2 <= 32 + 1e-9 and p.box.y2 <= 32 + 1e-9
            assert p.box.width >= 4 - 1e-9 and p.box.height >= 4 - 1e-9
            assert p.objectness == 1.0 and p.source == 'random'

    def test_seeded(self):
        assert propose_random(3, 10, 32, 4) == propose_random(3, 10, 32, 4)
        assert propose_random(3, 10, 32, 4) != propose_random(4, 10, 32, 4)

    @pytest.mark.parametrize('n, min_side', [(0, 4), (5, 1), (5, 40)])
    def test_invalid(self, n, min_side):
        with pytest.raises(BadConfig):
            propose_random(0, n, 32, min_side)


class TestOracleProposals:
    def test_exact_without_jitter(self, dataset):
        scene = dataset.eval[0]
        proposals = propose_oracle_rpn(scene, 0, 6, jitter_sigma=0.0, min_side=4)
        k = len(scene.all_objects)
        assert [p.box for p in proposals[:k]] == [box for box, _ in scene.all_objects]
        assert all(p.objectness == 1.0 for p in proposals[:k])
        assert len(proposals) == 6

    def test_covers_unannotated_objects(self):
        scene = Scene(image=np.zeros((32, 32, 3)), objects=[(Box(0.0, 0.0, 8.0, 8.0), 0)],
                      caption='a photo of a red circle', id=0, unannotated=[(Box(12.0, 12.0, 24.0, 20.0), 1)])
        proposals = propose_oracle_rpn(scene, 0, 8, jitter_sigma=0.0, min_side=4)
        boxes = [p.box for p in proposals]
        assert all(box in boxes for box, _ in scene.unannotated)

    def test_jittered(self, dataset):
        scene = dataset.eval[1]
        height, width = scene.size
        for p in propose_oracle_rpn(scene, 5, 10, jitter_sigma=0.1, min_side=4):
            assert OBJECTNESS_FLOOR <= p.objectness <= 1.0
            assert p.box.x1 >= 0 and p.box.x2 <= width + 1e-9
            assert p.box.y1 >= 0 and p.box.y2 <= height + 1e-9

    def test_too_few_slots(self, dataset):
        scene = max(dataset.eval, key=lambda s: len(s.objects))
        with pytest.raises(BadConfig):
            propose_oracle_rpn(scene, 0, len(scene.objects) - 1, jitter_sigma=0.1)


class TestProposalHelpers:
    def test_objectness(self):
        gt = [Box(0.0, 0.0, 10.0, 10.0)]
        assert objectness(Box(0.0, 0.0, 10.0, 10.0), gt) == 1.0
        assert objectness(Box(20.0, 20.0, 30.0, 30.0), gt) == OBJECTNESS_FLOOR
        assert objectness(Box(0.0, 0.0, 10.0, 10.0), []) == OBJECTNESS_FLOOR

    def test_ground_truth(self, dataset):
        scene = dataset.eval[0]
        assert [p.box for p in propose_ground_truth(scene)] == scene.boxes

    def test_dispatch(self, cfg, dataset):
        scene = dataset.eval[0]
        for source in ('random', 'oracle_rpn', 'ground_truth'):
            proposals = make_proposals(scene, source, 6, 0, cfg.proposals)
            assert all(p.source == source for p in proposals)
        with pytest.raises(BadConfig):
            make_proposals(scene, 'anchors', 6, 0, cfg.proposals)

    def test_drop_degenerate(self):
        proposals = [RegionProposal(Box(0.0, 0.0, 8.0, 8.0), 1.0, 'random'),
                     RegionProposal(Box(0.0, 0.0, 1e-7, 8.0), 1.0, 'random')]
        kept, dropped = drop_degenerate(proposals, 1 / 8)
        assert kept == proposals[:1] and dropped == 1

    def test_objectness_range_checked(self):
        with pytest.raises(AssertionError):
            RegionProposal(Box(0.0, 0.0, 1.0, 1.0), 0.0, 'random')

    def test_centres_cover_the_image(self):
        boxes = [p.box for p in propose_random(0, 400, 64, 4)]
        cx = np.array([(b.x1 + b.x2) / 2 for b in boxes])
        assert cx.min() < 16 and cx.max() > 48
