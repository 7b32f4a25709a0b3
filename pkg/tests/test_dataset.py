import json

import pytest

from regalign.data.dataset import (generate_dataset, split_vocabulary, serialize_dataset, deserialize_dataset,
                                   MANIFEST_NAME, SCENES_DIR)
from regalign.utils.errors import BadConfig, CorruptFile, UsageError

from conftest import tiny_config


class TestSplitVocabulary:
    def test_sizes(self):
        base, novel = split_vocabulary(30, 0.27, seed=0)
        assert len(novel) == 8
        assert sorted(base + novel) == list(range(30))

    def test_seeded(self):
        assert split_vocabulary(30, 0.27, 0) == split_vocabulary(30, 0.27, 0)
        assert split_vocabulary(30, 0.27, 0) != split_vocabulary(30, 0.27, 1)

    def test_no_novel(self):
        base, novel = split_vocabulary(9, 0.0, 0)
        assert novel == [] and base == list(range(9))


class TestGenerateDataset:
    def test_counts(self, cfg, dataset):
        assert len(dataset.train) == cfg.data.n_train
        assert len(dataset.eval) == cfg.data.n_eval
        assert len(dataset.vocabulary) == 9
        assert len(dataset.novel_ids) == 3
        assert [s.id for s in dataset.scenes] == list(range(len(dataset)))

    def test_reproducible(self, cfg, dataset):
        again = generate_dataset(cfg)
        assert again == dataset
        assert again.digest == dataset.digest

    def test_seed_changes_digest(self, dataset):
        assert generate_dataset(tiny_config('seed=1')).digest != dataset.digest

    def test_base_only_training_annotations(self, dataset):
        novel = set(dataset.novel_ids)
        for scene in dataset.train:
            assert not novel & set(scene.concept_ids)
            assert all(cid in novel for _, cid in scene.unannotated)
        for scene in dataset.eval:
            assert scene.unannotated == []
            assert scene.objects

    def test_full_annotations(self):
        dataset = generate_dataset(tiny_config('data.base_only=false'))
        assert all(scene.unannotated == [] for scene in dataset.train)

    def test_class_ids(self, dataset):
        assert dataset.class_ids('novel') == dataset.novel_ids
        assert dataset.class_ids('base') == dataset.base_ids
        assert dataset.class_ids('generalized') == list(range(9))
        with pytest.raises(UsageError):
            dataset.class_ids('rare')

    def test_invalid_config(self, cfg):
        broken = tiny_config()
        broken.data.n_train = 0
        with pytest.raises(BadConfig) as e:
            generate_dataset(broken)
        assert e.value.key == 'data.n_train'

    def test_duplicate_colors(self):
        with pytest.raises(BadConfig):
            generate_dataset(tiny_config('data.colors=[red, red]'))

    def test_parallel_matches_serial(self, cfg, dataset):
        assert generate_dataset(cfg, n_jobs=2) == dataset

    def test_manifest(self, dataset):
        manifest = dataset.manifest()
        assert manifest['counts'] == {'train': 12, 'eval': 6}
        assert manifest['dataset_digest'] == dataset.digest
        assert set(manifest['seeds']['scenes']) == {str(s.id) for s in dataset.scenes}


class TestSerialization:
    def test_round_trip(self, tmp_path, dataset):
        manifest = serialize_dataset(dataset, tmp_path)
        assert (tmp_path / MANIFEST_NAME).is_file()
        assert len(list((tmp_path / SCENES_DIR).glob('*.ppm'))) == len(dataset)
        loaded = deserialize_dataset(tmp_path)
        assert loaded == dataset
        assert loaded.digest == manifest['dataset_digest']

    def test_config_digest_is_recorded(self, tmp_path, dataset):
        manifest = serialize_dataset(dataset, tmp_path, config_digest='c' * 16)
        assert json.loads((tmp_path / MANIFEST_NAME).read_text())['config_digest'] == 'c' * 16
        # recorded beside the dataset digest, not hashed into it
        assert manifest['dataset_digest'] == dataset.digest
        assert deserialize_dataset(tmp_path) == dataset

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CorruptFile):
            deserialize_dataset(tmp_path)

    def test_truncated_image(self, tmp_path, dataset):
        serialize_dataset(dataset, tmp_path)
        path = tmp_path / SCENES_DIR / '0.ppm'
        path.write_bytes(path.read_bytes()[:40])
        with pytest.raises(CorruptFile):
            deserialize_dataset(tmp_path)

    def test_missing_image(self, tmp_path, dataset):
        serialize_dataset(dataset, tmp_path)
        (tmp_path / SCENES_DIR / '3.ppm').unlink()
        with pytest.raises(CorruptFile):
            deserialize_dataset(tmp_path)

    def test_edited_annotation(self, tmp_path, dataset):
        serialize_dataset(dataset, tmp_path)
        path = tmp_path / SCENES_DIR / f'{dataset.eval[0].id}.json'
        record = json.loads(path.read_text())
        box = record['objects'][0]['box']
        record['objects'][0]['box'] = [box[0], box[1], box[2] + 1.0, box[3]]
        path.write_text(json.dumps(record))
        with pytest.raises(CorruptFile):
            deserialize_dataset(tmp_path)

    def test_digest_mismatch(self, tmp_path, dataset):
        serialize_dataset(dataset, tmp_path)
        path = tmp_path / MANIFEST_NAME
        manifest = json.loads(path.read_text())
        manifest['dataset_digest'] = '0' * 16
        path.write_text(json.dumps(manifest))
        with pytest.raises(CorruptFile):
            deserialize_dataset(tmp_path)
        assert deserialize_dataset(tmp_path, verify_digest=False) == dataset
