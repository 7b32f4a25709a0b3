import json

import pytest

from regalign.cli import run_command, parse_args
from regalign.utils.errors import UsageError

from conftest import TINY_OVERRIDES


def _argv(command, out, *extra):
    argv = [command, '--out', str(out)]
    for item in TINY_OVERRIDES:
        argv += ['--set', item]
    return argv + list(extra)


def _summary(capsys):
    lines = [line for line in capsys.readouterr().out.splitlines() if line.strip()]
    return json.loads(lines[-1])


class TestArguments:
    def test_unknown_subcommand(self):
        assert run_command(['train-everything']) == 1

    def test_missing_subcommand(self):
        assert run_command([]) == 1
        with pytest.raises(UsageError):
            parse_args([])

    def test_bad_override(self, tmp_path):
        assert run_command(['gen-data', '--out', str(tmp_path), '--set', 'tau=-1']) == 1

    def test_eval_requires_detections(self, tmp_path):
        assert run_command(['eval', '--out', str(tmp_path)]) == 1

    def test_common_flags(self):
        args = parse_args(['zeroshot', '--set', 'a=1', '--set', 'b=2', '--split', 'novel', '--threads', '2'])
        assert args.overrides == ['a=1', 'b=2']
        assert args.split == 'novel' and args.threads == 2


class TestStorageErrors:
    def test_missing_dataset(self, tmp_path):
        assert run_command(_argv('build-concepts', tmp_path)) == 2

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        assert run_command(_argv('gen-data', tmp_path)) == 0
        assert run_command(_argv('build-concepts', tmp_path)) == 0
        broken = tmp_path / 'broken.raln'
        broken.write_bytes(b'RALN1 truncated')
        assert run_command(_argv('pretrain-region', tmp_path, '--teacher', str(broken))) == 2


class TestPipeline:
    def test_end_to_end(self, tmp_path, capsys):
        out = tmp_path / 'run'
        assert run_command(_argv('gen-data', out)) == 0
        summary = _summary(capsys)
        digest = summary['config_digest']
        assert summary['n_train'] == 12 and summary['n_eval'] == 6
        assert json.loads((out / 'data' / 'manifest.json').read_text())['config_digest'] == digest

        assert run_command(_argv('build-concepts', out)) == 0
        assert _summary(capsys)['concepts'] > 0
        assert (out / 'concepts.json').is_file()

        assert run_command(_argv('pretrain-image', out)) == 0
        assert (out / 'checkpoints' / 'stage0.raln').is_file()

        pseudo = out / 'pseudo.jsonl'
        assert run_command(_argv('pretrain-region', out, '--dump-pseudo', str(pseudo))) == 0
        assert (out / 'checkpoints' / 'stage1.raln').is_file()
        header = json.loads(pseudo.read_text().splitlines()[0])
        assert header['header'] and header['config_digest'] == digest
        assert header['n_pairs'] == len(pseudo.read_text().splitlines()) - 1 > 0

        assert run_command(_argv('zeroshot', out, '--split', 'generalized')) == 0
        summary = _summary(capsys)
        assert 0.0 <= summary['all_ap50'] <= 1.0
        assert 0.0 <= summary['region_accuracy'] <= 1.0
        detections = out / 'detections' / 'generalized_oracle_rpn.jsonl'
        metrics = json.loads((out / 'metrics' / 'generalized_oracle_rpn.json').read_text())
        assert metrics['config_digest'] == summary['config_digest']

        assert run_command(_argv('eval', out, '--detections', str(detections))) == 0
        assert _summary(capsys)['all_ap50'] == pytest.approx(summary['all_ap50'])

        # another config digest: refused unless forced
        assert run_command(_argv('eval', out, '--detections', str(detections), '--set', 'eval.iou_threshold=0.6')) == 1
        assert run_command(_argv('eval', out, '--detections', str(detections), '--set', 'eval.iou_threshold=0.6',
                                 '--force')) == 0

        assert run_command(_argv('finetune', out)) == 0
        finetuned = out / 'checkpoints' / 'finetune.raln'
        assert finetuned.is_file()
        assert run_command(_argv('zeroshot', out, '--checkpoint', str(finetuned), '--split', 'novel')) == 0
        assert 'novel_ap50' in _summary(capsys)

        assert run_command(_argv('dump-vis', out, '--limit', '2')) == 0
        assert len(list((out / 'vis').glob('*.ppm'))) == 2
        texts = sorted((out / 'vis').glob('*.txt'))
        assert len(texts) == 2
        assert all(t.read_text().splitlines()[0] == f'# config_digest {digest}' for t in texts)


@pytest.mark.slow
class TestReproducibility:
    STEPS = [('gen-data',), ('build-concepts',), ('pretrain-image',), ('pretrain-region',),
             ('zeroshot', '--split', 'generalized'), ('zeroshot', '--split', 'novel', '--proposals', 'random'),
             ('finetune',)]

    def _run(self, out):
        for command, *extra in self.STEPS:
            assert run_command(_argv(command, out, *extra)) == 0
        finetuned = out / 'checkpoints' / 'finetune.raln'
        assert run_command(_argv('zeroshot', out, '--checkpoint', str(finetuned), '--split', 'base')) == 0
        return {p.name: p.read_bytes() for p in sorted((out / 'metrics').glob('*.json'))}

    def test_metrics_are_byte_identical(self, tmp_path):
        first = self._run(tmp_path / 'a')
        second = self._run(tmp_path / 'b')
        assert set(first) == {'generalized_oracle_rpn.json', 'novel_random.json', 'base_oracle_rpn.json'}
        assert first == second
