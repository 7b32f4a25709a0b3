import sys
import json
import argparse
from pathlib import Path

import torch

from regalign.data.concepts import (ConceptPool, Lexicon, build_concept_pool, pool_from_vocabulary)
from regalign.data.dataset import generate_dataset, serialize_dataset, deserialize_dataset
from regalign.engine.trainer import pretrain_image_level, pretrain_region_level, finetune_detector
from regalign.inference.alignment import dump_pseudo_labels
from regalign.inference.detect import (DetectorHead, zero_shot_detect, region_accuracy, topk_predictions,
                                       save_detections)
from regalign.inference.evaluation import evaluate, load_detections
from regalign.inference.proposals import make_proposals, SOURCES
from regalign.model.encoders import TextEncoder, model_from_checkpoint
from regalign.utils.errors import ValidationError, StorageError, UsageError
from regalign.utils.exp import parse_config, config_digest, init_experiment, get_output_root
from regalign.utils.log import logger, add_logging, remove_logging
from regalign.utils.misc import derive_seed
from regalign.utils.serialization import save_checkpoint, load_checkpoint
from regalign.utils.vis import dump_detections

DEFAULT_OUT = 'runs/default'
ZEROSHOT_STREAM = 5
SPLIT_MODES = ('novel', 'base', 'generalized')
CHECKPOINT_NAMES = {'stage0': 'stage0.raln', 'stage1': 'stage1.raln', 'finetune': 'finetune.raln'}


class ArgumentParser(argparse.ArgumentParser):
    """argparse reporting usage errors as ``UsageError`` instead of exiting."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def parse_args(argv):
    parser = ArgumentParser(prog='regalign')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, default=None,
                        help='YAML or JSON run configuration.')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='Override a config value, e.g. --set train.lr=0.01. Repeatable.')
    common.add_argument('--out', type=str, default=None,
                        help='Output directory (default: $REGALIGN_OUT or runs/default).')
    common.add_argument('--data', type=str, default=None,
                        help='Dataset directory (default: <out>/data).')
    common.add_argument('--threads', type=int, default=None,
                        help='Worker/thread cap; 1 keeps runs bit-reproducible.')

    subparsers = parser.add_subparsers(dest='command', parser_class=ArgumentParser)
    subparsers.add_parser('gen-data', parents=[common], help='Generate and save the synthetic dataset.')
    subparsers.add_parser('build-concepts', parents=[common], help='Parse captions into the concept pool.')
    subparsers.add_parser('pretrain-image', parents=[common], help='Stage 0: image-level teacher.')

    region = subparsers.add_parser('pretrain-region', parents=[common], help='Stage 1: region-level student.')
    region.add_argument('--teacher', type=str, default=None, help='Stage-0 checkpoint.')
    region.add_argument('--dump-pseudo', type=str, default=None,
                        help='Write the pseudo region-text pairs of every iteration as JSON lines.')

    for name, help_text in (('zeroshot', 'Detect on the eval split and report AP50.'),
                            ('dump-vis', 'Save annotated detections of the eval split.')):
        sub = subparsers.add_parser(name, parents=[common], help=help_text)
        sub.add_argument('--checkpoint', type=str, default=None, help='Student checkpoint (default: stage1).')
        sub.add_argument('--split', choices=SPLIT_MODES, default='generalized')
        sub.add_argument('--proposals', choices=SOURCES, default=None)
        if name == 'dump-vis':
            sub.add_argument('--limit', type=int, default=16, help='Number of scenes to draw.')

    finetune = subparsers.add_parser('finetune', parents=[common], help='Fine-tune on base annotations.')
    finetune.add_argument('--checkpoint', type=str, default=None, help='Stage-1 checkpoint.')

    evaluation = subparsers.add_parser('eval', parents=[common], help='Score a detection dump.')
    evaluation.add_argument('--detections', type=str, required=True)
    evaluation.add_argument('--split', choices=SPLIT_MODES, default='generalized')
    evaluation.add_argument('--force', action='store_true', default=False,
                            help='Evaluate even when the dump was made under another config or dataset.')

    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise UsageError('a subcommand is required')
    return args


class Run(object):
    """Resolved config, output paths and lazily loaded shared artifacts."""

    def __init__(self, args):
        overrides = list(args.overrides)
        if args.threads is not None:
            overrides.append(f'threads={args.threads}')
        self.args = args
        self.cfg = parse_config(args.config, overrides)
        self.digest = config_digest(self.cfg)
        torch.set_num_threads(self.cfg.threads)

        out = Path(args.out) if args.out else get_output_root(DEFAULT_OUT)
        self.paths = init_experiment(self.cfg, out)
        self.data_path = Path(args.data) if args.data else self.paths.DATA_PATH
        self.pool_path = self.paths.OUT_PATH / 'concepts.json'
        self._dataset = None
        self._text_encoder = None

    @property
    def dataset(self):
        if self._dataset is None:
            self._dataset = deserialize_dataset(self.data_path)
        return self._dataset

    @property
    def text_encoder(self):
        if self._text_encoder is None:
            self._text_encoder = TextEncoder(**self.cfg.text)
        return self._text_encoder

    def checkpoint_path(self, stage):
        return self.paths.CHECKPOINTS_PATH / CHECKPOINT_NAMES[stage]

    def load_checkpoint(self, path, default_stage):
        ckpt = load_checkpoint(Path(path) if path else self.checkpoint_path(default_stage))
        if ckpt.metadata.get('config_digest') != self.digest:
            logger.warning(f'Checkpoint {ckpt.stage} was trained under config {ckpt.metadata.get("config_digest")}, '
                           f'current config is {self.digest}')
        return ckpt

    def load_pool(self):
        return ConceptPool.load(self.pool_path, self.text_encoder)

    def head(self, mode):
        cfg = self.cfg
        return DetectorHead.from_vocabulary(self.dataset.vocabulary, self.dataset.class_ids(mode),
                                            cfg.concepts.templates, self.text_encoder, tau=cfg.train.tau,
                                            background_weight=cfg.detect.background_weight, gamma=cfg.detect.gamma)

    def summary(self, **values):
        return {'command': self.args.command, 'config_digest': self.digest, **values}


def cmd_gen_data(run):
    dataset = generate_dataset(run.cfg, n_jobs=run.cfg.threads)
    manifest = serialize_dataset(dataset, run.data_path, config_digest=run.digest)
    return run.summary(data=str(run.data_path), dataset_digest=manifest['dataset_digest'],
                       n_train=len(dataset.train), n_eval=len(dataset.eval), vocabulary=len(dataset.vocab),
                       novel_ids=dataset.novel_ids)


def cmd_build_concepts(run):
    cfg, dataset = run.cfg, run.dataset
    lexicon = Lexicon.from_vocabulary(dataset.vocab.colors, dataset.vocab.shapes)
    if cfg.concepts.lexicon:
        lexicon = Lexicon.load(cfg.concepts.lexicon, extend=lexicon)

    captions = dataset.captions('train')
    if cfg.concepts.source == 'vocabulary':
        pool = pool_from_vocabulary(dataset.vocabulary, cfg.concepts.templates, run.text_encoder,
                                    captions=captions, lexicon=lexicon)
    else:
        pool = build_concept_pool(captions, cfg.concepts.min_freq, cfg.concepts.templates, run.text_encoder,
                                  lexicon, n_jobs=cfg.threads)
    pool.save(run.pool_path, config_digest=run.digest)
    return run.summary(pool=str(run.pool_path), concepts=len(pool), top=pool.texts[:5])


def cmd_pretrain_image(run):
    ckpt, records = pretrain_image_level(run.cfg, run.dataset, run.text_encoder, logs_path=run.paths.LOGS_PATH)
    path = run.checkpoint_path('stage0')
    save_checkpoint(ckpt, path)
    return run.summary(checkpoint=str(path), iterations=ckpt.metadata['iterations'],
                       final_loss=records[-1]['L_total'] if records else None)


def cmd_pretrain_region(run):
    teacher = run.load_checkpoint(run.args.teacher, 'stage0')
    pseudo = [] if run.args.dump_pseudo else None
    pool = run.load_pool()
    ckpt, records = pretrain_region_level(run.cfg, run.dataset, teacher, pool, run.text_encoder,
                                          logs_path=run.paths.LOGS_PATH, pseudo_dump=pseudo)
    path = run.checkpoint_path('stage1')
    save_checkpoint(ckpt, path)
    if pseudo is not None:
        dump_pseudo_labels(pseudo, run.args.dump_pseudo, pool=pool, config_digest=run.digest)
    return run.summary(checkpoint=str(path), iterations=ckpt.metadata['iterations'],
                       final_loss=records[-1]['L_total'] if records else None)


def detect_eval_split(run, student, head, source):
    cfg, dataset = run.cfg, run.dataset
    detections = []
    for scene in dataset.eval:
        seed = derive_seed(cfg.seed, ZEROSHOT_STREAM, scene.id)
        proposals = make_proposals(scene, source, cfg.detect.regions_per_image, seed, cfg.proposals)
        detections.extend(zero_shot_detect(student, scene, proposals, head, cfg.detect.nms_threshold,
                                           drop_background=cfg.detect.drop_background,
                                           class_agnostic_nms=cfg.detect.class_agnostic_nms))
    return detections


def cmd_zeroshot(run):
    cfg, args = run.cfg, run.args
    student = model_from_checkpoint(run.load_checkpoint(args.checkpoint, 'stage1'))
    head = run.head(args.split)
    source = args.proposals or cfg.proposals.source
    detections = detect_eval_split(run, student, head, source)

    tag = f'{args.split}_{source}'
    det_path = run.paths.OUT_PATH / 'detections' / f'{tag}.jsonl'
    save_detections(detections, det_path, run.dataset.vocabulary, run.digest, run.dataset.digest)

    report = evaluate(detections, run.dataset, args.split, cfg.eval.iou_threshold,
                      cfg.eval.interpolation, cfg.eval.iou_sweep)
    report.extra['region_accuracy'] = region_accuracy(student, run.dataset.eval, head)
    metrics_path = write_metrics(run, report, tag)
    return run.summary(detections=str(det_path), metrics=str(metrics_path), novel_ap50=report.novel_ap50,
                       base_ap50=report.base_ap50, all_ap50=report.all_ap50,
                       region_accuracy=report.extra['region_accuracy'])


def write_metrics(run, report, tag):
    report.extra.update({'config_digest': run.digest, 'dataset_digest': run.dataset.digest})
    path = run.paths.OUT_PATH / 'metrics' / f'{tag}.json'
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.dumps())
    return path


def cmd_finetune(run):
    cfg = run.cfg
    student = run.load_checkpoint(run.args.checkpoint, 'stage1')
    ckpt, records = finetune_detector(cfg, run.dataset, student, run.head('base'), logs_path=run.paths.LOGS_PATH)
    path = run.checkpoint_path('finetune')
    save_checkpoint(ckpt, path)
    return run.summary(checkpoint=str(path), iterations=ckpt.metadata['iterations'],
                       final_loss=records[-1]['L_total'] if records else None)


def cmd_eval(run):
    args = run.args
    header, detections = load_detections(args.detections)
    mismatched = [name for name, expected in (('config_digest', run.digest),
                                               ('dataset_digest', run.dataset.digest))
                  if header.get(name) != expected]
    if mismatched:
        if not args.force:
            raise UsageError(f'{args.detections} was produced under a different '
                             f'{" and ".join(mismatched)}; pass --force to evaluate anyway')
        logger.warning(f'Evaluating {args.detections} despite mismatched {", ".join(mismatched)}')

    cfg = run.cfg
    report = evaluate(detections, run.dataset, args.split, cfg.eval.iou_threshold,
                      cfg.eval.interpolation, cfg.eval.iou_sweep)
    metrics_path = write_metrics(run, report, f'eval_{args.split}')
    return run.summary(metrics=str(metrics_path), novel_ap50=report.novel_ap50,
                       base_ap50=report.base_ap50, all_ap50=report.all_ap50)


def cmd_dump_vis(run):
    cfg, args = run.cfg, run.args
    student = model_from_checkpoint(run.load_checkpoint(args.checkpoint, 'stage1'))
    head = run.head(args.split)
    source = args.proposals or cfg.proposals.source
    vocabulary = run.dataset.vocabulary

    scenes = run.dataset.eval[:max(0, args.limit)]
    for scene in scenes:
        seed = derive_seed(cfg.seed, ZEROSHOT_STREAM, scene.id)
        proposals = make_proposals(scene, source, cfg.detect.regions_per_image, seed, cfg.proposals)
        detections = zero_shot_detect(student, scene, proposals, head, cfg.detect.nms_threshold,
                                      drop_background=cfg.detect.drop_background,
                                      class_agnostic_nms=cfg.detect.class_agnostic_nms)
        topk = None
        if detections:
            with torch.no_grad():
                features = student.region_features(scene.image, [d.box.as_list() for d in detections])
            topk = topk_predictions(features, head, cfg.detect.top_k)
        dump_detections(scene, detections, vocabulary, run.paths.VIS_PATH, topk=topk,
                        config_digest=run.digest)
    return run.summary(vis=str(run.paths.VIS_PATH), scenes=len(scenes))


COMMANDS = {
    'gen-data': cmd_gen_data,
    'build-concepts': cmd_build_concepts,
    'pretrain-image': cmd_pretrain_image,
    'pretrain-region': cmd_pretrain_region,
    'zeroshot': cmd_zeroshot,
    'finetune': cmd_finetune,
    'eval': cmd_eval,
    'dump-vis': cmd_dump_vis,
}


def run_command(argv):
    """Run one subcommand; 0 on success, 1 on invalid input, 2 on I/O failure."""
    fh = None
    try:
        args = parse_args(argv)
        run = Run(args)
        fh = add_logging(run.paths.LOGS_PATH, prefix=f'{args.command}_')
        summary = COMMANDS[args.command](run)
    except ValidationError as e:
        logger.error(f'{type(e).__name__}: {e}')
        return 1
    except (StorageError, OSError) as e:
        logger.error(f'{type(e).__name__}: {e}')
        return 2
    finally:
        if fh is not None:
            remove_logging(fh)

    print(json.dumps(summary, sort_keys=True))
    return 0


def main(argv=None):
    return run_command(sys.argv[1:] if argv is None else argv)
