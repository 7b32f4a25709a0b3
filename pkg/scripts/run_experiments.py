"""Seeded experiments: region recognition of teacher vs student, loss
ablation and focal-scaling ablation after fine-tuning. Writes a calibration
record with every measured number."""
import sys
import copy
import json
import argparse
from pathlib import Path

import torch
from easydict import EasyDict as edict

sys.path.insert(0, '.')
from regalign.cli import ZEROSHOT_STREAM
from regalign.data.concepts import Lexicon, build_concept_pool
from regalign.data.dataset import generate_dataset
from regalign.engine.trainer import pretrain_image_level, pretrain_region_level, finetune_detector
from regalign.inference.detect import DetectorHead, region_accuracy, zero_shot_detect
from regalign.inference.evaluation import evaluate
from regalign.inference.proposals import make_proposals
from regalign.model.encoders import TextEncoder, model_from_checkpoint
from regalign.utils.exp import parse_config, config_digest, validate_config
from regalign.utils.log import logger
from regalign.utils.misc import derive_seed

CALIBRATION_CONFIG = Path(__file__).resolve().parents[1] / 'configs' / 'calibration' / 'seed0.yml'
CALIBRATION_RECORD = CALIBRATION_CONFIG.with_suffix('.json')

LOSS_VARIANTS = {
    'contrastive+distillation': {'contrastive': True, 'distillation': True},
    'contrastive': {'contrastive': True, 'distillation': False},
    'distillation': {'contrastive': False, 'distillation': True},
}


def parse_args():
    parser = argparse.ArgumentParser()
    parser.add_argument('--config', type=str, default=str(CALIBRATION_CONFIG))
    parser.add_argument('--set', dest='overrides', action='append', default=[])
    parser.add_argument('--out', type=str, default='runs/calibration.json')
    parser.add_argument('--skip-ablations', action='store_true', default=False,
                        help='Only run the teacher/student recognition experiment.')
    return parser.parse_args()


class Pipeline(object):
    """Dataset, text encoder, concept pool and teacher shared by all runs
    of one config; only stage 1 and later are repeated per variant."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.dataset = generate_dataset(cfg)
        self.text_encoder = TextEncoder(**cfg.text)
        lexicon = Lexicon.from_vocabulary(cfg.data.colors, cfg.data.shapes)
        self.pool = build_concept_pool(self.dataset.captions('train'), cfg.concepts.min_freq,
                                       cfg.concepts.templates, self.text_encoder, lexicon)
        self.teacher_ckpt, _ = pretrain_image_level(cfg, self.dataset, self.text_encoder)

    def head(self, mode):
        cfg = self.cfg
        return DetectorHead.from_vocabulary(self.dataset.vocabulary, self.dataset.class_ids(mode),
                                            cfg.concepts.templates, self.text_encoder, tau=cfg.train.tau,
                                            background_weight=cfg.detect.background_weight, gamma=cfg.detect.gamma)

    def student(self, cfg=None):
        ckpt, records = pretrain_region_level(cfg or self.cfg, self.dataset, self.teacher_ckpt, self.pool,
                                              self.text_encoder)
        return ckpt, records

    def novel_ap50(self, ckpt, cfg=None):
        cfg = cfg or self.cfg
        model = model_from_checkpoint(ckpt)
        head = self.head('novel')
        detections = []
        for scene in self.dataset.eval:
            proposals = make_proposals(scene, 'oracle_rpn', cfg.detect.regions_per_image,
                                       derive_seed(cfg.seed, ZEROSHOT_STREAM, scene.id), cfg.proposals)
            detections.extend(zero_shot_detect(model, scene, proposals, head, cfg.detect.nms_threshold))
        return evaluate(detections, self.dataset, 'novel').novel_ap50


def with_overrides(cfg, overrides):
    variant = copy.deepcopy(cfg)
    for key, value in overrides.items():
        *parents, leaf = key.split('.')
        node = variant
        for part in parents:
            node = node[part]
        node[leaf] = value
    return edict(validate_config(variant))


def recognition(pipeline):
    """Region classification of GT boxes over every category, teacher vs
    student; returns the record entry and the student checkpoint."""
    all_classes = pipeline.head('generalized')
    teacher = model_from_checkpoint(pipeline.teacher_ckpt)
    student_ckpt, curve = pipeline.student()
    student = model_from_checkpoint(student_ckpt)
    entry = {
        'teacher_accuracy': region_accuracy(teacher, pipeline.dataset.eval, all_classes),
        'student_accuracy': region_accuracy(student, pipeline.dataset.eval, all_classes),
        'chance': 1.0 / len(pipeline.dataset.vocabulary),
        'stage1_first_loss': curve[0]['L_total'] if curve else None,
        'stage1_last_loss': curve[-1]['L_total'] if curve else None,
    }
    return entry, student_ckpt


def ablations(pipeline, student_ckpt):
    """Novel AP50 after fine-tuning for every loss variant and for focal
    scaling on/off. Runs with equal configs (the default appears in both
    tables) are fine-tuned once."""
    cfg = pipeline.cfg
    base_head = pipeline.head('base')
    results = {}

    def finetuned_ap(variant, make_student, head):
        key = config_digest(variant)
        if key not in results:
            tuned, _ = finetune_detector(variant, pipeline.dataset, make_student(), head)
            results[key] = pipeline.novel_ap50(tuned, variant)
        return results[key]

    def student_for(variant):
        if config_digest(variant) == config_digest(cfg):
            return student_ckpt
        return pipeline.student(variant)[0]

    losses = {}
    for name, switches in LOSS_VARIANTS.items():
        variant = with_overrides(cfg, {f'train.losses.{k}': v for k, v in switches.items()})
        losses[name] = finetuned_ap(variant, lambda: student_for(variant), base_head)

    focal = {}
    for gamma in (0.5, 0.0):
        variant = with_overrides(cfg, {'detect.gamma': gamma})
        head = DetectorHead(base_head.class_ids, base_head.embeddings, tau=variant.train.tau,
                            background_weight=variant.detect.background_weight, gamma=gamma)
        # gamma only acts in fine-tuning; stage 1 is shared
        focal[f'gamma={gamma}'] = finetuned_ap(variant, lambda: student_ckpt, head)
    return {'loss_ablation_novel_ap50': losses, 'focal_ablation_novel_ap50': focal}


def run_calibration(cfg, with_ablations=True):
    record = {'config_digest': config_digest(cfg), 'seed': cfg.seed}
    pipeline = Pipeline(cfg)
    record['recognition'], student_ckpt = recognition(pipeline)
    logger.info(f'Recognition: {record["recognition"]}')
    if with_ablations:
        record.update(ablations(pipeline, student_ckpt))
        logger.info(f'Ablations: loss {record["loss_ablation_novel_ap50"]}, '
                    f'focal {record["focal_ablation_novel_ap50"]}')
    return record


def dumps_record(record):
    return json.dumps(record, sort_keys=True, indent=2) + '\n'


def main():
    args = parse_args()
    torch.set_num_threads(1)
    cfg = parse_config(args.config, args.overrides)
    record = run_calibration(cfg, with_ablations=not args.skip_ablations)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dumps_record(record))
    print(json.dumps(record, sort_keys=True))


if __name__ == '__main__':
    main()
