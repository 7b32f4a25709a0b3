import logging
from pathlib import Path

import numpy as np
import torch
from tqdm import tqdm

from regalign.engine.optimizer import sgd_step, get_optimizer_params, model_gradients, grad_norms
from regalign.inference.alignment import pseudo_label_batch
from regalign.inference.detect import label_regions
from regalign.inference.proposals import make_proposals, drop_degenerate
from regalign.model.encoders import (VisualEncoder, init_student_from_teacher, make_checkpoint,
                                     model_from_checkpoint)
from regalign.model.losses import (RegionContrastiveLoss, DistillationLoss, ImageContrastiveLoss,
                                   DetectionFinetuneLoss, make_region_batch, total_loss, LossReport,
                                   IGNORE_LABEL)
from regalign.model.metrics import PseudoLabelAgreement
from regalign.utils.errors import NoBaseAnnotations
from regalign.utils.exp import config_digest
from regalign.utils.log import logger, TqdmToLogger, SummaryWriterAvg, JsonLinesLog
from regalign.utils.misc import derive_seed
from regalign.utils.serialization import get_config_repr

# independent random streams derived from the master seed
INIT_STREAM = 1
BATCH_STREAM = 2
PROPOSAL_STREAM = 3
FINETUNE_STREAM = 4


class BaseTrainer(object):
    """Shared loop: seeded batch sampling, one SGD step per iteration,
    JSON-lines and tensorboard logging."""

    stage = None
    log_prefix = 'Train'

    def __init__(self, model, cfg, dataset, lr, logs_path=None, tb_dump_period=25):
        self.cfg = cfg
        self.dataset = dataset
        self.net = model
        self.lr = lr
        self.digest = config_digest(cfg)

        self.logs_path = Path(logs_path) if logs_path is not None else None
        self.sw = None
        if self.logs_path is not None:
            self.sw = SummaryWriterAvg(log_dir=str(self.logs_path / 'tb' / self.stage),
                                       flush_secs=10, dump_period=tb_dump_period)
        log_path = self.logs_path / f'{self.stage}_train.jsonl' if self.logs_path is not None else None
        self.train_log = JsonLinesLog(log_path, every=cfg.train.log_every)
        self.tqdm_out = TqdmToLogger(logger, level=logging.INFO)

    def sample_batch(self, iteration, batch_size, stream=BATCH_STREAM):
        scenes = self.dataset.train
        rng = np.random.default_rng(derive_seed(self.cfg.seed, stream, iteration))
        indices = rng.choice(len(scenes), size=batch_size, replace=len(scenes) < batch_size)
        return [scenes[i] for i in sorted(indices.tolist())]

    def run(self, num_iterations):
        logger.info(f'{self.stage}: {num_iterations} iterations, lr={self.lr}')
        logger.info(get_config_repr(self.net._config))

        tbar = tqdm(range(num_iterations), file=self.tqdm_out, ncols=100)
        for iteration in tbar:
            report = self.step(iteration)
            if report is None:
                continue
            self.train_log.log(iteration, report.as_record())
            if self.sw is not None:
                self.sw.add_report(f'{self.log_prefix}Losses', report.as_record(), global_step=iteration)
                self.log_states(iteration)
            tbar.set_description(f'{self.stage} loss {report.total:.4f}')

        if self.sw is not None:
            self.sw.close()
        return self.train_log.records

    def apply_gradients(self, loss):
        self.net.zero_grad(set_to_none=True)
        loss.backward()
        norms = grad_norms(self.net)
        sgd_step(get_optimizer_params(self.net), model_gradients(self.net), self.lr)
        return norms

    def step(self, iteration):
        raise NotImplementedError

    def log_states(self, iteration):
        pass


class ImageLevelTrainer(BaseTrainer):
    """Image/caption contrastive pretraining of a randomly initialised
    encoder; its checkpoint becomes the frozen teacher."""

    stage = 'stage0'

    def __init__(self, model, cfg, dataset, text_encoder, **kwargs):
        super().__init__(model, cfg, dataset, cfg.train.lr, **kwargs)
        self.text_encoder = text_encoder
        self.loss = ImageContrastiveLoss(cfg.train.tau, symmetric=cfg.train.symmetric_image_loss)

    def step(self, iteration):
        scenes = self.sample_batch(iteration, self.cfg.train.batch_images)
        images = torch.stack([torch.as_tensor(s.image, dtype=torch.float64) for s in scenes])
        captions = self.text_encoder.encode_batch([s.caption for s in scenes])

        loss = self.loss(self.net.image_features(images), captions)
        norms = self.apply_gradients(loss)
        _, report = total_loss({'image_contrastive': loss},
                               enabled={'image_contrastive': True})
        report.grad_norms = norms
        return report


class RegionLevelTrainer(BaseTrainer):
    """Student training on pseudo region-text pairs made by the frozen
    teacher, with the enabled contrastive, distillation and image losses."""

    stage = 'stage1'

    def __init__(self, student, teacher, cfg, dataset, pool, text_encoder, pseudo_dump=None, **kwargs):
        super().__init__(student, cfg, dataset, cfg.train.lr, **kwargs)
        self.teacher = teacher
        self.pool = pool
        self.text_encoder = text_encoder
        self.enabled = dict(cfg.train.losses)
        self.weights = dict(cfg.train.loss_weights)
        self.pseudo_dump = pseudo_dump

        tau = cfg.train.tau
        self.contrastive = RegionContrastiveLoss(tau)
        self.distillation = DistillationLoss(tau)
        self.image_contrastive = ImageContrastiveLoss(tau, symmetric=cfg.train.symmetric_image_loss)
        self.agreement = PseudoLabelAgreement()

    def make_batch(self, iteration):
        cfg = self.cfg
        scenes = self.sample_batch(iteration, cfg.train.batch_images)
        proposals = [make_proposals(scene, cfg.proposals.source, cfg.train.regions_per_image,
                                    derive_seed(cfg.seed, PROPOSAL_STREAM, iteration, scene.id), cfg.proposals)
                     for scene in scenes]
        pairs = pseudo_label_batch(self.teacher, scenes, proposals, self.pool, cfg.train.tau)
        if self.pseudo_dump is not None:
            self.pseudo_dump.extend(p for scene_pairs in pairs for p in scene_pairs)
        return make_region_batch(scenes, pairs, self.text_encoder if self.enabled['image_contrastive'] else None)

    def step(self, iteration):
        batch = self.make_batch(iteration)
        embeddings = self.pool.embeddings

        components = {}
        if batch.n_regions > 0 and (self.enabled['contrastive'] or self.enabled['distillation']):
            features = self.net.region_features(batch.images, batch.boxes, batch.batch_index)
            self.agreement.update(features, batch.labels, embeddings)
            if self.enabled['contrastive']:
                components['contrastive'] = self.contrastive(features, batch.labels, embeddings)
            if self.enabled['distillation']:
                components['distillation'] = self.distillation(features, batch.soft_targets, embeddings)
        if self.enabled['image_contrastive']:
            components['image_contrastive'] = self.image_contrastive(
                self.net.image_features(batch.images), batch.caption_embeddings)
        if not components:
            logger.warning(f'{self.stage}: iteration {iteration} has no regions, skipped')
            return None

        loss, report = total_loss(components, self.enabled, self.weights)
        report.grad_norms = self.apply_gradients(loss)
        return report

    def log_states(self, iteration):
        self.agreement.log_states(self.sw, f'{self.log_prefix}Metrics/{self.agreement.name}', iteration)


class DetectorFinetuner(BaseTrainer):
    """Transfer to detection: oracle-RPN regions labelled by IoU against the
    base annotations, trained with the class-wise weighted cross-entropy."""

    stage = 'finetune'
    log_prefix = 'Finetune'

    def __init__(self, student, cfg, dataset, head, **kwargs):
        super().__init__(student, cfg, dataset, cfg.detect.finetune_lr, **kwargs)
        self.head = head
        self.loss = DetectionFinetuneLoss(gamma=head.gamma, background_weight=head.background_weight, tau=head.tau)

        base = set(head.class_ids)
        if not any(cid in base for scene in dataset.train for cid in scene.concept_ids):
            raise NoBaseAnnotations('the training split has no annotated base-category objects')

    def step(self, iteration):
        cfg = self.cfg
        scenes = self.sample_batch(iteration, cfg.train.batch_images, stream=FINETUNE_STREAM)
        boxes, batch_index, labels = [], [], []
        for i, scene in enumerate(scenes):
            seed = derive_seed(cfg.seed, FINETUNE_STREAM, iteration, scene.id)
            proposals = make_proposals(scene, 'oracle_rpn', cfg.detect.regions_per_image, seed, cfg.proposals)
            proposals, _ = drop_degenerate(proposals, self.net.spatial_scale)
            scene_boxes = [p.box for p in proposals]
            boxes.extend(b.as_list() for b in scene_boxes)
            batch_index.extend([i] * len(scene_boxes))
            labels.extend(label_regions(scene_boxes, scene, self.head, cfg.detect.fg_iou, cfg.detect.bg_iou))

        labels = torch.tensor(labels, dtype=torch.long)
        if not bool((labels != IGNORE_LABEL).any()):
            return None

        images = torch.stack([torch.as_tensor(s.image, dtype=torch.float64) for s in scenes])
        features = self.net.region_features(images, boxes, batch_index)
        loss = self.loss(features, labels, self.head.embeddings)
        report = LossReport(total=float(loss.detach()))
        report.grad_norms = self.apply_gradients(loss)
        return report


def build_encoder(cfg):
    return VisualEncoder(patch_size=cfg.model.patch_size, hidden_dim=cfg.model.hidden_dim,
                         embed_dim=cfg.text.embed_dim, depth=cfg.model.depth,
                         pooled_size=cfg.model.pooled_size, samples_per_bin=cfg.model.samples_per_bin,
                         seed=derive_seed(cfg.seed, INIT_STREAM))


def pretrain_image_level(cfg, dataset, text_encoder, logs_path=None):
    model = build_encoder(cfg)
    trainer = ImageLevelTrainer(model, cfg, dataset, text_encoder, logs_path=logs_path)
    records = trainer.run(cfg.train.image_iterations)
    ckpt = make_checkpoint(model, 'stage0', cfg.seed, trainer.digest, cfg.train.image_iterations,
                           text_encoder=text_encoder.spec, dataset_digest=dataset.digest)
    return ckpt, records


def pretrain_region_level(cfg, dataset, teacher_ckpt, pool, text_encoder, logs_path=None, pseudo_dump=None):
    teacher = model_from_checkpoint(teacher_ckpt)
    teacher_digest = teacher.digest()
    student = init_student_from_teacher(teacher)

    trainer = RegionLevelTrainer(student, teacher, cfg, dataset, pool, text_encoder,
                                 pseudo_dump=pseudo_dump, logs_path=logs_path)
    records = trainer.run(cfg.train.region_iterations)
    assert teacher.digest() == teacher_digest, 'teacher parameters changed during region-level training'

    ckpt = make_checkpoint(student, 'stage1', cfg.seed, trainer.digest, cfg.train.region_iterations,
                           extras={'pool_embeddings': pool.embeddings},
                           text_encoder=text_encoder.spec, dataset_digest=dataset.digest,
                           teacher_digest=teacher_digest, pool=pool.texts)
    return ckpt, records


def finetune_detector(cfg, dataset, student_ckpt, head, logs_path=None):
    student = model_from_checkpoint(student_ckpt, trainable=True)
    trainer = DetectorFinetuner(student, cfg, dataset, head, logs_path=logs_path)
    records = trainer.run(cfg.detect.finetune_iterations)
    ckpt = make_checkpoint(student, 'finetune', cfg.seed, trainer.digest, cfg.detect.finetune_iterations,
                           dataset_digest=dataset.digest, classes=head.class_ids)
    return ckpt, records
