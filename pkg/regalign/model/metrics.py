import torch

from regalign.model.numerics import cosine_matrix


class TrainMetric(object):
    def update(self, *args, **kwargs):
        raise NotImplementedError

    def get_epoch_value(self):
        raise NotImplementedError

    def reset_epoch_stats(self):
        raise NotImplementedError

    def log_states(self, sw, tag_prefix, global_step):
        pass

    @property
    def name(self):
        return type(self).__name__


class PseudoLabelAgreement(TrainMetric):
    """Share of regions whose student argmax concept equals the teacher's
    pseudo-label, with an exponential moving average for the logs."""

    def __init__(self, ema_beta=0.9):
        self._ema_beta = ema_beta
        self._ema = None
        self._agree = 0
        self._count = 0

    @torch.no_grad()
    def update(self, features, labels, embeddings):
        if labels.numel() == 0:
            return
        predicted = cosine_matrix(features.detach(), embeddings).argmax(dim=-1)
        agree = int((predicted == labels).sum())
        self._agree += agree
        self._count += labels.numel()

        value = agree / labels.numel()
        self._ema = value if self._ema is None else self._ema_beta * self._ema + (1 - self._ema_beta) * value

    def get_epoch_value(self):
        return self._agree / self._count if self._count else 0.0

    def reset_epoch_stats(self):
        self._agree = 0
        self._count = 0

    def log_states(self, sw, tag_prefix, global_step):
        if self._ema is not None:
            sw.add_scalar(tag=tag_prefix + '_ema', value=self._ema, global_step=global_step)
