import io
import json
import time
import logging
from datetime import datetime

from torch.utils.tensorboard import SummaryWriter

LOGGER_NAME = 'regalign'
LOGGER_DATEFMT = '%Y-%m-%d %H:%M:%S'

handler = logging.StreamHandler()

logger = logging.getLogger(LOGGER_NAME)
logger.setLevel(logging.INFO)
logger.addHandler(handler)


def add_logging(logs_path, prefix):
    log_name = prefix + datetime.strftime(datetime.today(), '%Y-%m-%d_%H-%M-%S') + '.log'
    logs_path.mkdir(parents=True, exist_ok=True)

    fh = logging.FileHandler(str(logs_path / log_name))
    fh.setFormatter(logging.Formatter(fmt='(%(levelname)s) %(asctime)s: %(message)s',
                                      datefmt=LOGGER_DATEFMT))
    logger.addHandler(fh)
    return fh


def remove_logging(fh):
    logger.removeHandler(fh)
    fh.close()


class TqdmToLogger(io.StringIO):
    """File-like sink that forwards tqdm's last status line to the logger."""

    def __init__(self, logger, level=None, mininterval=5):
        super().__init__()
        self.logger = logger
        self.level = level or logging.INFO
        self.mininterval = mininterval
        self.last_time = 0
        self.buf = ''

    def write(self, buf):
        self.buf = buf.strip('\r\n\t ')

    def flush(self):
        if self.buf and time.time() - self.last_time > self.mininterval:
            self.logger.log(self.level, self.buf)
            self.last_time = time.time()


class SummaryWriterAvg(SummaryWriter):
    """Tensorboard writer that emits the running mean of every scalar tag
    once per ``dump_period`` additions."""

    def __init__(self, *args, dump_period=20, **kwargs):
        super().__init__(*args, **kwargs)
        self._dump_period = dump_period
        self._pending = dict()

    def add_scalar(self, tag, value, global_step=None, disable_avg=False):
        if disable_avg:
            super().add_scalar(tag, float(value), global_step=global_step)
            return

        total, count = self._pending.get(tag, (0.0, 0))
        total, count = total + float(value), count + 1
        if count >= self._dump_period:
            super().add_scalar(tag, total / count, global_step=global_step)
            total, count = 0.0, 0
        self._pending[tag] = (total, count)

    def add_report(self, prefix, values, global_step):
        for name, value in values.items():
            if value is not None:
                self.add_scalar(f'{prefix}/{name}', value, global_step=global_step)


class JsonLinesLog(object):
    """Per-iteration training records, one JSON object per line.

    Records are kept in memory as well so callers can inspect the loss
    curve without re-reading the file.
    """

    def __init__(self, path=None, every=1):
        self.path = path
        self.every = max(1, int(every))
        self.records = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text('')

    def log(self, iteration, record):
        record = {'iter': int(iteration), **record}
        self.records.append(record)
        if self.path is not None and iteration % self.every == 0:
            with open(self.path, 'a') as f:
                f.write(json.dumps(record, sort_keys=True) + '\n')
