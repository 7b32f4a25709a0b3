import cv2
import numpy as np

from regalign.data.scenes import Box, Scene
from regalign.inference.detect import DetectionResult
from regalign.utils.vis import caption_lines, draw_boxes, dump_detections

VOCABULARY = ['red circle', 'blue square']


def _scene():
    return Scene(image=np.full((16, 16, 3), 0.5), objects=[(Box(2.0, 2.0, 8.0, 8.0), 1)],
                 caption='a photo of a blue square', id=7)


class TestDumpDetections:
    DETECTIONS = [DetectionResult(Box(2.0, 2.0, 8.0, 8.0), 1, 0.75, 7)]

    def test_text_record(self, tmp_path):
        dump_detections(_scene(), self.DETECTIONS, VOCABULARY, tmp_path, topk=[[(1, 0.75), (0, 0.2)]],
                        config_digest='c' * 16)
        lines = (tmp_path / '7.txt').read_text().splitlines()
        assert lines[0] == '# config_digest ' + 'c' * 16
        assert lines[1:] == caption_lines(self.DETECTIONS, VOCABULARY, [[(1, 0.75), (0, 0.2)]])
        assert lines[1].startswith('1 blue square 0.7500 | blue square:0.750')

    def test_without_digest(self, tmp_path):
        dump_detections(_scene(), self.DETECTIONS, VOCABULARY, tmp_path)
        assert (tmp_path / '7.txt').read_text() == '1 blue square 0.7500\n'

    def test_image(self, tmp_path):
        dump_detections(_scene(), self.DETECTIONS, VOCABULARY, tmp_path, scale=2)
        image = cv2.imread(str(tmp_path / '7.ppm'))
        assert image.shape == (32, 32, 3)

    def test_draw_boxes_leaves_input(self):
        image = np.zeros((8, 8, 3), dtype=np.uint8)
        drawn = draw_boxes(image, [[1, 1, 6, 6]], [0], 2)
        assert not image.any()
        assert drawn[1, 1].any() and not drawn[3, 3].any()
