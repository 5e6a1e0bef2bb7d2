"""Handcrafted models and fixtures shared by several test modules."""
import numpy as np

from red_anticipation.data import FeatureSequence, LabelTrack, Video
from red_anticipation.model import Hyper, Model, init_params

BIG = 20.0


def copy_last_model(n_classes: int, t_enc: int = 4, t_dec: int = 8) -> Model:
    """Encoder-decoder whose every step repeats the class of the last input chunk.

    Inputs are expected to be one-hot class indicators (d = C+1).
    """
    K = n_classes + 1
    hyper = Hyper(t_enc=t_enc, t_dec=t_dec, d=K, h=K, c=n_classes)
    p = {k: np.zeros_like(v) for k, v in init_params("encdec", hyper, np.random.default_rng(0)).items()}
    I = np.eye(K)
    # encoder: forget everything, write tanh(3 x) into the cell
    p["enc.b"][:K] = BIG
    p["enc.b"][K:2 * K] = -BIG
    p["enc.b"][2 * K:3 * K] = BIG
    p["enc.Wx"][3 * K:] = 3.0 * I
    # decoder: keep the cell, ignore inputs
    p["dec.b"][:K] = -BIG
    p["dec.b"][K:2 * K] = BIG
    p["dec.b"][2 * K:3 * K] = BIG
    p["out.W"] = I.copy()
    p["cls.W1"] = 10.0 * I
    p["cls.W2"] = 10.0 * I
    return Model("encdec", hyper, p)


def constant_class_videos(n_classes: int, length: int = 30) -> list[Video]:
    """One video per class (background included), each a single constant label."""
    K = n_classes + 1
    vids = []
    for k in range(K):
        labels = np.full(length, k, dtype=np.int64)
        feats = np.tile(np.eye(K)[k], (length, 1))
        vids.append(Video(FeatureSequence(f"v{k}", feats), LabelTrack(labels, n_classes)))
    return vids


class LabelOracle:
    """Fake model that reads ground truth: step j at anchor t predicts the
    label of chunk t + j - shift (background when out of range or when
    ``background`` is set)."""

    def __init__(self, videos, n_classes, t_enc=2, t_dec=4, shift=0, background=False):
        self.labels = {v.video_id: v.labels.labels for v in videos}
        self.n_classes, self.t_enc = n_classes, t_enc
        self.horizons = tuple(range(1, t_dec + 1))
        self.shift, self.background = shift, background

    def predict(self, feats, anchors):
        y = self.labels[feats.video_id]
        K = len(self.horizons)
        out = np.zeros((len(anchors), K, self.n_classes + 1))
        for a, t in enumerate(anchors):
            for j in range(K):
                s = t + j - self.shift
                lab = 0 if self.background or not 0 <= s < len(y) else y[s]
                out[a, j, lab] = 1.0
        return out

    def predict_history(self, history):
        raise NotImplementedError
