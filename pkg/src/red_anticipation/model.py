"""Encoder-decoder anticipation network, classifier, baseline net, FC/EFC.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed by dotted names
(``enc.Wx``, ``cls.W2`` ...). Every forward pass here is batched: inputs
carry a leading batch axis. The single-sample operations (``lstm_step``,
``encode``, ``decode`` ...) are thin wrappers around the batched code so
both paths share one implementation.

LSTM gate order in ``Wx``/``Wh``/``b`` rows is [input, forget, output,
candidate].
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .numerics import DimensionError, _softmax, check_finite

ARCHS = ("encdec", "efc", "fc")

Params = dict  # str -> np.ndarray


@dataclass(frozen=True)
class Hyper:
    t_enc: int = 16
    t_dec: int = 8
    d: int = 32
    h: int = 64
    c: int = 3
    alpha: float = 1.0
    lr: float = 0.001
    batch: int = 64
    chunk_frames: int = 6
    fps: int = 24
    h_cls: int | None = None  # None -> same as h
    h_fc: int | None = None  # None -> same as h
    t_ant: int = 4

    def __post_init__(self):
        for name in ("t_enc", "t_dec", "d", "h", "c", "batch", "chunk_frames", "fps", "t_ant"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("h_cls", "h_fc"):
            if getattr(self, name) is not None and getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.alpha <= 0 or self.lr <= 0:
            raise ValueError("alpha and lr must be positive")

    @property
    def chunk_seconds(self) -> float:
        return self.chunk_frames / self.fps

    @property
    def cls_hidden(self) -> int:
        return self.h if self.h_cls is None else self.h_cls

    @property
    def fc_hidden(self) -> int:
        return self.h if self.h_fc is None else self.h_fc

    def replace(self, **kw) -> "Hyper":
        return replace(self, **kw)

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


class LSTMParams(NamedTuple):
    W_x: np.ndarray  # (4H, d_in)
    W_h: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)


def lstm_params(params: Params, prefix: str) -> LSTMParams:
    return LSTMParams(params[prefix + ".Wx"], params[prefix + ".Wh"], params[prefix + ".b"])


# ---------------------------------------------------------------- init

def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_lstm(rng, params, prefix, d_in, H):
    params[prefix + ".Wx"] = _uniform(rng, (4 * H, d_in), d_in)
    params[prefix + ".Wh"] = _uniform(rng, (4 * H, H), H)
    b = _uniform(rng, (4 * H,), H)
    b[H:2 * H] = 1.0
    params[prefix + ".b"] = b


def _init_affine(rng, params, prefix, n_in, n_out, tag=""):
    params[f"{prefix}.W{tag}"] = _uniform(rng, (n_out, n_in), n_in)
    params[f"{prefix}.b{tag}"] = _uniform(rng, (n_out,), n_in)


def init_params(arch: str, hyper: Hyper, rng: np.random.Generator) -> Params:
    """Seeded initialisation, uniform in +-1/sqrt(fan_in), forget bias 1."""
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}")
    d, H, C = hyper.d, hyper.h, hyper.c
    p: Params = {}
    if arch in ("encdec", "efc"):
        _init_lstm(rng, p, "enc", d, H)
    if arch == "encdec":
        _init_lstm(rng, p, "dec", d, H)
        _init_affine(rng, p, "out", H, d)
    elif arch == "efc":
        _init_affine(rng, p, "out", H, d)
    else:
        _init_affine(rng, p, "fc", d, hyper.fc_hidden, "1")
        _init_affine(rng, p, "fc", hyper.fc_hidden, d, "2")
    _init_affine(rng, p, "cls", d, hyper.cls_hidden, "1")
    _init_affine(rng, p, "cls", hyper.cls_hidden, C + 1, "2")
    if arch == "encdec":
        _init_affine(rng, p, "base", H, H, "1")
        _init_affine(rng, p, "base", H, hyper.t_dec, "2")
    return p


def param_groups(arch: str) -> dict[str, tuple[str, ...]]:
    """Prefixes trained by each objective."""
    if arch == "encdec":
        anticip = ("enc", "dec", "out")
    elif arch == "efc":
        anticip = ("enc", "out")
    else:
        anticip = ("fc",)
    groups = {"anticipation": anticip, "classifier": ("cls",)}
    if arch == "encdec":
        groups["baseline"] = ("base",)
    return groups


def select(params: Params, prefixes) -> list[str]:
    return [k for k in params if k.split(".")[0] in prefixes]


# ---------------------------------------------------------------- LSTM

def _lstm_fwd(x, h, c, Wx, Wh, b):
    H = h.shape[1]
    z = x @ Wx.T + h @ Wh.T + b
    ifo = expit(z[:, :3 * H])
    i, f, o = ifo[:, :H], ifo[:, H:2 * H], ifo[:, 2 * H:]
    g = np.tanh(z[:, 3 * H:])
    c2 = f * c + i * g
    tc = np.tanh(c2)
    h2 = o * tc
    return h2, c2, (x, h, c, i, f, o, g, tc)


def _lstm_bwd(cache, dh2, dc2, Wx, Wh, grads, prefix):
    x, h, c, i, f, o, g, tc = cache
    dc = dc2 + dh2 * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [dc * g * i * (1.0 - i),
         dc * c * f * (1.0 - f),
         dh2 * tc * o * (1.0 - o),
         dc * i * (1.0 - g * g)], axis=1)
    grads[prefix + ".Wx"] += dz.T @ x
    grads[prefix + ".Wh"] += dz.T @ h
    grads[prefix + ".b"] += dz.sum(axis=0)
    return dz @ Wx, dz @ Wh, dc * f


def lstm_step(x, h, c, p: LSTMParams):
    """One LSTM step; accepts single vectors or batches (leading axis)."""
    x, h, c = (np.asarray(a, dtype=np.float64) for a in (x, h, c))
    single = x.ndim == 1
    x2, h2, c2 = (np.atleast_2d(a) for a in (x, h, c))
    H = p.W_h.shape[1]
    if (p.W_x.shape[0] != 4 * H or p.W_h.shape[0] != 4 * H or p.b.shape != (4 * H,)
            or x2.shape[1] != p.W_x.shape[1] or h2.shape[1] != H or c2.shape[1] != H):
        raise DimensionError(
            f"lstm_step shapes x{x.shape} h{h.shape} c{c.shape} "
            f"Wx{p.W_x.shape} Wh{p.W_h.shape} b{p.b.shape}")
    hn, cn, _ = _lstm_fwd(x2, h2, c2, p.W_x, p.W_h, p.b)
    check_finite(hn, "lstm hidden state")
    check_finite(cn, "lstm cell state")
    return (hn[0], cn[0]) if single else (hn, cn)


# ---------------------------------------------------------------- forward

@dataclass
class Forward:
    """Activations of one batched forward pass, kept for the backward pass."""
    arch: str
    vhat: np.ndarray  # (B, K, d) anticipated representations
    logits: np.ndarray | None = None  # (B, K, C+1)
    probs: np.ndarray | None = None
    h_enc: np.ndarray | None = None
    baseline: np.ndarray | None = None  # (B, T_dec)
    cache: dict = field(default_factory=dict)


def _encode(params, X):
    B, T, _ = X.shape
    if T < 1:
        raise ValueError("cannot encode an empty sequence")
    H = params["enc.Wh"].shape[1]
    Wx, Wh, b = params["enc.Wx"], params["enc.Wh"], params["enc.b"]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    caches = []
    for t in range(T):
        h, c, cache = _lstm_fwd(X[:, t], h, c, Wx, Wh, b)
        caches.append(cache)
    return h, c, caches


def _decode(params, h, c, t_dec):
    Wx, Wh, b = params["dec.Wx"], params["dec.Wh"], params["dec.b"]
    W, bo = params["out.W"], params["out.b"]
    B = h.shape[0]
    x = np.zeros((B, W.shape[0]))
    caches, hs, out = [], [], []
    for _ in range(t_dec):
        h, c, cache = _lstm_fwd(x, h, c, Wx, Wh, b)
        x = h @ W.T + bo
        caches.append(cache)
        hs.append(h)
        out.append(x)
    return np.stack(out, axis=1), caches, hs


def _classify(params, V):
    """V: (..., d) -> logits (..., C+1), plus cache."""
    a = np.tanh(V @ params["cls.W1"].T + params["cls.b1"])
    logits = a @ params["cls.W2"].T + params["cls.b2"]
    return logits, (V, a)


def _baseline(params, h_enc):
    a = np.tanh(h_enc @ params["base.W1"].T + params["base.b1"])
    return a @ params["base.W2"].T + params["base.b2"], (h_enc, a)


def forward(arch: str, params: Params, X: np.ndarray, t_dec: int = 1,
            classify: bool = True, baseline: bool = False) -> Forward:
    """Batched forward pass.

    ``X`` is (B, T, d). For ``encdec`` the output carries ``t_dec`` steps;
    FC and EFC always produce one step (their fixed horizon). FC reads only
    the last chunk of ``X``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise DimensionError(f"expected (batch, time, dim) input, got {X.shape}")
    cache: dict = {}
    h_enc = None
    if arch == "encdec":
        h_enc, c_enc, cache["enc"] = _encode(params, X)
        vhat, cache["dec"], cache["dec_h"] = _decode(params, h_enc, c_enc, t_dec)
    elif arch == "efc":
        h_enc, _, cache["enc"] = _encode(params, X)
        vhat = (h_enc @ params["out.W"].T + params["out.b"])[:, None, :]
    elif arch == "fc":
        x = X[:, -1]
        a = np.tanh(x @ params["fc.W1"].T + params["fc.b1"])
        vhat = (a @ params["fc.W2"].T + params["fc.b2"])[:, None, :]
        cache["fc"] = (x, a)
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    fw = Forward(arch=arch, vhat=vhat, h_enc=h_enc, cache=cache)
    if classify:
        fw.logits, cache["cls"] = _classify(params, vhat)
        fw.probs = _softmax(fw.logits)
    if baseline:
        fw.baseline, cache["base"] = _baseline(params, h_enc)
    return fw


# ---------------------------------------------------------------- backward

def _affine_bwd(dy, x, a, W2, grads, prefix):
    """Backward through y = W2 tanh(W1 x + b1) + b2; returns dx."""
    B = dy.reshape(-1, dy.shape[-1])
    A = a.reshape(-1, a.shape[-1])
    Xf = x.reshape(-1, x.shape[-1])
    grads[prefix + ".W2"] += B.T @ A
    grads[prefix + ".b2"] += B.sum(axis=0)
    dpre = (B @ W2) * (1.0 - A * A)
    grads[prefix + ".W1"] += dpre.T @ Xf
    grads[prefix + ".b1"] += dpre.sum(axis=0)
    return dpre


def backward(fw: Forward, params: Params, dvhat=None, dlogits=None, dbaseline=None,
             prefixes=None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its upstream gradients.

    ``dvhat``/``dlogits``/``dbaseline`` are gradients w.r.t. the anticipated
    representations, classifier logits and baseline outputs; any of them may
    be None. The baseline path stops at the encoder state (no gradient flows
    back into the encoder from it). ``prefixes`` restricts the returned dict.
    """
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    cache = fw.cache
    dv = None if dvhat is None else np.array(dvhat, dtype=np.float64)
    if dlogits is not None:
        V, a = cache["cls"]
        dpre = _affine_bwd(dlogits, V, a, params["cls.W2"], grads, "cls")
        dv_cls = (dpre @ params["cls.W1"]).reshape(fw.vhat.shape)
        dv = dv_cls if dv is None else dv + dv_cls
    if dbaseline is not None:
        h_enc, a = cache["base"]
        _affine_bwd(dbaseline, h_enc, a, params["base.W2"], grads, "base")
    if dv is not None:
        if fw.arch == "fc":
            x, a = cache["fc"]
            _affine_bwd(dv[:, 0], x, a, params["fc.W2"], grads, "fc")
        else:
            if fw.arch == "encdec":
                dh, dc = _decode_bwd(params, cache, dv, grads)
            else:
                grads["out.W"] += dv[:, 0].T @ fw.h_enc
                grads["out.b"] += dv[:, 0].sum(axis=0)
                dh = dv[:, 0] @ params["out.W"]
                dc = np.zeros_like(dh)
            Wx, Wh = params["enc.Wx"], params["enc.Wh"]
            for ec in reversed(cache["enc"]):
                _, dh, dc = _lstm_bwd(ec, dh, dc, Wx, Wh, grads, "enc")
    if prefixes is not None:
        grads = {k: g for k, g in grads.items() if k.split(".")[0] in prefixes}
    return grads


def _decode_bwd(params, cache, dv, grads):
    Wx, Wh, W = params["dec.Wx"], params["dec.Wh"], params["out.W"]
    B, T, _ = dv.shape
    H = Wh.shape[1]
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    dfeed = 0.0  # gradient arriving at step j's output through step j+1's input
    for j in reversed(range(T)):
        dvj = dv[:, j] + dfeed
        hj = cache["dec_h"][j]
        grads["out.W"] += dvj.T @ hj
        grads["out.b"] += dvj.sum(axis=0)
        dh = dh + dvj @ W
        dfeed, dh, dc = _lstm_bwd(cache["dec"][j], dh, dc, Wx, Wh, grads, "dec")
    return dh, dc


# ---------------------------------------------------------------- single-sample API

def _as_seq(seq) -> np.ndarray:
    X = np.asarray(seq, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("expected a nonempty sequence of feature vectors")
    return X[None]


def encode(seq, params: Params):
    """Run the encoder from a zero state; returns its final (h, c)."""
    h, c, _ = _encode(params, _as_seq(seq))
    return check_finite(h[0], "encoder state"), check_finite(c[0], "encoder cell")


def decode(h, c, params: Params, t_dec: int) -> np.ndarray:
    """Anticipate ``t_dec`` future representations, shape (t_dec, d)."""
    if t_dec < 1:
        raise ValueError("t_dec must be >= 1")
    h = np.asarray(h, dtype=np.float64)[None]
    c = np.asarray(c, dtype=np.float64)[None]
    if h.shape[1] != params["dec.Wh"].shape[1] or c.shape != h.shape:
        raise DimensionError("decoder state does not match decoder parameters")
    out, _, _ = _decode(params, h, c, t_dec)
    return check_finite(out[0], "anticipated representations")


def classify(v, params: Params) -> np.ndarray:
    logits, _ = _classify(params, np.asarray(v, dtype=np.float64))
    return check_finite(_softmax(logits), "class probabilities")


def baseline_forward(h_enc, params: Params) -> np.ndarray:
    b, _ = _baseline(params, np.asarray(h_enc, dtype=np.float64)[None])
    return check_finite(b[0], "baseline")


def fc_anticipate(v, params: Params) -> np.ndarray:
    fw = forward("fc", params, np.asarray(v, dtype=np.float64)[None, None], classify=False)
    return check_finite(fw.vhat[0, 0], "FC anticipation")


def efc_anticipate(seq, params: Params) -> np.ndarray:
    fw = forward("efc", params, _as_seq(seq), classify=False)
    return check_finite(fw.vhat[0, 0], "EFC anticipation")


# ---------------------------------------------------------------- model wrapper

@dataclass
class Model:
    """A trained (or initialised) network with its hyper-parameters."""
    arch: str
    hyper: Hyper
    params: Params

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        self.params = {k: self.params[k] for k in sorted(self.params)}

    @classmethod
    def initialise(cls, arch: str, hyper: Hyper, seed: int) -> "Model":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        return cls(arch, hyper, init_params(arch, hyper, rng))

    @property
    def t_enc(self) -> int:
        return self.hyper.t_enc

    @property
    def horizons(self) -> tuple[int, ...]:
        """Anticipation horizons (in chunks) of the output steps."""
        if self.arch == "encdec":
            return tuple(range(1, self.hyper.t_dec + 1))
        return (self.hyper.t_ant,)

    @property
    def n_classes(self) -> int:
        return self.hyper.c

    def copy(self) -> "Model":
        return Model(self.arch, self.hyper, {k: v.copy() for k, v in self.params.items()})

    def anticipate(self, X: np.ndarray) -> Forward:
        return forward(self.arch, self.params, X, t_dec=self.hyper.t_dec)

    def predict(self, video, anchors, batch: int = 512) -> np.ndarray:
        """Class distributions (n, K, C+1) for windows ending before each anchor."""
        feats = video.chunks
        anchors = np.asarray(anchors, dtype=np.int64)
        T = self.t_enc
        if anchors.size and (anchors.min() < T or anchors.max() > len(feats)):
            raise ValueError("anchor outside the valid range of the video")
        out = []
        for s in range(0, len(anchors), batch):
            idx = anchors[s:s + batch, None] + np.arange(-T, 0)[None]
            out.append(self.anticipate(feats[idx]).probs)
        if not out:
            return np.zeros((0, len(self.horizons), self.hyper.c + 1))
        return check_finite(np.concatenate(out), "predictions")

    def predict_history(self, history: np.ndarray) -> np.ndarray:
        """Class distributions (K, C+1) after reading an arbitrary-length history."""
        history = np.asarray(history, dtype=np.float64)[-self.t_enc:]
        return check_finite(self.anticipate(history[None]).probs[0], "predictions")
