"""Losses, Adam, window sampling and the two-stage training drivers."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import rl
from .data import ActionInterval, DataError, FeatureSequence, Video, fmt_float
from .model import Forward, Hyper, Model, backward, forward, param_groups, select
from .numerics import DimensionError, NumericError, check_finite

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

# stream ids for SeedSequence-derived generators
_STAGE1, _STAGE2 = 1, 2
_WINDOWS, _POLICY = 0, 1


# ---------------------------------------------------------------- losses

def _pairs(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {gt.shape}")
    if pred.ndim != 3:
        raise DimensionError("expected (batch, steps, dim) arrays")
    return pred, gt


def regression_terms(pred, gt):
    """Squared-error loss summed over steps, averaged over the batch, and its gradient."""
    pred, gt = _pairs(pred, gt)
    diff = pred - gt
    N = pred.shape[0]
    return float(np.sum(diff * diff) / N), 2.0 * diff / N


def regression_loss(pred, gt) -> float:
    return regression_terms(pred, gt)[0]


def _check_labels(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 3 or labels.shape != probs.shape[:2]:
        raise DimensionError(f"labels {labels.shape} do not match probabilities {probs.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[2]):
        raise ValueError(f"label outside 0..{probs.shape[2] - 1}")
    return probs, labels.astype(np.int64)


def classification_terms(probs, labels):
    """Negative log-likelihood loss and its gradient w.r.t. the logits.

    Probabilities are floored at 1e-12 before the log; floored entries pass
    no gradient.
    """
    probs, labels = _check_labels(probs, labels)
    N = probs.shape[0]
    p_true = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
    loss = float(-np.sum(np.log(np.maximum(p_true, PROB_FLOOR))) / N)
    onehot = np.eye(probs.shape[2])[labels]
    dlogits = (probs - onehot) / N
    dlogits[p_true < PROB_FLOOR] = 0.0
    return loss, dlogits


def classification_loss(step_probs, labels) -> float:
    return classification_terms(step_probs, labels)[0]


def surrogate_logit_grad(probs, sampled, advantages):
    """Gradient of -(1/N) sum logp(sampled) * adv w.r.t. logits (adv constant)."""
    N = probs.shape[0]
    onehot = np.eye(probs.shape[2])[sampled]
    return -(advantages / N)[..., None] * (onehot - probs)


def total_loss(l_reg: float, l_cls: float, surrogate: float, weights=(1.0, 1.0, 1.0)) -> float:
    """L_reg + L_cls - J, with the surrogate already carrying the sign of -J."""
    w_reg, w_cls, w_rl = weights
    return w_reg * l_reg + w_cls * l_cls + w_rl * surrogate


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """Bias-corrected Adam update of the parameters named in ``grads`` (in place)."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise DimensionError(f"gradient for {k} has shape {g.shape}, expected {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place to global norm <= max_norm; returns the original norm."""
    # fsum over sorted names: the norm must not depend on dict order
    norm = math.sqrt(math.fsum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------- windows

@dataclass
class TrainingWindow:
    video_id: str
    anchor: int
    input: np.ndarray  # (T_enc, d), chunks [t - T_enc, t)
    target_feats: np.ndarray  # (T_dec, d), chunks [t, t + T_dec)
    target_labels: np.ndarray | None = None


def _features(video) -> FeatureSequence:
    return video.features if isinstance(video, Video) else video


def _window(feats: FeatureSequence, t, t_enc, t_dec, labels=None) -> TrainingWindow:
    X = feats.chunks
    y = None if labels is None else labels.labels[t:t + t_dec].copy()
    return TrainingWindow(feats.video_id, t, X[t - t_enc:t], X[t:t + t_dec], y)


def stage1_anchor_range(n: int, t_enc: int, t_dec: int) -> tuple[int, int]:
    """Inclusive anchor bounds [T_enc, n - T_dec]; empty when lo > hi."""
    return t_enc, n - t_dec


def sample_stage1(video, rng, t_enc: int = 16, t_dec: int = 8) -> TrainingWindow:
    feats = _features(video)
    lo, hi = stage1_anchor_range(len(feats), t_enc, t_dec)
    if lo > hi:
        raise DataError(f"{feats.video_id}: {len(feats)} chunks, need at least {t_enc + t_dec}")
    return _window(feats, int(rng.integers(lo, hi + 1)), t_enc, t_dec)


def stage2_anchor_range(n: int, iv: ActionInterval, t_enc: int, t_dec: int) -> tuple[int, int]:
    """Anchors with t_s - T_enc < t < t_e, clamped to the video bounds (inclusive)."""
    lo = max(iv.t_s - t_enc + 1, t_enc)
    hi = min(iv.t_e - 1, n - t_dec)
    return lo, hi


def sample_stage2(video: Video, intervals, rng, t_enc: int = 16, t_dec: int = 8) -> TrainingWindow:
    if video.labels is None:
        raise DataError(f"{video.video_id}: stage 2 needs labels")
    n = len(video.features)
    valid = [iv for iv in intervals if _nonempty(stage2_anchor_range(n, iv, t_enc, t_dec))]
    if not valid:
        raise DataError(f"{video.video_id}: no valid stage-2 anchor for the given intervals")
    iv = valid[int(rng.integers(len(valid)))]
    lo, hi = stage2_anchor_range(n, iv, t_enc, t_dec)
    return _window(video.features, int(rng.integers(lo, hi + 1)), t_enc, t_dec, video.labels)


def _nonempty(r):
    return r[0] <= r[1]


class Stage1Sampler:
    """Uniform over every valid (video, anchor) pair. Never touches labels."""

    def __init__(self, videos, t_enc, t_dec):
        if not videos:
            raise DataError("empty dataset")
        self.feats = [_features(v) for v in videos]
        self.t_enc, self.t_dec = t_enc, t_dec
        counts = []
        for f in self.feats:
            lo, hi = stage1_anchor_range(len(f), t_enc, t_dec)
            counts.append(max(0, hi - lo + 1))
        self.counts = np.array(counts)
        if self.counts.sum() == 0:
            raise DataError(f"no video has the {t_enc + t_dec} chunks a window needs")
        self.n_windows = int(self.counts.sum())
        self.cum = np.cumsum(self.counts)

    def draw(self, rng, n) -> list[TrainingWindow]:
        out = []
        for _ in range(n):
            k = int(rng.integers(self.n_windows))
            v = int(np.searchsorted(self.cum, k, side="right"))
            out.append(sample_stage1(self.feats[v], rng, self.t_enc, self.t_dec))
        return out


class Stage2Sampler:
    """Pick an action interval uniformly, then an anchor around it."""

    def __init__(self, videos, t_enc, t_dec):
        self.t_enc, self.t_dec = t_enc, t_dec
        self.pool = []
        self.n_windows = 0
        for v in videos:
            if v.labels is None:
                raise DataError(f"{v.video_id}: stage 2 needs labels")
            for iv in v.labels.intervals:
                r = stage2_anchor_range(len(v.features), iv, t_enc, t_dec)
                if _nonempty(r):
                    self.pool.append((v, iv))
                    self.n_windows += r[1] - r[0] + 1
        if not self.pool:
            raise DataError("no action interval admits a stage-2 window")

    def draw(self, rng, n) -> list[TrainingWindow]:
        out = []
        for _ in range(n):
            v, iv = self.pool[int(rng.integers(len(self.pool)))]
            out.append(sample_stage2(v, [iv], rng, self.t_enc, self.t_dec))
        return out


def _stack(windows):
    X = np.stack([w.input for w in windows])
    V = np.stack([w.target_feats for w in windows])
    Y = None
    if windows[0].target_labels is not None:
        Y = np.stack([w.target_labels for w in windows])
    return X, V, Y


# ---------------------------------------------------------------- config

REQUIRED_KEYS = ("t_enc", "t_dec", "d", "h", "c", "alpha", "lr", "batch",
                 "epochs_stage1", "epochs_stage2", "seed", "use_reinforce",
                 "reward_action_only", "clip_norm", "w_reg", "w_cls", "w_rl")
OPTIONAL_KEYS = ("h_cls", "h_fc", "t_ant", "chunk_frames", "fps", "batches_per_epoch",
                 "return_mode", "beta1", "beta2", "adam_eps")
_HYPER_KEYS = ("t_enc", "t_dec", "d", "h", "c", "alpha", "lr", "batch",
               "chunk_frames", "fps", "h_cls", "h_fc", "t_ant")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    hyper: Hyper = field(default_factory=Hyper)
    epochs_stage1: int = 50
    epochs_stage2: int = 50
    seed: int = 0
    use_reinforce: bool = True
    reward_action_only: bool = False
    clip_norm: float = 5.0
    w_reg: float = 1.0
    w_cls: float = 1.0
    w_rl: float = 1.0
    batches_per_epoch: int = 0  # 0 -> ceil(windows / batch)
    return_mode: str = "to_go"  # or "total"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if self.return_mode not in ("to_go", "total"):
            raise ConfigError(f"return_mode must be to_go or total, not {self.return_mode!r}")
        if self.batches_per_epoch < 0:
            raise ConfigError("batches_per_epoch must be nonnegative")

    @property
    def weights(self):
        return (self.w_reg, self.w_cls, self.w_rl)

    def replace(self, **kw) -> "TrainConfig":
        hyper_kw = {k: kw.pop(k) for k in list(kw) if k in _HYPER_KEYS}
        hyper = self.hyper.replace(**hyper_kw) if hyper_kw else self.hyper
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw, hyper=hyper)
        return TrainConfig(**vals)

    def to_text(self) -> str:
        vals = dict(self.hyper.items())
        vals.update({f.name: getattr(self, f.name) for f in fields(self) if f.name != "hyper"})
        out = []
        for k in REQUIRED_KEYS + OPTIONAL_KEYS:
            v = vals[k]
            if v is None:
                continue
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = fmt_float(v)
            out.append(f"{k}={v}")
        return "\n".join(out) + "\n"


def _coerce(key, raw, kind):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        return kind(raw)
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    values = {}
    for i, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{i}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in REQUIRED_KEYS and k not in OPTIONAL_KEYS:
            raise ConfigError(f"{source}:{i}: unknown config key {k}")
        values[k] = v
    for k in REQUIRED_KEYS:
        if k not in values:
            raise ConfigError(f"{source}: missing config key {k}")
    defaults = TrainConfig()
    kinds = {**{k: type(v) for k, v in defaults.hyper.items()}, "h_cls": int, "h_fc": int,
             **{f.name: type(getattr(defaults, f.name)) for f in fields(defaults) if f.name != "hyper"}}
    typed = {k: _coerce(k, v, kinds[k]) for k, v in values.items()}
    try:
        hyper = Hyper(**{k: typed.pop(k) for k in list(typed) if k in _HYPER_KEYS})
        return TrainConfig(hyper=hyper, **typed)
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from None


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return parse_config(fh.read(), str(path))


# ---------------------------------------------------------------- logs

LOG_COLUMNS = ("epoch", "l_reg", "l_cls", "surrogate", "mean_reward", "baseline_loss")


@dataclass
class EpochLog:
    epoch: int
    l_reg: float = 0.0
    l_cls: float = 0.0
    surrogate: float = 0.0
    mean_reward: float = 0.0
    baseline_loss: float = 0.0
    # squared norm of the applied gradient; the loss decreases along -g iff > 0
    grad_sq_norm: float = field(default=0.0, repr=False)

    def row(self):
        return [str(self.epoch)] + [fmt_float(getattr(self, c)) for c in LOG_COLUMNS[1:]]


def log_csv(curve: list[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for e in curve:
        w.writerow(e.row())
    return buf.getvalue()


# ---------------------------------------------------------------- drivers

def _rng(seed, *path):
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


def _target_len(arch: str, hyper: Hyper) -> int:
    return hyper.t_dec if arch == "encdec" else hyper.t_ant


def _n_batches(config: TrainConfig, n_windows: int) -> int:
    if config.batches_per_epoch:
        return config.batches_per_epoch
    return max(1, math.ceil(n_windows / config.hyper.batch))


def _step_targets(arch, hyper, V, Y):
    """FC/EFC regress and classify only the chunk T_ant steps ahead."""
    if arch == "encdec":
        return V, Y
    k = hyper.t_ant - 1
    return V[:, k:k + 1], None if Y is None else Y[:, k:k + 1]


def train_stage1(dataset, config: TrainConfig, seed: int | None = None,
                 arch: str = "encdec", model: Model | None = None):
    """Fit the anticipation network on the regression loss alone.

    Labels are never read. Returns the model and one EpochLog per epoch.
    """
    seed = config.seed if seed is None else seed
    hyper = config.hyper
    if not dataset:
        raise DataError("empty dataset")
    if model is None:
        model = Model.initialise(arch, hyper, seed)
    arch = model.arch
    sampler = Stage1Sampler(dataset, hyper.t_enc, _target_len(arch, hyper))
    prefixes = param_groups(arch)["anticipation"]
    state = AdamState(config.beta1, config.beta2, config.adam_eps)
    n_batches = _n_batches(config, sampler.n_windows)
    curve = []
    for epoch in range(config.epochs_stage1):
        tot = EpochLog(epoch + 1)
        for b in range(n_batches):
            X, V, _ = _stack(sampler.draw(_rng(seed, _STAGE1, epoch, b, _WINDOWS), hyper.batch))
            V, _ = _step_targets(arch, hyper, V, None)
            fw = forward(arch, model.params, X, hyper.t_dec, classify=False)
            l_reg, dV = regression_terms(fw.vhat, V)
            grads = backward(fw, model.params, dvhat=config.w_reg * dV, prefixes=prefixes)
            clip_global_norm(grads, config.clip_norm)
            tot.grad_sq_norm += math.fsum(float(np.sum(g * g)) for g in grads.values())
            adam_step(model.params, grads, state, hyper.lr)
            tot.l_reg += l_reg
        tot.l_reg /= n_batches
        check_finite(tot.l_reg, f"stage-1 loss at epoch {epoch + 1}")
        log.info("stage1 epoch %d l_reg=%.6g", epoch + 1, tot.l_reg)
        curve.append(tot)
    return model, curve


@dataclass
class StepStats:
    l_reg: float
    l_cls: float
    surrogate: float
    mean_reward: float
    baseline_loss: float


def stage2_gradients(model: Model, X, V, Y, config: TrainConfig, policy_rng=None,
                     use_reinforce: bool = False, zero_advantage: bool = False):
    """Loss statistics and gradients of one stage-2 batch.

    Returns (stats, policy_grads, baseline_grads). ``baseline_grads`` is None
    unless reinforcement is on; it only reaches the baseline network.
    """
    arch, hyper = model.arch, model.hyper
    use_reinforce = use_reinforce and arch == "encdec"
    V, Y = _step_targets(arch, hyper, V, Y)
    fw = forward(arch, model.params, X, hyper.t_dec, classify=True, baseline=use_reinforce)
    l_reg, dV = regression_terms(fw.vhat, V)
    l_cls, dlog = classification_terms(fw.probs, Y)
    dlogits = config.w_cls * dlog
    surrogate = mean_reward = bl = 0.0
    dbase = None
    if use_reinforce:
        sampled, logp = rl.sample_sequence(fw.probs, policy_rng)
        r = np.stack([rl.step_rewards(s, y, hyper.alpha, config.reward_action_only)
                      for s, y in zip(sampled, Y)])
        R = rl.returns(r) if config.return_mode == "to_go" else rl.total_returns(r)
        b = fw.baseline
        adv = np.zeros_like(R) if zero_advantage else R - b
        surrogate = -float((logp * adv).sum() / len(adv))
        dlogits = dlogits + config.w_rl * surrogate_logit_grad(fw.probs, sampled, adv)
        mean_reward = float(np.mean(r.sum(axis=1)))
        bl = rl.baseline_loss(b, R)
        dbase = 2.0 * (b - R) / b.size
    grads = backward(fw, model.params, dvhat=config.w_reg * dV, dlogits=dlogits,
                     dbaseline=dbase)
    groups = param_groups(arch)
    policy = {k: grads[k] for k in select(grads, groups["anticipation"] + groups["classifier"])}
    base = {k: grads[k] for k in select(grads, ("base",))} if use_reinforce else None
    return StepStats(l_reg, l_cls, surrogate, mean_reward, bl), policy, base


def train_stage2(model: Model, dataset, config: TrainConfig, seed: int | None = None,
                 use_reinforce: bool | None = None, zero_advantage: bool = False,
                 trajectory: list | None = None):
    """Joint training on windows around labelled action intervals.

    With ``use_reinforce`` false this is the ED baseline (no reward term).
    ``zero_advantage`` forces R - b to zero (test hook). If ``trajectory`` is
    a list, a copy of the parameters is appended after every epoch.
    """
    seed = config.seed if seed is None else seed
    use_reinforce = config.use_reinforce if use_reinforce is None else use_reinforce
    model = model.copy()
    hyper = model.hyper
    for v in dataset:
        if v.labels is None:
            raise DataError(f"{v.video_id}: stage 2 needs labels")
    sampler = Stage2Sampler(dataset, hyper.t_enc, _target_len(model.arch, hyper))
    state = AdamState(config.beta1, config.beta2, config.adam_eps)
    base_state = AdamState(config.beta1, config.beta2, config.adam_eps)
    n_batches = _n_batches(config, sampler.n_windows)
    curve = []
    for epoch in range(config.epochs_stage2):
        tot = EpochLog(epoch + 1)
        for b in range(n_batches):
            windows = sampler.draw(_rng(seed, _STAGE2, epoch, b, _WINDOWS), hyper.batch)
            X, V, Y = _stack(windows)
            stats, grads, bgrads = stage2_gradients(
                model, X, V, Y, config, _rng(seed, _STAGE2, epoch, b, _POLICY),
                use_reinforce, zero_advantage)
            clip_global_norm(grads, config.clip_norm)
            tot.grad_sq_norm += math.fsum(float(np.sum(g * g)) for g in grads.values())
            adam_step(model.params, grads, state, hyper.lr)
            if bgrads is not None:
                clip_global_norm(bgrads, config.clip_norm)
                adam_step(model.params, bgrads, base_state, hyper.lr)
            for k in ("l_reg", "l_cls", "surrogate", "mean_reward", "baseline_loss"):
                setattr(tot, k, getattr(tot, k) + getattr(stats, k))
        for k in ("l_reg", "l_cls", "surrogate", "mean_reward", "baseline_loss"):
            setattr(tot, k, check_finite(getattr(tot, k) / n_batches, f"stage-2 {k}"))
        log.info("stage2 epoch %d l_reg=%.6g l_cls=%.6g reward=%.4g",
                 epoch + 1, tot.l_reg, tot.l_cls, tot.mean_reward)
        curve.append(tot)
        if trajectory is not None:
            trajectory.append({k: p.copy() for k, p in model.params.items()})
    return model, curve


def _train_single_step(arch, dataset, config, t_ant, seed):
    if t_ant is not None:
        config = config.replace(t_ant=t_ant)
    model, c1 = train_stage1(dataset, config, seed, arch=arch)
    model, c2 = train_stage2(model, dataset, config, seed, use_reinforce=False)
    return model, c1, c2


def train_fc(dataset, config: TrainConfig, t_ant: int | None = None, seed: int | None = None):
    """Two-stage FC baseline: one chunk in, the chunk T_ant ahead out."""
    return _train_single_step("fc", dataset, config, t_ant, seed)


def train_efc(dataset, config: TrainConfig, t_ant: int | None = None, seed: int | None = None):
    """Two-stage EFC baseline: LSTM encoder plus one affine anticipation."""
    return _train_single_step("efc", dataset, config, t_ant, seed)
