"""Analytic-vs-finite-difference checks for every training loss."""
from __future__ import annotations

import numpy as np

from . import rl
from .model import Hyper, Model, backward, forward, param_groups, select
from .numerics import GradCheckReport, grad_check
from .training import classification_terms, regression_terms, surrogate_logit_grad

LOSSES = ("L_reg", "L_cls", "surrogate", "baseline_loss")


def _flatten(params, keys):
    return np.concatenate([params[k].reshape(-1) for k in keys])


def _unflatten(params, keys, theta):
    out = dict(params)
    i = 0
    for k in keys:
        n = params[k].size
        out[k] = theta[i:i + n].reshape(params[k].shape)
        i += n
    return out


def toy_problem(hyper: Hyper, batch: int, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    model = Model.initialise("encdec", hyper, seed)
    X = rng.standard_normal((batch, hyper.t_enc, hyper.d))
    V = rng.standard_normal((batch, hyper.t_dec, hyper.d))
    Y = rng.integers(0, hyper.c + 1, size=(batch, hyper.t_dec))
    Y[:, 0] = 0  # guarantees a transfer somewhere in most rows
    return model, X, V, Y, rng


def loss_functions(model: Model, X, V, Y, rng, alpha=1.0):
    """(name, keys, f(params) -> loss, grad(params) -> dict) for each loss.

    The surrogate uses one fixed sample and frozen advantages, and the
    baseline loss one fixed set of returns, as during training.
    """
    t_dec = model.hyper.t_dec
    groups = param_groups("encdec")
    policy_keys = select(model.params, groups["anticipation"] + groups["classifier"])
    reg_keys = select(model.params, groups["anticipation"])
    base_keys = select(model.params, groups["baseline"])

    fw0 = forward("encdec", model.params, X, t_dec, baseline=True)
    sampled, _ = rl.sample_sequence(fw0.probs, rng)
    r = np.stack([rl.step_rewards(s, y, alpha) for s, y in zip(sampled, Y)])
    R = rl.returns(r)
    adv = R - fw0.baseline
    rows = np.arange(len(X))[:, None]
    steps = np.arange(t_dec)[None]

    def f_reg(p):
        return regression_terms(forward("encdec", p, X, t_dec, classify=False).vhat, V)[0]

    def g_reg(p):
        fw = forward("encdec", p, X, t_dec, classify=False)
        return backward(fw, p, dvhat=regression_terms(fw.vhat, V)[1])

    def f_cls(p):
        return classification_terms(forward("encdec", p, X, t_dec).probs, Y)[0]

    def g_cls(p):
        fw = forward("encdec", p, X, t_dec)
        return backward(fw, p, dlogits=classification_terms(fw.probs, Y)[1])

    def f_sur(p):
        probs = forward("encdec", p, X, t_dec).probs
        return rl.reinforce_surrogate(np.log(probs[rows, steps, sampled]), adv, 0.0 * adv)

    def g_sur(p):
        fw = forward("encdec", p, X, t_dec)
        return backward(fw, p, dlogits=surrogate_logit_grad(fw.probs, sampled, adv))

    def f_base(p):
        return rl.baseline_loss(forward("encdec", p, X, t_dec, classify=False,
                                        baseline=True).baseline, R)

    def g_base(p):
        fw = forward("encdec", p, X, t_dec, classify=False, baseline=True)
        return backward(fw, p, dbaseline=2.0 * (fw.baseline - R) / R.size)

    return [("L_reg", reg_keys, f_reg, g_reg),
            ("L_cls", policy_keys, f_cls, g_cls),
            ("surrogate", policy_keys, f_sur, g_sur),
            ("baseline_loss", base_keys, f_base, g_base)]


def run_grad_checks(hyper: Hyper | None = None, batch: int = 3, seed: int = 0,
                    eps: float = 1e-5, corrupt: bool = False) -> list[GradCheckReport]:
    """Check every loss at a random initialisation.

    ``corrupt`` perturbs each analytic gradient (used to test failure paths).
    """
    hyper = hyper or Hyper(t_enc=4, t_dec=3, d=8, h=12, c=3)
    model, X, V, Y, rng = toy_problem(hyper, batch, seed)
    reports = []
    for name, keys, f, g in loss_functions(model, X, V, Y, rng, hyper.alpha):
        p0 = model.params
        theta = _flatten(p0, keys)
        analytic = _flatten(g(p0), keys)
        if corrupt:
            analytic = analytic * 1.01 + 1e-3
        reports.append(grad_check(name, lambda th: f(_unflatten(p0, keys, th)), analytic, theta, eps))
    return reports
