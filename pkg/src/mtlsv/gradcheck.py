"""Finite-difference verification of the full network and its pieces."""

from __future__ import annotations

import numpy as np

from . import network as net
from . import numeric as nm

TINY = dict(input_dim=5, hidden_dim=8, num_phonemes=4, num_speakers=3)
ADVERSARIAL_GROUPS = ("adv1", "adv2", "adv_head")


def tiny_config(preset: str = "S6", **overrides) -> net.NetworkConfig:
    kwargs = dict(TINY, precision="float64")
    kwargs.update(overrides)
    return net.NetworkConfig.preset(preset, **kwargs)


def random_problem(config: net.NetworkConfig, n_frames: int, seed: int):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_frames, config.input_dim))
    labels = net.LabelBundle(
        speaker=int(rng.integers(config.num_speakers)),
        frame_phonemes=rng.integers(0, config.num_phonemes, size=n_frames),
        segment_distribution=rng.dirichlet(np.ones(config.num_phonemes)),
    )
    return x, labels


def network_grad_check(config: net.NetworkConfig, seed: int = 0, n_frames: int = 6, epsilon: float = 1e-6) -> float:
    """Max relative gradient error of the total loss over every parameter.

    Behind the gradient reversal, parameters receive the gradient of
    ``L_s + alpha L_pf - beta L_ps``; finite differences for them are taken
    of that objective. The adversarial head itself is checked against the
    plain total loss.
    """
    model = net.build(config, seed=seed)
    x, labels = random_problem(config, n_frames, seed)
    names = list(model.params)
    buffers = model.buffers

    def objective(sign_ps):
        def f(*values):
            m = net.Model(config, dict(zip(names, values)), {k: v.copy() for k, v in buffers.items()})
            losses = net.compute_losses(net.forward(x, m, train=True), labels, config)
            if sign_ps == 1:
                return losses.total
            return nm.add(losses.speaker, nm.scale(losses.frame_phonetic, config.alpha),
                          nm.scale(losses.segment_phonetic, -config.beta))
        return f

    values = [model.params[n].data for n in names]
    adversarial = [i for i, n in enumerate(names) if n.split(".")[0] in ADVERSARIAL_GROUPS]
    upstream = [i for i in range(len(names)) if i not in adversarial]
    total = objective(1)
    reversed_ = objective(-1) if config.use_segment_adversarial else total
    worst = nm.grad_check(total, values, epsilon, seed=seed, wrt=upstream, reference=reversed_)
    if adversarial:
        worst = max(worst, nm.grad_check(total, values, epsilon, seed=seed, wrt=adversarial))
    return worst
