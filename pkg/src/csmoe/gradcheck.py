"""Finite-difference audit of every loss composition's backward pass.

For each of a set of tiny random model instances, compares reverse-mode
gradients against central finite differences for each loss and each stage
composition, parameter by parameter, and reports the worst relative error
per loss.

Finite differences are only meaningful where the objective is locally
smooth, so candidate instances are screened: any instance whose routing
logits sit near a top-k tie, whose argmax assignments sit near a flip,
whose in-group probability mass sits near the exclusion threshold, or whose
pre-ReLU activations sit near a kink is replaced by the next candidate (the
losses treat assignment counts as constants, but a finite-difference probe
re-evaluates them on both sides of the step). Screening thresholds are far
above the probe step, so accepted instances are deterministic and safe.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor, backward, cross_entropy, fd_gradient, relu
from .losses import (
    TransitionState,
    compose_stage_loss,
    conventional_balance_loss,
    intra_group_balance_loss,
    language_specific_loss,
    transition_loss,
)
from .projector import (
    ProjectorConfig,
    _moe_layer_batch,
    build_moe_from_pretrained,
    init_mlp,
    moe_forward,
)
from .world import decode, init_decoder

__all__ = ["GRAD_LOSSES", "grad_check_report"]

GRAD_LOSSES = (
    "ce",
    "lang",
    "balance",
    "conventional",
    "transition",
    "stage2_total",
    "stage3_total",
    "stage4_total",
)

# tiny instance geometry: 2 languages x 2 experts, top-2 of 4, 2 layers
_M, _N, _K, _L = 2, 2, 2, 2
_D_IN, _D_MODEL, _VOCAB, _PROMPT, _TOKENS = 3, 4, 7, 2, 4

_MARGIN = 1e-3  # clearance required around every selection/argmax boundary
_MASS_FLOOR = 1e-3  # in-group probability mass must be 0 or above this


def _screen(moe, feats: np.ndarray, labels: np.ndarray, eps: float) -> bool:
    """True when every discrete choice has clearance around this input."""
    h = Tensor(feats)
    k = moe.top_k
    last = moe.config.num_layers - 1
    for l, layer in enumerate(moe.layers):
        logits = h.data @ layer.router_weights.value.data
        s = np.sort(logits, axis=1)[:, ::-1]
        if k < logits.shape[1] and (s[:, k - 1] - s[:, k]).min() < _MARGIN:
            return False
        out, _, probs = _moe_layer_batch(layer, h, k)
        p = probs.data
        ps = np.sort(p, axis=1)[:, ::-1]
        if (ps[:, 0] - ps[:, 1]).min() < _MARGIN:
            return False
        for g in range(moe.num_languages):
            rows = labels == g
            if not rows.any():
                continue
            in_group = p[rows][:, moe.group_mask(g)]
            mass = in_group.sum(axis=1)
            if ((mass > 0.0) & (mass < _MASS_FLOOR)).any():
                return False
            active = in_group[mass > 0.0]
            if active.shape[0]:
                si = np.sort(active, axis=1)[:, ::-1]
                if (si[:, 0] - si[:, 1]).min() < _MARGIN:
                    return False
        if l < last:
            if np.abs(out.data).min() < 10.0 * eps:
                return False
            h = relu(out)
        else:
            h = out
    return True


def _make_instance(seed: int, candidate: int):
    base = [seed, candidate]
    pcfg = ProjectorConfig(_D_IN, _D_MODEL, _L)
    mlps = [init_mlp(pcfg, [*base, g]) for g in range(_M)]
    moe = build_moe_from_pretrained(mlps, _N, _K, [*base, 10])
    decoder = init_decoder(_D_MODEL, _VOCAB, _PROMPT, [*base, 11])
    rng = np.random.default_rng([*base, 12])
    batches = []
    for _ in range(2):
        feats = rng.normal(size=(_TOKENS, _D_IN))
        labels = rng.integers(0, _M, size=_TOKENS)
        targets = rng.integers(0, _VOCAB, size=_TOKENS)
        batches.append((feats, labels, targets))
    ts = TransitionState(b=2, B=3)
    # odd candidates exercise non-unit auxiliary weights
    weights = (1.0, 1.0) if candidate % 2 == 0 else (0.5, 2.0)
    return moe, decoder, batches, ts, weights


def _builders(moe, decoder, batches, ts, weights):
    (f1, l1, t1), (f2, l2, t2) = batches
    g_of = moe.group_of
    lang_w, bal_w = weights

    def fwd(feats, labels):
        return moe_forward(moe, Tensor(feats), labels)

    def ce_of(feats, labels, targets):
        h, trace = fwd(feats, labels)
        return cross_entropy(decode(decoder, h), targets), trace

    def b_ce():
        return ce_of(f1, l1, t1)[0]

    def b_lang():
        return language_specific_loss(fwd(f1, l1)[1], None, g_of)

    def b_balance():
        return intra_group_balance_loss(fwd(f1, l1)[1], g_of)

    def b_conventional():
        return conventional_balance_loss(fwd(f1, l1)[1])

    def b_transition():
        return transition_loss(ce_of(f1, l1, t1)[0], ce_of(f2, l2, t2)[0], ts)

    def b_stage2():
        ce, trace = ce_of(f1, l1, t1)
        return compose_stage_loss(
            2,
            ce=ce,
            lang=language_specific_loss(trace, None, g_of),
            balance=intra_group_balance_loss(trace, g_of),
            lang_weight=lang_w,
            balance_weight=bal_w,
        ).total

    def _mixed():
        from .autodiff import take

        feats = np.concatenate([f1, f2], axis=0)
        labels = np.concatenate([l1, l2])
        h, trace = fwd(feats, labels)
        logits = decode(decoder, h)
        n_src = f1.shape[0]
        ce_src = cross_entropy(take(logits, np.arange(n_src)), t1)
        ce_tgt = cross_entropy(take(logits, np.arange(n_src, feats.shape[0])), t2)
        return transition_loss(ce_src, ce_tgt, ts), trace

    def b_stage3():
        trans, trace = _mixed()
        return compose_stage_loss(
            3,
            transition=trans,
            lang=language_specific_loss(trace, None, g_of),
            balance=intra_group_balance_loss(trace, g_of),
            lang_weight=lang_w,
            balance_weight=bal_w,
        ).total

    def b_stage4():
        return compose_stage_loss(4, transition=_mixed()[0]).total

    moe_params = moe.parameters()
    all_params = moe_params + decoder.parameters()
    return {
        "ce": (b_ce, all_params),
        "lang": (b_lang, moe_params),
        "balance": (b_balance, moe_params),
        "conventional": (b_conventional, moe_params),
        "transition": (b_transition, all_params),
        "stage2_total": (b_stage2, all_params),
        "stage3_total": (b_stage3, all_params),
        "stage4_total": (b_stage4, all_params),
    }


def _max_rel_err(build_loss, params, eps: float) -> float:
    for p in params:
        p.zero_grad()
    with Tape():
        backward(build_loss())
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()

        def f(t, _p=p):
            old = _p.value.data.copy()
            _p.value.data[...] = t.data
            try:
                return build_loss()
            finally:
                _p.value.data[...] = old

        fd = fd_gradient(f, Tensor(p.value.data.copy()), eps=eps).data
        # The denominator floor turns the ratio into an absolute test for
        # near-zero gradients: central differences carry cancellation noise
        # of order |loss|*1e-16/(2*eps) per entry, which would otherwise
        # dominate the ratio exactly where both sides agree the gradient
        # vanishes.
        denom = max(np.linalg.norm(fd), np.linalg.norm(analytic), 1e-5)
        worst = max(worst, float(np.linalg.norm(fd - analytic) / denom))
    return worst


def grad_check_report(*, seed: int = 0, instances: int = 20,
                      eps: float = 1e-5, tol: float = 1e-4) -> dict:
    """Compare backward against central differences for every loss form.

    Returns a report with the worst relative error per loss over all
    accepted instances; ``pass`` is True when every loss stays within
    ``tol``.
    """
    if instances < 1:
        raise ValueError(f"instances must be >= 1, got {instances}")
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    if tol <= 0.0:
        raise ValueError(f"tol must be positive, got {tol}")

    worst = {name: 0.0 for name in GRAD_LOSSES}
    accepted = 0
    skipped = 0
    candidate = 0
    while accepted < instances:
        moe, decoder, batches, ts, weights = _make_instance(seed, candidate)
        candidate += 1
        if not all(_screen(moe, feats, labels, eps)
                   for feats, labels, _ in batches):
            skipped += 1
            continue
        builders = _builders(moe, decoder, batches, ts, weights)
        try:
            for name, (build, params) in builders.items():
                err = _max_rel_err(build, params, eps)
                worst[name] = max(worst[name], err)
        except ValueError:
            # e.g. a draw where some language carries no in-group mass at all
            skipped += 1
            continue
        accepted += 1

    losses = {
        name: {"max_rel_err": worst[name], "pass": worst[name] < tol}
        for name in GRAD_LOSSES
    }
    return {
        "seed": seed,
        "instances": instances,
        "skipped_candidates": skipped,
        "eps": eps,
        "tol": tol,
        "losses": losses,
        "pass": all(entry["pass"] for entry in losses.values()),
    }
