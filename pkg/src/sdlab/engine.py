"""Draft/verify decoding engine with pluggable draft-length policies.

One decode iteration is: draft k tokens with the head, verify them (plus
a bonus position) in a single target forward pass, emit the validated
prefix and the bonus token. The prompt itself is consumed by an initial
feature-only pass that is not counted as an iteration, so a fixed-length
policy drafts exactly k tokens in every counted iteration.

In greedy mode the emitted sequence is token-identical to plain
autoregressive argmax decoding for every policy; in stochastic mode the
emission distribution matches the target's chain distribution.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import (
    DraftHead,
    TargetLM,
    draft_feature_step,
    softmax,
    target_forward_batch,
)
from .predictor import LengthPredictor, predict_length
from .rng import Rng
from .tokens import argmax_dist, residual_dist, sample


def accept_prob(p: float, p_hat: float) -> float:
    """Probability of keeping a draft token: min(1, p / p_hat)."""
    if p_hat <= 0.0:
        raise ValueError("draft probability must be positive")
    if p < 0.0:
        raise ValueError("target probability must be non-negative")
    return min(1.0, p / p_hat)


def verify_greedy(lm: TargetLM, prefix: list[int], draft: list[int]):
    """Longest validated draft prefix and the bonus token, one target pass."""
    k, bonus, _, _ = _verify_greedy_full(lm, prefix, draft)
    return k, bonus


def _verify_greedy_full(lm: TargetLM, prefix: list[int], draft: list[int]):
    j = len(prefix)
    dists, feats = target_forward_batch(lm, prefix + draft)
    k = 0
    while k < len(draft) and draft[k] == argmax_dist(dists[j - 1 + k]):
        k += 1
    bonus = argmax_dist(dists[j - 1 + k])
    return k, bonus, dists, feats


def verify_stochastic_dists(
    target_dists: np.ndarray, draft: list[int], draft_dists: np.ndarray, rng: Rng
):
    """Acceptance walk over precomputed distributions.

    target_dists[i] is the target distribution at draft position i, with
    one extra trailing row for the bonus position. Returns (accepted
    count, next token), where the next token is either the rejection
    resample or the bonus draw.
    """
    for i, t in enumerate(draft):
        a = accept_prob(float(target_dists[i][t]), float(draft_dists[i][t]))
        if rng.uniform() >= a:
            return i, sample(residual_dist(target_dists[i], draft_dists[i]), rng)
    return len(draft), sample(target_dists[len(draft)], rng)


def verify_stochastic(
    lm: TargetLM, prefix: list[int], draft: list[int], draft_dists: np.ndarray, rng: Rng
):
    j = len(prefix)
    dists, _ = target_forward_batch(lm, prefix + draft)
    if len(draft) == 0:
        return 0, sample(dists[j - 1], rng)
    rows = np.vstack([dists[j - 1 : j - 1 + len(draft)], dists[j - 1 + len(draft)][None]])
    return verify_stochastic_dists(rows, draft, draft_dists, rng)


def ddd_continue(cum_logprob: float, theta_log: float, step: int, k_max: int) -> bool:
    """Keep drafting while the draft sequence stays above the threshold."""
    return cum_logprob > theta_log and step < k_max


def combined_continue(
    step: int, k_pred: int, cum_logprob: float, theta_log: float, k_max: int
) -> bool:
    """Stop only once past the predicted length AND below the threshold."""
    if step >= k_max:
        return False
    return not (step >= k_pred and cum_logprob < theta_log)


@dataclass
class IterationTrace:
    drafted: int
    accepted: int
    emitted: int
    bonus_emitted: bool
    bonus_token: int | None
    predicted_len: int | None = None
    cum_logprob_exit: float | None = None


@dataclass
class PhaseTimes:
    draft: float = 0.0
    target: float = 0.0
    policy: float = 0.0
    total: float = 0.0


@dataclass
class DecodeResult:
    output: list[int]
    traces: list[IterationTrace]
    times: PhaseTimes = field(default_factory=PhaseTimes)


@dataclass
class PolicyContext:
    """State handed to a policy right before drafting.

    (anchor_token, anchor_feat) seed the head's autoregression;
    (last_token, last_feat) are the last validated position's token id
    and true target feature, the policy's input pair. ``formal`` is the
    full validated sequence including the pending bonus token.
    """

    lm: TargetLM
    dh: DraftHead
    formal: list[int]
    anchor_token: int
    anchor_feat: np.ndarray
    last_token: int
    last_feat: np.ndarray


@dataclass
class DraftPlan:
    target_len: int | None = None       # static length; None = threshold-driven
    predicted_len: int | None = None    # predictor output, logged in the trace
    theta_log: float | None = None
    k_max: int | None = None
    combined: bool = False
    pre_tokens: list[int] | None = None # reuse of a policy's own simulation
    pre_dists: np.ndarray | None = None


class FixedLength:
    """Always draft exactly k tokens."""

    def __init__(self, k: int):
        if k < 1:
            raise ValueError("fixed draft length must be >= 1")
        self.k = k

    name = "fixed"

    def begin(self, ctx: PolicyContext) -> DraftPlan:
        return DraftPlan(target_len=self.k)


class PredictedLength:
    """Draft length from the learned predictor, clamped to [0, k_max]."""

    def __init__(self, model: LengthPredictor, k_max: int):
        self.model = model
        self.k_max = k_max

    name = "predicted"

    def begin(self, ctx: PolicyContext) -> DraftPlan:
        if self.model.d_in != ctx.lm.d_embed + ctx.lm.d_feature:
            raise ValueError("length predictor does not match the model dimensions")
        e = ctx.lm.emb[ctx.last_token]
        k = predict_length(self.model, e, ctx.last_feat, self.k_max)
        return DraftPlan(target_len=k, predicted_len=k)


class ThresholdStop:
    """Draft while the cumulative draft log-probability stays above theta."""

    def __init__(self, theta_log: float, k_max: int):
        if theta_log > 0:
            raise ValueError("theta_log is a log-probability, must be <= 0")
        self.theta_log = theta_log
        self.k_max = k_max

    name = "threshold"

    def begin(self, ctx: PolicyContext) -> DraftPlan:
        return DraftPlan(theta_log=self.theta_log, k_max=self.k_max)


class CombinedStop:
    """Predictor length joined with the threshold rule: keep the longer."""

    def __init__(self, model: LengthPredictor, theta_log: float, k_max: int):
        self.model = model
        self.theta_log = theta_log
        self.k_max = k_max

    name = "combined"

    def begin(self, ctx: PolicyContext) -> DraftPlan:
        e = ctx.lm.emb[ctx.last_token]
        k = predict_length(self.model, e, ctx.last_feat, self.k_max)
        return DraftPlan(
            predicted_len=k, theta_log=self.theta_log, k_max=self.k_max, combined=True
        )


def _plan_continue(plan: DraftPlan, step: int, cum_logprob: float) -> bool:
    if plan.target_len is not None:
        return step < plan.target_len
    if plan.combined:
        return combined_continue(
            step, plan.predicted_len, cum_logprob, plan.theta_log, plan.k_max
        )
    return ddd_continue(cum_logprob, plan.theta_log, step, plan.k_max)


def _run_draft(ctx: PolicyContext, plan: DraftPlan, mode: str, rng: Rng | None):
    """Generate this iteration's draft according to the plan."""
    lm = ctx.lm
    tokens: list[int] = []
    dists: list[np.ndarray] = []
    cum = 0.0
    t_cur, f_cur = ctx.anchor_token, ctx.anchor_feat
    step = 0
    while _plan_continue(plan, step, cum):
        if plan.pre_tokens is not None:
            t_next = plan.pre_tokens[step]
            dist = plan.pre_dists[step]
        else:
            f_cur = draft_feature_step(ctx.dh, t_cur, f_cur)
            dist = softmax(lm.w_head @ f_cur + lm.b_head)
            t_next = argmax_dist(dist) if mode == "greedy" else sample(dist, rng)
        tokens.append(t_next)
        dists.append(dist)
        cum += math.log(max(float(dist[t_next]), 1e-300))
        t_cur = t_next
        step += 1
    needs_cum = plan.theta_log is not None
    return tokens, np.asarray(dists).reshape(len(tokens), lm.vocab_size), (
        cum if needs_cum else None
    )


def decode(
    lm: TargetLM,
    dh: DraftHead,
    policy,
    prompt: list[int],
    max_tokens: int,
    mode: str = "greedy",
    rng: Rng | None = None,
    terminator: int | None = None,
) -> DecodeResult:
    """Speculative decode of up to ``max_tokens`` tokens past ``prompt``."""
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    if mode not in ("greedy", "stochastic"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "stochastic" and rng is None:
        raise ValueError("stochastic mode needs an rng")
    if dh.lm is not lm and dh.lm.vocab_size != lm.vocab_size:
        raise ValueError("draft head vocabulary does not match the target model")

    t_start = time.perf_counter()
    times = PhaseTimes()

    # Feature-only prompt pass; not counted as an iteration.
    t0 = time.perf_counter()
    _, feats = target_forward_batch(lm, prompt)
    times.target += time.perf_counter() - t0

    formal = list(prompt)
    output: list[int] = []
    traces: list[IterationTrace] = []
    # First draft seeds directly on the true prompt-end state; afterwards
    # the anchor is (bonus token, bridged feature).
    last_token, last_feat = prompt[-1], feats[-1]
    anchor_token, anchor_feat = last_token, last_feat
    anchor_is_true = True
    done = False

    while not done:
        ctx = PolicyContext(
            lm=lm,
            dh=dh,
            formal=formal,
            anchor_token=anchor_token,
            anchor_feat=anchor_feat,
            last_token=last_token,
            last_feat=last_feat,
        )
        t0 = time.perf_counter()
        plan = policy.begin(ctx)
        times.policy += time.perf_counter() - t0

        t0 = time.perf_counter()
        draft, draft_dists, cum_exit = _run_draft(ctx, plan, mode, rng)
        times.draft += time.perf_counter() - t0

        t0 = time.perf_counter()
        j = len(formal)
        dists, feats = target_forward_batch(lm, formal + draft)
        times.target += time.perf_counter() - t0
        if mode == "greedy":
            k = 0
            while k < len(draft) and draft[k] == argmax_dist(dists[j - 1 + k]):
                k += 1
            next_tok = argmax_dist(dists[j - 1 + k])
        else:
            rows = np.vstack(
                [dists[j - 1 : j - 1 + len(draft)], dists[j - 1 + len(draft)][None]]
            )
            k, next_tok = verify_stochastic_dists(rows, draft, draft_dists, rng)

        emitted = 0
        bonus_emitted = False
        for t in draft[:k]:
            output.append(t)
            emitted += 1
            if t == terminator or len(output) >= max_tokens:
                done = True
                break
        if not done:
            output.append(next_tok)
            emitted += 1
            bonus_emitted = True
            if next_tok == terminator or len(output) >= max_tokens:
                done = True

        traces.append(
            IterationTrace(
                drafted=len(draft),
                accepted=k,
                emitted=emitted,
                bonus_emitted=bonus_emitted,
                bonus_token=next_tok if bonus_emitted else None,
                predicted_len=plan.predicted_len,
                cum_logprob_exit=cum_exit,
            )
        )
        if done:
            break

        # Advance: the policy reads the last validated position's true
        # feature (already computed in this pass); the next draft anchors
        # on the bonus token with a bridged feature from the head.
        last_token = formal[j - 1] if k == 0 else draft[k - 1]
        last_feat = feats[j - 1 + k]
        formal = formal + draft[:k] + [next_tok]
        t0 = time.perf_counter()
        anchor_feat = draft_feature_step(dh, last_token, last_feat)
        anchor_token = next_tok
        anchor_is_true = False
        times.draft += time.perf_counter() - t0

    times.total = time.perf_counter() - t_start
    return DecodeResult(output=output, traces=traces, times=times)


def vanilla_ar(
    lm: TargetLM,
    prompt: list[int],
    max_tokens: int,
    mode: str = "greedy",
    rng: Rng | None = None,
    terminator: int | None = None,
) -> DecodeResult:
    """One token per target pass; the baseline every policy must match."""
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    if mode == "stochastic" and rng is None:
        raise ValueError("stochastic mode needs an rng")
    t_start = time.perf_counter()
    times = PhaseTimes()
    seq = list(prompt)
    output: list[int] = []
    traces: list[IterationTrace] = []
    for _ in range(max_tokens):
        t0 = time.perf_counter()
        dists, _ = target_forward_batch(lm, seq)
        times.target += time.perf_counter() - t0
        t = argmax_dist(dists[-1]) if mode == "greedy" else sample(dists[-1], rng)
        output.append(t)
        seq.append(t)
        traces.append(
            IterationTrace(
                drafted=0, accepted=0, emitted=1, bonus_emitted=True, bonus_token=t
            )
        )
        if terminator is not None and t == terminator:
            break
    times.total = time.perf_counter() - t_start
    return DecodeResult(output=output, traces=traces, times=times)


def dump_traces(result: DecodeResult, path: str | Path) -> None:
    """One JSON record per iteration."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, tr in enumerate(result.traces):
            fh.write(
                json.dumps(
                    {
                        "iter": i,
                        "drafted": tr.drafted,
                        "accepted": tr.accepted,
                        "bonus": tr.bonus_token,
                        "predicted_len": tr.predicted_len,
                        "cum_logprob_exit": tr.cum_logprob_exit,
                    }
                )
                + "\n"
            )
