"""Training algorithms: rollout collection, PPO, GRPO, and an MLE baseline.

Conventions that the tests pin down:

* Per-rollout seeds are a hash of (run seed, prompt id, running rollout
  index), so a batch is reproducible no matter how collection is scheduled.
* The per-token shaped reward is the terminal reward on the final step
  minus beta times the exact per-step KL to the frozen reference policy.
* Surrogate objectives sum over the tokens of a response and average over
  responses, matching a group-relative objective whose per-response
  coefficient multiplies the whole sequence log-probability. All updates
  are single plain gradient steps (one optimizer pass per collected batch).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import Prompt, PromptPool
from .errors import ConfigError, DataError, NumericError
from .policy import (
    FeatureSpec,
    PolicyParams,
    ReferencePolicy,
    _Ctx,
    _State,
    _log_softmax,
    _step_logits,
    accumulate_logprob_gradient,
    init_policy,
    save_checkpoint,
)
from .reward import RewardFeatureSpec, RewardModelParams, VerifierKind, rm_score, verify
from .util import derive_rng, rollout_seed, write_jsonl

ALGOS = ("ppo", "grpo", "mle")
RM_NORMS = ("none", "whiten")


@dataclass
class TrainConfig:
    algo: str = "ppo"
    environment: str = "open-train"
    epochs: int = 15
    lr_actor: float = 1e-3
    lr_critic: float = 1e-2
    batch_size: int = 64
    group_size: int = 4
    kl_beta: float = 0.02
    clip_epsilon: float = 0.2
    adv_epsilon: float = 1e-8
    gae_gamma: float = 1.0
    gae_lambda: float = 0.95
    max_prompt_len: int = 16
    max_response_len: int = 32
    seed: int = 0
    rm_norm: str = "none"
    checkpoint_every: int = 5
    ref_refresh_every: int = 0

    def validate(self) -> None:
        if self.algo not in ALGOS:
            raise ConfigError(f"unknown algo {self.algo!r} (choose from {ALGOS})")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 0:
            raise ConfigError("batch_size must be >= 0")
        if self.algo == "grpo" and self.group_size < 2:
            raise ConfigError(
                f"group_size must be >= 2 for grpo (got {self.group_size}); "
                "group-relative advantages are undefined for a single sample"
            )
        if self.kl_beta < 0:
            raise ConfigError("kl_beta must be >= 0")
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ConfigError("clip_epsilon must lie in (0, 1)")
        if self.adv_epsilon <= 0:
            raise ConfigError("adv_epsilon must be > 0")
        if not 0.0 <= self.gae_gamma <= 1.0 or not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError("gae_gamma and gae_lambda must lie in [0, 1]")
        if self.lr_actor <= 0 or self.lr_critic <= 0:
            raise ConfigError("learning rates must be positive")
        if self.max_prompt_len < 1 or self.max_response_len < 2:
            raise ConfigError("sequence limits too small")
        if self.rm_norm not in RM_NORMS:
            raise ConfigError(f"unknown rm_norm {self.rm_norm!r} (choose from {RM_NORMS})")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.ref_refresh_every < 0:
            raise ConfigError("ref_refresh_every must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Reward sources


@dataclass(frozen=True)
class VerifierSource:
    verifier: VerifierKind


@dataclass(frozen=True)
class RewardModelSource:
    rm: RewardModelParams
    feat: RewardFeatureSpec


RewardSource = VerifierSource | RewardModelSource


def _check_reward_source(pool: PromptPool, source: RewardSource) -> None:
    if pool.kind == "in_domain" and not isinstance(source, VerifierSource):
        raise ConfigError(f"pool {pool.name} is verifiable; it needs a verifier reward source")
    if pool.kind == "open" and not isinstance(source, RewardModelSource):
        raise ConfigError(f"pool {pool.name} is open-ended; it needs a reward-model source")
    if pool.kind == "mixed":
        raise ConfigError(f"pool {pool.name} is mixed; training pools must be open or in_domain")


class RunningStat:
    """Streaming mean/std used by reward whitening."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, values: Sequence[float]) -> None:
        for v in values:
            self.n += 1
            d = v - self.mean
            self.mean += d / self.n
            self.m2 += d * (v - self.mean)

    @property
    def std(self) -> float:
        return math.sqrt(self.m2 / self.n) if self.n else 0.0


# ---------------------------------------------------------------------------
# Rollouts


@dataclass
class Rollout:
    prompt_id: str
    response: tuple[int, ...]
    logprobs: np.ndarray          # behavior log-probs, one per step
    kls: np.ndarray               # exact per-step KL to the reference
    reward: float                 # raw terminal reward
    shaped: np.ndarray            # terminal (possibly normalized) minus beta*KL
    crit_feats: np.ndarray        # (T, critic_dim) prefix features
    values: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __post_init__(self):
        T = len(self.response)
        for name in ("logprobs", "kls", "shaped"):
            if len(getattr(self, name)) != T:
                raise DataError(f"rollout {self.prompt_id}: {name} length != response length")
        if self.crit_feats.shape[0] != T:
            raise DataError(f"rollout {self.prompt_id}: crit_feats rows != response length")


@dataclass
class GroupRollout:
    prompt_id: str
    rollouts: tuple[Rollout, ...]
    advantages: np.ndarray

    def __post_init__(self):
        if len(self.rollouts) < 2:
            raise DataError("a rollout group needs at least 2 members")
        if len(self.advantages) != len(self.rollouts):
            raise DataError("group advantages must match the group size")
        if not np.allclose(self.advantages.mean(), 0.0, atol=1e-9):
            if np.any(self.advantages != 0.0):
                raise DataError("group advantages must be mean-zero (or all zero)")


def grpo_advantages(rewards: Sequence[float], adv_epsilon: float = 1e-8) -> np.ndarray:
    """Group-relative advantages: (r - mean) / (population std + epsilon).

    All-equal groups get all-zero advantages. Adding a constant to every
    reward leaves the result unchanged.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise DataError("grpo_advantages needs at least 2 rewards")
    if adv_epsilon <= 0:
        raise ConfigError("adv_epsilon must be > 0")
    if np.all(r == r[0]):
        return np.zeros(r.size)
    mean = r.mean()
    std = math.sqrt(float(np.mean((r - mean) ** 2)))
    adv = (r - mean) / (std + adv_epsilon)
    # the true mean is zero; subtract the float residual so the invariant
    # holds even when rewards differ by less than the normalizer epsilon
    return adv - adv.mean()


# ---------------------------------------------------------------------------
# Critic features

CRITIC_BASE_DIM = 4


def critic_dim(spec: FeatureSpec) -> int:
    return CRITIC_BASE_DIM + len(spec.domains)


@dataclass
class ValueParams:
    weights: np.ndarray
    spec_id: str

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not np.all(np.isfinite(self.weights)):
            raise NumericError("critic weights contain non-finite values")


def init_critic(spec: FeatureSpec) -> ValueParams:
    return ValueParams(np.zeros(critic_dim(spec)), f"value-{spec.spec_id}")


def _critic_features(spec: FeatureSpec, ctx: _Ctx, state: _State, pos: int) -> np.ndarray:
    psi = np.zeros(critic_dim(spec))
    psi[0] = 1.0
    psi[1] = pos / spec.max_response_len
    psi[2] = 1.0 if state.marker_seen else 0.0
    n_req = len(ctx.required_ids)
    psi[3] = (n_req - len(state.uncovered)) / n_req if n_req else 0.0
    psi[CRITIC_BASE_DIM + (ctx.dom_row - spec.domain_base) // spec.V] = 1.0
    return psi


# ---------------------------------------------------------------------------
# Collection


def _terminal_reward(
    spec: FeatureSpec, prompt: Prompt, response: list[int], source: RewardSource
) -> float:
    if isinstance(source, VerifierSource):
        return float(verify(spec.vocab, prompt, response, source.verifier))
    return rm_score(source.rm, source.feat, prompt, response)


def _rollout_once(
    policy: PolicyParams,
    ref: ReferencePolicy,
    spec: FeatureSpec,
    prompt: Prompt,
    seed: int,
    source: RewardSource,
) -> tuple[list[int], np.ndarray, np.ndarray, np.ndarray, float]:
    """Sample one response, recording behavior log-probs, KLs, critic features."""
    rng = derive_rng("sample", seed)
    ctx = _Ctx(spec, prompt)
    state = _State(ctx)
    eos = spec.vocab.eos_id
    response: list[int] = []
    logprobs: list[float] = []
    kls: list[float] = []
    feats: list[np.ndarray] = []
    for pos in range(spec.max_response_len):
        feats.append(_critic_features(spec, ctx, state, pos))
        if pos == spec.max_response_len - 1:
            response.append(eos)
            logprobs.append(0.0)
            kls.append(0.0)
            break
        lp = _log_softmax(_step_logits(policy.weights, spec, ctx, state))
        lq = _log_softmax(_step_logits(ref.params.weights, spec, ctx, state))
        p = np.exp(lp)
        kls.append(max(float(np.dot(p, lp - lq)), 0.0))
        cum = np.cumsum(p)
        u = rng.random() * cum[-1]
        tok = min(int(np.searchsorted(cum, u, side="right")), spec.V - 1)
        response.append(tok)
        logprobs.append(float(lp[tok]))
        if tok == eos:
            break
        state.advance(spec, tok)
    reward = _terminal_reward(spec, prompt, response, source)
    return response, np.array(logprobs), np.array(kls), np.stack(feats), reward


def _shape_rewards(kls: np.ndarray, terminal: float, beta: float) -> np.ndarray:
    shaped = -beta * kls
    shaped[-1] += terminal
    return shaped


def collect_rollouts(
    policy: PolicyParams,
    ref: ReferencePolicy,
    spec: FeatureSpec,
    pool: PromptPool,
    source: RewardSource,
    count: int,
    run_seed: int,
    kl_beta: float,
    start_index: int = 0,
    normalizer: RunningStat | None = None,
) -> list[Rollout]:
    """count rollouts over the pool in round-robin prompt order.

    The rollout at running index i is seeded by (run_seed, prompt id, i), so
    the batch content does not depend on scheduling or thread count.
    """
    if count < 0:
        raise ConfigError("rollout count must be >= 0")
    if len(pool) == 0:
        raise DataError(f"pool {pool.name} is empty; nothing to collect")
    _check_reward_source(pool, source)
    raw: list[tuple] = []
    for i in range(count):
        idx = start_index + i
        prompt = pool.prompts[idx % len(pool)]
        seed = rollout_seed(run_seed, prompt.id, idx)
        raw.append((prompt, *_rollout_once(policy, ref, spec, prompt, seed, source)))
    rewards = [r[-1] for r in raw]
    scaled = list(rewards)
    if normalizer is not None:
        normalizer.update(rewards)
        scaled = [(r - normalizer.mean) / (normalizer.std + 1e-8) for r in rewards]
    out = []
    for (prompt, response, lps, kls, feats, reward), s in zip(raw, scaled):
        out.append(
            Rollout(
                prompt_id=prompt.id,
                response=tuple(response),
                logprobs=lps,
                kls=kls,
                reward=reward,
                shaped=_shape_rewards(kls, s, kl_beta),
                crit_feats=feats,
            )
        )
    return out


def collect_group_rollouts(
    policy: PolicyParams,
    ref: ReferencePolicy,
    spec: FeatureSpec,
    pool: PromptPool,
    source: RewardSource,
    n_prompts: int,
    group_size: int,
    run_seed: int,
    adv_epsilon: float,
    start_index: int = 0,
) -> list[GroupRollout]:
    """n_prompts groups of exactly group_size responses each."""
    if group_size < 2:
        raise ConfigError("group_size must be >= 2")
    if len(pool) == 0:
        raise DataError(f"pool {pool.name} is empty; nothing to collect")
    _check_reward_source(pool, source)
    groups = []
    for i in range(n_prompts):
        prompt = pool.prompts[(start_index // group_size + i) % len(pool)]
        members = []
        for j in range(group_size):
            idx = start_index + i * group_size + j
            seed = rollout_seed(run_seed, prompt.id, idx)
            response, lps, kls, feats, reward = _rollout_once(policy, ref, spec, prompt, seed, source)
            members.append(
                Rollout(
                    prompt_id=prompt.id,
                    response=tuple(response),
                    logprobs=lps,
                    kls=kls,
                    reward=reward,
                    shaped=_shape_rewards(kls, reward, 0.0),
                    crit_feats=feats,
                )
            )
        advs = grpo_advantages([m.reward for m in members], adv_epsilon)
        groups.append(GroupRollout(prompt.id, tuple(members), advs))
    return groups


# ---------------------------------------------------------------------------
# Updates


@dataclass
class UpdateStats:
    mean_reward: float
    mean_kl: float
    mean_resp_len: float
    clip_frac: float = 0.0


def _batch_stats(rollouts: Sequence[Rollout], clip_frac: float = 0.0) -> UpdateStats:
    all_kls = np.concatenate([r.kls for r in rollouts])
    return UpdateStats(
        mean_reward=float(np.mean([r.reward for r in rollouts])),
        mean_kl=float(all_kls.mean()),
        mean_resp_len=float(np.mean([len(r.response) for r in rollouts])),
        clip_frac=clip_frac,
    )


def gae(shaped: np.ndarray, values: np.ndarray, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation with terminal value zero."""
    T = len(shaped)
    adv = np.zeros(T)
    last = 0.0
    for t in reversed(range(T)):
        v_next = values[t + 1] if t + 1 < T else 0.0
        delta = shaped[t] + gamma * v_next - values[t]
        last = delta + gamma * lam * last
        adv[t] = last
    return adv, adv + values


def ppo_update(
    policy: PolicyParams,
    critic: ValueParams,
    rollouts: Sequence[Rollout],
    config: TrainConfig,
    spec: FeatureSpec,
    prompts_by_id: dict[str, Prompt],
) -> tuple[PolicyParams, ValueParams, UpdateStats]:
    """One clipped-surrogate ascent step plus one critic regression step.

    The surrogate is summed over a response's tokens and averaged over
    responses; gradient flows only through tokens where the unclipped
    branch attains the min.
    """
    if not rollouts:
        raise DataError("ppo_update needs at least one rollout")
    grad = np.zeros(spec.total_dim)
    cgrad = np.zeros_like(critic.weights)
    n_tokens = 0
    n_clipped = 0
    sq_err = 0.0
    eps = config.clip_epsilon
    for rollout in rollouts:
        prompt = prompts_by_id[rollout.prompt_id]
        values = rollout.crit_feats @ critic.weights
        adv, rets = gae(rollout.shaped, values, config.gae_gamma, config.gae_lambda)
        rollout.values, rollout.advantages, rollout.returns = values, adv, rets

        ctx = _Ctx(spec, prompt)
        state = _State(ctx)
        T = len(rollout.response)
        coeffs = np.zeros(T)
        for pos, tok in enumerate(rollout.response):
            if pos == spec.max_response_len - 1:
                break
            lp = _log_softmax(_step_logits(policy.weights, spec, ctx, state))
            ratio = math.exp(float(lp[tok]) - float(rollout.logprobs[pos]))
            if abs(ratio - 1.0) > eps:
                n_clipped += 1
            unclipped = ratio * adv[pos]
            clipped = min(max(ratio, 1.0 - eps), 1.0 + eps) * adv[pos]
            if unclipped <= clipped:
                coeffs[pos] = adv[pos] * ratio
            state.advance(spec, tok)
        n_tokens += T
        accumulate_logprob_gradient(grad, policy, spec, prompt, rollout.response, step_coeffs=coeffs)

        err = values - rets
        sq_err += float(np.dot(err, err))
        cgrad += rollout.crit_feats.T @ err

    new_policy = PolicyParams(policy.weights + config.lr_actor * grad / len(rollouts), policy.spec_id)
    new_critic = ValueParams(critic.weights - config.lr_critic * cgrad / n_tokens, critic.spec_id)
    stats = _batch_stats(rollouts, clip_frac=n_clipped / max(n_tokens, 1))
    return new_policy, new_critic, stats


def grpo_update(
    policy: PolicyParams,
    groups: Sequence[GroupRollout],
    config: TrainConfig,
    spec: FeatureSpec,
    prompts_by_id: dict[str, Prompt],
) -> tuple[PolicyParams, UpdateStats]:
    """Ascend the group-relative objective: mean over prompts of
    (1/G) sum_i advantage_i * logprob(response_i). No critic, no KL term."""
    if not groups:
        raise DataError("grpo_update needs at least one group")
    grad = np.zeros(spec.total_dim)
    for group in groups:
        prompt = prompts_by_id[group.prompt_id]
        for rollout, adv in zip(group.rollouts, group.advantages):
            if adv == 0.0:
                continue
            coeffs = np.full(len(rollout.response), adv / len(group.rollouts))
            accumulate_logprob_gradient(grad, policy, spec, prompt, rollout.response, step_coeffs=coeffs)
    new_policy = PolicyParams(policy.weights + config.lr_actor * grad / len(groups), policy.spec_id)
    flat = [r for g in groups for r in g.rollouts]
    return new_policy, _batch_stats(flat)


def gold_response(spec: FeatureSpec, prompt: Prompt) -> tuple[int, ...]:
    """Canonical supervised target: marker, gold tokens, end-of-sequence."""
    if prompt.gold is None:
        raise DataError(f"prompt {prompt.id} has no gold; cannot build a supervised target")
    resp = (spec.vocab.marker_id, *prompt.gold, spec.vocab.eos_id)
    if len(resp) > spec.max_response_len:
        raise DataError(f"gold response for {prompt.id} exceeds the response cap")
    return resp


def mle_loss_and_grad(
    policy: PolicyParams, spec: FeatureSpec, items: Sequence[tuple[Prompt, tuple[int, ...]]]
) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of target responses, with its gradient."""
    if not items:
        raise DataError("mle needs at least one (prompt, response) item")
    from .policy import sequence_logprob

    grad = np.zeros(spec.total_dim)
    total = 0.0
    for prompt, response in items:
        total += sequence_logprob(policy, spec, prompt, list(response))
        accumulate_logprob_gradient(grad, policy, spec, prompt, response)
    n = len(items)
    return -total / n, -grad / n


def mle_update(
    policy: PolicyParams,
    spec: FeatureSpec,
    items: Sequence[tuple[Prompt, tuple[int, ...]]],
    lr: float,
    steps: int = 1,
) -> tuple[PolicyParams, float]:
    """Gradient descent on the supervised NLL; returns final mean NLL.

    steps=0 evaluates the loss without touching the policy.
    """
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    if steps == 0:
        loss, _ = mle_loss_and_grad(policy, spec, items)
        return policy, loss
    loss = math.nan
    for _ in range(steps):
        loss, grad = mle_loss_and_grad(policy, spec, items)
        policy = PolicyParams(policy.weights - lr * grad, policy.spec_id)
    return policy, loss


# ---------------------------------------------------------------------------
# Training loops


@dataclass
class RunResult:
    config: TrainConfig
    final_policy: PolicyParams
    ref: ReferencePolicy
    log: list[dict] = field(default_factory=list)
    checkpoints: dict[int, PolicyParams] = field(default_factory=dict)


def train_run(
    config: TrainConfig,
    spec: FeatureSpec,
    pool: PromptPool,
    source: RewardSource | None,
    *,
    init: PolicyParams | None = None,
    eval_fn: Callable[[PolicyParams], dict] | None = None,
    out_dir: str | Path | None = None,
) -> RunResult:
    """Run epochs x (collect, update) from a seeded or given initial policy.

    The reference policy is snapshotted from the initial policy before the
    first epoch. Checkpoints (and optional eval snapshots) happen every
    checkpoint_every epochs and always at the final epoch. With an out_dir,
    checkpoints land in out_dir/checkpoints and the per-epoch records in
    out_dir/events.jsonl.
    """
    config.validate()
    if config.max_response_len != spec.max_response_len:
        raise ConfigError(
            f"config max_response_len {config.max_response_len} "
            f"!= feature spec {spec.max_response_len}"
        )
    if config.algo in ("ppo", "grpo") and source is None:
        raise ConfigError(f"{config.algo} requires a reward source")
    policy = init.copy() if init is not None else init_policy(spec, config.seed)
    ref = ReferencePolicy(policy)
    critic = init_critic(spec)
    normalizer = RunningStat() if config.rm_norm == "whiten" else None
    prompts_by_id = {p.id: p for p in pool.prompts}

    out_path = Path(out_dir) if out_dir is not None else None
    checkpoints: dict[int, PolicyParams] = {0: policy.copy()}
    if out_path is not None:
        save_checkpoint(policy, spec, out_path / "checkpoints" / "epoch-0000.json")

    log: list[dict] = []
    rollout_index = 0
    for epoch in range(1, config.epochs + 1):
        if config.batch_size == 0:
            # an empty batch is a legal no-op epoch: nothing collected,
            # nothing updated, but the log still gets its record
            stats = UpdateStats(mean_reward=0.0, mean_kl=0.0, mean_resp_len=0.0)
        elif config.algo == "mle":
            items = []
            for i in range(config.batch_size):
                prompt = pool.prompts[(rollout_index + i) % len(pool)]
                items.append((prompt, gold_response(spec, prompt)))
            rollout_index += config.batch_size
            policy, nll = mle_update(policy, spec, items, config.lr_actor, steps=1)
            stats = UpdateStats(
                mean_reward=-nll,
                mean_kl=0.0,
                mean_resp_len=float(np.mean([len(r) for _, r in items])),
            )
        elif config.algo == "ppo":
            rollouts = collect_rollouts(
                policy, ref, spec, pool, source, config.batch_size, config.seed,
                config.kl_beta, start_index=rollout_index, normalizer=normalizer,
            )
            rollout_index += config.batch_size
            policy, critic, stats = ppo_update(policy, critic, rollouts, config, spec, prompts_by_id)
        else:
            groups = collect_group_rollouts(
                policy, ref, spec, pool, source, config.batch_size, config.group_size,
                config.seed, config.adv_epsilon, start_index=rollout_index,
            )
            rollout_index += config.batch_size * config.group_size
            policy, stats = grpo_update(policy, groups, config, spec, prompts_by_id)

        if config.ref_refresh_every and epoch % config.ref_refresh_every == 0:
            ref = ReferencePolicy(policy)

        record = {
            "epoch": epoch,
            "algo": config.algo,
            "mean_reward": stats.mean_reward,
            "mean_kl": stats.mean_kl,
            "mean_resp_len": stats.mean_resp_len,
            "clip_frac": stats.clip_frac,
        }
        if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
            checkpoints[epoch] = policy.copy()
            if out_path is not None:
                save_checkpoint(policy, spec, out_path / "checkpoints" / f"epoch-{epoch:04d}.json")
            if eval_fn is not None:
                record["eval"] = eval_fn(policy)
        log.append(record)

    if out_path is not None:
        write_jsonl(out_path / "events.jsonl", log)
    return RunResult(config=config, final_policy=policy, ref=ref, log=log, checkpoints=checkpoints)


@dataclass
class TwoStageResult:
    stage1: RunResult
    stage2: RunResult
    log: list[dict] = field(default_factory=list)


def two_stage_run(
    config1: TrainConfig,
    config2: TrainConfig,
    spec: FeatureSpec,
    pool1: PromptPool,
    source1: RewardSource | None,
    pool2: PromptPool,
    source2: RewardSource | None,
    *,
    eval_fn: Callable[[PolicyParams], dict] | None = None,
    out_dir: str | Path | None = None,
) -> TwoStageResult:
    """Stage 2 initializes from stage 1's final policy and re-snapshots the
    reference, so its KL anchor is the stage-1 result, not the raw base."""
    out_path = Path(out_dir) if out_dir is not None else None
    r1 = train_run(
        config1, spec, pool1, source1, eval_fn=eval_fn,
        out_dir=None if out_path is None else out_path / "stage1",
    )
    r2 = train_run(
        config2, spec, pool2, source2, init=r1.final_policy, eval_fn=eval_fn,
        out_dir=None if out_path is None else out_path / "stage2",
    )
    log = [{**rec, "stage": 1} for rec in r1.log] + [{**rec, "stage": 2} for rec in r2.log]
    if out_path is not None:
        write_jsonl(out_path / "events.jsonl", log)
    return TwoStageResult(stage1=r1, stage2=r2, log=log)
