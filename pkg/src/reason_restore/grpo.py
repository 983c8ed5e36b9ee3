"""Group relative policy optimization of the restoration policy.

Each step draws a group of candidate parameter vectors around the policy
mean, restores the degraded input with each, and scores them twice: by MSE
against the clean image (turned into a softmax "fidelity" distribution) and
by severity reduction under the frozen diagnoser (the reward). The loss
``-(1/N) sum_k A_k log P(k)`` is differentiated with respect to the mean by
central finite differences with the candidate noise and advantages held
fixed.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diagnose import DiagnosticReport, diagnose
from .imgcore import Rng, as_image, mse, psnr, ssim
from .restore import (DEFAULT_EXPLORATION_STD, LOWER, UPPER, RestorationParams, RestorationPolicy,
                      candidate_vectors, prior_params, restore, sample_noise)

ADVANTAGE_EPS = 1e-12
TAU_FLOOR = 1e-6
STEP_STREAM = 7


def fidelity_log_probs(mse_values, tau: float) -> np.ndarray:
    e = np.asarray(mse_values, dtype=np.float64)
    if e.ndim != 1 or e.size < 2:
        raise ValueError("need a 1-D group of at least 2 MSE values")
    if not np.all(np.isfinite(e)):
        raise ValueError("MSE values must be finite")
    if np.any(e < 0):
        raise ValueError("MSE values must be nonnegative")
    if not tau > 0 or not math.isfinite(tau):
        raise ValueError(f"temperature must be positive and finite, got {tau}")
    z = -e / tau
    zmax = z.max()
    return z - (zmax + math.log(np.exp(z - zmax).sum()))


def adaptive_tau(mse_values) -> float:
    return max(float(np.mean(mse_values)), TAU_FLOOR)


def ebm_oracle_check(mse_values, sigma: float) -> np.ndarray:
    """Gibbs probabilities exp(-E/(2 sigma^2)) / Z summed in 50-digit arithmetic.

    Independent of ``fidelity_log_probs``: no log-sum-exp shift, no float64
    exponentials, so underflow cannot hide a normalization error.
    """
    import mpmath

    if sigma <= 0:
        raise ValueError("sigma must be positive")
    with mpmath.workdps(50):
        two_s2 = 2 * mpmath.mpf(float(sigma)) ** 2
        weights = [mpmath.exp(-mpmath.mpf(float(e)) / two_s2) for e in mse_values]
        z = mpmath.fsum(weights)
        return np.array([float(w / z) for w in weights])


def diagnostic_reward(input_report: DiagnosticReport, candidate_report: DiagnosticReport) -> float:
    return float(sum(a - b for a, b in zip(input_report.severity, candidate_report.severity)))


def advantages(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("advantages need a group of at least 2 rewards")
    std = r.std()
    if std <= ADVANTAGE_EPS:
        return np.zeros_like(r)
    return (r - r.mean()) / std


@dataclass
class GrpoGroup:
    candidates: list[RestorationParams]
    images: list[np.ndarray]
    mse: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray
    tau: float
    eps: np.ndarray | None = None
    reports: list[DiagnosticReport] = field(default_factory=list)


def grpo_loss(group: GrpoGroup) -> float:
    a = np.asarray(group.advantages, dtype=np.float64)
    lp = np.asarray(group.log_probs, dtype=np.float64)
    return float(-np.mean(a * lp))


@dataclass
class GroupInputs:
    """What a loss evaluation holds fixed: images, candidate noise, advantages."""

    degraded: np.ndarray
    clean: np.ndarray
    eps: np.ndarray
    advantages: np.ndarray
    tau: float | None = None  # None: adaptive


def _group_mse(mean: np.ndarray, std: np.ndarray, inputs: GroupInputs) -> np.ndarray:
    vecs = candidate_vectors(RestorationPolicy(mean, std), inputs.eps)
    return np.array([mse(restore(inputs.degraded, RestorationParams.from_vector(v)), inputs.clean)
                     for v in vecs])


def loss_at(mean: np.ndarray, std: np.ndarray, inputs: GroupInputs) -> float:
    """GRPO loss as a function of the policy mean (temperature follows the MSEs)."""
    e = _group_mse(mean, std, inputs)
    tau = adaptive_tau(e) if inputs.tau is None else inputs.tau
    return float(-np.mean(inputs.advantages * fidelity_log_probs(e, tau)))


def loss_gradient(policy: RestorationPolicy, inputs: GroupInputs, fd_step: float = 1e-4) -> np.ndarray:
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    grad = np.zeros_like(policy.mean)
    if not np.any(inputs.advantages):
        return grad
    for i in range(policy.mean.size):
        step = np.zeros_like(policy.mean)
        step[i] = fd_step
        hi = loss_at(policy.mean + step, policy.exploration_std, inputs)
        lo = loss_at(policy.mean - step, policy.exploration_std, inputs)
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise FloatingPointError(f"non-finite loss while differentiating component {i}")
        grad[i] = (hi - lo) / (2.0 * fd_step)
    return grad


# --- training loop -------------------------------------------------------------------

@dataclass
class TrainConfig:
    group_size: int = 8
    tau: float | None = None  # None: adaptive
    learning_rate: float = 1e-3
    steps: int = 200
    seed: int = 0
    fd_step: float = 1e-4
    batch_size: int = 1
    exploration_std: tuple[float, ...] = tuple(DEFAULT_EXPLORATION_STD)

    def validate(self) -> None:
        if self.group_size < 2:
            raise ValueError(f"group_size must be >= 2, got {self.group_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.tau is not None and not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.fd_step <= 0:
            raise ValueError("fd_step must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(self.exploration_std) != len(LOWER) or min(self.exploration_std) <= 0:
            raise ValueError("exploration_std must be 7 positive values")


@dataclass
class StepLog:
    step: int
    loss: float
    mean_reward: float
    mean_psnr: float
    mean_ssim: float

    def line(self) -> str:
        return f"{self.step}\t{self.loss!r}\t{self.mean_reward!r}\t{self.mean_psnr!r}\t{self.mean_ssim!r}"


@dataclass
class TrainState:
    """Policy plus history. ``policy.mean`` is an offset added to each
    image's report-seeded prior, so one state serves every input."""

    policy: RestorationPolicy
    config: TrainConfig
    step: int = 0
    reward_history: list[float] = field(default_factory=list)
    logs: list[StepLog] = field(default_factory=list)

    @classmethod
    def fresh(cls, config: TrainConfig) -> TrainState:
        return cls(RestorationPolicy(np.zeros(len(LOWER)), np.array(config.exploration_std)), config)


@dataclass
class Sample:
    degraded: np.ndarray
    clean: np.ndarray
    report: DiagnosticReport | None = None

    def __post_init__(self):
        self.degraded = as_image(self.degraded)
        self.clean = as_image(self.clean)
        if self.report is None:
            self.report = diagnose(self.degraded)


def effective_policy(offset: RestorationPolicy, report: DiagnosticReport) -> RestorationPolicy:
    return RestorationPolicy(prior_params(report).to_vector() + offset.mean, offset.exploration_std)


def restore_with(offset: RestorationPolicy, sample: Sample) -> np.ndarray:
    return restore(sample.degraded, effective_policy(offset, sample.report).params)


def rollout(policy: RestorationPolicy, sample: Sample, eps: np.ndarray, tau: float | None) -> GrpoGroup:
    """Restore, score and rank one group drawn with noise ``eps``."""
    vecs = candidate_vectors(policy, eps)
    cands = [RestorationParams.from_vector(v) for v in vecs]
    images = [restore(sample.degraded, c) for c in cands]
    errors = np.array([mse(im, sample.clean) for im in images])
    t = adaptive_tau(errors) if tau is None else tau
    reports = [diagnose(im) for im in images]
    rewards = np.array([diagnostic_reward(sample.report, r) for r in reports])
    return GrpoGroup(cands, images, errors, fidelity_log_probs(errors, t), rewards,
                     advantages(rewards), t, eps, reports)


def train_step(state: TrainState, dataset: list[Sample]) -> StepLog:
    cfg = state.config
    gen = Rng(cfg.seed, (STEP_STREAM, state.step)).generator()
    picks = gen.integers(0, len(dataset), size=cfg.batch_size)
    grad = np.zeros_like(state.policy.mean)
    losses, rewards, psnrs, ssims = [], [], [], []
    for b, idx in enumerate(picks):
        sample = dataset[int(idx)]
        eps = sample_noise(Rng(cfg.seed, (STEP_STREAM, state.step, b + 1)), cfg.group_size)
        policy = effective_policy(state.policy, sample.report)
        group = rollout(policy, sample, eps, cfg.tau)
        inputs = GroupInputs(sample.degraded, sample.clean, eps, group.advantages, cfg.tau)
        if cfg.learning_rate > 0:
            grad += loss_gradient(policy, inputs, cfg.fd_step)
        losses.append(grpo_loss(group))
        rewards.append(float(group.rewards.mean()))
        psnrs.append(float(np.mean([psnr(im, sample.clean) for im in group.images])))
        ssims.append(float(np.mean([ssim(im, sample.clean) for im in group.images])))
    grad /= cfg.batch_size
    span = UPPER - LOWER
    state.policy.mean = np.clip(state.policy.mean - cfg.learning_rate * grad, -span, span)
    log = StepLog(state.step, float(np.mean(losses)), float(np.mean(rewards)),
                  float(np.mean(psnrs)), float(np.mean(ssims)))
    state.step += 1
    state.reward_history.append(log.mean_reward)
    state.logs.append(log)
    return log


def train(dataset: list[Sample], config: TrainConfig, state: TrainState | None = None,
          on_step=None) -> TrainState:
    """Run ``config.steps`` total steps (resuming ``state`` if given).

    ``on_step(state, log)`` is called after every completed step.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    config.validate()
    state = state or TrainState.fresh(config)
    while state.step < config.steps:
        log = train_step(state, dataset)
        if on_step is not None:
            on_step(state, log)
    return state


# --- checkpoints -------------------------------------------------------------------------

CHECKPOINT_VERSION = 1
CHECKPOINT_HEADER = "# reason-restore GRPO checkpoint"


class CheckpointError(ValueError):
    pass


def _vec(values) -> str:
    return ", ".join(repr(float(v)) for v in values)


def checkpoint_text(state: TrainState) -> str:
    """Key/value form: one ``key = value`` per line, floats in repr.

    The rng state is (seed, next step): every step's randomness is derived
    from that pair alone.
    """
    cfg = state.config
    pairs = [
        ("version", str(CHECKPOINT_VERSION)),
        ("step", str(state.step)),
        ("mean", _vec(state.policy.mean)),
        ("exploration_std", _vec(state.policy.exploration_std)),
        ("config.group_size", str(cfg.group_size)),
        ("config.tau", "adaptive" if cfg.tau is None else repr(float(cfg.tau))),
        ("config.learning_rate", repr(float(cfg.learning_rate))),
        ("config.steps", str(cfg.steps)),
        ("config.seed", str(cfg.seed)),
        ("config.fd_step", repr(float(cfg.fd_step))),
        ("config.batch_size", str(cfg.batch_size)),
        ("rng.seed", str(cfg.seed)),
        ("rng.next_step", str(state.step)),
        ("reward_history", _vec(state.reward_history)),
    ]
    return CHECKPOINT_HEADER + "\n" + "".join(f"{k} = {v}\n" for k, v in pairs)


def parse_checkpoint(text: str) -> TrainState:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise CheckpointError(f"line {lineno}: expected 'key = value', got {line!r}")
        values[key] = value
    version = values.get("version")
    if version != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"unsupported checkpoint version {version!r} (expected {CHECKPOINT_VERSION})")

    def floats(key):
        raw = values[key].strip()
        return [float(x) for x in raw.split(",")] if raw else []

    try:
        tau = values["config.tau"]
        config = TrainConfig(
            group_size=int(values["config.group_size"]),
            tau=None if tau == "adaptive" else float(tau),
            learning_rate=float(values["config.learning_rate"]),
            steps=int(values["config.steps"]),
            seed=int(values["config.seed"]),
            fd_step=float(values["config.fd_step"]),
            batch_size=int(values["config.batch_size"]),
            exploration_std=tuple(floats("exploration_std")),
        )
        step = int(values["step"])
        history = floats("reward_history")
        policy = RestorationPolicy(np.array(floats("mean")), np.array(config.exploration_std))
        if int(values["rng.seed"]) != config.seed or int(values["rng.next_step"]) != step:
            raise CheckpointError("rng state disagrees with config seed or step")
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing key {exc}") from None
    except CheckpointError:
        raise
    except ValueError as exc:
        raise CheckpointError(f"malformed checkpoint value: {exc}") from None
    if len(history) != step:
        raise CheckpointError(f"reward_history has {len(history)} entries for step {step}")
    return TrainState(policy=policy, config=config, step=step, reward_history=history)


def write_checkpoint(path, state: TrainState) -> None:
    """Atomic write: a crash leaves the previous checkpoint intact."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(checkpoint_text(state), encoding="utf-8")
    os.replace(tmp, path)


def read_checkpoint(path) -> TrainState:
    return parse_checkpoint(Path(path).read_text(encoding="utf-8"))
