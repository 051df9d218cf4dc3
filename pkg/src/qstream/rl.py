"""Actor-critic bitrate learning, built from scratch on numpy.

The policy and value networks are two-hidden-layer MLPs (leaky ReLU). A
per-chunk observation is encoded into a fixed, scaled vector; the actor head
is a softmax over the ladder, the critic a scalar value. Training runs
asynchronous episode workers against a shared parameter server: each worker
plays rollout segments, computes n-step advantages bootstrapped by the
critic, and pushes gradient ascent updates

    actor  += lr_a * sum_t [ grad log pi(a_t|s_t) * A_t + phi * grad H(s_t) ]
    critic += lr_c * sum_t [ 2 * A_t * grad V(s_t) ]          (target frozen)

with the entropy weight phi decayed linearly over the run. A single worker
runs the same math serially and is bit-reproducible.
"""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .abr import Observation, Policy
from .player import VideoManifest, advance_buffer, download_chunk

__all__ = [
    "ENCODING_VERSION",
    "encode_state",
    "state_dim",
    "init_mlp",
    "actor_probs",
    "critic_value",
    "advantages",
    "actor_gradients",
    "critic_gradients",
    "ParameterServer",
    "SessionEnv",
    "TrainConfig",
    "TrainResult",
    "train",
    "learned_policy",
    "save_checkpoint",
    "load_checkpoint",
    "write_curve",
    "CheckpointError",
]

# bump when the meaning/order/scaling of encode_state changes
ENCODING_VERSION = 1

_LEAK = 0.01


class CheckpointError(RuntimeError):
    pass


# --- observation encoding ----------------------------------------------------


def state_dim(history: int, n_reps: int) -> int:
    return 2 * history + 2 * n_reps + 3


def encode_state(
    obs: Observation,
    *,
    history: int = 8,
    chunk_duration_s: float = 2.0,
    buffer_max_s: float = 30.0,
    quality_scale: float = 60.0,
) -> np.ndarray:
    """Scale an observation into a flat vector the networks can digest.

    Layout: [throughputs(history), download times(history),
    per-rep next-chunk qualities, per-rep next-chunk sizes,
    buffer level, chunks remaining, last quality], all squashed to O(1):
    throughput in Mbit/s, download time in tens of seconds, qualities by
    quality_scale, sizes by Mbit per chunk-second, buffer by its cap,
    remaining chunks by the session length. Histories are zero-padded on
    the old side.
    """
    n_reps = obs.n_reps
    out = np.zeros(state_dim(history, n_reps))
    tp = obs.throughput_bps[-history:]
    dt = obs.download_time_s[-history:]
    out[history - len(tp) : history] = np.asarray(tp) * 1e-6
    out[2 * history - len(dt) : 2 * history] = np.asarray(dt) * 0.1
    base = 2 * history
    out[base : base + n_reps] = np.asarray(obs.next_qualities) / quality_scale
    base += n_reps
    out[base : base + n_reps] = (
        np.asarray(obs.next_sizes_bits) * 1e-6 / chunk_duration_s
    )
    base += n_reps
    total = obs.chunk_index + obs.chunks_remaining
    out[base] = obs.buffer_s / buffer_max_s
    out[base + 1] = obs.chunks_remaining / max(total, 1)
    out[base + 2] = obs.last_quality / quality_scale
    return out


# --- tiny MLP with hand-rolled backprop ---------------------------------------


def init_mlp(sizes: Sequence[int], rng: np.random.Generator) -> List[np.ndarray]:
    """He-scaled dense stack; returns [W1, b1, W2, b2, ...]."""
    params: List[np.ndarray] = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        params.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
        params.append(np.zeros(fan_out))
    return params


def _forward(params: Sequence[np.ndarray], x: np.ndarray):
    """Linear+leaky-ReLU for every layer but the last (linear head)."""
    acts = [x]
    pre: List[np.ndarray] = []
    h = x
    n_layers = len(params) // 2
    for layer in range(n_layers):
        w, b = params[2 * layer], params[2 * layer + 1]
        z = h @ w + b
        pre.append(z)
        h = z if layer == n_layers - 1 else np.where(z > 0, z, _LEAK * z)
        acts.append(h)
    return h, (acts, pre)


def _backward(
    params: Sequence[np.ndarray], cache, d_out: np.ndarray
) -> List[np.ndarray]:
    """Gradients of sum(d_out * output) w.r.t. every parameter."""
    acts, pre = cache
    n_layers = len(params) // 2
    grads: List[Optional[np.ndarray]] = [None] * len(params)
    delta = d_out
    for layer in range(n_layers - 1, -1, -1):
        w = params[2 * layer]
        grads[2 * layer] = np.outer(acts[layer], delta)
        grads[2 * layer + 1] = delta.copy()
        if layer > 0:
            delta = delta @ w.T
            z = pre[layer - 1]
            delta = delta * np.where(z > 0, 1.0, _LEAK)
    return grads  # type: ignore[return-value]


def actor_probs(params: Sequence[np.ndarray], state: np.ndarray) -> np.ndarray:
    logits, _ = _forward(params, state)
    shifted = logits - logits.max()
    expd = np.exp(shifted)
    return expd / expd.sum()


def critic_value(params: Sequence[np.ndarray], state: np.ndarray) -> float:
    out, _ = _forward(params, state)
    return float(out[0])


def _entropy(p: np.ndarray) -> float:
    safe = np.maximum(p, 1e-300)
    return float(-np.sum(p * np.log(safe)))


# --- advantages ----------------------------------------------------------------


def advantages(
    rewards: Sequence[float],
    values: Sequence[float],
    bootstrap_value: float,
    *,
    gamma: float = 0.99,
    span: int = 8,
) -> np.ndarray:
    """n-step advantage for each rollout position.

    A_t accumulates discounted rewards up to span steps ahead, then
    bootstraps with the value of the state it stopped at — values[t+span]
    inside the rollout, bootstrap_value at the rollout boundary (zero if the
    episode ended there) — minus values[t].
    """
    t_len = len(rewards)
    if len(values) != t_len:
        raise ValueError("need one value per reward")
    if span <= 0:
        raise ValueError("span must be positive")
    out = np.empty(t_len)
    for t in range(t_len):
        end = min(t + span, t_len)
        acc = 0.0
        g = 1.0
        for k in range(t, end):
            acc += g * rewards[k]
            g *= gamma
        acc += g * (values[end] if end < t_len else bootstrap_value)
        out[t] = acc - values[t]
    return out


# --- gradient accumulation ------------------------------------------------------


def actor_gradients(
    params: Sequence[np.ndarray],
    states: Sequence[np.ndarray],
    actions: Sequence[int],
    advs: Sequence[float],
    entropy_weight: float,
) -> List[np.ndarray]:
    """Ascent direction for the policy: log-likelihood times advantage plus
    the entropy bonus, summed over the rollout."""
    total = [np.zeros_like(p) for p in params]
    for s, a, adv in zip(states, actions, advs):
        logits, cache = _forward(params, s)
        shifted = logits - logits.max()
        expd = np.exp(shifted)
        p = expd / expd.sum()
        ent = _entropy(p)
        one_hot = np.zeros_like(p)
        one_hot[a] = 1.0
        d_logits = (one_hot - p) * adv
        d_logits += entropy_weight * (-p * (np.log(np.maximum(p, 1e-300)) + ent))
        for acc, g in zip(total, _backward(params, cache, d_logits)):
            acc += g
    return total


def critic_gradients(
    params: Sequence[np.ndarray],
    states: Sequence[np.ndarray],
    advs: Sequence[float],
) -> List[np.ndarray]:
    """Ascent direction 2 * sum_t A_t * grad V(s_t); the return target inside
    A_t is treated as a constant."""
    total = [np.zeros_like(p) for p in params]
    for s, adv in zip(states, advs):
        _, cache = _forward(params, s)
        for acc, g in zip(total, _backward(params, cache, np.array([2.0 * adv]))):
            acc += g
    return total


# --- parameter server ------------------------------------------------------------


class ParameterServer:
    """Shared actor/critic parameters with snapshot-read / atomic-apply."""

    def __init__(self, actor: List[np.ndarray], critic: List[np.ndarray]):
        self._actor = [p.copy() for p in actor]
        self._critic = [p.copy() for p in critic]
        self._lock = threading.Lock()
        self._episode = 0
        self.updates = 0

    def snapshot(self) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        with self._lock:
            return (
                [p.copy() for p in self._actor],
                [p.copy() for p in self._critic],
            )

    def apply(
        self,
        actor_grads: Sequence[np.ndarray],
        critic_grads: Sequence[np.ndarray],
        lr_actor: float,
        lr_critic: float,
    ) -> None:
        with self._lock:
            for p, g in zip(self._actor, actor_grads):
                p += lr_actor * g
            for p, g in zip(self._critic, critic_grads):
                p += lr_critic * g
            self.updates += 1

    def next_episode(self, limit: int) -> int:
        """Claim the next episode index, or -1 when the run is over."""
        with self._lock:
            if self._episode >= limit:
                return -1
            idx = self._episode
            self._episode += 1
            return idx


# --- environment -----------------------------------------------------------------


class SessionEnv:
    """Step-at-a-time playback of one manifest over one rate trace.

    Mirrors the batch player chunk for chunk: same download integration,
    same buffer algebra, same per-chunk score, which is the step reward.
    """

    def __init__(
        self,
        manifest: VideoManifest,
        rates_bps: np.ndarray,
        *,
        buffer_max_s: float = 30.0,
        switch_penalty: float = 0.5,
        rebuffer_penalty: float = 4.0,
        loop: bool = True,
    ):
        self.manifest = manifest
        self.rates = np.asarray(rates_bps, dtype=float)
        self.buffer_max_s = buffer_max_s
        self.switch_penalty = switch_penalty
        self.rebuffer_penalty = rebuffer_penalty
        self.loop = loop
        self.reset()

    def reset(self) -> Observation:
        self._m = 0
        self._t = 0.0
        self._buffer = 0.0
        self._prev_quality = 0.0
        self._tp: List[float] = []
        self._dt: List[float] = []
        return self._observe()

    def _observe(self) -> Observation:
        man = self.manifest
        m = min(self._m, man.n_chunks - 1)
        return Observation(
            buffer_s=self._buffer,
            chunk_index=self._m,
            chunks_remaining=man.n_chunks - self._m,
            last_quality=self._prev_quality if self._m > 0 else 0.0,
            throughput_bps=tuple(self._tp),
            download_time_s=tuple(self._dt),
            next_sizes_bits=man.sizes_of_chunk(m),
            next_qualities=man.qualities_of_chunk(m),
            bitrates_bps=man.bitrates_bps,
        )

    @property
    def done(self) -> bool:
        return self._m >= self.manifest.n_chunks

    def step(self, action: int) -> Tuple[Observation, float, bool]:
        if self.done:
            raise RuntimeError("episode is over; reset first")
        man = self.manifest
        if not 0 <= action < man.n_reps:
            raise ValueError(f"action {action} outside the ladder")
        m = self._m
        size = float(man.representations[action].chunk_sizes_bits[m])
        d = download_chunk(self.rates, self._t, size, loop=self.loop)
        rebuffer, self._buffer, wait = advance_buffer(
            self._buffer, d, man.chunk_duration_s, self.buffer_max_s
        )
        self._t += d + wait
        quality = float(man.representations[action].chunk_qualities[m])
        if m == 0:
            reward = quality
        else:
            reward = (
                quality
                - self.switch_penalty * abs(quality - self._prev_quality)
                - self.rebuffer_penalty * rebuffer
            )
        self._prev_quality = quality
        self._tp.append(size / d)
        self._dt.append(d)
        self._m += 1
        return self._observe(), reward, self.done


# --- training --------------------------------------------------------------------


@dataclass
class TrainConfig:
    n_reps: int
    episodes: int = 1000
    history: int = 8
    hidden: int = 64
    gamma: float = 0.99
    rollout: int = 8
    lr_actor: float = 1e-5
    lr_critic: float = 1e-4
    entropy_start: float = 0.5
    entropy_end: float = 0.01
    workers: int = 1
    seed: int = 0
    chunk_duration_s: float = 2.0
    buffer_max_s: float = 30.0
    quality_scale: float = 60.0
    # rewards are divided by this before the gradient math so advantages stay
    # O(1) and the entropy bonus can compete early; the learning curve still
    # reports raw per-episode sums. Match it to the reward magnitude.
    reward_scale: float = 1.0
    # subtract each push's mean advantage in the actor update (critic targets
    # stay raw). Removes the uniform positive reinforcement every sampled
    # action gets while the critic is still warming up, which otherwise
    # randomly saturates the policy onto whichever action early luck favored.
    center_advantages: bool = False
    # per-push global-norm cap on each gradient bundle; None disables. Keeps
    # early training bounded while the critic still underestimates returns.
    max_grad_norm: Optional[float] = 40.0

    def __post_init__(self):
        if self.n_reps < 2:
            raise ValueError("need a ladder of at least two representations")
        if self.episodes <= 0 or self.workers <= 0 or self.rollout <= 0:
            raise ValueError("episodes, workers and rollout must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.reward_scale <= 0:
            raise ValueError("reward_scale must be positive")

    @property
    def input_dim(self) -> int:
        return state_dim(self.history, self.n_reps)

    def entropy_weight(self, episode: int) -> float:
        if self.episodes == 1:
            return self.entropy_start
        frac = min(max(episode / (self.episodes - 1), 0.0), 1.0)
        return self.entropy_start + (self.entropy_end - self.entropy_start) * frac


@dataclass
class TrainResult:
    actor: List[np.ndarray]
    critic: List[np.ndarray]
    curve: np.ndarray  # per-episode total reward, in episode order
    config: TrainConfig


EpisodeFactory = Callable[[int, np.random.Generator], SessionEnv]


def _encode(cfg: TrainConfig, obs: Observation) -> np.ndarray:
    return encode_state(
        obs,
        history=cfg.history,
        chunk_duration_s=cfg.chunk_duration_s,
        buffer_max_s=cfg.buffer_max_s,
        quality_scale=cfg.quality_scale,
    )


def _clip_norm(
    grads: List[np.ndarray], cap: Optional[float]
) -> List[np.ndarray]:
    if cap is None:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > cap:
        scale = cap / total
        return [g * scale for g in grads]
    return grads


def _run_episode(
    cfg: TrainConfig,
    server: ParameterServer,
    env: SessionEnv,
    rng: np.random.Generator,
    entropy_weight: float,
) -> float:
    actor, critic = server.snapshot()
    obs = env.reset()
    s = _encode(cfg, obs)
    states: List[np.ndarray] = []
    acts: List[int] = []
    rews: List[float] = []
    total = 0.0
    done = False
    while not done:
        p = actor_probs(actor, s)
        if not np.all(np.isfinite(p)):
            raise RuntimeError(
                "policy diverged to non-finite probabilities; "
                "lower the learning rates or set max_grad_norm"
            )
        a = int(rng.choice(cfg.n_reps, p=p / p.sum()))
        obs, r, done = env.step(a)
        s_next = _encode(cfg, obs)
        states.append(s)
        acts.append(a)
        rews.append(r / cfg.reward_scale)
        total += r
        s = s_next
        if len(states) == cfg.rollout or done:
            boot = 0.0 if done else critic_value(critic, s_next)
            vals = [critic_value(critic, x) for x in states]
            adv = advantages(rews, vals, boot, gamma=cfg.gamma, span=cfg.rollout)
            a_adv = adv - float(adv.mean()) if cfg.center_advantages else adv
            a_grads = actor_gradients(actor, states, acts, a_adv, entropy_weight)
            c_grads = critic_gradients(critic, states, adv)
            server.apply(
                _clip_norm(a_grads, cfg.max_grad_norm),
                _clip_norm(c_grads, cfg.max_grad_norm),
                cfg.lr_actor,
                cfg.lr_critic,
            )
            actor, critic = server.snapshot()
            states, acts, rews = [], [], []
    return total


def train(
    episode_factory: EpisodeFactory,
    cfg: TrainConfig,
    *,
    server: Optional[ParameterServer] = None,
) -> TrainResult:
    """Run cfg.episodes episodes of actor-critic training.

    episode_factory(episode_index, rng) builds the environment for that
    episode; the rng is derived deterministically from (cfg.seed, index) and
    also drives action sampling, so a single-worker run is bit-reproducible.
    With several workers, episodes are claimed from a shared counter and
    applied asynchronously.
    """
    if server is None:
        rng0 = np.random.default_rng(cfg.seed)
        actor = init_mlp((cfg.input_dim, cfg.hidden, cfg.hidden, cfg.n_reps), rng0)
        critic = init_mlp((cfg.input_dim, cfg.hidden, cfg.hidden, 1), rng0)
        server = ParameterServer(actor, critic)
    curve = np.zeros(cfg.episodes)

    def worker() -> None:
        while True:
            idx = server.next_episode(cfg.episodes)
            if idx < 0:
                return
            rng = np.random.default_rng((cfg.seed, idx))
            env = episode_factory(idx, rng)
            curve[idx] = _run_episode(
                cfg, server, env, rng, cfg.entropy_weight(idx)
            )

    if cfg.workers == 1:
        worker()
    else:
        threads = [
            threading.Thread(target=worker, name=f"a3c-worker-{i}")
            for i in range(cfg.workers)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    actor, critic = server.snapshot()
    return TrainResult(actor=actor, critic=critic, curve=curve, config=cfg)


def learned_policy(actor: Sequence[np.ndarray], cfg: TrainConfig) -> Policy:
    """Greedy policy over the trained actor head."""

    def policy(obs: Observation) -> int:
        return int(np.argmax(actor_probs(list(actor), _encode(cfg, obs))))

    return policy


# --- persistence -------------------------------------------------------------------


def save_checkpoint(path, result: TrainResult) -> None:
    blob = {
        "encoding_version": ENCODING_VERSION,
        "config": asdict(result.config),
        "actor": [p.tolist() for p in result.actor],
        "critic": [p.tolist() for p in result.critic],
        "curve": result.curve.tolist(),
    }
    Path(path).write_text(json.dumps(blob) + "\n")


def load_checkpoint(path) -> TrainResult:
    try:
        blob = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON: {exc}") from exc
    try:
        if blob["encoding_version"] != ENCODING_VERSION:
            raise CheckpointError(
                f"{path}: encoding version {blob['encoding_version']} "
                f"!= supported {ENCODING_VERSION}"
            )
        cfg = TrainConfig(**blob["config"])
        actor = [np.asarray(p) for p in blob["actor"]]
        critic = [np.asarray(p) for p in blob["critic"]]
        curve = np.asarray(blob["curve"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad checkpoint structure: {exc}") from exc
    return TrainResult(actor=actor, critic=critic, curve=curve, config=cfg)


def write_curve(path, curve: np.ndarray) -> None:
    lines = ["episode,reward"]
    for i, r in enumerate(np.asarray(curve, dtype=float)):
        lines.append("%d,%.17g" % (i, r))
    Path(path).write_text("\n".join(lines) + "\n")
