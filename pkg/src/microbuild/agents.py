"""Asynchronous advantage actor-critic over MicroBuild, three ways.

One network architecture serves three agents: narration-guided (embedding
distance grants the shaping bonus, and the state/command embeddings enter
the network as auxiliary features), subtask (detector events grant the
same bonus, no auxiliary features), and an unshaped baseline. Parallel
workers each own a private environment and network replica; the only
shared object is the parameter block, read by snapshot and written by a
lock-serialized Adam update.

An instruction tracker holds the ordered command list with a progress
pointer: satisfying the current instruction grants the bonus and advances
the pointer, cycling back to the first instruction after the last.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import env as E
from .mem import CommandSpec, MemModel, mem_distance
from .nn import (
    AdamState,
    Conv2d,
    Dense,
    Flatten,
    LSTM,
    ReLU,
    Sequential,
    Tanh,
    adam_step,
    flatten_arrays,
    load_model,
    param_count,
    save_model,
    unflatten_into,
)

VARIANTS = ("narration", "subtask", "none", "random")
AUX_DIM = 128  # state embedding + command embedding
HIDDEN = 128


@dataclass
class AgentConfig:
    variant: str = "none"
    workers: int = 8
    total_steps: int = 2_000_000
    rollout_len: int = 32
    gamma: float = 0.99
    lr: float = 1e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    grad_clip: float = 40.0
    bonus: float = 1.0
    tau: float = 0.5
    base_seed: int = 0
    horizon: int = E.HORIZON
    eval_interval: int = 50_000
    eval_episodes: int = 20
    eval_seed: int = 10_000
    serialized_updates: bool = True
    env_factory: Callable[[int], object] | None = None  # tests can stub the env

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r} (expected one of {VARIANTS})")
        if self.variant == "narration" and self.tau <= 0:
            raise ValueError("narration shaping needs a positive distance threshold")
        if self.workers < 1 or self.rollout_len < 1 or self.total_steps < 1:
            raise ValueError("workers, rollout_len and total_steps must be positive")

    def make_env(self, seed: int):
        factory = self.env_factory or (lambda s: E.Episode(s, self.horizon))
        return factory(seed)


class AgentNet:
    """Conv/dense trunk + LSTM core with action-id, x, y and value heads."""

    def __init__(self, rng: np.random.Generator | None = None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        self.dtype = dtype
        h = (E.GRID - 5) // 2 + 1
        h = (h - 3) // 2 + 1
        conv_out = 16 * h * h
        self.spatial_net = Sequential(
            [
                Conv2d(E.OBS_CHANNELS, 8, k=5, stride=2, rng=rng, dtype=dtype),
                ReLU(),
                Conv2d(8, 16, k=3, stride=2, rng=rng, dtype=dtype),
                ReLU(),
                Flatten(),
            ]
        )
        self.nonspatial_net = Sequential([Dense(E.OBS_NONSPATIAL, 32, rng, dtype=dtype), Tanh()])
        self.trunk = Sequential([Dense(conv_out + 32 + AUX_DIM, HIDDEN, rng, dtype=dtype), ReLU()])
        self.core = LSTM(HIDDEN, HIDDEN, rng, dtype=dtype)
        self.head_action = Dense(HIDDEN, E.N_ACTIONS, rng, dtype=dtype)
        self.head_x = Dense(HIDDEN, E.GRID, rng, dtype=dtype)
        self.head_y = Dense(HIDDEN, E.GRID, rng, dtype=dtype)
        self.head_value = Dense(HIDDEN, 1, rng, dtype=dtype)
        self._modules = [
            self.spatial_net,
            self.nonspatial_net,
            self.trunk,
            self.core,
            self.head_action,
            self.head_x,
            self.head_y,
            self.head_value,
        ]
        self._split = conv_out

    # ------------------------------------------------------------- params

    def param_arrays(self) -> list[np.ndarray]:
        return [a for m in self._modules for a in m.param_arrays()]

    def grad_arrays(self) -> list[np.ndarray]:
        return [g for m in self._modules for g in m.grad_arrays()]

    def zero_grads(self) -> None:
        for m in self._modules:
            m.zero_grads()

    def get_flat(self) -> np.ndarray:
        return flatten_arrays(self.param_arrays())

    def set_flat(self, flat: np.ndarray) -> None:
        unflatten_into(flat, self.param_arrays())

    def n_params(self) -> int:
        return param_count(self.param_arrays())

    def spec(self) -> dict:
        return {"kind": "agent-net", "modules": [m.spec() for m in self._modules]}

    def save(self, path) -> None:
        save_model(path, self.spec(), self.param_arrays())

    @classmethod
    def load(cls, path) -> "AgentNet":
        net = cls()
        spec, flat = load_model(path, expected_spec=net.spec())
        net.set_flat(flat)
        return net

    def zero_state(self) -> tuple[np.ndarray, np.ndarray]:
        return self.core.zero_state(1, dtype=self.dtype)

    # ------------------------------------------------------------ forward

    def _features(self, spatial: np.ndarray, nonspatial: np.ndarray, aux: np.ndarray) -> np.ndarray:
        sp = self.spatial_net.forward(spatial)
        ns = self.nonspatial_net.forward(nonspatial)
        return self.trunk.forward(np.concatenate([sp, ns, aux], axis=1))

    def _backward_features(self, g: np.ndarray) -> None:
        g = self.trunk.backward(g)
        self.spatial_net.backward(g[:, : self._split])
        self.nonspatial_net.backward(g[:, self._split : self._split + 32])

    def act(
        self,
        obs: E.Observation,
        aux: np.ndarray,
        h: np.ndarray,
        c: np.ndarray,
        legal_mask: np.ndarray,
        rng: np.random.Generator,
    ) -> tuple[E.Action, float, float, tuple[np.ndarray, np.ndarray]]:
        """Sample one action; spatial heads only participate for builds."""
        x = self._features(obs.spatial[None], obs.nonspatial[None], aux[None])
        h, c = self.core.step(x, h, c, cache=False)
        logits = self.head_action.forward(h)[0]
        value = float(self.head_value.forward(h)[0, 0])
        logp_id = masked_log_softmax(logits, legal_mask)
        kind = sample_from_logp(logp_id, rng)
        logp = float(logp_id[kind])
        if kind in (E.A_BUILD_DEPOT, E.A_BUILD_BARRACKS):
            logp_x = masked_log_softmax(self.head_x.forward(h)[0], None)
            logp_y = masked_log_softmax(self.head_y.forward(h)[0], None)
            ax = sample_from_logp(logp_x, rng)
            ay = sample_from_logp(logp_y, rng)
            logp += float(logp_x[ax]) + float(logp_y[ay])
            action = E.Action(kind, x=ax, y=ay)
        else:
            action = E.Action(kind)
        return action, logp, value, (h, c)

    def value_of(self, obs: E.Observation, aux: np.ndarray, h: np.ndarray, c: np.ndarray) -> float:
        x = self._features(obs.spatial[None], obs.nonspatial[None], aux[None])
        h, _ = self.core.step(x, h, c, cache=False)
        return float(self.head_value.forward(h)[0, 0])


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    """Log-probabilities with zero mass on masked-out entries (-inf logp)."""
    if mask is None:
        m = logits.max()
        z = logits - m
        return z - np.log(np.exp(z).sum())
    out = np.full_like(logits, -np.inf)
    legal = np.flatnonzero(mask)
    z = logits[legal] - logits[legal].max()
    out[legal] = z - np.log(np.exp(z).sum())
    return out


def sample_from_logp(logp: np.ndarray, rng: np.random.Generator) -> int:
    p = np.exp(logp)
    p /= p.sum()
    return int(np.searchsorted(np.cumsum(p), rng.random(), side="right").clip(0, p.size - 1))


# ---------------------------------------------------------------- rollouts


@dataclass
class Rollout:
    """Fixed-length (or terminal-truncated) trajectory segment."""

    spatial: np.ndarray  # (T, 14, 16, 16)
    nonspatial: np.ndarray  # (T, 10)
    aux: np.ndarray  # (T, AUX_DIM)
    masks: np.ndarray  # (T, 6) bool
    kinds: np.ndarray  # (T,)
    xs: np.ndarray  # (T,)
    ys: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,) shaped rewards actually optimized
    env_rewards: np.ndarray  # (T,) raw environment rewards (logging)
    values: np.ndarray  # (T,) V(s_t) at collection time
    logps: np.ndarray  # (T,)
    bootstrap: float  # V(s_T), 0 when terminal
    h0: np.ndarray
    c0: np.ndarray

    def __len__(self) -> int:
        return int(self.kinds.shape[0])


def compute_returns(
    rewards: np.ndarray, bootstrap: float, gamma: float = 0.99, values: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """n-step bootstrapped returns, plus advantages when values are given."""
    t = rewards.shape[0]
    returns = np.empty(t, dtype=np.float64)
    acc = float(bootstrap)
    for i in range(t - 1, -1, -1):
        acc = float(rewards[i]) + gamma * acc
        returns[i] = acc
    if values is None:
        return returns, None
    return returns, returns - values.astype(np.float64)


def a3c_loss(rollout: Rollout, net: AgentNet, config: AgentConfig) -> tuple[float, np.ndarray]:
    """Policy gradient + value regression + entropy bonus over one rollout.

    Re-runs the forward pass (batched trunk, sequential LSTM), then
    backpropagates through time. Advantages are constants in the policy
    term; entropy covers only the heads actually used at each step.
    """
    t_len = len(rollout)
    returns, advantages = compute_returns(
        rollout.rewards, rollout.bootstrap, config.gamma, rollout.values
    )
    net.zero_grads()
    feats = net._features(rollout.spatial, rollout.nonspatial, rollout.aux)  # (T, HIDDEN)
    h, c = rollout.h0.copy(), rollout.c0.copy()
    net.core.reset_cache()
    hs = np.empty((t_len, HIDDEN), dtype=net.dtype)
    for t in range(t_len):
        h, c = net.core.step(feats[t : t + 1], h, c, cache=True)
        hs[t] = h[0]
    logits_id = net.head_action.forward(hs)
    logits_x = net.head_x.forward(hs)
    logits_y = net.head_y.forward(hs)
    values = net.head_value.forward(hs)[:, 0]

    g_id = np.zeros_like(logits_id)
    g_x = np.zeros_like(logits_x)
    g_y = np.zeros_like(logits_y)
    loss = 0.0
    c_v, c_e = config.value_coef, config.entropy_coef
    for t in range(t_len):
        adv = float(advantages[t])
        ret = float(returns[t])
        build = rollout.kinds[t] in (E.A_BUILD_DEPOT, E.A_BUILD_BARRACKS)
        heads = [(logits_id[t], rollout.masks[t], int(rollout.kinds[t]), g_id[t])]
        if build:
            heads.append((logits_x[t], None, int(rollout.xs[t]), g_x[t]))
            heads.append((logits_y[t], None, int(rollout.ys[t]), g_y[t]))
        for logits, mask, chosen, gout in heads:
            logp = masked_log_softmax(logits, mask)
            legal = np.flatnonzero(mask) if mask is not None else np.arange(logits.shape[0])
            p = np.exp(logp[legal])
            ent = float(-(p * logp[legal]).sum())
            loss += -adv * float(logp[chosen]) - c_e * ent
            g = adv * p
            g[legal == chosen] -= adv
            g += c_e * p * (logp[legal] + ent)
            gout[legal] += g
        verr = float(values[t]) - ret
        loss += c_v * verr * verr
    if not np.isfinite(loss):
        bad = [t for t in range(t_len) if not np.isfinite(values[t])]
        raise FloatingPointError(f"non-finite loss in rollout (suspect timesteps {bad[:4]})")

    g_v = (2.0 * c_v * (values.astype(np.float64) - returns)).astype(net.dtype)[:, None]
    gh = net.head_action.backward(g_id)
    gh += net.head_x.backward(g_x)
    gh += net.head_y.backward(g_y)
    gh += net.head_value.backward(g_v)
    gx_seq = net.core.backward_seq([gh[t : t + 1] for t in range(t_len)])
    net._backward_features(np.concatenate(gx_seq, axis=0))
    return loss, flatten_arrays(net.grad_arrays())


# ---------------------------------------------------------------- shaping


@dataclass
class InstructionTracker:
    """Ordered command list with a cyclic progress pointer."""

    commands: list[CommandSpec]
    bonus: float = 1.0
    pointer: int = 0
    completions: int = 0
    per_command: dict[int, int] = field(default_factory=dict)

    def reset(self) -> None:
        self.pointer = 0
        self.completions = 0

    def current(self) -> CommandSpec:
        return self.commands[self.pointer]

    def advance(self) -> float:
        self.completions += 1
        cid = self.commands[self.pointer].id
        self.per_command[cid] = self.per_command.get(cid, 0) + 1
        self.pointer = (self.pointer + 1) % len(self.commands)
        return self.bonus


def shape_narration(
    mem: MemModel,
    state_vec: np.ndarray,
    tracker: InstructionTracker,
    tau: float,
    command_vecs: np.ndarray,
) -> float:
    """Bonus iff the current instruction's embedding is within tau."""
    if mem_distance(state_vec, command_vecs[tracker.pointer]) < tau:
        return tracker.advance()
    return 0.0


def shape_subtask(events: frozenset[int], tracker: InstructionTracker) -> float:
    """Bonus iff a detector event matches the current instruction."""
    if tracker.current().id in events:
        return tracker.advance()
    return 0.0


# ------------------------------------------------------------ shared state


class SharedParams:
    """Global parameter block: snapshot reads, serialized Adam applies."""

    def __init__(self, init_params: np.ndarray, config: AgentConfig):
        self._params = init_params.astype(np.float32).copy()
        self._adam = AdamState(self._params.size, lr=config.lr)
        self._lock = threading.Lock()
        self._clip = config.grad_clip
        self._serialized = config.serialized_updates
        self._eval_interval = config.eval_interval
        self.version = 0
        self.steps = 0
        self.total_steps = config.total_steps

    def snapshot(self) -> tuple[np.ndarray, int]:
        with self._lock:
            return self._params.copy(), self.version

    def should_stop(self) -> bool:
        return self.steps >= self.total_steps

    def _apply(self, grads: np.ndarray, n_steps: int) -> list[int]:
        norm = float(np.linalg.norm(grads))
        if self._clip and norm > self._clip:
            grads = grads * (self._clip / norm)
        adam_step(self._params, grads, self._adam)
        self.version += 1
        before = self.steps
        self.steps = before + n_steps
        first = (before // self._eval_interval + 1) * self._eval_interval
        return list(range(first, self.steps + 1, self._eval_interval))

    def apply_gradients(self, grads: np.ndarray, n_steps: int) -> list[int]:
        """Returns the eval boundaries (step multiples) this update crossed."""
        if self._serialized:
            with self._lock:
                return self._apply(grads, n_steps)
        return self._apply(grads, n_steps)  # opt-in hogwild: racy by design


# ----------------------------------------------------------------- records


@dataclass
class RunRecord:
    step: int
    worker: int
    episode: int
    env_score: float
    shaped_return: float
    instr_completions: int
    variant: str
    seed: int


@dataclass
class EvalPoint:
    step: int
    params: np.ndarray
    version: int


RUN_RECORD_FIELDS = ("step", "worker", "episode", "env_score", "shaped_return", "instr_completions", "variant", "seed")


def _zero_aux() -> np.ndarray:
    return np.zeros(AUX_DIM, dtype=np.float32)


def _narration_aux(state_vec: np.ndarray, cmd_vec: np.ndarray) -> np.ndarray:
    return np.concatenate([state_vec, cmd_vec]).astype(np.float32)


def clone_mem(mem: MemModel) -> MemModel:
    """Private inference replica (layer caches are not thread-safe)."""
    twin = MemModel(mem.word_embeddings, rng=None, embed_dim=mem.embed_dim)
    twin.set_flat(mem.get_flat())
    return twin


def worker_loop(
    shared: SharedParams,
    config: AgentConfig,
    worker_id: int,
    mem: MemModel | None = None,
    commands: list[CommandSpec] | None = None,
) -> Iterator[RunRecord | EvalPoint]:
    """One worker: snapshot, roll out, push gradients; yields records.

    Yields a RunRecord at each episode end and an EvalPoint whenever this
    worker's update crossed an evaluation boundary.
    """
    config.validate()
    narration = config.variant == "narration"
    subtask = config.variant == "subtask"
    if narration:
        if mem is None or commands is None:
            raise ValueError("narration variant needs a trained embedding model and commands")
        mem = clone_mem(mem)
        command_vecs = np.stack([mem.encode_command(c) for c in commands])
    tracker = InstructionTracker(commands, bonus=config.bonus) if (narration or subtask) else None

    rng = np.random.default_rng(np.random.SeedSequence((config.base_seed, worker_id)))
    net = AgentNet()
    episode_idx = 0
    env = config.make_env(config.base_seed + worker_id * 1_000_003 + episode_idx)
    obs = env.observe()
    h, c = net.zero_state()
    if tracker:
        tracker.reset()
    shaped_return = 0.0
    state_vec = mem.encode_state(obs) if narration else None
    t_len = config.rollout_len

    def current_aux() -> np.ndarray:
        if not narration:
            return _zero_aux()
        return _narration_aux(state_vec, command_vecs[tracker.pointer])

    while not shared.should_stop():
        params, _ = shared.snapshot()
        net.set_flat(params)
        sp = np.empty((t_len, E.OBS_CHANNELS, E.GRID, E.GRID), dtype=np.float32)
        ns = np.empty((t_len, E.OBS_NONSPATIAL), dtype=np.float32)
        aux = np.empty((t_len, AUX_DIM), dtype=np.float32)
        masks = np.empty((t_len, E.N_ACTIONS), dtype=bool)
        kinds = np.empty(t_len, dtype=np.int64)
        axs = np.empty(t_len, dtype=np.int64)
        ays = np.empty(t_len, dtype=np.int64)
        rewards = np.empty(t_len, dtype=np.float32)
        env_rewards = np.empty(t_len, dtype=np.float32)
        values = np.empty(t_len, dtype=np.float32)
        logps = np.empty(t_len, dtype=np.float32)
        h0, c0 = h.copy(), c.copy()
        done = False
        t = 0
        while t < t_len:
            aux_t = current_aux()
            mask = env.legal_mask()
            action, logp, value, (h, c) = net.act(obs, aux_t, h, c, mask, rng)
            next_obs, env_r, done, events = env.step(action)
            bonus = 0.0
            if narration:
                # satisfaction judged on the post-action observation
                state_vec = mem.encode_state(next_obs)
                bonus = shape_narration(mem, state_vec, tracker, config.tau, command_vecs)
            elif subtask:
                bonus = shape_subtask(events, tracker)
            sp[t], ns[t], aux[t] = obs.spatial, obs.nonspatial, aux_t
            masks[t], kinds[t], axs[t], ays[t] = mask, action.kind, action.x, action.y
            env_rewards[t] = env_r
            rewards[t] = env_r + bonus
            values[t], logps[t] = value, logp
            shaped_return += env_r + bonus
            obs = next_obs
            t += 1
            if done:
                break
        bootstrap = 0.0 if done else net.value_of(obs, current_aux(), h, c)
        rollout = Rollout(
            spatial=sp[:t],
            nonspatial=ns[:t],
            aux=aux[:t],
            masks=masks[:t],
            kinds=kinds[:t],
            xs=axs[:t],
            ys=ays[:t],
            rewards=rewards[:t],
            env_rewards=env_rewards[:t],
            values=values[:t],
            logps=logps[:t],
            bootstrap=bootstrap,
            h0=h0,
            c0=c0,
        )
        _, grads = a3c_loss(rollout, net, config)
        crossed = shared.apply_gradients(grads, t)
        for boundary in crossed:
            params_now, version = shared.snapshot()
            yield EvalPoint(step=boundary, params=params_now, version=version)
        if done:
            yield RunRecord(
                step=shared.steps,
                worker=worker_id,
                episode=episode_idx,
                env_score=float(env.score),
                shaped_return=float(shaped_return),
                instr_completions=tracker.completions if tracker else 0,
                variant=config.variant,
                seed=config.base_seed,
            )
            episode_idx += 1
            env = config.make_env(config.base_seed + worker_id * 1_000_003 + episode_idx)
            obs = env.observe()
            h, c = net.zero_state()
            if tracker:
                tracker.reset()
            shaped_return = 0.0
            if narration:
                state_vec = mem.encode_state(obs)


# -------------------------------------------------------------- evaluation


def evaluate_policy(
    params: np.ndarray,
    config: AgentConfig,
    mem: MemModel | None = None,
    commands: list[CommandSpec] | None = None,
) -> dict:
    """Frozen-snapshot evaluation: fixed seeds, single-threaded, sampled policy."""
    config.validate()
    narration = config.variant == "narration"
    subtask = config.variant == "subtask"
    random_variant = config.variant == "random"
    net = AgentNet()
    if not random_variant:
        net.set_flat(params)
    if narration:
        mem = clone_mem(mem)
        command_vecs = np.stack([mem.encode_command(cmd) for cmd in commands])
    tracker = InstructionTracker(commands, bonus=config.bonus) if (narration or subtask) else None

    scores, shaped, completions = [], [], []
    for i in range(config.eval_episodes):
        env = config.make_env(config.eval_seed + i)
        rng = np.random.default_rng(np.random.SeedSequence((config.eval_seed, i)))
        obs = env.observe()
        state_vec = mem.encode_state(obs) if narration else None
        h, c = net.zero_state()
        if tracker:
            tracker.reset()
        total_shaped = 0.0
        done = False
        while not done:
            if narration:
                aux_t = _narration_aux(state_vec, command_vecs[tracker.pointer])
            else:
                aux_t = _zero_aux()
            mask = env.legal_mask()
            if random_variant:
                ids = np.flatnonzero(mask)
                kind = int(ids[rng.integers(ids.size)])
                if kind in (E.A_BUILD_DEPOT, E.A_BUILD_BARRACKS):
                    action = E.Action(kind, x=int(rng.integers(E.GRID)), y=int(rng.integers(E.GRID)))
                else:
                    action = E.Action(kind)
            else:
                action, _, _, (h, c) = net.act(obs, aux_t, h, c, mask, rng)
            obs, env_r, done, events = env.step(action)
            bonus = 0.0
            if narration:
                state_vec = mem.encode_state(obs)
                bonus = shape_narration(mem, state_vec, tracker, config.tau, command_vecs)
            elif subtask:
                bonus = shape_subtask(events, tracker)
            total_shaped += env_r + bonus
        scores.append(float(env.score))
        shaped.append(total_shaped)
        completions.append(tracker.completions if tracker else 0)
    n = len(scores)
    return {
        "episodes": n,
        "mean_score": float(np.mean(scores)),
        "stderr_score": float(np.std(scores, ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
        "mean_shaped": float(np.mean(shaped)),
        "mean_completions": float(np.mean(completions)),
    }


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    eval_rows: list[dict]
    records: list[RunRecord]
    final_params: np.ndarray
    version: int
    config: AgentConfig


def train(
    config: AgentConfig,
    mem: MemModel | None = None,
    commands: list[CommandSpec] | None = None,
    progress: Callable[[int], None] | None = None,
) -> TrainResult:
    """Run k workers to the step budget, evaluating at fixed boundaries.

    Evaluation happens in whichever worker crossed the boundary, on a
    snapshot taken at the crossing; with one worker the whole run is
    deterministic. Any worker exception fails the run.
    """
    config.validate()
    if config.variant == "random":
        row = {"step": 0, **evaluate_policy(np.zeros(1, dtype=np.float32), config, mem, commands)}
        return TrainResult([row], [], np.zeros(1, dtype=np.float32), 0, config)

    init = AgentNet(np.random.default_rng(config.base_seed)).get_flat()
    shared = SharedParams(init, config)
    records: list[RunRecord] = []
    eval_rows: list[dict] = []
    errors: list[BaseException] = []
    sink_lock = threading.Lock()
    eval_lock = threading.Lock()

    def run_eval(point: EvalPoint) -> None:
        with eval_lock:
            row = {"step": point.step, "version": point.version}
            row.update(evaluate_policy(point.params, config, mem, commands))
            with sink_lock:
                eval_rows.append(row)
            if progress is not None:
                progress(point.step)

    baseline = EvalPoint(step=0, params=init.copy(), version=0)
    run_eval(baseline)

    def consume(worker_id: int) -> None:
        try:
            for item in worker_loop(shared, config, worker_id, mem, commands):
                if isinstance(item, EvalPoint):
                    run_eval(item)
                else:
                    with sink_lock:
                        records.append(item)
        except BaseException as exc:  # noqa: BLE001 - worker failure fails the run
            errors.append(exc)

    if config.workers == 1:
        consume(0)
    else:
        threads = [
            threading.Thread(target=consume, args=(wid,), name=f"worker-{wid}")
            for wid in range(config.workers)
        ]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
    if errors:
        raise RuntimeError(f"worker failed: {errors[0]!r}") from errors[0]

    final_params, version = shared.snapshot()
    eval_rows.sort(key=lambda r: r["step"])
    return TrainResult(eval_rows, records, final_params, version, config)
