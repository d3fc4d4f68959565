"""Online (per-round) agent loop and the two-stage worker/main training."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

from feddrl.drl.agent import (
    AgentConfig,
    DrlAgent,
    build_state,
    compute_reward,
    ddpg_update,
    impacts_from_action,
)
from feddrl.metrics import RunLog


def noise_schedule(round_index: int, total_rounds: int, start: float, end: float) -> float:
    """Linear decay from ``start`` at round 1 to ``end`` at ``total_rounds``."""
    if total_rounds <= 1:
        return start
    frac = min(1.0, max(0.0, (round_index - 1) / (total_rounds - 1)))
    return start + (end - start) * frac


class FedDrlAggregator:
    """Impact factors from the agent's policy.

    Within a round the agent first decides (``impacts``), then, once the
    server has aggregated, stores the previous transition whose reward is
    read off this round's pre-training losses and runs its updates
    (``end_round``).
    """

    name = "feddrl"

    def __init__(self, agent: DrlAgent, total_rounds: int, learn: bool = True, explore: bool = True):
        self.agent = agent
        self.total_rounds = total_rounds
        self.learn = learn
        self.explore = explore
        self.rewards: list[float] = []
        self.update_stats: list[dict] = []
        self._pending = None
        self._prev = None

    def impacts(self, reports, round_index):
        agent = self.agent
        state = build_state(reports, round_index, agent.normalizer, k=agent.k)
        noise = noise_schedule(round_index, self.total_rounds, agent.cfg.noise_start, agent.cfg.noise_end)
        action = agent.act(state, self.explore, noise)
        alpha = impacts_from_action(action, agent.rng)
        self._pending = (state.flat(), action.flat())
        return alpha

    def end_round(self, reports, alpha, round_index):
        agent = self.agent
        s_now = self._pending[0]
        if self._prev is not None:
            reward = compute_reward([r.loss_before for r in reports])
            agent.remember(self._prev[0], self._prev[1], reward, s_now)
            self.rewards.append(reward)
        self._prev = self._pending
        if self.learn and agent.cfg.updates_per_round > 0 and agent.ready():
            stats = agent.update(agent.cfg.updates_per_round)
            self.update_stats.append({"q_loss": float(np.mean(stats["q_loss"]))})


EnvFactory = Callable[[int, FedDrlAggregator], "object"]


def two_stage_train(
    env_factory: EnvFactory,
    cfg: AgentConfig,
    k: int,
    rounds: int,
    seed: int = 0,
) -> tuple[DrlAgent, list[DrlAgent], list[RunLog]]:
    """Stage 1: ``cfg.workers`` identical agents learn online, each in its own
    environment from ``env_factory(worker_index, aggregator)``.
    Stage 2: their buffers are merged and a main agent, initialised from
    worker 0, trains offline on the merged buffer.
    """
    if cfg.workers < 1:
        raise ValueError("need at least one worker")
    base = DrlAgent(k, cfg, seed)
    workers = [base.copy(seed=seed * 1000 + 100 + i) for i in range(cfg.workers)]

    def run_worker(i: int) -> RunLog:
        agg = FedDrlAggregator(workers[i], rounds)
        return env_factory(i, agg).run(rounds)

    if cfg.parallel_workers and cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            logs = list(pool.map(run_worker, range(cfg.workers)))
    else:
        logs = [run_worker(i) for i in range(cfg.workers)]

    merged = workers[0].buffer.merged(*(w.buffer for w in workers[1:]))
    if len(merged) == 0:
        raise ValueError("workers produced no experiences")
    main = workers[0].copy(seed=seed * 1000 + 99)
    main.buffer = merged
    if cfg.offline_updates > 0:
        ddpg_update(main, merged, cfg.offline_updates)
    return main, workers, logs
