"""Deterministic multi-agent round workload.

Each round, every agent emits one shared output block; every agent's next
prompt is its own private history followed by all agents' current outputs in
a per-agent permuted order. Histories grow by the agent's own output each
round. All token material and permutations come from seed-derived streams,
so the same spec always yields the same rounds.

Output blocks are "decoded" as continuations: the cache rows for agent ``i``'s
round-``r`` output are computed with the agent's previous prompt as context
(round 0: its initial history). Seeding those rows into the segment index
before a round is served is what makes every prompt's shared segments hit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .core import ModelConfig, PromptLayout, Round, Segment, SegmentKind, flatten_prompt

# stream tags keep the per-purpose token streams disjoint
_HISTORY_TAG = 1
_OUTPUT_TAG = 2
_PERMUTATION_TAG = 3


@dataclass(frozen=True)
class WorkloadSpec:
    """Shape and seeds of the synthetic round workload.

    ``history_len`` is either one length for all agents or a per-agent tuple;
    ``permutation_seed=None`` keeps every agent's output order as-is."""

    num_agents: int = 5
    num_rounds: int = 3
    history_len: Union[int, tuple[int, ...]] = 32
    shared_block_len: int = 16
    token_seed: int = 7
    permutation_seed: Union[int, None] = 11

    def __post_init__(self) -> None:
        if self.num_agents < 1:
            raise ValueError("need at least one agent")
        if self.num_rounds < 1:
            raise ValueError("need at least one round")
        if self.shared_block_len < 1:
            raise ValueError("shared blocks must be non-empty")
        if isinstance(self.history_len, int):
            if self.history_len < 1:
                raise ValueError("history must be non-empty")
        else:
            lens = tuple(int(n) for n in self.history_len)
            if len(lens) != self.num_agents:
                raise ValueError("per-agent history lengths must cover every agent")
            if any(n < 1 for n in lens):
                raise ValueError("history must be non-empty")
            object.__setattr__(self, "history_len", lens)

    def history_len_of(self, agent: int) -> int:
        if isinstance(self.history_len, int):
            return self.history_len
        return self.history_len[agent]


def _stream(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def _draw_tokens(rng: np.random.Generator, n: int, model: ModelConfig) -> tuple[int, ...]:
    # never draw the reserved separator id (vocab_size - 1)
    return tuple(int(t) for t in rng.integers(0, model.vocab_size - 1, n))


def initial_history(spec: WorkloadSpec, model: ModelConfig, agent: int) -> tuple[int, ...]:
    rng = _stream(spec.token_seed, _HISTORY_TAG, agent)
    return _draw_tokens(rng, spec.history_len_of(agent), model)


def shared_output(
    spec: WorkloadSpec, model: ModelConfig, round_id: int, agent: int
) -> tuple[int, ...]:
    rng = _stream(spec.token_seed, _OUTPUT_TAG, round_id, agent)
    return _draw_tokens(rng, spec.shared_block_len, model)


def agent_history(
    spec: WorkloadSpec, model: ModelConfig, round_id: int, agent: int
) -> tuple[int, ...]:
    """History at the start of ``round_id``: the initial history plus the
    agent's own outputs from every earlier round."""
    history = initial_history(spec, model, agent)
    for earlier in range(round_id):
        history += shared_output(spec, model, earlier, agent)
    return history


def output_order(spec: WorkloadSpec, round_id: int, agent: int) -> tuple[int, ...]:
    if spec.permutation_seed is None:
        return tuple(range(spec.num_agents))
    rng = _stream(spec.permutation_seed, _PERMUTATION_TAG, round_id, agent)
    return tuple(int(j) for j in rng.permutation(spec.num_agents))


def generate_round(spec: WorkloadSpec, model: ModelConfig, round_id: int) -> Round:
    if not 0 <= round_id < spec.num_rounds:
        raise ValueError("round_id out of range for this spec")
    outputs = tuple(
        Segment(shared_output(spec, model, round_id, agent), SegmentKind.SHARED_OUTPUT)
        for agent in range(spec.num_agents)
    )
    prompts = []
    for agent in range(spec.num_agents):
        history = Segment(
            agent_history(spec, model, round_id, agent), SegmentKind.PRIVATE_HISTORY
        )
        order = output_order(spec, round_id, agent)
        prompts.append(PromptLayout(agent, (history,) + tuple(outputs[j] for j in order)))
    return Round(round_id, outputs, tuple(prompts))


def decode_context(
    spec: WorkloadSpec, model: ModelConfig, round_id: int, agent: int
) -> list[int]:
    """Tokens that precede agent's round output when it is decoded: the
    agent's previous prompt, or its initial history in round 0."""
    if round_id == 0:
        return list(initial_history(spec, model, agent))
    previous = generate_round(spec, model, round_id - 1).prompts[agent]
    return flatten_prompt(previous, model.separator_token)
