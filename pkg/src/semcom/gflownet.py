"""Generative-flow-network structure learner over DAGs.

The sampler starts from the empty graph and adds one directed edge per step,
with an acyclicity mask (maintained from an incremental transitive closure)
filtering invalid actions, until a terminate action ends the trajectory.

A single network maps the state encoding (flattened adjacency concatenated
with flattened closure) to log-flows: one per ordered node pair plus one for
the terminate action. The edge-selection distribution is the masked softmax
of the edge log-flows; the termination probability is the terminate flow's
share of the total outflow. Training minimizes the squared flow-matching
residuals along sampled trajectories: inflow equals outflow at every visited
non-initial state, and the terminate flow equals the reward at the state
where the trajectory ended. At a zero of that loss the probability of
sampling a DAG is proportional to its reward.

Rewards implement a two-part description length: the data's negative log
likelihood in bits plus a per-edge structure cost, exponentiated with a
weight coefficient. Log-rewards are shifted by the empty graph's so the
numbers stay representable; a constant factor on all rewards leaves the
terminal distribution unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .nn import Mlp, OptimizerState, adam_step
from .worldmodel import Dag, Dataset, LikelihoodScorer

__all__ = [
    "InvalidActionError",
    "TrajectoryLengthError",
    "TrainingDivergedError",
    "GraphState",
    "AddEdge",
    "TERMINATE",
    "Trajectory",
    "FlowNet",
    "RewardSpec",
    "initial_state",
    "apply_action",
    "state_key",
    "encode_state",
    "policy_heads",
    "sample_trajectory",
    "flow_matching_loss",
    "TrainConfig",
    "train_structure",
    "terminal_distribution_exact",
    "reward_distribution_exact",
    "total_variation",
    "enumerate_dags",
]

LN2 = math.log(2.0)
MAX_EXACT_NODES = 4
DIVERGENCE_LIMIT = 1e6


class InvalidActionError(ValueError):
    """An action violated the current mask."""


class TrajectoryLengthError(RuntimeError):
    """A trajectory exceeded the n^2 step cap; the mask must be broken."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


# ---------------------------------------------------------------------------
# States and actions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GraphState:
    """DAG under construction: adjacency, transitive closure and action mask.

    mask[i, j] is True exactly when adj[i, j] == 0, there is no path j -> i,
    and i != j, i.e. when adding the edge keeps the graph acyclic.
    """

    adj: np.ndarray
    closure: np.ndarray
    mask: np.ndarray
    terminal: bool = False

    @property
    def n(self) -> int:
        return self.adj.shape[0]

    def valid_edges(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in np.argwhere(self.mask)]

    def edges(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in np.argwhere(self.adj == 1)]


@dataclass(frozen=True)
class AddEdge:
    i: int
    j: int


class _Terminate:
    def __repr__(self):
        return "TERMINATE"


TERMINATE = _Terminate()


def _mask_from(adj: np.ndarray, closure: np.ndarray) -> np.ndarray:
    n = adj.shape[0]
    return (adj == 0) & ~closure.T & ~np.eye(n, dtype=bool)


def initial_state(n: int) -> GraphState:
    """Empty graph; every off-diagonal pair is a valid edge."""
    if n < 1:
        raise ValueError("n must be >= 1")
    adj = np.zeros((n, n), dtype=np.int8)
    closure = np.zeros((n, n), dtype=bool)
    return GraphState(adj, closure, _mask_from(adj, closure))


def apply_action(state: GraphState, action) -> GraphState:
    """State transition: add an edge (updating closure and mask) or terminate."""
    if state.terminal:
        raise InvalidActionError("state is already terminal")
    if action is TERMINATE:
        return replace(state, terminal=True)
    if not isinstance(action, AddEdge):
        raise InvalidActionError(f"unknown action {action!r}")
    i, j = action.i, action.j
    if not state.mask[i, j]:
        raise InvalidActionError(f"mask forbids edge ({i}, {j})")
    adj = state.adj.copy()
    adj[i, j] = 1
    # every node reaching i now reaches everything j reaches
    reaches_i = state.closure[:, i].copy()
    reaches_i[i] = True
    from_j = state.closure[j, :].copy()
    from_j[j] = True
    closure = state.closure | np.outer(reaches_i, from_j)
    np.fill_diagonal(closure, False)
    return GraphState(adj, closure, _mask_from(adj, closure))


def state_key(state_or_adj) -> bytes:
    adj = state_or_adj.adj if isinstance(state_or_adj, GraphState) else state_or_adj
    return np.asarray(adj, dtype=np.int8).tobytes()


def encode_state(state: GraphState) -> np.ndarray:
    """2 n^2 binary features: flattened adjacency then flattened closure."""
    return np.concatenate(
        [state.adj.ravel().astype(float), state.closure.ravel().astype(float)]
    )


def _closure_batch(adjs: np.ndarray) -> np.ndarray:
    """Transitive closures of a stack of adjacency matrices by squaring."""
    n = adjs.shape[-1]
    reach = adjs.astype(bool)
    steps = max(1, int(math.ceil(math.log2(n)))) if n > 1 else 1
    for _ in range(steps):
        prod = np.matmul(reach.astype(np.uint8), reach.astype(np.uint8)) > 0
        reach = reach | prod
    return reach


@dataclass(frozen=True)
class Trajectory:
    """Visited states s_0..s_k plus the actions taken, ending in TERMINATE.

    ``truncated`` marks trajectories cut by the termination threshold rather
    than a sampled terminate action; either way states[-1] is the terminal
    state for reward purposes.
    """

    states: tuple[GraphState, ...]
    actions: tuple
    truncated: bool = False

    @property
    def terminal_state(self) -> GraphState:
        return self.states[-1]


# ---------------------------------------------------------------------------
# Flow network and reward
# ---------------------------------------------------------------------------

@dataclass
class FlowNet:
    """Policy trunk over state encodings with n^2 edge slots + 1 terminate slot."""

    n: int
    net: Mlp

    @classmethod
    def create(
        cls,
        n: int,
        hidden: Sequence[int] = (64, 64),
        rng: np.random.Generator | None = None,
    ) -> "FlowNet":
        sizes = (2 * n * n, *hidden, n * n + 1)
        return cls(n, Mlp.create(sizes, rng=rng))

    def log_flows(self, encodings: np.ndarray) -> np.ndarray:
        return self.net.forward(encodings)

    def copy(self) -> "FlowNet":
        return FlowNet(self.n, self.net.copy())


@dataclass
class RewardSpec:
    """Description-length reward over terminal DAGs.

    R(G) = exp(-dl_coeff * DL(G) * ln 2) up to a constant factor, with
    DL(G) = -log_likelihood(G, data) / ln 2 + edge_cost_bits * |edges|.
    ``log_reward`` is shifted by the empty graph's value so rewards stay
    strictly positive in floating point; the shift cancels out of the
    terminal distribution. ``reward_fn`` overrides the data-driven reward
    with a custom positive function of the adjacency (used by closed-form
    checks); it must remain strictly positive for every DAG.
    """

    data: Dataset | None = None
    dl_coeff: float = 1.0
    edge_cost_bits: float = 2.0
    reward_fn: Callable[[np.ndarray], float] | None = None
    _scorer: LikelihoodScorer | None = field(default=None, repr=False)
    _baseline_bits: float | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.dl_coeff < 0:
            raise ValueError("dl_coeff must be >= 0")
        if self.data is None and self.reward_fn is None:
            raise ValueError("need a dataset or an explicit reward_fn")
        if self.data is not None:
            self._scorer = LikelihoodScorer(self.data)

    @property
    def n(self) -> int:
        if self.data is not None:
            return self.data.n
        raise ValueError("reward spec has no dataset")

    def description_length(self, adj: np.ndarray) -> float:
        """Two-part code in bits: data code length plus structure code length."""
        if self._scorer is None:
            raise ValueError("description length needs a dataset")
        dag = Dag(np.asarray(adj))
        data_bits = -self._scorer.total(dag) / LN2
        return data_bits + self.edge_cost_bits * dag.n_edges

    def log_reward(self, state_or_adj) -> float:
        adj = state_or_adj.adj if isinstance(state_or_adj, GraphState) else state_or_adj
        if self.reward_fn is not None:
            value = float(self.reward_fn(np.asarray(adj)))
            if not value > 0.0:
                raise ValueError("custom rewards must be strictly positive")
            return math.log(value)
        if self._baseline_bits is None:
            empty = np.zeros_like(np.asarray(adj))
            self._baseline_bits = self.description_length(empty)
        dl = self.description_length(adj)
        return -self.dl_coeff * (dl - self._baseline_bits) * LN2

    def reward(self, state_or_adj) -> float:
        return math.exp(self.log_reward(state_or_adj))


# ---------------------------------------------------------------------------
# Policy
# ---------------------------------------------------------------------------

def _heads_from_outputs(state: GraphState, outputs: np.ndarray):
    """(edge probabilities over valid actions, terminate probability)."""
    n = state.n
    edge_logits = outputs[: n * n].reshape(n, n)
    log_f_term = outputs[n * n]
    flat_mask = state.mask.ravel()
    if not flat_mask.any():
        return np.zeros((n, n)), 1.0
    masked = np.where(state.mask, edge_logits, -np.inf).ravel()
    m = masked[flat_mask].max()
    exp = np.where(flat_mask, np.exp(masked - m), 0.0)
    total = exp.sum()
    probs = (exp / total).reshape(n, n)
    log_sum_edges = m + math.log(total)
    # terminate flow's share of total outflow, as a sigmoid of the log gap
    p_term = 1.0 / (1.0 + math.exp(-(log_f_term - log_sum_edges)))
    return probs, float(p_term)


def policy_heads(state: GraphState, flownet: FlowNet):
    """Masked-softmax edge distribution and terminate probability for one state."""
    if state.terminal:
        raise InvalidActionError("terminal states have no policy")
    outputs = flownet.log_flows(encode_state(state))
    return _heads_from_outputs(state, outputs)


def _choose_edge(probs: np.ndarray, rng: np.random.Generator) -> AddEdge:
    flat = probs.ravel()
    idx = rng.choice(flat.size, p=flat / flat.sum())
    n = probs.shape[0]
    return AddEdge(int(idx // n), int(idx % n))


def sample_trajectory(
    flownet: FlowNet,
    rng: np.random.Generator,
    mu: float = 1.0,
    explore: float = 0.0,
    start: GraphState | None = None,
) -> Trajectory:
    """Roll out the policy from the empty graph.

    The trajectory ends when the terminate action is sampled, when the
    terminate probability exceeds the threshold ``mu``, or when no valid
    edges remain. ``explore`` mixes in uniform random edge choices, which
    changes only which states get visited, not the flow-matching optimum.
    """
    state = start if start is not None else initial_state(flownet.n)
    states = [state]
    actions: list = []
    cap = flownet.n**2 + 1
    for _ in range(cap):
        probs, p_term = policy_heads(state, flownet)
        if not state.mask.any():
            actions.append(TERMINATE)
            return Trajectory(tuple(states), tuple(actions))
        if p_term > mu:
            actions.append(TERMINATE)
            return Trajectory(tuple(states), tuple(actions), truncated=True)
        if rng.random() < p_term:
            actions.append(TERMINATE)
            return Trajectory(tuple(states), tuple(actions))
        if explore > 0.0 and rng.random() < explore:
            valid = state.valid_edges()
            action = AddEdge(*valid[rng.integers(len(valid))])
        else:
            action = _choose_edge(probs, rng)
        actions.append(action)
        state = apply_action(state, action)
        states.append(state)
    raise TrajectoryLengthError("trajectory exceeded the step cap; mask is broken")


# ---------------------------------------------------------------------------
# Flow-matching loss
# ---------------------------------------------------------------------------

class _Rows:
    """Registry of unique state encodings referenced by a loss batch."""

    def __init__(self, n: int):
        self.n = n
        self.index: dict[bytes, int] = {}
        self.encodings: list[np.ndarray] = []

    def add_state(self, state: GraphState) -> int:
        key = state_key(state)
        if key not in self.index:
            self.index[key] = len(self.encodings)
            self.encodings.append(encode_state(state))
        return self.index[key]

    def add_adj_batch(self, adjs: np.ndarray) -> list[int]:
        closures = _closure_batch(adjs)
        out = []
        for adj, clo in zip(adjs, closures):
            key = adj.astype(np.int8).tobytes()
            if key not in self.index:
                self.index[key] = len(self.encodings)
                self.encodings.append(
                    np.concatenate([adj.ravel().astype(float), clo.ravel().astype(float)])
                )
            out.append(self.index[key])
        return out

    def matrix(self) -> np.ndarray:
        return np.stack(self.encodings)


def _collect_terms(trajectories: Sequence[Trajectory], rows: _Rows, spec: RewardSpec):
    """Balance terms for a batch.

    Conservation terms: (in_slots, out_slots) per visited non-initial state,
    where a slot is (row, output index). Boundary terms: (terminate slot,
    log reward) per trajectory terminal state.
    """
    n = rows.n
    term_slot = n * n
    conservation = []
    boundary = []
    for traj in trajectories:
        for state in traj.states[1:]:
            s_row = rows.add_state(state)
            edges = state.edges()
            parent_adjs = np.repeat(state.adj[None, :, :], len(edges), axis=0)
            for k, (i, j) in enumerate(edges):
                parent_adjs[k, i, j] = 0
            parent_rows = rows.add_adj_batch(parent_adjs)
            in_slots = [
                (pr, i * n + j) for pr, (i, j) in zip(parent_rows, edges)
            ]
            out_slots = [(s_row, i * n + j) for i, j in state.valid_edges()]
            out_slots.append((s_row, term_slot))
            conservation.append((in_slots, out_slots))
        end = traj.terminal_state
        boundary.append(((rows.add_state(end), term_slot), spec.log_reward(end)))
    return conservation, boundary


def _loss_and_upstream(outputs: np.ndarray, conservation, boundary, form: str):
    """Squared-residual loss plus d(loss)/d(outputs)."""
    upstream = np.zeros_like(outputs)
    loss = 0.0

    def logsumexp(slots):
        vals = np.array([outputs[r, c] for r, c in slots])
        m = vals.max()
        e = np.exp(vals - m)
        s = e.sum()
        return m + math.log(s), e / s

    for in_slots, out_slots in conservation:
        if form == "log":
            lse_in, w_in = logsumexp(in_slots)
            lse_out, w_out = logsumexp(out_slots)
            r = lse_in - lse_out
            loss += r * r
            for (slot, w) in zip(in_slots, w_in):
                upstream[slot] += 2.0 * r * w
            for (slot, w) in zip(out_slots, w_out):
                upstream[slot] -= 2.0 * r * w
        else:
            f_in = np.array([math.exp(outputs[r, c]) for r, c in in_slots])
            f_out = np.array([math.exp(outputs[r, c]) for r, c in out_slots])
            r = f_in.sum() - f_out.sum()
            loss += r * r
            for (slot, f) in zip(in_slots, f_in):
                upstream[slot] += 2.0 * r * f
            for (slot, f) in zip(out_slots, f_out):
                upstream[slot] -= 2.0 * r * f
    for (slot, log_r) in boundary:
        if form == "log":
            r = outputs[slot] - log_r
            loss += r * r
            upstream[slot] += 2.0 * r
        else:
            f = math.exp(outputs[slot])
            r = f - math.exp(log_r)
            loss += r * r
            upstream[slot] += 2.0 * r * f
    return loss, upstream


def flow_matching_loss(
    trajectories: Sequence[Trajectory],
    flownet,
    spec: RewardSpec,
    form: str = "log",
) -> float:
    """Sum of squared flow-balance residuals over a trajectory batch.

    Per non-initial visited state: total inflow from all predecessor
    (state, add-edge) pairs minus total outflow (valid edges plus the
    terminate flow). Per trajectory end state: terminate flow minus reward.
    The default form compares log-quantities for numerical stability; the
    ``"linear"`` form uses raw flows, where a perturbation of size eps off a
    balanced solution costs exactly eps^2 per affected balance equation.

    ``flownet`` may be any object with ``n`` and a ``log_flows`` method over
    a batch of state encodings (n^2 edge slots followed by the terminate
    slot per row).
    """
    if form not in ("log", "linear"):
        raise ValueError(f"unknown loss form {form!r}")
    rows = _Rows(flownet.n)
    conservation, boundary = _collect_terms(trajectories, rows, spec)
    outputs = np.atleast_2d(flownet.log_flows(rows.matrix()))
    loss, _ = _loss_and_upstream(outputs, conservation, boundary, form)
    return float(loss)


def _loss_and_grads(trajectories, flownet: FlowNet, spec: RewardSpec, form: str):
    rows = _Rows(flownet.n)
    conservation, boundary = _collect_terms(trajectories, rows, spec)
    x = rows.matrix()
    outputs = np.atleast_2d(flownet.net.forward(x))
    loss, upstream = _loss_and_upstream(outputs, conservation, boundary, form)
    grads, _ = flownet.net.backward(x, upstream)
    return float(loss), grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Knobs for the structure-learning loop."""

    iterations: int = 1500
    batch_size: int = 16
    learning_rate: float = 0.01
    mu: float = 1.0
    explore: float = 0.1
    loss_form: str = "log"
    seed: int = 0
    divergence_limit: float = DIVERGENCE_LIMIT


def train_structure(
    flownet: FlowNet, spec: RewardSpec, config: TrainConfig
) -> tuple[FlowNet, list[float]]:
    """Minibatch flow-matching training; returns the trained net and loss history."""
    rng = np.random.default_rng(config.seed)
    net = flownet.copy()
    opt = OptimizerState.create(net.net, lr=config.learning_rate)
    history: list[float] = []
    for _ in range(config.iterations):
        batch = [
            sample_trajectory(net, rng, mu=config.mu, explore=config.explore)
            for _ in range(config.batch_size)
        ]
        loss, grads = _loss_and_grads(batch, net, spec, config.loss_form)
        history.append(loss)
        if not math.isfinite(loss) or loss > config.divergence_limit:
            raise TrainingDivergedError(
                f"flow-matching loss diverged to {loss!r}", history
            )
        new_net, opt = adam_step(opt, net.net, grads)
        net = FlowNet(net.n, new_net)
    return net, history


# ---------------------------------------------------------------------------
# Exact enumeration oracles (small n)
# ---------------------------------------------------------------------------

def enumerate_dags(n: int) -> list[GraphState]:
    """All DAG states reachable from the empty graph, in edge-count order."""
    if n > MAX_EXACT_NODES:
        raise ValueError(f"exact enumeration supports n <= {MAX_EXACT_NODES}")
    start = initial_state(n)
    seen = {state_key(start): start}
    frontier = [start]
    ordered = [start]
    while frontier:
        nxt = []
        for state in frontier:
            for i, j in state.valid_edges():
                child = apply_action(state, AddEdge(i, j))
                key = state_key(child)
                if key not in seen:
                    seen[key] = child
                    nxt.append(child)
        nxt.sort(key=state_key)
        ordered.extend(nxt)
        frontier = nxt
    return ordered


def terminal_distribution_exact(flownet, n: int | None = None) -> dict[bytes, float]:
    """Exact terminal-state probabilities of the policy by dynamic programming.

    Visit probabilities propagate through every state in edge-count order;
    mass terminates at each state with its terminate-head probability.
    """
    n = n if n is not None else flownet.n
    if n > MAX_EXACT_NODES:
        raise ValueError(f"exact enumeration supports n <= {MAX_EXACT_NODES}")
    states = enumerate_dags(n)
    encodings = np.stack([encode_state(s) for s in states])
    outputs = np.atleast_2d(flownet.log_flows(encodings))
    visit = {state_key(states[0]): 1.0}
    terminal: dict[bytes, float] = {}
    for state, out in zip(states, outputs):
        key = state_key(state)
        mass = visit.get(key, 0.0)
        if mass == 0.0:
            continue
        probs, p_term = _heads_from_outputs(state, out)
        terminal[key] = terminal.get(key, 0.0) + mass * p_term
        if p_term < 1.0:
            remaining = mass * (1.0 - p_term)
            for i, j in state.valid_edges():
                child_key = state_key(apply_action(state, AddEdge(i, j)))
                visit[child_key] = visit.get(child_key, 0.0) + remaining * probs[i, j]
    return terminal


def reward_distribution_exact(spec: RewardSpec, n: int) -> dict[bytes, float]:
    """Normalized reward over all DAGs on n nodes: the flow-matching target."""
    states = enumerate_dags(n)
    log_rewards = np.array([spec.log_reward(s) for s in states])
    m = log_rewards.max()
    weights = np.exp(log_rewards - m)
    weights /= weights.sum()
    return {state_key(s): float(w) for s, w in zip(states, weights)}


def total_variation(p: dict[bytes, float], q: dict[bytes, float]) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)
