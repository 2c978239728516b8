"""Sequential tree-reweighted message passing over MRFProblem instances.

Monotone chains are induced by ascending node id: a forward sweep sends
messages along edges to higher ids, a backward sweep returns.  The dual
lower bound is evaluated after every iteration by exact minimization of
the reparameterized energy over the chain decomposition.  An exhaustive
solver doubles as the correctness oracle for small instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidProblem, TooLarge
from .mrf import MRFProblem, total_energy


@dataclass
class SolveReport:
    """Outcome of a TRWS run.

    bounds[i] is the dual lower bound after iteration i; the sequence is
    nondecreasing and never exceeds the returned energy.
    """

    labeling: np.ndarray
    energy: float
    bounds: list[float]
    iterations: int
    converged: bool


def _node_adjacency(problem: MRFProblem):
    """Per node: (edge index, neighbor) lists split by direction, and the
    chain count gamma = max(backward degree, forward degree, 1)."""
    n = problem.n_nodes
    fwd = [[] for _ in range(n)]  # edges to higher-id neighbors
    bwd = [[] for _ in range(n)]  # edges to lower-id neighbors
    for e, (u, v) in enumerate(problem.edges):
        fwd[u].append((e, v))
        bwd[v].append((e, u))
    gamma = np.array([max(len(fwd[s]), len(bwd[s]), 1) for s in range(n)], dtype=float)
    return fwd, bwd, gamma


def _monotone_chains(problem: MRFProblem, fwd, bwd) -> list[tuple[list, list]]:
    """Partition the edges into id-increasing chains.

    Incoming chains are greedily extended with outgoing edges at every
    node, so node s lies on exactly max(in-degree, out-degree) chains, the
    count its unary potential is split by.  Isolated nodes form singleton
    chains.
    """
    chains: list[tuple[list, list]] = []  # (node list, edge-index list)
    open_at: dict[int, list[int]] = {}
    for s in range(problem.n_nodes):
        ending = open_at.pop(s, [])
        outs = sorted(fwd[s], key=lambda et: et[1])
        k = min(len(ending), len(outs))
        for i, (e, t) in enumerate(outs):
            if i < k:
                ci = ending[i]
                chains[ci][0].append(t)
                chains[ci][1].append(e)
            else:
                chains.append(([s, t], [e]))
                ci = len(chains) - 1
            open_at.setdefault(t, []).append(ci)
        if not ending and not outs and not bwd[s]:
            chains.append(([s], []))
    return chains


def _chain_bound(problem, msg, chains, gamma) -> float:
    """Exact minimum of the reparameterized energy restricted to each chain,
    summed: the tree-decomposition dual value."""
    theta = problem.pairwise
    # Reparameterized unaries (unary plus all incoming messages), split
    # over the chains passing through each node.
    rep = problem.unary.copy()
    for e, (u, v) in enumerate(problem.edges):
        rep[v] += msg[e, 0]
        rep[u] += msg[e, 1]
    rep /= gamma[:, None]
    bound = 0.0
    for nodes, edge_ids in chains:
        f = rep[nodes[0]]
        for step, e in enumerate(edge_ids):
            w = theta[e] - msg[e, 0][None, :] - msg[e, 1][:, None]
            f = (f[:, None] + w).min(axis=0) + rep[nodes[step + 1]]
        bound += float(f.min())
    return bound


def trws_solve(
    problem: MRFProblem,
    max_iters: int = 100,
    tol: float = 1e-6,
    initial: np.ndarray | None = None,
) -> SolveReport:
    """Minimize the problem energy with sequential tree-reweighted updates.

    Per iteration a forward and a backward pass update the edge messages;
    the labeling is extracted from the reparameterized unaries in pass
    order (ties to the lowest label) and the best labeling seen across
    iterations, including the initial one, is returned.  Convergence is
    declared when the relative bound improvement drops below tol.

    Raises InvalidProblem on non-finite energies.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if not (np.isfinite(problem.unary).all() and np.isfinite(problem.pairwise).all()):
        raise InvalidProblem("problem contains non-finite energies")

    n = problem.n_nodes
    if initial is None:
        initial = problem.initial_labels
    best_labeling = np.asarray(initial, dtype=int).copy()
    best_energy = total_energy(problem, best_labeling)

    fwd, bwd, gamma = _node_adjacency(problem)
    chains = _monotone_chains(problem, fwd, bwd)
    n_edges = len(problem.edges)
    big_l = problem.n_labels
    # msg[e, 0]: message from the lower to the higher node of edge e
    # (a function of the higher node's label); msg[e, 1]: the reverse.
    msg = np.zeros((n_edges, 2, big_l))
    theta = problem.pairwise

    def aggregate(s: int) -> np.ndarray:
        t = problem.unary[s].copy()
        for e, _ in fwd[s]:
            t += msg[e, 1]
        for e, _ in bwd[s]:
            t += msg[e, 0]
        return t

    bounds: list[float] = []
    converged = False
    iterations = 0
    for it in range(max_iters):
        iterations = it + 1
        labeling = np.empty(n, dtype=int)
        conditional = np.empty(n, dtype=int)
        for s in range(n):
            that = aggregate(s)
            labeling[s] = int(np.argmin(that))
            # Second candidate: condition on already-assigned lower
            # neighbors, which resolves the label plateaus a per-node
            # argmin cannot (whole regions tied through Potts terms).
            cond = that.copy()
            for e, u in bwd[s]:
                cond += theta[e][conditional[u], :] - msg[e, 0]
            conditional[s] = int(np.argmin(cond))
            if fwd[s]:
                base = that / gamma[s]
                for e, _t in fwd[s]:
                    m = ((base - msg[e, 1])[:, None] + theta[e]).min(axis=0)
                    msg[e, 0] = m - m.min()
        for s in range(n - 1, -1, -1):
            if bwd[s]:
                base = aggregate(s) / gamma[s]
                for e, _t in bwd[s]:
                    m = ((base - msg[e, 0])[None, :] + theta[e]).min(axis=1)
                    msg[e, 1] = m - m.min()

        for cand in (labeling, conditional):
            energy = total_energy(problem, cand)
            if energy < best_energy:
                best_energy = energy
                best_labeling = cand.copy()

        bounds.append(_chain_bound(problem, msg, chains, gamma))
        if it > 0 and bounds[-1] - bounds[-2] < tol * max(1.0, abs(bounds[-1])):
            converged = True
            break

    best_labeling, best_energy = _merge_sweep(problem, best_labeling, best_energy)
    return SolveReport(
        labeling=best_labeling,
        energy=best_energy,
        bounds=bounds,
        iterations=iterations,
        converged=converged,
    )


def _merge_sweep(problem: MRFProblem, labeling: np.ndarray, energy: float):
    """Greedy whole-label merge moves.

    Message passing settles ties node by node, so two labels describing
    the same plane can survive side by side at equal energy plus their
    boundary cost; relabeling one class into another removes that cost in
    a single move.  Only strictly improving moves are taken.
    """
    labeling = labeling.copy()
    while True:
        labs = sorted(set(labeling.tolist()))
        best = None
        for i, a in enumerate(labs):
            for b in labs[i + 1 :]:
                for src, dst in ((a, b), (b, a)):
                    cand = labeling.copy()
                    cand[cand == src] = dst
                    e = total_energy(problem, cand)
                    if e < energy - 1e-12 and (best is None or e < best[0]):
                        best = (e, src, dst)
        if best is None:
            return labeling, energy
        energy, src, dst = best
        labeling[labeling == src] = dst


def brute_force_map(problem: MRFProblem, cap: int = 10_000_000):
    """Exhaustive exact minimum; ties resolve to the lexicographically
    smallest labeling.

    Assignments are enumerated in chunks and scored vectorized, first node
    as the most significant digit, so the first minimizer found is the
    lexicographically smallest.  Raises TooLarge when |labels|^|nodes|
    exceeds the cap.
    """
    n, big_l = problem.n_nodes, problem.n_labels
    total = big_l**n
    if total > cap:
        raise TooLarge(f"{big_l}^{n} labelings exceed the cap")
    weight = big_l ** np.arange(n - 1, -1, -1, dtype=np.int64)
    best = None
    best_energy = np.inf
    chunk = 262_144
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        assign = (idx[:, None] // weight[None, :]) % big_l
        e = problem.unary[np.arange(n)[None, :], assign].sum(axis=1)
        for ei, (u, v) in enumerate(problem.edges):
            e += problem.pairwise[ei][assign[:, u], assign[:, v]]
        i = int(np.argmin(e))
        if e[i] < best_energy:
            best_energy = float(e[i])
            best = assign[i].copy()
    return best, float(best_energy)
