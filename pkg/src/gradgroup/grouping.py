"""Choose K task groups that cover every task and maximize total similarity.

Scoring
-------
The collective score of a task inside a group is the mean similarity to the
other members (0.0 for a singleton). A task may sit in several groups; its
score under a grouping is the best collective score among the groups that
contain it, which is also the group it is served by at inference time. The
overall score of a grouping is the sum of those per-task scores.

All sums go through ``math.fsum`` so totals are correctly rounded and do
not depend on evaluation order. That is what lets the exhaustive search,
the branch-and-bound search and the parallel variant agree bit for bit.

Canonical form
--------------
A group is the tuple of its labels sorted as strings; a grouping is the
sorted tuple of its groups. Ties on the overall score go to the
lexicographically smallest canonical form.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from gradgroup.errors import (
    ConfigError,
    GroupingError,
    Infeasible,
    TaskNotInGroup,
    TooManyTasks,
    UncoveredTask,
    UnknownLabel,
)
from gradgroup.similarity import SimilarityMatrix

EXHAUSTIVE_MAX_TASKS = 10
MODES = ("exhaustive", "branch-and-bound")

# slack for vectorized (non-fsum) prefilters; every decision is re-made exactly
_APPROX_TOL = 1e-9


def canonical_group(group: Iterable[str]) -> tuple:
    return tuple(sorted(group))


@dataclass(frozen=True)
class Grouping:
    groups: tuple
    labels: tuple

    def __post_init__(self):
        groups = tuple(canonical_group(g) for g in self.groups)
        labels = tuple(self.labels)
        known = set(labels)
        seen = set()
        for g in groups:
            if not g:
                raise GroupingError("groups must be non-empty")
            if len(set(g)) != len(g):
                raise GroupingError(f"group {list(g)} repeats a task")
            bad = [t for t in g if t not in known]
            if bad:
                raise UnknownLabel(f"group member {bad[0]!r} is not a known task")
            if g in seen:
                raise GroupingError(f"group {list(g)} appears twice")
            seen.add(g)
        uncovered = known.difference(*map(set, groups)) if groups else known
        if uncovered:
            raise UncoveredTask(f"task(s) not covered by any group: {sorted(uncovered)}")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "labels", labels)

    @property
    def k(self) -> int:
        return len(self.groups)

    def canonical(self) -> "Grouping":
        return Grouping(tuple(sorted(self.groups)), self.labels)

    def containing(self, task: str) -> list[int]:
        return [i for i, g in enumerate(self.groups) if task in g]


@dataclass(frozen=True)
class GroupingResult:
    grouping: Grouping
    overall: float
    per_task_collective: dict
    assignment: dict

    def to_json(self) -> dict:
        return {
            "k": self.grouping.k,
            "groups": [list(g) for g in self.grouping.groups],
            "overall_score": self.overall,
            "per_task_collective": dict(self.per_task_collective),
            "assignment": dict(self.assignment),
        }


@dataclass(frozen=True)
class SearchConfig:
    k: int
    max_group_size: int | None = None  # None: no cap
    mode: str = "branch-and-bound"
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.k, bool) or not isinstance(self.k, int) or self.k < 1:
            raise ConfigError(f"k must be a positive integer, got {self.k!r}")
        if self.max_group_size is not None and self.max_group_size < 1:
            raise ConfigError("max_group_size must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"unknown search mode {self.mode!r}; expected one of {MODES}")
        if self.workers < 1:
            raise ConfigError("workers must be positive")


# -- scoring ----------------------------------------------------------------

def collective_score(task: str, group: Iterable[str], S: SimilarityMatrix) -> float:
    """Mean similarity of ``task`` to the other members of ``group``."""
    group = list(group)
    for m in group:
        S.index(m)
    if task not in group:
        raise TaskNotInGroup(f"task {task!r} is not in group {sorted(group)}")
    i = S.index(task)
    others = [S.index(m) for m in group if m != task]
    if not others:
        return 0.0
    return math.fsum(S.values[i, j] for j in others) / len(others)


def task_score_in_grouping(task: str, grouping: Grouping, S: SimilarityMatrix) -> float:
    holders = grouping.containing(task)
    if not holders:
        raise UncoveredTask(f"task {task!r} is not in any group")
    return max(collective_score(task, grouping.groups[i], S) for i in holders)


def overall_score(grouping: Grouping, S: SimilarityMatrix) -> float:
    return math.fsum(task_score_in_grouping(t, grouping, S) for t in grouping.labels)


def assign_inference_groups(grouping: Grouping, S: SimilarityMatrix) -> dict[str, int]:
    """Index of the best-scoring containing group per task (lowest index on ties)."""
    out = {}
    for t in grouping.labels:
        holders = grouping.containing(t)
        if not holders:
            raise UncoveredTask(f"task {t!r} is not in any group")
        best_i, best_s = holders[0], collective_score(t, grouping.groups[holders[0]], S)
        for i in holders[1:]:
            s = collective_score(t, grouping.groups[i], S)
            if s > best_s:
                best_i, best_s = i, s
        out[t] = best_i
    return out


def evaluate_grouping(grouping: Grouping, S: SimilarityMatrix) -> GroupingResult:
    """Score an arbitrary grouping (groups keep their given order)."""
    if set(grouping.labels) != set(S.labels):
        raise UnknownLabel("grouping and similarity matrix cover different tasks")
    labels = S.labels
    grouping = Grouping(grouping.groups, labels)
    assignment = assign_inference_groups(grouping, S)
    per_task = {t: collective_score(t, grouping.groups[assignment[t]], S) for t in labels}
    overall = math.fsum(per_task[t] for t in labels)
    return GroupingResult(grouping, overall, per_task, assignment)


# -- shared search tables -----------------------------------------------------

class _Problem:
    """Candidate groups in canonical order plus their per-task score table.

    Tasks are indexed in sorted-label order, so comparing index tuples is
    the same as comparing label tuples.
    """

    def __init__(self, S: SimilarityMatrix, cfg: SearchConfig):
        self.S = S
        self.tasks = tuple(sorted(S.labels))
        n = self.n = len(self.tasks)
        cap = n if cfg.max_group_size is None else cfg.max_group_size
        if cap > n:
            raise ConfigError(f"max_group_size={cap} exceeds the number of tasks ({n})")
        self.k = cfg.k
        if cfg.k > n:
            raise Infeasible(f"k={cfg.k} exceeds the number of tasks ({n})")
        if cfg.k * cap < n:
            raise Infeasible(f"{cfg.k} groups of at most {cap} tasks cannot cover {n} tasks")

        self.candidates = [c for m in range(1, cap + 1)
                           for c in itertools.combinations(range(n), m)]
        self.candidates.sort()
        if len(self.candidates) < cfg.k:
            raise Infeasible(f"only {len(self.candidates)} distinct groups available for k={cfg.k}")
        self.masks = np.array([sum(1 << t for t in c) for c in self.candidates], dtype=np.int64)
        self.full = (1 << n) - 1

        self.scores = np.full((len(self.candidates), n), -np.inf)
        for ci, c in enumerate(self.candidates):
            members = [self.tasks[t] for t in c]
            for t in c:
                self.scores[ci, t] = collective_score(self.tasks[t], members, S)

    def total(self, chosen: Sequence[int]) -> float:
        best = self.scores[list(chosen)].max(axis=0)
        return math.fsum(best.tolist())

    def result(self, chosen: Sequence[int]) -> GroupingResult:
        groups = tuple(tuple(self.tasks[t] for t in self.candidates[ci]) for ci in chosen)
        grouping = Grouping(tuple(sorted(groups)), self.S.labels)
        return evaluate_grouping(grouping, self.S)


# -- exhaustive oracle --------------------------------------------------------

def exhaustive_best_grouping(S: SimilarityMatrix, cfg: SearchConfig,
                             chunk: int = 1 << 16) -> GroupingResult:
    """Enumerate every K-set of distinct candidate groups; keep the best cover."""
    if len(S) > EXHAUSTIVE_MAX_TASKS:
        raise TooManyTasks(f"exhaustive search is limited to {EXHAUSTIVE_MAX_TASKS} tasks, got {len(S)}")
    prob = _Problem(S, cfg)
    best_score, best_key, best_combo = -math.inf, None, None
    combos = itertools.combinations(range(len(prob.candidates)), prob.k)
    while True:
        block = np.array(list(itertools.islice(combos, chunk)), dtype=np.int64)
        if block.size == 0:
            break
        block = block.reshape(-1, prob.k)
        covered = np.bitwise_or.reduce(prob.masks[block], axis=1) == prob.full
        if not covered.any():
            continue
        block = block[covered]
        approx = prob.scores[block].max(axis=1).sum(axis=1)
        floor = max(approx.max(), best_score) - _APPROX_TOL * (1.0 + abs(approx.max()))
        for row in block[approx >= floor]:
            score = prob.total(row)
            key = sorted(tuple(prob.tasks[t] for t in prob.candidates[ci]) for ci in row)
            if score > best_score or (score == best_score and key < best_key):
                best_score, best_key, best_combo = score, key, tuple(row)
    if best_combo is None:
        raise Infeasible("no covering grouping exists")
    return prob.result(best_combo)


# -- branch and bound ---------------------------------------------------------

def _greedy_total(prob: _Problem):
    """Score of a greedy cover, or None if greedy fails to cover."""
    finite = prob.scores[np.isfinite(prob.scores)]
    floor = float(finite.min()) - 1.0
    cur = np.full(prob.n, floor)
    covered, chosen = 0, []
    cap = max(len(c) for c in prob.candidates)
    for step in range(prob.k):
        slots_after = prob.k - step - 1
        best_i, best_v = None, -math.inf
        for i in range(len(prob.candidates)):
            if i in chosen:
                continue
            cov = covered | int(prob.masks[i])
            if bin(prob.full & ~cov).count("1") > slots_after * cap:
                continue
            v = np.maximum(cur, prob.scores[i]).sum()
            if v > best_v:
                best_i, best_v = i, v
        if best_i is None:
            return None
        chosen.append(best_i)
        covered |= int(prob.masks[best_i])
        cur = np.maximum(cur, prob.scores[best_i])
    if covered != prob.full:
        return None
    return prob.total(chosen)


def _search_subtrees(prob: _Problem, firsts: Sequence[int], hint: float | None = None):
    """Depth-first search over selections whose first candidate is in ``firsts``.

    Candidates are taken in strictly increasing index order, which visits
    selections in canonical order; keeping the first of equal-scoring
    completions therefore applies the canonical tie rule, and a branch whose
    bound merely equals the incumbent can be dropped.

    ``hint`` is the score of some feasible cover. Until the search has its
    own incumbent, branches are cut only when their bound is strictly below
    it, so the canonically first optimum is never lost.
    """
    k, n_c = prob.k, len(prob.candidates)
    scores, masks, full = prob.scores, prob.masks, prob.full
    # suffix_best[i, t]: best score of task t among candidates i..end
    suffix_best = np.full((n_c + 1, prob.n), -np.inf)
    suffix_cover = np.zeros(n_c + 1, dtype=np.int64)
    for i in range(n_c - 1, -1, -1):
        suffix_best[i] = np.maximum(suffix_best[i + 1], scores[i])
        suffix_cover[i] = suffix_cover[i + 1] | masks[i]

    best = [-math.inf, None]

    def beaten(bound):
        if best[1] is not None:
            return bound <= best[0]
        return hint is not None and bound < hint

    def target():
        if best[1] is not None:
            return best[0]
        return -math.inf if hint is None else hint

    def finish(start, cur, covered, chosen):
        # last slot, vectorized over all remaining candidates
        approx = np.maximum(cur, scores[start:]).sum(axis=1)
        approx[(covered | masks[start:]) != full] = -np.inf
        top = approx.max()
        if top == -np.inf:
            return
        floor = target() - _APPROX_TOL * (1.0 + abs(top))
        for off in np.nonzero(approx >= floor)[0]:
            ci = start + int(off)
            total = math.fsum(np.maximum(cur, scores[ci]).tolist())
            if total > best[0]:
                best[0], best[1] = total, chosen + (ci,)
                floor = best[0] - _APPROX_TOL * (1.0 + abs(top))

    def dfs(start, depth, cur, covered, chosen):
        left = k - depth
        if left == 1:
            finish(start, cur, covered, chosen)
            return
        stop = n_c - left + 1
        if target() > -math.inf:
            # Slot bound: uncovered tasks are pinned at their best remaining
            # score, covered ones at their current score; each of the `left`
            # slots adds at most the largest single-candidate gain over that
            # baseline. Valid for any finite baseline, so no tie subtlety;
            # it is only used with a safety margin.
            base = np.where(np.isfinite(cur), cur, suffix_best[start])
            gains = np.maximum(scores[start:] - base, 0.0).sum(axis=1)
            tail = np.maximum.accumulate(gains[::-1])[::-1]
            nxt = np.append(tail[1:], 0.0)
            slot_bound = base.sum() + gains + (left - 1) * nxt
            margin = _APPROX_TOL * (1.0 + abs(target()))
            keep = np.nonzero(slot_bound[:stop - start] >= target() - margin)[0] + start
        else:
            keep = range(start, stop)
        for i in keep:
            i = int(i)
            new_cov = covered | int(masks[i])
            if (full & ~(new_cov | int(suffix_cover[i + 1]))) != 0:
                continue
            new_cur = np.maximum(cur, scores[i])
            if beaten(math.fsum(np.maximum(new_cur, suffix_best[i + 1]).tolist())):
                continue
            dfs(i + 1, depth + 1, new_cur, new_cov, chosen + (i,))

    start_cur = np.full(prob.n, -np.inf)
    for i in firsts:
        if i > n_c - k:
            break
        if k == 1:
            finish(i, start_cur, 0, ())
            # finish scans i..end; a single call covers every first index
            break
        cov = int(masks[i])
        if (full & ~(cov | int(suffix_cover[i + 1]))) != 0:
            continue
        cur = scores[i].copy()
        if beaten(math.fsum(np.maximum(cur, suffix_best[i + 1]).tolist())):
            continue
        dfs(i + 1, 1, cur, cov, (i,))
    return best[0], best[1]


def _worker(args):
    S, cfg, firsts, hint = args
    prob = _Problem(S, cfg)
    return _search_subtrees(prob, firsts, hint)


def branch_and_bound_grouping(S: SimilarityMatrix, cfg: SearchConfig) -> GroupingResult:
    """Exact search with an admissible per-task bound.

    With ``cfg.workers > 1`` the first-level branches are split across
    processes, each with its own incumbent; results are merged by score and
    then canonical form, so the answer is the same for any worker count.
    """
    prob = _Problem(S, cfg)
    n_c = len(prob.candidates)
    hint = _greedy_total(prob)
    if cfg.workers == 1 or prob.k == 1:
        score, chosen = _search_subtrees(prob, range(n_c), hint)
    else:
        parts = [list(range(w, n_c, cfg.workers)) for w in range(cfg.workers)]
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            found = list(pool.map(_worker, [(S, cfg, p, hint) for p in parts if p]))
        score, chosen = -math.inf, None
        for s, c in found:
            if c is None:
                continue
            if chosen is None or s > score or (s == score and _key(prob, c) < _key(prob, chosen)):
                score, chosen = s, c
    if chosen is None:
        raise Infeasible("no covering grouping exists")
    return prob.result(chosen)


def _key(prob: _Problem, chosen):
    return [prob.candidates[ci] for ci in chosen]


def find_best_grouping(S: SimilarityMatrix, cfg: SearchConfig) -> GroupingResult:
    if cfg.mode == "exhaustive":
        return exhaustive_best_grouping(S, cfg)
    return branch_and_bound_grouping(S, cfg)


def sweep_k(S: SimilarityMatrix, ks: Iterable[int], mode: str = "branch-and-bound",
            max_group_size: int | None = None, workers: int = 1) -> list[tuple[int, float]]:
    """Best overall score for each K."""
    return [(k, find_best_grouping(S, SearchConfig(k, max_group_size, mode, workers)).overall)
            for k in ks]
