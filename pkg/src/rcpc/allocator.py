"""Per-slice quantization step allocation.

Rates handled here are per-block averages in bits per sample. Budgets are
expressed in "block units": the target rate times the (pixel-weighted)
number of blocks, where a full block has weight 1 and a partial edge block
its pixel fraction.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .rdmodel import RdModel, lambda_from_variance, rd_entry

log = logging.getLogger(__name__)

INFTY_THRESHOLD = 0.1


class BlockClass(enum.IntEnum):
    NORMAL = 0
    INFTY = 1
    SKIP = 2


@dataclass
class SliceAllocation:
    steps: np.ndarray
    skip_flags: np.ndarray
    predicted_rate: float
    predicted_distortion: float
    effective_target: float
    classes: np.ndarray | None = None
    feasible: bool = True
    iterations: int = 0
    notes: list = field(default_factory=list)


def skip_fraction(target: float) -> float:
    if target <= 0:
        raise ValueError("target rate must be positive")
    return (1.0 - target) ** 3 if target <= 1.0 else 0.0


def classify(sigma2, target: float, infty_threshold: float = INFTY_THRESHOLD, allow_skip: bool = True):
    """Label blocks NORMAL / INFTY / SKIP.

    INFTY marks near-constant residuals. When ``target <= 1`` a fraction
    ``(1 - target)**3`` of all blocks is skipped, taking the remaining blocks
    in decreasing order of the Laplace parameter (ties by block index).
    """
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    classes = np.full(sigma2.shape, BlockClass.NORMAL, dtype=np.int8)
    infty = ~(sigma2 >= infty_threshold)  # nan counts as INFTY
    classes[infty] = BlockClass.INFTY
    if allow_skip and target <= 1.0:
        n_skip = math.ceil(skip_fraction(target) * sigma2.size - 1e-12)
        flat = sigma2.ravel()
        candidates = np.flatnonzero(~infty.ravel())
        order = candidates[np.argsort(flat[candidates], kind="stable")]
        classes.reshape(-1)[order[:n_skip]] = BlockClass.SKIP
    return classes


def project_l1(rates, r_target: float):
    """Euclidean projection of ``rates`` onto ``{R >= 0, sum(R) = r_target}``.

    Sort-and-threshold: with ``mu`` sorted descending, ``rho`` is the largest
    ``j`` with ``mu_j - (sum_{i<=j} mu_i - r_target)/j > 0`` and the result is
    ``max(rates - theta, 0)``.
    """
    v = np.asarray(rates, dtype=np.float64)
    if not r_target > 0:
        raise ValueError("projection target must be positive")
    if v.size == 0:
        return v.copy()
    mu = np.sort(v)[::-1]
    excess = np.cumsum(mu) - r_target
    j = np.arange(1, v.size + 1)
    rho = int(np.flatnonzero(mu - excess / j > 0)[-1]) + 1
    theta = excess[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


def initial_steps(projected_rates, lambdas, clip: int | None = None, q_max: int = 255, model: RdModel | None = None):
    model = model or RdModel()
    limit = min(clip, q_max) if clip is not None else q_max
    return np.minimum(model.inverse_rate(lambdas, projected_rates, q_max), limit)


def infty_rate(steps, model: RdModel | None = None):
    """Modelled rate of blocks driven by quantization noise only."""
    model = model or RdModel()
    q = np.asarray(steps, dtype=np.float64)
    return model.rate(np.sqrt(24.0 / (q * q)), q)


def infty_target_adjust(r_target: float, infty_steps, weights=None, model: RdModel | None = None):
    """Remove the INFTY blocks' share from the budget; returns ``(target, clamped)``."""
    q = np.asarray(infty_steps, dtype=np.float64).ravel()
    if q.size == 0:
        return float(r_target), False
    w = np.ones_like(q) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    adjusted = r_target - float(np.sum(w * infty_rate(q, model)))
    if adjusted < 0:
        return 0.0, True
    return adjusted, False


def assign_infty(classes, steps, prev_steps=None):
    """Give INFTY blocks the step of the last NORMAL block seen in the band.

    Blocks are scanned in order along each band. Without a preceding NORMAL
    block the previous slice's step at the same position is used (1 on the
    first slice); if the last non-INFTY block seen was SKIP the block is
    skipped too. Returns new ``(steps, classes)`` arrays.
    """
    classes = np.array(classes, dtype=np.int8)
    steps = np.array(steps, dtype=np.int64)
    infty, skip, normal = int(BlockClass.INFTY), int(BlockClass.SKIP), int(BlockClass.NORMAL)
    rows = classes.tolist()
    for z in np.flatnonzero((classes == infty).any(axis=1)):
        last_class = None
        last_step = None
        for bx, c in enumerate(rows[z]):
            if c == infty:
                if last_class == skip:
                    classes[z, bx] = skip
                elif last_class == normal:
                    steps[z, bx] = last_step
                elif prev_steps is not None:
                    steps[z, bx] = prev_steps[z, bx]
                else:
                    steps[z, bx] = 1
            else:
                last_class = c
                last_step = steps[z, bx]
    return steps, classes


@njit(cache=True)
def _refit_window(order, k, node, stage, gain, loss, need, window):
    """Exact choice of the moves near the budget cut.

    Moves before the window stay promoted, moves after it stay out. Every
    subset of the window that respects stage order and meets ``need`` is
    scored; the one adding the least distortion wins. Returns a flag per
    move in ``order``.
    """
    m = order.size
    size = min(window, m)
    start = max(0, min(k - size // 2, m - size))
    take = np.zeros(m, dtype=np.bool_)
    head_gain = 0.0
    for i in range(start):
        head_gain += gain[order[i]]
    req = np.zeros(size, dtype=np.int64)
    wg = np.empty(size)
    wl = np.empty(size)
    for j in range(size):
        mj = order[start + j]
        wg[j] = gain[mj]
        wl[j] = loss[mj]
        for i in range(size):
            mi = order[start + i]
            if node[mi] == node[mj] and stage[mi] < stage[mj]:
                req[j] |= 1 << i
    # subset sums and required-move unions built by dropping the lowest bit
    n_masks = 1 << size
    g = np.empty(n_masks)
    c = np.empty(n_masks)
    need_set = np.empty(n_masks, dtype=np.int64)
    g[0] = head_gain
    c[0] = 0.0
    need_set[0] = 0
    best_mask = 0 if head_gain >= need else -1
    best_cost = 0.0 if best_mask == 0 else np.inf
    for mask in range(1, n_masks):
        low = mask & -mask
        j = 0
        while (low >> j) != 1:
            j += 1
        rest = mask ^ low
        g[mask] = g[rest] + wg[j]
        c[mask] = c[rest] + wl[j]
        need_set[mask] = need_set[rest] | req[j]
        if (need_set[mask] & ~mask) == 0 and g[mask] >= need and c[mask] < best_cost:
            best_cost = c[mask]
            best_mask = mask
    if best_mask < 0:
        for i in range(k):
            take[i] = True
        return take
    for i in range(start):
        take[i] = True
    for j in range(size):
        if (best_mask >> j) & 1:
            take[start + j] = True
    return take


@njit(cache=True)
def _fill(i, k, rtab, dtab, lam, w):
    # tables are filled on first touch; the search visits few levels per node
    r, d = rd_entry(lam[i], 2 * k + 1)
    rtab[i, k] = w[i] * r
    dtab[i, k] = w[i] * d


@njit(cache=True)
def _totals(q, rtab, dtab, lam, w):
    r = 0.0
    d = 0.0
    for i in range(q.size):
        k = (q[i] - 1) >> 1
        if np.isnan(rtab[i, k]):
            _fill(i, k, rtab, dtab, lam, w)
        r += rtab[i, k]
        d += dtab[i, k]
    return r, d


@njit(cache=True)
def _diet_pass(cur, depth, lam_mult, underused, rtab, dtab, lam, w, r_target, limit, tol, window):
    n = cur.size
    lo = np.empty(n, dtype=np.int64)
    nmoves = np.empty(n, dtype=np.int64)
    first_stage = np.empty(n, dtype=np.int64)
    total = 0
    for i in range(n):
        top = cur[i] if underused else limit
        b = max(cur[i] - 2 * depth, 1)
        hi = min(cur[i] + 2 * depth, top)
        lo[i] = b
        nmoves[i] = max(hi - b, 0) // 2
        first_stage[i] = (b - (cur[i] - 2 * depth)) // 2
        total += nmoves[i]
    # moves laid out stage-major so a stable sort breaks ties by stage, then node
    node = np.empty(total, dtype=np.int64)
    stage = np.empty(total, dtype=np.int64)
    gain = np.empty(total)
    loss = np.empty(total)
    cost = np.empty(total)
    last = np.full(n, np.inf)
    p = 0
    for s in range(2 * depth):
        for i in range(n):
            t = s - first_stage[i]
            if t < 0 or t >= nmoves[i]:
                continue
            k = ((lo[i] - 1) >> 1) + t
            if np.isnan(rtab[i, k]):
                _fill(i, k, rtab, dtab, lam, w)
            if np.isnan(rtab[i, k + 1]):
                _fill(i, k + 1, rtab, dtab, lam, w)
            g = rtab[i, k] - rtab[i, k + 1]
            l = dtab[i, k + 1] - dtab[i, k]
            c = min(lam_mult * g - l, last[i])
            last[i] = c
            node[p] = i
            stage[p] = s
            gain[p] = g
            loss[p] = l
            cost[p] = c
            p += 1
    cand = lo.copy()
    r0, _ = _totals(lo, rtab, dtab, lam, w)
    need = r0 - r_target
    if need > tol and total > 0:
        order = np.argsort(-cost, kind="mergesort")
        saving = 0.0
        k = total
        for j in range(total):
            saving += gain[order[j]]
            if saving >= need - tol:
                k = j + 1
                break
        take = _refit_window(order, k, node, stage, gain, loss, need - tol, window)
        for j in range(total):
            if take[j]:
                cand[node[order[j]]] += 2
    r, d = _totals(cand, rtab, dtab, lam, w)
    return cand, r, d


@njit(cache=True)
def _search(cur, depth, underused, best_q, best, rtab, dtab, lam, w, r_target, limit, tol,
            lambda_mult, max_lambda_halvings, budget, window, patience):
    """Drifting local search; ``best`` is ``[rate, distortion, found]``."""
    cur_r, cur_d = _totals(cur, rtab, dtab, lam, w)
    lam_mult = lambda_mult
    done = 0
    # an infeasible start climbs by at most 2 per pass, so allow enough
    # extra passes to reach the all-limit chain
    extra = (limit + 1) // 2
    stale = 0
    while done < budget:
        halvings = 0
        while True:
            cand, cand_r, cand_d = _diet_pass(cur, depth, lam_mult, underused, rtab, dtab, lam, w,
                                              r_target, limit, tol, window)
            if done == 0 or cand_d < cur_d or halvings >= max_lambda_halvings:
                break
            lam_mult *= 0.5
            halvings += 1
        settled = (not underused) and np.array_equal(cand, cur)
        underused = False
        cur_feasible = cur_r <= r_target + tol
        cur, cur_r, cur_d = cand, cand_r, cand_d
        if cur_r <= r_target + tol:
            if best[2] == 0.0 or cur_d < best[1]:
                best_q[:] = cur
                best[0] = cur_r
                best[1] = cur_d
                best[2] = 1.0
                stale = 0
            else:
                stale += 1
            done += 1
            if settled or (patience > 0 and stale >= patience):
                break
        elif cur_feasible or extra <= 0:
            done += 1
        else:
            extra -= 1
    return done


@njit(cache=True)
def _selective_diet(q0, rtab, dtab, lam, w, r_target, limit, lambda_mult, max_iters,
                    max_lambda_halvings, max_escapes, escape_moves, window, patience):
    tol = 1e-9 * max(1.0, abs(r_target))
    best_q = q0.copy()
    best = np.zeros(3)
    r0, d0 = _totals(q0, rtab, dtab, lam, w)
    if r0 <= r_target + tol:
        best[0] = r0
        best[1] = d0
        best[2] = 1.0
    iterations = _search(q0.copy(), 1, r0 <= 0.99 * r_target, best_q, best, rtab, dtab, lam, w,
                         r_target, limit, tol, lambda_mult, max_lambda_halvings, max_iters, window,
                         patience)
    # leave local minima: deeper ladders around the best chain, every lambda
    # on the halving ladder, accepting only improvements
    depth = 2
    spent = 0
    while best[2] > 0 and depth <= 1 + max_escapes and 2 * depth < limit + 1:
        cost = (max_lambda_halvings + 1) * 2 * depth * q0.size
        if spent + cost > escape_moves:
            break
        spent += cost
        found = False
        pick = best_q.copy()
        pick_r = best[0]
        pick_d = best[1]
        m = lambda_mult
        for _ in range(max_lambda_halvings + 1):
            cand, cand_r, cand_d = _diet_pass(best_q, depth, m, False, rtab, dtab, lam, w,
                                              r_target, limit, tol, window)
            if cand_r <= r_target + tol and cand_d < pick_d:
                pick = cand
                pick_r = cand_r
                pick_d = cand_d
                found = True
            m *= 0.5
        iterations += 1
        if found:
            best_q[:] = pick
            best[0] = pick_r
            best[1] = pick_d
            iterations += _search(best_q.copy(), 1, False, best_q, best, rtab, dtab, lam, w, r_target,
                                  limit, tol, lambda_mult, max_lambda_halvings, max_iters, window,
                                  patience)
            depth = 2
        else:
            depth += 1
    return best_q, best[0], best[1], best[2] > 0, iterations


def _rd_tables(lam, w, limit, model):
    """Weighted rate/distortion tables over odd steps; NaN entries are filled lazily."""
    m = (limit + 1) // 2
    if model.tables is None:
        return np.full((lam.size, m), np.nan), np.full((lam.size, m), np.nan)
    qs = np.arange(1, limit + 1, 2, dtype=np.float64)
    r = np.asarray(model.rate(lam[:, None], qs[None, :]), dtype=np.float64)
    d = np.asarray(model.distortion(lam[:, None], qs[None, :]), dtype=np.float64)
    return np.ascontiguousarray(w[:, None] * r), np.ascontiguousarray(w[:, None] * d)


def selective_diet(
    steps,
    lambdas,
    r_target: float,
    weights=None,
    lambda_mult: float = 50.0,
    clip: int | None = None,
    q_max: int = 255,
    max_iters: int = 10,
    max_lambda_halvings: int = 8,
    max_escapes: int = 10,
    escape_moves: int = 20000,
    window: int = 12,
    patience: int = 3,
    model: RdModel | None = None,
) -> SliceAllocation:
    """Greedy local search over odd steps under a rate budget.

    A pass gives every node a ladder of levels ``q - 2*depth ... q + 2*depth``
    and starts from the bottom of it (lowest distortion, highest rate). Single
    level promotions are then taken in decreasing order of
    ``J = [D(low) - D(high)] + lambda * [R(low) - R(high)]`` until the rate
    budget is met, and the ``window`` moves around the cut are chosen
    exactly. Ordinary iterations use depth 1, the -2/default/+2 chain. An
    underused budget at entry restricts the first pass to the default and
    lower levels. When a pass fails to lower distortion, ``lambda`` is halved
    and the pass repeated. Once the chain settles, deeper ladders are tried
    from the best chain to leave local minima, for as long as the ladders
    stay within ``escape_moves`` candidate moves in total. The best feasible
    chain seen is returned.
    """
    model = model or RdModel()
    q0 = np.asarray(steps, dtype=np.int64).ravel().copy()
    lam = np.asarray(lambdas, dtype=np.float64).ravel()
    n = q0.size
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    limit = min(clip, q_max) if clip is not None else q_max
    q0 = np.clip(q0, 1, limit)
    if n == 0:
        return SliceAllocation(q0, np.zeros(0, dtype=bool), 0.0, 0.0, r_target)
    if window < 1 or window > 20:
        raise ValueError("window must be in 1..20")
    rtab, dtab = _rd_tables(lam, w, limit, model)
    q, r, d, feasible, iterations = _selective_diet(
        q0, rtab, dtab, lam, w, float(r_target), int(limit), float(lambda_mult), int(max_iters),
        int(max_lambda_halvings), int(max_escapes), int(escape_moves), int(window),
        int(patience),
    )
    notes = []
    if not feasible:
        # budget below what the step limit allows: fall back to the coarsest chain
        q = np.full(n, limit, dtype=np.int64)
        r, d = _totals(q, rtab, dtab, lam, w)
        notes.append("target below the rate reachable with the step limit")
    return SliceAllocation(
        steps=q,
        skip_flags=np.zeros(n, dtype=bool),
        predicted_rate=float(r),
        predicted_distortion=float(d),
        effective_target=r_target,
        feasible=bool(feasible),
        iterations=int(iterations),
        notes=notes,
    )


def fill_skipped_steps(steps, skip, prev_steps=None):
    """Give skipped blocks the running step of their band so side info stays consistent."""
    steps = np.array(steps, dtype=np.int64)
    for z in range(steps.shape[0]):
        ref = 1 if prev_steps is None else int(prev_steps[z, 0])
        for bx in range(steps.shape[1]):
            if skip[z, bx]:
                steps[z, bx] = ref
            else:
                ref = steps[z, bx]
    return steps


def allocate_slice(
    sigma2,
    target: float,
    weights,
    budget: float,
    prev_steps=None,
    clip: int | None = None,
    q_max: int = 255,
    lambda_mult: float = 50.0,
    max_iters: int = 10,
    max_lambda_halvings: int = 8,
    allow_skip: bool = True,
    model: RdModel | None = None,
    noise_steps=None,
) -> SliceAllocation:
    """Full allocation pipeline for one slice.

    ``sigma2`` are the lossless-pass residual variances of the slice's blocks,
    shape ``(bands, blocks_x)``; ``budget`` is the slice budget in block units
    (side information already removed); ``target`` drives the skip fraction.
    """
    model = model or RdModel()
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    shape = sigma2.shape
    limit = min(clip, q_max) if clip is not None else q_max
    if noise_steps is None:
        noise_steps = prev_steps
    q_prev = np.ones(shape) if noise_steps is None else np.asarray(noise_steps, dtype=np.float64)
    classes = classify(sigma2, target, allow_skip=allow_skip)
    steps = np.ones(shape, dtype=np.int64)
    normal = classes == BlockClass.NORMAL
    sig_aug = np.where(normal, sigma2 + q_prev * q_prev / 12.0, 1.0)
    lambdas = lambda_from_variance(sig_aug)
    notes = []

    # provisional INFTY share so the projection starts near the final budget
    infty = classes == BlockClass.INFTY
    provisional = q_prev if prev_steps is not None else np.ones(shape)
    proj_budget, _ = infty_target_adjust(budget, provisional[infty], weights[infty], model)
    if normal.any():
        lossless_rates = model.rate(lambdas[normal], 1)
        if proj_budget > 0:
            projected = project_l1(lossless_rates, proj_budget)
        else:
            projected = np.zeros_like(lossless_rates)
        steps[normal] = initial_steps(projected, lambdas[normal], clip, q_max, model)

    steps, classes = assign_infty(classes, steps, prev_steps)
    steps = np.minimum(steps, limit)
    normal = classes == BlockClass.NORMAL
    infty = classes == BlockClass.INFTY
    sd_budget, clamped = infty_target_adjust(budget, steps[infty], weights[infty], model)
    if clamped:
        notes.append("INFTY blocks exceed the slice budget")

    pred_rate = float(np.sum(weights[infty] * infty_rate(steps[infty], model))) if infty.any() else 0.0
    pred_dist = 0.0
    if infty.any():
        q_inf = steps[infty].astype(np.float64)
        pred_dist = float(np.sum(weights[infty] * model.distortion(np.sqrt(24.0 / (q_inf * q_inf)), q_inf)))
    feasible = not clamped
    iterations = 0
    if normal.any():
        sd = selective_diet(
            steps[normal], lambdas[normal], sd_budget, weights[normal],
            lambda_mult=lambda_mult, clip=clip, q_max=q_max, max_iters=max_iters,
            max_lambda_halvings=max_lambda_halvings, model=model,
        )
        steps[normal] = sd.steps
        pred_rate += sd.predicted_rate
        pred_dist += sd.predicted_distortion
        feasible = feasible and sd.feasible
        iterations = sd.iterations
        notes.extend(sd.notes)
    skip = classes == BlockClass.SKIP
    if skip.any():
        pred_dist += float(np.sum(weights[skip] * sigma2[skip]))
    steps = fill_skipped_steps(steps, skip, prev_steps)
    return SliceAllocation(
        steps=steps,
        skip_flags=skip,
        predicted_rate=pred_rate,
        predicted_distortion=pred_dist,
        effective_target=sd_budget,
        classes=classes,
        feasible=feasible,
        iterations=iterations,
        notes=notes,
    )
