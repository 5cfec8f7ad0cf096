"""Compiled inner loop of the sum-of-trees sampler.

Every tree lives in row ``t`` of a set of ``(m, C)`` node-pool arrays:

    var    -1 leaf, -2 free slot, otherwise splitting variable
    split  split value (go left iff x < split)
    left, right, parent, depth
    mu     leaf value

``leaf_of[t, i]`` is the leaf of tree ``t`` holding observation ``i``. Data
arrive column-major (``Xt`` is K x n) together with dense per-column ranks so
that distinct values inside a node can be counted without sorting.

The random stream is reseeded at the top of every iteration from
``(seed, iteration)``, so a chain is reproducible from those two integers
alone regardless of what ran before it in the same process.
"""

import math

import numpy as np
from numba import njit

GROW, PRUNE, CHANGE = 0, 1, 2
LEAF, FREE = -1, -2
LOG_2PI = math.log(2.0 * math.pi)


@njit(cache=True)
def iteration_seed(seed, iteration):
    # splitmix64 finalizer; numba's MT19937 takes a 32-bit seed
    z = (np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15) + np.uint64(iteration)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return np.uint32(z & np.uint64(0xFFFFFFFF))


@njit(cache=True)
def seed_rng(seed):
    np.random.seed(seed)


@njit(cache=True)
def node_log_marginal(nb, s, ss, sigma_sq, sigma_mu_sq):
    """log of int N(r | mu, sigma_sq I) N(mu | 0, sigma_mu_sq) dmu from sufficient stats."""
    denom = sigma_sq + nb * sigma_mu_sq
    return (-0.5 * nb * (LOG_2PI + math.log(sigma_sq))
            + 0.5 * math.log(sigma_sq / denom)
            - ss / (2.0 * sigma_sq)
            + sigma_mu_sq * s * s / (2.0 * sigma_sq * denom))


@njit(cache=True)
def log_p_split(alpha, beta, d):
    return math.log(alpha) - beta * math.log(1.0 + d)


@njit(cache=True)
def log_p_leaf(alpha, beta, d):
    return math.log1p(-alpha * (1.0 + d) ** (-beta))


@njit(cache=True)
def log_kind_prob(kind, n_internal, move_probs):
    if n_internal == 0:
        return 0.0 if kind == GROW else -np.inf
    p = move_probs[kind] / (move_probs[0] + move_probs[1] + move_probs[2])
    return math.log(p) if p > 0 else -np.inf


# ---------------------------------------------------------------- node data


@njit(cache=True)
def var_splittable(k, idx, cnt, ranks, all_distinct):
    if cnt < 2:
        return False
    if all_distinct[k]:
        return True
    r0 = ranks[k, idx[0]]
    for j in range(1, cnt):
        if ranks[k, idx[j]] != r0:
            return True
    return False


@njit(cache=True)
def avail_weight(idx, cnt, ranks, all_distinct, weights):
    total = 0.0
    for k in range(weights.shape[0]):
        if var_splittable(k, idx, cnt, ranks, all_distinct):
            total += weights[k]
    return total


@njit(cache=True)
def n_candidates(k, idx, cnt, ranks, nuniq, all_distinct):
    """Distinct values of column k among the node's rows, minus the smallest."""
    if cnt < 2:
        return 0
    if all_distinct[k]:
        return cnt - 1
    seen = np.zeros(nuniq[k], dtype=np.bool_)
    d = 0
    for j in range(cnt):
        r = ranks[k, idx[j]]
        if not seen[r]:
            seen[r] = True
            d += 1
    return d - 1


@njit(cache=True)
def log_rule_prob(k, idx, cnt, ranks, nuniq, all_distinct, weights):
    wsum = avail_weight(idx, cnt, ranks, all_distinct, weights)
    nc = n_candidates(k, idx, cnt, ranks, nuniq, all_distinct)
    if wsum <= 0.0 or nc <= 0 or not var_splittable(k, idx, cnt, ranks, all_distinct):
        return -np.inf
    return math.log(weights[k]) - math.log(wsum) - math.log(nc)


@njit(cache=True)
def draw_variable(idx, cnt, ranks, all_distinct, weights):
    wsum = avail_weight(idx, cnt, ranks, all_distinct, weights)
    if wsum <= 0.0:
        return -1
    u = np.random.random() * wsum
    last = -1
    acc = 0.0
    for k in range(weights.shape[0]):
        if var_splittable(k, idx, cnt, ranks, all_distinct):
            acc += weights[k]
            last = k
            if u < acc:
                return k
    return last


@njit(cache=True)
def draw_split_value(k, idx, cnt, ranks, nuniq, uniq):
    """Uniform draw among the node's distinct values of column k above its minimum."""
    seen = np.zeros(nuniq[k], dtype=np.bool_)
    for j in range(cnt):
        seen[ranks[k, idx[j]]] = True
    n_present = 0
    for r in range(nuniq[k]):
        if seen[r]:
            n_present += 1
    target = np.random.randint(0, n_present - 1) + 1
    pos = 0
    for r in range(nuniq[k]):
        if seen[r]:
            if pos == target:
                return uniq[k, r]
            pos += 1
    return uniq[k, nuniq[k] - 1]


@njit(cache=True)
def rows_in_leaf(leaf_row, node, idx):
    cnt = 0
    for i in range(leaf_row.shape[0]):
        if leaf_row[i] == node:
            idx[cnt] = i
            cnt += 1
    return cnt


@njit(cache=True)
def is_descendant(node, ancestor, parent_row):
    while node >= 0:
        if node == ancestor:
            return True
        node = parent_row[node]
    return False


@njit(cache=True)
def rows_below(leaf_assign, rows, nrows, node, parent_row, idx):
    """Rows (taken from ``rows``) whose assigned leaf sits below ``node``."""
    cnt = 0
    for j in range(nrows):
        i = rows[j]
        if is_descendant(leaf_assign[i], node, parent_row):
            idx[cnt] = i
            cnt += 1
    return cnt


# ---------------------------------------------------------------- tree shape


@njit(cache=True)
def tree_counts(var_row, left_row, right_row):
    n_int = 0
    n_leaf = 0
    n_prunable = 0
    for j in range(var_row.shape[0]):
        v = var_row[j]
        if v >= 0:
            n_int += 1
            if var_row[left_row[j]] == LEAF and var_row[right_row[j]] == LEAF:
                n_prunable += 1
        elif v == LEAF:
            n_leaf += 1
    return n_int, n_leaf, n_prunable


@njit(cache=True)
def pick_node(var_row, left_row, right_row, what, count):
    """Uniformly pick the j-th leaf (what=0), internal node (1) or prunable node (2)."""
    target = np.random.randint(0, count)
    seen = 0
    for j in range(var_row.shape[0]):
        v = var_row[j]
        if what == 0:
            ok = v == LEAF
        elif what == 1:
            ok = v >= 0
        else:
            ok = v >= 0 and var_row[left_row[j]] == LEAF and var_row[right_row[j]] == LEAF
        if ok:
            if seen == target:
                return j
            seen += 1
    return -1


@njit(cache=True)
def free_slots(var_row):
    a = -1
    for j in range(1, var_row.shape[0]):
        if var_row[j] == FREE:
            if a < 0:
                a = j
            else:
                return a, j
    return -1, -1


@njit(cache=True)
def route_from(start, i, Xt, var_row, split_row, left_row, right_row, o_node, o_var, o_split):
    """Route row i downward from ``start``; node ``o_node`` uses the override rule."""
    node = start
    while var_row[node] >= 0:
        if node == o_node:
            k = o_var
            c = o_split
        else:
            k = var_row[node]
            c = split_row[node]
        node = left_row[node] if Xt[k, i] < c else right_row[node]
    return node


# ------------------------------------------------------------- move scoring


@njit(cache=True)
def grow_log_ratio(t, leaf, k, c, var, left, right, parent, depth,
                   resid, Xt, ranks, nuniq, all_distinct, weights,
                   alpha, beta, move_probs, sigma_sq, sigma_mu_sq, use_lik,
                   idx, cnt, n_int, n_leaf, n_prunable):
    """Score growing ``leaf`` with rule (k, c); ``idx[:cnt]`` are the leaf's rows."""
    var_row = var[t]
    lrule = log_rule_prob(k, idx, cnt, ranks, nuniq, all_distinct, weights)
    d = depth[t, leaf]

    # a parent that was prunable stops being so once this leaf splits
    p = parent[t, leaf]
    lost = 0
    if p >= 0:
        sib = right[t, p] if left[t, p] == leaf else left[t, p]
        if var_row[sib] == LEAF:
            lost = 1
    log_fwd = log_kind_prob(GROW, n_int, move_probs) - math.log(n_leaf) + lrule
    log_rev = log_kind_prob(PRUNE, n_int + 1, move_probs) - math.log(n_prunable + 1 - lost)
    lprior = (log_p_split(alpha, beta, d) + lrule + 2.0 * log_p_leaf(alpha, beta, d + 1)
              - log_p_leaf(alpha, beta, d))

    llik = 0.0
    if use_lik:
        nl = 0
        sl = 0.0
        ssl = 0.0
        nr = 0
        sr = 0.0
        ssr = 0.0
        for j in range(cnt):
            i = idx[j]
            r = resid[i]
            if Xt[k, i] < c:
                nl += 1
                sl += r
                ssl += r * r
            else:
                nr += 1
                sr += r
                ssr += r * r
        if nl == 0 or nr == 0:
            return -np.inf
        llik = (node_log_marginal(nl, sl, ssl, sigma_sq, sigma_mu_sq)
                + node_log_marginal(nr, sr, ssr, sigma_sq, sigma_mu_sq)
                - node_log_marginal(nl + nr, sl + sr, ssl + ssr, sigma_sq, sigma_mu_sq))
    return lprior + llik + log_rev - log_fwd


@njit(cache=True)
def prune_log_ratio(t, node, var, left, right, depth, leaf_of,
                    resid, ranks, nuniq, all_distinct, weights,
                    alpha, beta, move_probs, sigma_sq, sigma_mu_sq, use_lik,
                    idx, n_int, n_leaf, n_prunable):
    var_row = var[t]
    lc = left[t, node]
    rc = right[t, node]
    cnt = 0
    leaf_row = leaf_of[t]
    nl = 0
    sl = 0.0
    ssl = 0.0
    sr = 0.0
    ssr = 0.0
    for i in range(leaf_row.shape[0]):
        lf = leaf_row[i]
        if lf == lc or lf == rc:
            idx[cnt] = i
            cnt += 1
            r = resid[i]
            if lf == lc:
                nl += 1
                sl += r
                ssl += r * r
            else:
                sr += r
                ssr += r * r
    nr = cnt - nl
    k = var_row[node]
    lrule = log_rule_prob(k, idx, cnt, ranks, nuniq, all_distinct, weights)
    d = depth[t, node]

    log_fwd = log_kind_prob(PRUNE, n_int, move_probs) - math.log(n_prunable)
    log_rev = log_kind_prob(GROW, n_int - 1, move_probs) - math.log(n_leaf - 1) + lrule
    lprior = (log_p_leaf(alpha, beta, d)
              - log_p_split(alpha, beta, d) - lrule - 2.0 * log_p_leaf(alpha, beta, d + 1))

    llik = 0.0
    if use_lik:
        llik = (node_log_marginal(nl + nr, sl + sr, ssl + ssr, sigma_sq, sigma_mu_sq)
                - node_log_marginal(nl, sl, ssl, sigma_sq, sigma_mu_sq)
                - node_log_marginal(nr, sr, ssr, sigma_sq, sigma_mu_sq))
    return lprior + llik + log_rev - log_fwd


@njit(cache=True)
def change_log_ratio(t, node, k_new, c_new, var, split, left, right, parent, leaf_of,
                     resid, Xt, ranks, nuniq, all_distinct, weights,
                     alpha, beta, move_probs, sigma_sq, sigma_mu_sq, use_lik,
                     sub_rows, nsub, n_int, idx, new_leaf, work):
    """Score a CHANGE at ``node``; ``sub_rows[:nsub]`` are the rows below it.

    Fills ``new_leaf`` for those rows. Returns -inf if any leaf would empty.
    ``work`` is (9, C) scratch space.
    """
    var_row = var[t]
    split_row = split[t]
    left_row = left[t]
    right_row = right[t]
    parent_row = parent[t]
    leaf_row = leaf_of[t]
    C = var_row.shape[0]
    # leaf occupancy under the new rule
    occ_new = work[0]
    occ_new[:] = 0.0
    for j in range(nsub):
        i = sub_rows[j]
        lf = route_from(node, i, Xt, var_row, split_row, left_row, right_row, node, k_new, c_new)
        new_leaf[i] = lf
        occ_new[lf] += 1
    for j in range(C):
        if var_row[j] == LEAF and occ_new[j] == 0 and is_descendant(j, node, parent_row):
            return -np.inf

    k_old = var_row[node]
    c_old = split_row[node]
    for j in range(nsub):
        idx[j] = sub_rows[j]
    l_new_here = log_rule_prob(k_new, idx, nsub, ranks, nuniq, all_distinct, weights)
    l_old_here = log_rule_prob(k_old, idx, nsub, ranks, nuniq, all_distinct, weights)
    log_fwd = log_kind_prob(CHANGE, n_int, move_probs) - math.log(n_int) + l_new_here
    log_rev = log_kind_prob(CHANGE, n_int, move_probs) - math.log(n_int) + l_old_here

    # rule probabilities of the changed node and every internal node below it
    lprior = l_new_here - l_old_here
    continuous = True
    for k in range(all_distinct.shape[0]):
        if not all_distinct[k]:
            continuous = False
            break
    if continuous:
        # only node sizes matter: P(rule) = w_k / sum(w) / (size - 1)
        wsum = 0.0
        for k in range(weights.shape[0]):
            wsum += weights[k]
        size_new = work[7]
        size_old = work[8]
        size_new[:] = 0.0
        size_old[:] = 0.0
        for j in range(nsub):
            size_old[leaf_row[sub_rows[j]]] += 1
        for j in range(C):
            if var_row[j] == LEAF and is_descendant(j, node, parent_row):
                p = parent_row[j]
                while p != node:
                    size_new[p] += occ_new[j]
                    size_old[p] += size_old[j]
                    p = parent_row[p]
        for dnode in range(C):
            if dnode == node or var_row[dnode] < 0 or not is_descendant(dnode, node, parent_row):
                continue
            if size_new[dnode] < 2:
                return -np.inf
            lprior -= math.log(size_new[dnode] - 1) - math.log(size_old[dnode] - 1)
    else:
        for dnode in range(C):
            if dnode == node or var_row[dnode] < 0 or not is_descendant(dnode, node, parent_row):
                continue
            kd = var_row[dnode]
            cnt = rows_below(new_leaf, sub_rows, nsub, dnode, parent_row, idx)
            lp_new = log_rule_prob(kd, idx, cnt, ranks, nuniq, all_distinct, weights)
            cnt = rows_below(leaf_row, sub_rows, nsub, dnode, parent_row, idx)
            lp_old = log_rule_prob(kd, idx, cnt, ranks, nuniq, all_distinct, weights)
            lprior += lp_new - lp_old

    llik = 0.0
    if use_lik:
        n_o = work[1]
        s_o = work[2]
        ss_o = work[3]
        n_n = work[4]
        s_n = work[5]
        ss_n = work[6]
        work[1:7, :] = 0.0
        for j in range(nsub):
            i = sub_rows[j]
            r = resid[i]
            a = leaf_row[i]
            b = new_leaf[i]
            n_o[a] += 1
            s_o[a] += r
            ss_o[a] += r * r
            n_n[b] += 1
            s_n[b] += r
            ss_n[b] += r * r
        for j in range(C):
            if var_row[j] == LEAF and (n_o[j] > 0 or n_n[j] > 0):
                llik += (node_log_marginal(n_n[j], s_n[j], ss_n[j], sigma_sq, sigma_mu_sq)
                         - node_log_marginal(n_o[j], s_o[j], ss_o[j], sigma_sq, sigma_mu_sq))
    ratio = lprior + llik + log_rev - log_fwd
    if ratio != ratio:
        return -np.inf
    return ratio


# ------------------------------------------------------------ one tree update


@njit(cache=True)
def mh_step(t, var, split, left, right, parent, depth, leaf_of,
            resid, Xt, ranks, nuniq, uniq, all_distinct, weights,
            alpha, beta, move_probs, sigma_sq, sigma_mu_sq, use_lik,
            idx, sub_rows, new_leaf, work, stats):
    """Propose and accept/reject one structural move on tree t.

    ``stats`` accumulates (proposed, accepted) per move kind.
    """
    var_row = var[t]
    leaf_row = leaf_of[t]
    n_int, n_leaf, n_prunable = tree_counts(var_row, left[t], right[t])
    if n_int == 0:
        kind = GROW
    else:
        tot = move_probs[0] + move_probs[1] + move_probs[2]
        u = np.random.random() * tot
        if u < move_probs[0]:
            kind = GROW
        elif u < move_probs[0] + move_probs[1]:
            kind = PRUNE
        else:
            kind = CHANGE
    stats[kind, 0] += 1

    if kind == GROW:
        leaf = pick_node(var_row, left[t], right[t], 0, n_leaf)
        cnt = rows_in_leaf(leaf_row, leaf, idx)
        k = draw_variable(idx, cnt, ranks, all_distinct, weights)
        if k < 0:
            return
        c = draw_split_value(k, idx, cnt, ranks, nuniq, uniq)
        a, b = free_slots(var_row)
        if a < 0:
            return
        lr = grow_log_ratio(t, leaf, k, c, var, left, right, parent, depth,
                            resid, Xt, ranks, nuniq, all_distinct, weights,
                            alpha, beta, move_probs, sigma_sq, sigma_mu_sq, use_lik,
                            idx, cnt, n_int, n_leaf, n_prunable)
        if not math.log(np.random.random()) < lr:
            return
        var[t, leaf] = k
        split[t, leaf] = c
        left[t, leaf] = a
        right[t, leaf] = b
        for ch in (a, b):
            var[t, ch] = LEAF
            left[t, ch] = -1
            right[t, ch] = -1
            parent[t, ch] = leaf
            depth[t, ch] = depth[t, leaf] + 1
        for j in range(cnt):
            i = idx[j]
            leaf_row[i] = a if Xt[k, i] < c else b
    elif kind == PRUNE:
        node = pick_node(var_row, left[t], right[t], 2, n_prunable)
        lr = prune_log_ratio(t, node, var, left, right, depth, leaf_of,
                             resid, ranks, nuniq, all_distinct, weights,
                             alpha, beta, move_probs, sigma_sq, sigma_mu_sq, use_lik,
                             idx, n_int, n_leaf, n_prunable)
        if not math.log(np.random.random()) < lr:
            return
        lc = left[t, node]
        rc = right[t, node]
        for i in range(leaf_row.shape[0]):
            if leaf_row[i] == lc or leaf_row[i] == rc:
                leaf_row[i] = node
        var[t, lc] = FREE
        var[t, rc] = FREE
        var[t, node] = LEAF
        left[t, node] = -1
        right[t, node] = -1
    else:
        node = pick_node(var_row, left[t], right[t], 1, n_int)
        nsub = 0
        for i in range(leaf_row.shape[0]):
            if node == 0 or is_descendant(leaf_row[i], node, parent[t]):
                sub_rows[nsub] = i
                nsub += 1
        k = draw_variable(sub_rows, nsub, ranks, all_distinct, weights)
        if k < 0:
            return
        c = draw_split_value(k, sub_rows, nsub, ranks, nuniq, uniq)
        lr = change_log_ratio(t, node, k, c, var, split, left, right, parent, leaf_of,
                              resid, Xt, ranks, nuniq, all_distinct, weights,
                              alpha, beta, move_probs, sigma_sq, sigma_mu_sq, use_lik,
                              sub_rows, nsub, n_int, idx, new_leaf, work)
        if not math.log(np.random.random()) < lr:
            return
        var[t, node] = k
        split[t, node] = c
        for j in range(nsub):
            i = sub_rows[j]
            leaf_row[i] = new_leaf[i]
    stats[kind, 1] += 1


@njit(cache=True)
def draw_leaves(t, var, mu, leaf_of, resid, sigma_sq, sigma_mu_sq, use_lik, fit_row):
    C = var.shape[1]
    nb = np.zeros(C, dtype=np.int64)
    s = np.zeros(C)
    leaf_row = leaf_of[t]
    for i in range(leaf_row.shape[0]):
        nb[leaf_row[i]] += 1
        s[leaf_row[i]] += resid[i]
    for j in range(C):
        if var[t, j] == LEAF:
            if use_lik:
                prec = nb[j] / sigma_sq + 1.0 / sigma_mu_sq
                mean = (s[j] / sigma_sq) / prec
                mu[t, j] = mean + np.random.standard_normal() / math.sqrt(prec)
            else:
                mu[t, j] = np.random.standard_normal() * math.sqrt(sigma_mu_sq)
    for i in range(leaf_row.shape[0]):
        fit_row[i] = mu[t, leaf_row[i]]


@njit(cache=True)
def gibbs_sweep(seed, iteration, y, var, split, left, right, parent, depth, mu, leaf_of,
                tree_fit, total_fit, sigma_sq_box, Xt, ranks, nuniq, uniq, all_distinct, weights,
                alpha, beta, move_probs, sigma_mu_sq, nu, lam, sample_structure, prior_only, stats):
    """One full backfitting sweep over all trees followed by a sigma^2 draw."""
    np.random.seed(iteration_seed(seed, iteration))
    m, n = tree_fit.shape
    use_lik = not prior_only
    sigma_sq = sigma_sq_box[0]
    resid = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    sub_rows = np.empty(n, dtype=np.int64)
    new_leaf = np.empty(n, dtype=np.int64)
    fit_new = np.empty(n)
    work = np.empty((9, var.shape[1]))
    for t in range(m):
        for i in range(n):
            resid[i] = y[i] - total_fit[i] + tree_fit[t, i]
        if sample_structure:
            mh_step(t, var, split, left, right, parent, depth, leaf_of,
                    resid, Xt, ranks, nuniq, uniq, all_distinct, weights,
                    alpha, beta, move_probs, sigma_sq, sigma_mu_sq, use_lik,
                    idx, sub_rows, new_leaf, work, stats)
        draw_leaves(t, var, mu, leaf_of, resid, sigma_sq, sigma_mu_sq, use_lik, fit_new)
        for i in range(n):
            total_fit[i] += fit_new[i] - tree_fit[t, i]
            tree_fit[t, i] = fit_new[i]
    ssr = 0.0
    if use_lik:
        for i in range(n):
            r = y[i] - total_fit[i]
            ssr += r * r
        df = nu + n
    else:
        df = nu
    sigma_sq_box[0] = (nu * lam + ssr) / np.random.chisquare(df)


@njit(cache=True)
def var_counts(var, out):
    for k in range(out.shape[0]):
        out[k] = 0
    for t in range(var.shape[0]):
        for j in range(var.shape[1]):
            v = var[t, j]
            if v >= 0:
                out[v] += 1


@njit(cache=True)
def run_sweeps(seed, it0, n_iter, record, y, var, split, left, right, parent, depth, mu, leaf_of,
               tree_fit, total_fit, sigma_sq_box, Xt, ranks, nuniq, uniq, all_distinct, weights,
               alpha, beta, move_probs, sigma_mu_sq, nu, lam, sample_structure, prior_only, stats,
               counts_out, sigma_out):
    """Run ``n_iter`` sweeps; when ``record`` store split counts and sigma^2 per sweep."""
    for j in range(n_iter):
        gibbs_sweep(seed, it0 + j, y, var, split, left, right, parent, depth, mu, leaf_of,
                    tree_fit, total_fit, sigma_sq_box, Xt, ranks, nuniq, uniq, all_distinct, weights,
                    alpha, beta, move_probs, sigma_mu_sq, nu, lam, sample_structure, prior_only, stats)
        if record:
            var_counts(var, counts_out[j])
            sigma_out[j] = sigma_sq_box[0]


@njit(cache=True)
def count_nodes(var):
    total = 0
    for t in range(var.shape[0]):
        for j in range(var.shape[1]):
            if var[t, j] != FREE:
                total += 1
    return total


@njit(cache=True)
def write_compact(var, split, left, right, mu, o_var, o_split, o_val, o_left, o_right,
                  offsets, pos):
    """Serialize every tree in preorder starting at ``pos``; fills ``offsets[:m]``.

    Child indices are local to each tree. Returns the next free position.
    """
    m, C = var.shape
    stack = np.empty(C, dtype=np.int64)
    local = np.empty(C, dtype=np.int64)
    for t in range(m):
        offsets[t] = pos
        base = pos
        sp = 1
        stack[0] = 0
        while sp > 0:
            sp -= 1
            j = stack[sp]
            local[j] = pos - base
            o_var[pos] = var[t, j]
            o_split[pos] = split[t, j] if var[t, j] >= 0 else 0.0
            o_val[pos] = mu[t, j] if var[t, j] == LEAF else 0.0
            o_left[pos] = -1
            o_right[pos] = -1
            pos += 1
            if var[t, j] >= 0:
                stack[sp] = right[t, j]
                stack[sp + 1] = left[t, j]
                sp += 2
        for j in range(C):
            if var[t, j] >= 0:
                o_left[base + local[j]] = local[left[t, j]]
                o_right[base + local[j]] = local[right[t, j]]
    return pos


@njit(cache=True)
def compact_forest(var, split, left, right, mu):
    """Preorder node arrays plus per-tree offsets (length m + 1)."""
    m = var.shape[0]
    total = count_nodes(var)
    o_var = np.empty(total, dtype=np.int64)
    o_split = np.empty(total)
    o_val = np.empty(total)
    o_left = np.empty(total, dtype=np.int64)
    o_right = np.empty(total, dtype=np.int64)
    offsets = np.empty(m + 1, dtype=np.int64)
    offsets[m] = write_compact(var, split, left, right, mu, o_var, o_split, o_val,
                               o_left, o_right, offsets, 0)
    return o_var, o_split, o_val, o_left, o_right, offsets


@njit(cache=True)
def _grow_i(a, size):
    out = np.empty(size, dtype=a.dtype)
    out[:a.shape[0]] = a
    return out


@njit(cache=True)
def run_sweeps_keep(seed, it0, n_iter, y, var, split, left, right, parent, depth, mu, leaf_of,
                    tree_fit, total_fit, sigma_sq_box, Xt, ranks, nuniq, uniq, all_distinct,
                    weights, alpha, beta, move_probs, sigma_mu_sq, nu, lam, sample_structure,
                    prior_only, stats, counts_out, sigma_out):
    """Like `run_sweeps` with recording on, also snapshotting every forest."""
    m = var.shape[0]
    cap = max(16, n_iter * m * 4)
    o_var = np.empty(cap, dtype=np.int64)
    o_split = np.empty(cap)
    o_val = np.empty(cap)
    o_left = np.empty(cap, dtype=np.int64)
    o_right = np.empty(cap, dtype=np.int64)
    offsets = np.empty(n_iter * m + 1, dtype=np.int64)
    pos = 0
    for j in range(n_iter):
        gibbs_sweep(seed, it0 + j, y, var, split, left, right, parent, depth, mu, leaf_of,
                    tree_fit, total_fit, sigma_sq_box, Xt, ranks, nuniq, uniq, all_distinct, weights,
                    alpha, beta, move_probs, sigma_mu_sq, nu, lam, sample_structure, prior_only, stats)
        var_counts(var, counts_out[j])
        sigma_out[j] = sigma_sq_box[0]
        need = pos + count_nodes(var)
        if need > cap:
            cap = max(2 * cap, need)
            o_var = _grow_i(o_var, cap)
            o_split = _grow_i(o_split, cap)
            o_val = _grow_i(o_val, cap)
            o_left = _grow_i(o_left, cap)
            o_right = _grow_i(o_right, cap)
        pos = write_compact(var, split, left, right, mu, o_var, o_split, o_val, o_left, o_right,
                            offsets[j * m:(j + 1) * m], pos)
    offsets[n_iter * m] = pos
    return o_var[:pos], o_split[:pos], o_val[:pos], o_left[:pos], o_right[:pos], offsets


@njit(cache=True)
def predict_compact(X, o_var, o_split, o_val, o_left, o_right, tree_offsets, n_samples, m):
    """Per-sample raw forest predictions, shape (n_samples, len(X))."""
    out = np.zeros((n_samples, X.shape[0]))
    for s in range(n_samples):
        for t in range(m):
            base = tree_offsets[s * m + t]
            for i in range(X.shape[0]):
                node = 0
                while o_var[base + node] >= 0:
                    if X[i, o_var[base + node]] < o_split[base + node]:
                        node = o_left[base + node]
                    else:
                        node = o_right[base + node]
                out[s, i] += o_val[base + node]
    return out
