"""Compiled kernels for the sum-of-trees sampler.

A forest is stored as a set of (n_trees, capacity) arrays. Slot 0 of every
tree is the root. ``var`` holds the split variable of a branch node, ``LEAF``
for leaves and ``FREE`` for unused slots. Training data are pre-binned so that
``xb[i, v] <= k`` is equivalent to ``x[i, v] <= cutpoints[v][k]``.
"""

import math

import numpy as np
from numba import njit

LEAF = -1
FREE = -2

MOVE_GROW = 0
MOVE_PRUNE = 1
MOVE_CHANGE = 2


@njit(cache=True, nogil=True)
def split_prob(alpha, beta, depth):
    return alpha * (1.0 + depth) ** (-beta)


@njit(cache=True, nogil=True)
def node_range(var, cut, parent, left, node, v, ncuts_v):
    """Half-open range [lo, hi) of cut indices still usable for ``v`` at ``node``."""
    lo = 0
    hi = ncuts_v
    child = node
    p = parent[node]
    while p >= 0:
        if var[p] == v:
            if left[p] == child:
                if cut[p] < hi:
                    hi = cut[p]
            else:
                if cut[p] + 1 > lo:
                    lo = cut[p] + 1
        child = p
        p = parent[p]
    return lo, hi


@njit(cache=True, nogil=True)
def n_eligible_vars(var, cut, parent, left, node, ncuts):
    count = 0
    for v in range(ncuts.shape[0]):
        lo, hi = node_range(var, cut, parent, left, node, v, ncuts[v])
        if hi > lo:
            count += 1
    return count


@njit(cache=True, nogil=True)
def leaf_log_prior(var, cut, parent, left, depth, node, ncuts, alpha, beta):
    if n_eligible_vars(var, cut, parent, left, node, ncuts) == 0:
        return 0.0
    return math.log(1.0 - split_prob(alpha, beta, depth[node]))


@njit(cache=True, nogil=True)
def subtree_log_prior(var, cut, parent, left, right, depth, node, ncuts,
                      alpha, beta, stack):
    """Log prior of every node strictly below ``node``, -inf if a rule is empty."""
    total = 0.0
    top = 0
    stack[top] = left[node]
    top += 1
    stack[top] = right[node]
    top += 1
    while top > 0:
        top -= 1
        d = stack[top]
        if var[d] == LEAF:
            total += leaf_log_prior(var, cut, parent, left, depth, d, ncuts, alpha, beta)
        else:
            v = var[d]
            lo, hi = node_range(var, cut, parent, left, d, v, ncuts[v])
            if cut[d] < lo or cut[d] >= hi:
                return -np.inf
            ne = n_eligible_vars(var, cut, parent, left, d, ncuts)
            total += math.log(split_prob(alpha, beta, depth[d]))
            total -= math.log(ne * (hi - lo))
            stack[top] = left[d]
            top += 1
            stack[top] = right[d]
            top += 1
    return total


@njit(cache=True, nogil=True)
def leaf_log_marginal(n, s, sigma2, tau2):
    if n == 0:
        return 0.0
    denom = sigma2 + n * tau2
    return 0.5 * math.log(sigma2 / denom) + 0.5 * tau2 * s * s / (sigma2 * denom)


@njit(cache=True, nogil=True)
def pick_split_var(var, cut, parent, left, node, ncuts, rng):
    ne = n_eligible_vars(var, cut, parent, left, node, ncuts)
    if ne == 0:
        return -1, 0, 0, 0
    target = rng.integers(0, ne)
    seen = 0
    for v in range(ncuts.shape[0]):
        lo, hi = node_range(var, cut, parent, left, node, v, ncuts[v])
        if hi > lo:
            if seen == target:
                return v, lo, hi, ne
            seen += 1
    return -1, 0, 0, 0


@njit(cache=True, nogil=True)
def count_leaves_and_nogs(var, left, right):
    n_leaves = 0
    n_nogs = 0
    for k in range(var.shape[0]):
        if var[k] == LEAF:
            n_leaves += 1
        elif var[k] >= 0:
            if var[left[k]] == LEAF and var[right[k]] == LEAF:
                n_nogs += 1
    return n_leaves, n_nogs


@njit(cache=True, nogil=True)
def kth_node(var, left, right, kind, k):
    """k-th leaf (kind 0) or k-th no-grandchildren branch (kind 1) in slot order."""
    seen = 0
    for j in range(var.shape[0]):
        if kind == 0:
            ok = var[j] == LEAF
        else:
            ok = var[j] >= 0 and var[left[j]] == LEAF and var[right[j]] == LEAF
        if ok:
            if seen == k:
                return j
            seen += 1
    return -1


@njit(cache=True, nogil=True)
def free_slot(var, start):
    for j in range(start, var.shape[0]):
        if var[j] == FREE:
            return j
    return -1


@njit(cache=True, nogil=True)
def tree_step(var, cut, left, right, parent, depth, mu, leaf_of, xb, ncuts,
              resid, sigma2, tau2, alpha, beta, p_grow, p_prune, min_leaf,
              use_lik, forced_move, rng, stack, node_n, node_s, new_leaf, in_sub):
    """One Metropolis-Hastings proposal on a single tree.

    Returns (move, accepted). ``forced_move`` < 0 draws the move type at random.
    """
    n = xb.shape[0]
    n_leaves, n_nogs = count_leaves_and_nogs(var, left, right)
    if forced_move >= 0:
        move = forced_move
    else:
        u = rng.random()
        if n_leaves == 1:
            move = MOVE_GROW
        elif u < p_grow:
            move = MOVE_GROW
        elif u < p_grow + p_prune:
            move = MOVE_PRUNE
        else:
            move = MOVE_CHANGE
    # probability of proposing grow / prune from a given tree
    if n_leaves == 1:
        pg_here = 1.0
    else:
        pg_here = p_grow

    if move == MOVE_GROW:
        eta = kth_node(var, left, right, 0, rng.integers(0, n_leaves))
        v, lo, hi, ne = pick_split_var(var, cut, parent, left, eta, ncuts, rng)
        if v < 0:
            return move, False
        a = free_slot(var, 1)
        if a < 0:
            return move, False
        b = free_slot(var, a + 1)
        if b < 0:
            return move, False
        c = lo + rng.integers(0, hi - lo)
        nl = 0
        nr = 0
        sl = 0.0
        sr = 0.0
        for i in range(n):
            if leaf_of[i] == eta:
                if xb[i, v] <= c:
                    nl += 1
                    sl += resid[i]
                else:
                    nr += 1
                    sr += resid[i]
        if nl < min_leaf or nr < min_leaf:
            return move, False
        log_lr = 0.0
        if use_lik:
            log_lr = (leaf_log_marginal(nl, sl, sigma2, tau2)
                      + leaf_log_marginal(nr, sr, sigma2, tau2)
                      - leaf_log_marginal(nl + nr, sl + sr, sigma2, tau2))
        d = depth[eta]
        psplit = split_prob(alpha, beta, d)
        # install tentatively to evaluate child eligibility
        var[eta] = v
        cut[eta] = c
        left[eta] = a
        right[eta] = b
        for ch in (a, b):
            var[ch] = LEAF
            parent[ch] = eta
            depth[ch] = d + 1
            left[ch] = -1
            right[ch] = -1
        lp_new = (math.log(psplit) - math.log(ne * (hi - lo))
                  + leaf_log_prior(var, cut, parent, left, depth, a, ncuts, alpha, beta)
                  + leaf_log_prior(var, cut, parent, left, depth, b, ncuts, alpha, beta))
        lp_old = math.log(1.0 - psplit)
        # after growing there is at least one nog with children a, b
        nogs_after = n_nogs + 1
        if parent[eta] >= 0:
            p_ = parent[eta]
            sib = right[p_] if left[p_] == eta else left[p_]
            if var[sib] == LEAF:
                nogs_after -= 1
        log_prop = (math.log(p_prune) - math.log(nogs_after)
                    - (math.log(pg_here) - math.log(n_leaves) - math.log(ne * (hi - lo))))
        log_ratio = log_lr + lp_new - lp_old + log_prop
        if math.log(rng.random()) < log_ratio:
            for i in range(n):
                if leaf_of[i] == eta:
                    if xb[i, v] <= c:
                        leaf_of[i] = a
                    else:
                        leaf_of[i] = b
            return move, True
        var[eta] = LEAF
        left[eta] = -1
        right[eta] = -1
        var[a] = FREE
        var[b] = FREE
        parent[a] = -1
        parent[b] = -1
        return move, False

    if move == MOVE_PRUNE:
        if n_nogs == 0:
            return move, False
        eta = kth_node(var, left, right, 1, rng.integers(0, n_nogs))
        a = left[eta]
        b = right[eta]
        v = var[eta]
        lo, hi = node_range(var, cut, parent, left, eta, v, ncuts[v])
        ne = n_eligible_vars(var, cut, parent, left, eta, ncuts)
        nl = 0
        nr = 0
        sl = 0.0
        sr = 0.0
        for i in range(n):
            if leaf_of[i] == a:
                nl += 1
                sl += resid[i]
            elif leaf_of[i] == b:
                nr += 1
                sr += resid[i]
        log_lr = 0.0
        if use_lik:
            log_lr = (leaf_log_marginal(nl + nr, sl + sr, sigma2, tau2)
                      - leaf_log_marginal(nl, sl, sigma2, tau2)
                      - leaf_log_marginal(nr, sr, sigma2, tau2))
        d = depth[eta]
        psplit = split_prob(alpha, beta, d)
        lp_branch = (math.log(psplit) - math.log(ne * (hi - lo))
                     + leaf_log_prior(var, cut, parent, left, depth, a, ncuts, alpha, beta)
                     + leaf_log_prior(var, cut, parent, left, depth, b, ncuts, alpha, beta))
        lp_leaf = math.log(1.0 - psplit)
        leaves_after = n_leaves - 1
        pg_after = 1.0 if leaves_after == 1 else p_grow
        log_prop = ((math.log(pg_after) - math.log(leaves_after) - math.log(ne * (hi - lo)))
                    - (math.log(p_prune) - math.log(n_nogs)))
        log_ratio = log_lr + lp_leaf - lp_branch + log_prop
        if math.log(rng.random()) < log_ratio:
            for i in range(n):
                if leaf_of[i] == a or leaf_of[i] == b:
                    leaf_of[i] = eta
            var[eta] = LEAF
            left[eta] = -1
            right[eta] = -1
            var[a] = FREE
            var[b] = FREE
            parent[a] = -1
            parent[b] = -1
            return move, True
        return move, False

    # change: new rule at a random branch node
    n_internal = 0
    for j in range(var.shape[0]):
        if var[j] >= 0:
            n_internal += 1
    if n_internal == 0:
        return move, False
    k = rng.integers(0, n_internal)
    eta = -1
    seen = 0
    for j in range(var.shape[0]):
        if var[j] >= 0:
            if seen == k:
                eta = j
                break
            seen += 1
    v_old = var[eta]
    c_old = cut[eta]
    lp_old = subtree_log_prior(var, cut, parent, left, right, depth, eta, ncuts,
                               alpha, beta, stack)
    v, lo, hi, ne = pick_split_var(var, cut, parent, left, eta, ncuts, rng)
    c = lo + rng.integers(0, hi - lo)
    var[eta] = v
    cut[eta] = c
    lp_new = subtree_log_prior(var, cut, parent, left, right, depth, eta, ncuts,
                               alpha, beta, stack)
    if lp_new == -np.inf:
        var[eta] = v_old
        cut[eta] = c_old
        return move, False
    # mark the subtree below eta
    for j in range(var.shape[0]):
        in_sub[j] = False
    top = 0
    stack[top] = eta
    top += 1
    while top > 0:
        top -= 1
        d = stack[top]
        in_sub[d] = True
        if var[d] >= 0:
            stack[top] = left[d]
            top += 1
            stack[top] = right[d]
            top += 1
    for j in range(var.shape[0]):
        node_n[j] = 0
        node_s[j] = 0.0
    for i in range(n):
        lf = leaf_of[i]
        if in_sub[lf]:
            node = eta
            while var[node] >= 0:
                if xb[i, var[node]] <= cut[node]:
                    node = left[node]
                else:
                    node = right[node]
            new_leaf[i] = node
            node_n[node] += 1
            node_s[node] += resid[i]
        else:
            new_leaf[i] = lf
    # min leaf check and new likelihood
    log_lr = 0.0
    for j in range(var.shape[0]):
        if in_sub[j] and var[j] == LEAF:
            if node_n[j] < min_leaf:
                var[eta] = v_old
                cut[eta] = c_old
                return move, False
            if use_lik:
                log_lr += leaf_log_marginal(node_n[j], node_s[j], sigma2, tau2)
    if use_lik:
        for j in range(var.shape[0]):
            node_n[j] = 0
            node_s[j] = 0.0
        for i in range(n):
            lf = leaf_of[i]
            if in_sub[lf]:
                node_n[lf] += 1
                node_s[lf] += resid[i]
        for j in range(var.shape[0]):
            if in_sub[j] and var[j] == LEAF:
                log_lr -= leaf_log_marginal(node_n[j], node_s[j], sigma2, tau2)
    log_ratio = log_lr + lp_new - lp_old
    if math.log(rng.random()) < log_ratio:
        for i in range(n):
            leaf_of[i] = new_leaf[i]
        return move, True
    var[eta] = v_old
    cut[eta] = c_old
    return move, False


@njit(cache=True, nogil=True)
def draw_leaves(var, mu, leaf_of, resid, sigma2, tau2, use_lik, rng, node_n, node_s):
    for j in range(var.shape[0]):
        node_n[j] = 0
        node_s[j] = 0.0
    if use_lik:
        for i in range(leaf_of.shape[0]):
            node_n[leaf_of[i]] += 1
            node_s[leaf_of[i]] += resid[i]
    for j in range(var.shape[0]):
        if var[j] == LEAF:
            denom = sigma2 + node_n[j] * tau2
            mean = tau2 * node_s[j] / denom
            sd = math.sqrt(tau2 * sigma2 / denom)
            mu[j] = mean + sd * rng.standard_normal()


@njit(cache=True, nogil=True)
def sweep(var, cut, left, right, parent, depth, mu, leaf_of, xb, ncuts, y, fit,
          sigma2, tau2, alpha, beta, p_grow, p_prune, min_leaf, use_lik, rng,
          stack, node_n, node_s, new_leaf, in_sub, resid, accept_counts):
    """Backfit every tree once. ``fit`` is updated in place."""
    n_trees = var.shape[0]
    n = y.shape[0]
    for r in range(n_trees):
        lf = leaf_of[r]
        m = mu[r]
        for i in range(n):
            resid[i] = y[i] - fit[i] + m[lf[i]]
        move, ok = tree_step(var[r], cut[r], left[r], right[r], parent[r], depth[r],
                             m, lf, xb, ncuts, resid, sigma2, tau2, alpha, beta,
                             p_grow, p_prune, min_leaf, use_lik, -1, rng, stack,
                             node_n, node_s, new_leaf, in_sub)
        accept_counts[move, 0] += 1
        if ok:
            accept_counts[move, 1] += 1
        draw_leaves(var[r], m, lf, resid, sigma2, tau2, use_lik, rng, node_n, node_s)
        for i in range(n):
            fit[i] = y[i] - resid[i] + m[lf[i]]


@njit(cache=True, nogil=True)
def recompute_fit(mu, leaf_of, fit):
    for i in range(fit.shape[0]):
        fit[i] = 0.0
    for r in range(mu.shape[0]):
        for i in range(fit.shape[0]):
            fit[i] += mu[r, leaf_of[r, i]]


@njit(cache=True, nogil=True)
def draw_sigma2(y, fit, nu, lam, rng):
    ssr = 0.0
    for i in range(y.shape[0]):
        e = y[i] - fit[i]
        ssr += e * e
    return (nu * lam + ssr) / rng.chisquare(nu + y.shape[0])


@njit(cache=True, nogil=True)
def truncnorm_lower(a, rng):
    """Standard normal restricted to (a, inf)."""
    if a <= 0.0:
        while True:
            x = rng.standard_normal()
            if x > a:
                return x
    lam = 0.5 * (a + math.sqrt(a * a + 4.0))
    while True:
        x = a + rng.standard_exponential() / lam
        if rng.random() <= math.exp(-0.5 * (x - lam) ** 2):
            return x


@njit(cache=True, nogil=True)
def draw_latent(ybin, fit, offset, latent, rng):
    for i in range(ybin.shape[0]):
        a = -offset - fit[i]
        if ybin[i] > 0:
            latent[i] = fit[i] + truncnorm_lower(a, rng)
        else:
            latent[i] = fit[i] - truncnorm_lower(-a, rng)


@njit(cache=True, nogil=True)
def count_used(var):
    total = 0
    for r in range(var.shape[0]):
        for j in range(var.shape[1]):
            if var[r, j] != FREE:
                total += 1
    return total


@njit(cache=True, nogil=True)
def export_forest(var, cut, left, right, mu, cutvals, cutstart, base,
                  out_var, out_cut, out_value, out_right, tree_start, tree_base, stack):
    """Write the forest in preorder. Child links are absolute indices."""
    pos = 0
    for r in range(var.shape[0]):
        tree_start[tree_base + r] = base + pos
        top = 0
        stack[top] = 0
        top += 1
        # slot -> preorder position, for right links
        while top > 0:
            top -= 1
            node = stack[top]
            k = pos
            pos += 1
            if var[r, node] == LEAF:
                out_var[k] = -1
                out_cut[k] = -1
                out_value[k] = mu[r, node]
                out_right[k] = -1
            else:
                v = var[r, node]
                out_var[k] = v
                out_cut[k] = cut[r, node]
                out_value[k] = cutvals[cutstart[v] + cut[r, node]]
                # right link is filled when the right child is emitted
                out_right[k] = -(node + 2)
                stack[top] = right[r, node]
                top += 1
                stack[top] = left[r, node]
                top += 1
        # resolve right links: the right child starts after the left subtree
        end = pos
        start = tree_start[tree_base + r] - base
        resolve_right(out_var, out_right, start, end, base)
    return pos


@njit(cache=True, nogil=True)
def subtree_end(out_var, k, end):
    need = 1
    while need > 0 and k < end:
        if out_var[k] >= 0:
            need += 1
        else:
            need -= 1
        k += 1
    return k


@njit(cache=True, nogil=True)
def resolve_right(out_var, out_right, start, end, base):
    for k in range(start, end):
        if out_var[k] >= 0:
            out_right[k] = base + subtree_end(out_var, k + 1, end)


@njit(cache=True, nogil=True)
def predict_draw(node_var, node_value, node_right, tree_start, q, n_trees, x, out):
    for i in range(x.shape[0]):
        total = 0.0
        for r in range(n_trees):
            k = tree_start[q * n_trees + r]
            while node_var[k] >= 0:
                if x[i, node_var[k]] <= node_value[k]:
                    k += 1
                else:
                    k = node_right[k]
            total += node_value[k]
        out[i] = total
