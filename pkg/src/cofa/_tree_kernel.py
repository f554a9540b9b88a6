"""Compiled CART growth for binary outcomes.

Nodes own contiguous segments of a row-index buffer that is partitioned in
place as the tree grows. All split scoring works on the sum
``pos_L*neg_L/n_L + pos_R*neg_R/n_R``; the weighted child Gini is twice
that over the node size.
"""
import numpy as np
from numba import njit

# split kinds stored per node
LEAF = 0
NUMERIC_SPLIT = 1
LEVEL_SPLIT = 2

# ties within this absolute margin of the impurity sum count as equal
TIE_EPS = 1e-12


@njit(cache=True)
def _side(pos, n):
    if n == 0:
        return 0.0
    return pos * (n - pos) / n


@njit(cache=True)
def dice_roll(k, mask):
    """Each of ``k`` features survives iff a fair k-sided die shows <= floor(sqrt k)."""
    limit = int(np.sqrt(k))
    while (limit + 1) * (limit + 1) <= k:
        limit += 1
    while limit * limit > k:
        limit -= 1
    n_on = 0
    for j in range(k):
        roll = np.random.randint(1, k + 1)
        mask[j] = roll <= limit
        if mask[j]:
            n_on += 1
    return n_on


@njit(cache=True)
def seed_stream(seed):
    np.random.seed(seed)


@njit(cache=True)
def numeric_split(values, y, min_bucket):
    """Best midpoint threshold for one numeric column over a node.

    Returns (impurity sum, threshold, found).
    """
    n = values.shape[0]
    order = np.argsort(values, kind="mergesort")
    total_pos = 0
    for i in range(n):
        total_pos += y[i]
    best = np.inf
    best_thr = 0.0
    found = False
    pos_left = 0
    for i in range(n - 1):
        pos_left += y[order[i]]
        a = values[order[i]]
        b = values[order[i + 1]]
        if a == b:
            continue
        n_left = i + 1
        if n_left < min_bucket or n - n_left < min_bucket:
            continue
        score = _side(pos_left, n_left) + _side(total_pos - pos_left, n - n_left)
        if score < best - TIE_EPS:
            best = score
            best_thr = 0.5 * (a + b)
            # midpoint can round onto b for adjacent floats
            if best_thr >= b:
                best_thr = a
            found = True
    return best, best_thr, found


@njit(cache=True)
def numeric_split_ranked(ranks, y, n_unique, uniq, min_bucket, cnt, pos):
    """Counting-sort variant of :func:`numeric_split` over precomputed value
    ranks; same result, O(m + n_unique). ``cnt``/``pos`` are scratch."""
    n = ranks.shape[0]
    for u in range(n_unique):
        cnt[u] = 0
        pos[u] = 0
    total_pos = 0
    for i in range(n):
        cnt[ranks[i]] += 1
        pos[ranks[i]] += y[i]
        total_pos += y[i]
    best = np.inf
    best_thr = 0.0
    found = False
    n_left = 0
    pos_left = 0
    prev = -1
    for u in range(n_unique):
        if cnt[u] == 0:
            continue
        if prev >= 0 and n_left >= min_bucket and n - n_left >= min_bucket:
            score = _side(pos_left, n_left) + _side(total_pos - pos_left, n - n_left)
            if score < best - TIE_EPS:
                a = uniq[prev]
                b = uniq[u]
                best = score
                best_thr = 0.5 * (a + b)
                if best_thr >= b:
                    best_thr = a
                found = True
        n_left += cnt[u]
        pos_left += pos[u]
        prev = u
    return best, best_thr, found


@njit(cache=True)
def level_split(codes, y, n_levels, min_bucket, left_out, present_out):
    """Best bipartition of the levels present at a node.

    Levels are ordered by positive rate (stable on level index) and the
    contiguous cuts of that order are scanned, which is exact for a binary
    outcome under Gini. The side holding the lowest-indexed present level
    is reported as the left set. Among tied partitions, the one whose left
    set contains the smallest level index on which they disagree wins.

    Returns (impurity sum, found); fills ``left_out``/``present_out``.
    """
    n = codes.shape[0]
    cnt = np.zeros(n_levels, dtype=np.int64)
    pos = np.zeros(n_levels, dtype=np.int64)
    for i in range(n):
        cnt[codes[i]] += 1
        pos[codes[i]] += y[i]
    for lv in range(left_out.shape[0]):
        left_out[lv] = False
        present_out[lv] = False
    m = 0
    for lv in range(n_levels):
        present_out[lv] = cnt[lv] > 0
        if cnt[lv] > 0:
            m += 1
    if m < 2:
        return np.inf, False
    present = np.empty(m, dtype=np.int64)
    rate = np.empty(m, dtype=np.float64)
    j = 0
    for lv in range(n_levels):
        if cnt[lv] > 0:
            present[j] = lv
            rate[j] = pos[lv] / cnt[lv]
            j += 1
    order = present[np.argsort(rate, kind="mergesort")]
    first = present[0]  # lowest-indexed present level
    total_pos = 0
    for lv in range(n_levels):
        total_pos += pos[lv]

    best = np.inf
    found = False
    prefix = np.zeros(n_levels, dtype=np.bool_)
    cand = np.zeros(n_levels, dtype=np.bool_)
    n_left = 0
    pos_left = 0
    for c in range(m - 1):
        lv = order[c]
        prefix[lv] = True
        n_left += cnt[lv]
        pos_left += pos[lv]
        if n_left < min_bucket or n - n_left < min_bucket:
            continue
        score = _side(pos_left, n_left) + _side(total_pos - pos_left, n - n_left)
        if score > best + TIE_EPS:
            continue
        # orient so the left set holds the lowest-indexed present level
        flip = not prefix[first]
        for k in range(m):
            q = present[k]
            cand[q] = prefix[q] != flip
        take = score < best - TIE_EPS or not found
        if not take:
            for k in range(m):
                q = present[k]
                if cand[q] != left_out[q]:
                    take = cand[q]
                    break
        if take:
            if score < best:
                best = score
            found = True
            for k in range(m):
                q = present[k]
                left_out[q] = cand[q]
    if not found:
        return np.inf, False
    return best, True


@njit(cache=True, nogil=True)
def grow_tree(X, is_cat, n_levels, ranks, n_unique, uniq, y, rows, target_col, n_target_levels,
              min_split, min_bucket, max_depth, complexity, dice_seed):
    """Grow one tree on ``rows`` (which may contain repeats).

    ``ranks[:, j]`` indexes the sorted distinct values ``uniq[j, :n_unique[j]]``
    of numeric column ``j``; large nodes use them for a counting scan.

    Returns the node table as a tuple of arrays trimmed to the node count:
    kind, feature, threshold, left, right, n_node, n_pos, depth,
    left_levels, present_levels, target_present.
    """
    np.random.seed(dice_seed)
    n = rows.shape[0]
    p = X.shape[1]
    max_lv = 1
    for j in range(p):
        if n_levels[j] > max_lv:
            max_lv = n_levels[j]
    n_tl = max(n_target_levels, 1)
    cap = 2 * (n // max(min_bucket, 1)) + 3

    kind = np.zeros(cap, dtype=np.int8)
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap, dtype=np.float64)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    n_node = np.zeros(cap, dtype=np.int64)
    n_pos = np.zeros(cap, dtype=np.int64)
    depth = np.zeros(cap, dtype=np.int64)
    left_levels = np.zeros((cap, max_lv), dtype=np.bool_)
    present_levels = np.zeros((cap, max_lv), dtype=np.bool_)
    target_present = np.zeros((cap, n_tl), dtype=np.bool_)
    seg_start = np.zeros(cap, dtype=np.int64)
    seg_end = np.zeros(cap, dtype=np.int64)

    idx = rows.copy()
    buf = np.empty(n, dtype=np.int64)
    mask = np.zeros(p, dtype=np.bool_)
    cand_left = np.zeros(max_lv, dtype=np.bool_)
    cand_present = np.zeros(max_lv, dtype=np.bool_)
    best_left = np.zeros(max_lv, dtype=np.bool_)
    best_present = np.zeros(max_lv, dtype=np.bool_)
    max_u = 1
    for j in range(p):
        if n_unique[j] > max_u:
            max_u = n_unique[j]
    cnt_buf = np.zeros(max_u, dtype=np.int64)
    pos_buf = np.zeros(max_u, dtype=np.int64)
    rank_vals = np.empty(n, dtype=np.int64)

    seg_start[0] = 0
    seg_end[0] = n
    n_nodes = 1
    stack = np.empty(cap, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1

    root_gini = 0.0
    while top > 0:
        top -= 1
        node = stack[top]
        s = seg_start[node]
        e = seg_end[node]
        m = e - s
        pos = 0
        for i in range(s, e):
            pos += y[idx[i]]
        n_node[node] = m
        n_pos[node] = pos
        if target_col >= 0:
            for i in range(s, e):
                target_present[node, int(X[idx[i], target_col])] = True
        parent_gini = 2.0 * pos * (m - pos) / (m * m) if m > 0 else 0.0
        if node == 0:
            root_gini = parent_gini

        if m < min_split or depth[node] >= max_depth or pos == 0 or pos == m:
            continue
        if dice_roll(p, mask) == 0:
            continue

        y_node = np.empty(m, dtype=np.int64)
        for i in range(m):
            y_node[i] = y[idx[s + i]]
        vals = np.empty(m, dtype=np.float64)
        sort_cost = m * np.log2(m + 1.0)

        best_score = np.inf
        best_feat = -1
        best_thr = 0.0
        for j in range(p):
            if not mask[j]:
                continue
            if not is_cat[j] and 2.0 * n_unique[j] < sort_cost:
                for i in range(m):
                    rank_vals[i] = ranks[idx[s + i], j]
                score, thr, ok = numeric_split_ranked(rank_vals[:m], y_node, n_unique[j], uniq[j],
                                                      min_bucket, cnt_buf, pos_buf)
                if ok and score < best_score - TIE_EPS:
                    best_score = score
                    best_feat = j
                    best_thr = thr
                continue
            for i in range(m):
                vals[i] = X[idx[s + i], j]
            if is_cat[j]:
                codes = vals.astype(np.int64)
                score, ok = level_split(codes, y_node, n_levels[j], min_bucket, cand_left, cand_present)
                if ok and score < best_score - TIE_EPS:
                    best_score = score
                    best_feat = j
                    for lv in range(max_lv):
                        best_left[lv] = cand_left[lv]
                        best_present[lv] = cand_present[lv]
            else:
                score, thr, ok = numeric_split(vals, y_node, min_bucket)
                if ok and score < best_score - TIE_EPS:
                    best_score = score
                    best_feat = j
                    best_thr = thr
        if best_feat < 0:
            continue
        gain = parent_gini - 2.0 * best_score / m
        if gain <= TIE_EPS:
            continue
        if complexity > 0.0 and m * gain < complexity * n * root_gini:
            continue

        # partition the segment: left rows first, stable
        nl = 0
        nr = 0
        for i in range(s, e):
            r = idx[i]
            v = X[r, best_feat]
            if is_cat[best_feat]:
                go_left = best_left[int(v)]
            else:
                go_left = v <= best_thr
            if go_left:
                idx[s + nl] = r
                nl += 1
            else:
                buf[nr] = r
                nr += 1
        for i in range(nr):
            idx[s + nl + i] = buf[i]

        feature[node] = best_feat
        if is_cat[best_feat]:
            kind[node] = LEVEL_SPLIT
            for lv in range(max_lv):
                left_levels[node, lv] = best_left[lv]
                present_levels[node, lv] = best_present[lv]
        else:
            kind[node] = NUMERIC_SPLIT
            threshold[node] = best_thr
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        seg_start[lc] = s
        seg_end[lc] = s + nl
        seg_start[rc] = s + nl
        seg_end[rc] = e
        depth[lc] = depth[node] + 1
        depth[rc] = depth[node] + 1
        # right pushed first so the left subtree is expanded first
        stack[top] = rc
        top += 1
        stack[top] = lc
        top += 1

    k = n_nodes
    return (kind[:k].copy(), feature[:k].copy(), threshold[:k].copy(), left[:k].copy(),
            right[:k].copy(), n_node[:k].copy(), n_pos[:k].copy(), depth[:k].copy(),
            left_levels[:k].copy(), present_levels[:k].copy(), target_present[:k].copy())


@njit(cache=True, nogil=True)
def route(X, is_cat, kind, feature, threshold, left, right, left_levels):
    """Leaf id reached by every row of ``X``."""
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    n_lv = left_levels.shape[1]
    for i in range(n):
        node = 0
        while kind[node] != LEAF:
            v = X[i, feature[node]]
            if kind[node] == LEVEL_SPLIT:
                c = int(v)
                go_left = c >= 0 and c < n_lv and left_levels[node, c]
            else:
                go_left = v <= threshold[node]
            node = left[node] if go_left else right[node]
        out[i] = node
    return out
