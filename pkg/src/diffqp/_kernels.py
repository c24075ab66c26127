"""Numba kernels for the dynamic-column LDL^T factor.

Storage: column j of the strictly lower part of L lives in
``idx[start[j]:start[j]+nnz[j]]`` / ``val[...]`` with sorted row indices and
``cap[j] >= nnz[j]`` reserved slots. A column that outgrows its slots is
moved to the end of the pool with doubled capacity; the pool itself doubles
when full. ``used[0]`` is the first free pool slot.

Every kernel returns a status code (0 ok) and a flop count.
"""
import numpy as np
import numba as nb

OK = 0
ZERO_PIVOT = 1
POSITIVE_PIVOT = 2


@nb.njit(cache=True)
def _reserve(start, nnz, cap, idx, val, used, j, need):
    if cap[j] >= need:
        return idx, val
    newcap = max(need, 2 * cap[j], 4)
    if used[0] + newcap > idx.shape[0]:
        size = max(2 * idx.shape[0], used[0] + newcap)
        idx2 = np.empty(size, dtype=np.int64)
        val2 = np.empty(size, dtype=np.float64)
        idx2[: used[0]] = idx[: used[0]]
        val2[: used[0]] = val[: used[0]]
        idx, val = idx2, val2
    s = start[j]
    for t in range(nnz[j]):
        idx[used[0] + t] = idx[s + t]
        val[used[0] + t] = val[s + t]
    start[j] = used[0]
    cap[j] = newcap
    used[0] += newcap
    return idx, val


@nb.njit(cache=True)
def factorize(Kp, Ki, Kx, n, sign, eps, placeholder, thresh):
    """Up-looking LDL^T of K + eps*diag(sign) over the non-placeholder rows.

    Reads the upper triangle of each column of the symmetric matrix K.
    """
    parent = np.full(n, -1, dtype=np.int64)
    flag = np.empty(n, dtype=np.int64)
    lnz = np.zeros(n, dtype=np.int64)
    for k in range(n):
        flag[k] = k
        if placeholder[k]:
            continue
        for p in range(Kp[k], Kp[k + 1]):
            i = Ki[p]
            if i >= k or placeholder[i]:
                continue
            while flag[i] != k:
                if parent[i] == -1:
                    parent[i] = k
                lnz[i] += 1
                flag[i] = k
                i = parent[i]

    start = np.zeros(n, dtype=np.int64)
    cap = np.zeros(n, dtype=np.int64)
    total = 0
    for j in range(n):
        start[j] = total
        cap[j] = lnz[j] + 4
        total += cap[j]
    idx = np.zeros(max(total, 1), dtype=np.int64)
    val = np.zeros(max(total, 1), dtype=np.float64)
    used = np.array([total], dtype=np.int64)
    nnz = np.zeros(n, dtype=np.int64)
    D = np.ones(n, dtype=np.float64)

    y = np.zeros(n, dtype=np.float64)
    pattern = np.empty(n, dtype=np.int64)
    flops = 0
    for k in range(n):
        if placeholder[k]:
            continue
        top = n
        flag[k] = k
        y[k] = eps * sign[k]
        for p in range(Kp[k], Kp[k + 1]):
            i = Ki[p]
            if i > k or placeholder[i]:
                continue
            y[i] += Kx[p]
            length = 0
            while flag[i] != k:
                pattern[length] = i
                length += 1
                flag[i] = k
                i = parent[i]
            while length > 0:
                top -= 1
                length -= 1
                pattern[top] = pattern[length]
        dk = y[k]
        y[k] = 0.0
        while top < n:
            i = pattern[top]
            top += 1
            yi = y[i]
            y[i] = 0.0
            s = start[i]
            for p in range(s, s + nnz[i]):
                y[idx[p]] -= val[p] * yi
            flops += 2 * nnz[i]
            lki = yi / D[i]
            dk -= lki * yi
            flops += 3
            pos = s + nnz[i]
            idx[pos] = k
            val[pos] = lki
            nnz[i] += 1
        D[k] = dk
        if abs(dk) < thresh:
            return start, nnz, cap, idx, val, used, D, ZERO_PIVOT, k, flops
    return start, nnz, cap, idx, val, used, D, OK, -1, flops


@nb.njit(cache=True)
def solve(start, nnz, idx, val, D, placeholder, b):
    n = b.shape[0]
    x = b.copy()
    flops = 0
    for j in range(n):
        if placeholder[j]:
            x[j] = 0.0
            continue
        xj = x[j]
        if xj != 0.0:
            s = start[j]
            for p in range(s, s + nnz[j]):
                x[idx[p]] -= val[p] * xj
            flops += 2 * nnz[j]
    for j in range(n):
        x[j] /= D[j]
    flops += n
    for j in range(n - 1, -1, -1):
        s = start[j]
        acc = x[j]
        for p in range(s, s + nnz[j]):
            acc -= val[p] * x[idx[p]]
        flops += 2 * nnz[j]
        x[j] = acc
    return x, flops


@nb.njit(cache=True)
def _rank1_core(start, nnz, cap, idx, val, used, D, z, zpat, zlen, sigma, thresh):
    """Method C1 of Gill, Golub, Murray and Saunders along the sparse path.

    ``z`` is a dense work vector whose nonzeros are listed (sorted) in
    ``zpat[:zlen]``; it is left all-zero on exit.
    """
    n = D.shape[0]
    tmp_i = np.empty(n, dtype=np.int64)
    tmp_v = np.empty(n, dtype=np.float64)
    alpha = float(sigma)
    flops = 0
    while zlen > 0:
        j = zpat[0]
        p = z[j]
        z[j] = 0.0
        if p == 0.0:
            for t in range(1, zlen):
                zpat[t - 1] = zpat[t]
            zlen -= 1
            continue
        d = D[j]
        dbar = d + alpha * p * p
        if abs(dbar) < thresh:
            return idx, val, ZERO_PIVOT, flops
        beta = p * alpha / dbar
        alpha = d * alpha / dbar
        D[j] = dbar
        flops += 7
        # merge the column pattern with the remaining path of z
        s = start[j]
        a = s
        a_end = s + nnz[j]
        b = 1
        k = 0
        while a < a_end or b < zlen:
            if b >= zlen or (a < a_end and idx[a] < zpat[b]):
                tmp_i[k] = idx[a]
                tmp_v[k] = val[a]
                a += 1
            elif a >= a_end or zpat[b] < idx[a]:
                tmp_i[k] = zpat[b]
                tmp_v[k] = 0.0
                b += 1
            else:
                tmp_i[k] = idx[a]
                tmp_v[k] = val[a]
                a += 1
                b += 1
            k += 1
        for t in range(k):
            r = tmp_i[t]
            zr = z[r] - p * tmp_v[t]
            z[r] = zr
            tmp_v[t] += beta * zr
        flops += 4 * k
        idx, val = _reserve(start, nnz, cap, idx, val, used, j, k)
        s = start[j]
        for t in range(k):
            idx[s + t] = tmp_i[t]
            val[s + t] = tmp_v[t]
            zpat[t] = tmp_i[t]
        nnz[j] = k
        zlen = k
    return idx, val, OK, flops


@nb.njit(cache=True)
def rank1(start, nnz, cap, idx, val, used, D, w, sigma, thresh):
    n = D.shape[0]
    z = w.copy()
    zpat = np.empty(n, dtype=np.int64)
    zlen = 0
    for r in range(n):
        if z[r] != 0.0:
            zpat[zlen] = r
            zlen += 1
    return _rank1_core(start, nnz, cap, idx, val, used, D, z, zpat, zlen, sigma, thresh)


@nb.njit(cache=True)
def rowcol_add(start, nnz, cap, idx, val, used, D, placeholder, Kp, Ki, Kx, i, thresh):
    """Insert row/column i (currently a placeholder) from column i of K_eps."""
    n = D.shape[0]
    x = np.zeros(n, dtype=np.float64)
    for p in range(Kp[i], Kp[i + 1]):
        r = Ki[p]
        if r != i and placeholder[r]:
            continue
        x[r] += Kx[p]
    flops = 0
    # forward substitution with L11; the same sweep subtracts L31*D11*l12
    # from the entries below row i
    for k in range(i):
        yk = x[k]
        if yk == 0.0 or placeholder[k]:
            continue
        s = start[k]
        for p in range(s, s + nnz[k]):
            x[idx[p]] -= val[p] * yk
        flops += 2 * nnz[k]
    d22 = x[i]
    for k in range(i):
        if x[k] != 0.0 and not placeholder[k]:
            d22 -= x[k] * x[k] / D[k]
            flops += 3
    if d22 >= 0.0:
        return idx, val, POSITIVE_PIVOT, flops, d22
    if -d22 < thresh:
        return idx, val, ZERO_PIVOT, flops, d22
    # row i of L: l12 = D11^{-1} y
    for k in range(i):
        yk = x[k]
        if yk == 0.0 or placeholder[k]:
            continue
        lk = yk / D[k]
        flops += 1
        idx, val = _reserve(start, nnz, cap, idx, val, used, k, nnz[k] + 1)
        s = start[k]
        e = s + nnz[k]
        pos = e
        while pos > s and idx[pos - 1] > i:
            idx[pos] = idx[pos - 1]
            val[pos] = val[pos - 1]
            pos -= 1
        idx[pos] = i
        val[pos] = lk
        nnz[k] += 1
    # column i below the diagonal
    zpat = np.empty(n, dtype=np.int64)
    zlen = 0
    for r in range(i + 1, n):
        if x[r] != 0.0 and not placeholder[r]:
            zpat[zlen] = r
            zlen += 1
    idx, val = _reserve(start, nnz, cap, idx, val, used, i, zlen)
    s = start[i]
    root = np.sqrt(-d22)
    z = np.zeros(n, dtype=np.float64)
    for t in range(zlen):
        r = zpat[t]
        lr = x[r] / d22
        idx[s + t] = r
        val[s + t] = lr
        z[r] = lr * root
    flops += 2 * zlen
    nnz[i] = zlen
    D[i] = d22
    placeholder[i] = False
    idx, val, status, f2 = _rank1_core(start, nnz, cap, idx, val, used, D, z, zpat, zlen, 1, thresh)
    return idx, val, status, flops + f2, d22


@nb.njit(cache=True)
def rowcol_delete(start, nnz, cap, idx, val, used, D, placeholder, i, thresh):
    """Turn row/column i into a placeholder and fold its pivot into the trailing block."""
    n = D.shape[0]
    d22 = D[i]
    if d22 >= 0.0:
        return idx, val, POSITIVE_PIVOT, 0
    root = np.sqrt(-d22)
    z = np.zeros(n, dtype=np.float64)
    zpat = np.empty(n, dtype=np.int64)
    s = start[i]
    zlen = nnz[i]
    for t in range(zlen):
        r = idx[s + t]
        zpat[t] = r
        z[r] = val[s + t] * root
    flops = zlen
    for k in range(i):
        s = start[k]
        lo = s
        hi = s + nnz[k]
        while lo < hi:
            mid = (lo + hi) // 2
            if idx[mid] < i:
                lo = mid + 1
            else:
                hi = mid
        if lo < s + nnz[k] and idx[lo] == i:
            for p in range(lo, s + nnz[k] - 1):
                idx[p] = idx[p + 1]
                val[p] = val[p + 1]
            nnz[k] -= 1
    nnz[i] = 0
    D[i] = 1.0
    placeholder[i] = True
    idx, val, status, f2 = _rank1_core(start, nnz, cap, idx, val, used, D, z, zpat, zlen, -1, thresh)
    return idx, val, status, flops + f2
