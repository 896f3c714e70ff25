# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the accelerated backend.

Arrays arrive as 3-D C-contiguous views.  Axis-wise kernels take an
``(outer, n, inner)`` view so that one kernel serves every axis of an N-D
image.  Parallel loops use OpenMP; every kernel writes disjoint outputs per
iteration so results do not depend on the thread count.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange, parallel
from libc.stdlib cimport malloc, free
from libc.math cimport INFINITY, fabs, pow, log, ceil
from libc.stdint cimport int64_t, uint8_t, uint32_t

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _reflect(Py_ssize_t i, Py_ssize_t n) noexcept nogil:
    # whole-sample symmetric extension: ... 2 1 | 0 1 2 ... n-1 | n-2 ...
    cdef Py_ssize_t period
    if n == 1:
        return 0
    period = 2 * n - 2
    i = i % period
    if i < 0:
        i += period
    if i >= n:
        i = period - i
    return i


# ---------------------------------------------------------------------------
# separable convolution


def convolve_axis(const float[:, :, ::1] src, const double[::1] weights, float[:, :, ::1] out, int nthreads):
    """Correlate every line along axis 1 with `weights` (reflect boundary)."""
    cdef Py_ssize_t outer = src.shape[0], n = src.shape[1], inner = src.shape[2]
    cdef Py_ssize_t taps = weights.shape[0], half = taps // 2
    cdef Py_ssize_t p, o, i, k, q, j
    cdef float w
    cdef float *buf
    cdef double acc
    cdef float[::1] wf = np.asarray(weights, dtype=np.float32)

    if inner == 1:
        with nogil, parallel(num_threads=nthreads):
            buf = <float *> malloc((n + 2 * half) * sizeof(float))
            for o in prange(outer, schedule="static"):
                for i in range(n + 2 * half):
                    buf[i] = src[o, _reflect(i - half, n), 0]
                for i in range(n):
                    acc = 0.0
                    for k in range(taps):
                        acc = acc + wf[k] * buf[i + k]
                    out[o, i, 0] = <float> acc
            free(buf)
        return

    for p in prange(outer * n, nogil=True, num_threads=nthreads, schedule="static"):
        o = p // n
        i = p - o * n
        j = _reflect(i - half, n)
        w = wf[0]
        for q in range(inner):
            out[o, i, q] = w * src[o, j, q]
        for k in range(1, taps):
            j = _reflect(i + k - half, n)
            w = wf[k]
            for q in range(inner):
                out[o, i, q] = out[o, i, q] + w * src[o, j, q]


# ---------------------------------------------------------------------------
# B-spline prefilter and resampling


cdef void _prefilter_block(float *base, Py_ssize_t n, Py_ssize_t inner, Py_ssize_t q0, Py_ssize_t q1,
                           const double *poles, Py_ssize_t npoles, double gain, double *acc) noexcept nogil:
    # rows are lines of length `inner`; columns q0..q1-1 are filtered together so
    # the recursion walks memory contiguously even along the slowest axis
    cdef Py_ssize_t i, k, q, horizon
    cdef double z, zk, zn1, coef
    cdef float *row
    cdef float *prev
    for i in range(n):
        row = base + i * inner
        for q in range(q0, q1):
            row[q] = <float> (row[q] * gain)
    for k in range(npoles):
        z = poles[k]
        horizon = <Py_ssize_t> ceil(log(1e-12) / log(fabs(z)))
        # causal initialisation
        for q in range(q0, q1):
            acc[q - q0] = base[q]
        if horizon < n:
            zk = z
            for i in range(1, horizon):
                row = base + i * inner
                for q in range(q0, q1):
                    acc[q - q0] = acc[q - q0] + zk * row[q]
                zk = zk * z
            for q in range(q0, q1):
                base[q] = <float> acc[q - q0]
        else:
            zn1 = pow(z, <double> (n - 1))
            row = base + (n - 1) * inner
            for q in range(q0, q1):
                acc[q - q0] = acc[q - q0] + zn1 * row[q]
            zk = z
            for i in range(1, n - 1):
                row = base + i * inner
                coef = zk + zn1 * zn1 / zk
                for q in range(q0, q1):
                    acc[q - q0] = acc[q - q0] + coef * row[q]
                zk = zk * z
            for q in range(q0, q1):
                base[q] = <float> (acc[q - q0] / (1.0 - zn1 * zn1))
        # causal pass
        for i in range(1, n):
            row = base + i * inner
            prev = row - inner
            for q in range(q0, q1):
                row[q] = <float> (row[q] + z * prev[q])
        # anticausal initialisation and pass
        row = base + (n - 1) * inner
        prev = row - inner
        for q in range(q0, q1):
            row[q] = <float> (z / (z * z - 1.0) * (row[q] + z * prev[q]))
        for i in range(n - 2, -1, -1):
            row = base + i * inner
            prev = row + inner
            for q in range(q0, q1):
                row[q] = <float> (z * (prev[q] - row[q]))


def spline_prefilter_axis(float[:, :, ::1] data, const double[::1] poles, int nthreads):
    """In-place B-spline coefficient recursion along axis 1 (mirror boundary)."""
    cdef Py_ssize_t outer = data.shape[0], n = data.shape[1], inner = data.shape[2]
    cdef Py_ssize_t npoles = poles.shape[0]
    cdef Py_ssize_t chunk = 256, nchunks, p, o, c, q0, q1, k
    cdef double gain = 1.0, z
    cdef double *acc
    if n == 1 or npoles == 0:
        return
    for k in range(npoles):
        z = poles[k]
        gain = gain * (1.0 - z) * (1.0 - 1.0 / z)
    if inner < chunk:
        chunk = inner
    nchunks = (inner + chunk - 1) // chunk
    with nogil, parallel(num_threads=nthreads):
        acc = <double *> malloc(chunk * sizeof(double))
        for p in prange(outer * nchunks, schedule="static"):
            o = p // nchunks
            c = p - o * nchunks
            q0 = c * chunk
            q1 = q0 + chunk
            if q1 > inner:
                q1 = inner
            _prefilter_block(&data[o, 0, 0], n, inner, q0, q1, &poles[0], npoles, gain, acc)
        free(acc)


def resample_axis(const float[:, :, ::1] src, const int64_t[:, ::1] index, const double[:, ::1] weights,
                  float[:, :, ::1] out, int nthreads):
    """out[o, j, :] = sum_t weights[j, t] * src[o, index[j, t], :]."""
    cdef Py_ssize_t outer = src.shape[0], inner = src.shape[2]
    cdef Py_ssize_t m = index.shape[0], taps = index.shape[1]
    cdef Py_ssize_t p, o, j, t, q, s
    cdef double acc
    cdef float w

    if inner == 1:
        for p in prange(outer * m, nogil=True, num_threads=nthreads, schedule="static"):
            o = p // m
            j = p - o * m
            acc = 0.0
            for t in range(taps):
                acc = acc + weights[j, t] * src[o, index[j, t], 0]
            out[o, j, 0] = <float> acc
        return

    for p in prange(outer * m, nogil=True, num_threads=nthreads, schedule="static"):
        o = p // m
        j = p - o * m
        s = index[j, 0]
        w = <float> weights[j, 0]
        for q in range(inner):
            out[o, j, q] = w * src[o, s, q]
        for t in range(1, taps):
            s = index[j, t]
            w = <float> weights[j, t]
            for q in range(inner):
                out[o, j, q] = out[o, j, q] + w * src[o, s, q]


# ---------------------------------------------------------------------------
# rank filter


cdef inline real _med3(real a, real b, real c) noexcept nogil:
    if a < b:
        if b < c:
            return b
        return c if a < c else a
    if a < c:
        return a
    return c if b < c else b


cdef inline real _select(real *a, Py_ssize_t n, Py_ssize_t k) noexcept nogil:
    # k-th smallest of a[0:n]; branchless three-way partitioning keeps
    # mispredictions low and handles runs of equal values
    cdef Py_ssize_t lo = 0, hi = n, i, s, t
    cdef real p, x
    while hi - lo > 1:
        p = _med3(a[lo], a[(lo + hi) // 2], a[hi - 1])
        s = lo
        for i in range(lo, hi):
            x = a[i]
            a[i] = a[s]
            a[s] = x
            s += x < p
        if k < s:
            hi = s
            continue
        t = s
        for i in range(s, hi):
            x = a[i]
            a[i] = a[t]
            a[t] = x
            t += x <= p
        if k < t:
            return p
        lo = t
    return a[lo]


def median_filter(const real[:, :, ::1] src, const int64_t[:, ::1] offsets, real[:, :, ::1] out, int nthreads):
    """Lower median over the in-bounds part of the footprint."""
    cdef Py_ssize_t nz = src.shape[0], ny = src.shape[1], nx = src.shape[2]
    cdef Py_ssize_t K = offsets.shape[0]
    cdef Py_ssize_t row, z, y, x, k, cnt, zz, yy, xx, nvalid, xlo, xhi, base
    cdef Py_ssize_t rz = 0, ry = 0, rx = 0
    cdef bint inner_row
    cdef real *buf
    cdef int64_t *valid
    cdef const real *flat = &src[0, 0, 0]
    cdef int64_t[::1] foff = np.empty(K, dtype=np.int64)
    for k in range(K):
        rz = max(rz, abs(offsets[k, 0]))
        ry = max(ry, abs(offsets[k, 1]))
        rx = max(rx, abs(offsets[k, 2]))
        foff[k] = (offsets[k, 0] * ny + offsets[k, 1]) * nx + offsets[k, 2]
    xlo = rx if rx < nx else nx
    xhi = nx - rx if nx - rx > xlo else xlo

    with nogil, parallel(num_threads=nthreads):
        buf = <real *> malloc(K * sizeof(real))
        valid = <int64_t *> malloc(K * sizeof(int64_t))
        for row in prange(nz * ny, schedule="dynamic"):
            z = row // ny
            y = row - z * ny
            inner_row = z >= rz and z < nz - rz and y >= ry and y < ny - ry
            nvalid = 0
            for k in range(K):
                zz = z + offsets[k, 0]
                yy = y + offsets[k, 1]
                if zz >= 0 and zz < nz and yy >= 0 and yy < ny:
                    valid[nvalid] = k
                    nvalid = nvalid + 1
            for x in range(nx):
                if inner_row and x >= xlo and x < xhi:
                    base = (z * ny + y) * nx + x
                    for k in range(K):
                        buf[k] = flat[base + foff[k]]
                    cnt = K
                else:
                    cnt = 0
                    for k in range(nvalid):
                        xx = x + offsets[valid[k], 2]
                        if xx >= 0 and xx < nx:
                            buf[cnt] = src[z + offsets[valid[k], 0], y + offsets[valid[k], 1], xx]
                            cnt = cnt + 1
                out[z, y, x] = _select(buf, cnt, (cnt - 1) // 2)
        free(buf)
        free(valid)


def local_maxima(const real[:, :, ::1] src, const int64_t[:, ::1] offsets, uint8_t[:, :, ::1] out, int nthreads):
    """Mark voxels > 0 that no in-bounds footprint neighbour exceeds."""
    cdef Py_ssize_t nz = src.shape[0], ny = src.shape[1], nx = src.shape[2]
    cdef Py_ssize_t K = offsets.shape[0]
    cdef Py_ssize_t row, z, y, x, k, zz, yy, xx
    cdef real v
    cdef uint8_t ok
    for row in prange(nz * ny, nogil=True, num_threads=nthreads, schedule="dynamic"):
        z = row // ny
        y = row - z * ny
        for x in range(nx):
            v = src[z, y, x]
            ok = v > 0
            if ok:
                for k in range(K):
                    zz = z + offsets[k, 0]
                    yy = y + offsets[k, 1]
                    xx = x + offsets[k, 2]
                    if zz >= 0 and zz < nz and yy >= 0 and yy < ny and xx >= 0 and xx < nx:
                        if src[zz, yy, xx] > v:
                            ok = 0
                            break
            out[z, y, x] = ok


# ---------------------------------------------------------------------------
# Euclidean distance transform


cdef void _envelope(double *f, double *d, Py_ssize_t *v, double *zb, Py_ssize_t n, double w) noexcept nogil:
    # lower envelope of parabolas w*(x-q)^2 + f[q]; infinite sites are skipped
    cdef Py_ssize_t q, k = -1, p
    cdef double s
    for q in range(n):
        if f[q] == INFINITY:
            continue
        if k < 0:
            k = 0
            v[0] = q
            zb[0] = -INFINITY
            zb[1] = INFINITY
            continue
        # zb[0] = -inf stops the pop loop at k == 0
        while True:
            p = v[k]
            s = ((f[q] + w * q * q) - (f[p] + w * p * p)) / (2.0 * w * (q - p))
            if s <= zb[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        zb[k] = s
        zb[k + 1] = INFINITY
    if k < 0:
        for q in range(n):
            d[q] = INFINITY
        return
    p = 0
    for q in range(n):
        while zb[p + 1] < q:
            p += 1
        d[q] = w * (q - v[p]) * (q - v[p]) + f[v[p]]


def edt_pass(double[:, :, ::1] g, double w, int nthreads):
    """In-place min-plus transform along axis 1 with parabola weight `w`."""
    cdef Py_ssize_t outer = g.shape[0], n = g.shape[1], inner = g.shape[2]
    cdef Py_ssize_t p, o, q, i
    cdef double *f
    cdef double *d
    cdef double *zb
    cdef Py_ssize_t *v
    with nogil, parallel(num_threads=nthreads):
        f = <double *> malloc(n * sizeof(double))
        d = <double *> malloc(n * sizeof(double))
        zb = <double *> malloc((n + 1) * sizeof(double))
        v = <Py_ssize_t *> malloc(n * sizeof(Py_ssize_t))
        for p in prange(outer * inner, schedule="static"):
            o = p // inner
            q = p - o * inner
            for i in range(n):
                f[i] = g[o, i, q]
            _envelope(f, d, v, zb, n, w)
            for i in range(n):
                g[o, i, q] = d[i]
        free(f)
        free(d)
        free(zb)
        free(v)


# ---------------------------------------------------------------------------
# connected components


cdef inline Py_ssize_t _find(Py_ssize_t *parent, Py_ssize_t x) noexcept nogil:
    cdef Py_ssize_t r = x, nxt
    while parent[r] != r:
        r = parent[r]
    while parent[x] != r:
        nxt = parent[x]
        parent[x] = r
        x = nxt
    return r


def label_components(const uint8_t[:, :, ::1] mask, const int64_t[:, ::1] back_offsets, uint32_t[:, :, ::1] out):
    """Two-pass union-find labelling; ids follow raster order of first voxel."""
    cdef Py_ssize_t nz = mask.shape[0], ny = mask.shape[1], nx = mask.shape[2]
    cdef Py_ssize_t K = back_offsets.shape[0]
    cdef Py_ssize_t N = nz * ny * nx
    cdef Py_ssize_t z, y, x, k, zz, yy, xx, idx, nidx, ra, rb, count = 0
    cdef Py_ssize_t *parent = <Py_ssize_t *> malloc(N * sizeof(Py_ssize_t))
    cdef uint32_t *final
    if parent == NULL:
        raise MemoryError()
    with nogil:
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    idx = (z * ny + y) * nx + x
                    parent[idx] = idx
                    if not mask[z, y, x]:
                        continue
                    for k in range(K):
                        zz = z + back_offsets[k, 0]
                        yy = y + back_offsets[k, 1]
                        xx = x + back_offsets[k, 2]
                        if zz < 0 or zz >= nz or yy < 0 or yy >= ny or xx < 0 or xx >= nx:
                            continue
                        if not mask[zz, yy, xx]:
                            continue
                        nidx = (zz * ny + yy) * nx + xx
                        ra = _find(parent, idx)
                        rb = _find(parent, nidx)
                        if ra < rb:
                            parent[rb] = ra
                        elif rb < ra:
                            parent[ra] = rb
    final = <uint32_t *> malloc(N * sizeof(uint32_t))
    if final == NULL:
        free(parent)
        raise MemoryError()
    with nogil:
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    idx = (z * ny + y) * nx + x
                    if not mask[z, y, x]:
                        out[z, y, x] = 0
                        continue
                    ra = _find(parent, idx)
                    if ra == idx:
                        count += 1
                        final[idx] = <uint32_t> count
                    out[z, y, x] = final[ra]
    free(parent)
    free(final)
    return count


# ---------------------------------------------------------------------------
# seeded watershed


cdef struct HeapItem:
    double value
    int64_t age
    int64_t index


cdef inline bint _less(HeapItem a, HeapItem b) noexcept nogil:
    if a.value != b.value:
        return a.value < b.value
    return a.age < b.age


cdef inline void _push(HeapItem *heap, Py_ssize_t *size, HeapItem item) noexcept nogil:
    cdef Py_ssize_t i = size[0], parent
    size[0] += 1
    while i > 0:
        parent = (i - 1) // 2
        if _less(item, heap[parent]):
            heap[i] = heap[parent]
            i = parent
        else:
            break
    heap[i] = item


cdef inline HeapItem _pop(HeapItem *heap, Py_ssize_t *size) noexcept nogil:
    cdef HeapItem top = heap[0]
    cdef HeapItem last
    cdef Py_ssize_t i = 0, child, n
    size[0] -= 1
    n = size[0]
    if n == 0:
        return top
    last = heap[n]
    while True:
        child = 2 * i + 1
        if child >= n:
            break
        if child + 1 < n and _less(heap[child + 1], heap[child]):
            child += 1
        if _less(heap[child], last):
            heap[i] = heap[child]
            i = child
        else:
            break
    heap[i] = last
    return top


def watershed(const double[:, :, ::1] landscape, const int64_t[::1] seed_index, const uint8_t[:, :, ::1] mask,
              uint32_t[:, :, ::1] labels):
    """Priority flood over face neighbours.

    `labels` holds the seeds on entry; `seed_index` lists seed voxels (flat
    indices) in insertion order.  Ties in landscape value resolve FIFO.
    """
    cdef Py_ssize_t nz = landscape.shape[0], ny = landscape.shape[1], nx = landscape.shape[2]
    cdef Py_ssize_t N = nz * ny * nx
    cdef Py_ssize_t nseeds = seed_index.shape[0]
    cdef Py_ssize_t size = 0, s, idx, z, y, x, k, zz, yy, xx, nidx
    cdef int64_t age = 0
    cdef HeapItem item, nb
    cdef uint32_t lab
    cdef int dz[6]
    cdef int dy[6]
    cdef int dx[6]
    dz[:] = [-1, 1, 0, 0, 0, 0]
    dy[:] = [0, 0, -1, 1, 0, 0]
    dx[:] = [0, 0, 0, 0, -1, 1]
    cdef HeapItem *heap = <HeapItem *> malloc((N + 1) * sizeof(HeapItem))
    if heap == NULL:
        raise MemoryError()
    with nogil:
        for s in range(nseeds):
            idx = seed_index[s]
            z = idx // (ny * nx)
            y = (idx // nx) % ny
            x = idx % nx
            item.value = landscape[z, y, x]
            item.age = age
            item.index = idx
            age += 1
            _push(heap, &size, item)
        while size > 0:
            item = _pop(heap, &size)
            idx = item.index
            z = idx // (ny * nx)
            y = (idx // nx) % ny
            x = idx % nx
            lab = labels[z, y, x]
            for k in range(6):
                zz = z + dz[k]
                yy = y + dy[k]
                xx = x + dx[k]
                if zz < 0 or zz >= nz or yy < 0 or yy >= ny or xx < 0 or xx >= nx:
                    continue
                if labels[zz, yy, xx] != 0 or not mask[zz, yy, xx]:
                    continue
                labels[zz, yy, xx] = lab
                nb.value = landscape[zz, yy, xx]
                nb.age = age
                nb.index = (zz * ny + yy) * nx + xx
                age += 1
                _push(heap, &size, nb)
    free(heap)
