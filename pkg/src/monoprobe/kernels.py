"""Hot inner loops, each with a numba version and a pure numpy version.

The public names at the bottom of the module point at the numba variant
unless ``MONOPROBE_DISABLE_NUMBA`` is set. All kernels operate on plain
ndarrays and never allocate autodiff state.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided

from ._accel import USE_NUMBA, njit


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


# --------------------------------------------------------------------------
# im2col / col2im
# --------------------------------------------------------------------------


def im2col_numpy(x, kh, kw, sh, sw, ph, pw):
    """(N, C, H, W) -> (N*OH*OW, C*kh*kw) patch matrix."""
    n, c, h, w = x.shape
    oh = conv_out_size(h, kh, sh, ph)
    ow = conv_out_size(w, kw, sw, pw)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    x = np.ascontiguousarray(x)
    s0, s1, s2, s3 = x.strides
    win = as_strided(
        x,
        shape=(n, oh, ow, c, kh, kw),
        strides=(s0, s2 * sh, s3 * sw, s1, s2, s3),
        writeable=False,
    )
    return win.reshape(n * oh * ow, c * kh * kw)


@njit
def im2col_numba(x, kh, kw, sh, sw, ph, pw):
    n, c, h, w = x.shape
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    cols = np.zeros((n * oh * ow, c * kh * kw), dtype=x.dtype)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                row = (b * oh + i) * ow + j
                for ch in range(c):
                    for u in range(kh):
                        y = i * sh - ph + u
                        if y < 0 or y >= h:
                            continue
                        base = (ch * kh + u) * kw
                        for v in range(kw):
                            xx = j * sw - pw + v
                            if xx >= 0 and xx < w:
                                cols[row, base + v] = x[b, ch, y, xx]
    return cols


def col2im_numpy(cols, shape, kh, kw, sh, sw, ph, pw):
    """Adjoint of :func:`im2col_numpy`: scatter-add patches back to (N, C, H, W)."""
    n, c, h, w = shape
    oh = conv_out_size(h, kh, sh, ph)
    ow = conv_out_size(w, kw, sw, pw)
    cols6 = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for u in range(kh):
        for v in range(kw):
            out[:, :, u : u + sh * oh : sh, v : v + sw * ow : sw] += cols6[:, :, u, v]
    return out[:, :, ph : ph + h, pw : pw + w]


@njit
def _col2im_numba(cols, n, c, h, w, kh, kw, sh, sw, ph, pw):
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                row = (b * oh + i) * ow + j
                for ch in range(c):
                    for u in range(kh):
                        y = i * sh - ph + u
                        if y < 0 or y >= h:
                            continue
                        base = (ch * kh + u) * kw
                        for v in range(kw):
                            xx = j * sw - pw + v
                            if xx >= 0 and xx < w:
                                out[b, ch, y, xx] += cols[row, base + v]
    return out


def col2im_numba(cols, shape, kh, kw, sh, sw, ph, pw):
    n, c, h, w = shape
    return _col2im_numba(np.ascontiguousarray(cols), n, c, h, w, kh, kw, sh, sw, ph, pw)


# --------------------------------------------------------------------------
# max pooling (no padding); ties resolve to the first row-major maximum
# --------------------------------------------------------------------------


def maxpool_forward_numpy(x, k, s):
    n, c, h, w = x.shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    x = np.ascontiguousarray(x)
    s0, s1, s2, s3 = x.strides
    win = as_strided(
        x, shape=(n, c, oh, ow, k, k), strides=(s0, s1, s2 * s, s3 * s, s2, s3), writeable=False
    ).reshape(n, c, oh, ow, k * k)
    a = win.argmax(axis=-1)
    out = np.take_along_axis(win, a[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * s + a // k
    colsi = np.arange(ow)[None, :] * s + a % k
    return out, (rows * w + colsi).astype(np.int64)


@njit
def maxpool_forward_numba(x, k, s):
    n, c, h, w = x.shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    idx = np.empty((n, c, oh, ow), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    best = x[b, ch, i * s, j * s]
                    bi = (i * s) * w + j * s
                    for u in range(k):
                        for v in range(k):
                            val = x[b, ch, i * s + u, j * s + v]
                            if val > best:
                                best = val
                                bi = (i * s + u) * w + j * s + v
                    out[b, ch, i, j] = best
                    idx[b, ch, i, j] = bi
    return out, idx


def maxpool_backward_numpy(dout, idx, shape):
    n, c, h, w = shape
    flat = idx.reshape(n * c, -1) + (np.arange(n * c) * (h * w))[:, None]
    dx = np.bincount(flat.ravel(), weights=dout.ravel(), minlength=n * c * h * w)
    return dx.astype(dout.dtype).reshape(shape)


@njit
def _maxpool_backward_numba(dout, idx, n, c, h, w):
    dx = np.zeros((n, c, h * w), dtype=dout.dtype)
    oh = dout.shape[2]
    ow = dout.shape[3]
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    dx[b, ch, idx[b, ch, i, j]] += dout[b, ch, i, j]
    return dx.reshape((n, c, h, w))


def maxpool_backward_numba(dout, idx, shape):
    n, c, h, w = shape
    return _maxpool_backward_numba(np.ascontiguousarray(dout), np.ascontiguousarray(idx), n, c, h, w)


def adaptive_bins(size, g):
    """Start/end indices of the ``g`` adaptive pooling bins over ``size`` cells."""
    starts = [(i * size) // g for i in range(g)]
    ends = [-((-(i + 1) * size) // g) for i in range(g)]
    return starts, ends


def adaptive_maxpool_numpy(x, g):
    n, c, h, w = x.shape
    out = np.empty((n, c, g, g), dtype=x.dtype)
    ys, ye = adaptive_bins(h, g)
    xs, xe = adaptive_bins(w, g)
    for i in range(g):
        for j in range(g):
            out[:, :, i, j] = x[:, :, ys[i] : ye[i], xs[j] : xe[j]].max(axis=(2, 3))
    return out


@njit
def _adaptive_maxpool_numba(x, g, ys, ye, xs, xe):
    n, c = x.shape[0], x.shape[1]
    out = np.empty((n, c, g, g), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(g):
                for j in range(g):
                    best = x[b, ch, ys[i], xs[j]]
                    for u in range(ys[i], ye[i]):
                        for v in range(xs[j], xe[j]):
                            if x[b, ch, u, v] > best:
                                best = x[b, ch, u, v]
                    out[b, ch, i, j] = best
    return out


def adaptive_maxpool_numba(x, g):
    h, w = x.shape[2], x.shape[3]
    ys, ye = adaptive_bins(h, g)
    xs, xe = adaptive_bins(w, g)
    return _adaptive_maxpool_numba(
        np.ascontiguousarray(x),
        g,
        np.asarray(ys, np.int64),
        np.asarray(ye, np.int64),
        np.asarray(xs, np.int64),
        np.asarray(xe, np.int64),
    )


# --------------------------------------------------------------------------
# bilinear sampling of an (H, W, C) raster at arbitrary points
# --------------------------------------------------------------------------


def bilinear_sample_numpy(img, xs, ys, fill=0.0):
    """Sample ``img`` at float pixel-centre coordinates; neighbours off the
    raster contribute ``fill``."""
    h, w, _ = img.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    out = np.zeros(xs.shape + (img.shape[2],), dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = np.where(ok[..., None], img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], fill)
            out += wy * wx * vals
    return out


@njit
def _bilinear_sample_numba(img, xs, ys, fill):
    h, w, c = img.shape
    m = xs.shape[0]
    out = np.zeros((m, c), dtype=np.float64)
    for p in range(m):
        x = xs[p]
        y = ys[p]
        x0 = int(np.floor(x))
        y0 = int(np.floor(y))
        fx = x - x0
        fy = y - y0
        for dy in range(2):
            wy = fy if dy == 1 else 1.0 - fy
            yy = y0 + dy
            for dx in range(2):
                wx = fx if dx == 1 else 1.0 - fx
                xx = x0 + dx
                wgt = wy * wx
                if yy >= 0 and yy < h and xx >= 0 and xx < w:
                    for ch in range(c):
                        out[p, ch] += wgt * img[yy, xx, ch]
                else:
                    for ch in range(c):
                        out[p, ch] += wgt * fill
    return out


def bilinear_sample_numba(img, xs, ys, fill=0.0):
    shape = xs.shape
    out = _bilinear_sample_numba(
        np.ascontiguousarray(img, dtype=np.float64),
        np.ascontiguousarray(xs, dtype=np.float64).ravel(),
        np.ascontiguousarray(ys, dtype=np.float64).ravel(),
        float(fill),
    )
    return out.reshape(shape + (img.shape[2],))


# --------------------------------------------------------------------------
# nearest-centroid assignment
# --------------------------------------------------------------------------


def assign_nearest_numpy(x, centroids, chunk=4096):
    """Return (labels, squared distances) of each row of ``x`` to its nearest centroid."""
    m = x.shape[0]
    labels = np.empty(m, dtype=np.int64)
    d2 = np.empty(m, dtype=np.float64)
    for lo in range(0, m, chunk):
        diff = x[lo : lo + chunk, None, :] - centroids[None, :, :]
        dist = np.einsum("ijk,ijk->ij", diff, diff)
        labels[lo : lo + chunk] = dist.argmin(axis=1)
        d2[lo : lo + chunk] = dist[np.arange(dist.shape[0]), labels[lo : lo + chunk]]
    return labels, d2


@njit
def _assign_nearest_numba(x, centroids):
    m, p = x.shape
    k = centroids.shape[0]
    labels = np.empty(m, dtype=np.int64)
    d2 = np.empty(m, dtype=np.float64)
    for i in range(m):
        best = np.inf
        bj = 0
        for j in range(k):
            s = 0.0
            for t in range(p):
                diff = x[i, t] - centroids[j, t]
                s += diff * diff
            if s < best:
                best = s
                bj = j
        labels[i] = bj
        d2[i] = best
    return labels, d2


def assign_nearest_numba(x, centroids):
    return _assign_nearest_numba(
        np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(centroids, dtype=np.float64)
    )


# --------------------------------------------------------------------------
# colour jitter: brightness, contrast, saturation, hue; clamp after each stage
# --------------------------------------------------------------------------

_LUMA = np.array([0.299, 0.587, 0.114])


def rgb_to_hsv(rgb):
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv):
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def color_jitter_numpy(img, b, c, s, h):
    x = np.clip(img * b, 0.0, 1.0)
    x = np.clip(c * x + (1.0 - c) * (x @ _LUMA).mean(), 0.0, 1.0)
    x = np.clip(s * x + (1.0 - s) * (x @ _LUMA)[..., None], 0.0, 1.0)
    if h != 0:
        hsv = rgb_to_hsv(x)
        hsv[..., 0] = (hsv[..., 0] + h) % 1.0
        x = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return x


@njit
def _clip01(v):
    return min(max(v, 0.0), 1.0)


@njit
def _color_jitter_numba(img, b, c, s, h):
    n = img.shape[0]
    x = np.empty((n, 3))
    total = 0.0
    for i in range(n):
        for ch in range(3):
            x[i, ch] = _clip01(img[i, ch] * b)
        total += 0.299 * x[i, 0] + 0.587 * x[i, 1] + 0.114 * x[i, 2]
    mean = total / max(n, 1)
    for i in range(n):
        for ch in range(3):
            x[i, ch] = _clip01(c * x[i, ch] + (1.0 - c) * mean)
        y = 0.299 * x[i, 0] + 0.587 * x[i, 1] + 0.114 * x[i, 2]
        for ch in range(3):
            x[i, ch] = _clip01(s * x[i, ch] + (1.0 - s) * y)
        if h != 0.0:
            r, g, bb = x[i, 0], x[i, 1], x[i, 2]
            maxc = max(r, g, bb)
            minc = min(r, g, bb)
            v = maxc
            delta = maxc - minc
            if delta <= 0.0:
                continue  # gray pixels carry no hue
            sat = delta / maxc
            rc = (maxc - r) / delta
            gc = (maxc - g) / delta
            bc = (maxc - bb) / delta
            if maxc == r:
                hue = bc - gc
            elif maxc == g:
                hue = 2.0 + rc - bc
            else:
                hue = 4.0 + gc - rc
            hue = (hue / 6.0) % 1.0
            hue = (hue + h) % 1.0
            k = np.floor(hue * 6.0)
            f = hue * 6.0 - k
            p = v * (1.0 - sat)
            q = v * (1.0 - sat * f)
            t = v * (1.0 - sat * (1.0 - f))
            sector = int(k) % 6
            if sector == 0:
                r, g, bb = v, t, p
            elif sector == 1:
                r, g, bb = q, v, p
            elif sector == 2:
                r, g, bb = p, v, t
            elif sector == 3:
                r, g, bb = p, q, v
            elif sector == 4:
                r, g, bb = t, p, v
            else:
                r, g, bb = v, p, q
            x[i, 0] = _clip01(r)
            x[i, 1] = _clip01(g)
            x[i, 2] = _clip01(bb)
    return x


def color_jitter_numba(img, b, c, s, h):
    shape = img.shape
    flat = np.ascontiguousarray(img, dtype=np.float64).reshape(-1, 3)
    return _color_jitter_numba(flat, b, c, s, h).reshape(shape)


# im2col is a strided-view copy; numpy beats the loop version at every conv
# shape in the benchmark, so it is used under both settings
im2col = im2col_numpy

if USE_NUMBA:
    col2im = col2im_numba
    maxpool_forward = maxpool_forward_numba
    maxpool_backward = maxpool_backward_numba
    adaptive_maxpool = adaptive_maxpool_numba
    bilinear_sample = bilinear_sample_numba
    assign_nearest = assign_nearest_numba
    color_jitter = color_jitter_numba
else:
    col2im = col2im_numpy
    maxpool_forward = maxpool_forward_numpy
    maxpool_backward = maxpool_backward_numpy
    adaptive_maxpool = adaptive_maxpool_numpy
    bilinear_sample = bilinear_sample_numpy
    assign_nearest = assign_nearest_numpy
    color_jitter = color_jitter_numpy
