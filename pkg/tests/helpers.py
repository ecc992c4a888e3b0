"""Shared test oracles: brute-force references and finite differences."""

import numpy as np

from voxdiff.autodiff import TensorNode


def probe_loss(out, probe):
    """Scalar node sum(out * probe) for gradient checks against a fixed
    random projection."""
    return TensorNode(
        (out.values * probe).sum(),
        parents=(out,),
        backward=lambda g: out.accumulate_grad(g * probe),
    )


def brute_force_conv3d(x, w, b, stride=1, padding=1):
    """Nested-loop 3D convolution reference, deliberately independent of the
    vectorized implementation."""
    bsz, c_in, dx, dy, dz = x.shape
    c_out, c_in_w, k, _, _ = w.shape
    assert c_in == c_in_w
    xp = np.pad(
        x, ((0, 0), (0, 0), (padding, padding), (padding, padding), (padding, padding))
    )
    od = (dx + 2 * padding - k) // stride + 1
    oh = (dy + 2 * padding - k) // stride + 1
    ow = (dz + 2 * padding - k) // stride + 1
    out = np.zeros((bsz, c_out, od, oh, ow), dtype=np.float64)
    for n in range(bsz):
        for co in range(c_out):
            for i in range(od):
                for j in range(oh):
                    for l in range(ow):
                        acc = 0.0
                        for ci in range(c_in):
                            for a in range(k):
                                for e in range(k):
                                    for f in range(k):
                                        acc += (
                                            float(xp[n, ci, i * stride + a, j * stride + e, l * stride + f])
                                            * float(w[co, ci, a, e, f])
                                        )
                        out[n, co, i, j, l] = acc + float(b[co])
    return out


def finite_difference(loss_fn, array, h=1e-3):
    """Central finite differences of loss_fn() with respect to `array`
    (mutated in place and restored)."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        f_plus = loss_fn()
        flat[idx] = orig - h
        f_minus = loss_fn()
        flat[idx] = orig
        grad.reshape(-1)[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad


def assert_grads_close(analytic, fd, rtol, atol=1e-7):
    """Elementwise gradient comparison: relative where the gradient has
    magnitude, absolute in the near-zero regime."""
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    assert analytic.shape == fd.shape
    diff = np.abs(analytic - fd)
    denom = np.maximum(np.abs(analytic), np.abs(fd))
    small = denom < 1e-4
    assert np.all(diff[small] <= 10 * atol), (
        f"near-zero gradient mismatch: max abs diff {diff[small].max():.3e}"
    )
    rel = diff[~small] / denom[~small]
    if rel.size:
        assert rel.max() <= rtol, f"relative gradient error {rel.max():.3e} > {rtol}"


def brute_force_ssim3d(x, y, window=7, k1=0.01, k2=0.03, peak=1.0):
    """Per-window SSIM reference with explicit loops."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny_, nz = x.shape
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    values = []
    for i in range(nx - window + 1):
        for j in range(ny_ - window + 1):
            for l in range(nz - window + 1):
                wx = x[i : i + window, j : j + window, l : l + window]
                wy = y[i : i + window, j : j + window, l : l + window]
                mx = wx.mean()
                my = wy.mean()
                vx = (wx * wx).mean() - mx * mx
                vy = (wy * wy).mean() - my * my
                cov = (wx * wy).mean() - mx * my
                values.append(
                    ((2 * mx * my + c1) * (2 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2))
                )
    return float(np.mean(values))
