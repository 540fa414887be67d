"""Shared numeric oracles for the test suite."""

import numpy as np

FD_H = 1e-5
FD_RTOL = 1e-4


def scalar_block_oracle(block, x):
    """Straight-line numpy re-implementation of one decoder block, written
    independently of the autodiff engine (per-head python loops)."""
    b, s, d = x.shape
    nh = block.n_heads
    hd = d // nh
    eps = block.ln_eps

    def ln(v, gamma, beta):
        mu = v.mean(-1, keepdims=True)
        var = ((v - mu) ** 2).mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + eps) * gamma + beta

    h = ln(x, block.ln1_gamma.data, block.ln1_beta.data)
    q = h @ block.wq.data.T + block.bq.data
    k = h @ block.wk.data.T + block.bk.data
    v = h @ block.wv.data.T + block.bv.data
    att_out = np.zeros_like(x)
    for bi in range(b):
        for head in range(nh):
            sl = slice(head * hd, (head + 1) * hd)
            qs, ks, vs = q[bi, :, sl], k[bi, :, sl], v[bi, :, sl]
            scores = qs @ ks.T / np.sqrt(hd)
            for i in range(s):
                row = scores[i, :i + 1]
                e = np.exp(row - row.max())
                p = e / e.sum()
                att_out[bi, i, sl] = p @ vs[:i + 1]
    o = att_out @ block.wo.data.T + block.bo.data
    x1 = x + o
    h2 = ln(x1, block.ln2_gamma.data, block.ln2_beta.data)
    up = h2 @ block.w_up.data.T + block.b_up.data
    if block.w_gate is not None:
        g = h2 @ block.w_gate.data.T
        hidden = (g / (1.0 + np.exp(-g))) * up
    else:
        hidden = up / (1.0 + np.exp(-up))
    return x1 + hidden @ block.w_down.data.T + block.b_down.data


def finite_diff_grad(fn, tensor, coords=None, h=FD_H):
    """Central finite differences of scalar fn() w.r.t. tensor.data.

    `coords` restricts the check to a subset of flat indices (used for big
    composites); default checks every coordinate.
    """
    flat = tensor.data.ravel()
    coords = list(range(flat.size)) if coords is None else list(coords)
    grad = np.zeros(len(coords))
    for j, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        grad[j] = (fp - fm) / (2.0 * h)
    return coords, grad


def max_rel_err(analytic, numeric, floor=1e-3):
    """Worst per-coordinate relative error with a denominator floor.

    Central differences at h=1e-5 carry ~1e-8 absolute truncation noise, so
    coordinates with |grad| below `floor` are effectively judged by absolute
    difference (floor * rtol); pure relative error there would only measure
    fd noise.
    """
    analytic = np.asarray(analytic, dtype=float).ravel()
    numeric = np.asarray(numeric, dtype=float).ravel()
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def assert_grad_matches_fd(fn, tensors, coords_per_tensor=None, rtol=FD_RTOL):
    """fn() must rebuild the graph, run backward, and return the loss value;
    afterwards each tensor in `tensors` holds its analytic gradient."""
    fn()
    analytic = {id(t): t.grad.copy() for t in tensors}

    def loss_only():
        return fn()

    worst = 0.0
    for t in tensors:
        coords = None
        if coords_per_tensor is not None:
            coords = coords_per_tensor(t)
        coords, fd = finite_diff_grad(loss_only, t, coords)
        ana = analytic[id(t)].ravel()[list(coords)]
        worst = max(worst, max_rel_err(ana, fd))
    assert worst < rtol, f"gradient mismatch: max rel err {worst:.3g} >= {rtol}"
    return worst
