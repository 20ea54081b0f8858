"""Central finite-difference gradient checking shared by the unit and
acceptance tests."""

import numpy as np


def fd_gradcheck(fn, params, rng, n_coords=20, h=1e-5, rtol=1e-4):
    """Compare analytic gradients of fn() against central differences.

    fn rebuilds a scalar-output graph from the live parameter data on every
    call. For each parameter, up to n_coords random coordinates are perturbed
    by +/-h; the relative error |num - ana| / max(|num|, |ana|, 1e-8) must
    stay below rtol. Returns the worst relative error seen.
    """
    for p in params:
        p.zero_grad()
    fn().backward()
    grads = [p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        k = min(n_coords, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            f_hi = float(fn().data)
            flat[i] = old - h
            f_lo = float(fn().data)
            flat[i] = old
            num = (f_hi - f_lo) / (2.0 * h)
            ana = gflat[i]
            rel = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
            worst = max(worst, rel)
            assert rel < rtol, (
                f"gradient mismatch at coord {i}: numeric {num:.10g} "
                f"analytic {ana:.10g} rel {rel:.3g}")
    return worst
