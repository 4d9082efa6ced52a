"""Finite-difference gradient oracle shared by the op tests and the acceptance suite.

Analytic gradients come from a float64 graph; the oracle is a central
difference (f(x+h) - f(x-h)) / 2h at randomly probed coordinates. Relative
error uses a small-denominator floor so that genuinely zero gradients are
compared absolutely.
"""

import numpy as np

from voxdiff import gradcore as gc


def central_diff(f, arrays: dict, name: str, index: tuple, h: float = 1e-3) -> float:
    """d f / d arrays[name][index] by central differences; f maps the dict to a float."""
    plus = {k: v.copy() for k, v in arrays.items()}
    minus = {k: v.copy() for k, v in arrays.items()}
    plus[name][index] += h
    minus[name][index] -= h
    return (f(plus) - f(minus)) / (2.0 * h)


def fd_check(build, arrays: dict, probes: int = 20, h: float = 1e-3,
             rtol: float = 1e-3, seed: int = 0) -> float:
    """Compare taped gradients of a scalar against central differences.

    build(graph, leaves) -> scalar Tensor, where leaves maps each name in
    `arrays` to a leaf. Probes `probes` random coordinates spread over all
    inputs and returns the max relative error (asserting it is < rtol).
    """
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    g = gc.Graph(dtype=np.float64)
    lv = {k: g.leaf(arrays[k]) for k in sorted(arrays)}
    out = build(g, lv)
    grads = gc.backward(g, out)

    def scalar_eval(vals):
        g2 = gc.Graph(dtype=np.float64)
        lv2 = {k: g2.leaf(vals[k]) for k in sorted(vals)}
        return float(build(g2, lv2).data)

    r = gc.rng(seed, "fd-probes")
    names = sorted(k for k in arrays if arrays[k].size > 0)
    worst = 0.0
    for i in range(probes):
        name = names[int(r.integers(len(names)))]
        flat = int(r.integers(arrays[name].size))
        index = np.unravel_index(flat, arrays[name].shape)
        num = central_diff(scalar_eval, arrays, name, index, h=h)
        gmap = grads.get(lv[name].nid)
        ana = 0.0 if gmap is None else float(gmap[index])
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
        worst = max(worst, err)
        assert err < rtol, (f"gradient mismatch for {name}{tuple(index)}: "
                            f"analytic {ana:.8g} vs numeric {num:.8g} (rel err {err:.3g})")
    return worst
