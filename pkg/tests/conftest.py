import numpy as np


def numerical_gradient(loss_fn, arr, h=1e-3):
    """Central finite differences on a float64 array, mutated in place."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + h
        fp = loss_fn()
        arr[i] = orig - h
        fm = loss_fn()
        arr[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def weighted_backward(out, seed):
    """Backprop d(sum(seed * out)) through the graph rooted at `out`."""
    topo, visited, stack = [], set(), [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    out.grad = np.asarray(seed, dtype=out.data.dtype)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def max_relative_error(analytic, numeric, floor=1e-4):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
