"""Independent straight-from-the-formula evaluators used as test oracles.

Everything here is deliberately written with plain Python loops, lists and
``math`` so it shares no code path with the package implementation: no
log-sum-exp rewriting, no vectorized matrix calls, no torch.
"""

import math


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def infonce_direction(anchors, others, tau):
    """-sum_k log( exp(a_k.o_k/tau) / sum_i exp(a_k.o_i/tau) )"""
    total = 0.0
    for k in range(len(anchors)):
        num = math.exp(dot(anchors[k], others[k]) / tau)
        den = sum(math.exp(dot(anchors[k], others[i]) / tau) for i in range(len(others)))
        total += -math.log(num / den)
    return total


def i2i_reference(inst_source, inst_target, tau):
    return infonce_direction(inst_source, inst_target, tau) + infonce_direction(inst_target, inst_source, tau)


def soft_assignments_reference(clusters, instances):
    """Row-per-instance softmax over clusters of the plain dot products."""
    out = []
    for p in instances:
        raw = [math.exp(dot(c, p)) for c in clusters]
        norm = sum(raw)
        out.append([r / norm for r in raw])
    return out


def new_clusters_reference(clusters, instances):
    """u_k = sum_i pi_i(k) * p_i"""
    pi = soft_assignments_reference(clusters, instances)
    dim = len(instances[0])
    new = []
    for k in range(len(clusters)):
        row = [0.0] * dim
        for i, p in enumerate(instances):
            for d in range(dim):
                row[d] += pi[i][k] * p[d]
        new.append(row)
    return new


def top_k_reference(instance, new_clusters, top_k):
    sims = [(dot(instance, u), -k) for k, u in enumerate(new_clusters)]
    order = sorted(range(len(new_clusters)), key=lambda k: (-sims[k][0], k))
    return order[:top_k]


def affine(weight, bias, x):
    return [dot(row, x) + b for row, b in zip(weight, bias)]


def fusion_mlp_reference(params, x):
    """Manual two-layer tanh MLP; params = (w1, b1, w2, b2) as nested lists."""
    w1, b1, w2, b2 = params
    hidden = [math.tanh(v) for v in affine(w1, b1, x)]
    return affine(w2, b2, hidden)


def mv_cluster_reference(instance, new_clusters, top_k, fusion_params):
    idx = top_k_reference(instance, new_clusters, top_k)
    concat = []
    for k in idx:
        concat.extend(new_clusters[k])
    return fusion_mlp_reference(fusion_params, concat)


def i2c_direction_reference(instances, views, new_clusters, tau):
    """-sum_k log( exp(p_k.q_k/tau) / (exp(p_k.q_k/tau) + sum_i exp(p_k.u_i/tau)) )"""
    total = 0.0
    for k, p in enumerate(instances):
        pos = math.exp(dot(p, views[k]) / tau)
        den = pos + sum(math.exp(dot(p, u) / tau) for u in new_clusters)
        total += -math.log(pos / den)
    return total


def i2c_space_reference(inst_source, inst_target, clusters_source, clusters_target,
                        top_k, fusion_source, fusion_target, tau, use_mv=True):
    new_source = new_clusters_reference(clusters_source, inst_source)
    new_target = new_clusters_reference(clusters_target, inst_target)
    if use_mv:
        views_source = [mv_cluster_reference(p, new_source, top_k, fusion_source) for p in inst_source]
        views_target = [mv_cluster_reference(p, new_target, top_k, fusion_target) for p in inst_target]
    else:
        views_source = [new_source[top_k_reference(p, new_source, 1)[0]] for p in inst_source]
        views_target = [new_target[top_k_reference(p, new_target, 1)[0]] for p in inst_target]
    s2t = i2c_direction_reference(inst_source, views_target, new_target, tau)
    t2s = i2c_direction_reference(inst_target, views_source, new_source, tau)
    return s2t + t2s


def fusion_params_from_module(fusion):
    """Extract (w1, b1, w2, b2) nested lists from a torch two-layer MLP."""
    linear1, _, linear2 = fusion
    return (
        linear1.weight.detach().tolist(),
        linear1.bias.detach().tolist(),
        linear2.weight.detach().tolist(),
        linear2.bias.detach().tolist(),
    )


def space_reference_args(space):
    """Pull everything the reference evaluator needs out of an InterestSpace."""
    return {
        "clusters_source": space.clusters_source.detach().tolist(),
        "clusters_target": space.clusters_target.detach().tolist(),
        "top_k": space.top_k,
        "fusion_source": fusion_params_from_module(space.fuse_source),
        "fusion_target": fusion_params_from_module(space.fuse_target),
    }


def ssl_reference(inst_source, inst_target, spaces, tau, use_i2i=True, use_i2c=True, use_mv=True):
    total = 0.0
    if use_i2i:
        total += i2i_reference(inst_source, inst_target, tau)
    if use_i2c:
        for space in spaces:
            total += i2c_space_reference(inst_source, inst_target, tau=tau, use_mv=use_mv, **space_reference_args(space))
    return total


def auc_reference(scores, labels):
    """O(n^2) pair counting with half-credit ties."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def pca_reference(points):
    """2-D projection via an explicit covariance eigen-decomposition."""
    import numpy as np

    pts = np.asarray(points, dtype=np.float64)
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:2]
    components = eigvecs[:, order].T
    for i in range(components.shape[0]):
        pivot = np.abs(components[i]).argmax()
        if components[i, pivot] < 0:
            components[i] = -components[i]
    return centered @ components.T


def finite_difference_gradient(loss_fn, parameter, probes, h=1e-5):
    """Central finite differences of a scalar loss at sampled entries of one tensor.

    ``probes`` is a list of flat indices; returns the numeric derivative per probe.
    The loss function must re-run the full forward pass on each call.
    """
    import torch

    flat = parameter.data.view(-1)
    grads = []
    for idx in probes:
        original = flat[idx].item()
        flat[idx] = original + h
        with torch.no_grad():
            up = float(loss_fn())
        flat[idx] = original - h
        with torch.no_grad():
            down = float(loss_fn())
        flat[idx] = original
        grads.append((up - down) / (2 * h))
    return grads


def check_gradients(loss_fn, named_parameters, probes_per_param=20, h=1e-5, rel_tol=1e-4, seed=0):
    """Compare autograd gradients of ``loss_fn()`` against central differences.

    Returns a list of (name, flat_index, analytic, numeric, relative_error)
    for every probe; raises AssertionError on the first violation.
    """
    import torch

    rng = torch.Generator().manual_seed(seed)
    named_parameters = [(n, p) for n, p in named_parameters if p.requires_grad]
    for _, p in named_parameters:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    results = []
    for name, param in named_parameters:
        numel = param.numel()
        count = min(probes_per_param, numel)
        probes = torch.randperm(numel, generator=rng)[:count].tolist()
        analytic = param.grad.view(-1) if param.grad is not None else torch.zeros(numel, dtype=param.dtype)
        numeric = finite_difference_gradient(loss_fn, param, probes, h=h)
        for idx, num in zip(probes, numeric):
            ana = float(analytic[idx])
            scale = max(abs(ana), abs(num))
            rel = abs(ana - num) / scale if scale > 1e-8 else 0.0
            results.append((name, idx, ana, num, rel))
            assert rel <= rel_tol, (
                f"gradient mismatch in {name}[{idx}]: analytic {ana:.10g} vs numeric {num:.10g} (rel {rel:.3g})"
            )
    return results
