import math

import torch


def cosine(u, v):
    norm_u = math.sqrt(sum(x * x for x in u))
    norm_v = math.sqrt(sum(x * x for x in v))
    if norm_u < 1e-12 or norm_v < 1e-12:
        return 0.0
    return sum(a * b for a, b in zip(u, v)) / (norm_u * norm_v)


def brute_force_contrastive(reps, labels, tau, clusters=None):
    """Direct positive-by-positive evaluation of the contrastive loss.

    With clusters=None this is the plain supervised form; otherwise
    positives are restricted to the anchor's cluster. Kept deliberately
    naive (python floats, explicit loops) as an independent oracle.
    """
    n = len(reps)
    total = 0.0
    for i in range(n):
        if labels[i] != 1:
            continue
        positives = [
            j
            for j in range(n)
            if j != i
            and labels[j] == 1
            and (clusters is None or clusters[j] == clusters[i])
        ]
        if not positives:
            continue
        denominator = sum(
            math.exp(cosine(reps[i], reps[a]) / tau) for a in range(n) if a != i
        )
        inner = sum(
            math.log(math.exp(cosine(reps[i], reps[p]) / tau) / denominator)
            for p in positives
        )
        total -= inner / len(positives)
    return total


def central_difference_gradients(loss_fn, params, step=1e-4):
    """Numeric gradients of loss_fn() w.r.t. each parameter tensor."""
    grads = []
    for param in params:
        grad = torch.zeros_like(param)
        flat = param.data.reshape(-1)
        grad_flat = grad.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                hi = float(loss_fn())
                flat[i] = orig - step
                lo = float(loss_fn())
                flat[i] = orig
            grad_flat[i] = (hi - lo) / (2.0 * step)
        grads.append(grad)
    return grads


def relative_group_error(analytic, numeric):
    """Norm of the gradient difference relative to the numeric norm."""
    diff = float(torch.linalg.vector_norm(analytic - numeric))
    scale = max(float(torch.linalg.vector_norm(numeric)), 1e-12)
    return diff / scale
