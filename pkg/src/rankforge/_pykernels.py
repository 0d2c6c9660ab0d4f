"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in the compiled
``_ckernels`` extension. Array arguments are C-contiguous float64; 2-D inputs
are ``(rows, cols)`` views of the caller's last dimension.
"""

import numpy as np


def layernorm_forward(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layernorm_backward(dy, xhat, rstd, gain):
    dgain = np.sum(dy * xhat, axis=0)
    dbias = np.sum(dy, axis=0)
    dxhat = dy * gain
    n = xhat.shape[1]
    dx = (rstd[:, None] / n) * (
        n * dxhat
        - dxhat.sum(axis=1, keepdims=True)
        - xhat * np.sum(dxhat * xhat, axis=1, keepdims=True)
    )
    return dx, dgain, dbias


def softmax_forward(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(y, dy):
    return y * (dy - np.sum(dy * y, axis=1, keepdims=True))


def _split_heads(x, heads):
    n, length, dim = x.shape
    return x.reshape(n, length, heads, dim // heads).transpose(0, 2, 1, 3)


def attention_forward(q, k, v, bias, heads):
    """Masked scaled dot-product attention on ``(n, l, dim)`` projections.

    Returns the merged-head context and the attention weights
    ``(n, heads, lq, lk)``; ``bias`` is the additive ``(n, lk)`` key mask.
    """
    n, lq, dim = q.shape
    dh = dim // heads
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    logits = np.matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)) + bias[:, None, None, :]
    p = softmax_forward(logits.reshape(-1, logits.shape[-1])).reshape(logits.shape)
    out = np.matmul(p, vh).transpose(0, 2, 1, 3).reshape(n, lq, dim)
    return np.ascontiguousarray(out), p


def attention_backward(dout, q, k, v, p, heads):
    n, lq, dim = q.shape
    dh = dim // heads
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    g = _split_heads(dout, heads)
    dv = np.matmul(p.transpose(0, 1, 3, 2), g)
    dp = np.matmul(g, vh.transpose(0, 1, 3, 2))
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) * (1.0 / np.sqrt(dh))
    dq = np.matmul(ds, kh)
    dk = np.matmul(ds.transpose(0, 1, 3, 2), qh)

    def merge(x, length):
        return np.ascontiguousarray(x.transpose(0, 2, 1, 3).reshape(n, length, dim))

    return merge(dq, lq), merge(dk, k.shape[1]), merge(dv, k.shape[1])


def scatter_add_rows(out, index, src):
    """``out[index[i]] += src[i]`` with repeated indices accumulated in order."""
    np.add.at(out, index, src)


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def point_ce(labels, scores):
    # labels are validated binary by the caller
    value = float(np.sum(np.where(labels > 0, _softplus(-scores), _softplus(scores))))
    return value, _sigmoid(scores) - labels


def pair_logistic(labels, scores):
    m = labels.shape[0]
    grad = np.zeros(m)
    counted = labels[:, None] > labels[None, :]
    if not counted.any():
        return 0.0, grad
    # diff[j, k] = s_k - s_j for the pair (j preferred over k)
    diff = scores[None, :] - scores[:, None]
    value = float(np.sum(_softplus(diff[counted])))
    weight = np.where(counted, _sigmoid(diff), 0.0)
    grad -= weight.sum(axis=1)
    grad += weight.sum(axis=0)
    return value, grad


def _log_softmax(scores):
    top = int(np.argmax(scores))
    shifted = scores - scores[top]
    e = np.exp(shifted)
    e[top] = 0.0
    # log1p keeps relative precision when the top score dominates
    return shifted - np.log1p(np.sum(e))


def _softmax_grad(labels, total, logp):
    p = np.exp(logp)
    grad = total * p - labels
    # a label holding all the mass: total * (p - 1) without cancellation
    owner = labels == total
    grad[owner] = total * np.expm1(logp[owner])
    return p, grad


def softmax_ce(labels, scores):
    return poly1_softmax_ce(labels, scores, 0.0)


def poly1_softmax_ce(labels, scores, epsilon):
    total = labels.sum()
    if total <= 0.0:
        return 0.0, np.zeros(labels.shape[0])
    logp = _log_softmax(scores)
    p, grad = _softmax_grad(labels, total, logp)
    value = float(-np.sum(labels * logp))
    if epsilon == 0.0:
        return value, grad
    weighted = float(np.sum(labels * p))
    value += epsilon * float(-np.sum(labels * np.expm1(logp)))
    gap = weighted - labels
    owner = labels == total
    gap[owner] = total * np.expm1(logp[owner])
    grad = grad + epsilon * p * gap
    return value, grad
